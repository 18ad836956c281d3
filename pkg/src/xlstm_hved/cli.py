"""Command-line entry point.

Exit codes: 0 success, 1 contract violation or usage error, 2 I/O or parse error.
Every output-producing command writes a JSON run manifest beside its outputs.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .data import Volume, generate_phantom_set, normalize_intensities, phantom_specs
from .data.casedir import read_dataset, write_case
from .data.nifti import read_nifti1, write_nifti1
from .errors import ContractViolation, NumericError, ParseError
from .subsets import MODALITIES, ModalitySubset

log = logging.getLogger("xlstm_hved")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


@dataclass
class RunManifest:
    command: str
    argv: list[str]
    seed: int | None = None
    config_path: str | None = None
    train_config: dict | None = None
    artifacts: dict[str, str] = field(default_factory=dict)
    tool_version: str = __version__
    extra: dict = field(default_factory=dict)

    def write(self, path) -> Path:
        path = Path(path)
        path.write_text(json.dumps(asdict(self), indent=2, sort_keys=True) + "\n", encoding="utf-8")
        return path


def _extent(text: str) -> tuple[int, int, int]:
    parts = [int(p) for p in text.lower().replace("x", ",").split(",") if p]
    if len(parts) == 1:
        parts *= 3
    if len(parts) != 3 or min(parts) < 1:
        raise argparse.ArgumentTypeError(f"extent must be N or D,H,W, got {text!r}")
    return tuple(parts)


def _subset(text: str) -> ModalitySubset:
    try:
        return ModalitySubset.parse(text)
    except ContractViolation as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_generate_phantoms(args, argv) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    specs = phantom_specs(args.count, args.seed, args.extent)
    volumes = generate_phantom_set(args.count, args.seed, args.extent)
    manifest = RunManifest("generate-phantoms", argv, seed=args.seed,
                           extra={"specs": [s.to_dict() for s in specs]})
    for i, vol in enumerate(volumes):
        case = write_case(vol, out / f"case_{i:03d}")
        manifest.artifacts[case.name] = str(case)
    manifest.write(out / "manifest.json")
    print(f"wrote {args.count} phantoms to {out}")
    return 0


def _load_config(args):
    from .training import TrainConfig

    if args.config is None:
        return TrainConfig(), None
    try:
        raw = json.loads(Path(args.config).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ParseError("config", f"invalid JSON: {exc}") from None
    config = TrainConfig.from_dict(raw)
    return config, str(args.config)


def _apply_overrides(config, args):
    for flag, name in (("no_save_attention", "save_attention"), ("no_vila", "vila"), ("no_sfeca", "sfeca")):
        if getattr(args, flag):
            config.module_toggles[name] = False
    if args.seed is not None:
        config.seed = args.seed
    if args.steps is not None:
        config.train_steps = args.steps
    config.validate()
    return config


def cmd_train(args, argv) -> int:
    from .plotting import plot_loss_curve
    from .training import Trainer, TrainingSet, format_log, model_from_checkpoint

    config, config_path = _load_config(args)
    config = _apply_overrides(config, args)
    dataset = TrainingSet.from_volumes(read_dataset(args.data))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.resume:
        # the run's own config wins; only the schedule length may be extended
        trainer = Trainer.resume(args.resume, dataset)
        if args.seed is not None and args.seed != trainer.config.seed:
            raise ContractViolation("--seed cannot change when resuming a run")
        if args.steps is not None:
            trainer.config.train_steps = args.steps
    else:
        model = None
        if args.init:
            model = model_from_checkpoint(args.init)
            toggles = {k: getattr(model.config, k) for k in config.module_toggles}
            if toggles != config.module_toggles:
                raise ContractViolation(f"--init checkpoint toggles {toggles} differ from config "
                                        f"{config.module_toggles}")
        trainer = Trainer(config, dataset, model)

    def report(row):
        if row["step"] % max(1, args.log_every) == 0:
            log.info("step %d %s loss=%.5f dice=%.5f rec=%.5f", row["step"], row["phase"],
                     row["loss"], row["dice_loss"], row["rec_loss"])

    trainer.run(args.phase, callback=report)
    ckpt = trainer.save(out / "checkpoint.bin")
    log_path = out / "train_log.csv"
    log_path.write_text(format_log(trainer.log), encoding="utf-8")
    curve = plot_loss_curve(trainer.log, out / "loss_curve.png")
    RunManifest("train", argv, seed=trainer.config.seed, config_path=config_path,
                train_config=trainer.config.to_dict(),
                artifacts={"checkpoint": str(ckpt), "log": str(log_path), "loss_curve": str(curve)},
                extra={"phase": args.phase, "data": str(args.data), "steps": trainer.step,
                       "init": args.init, "resume": args.resume}).write(out / "manifest.json")
    print(f"trained {len(trainer.log)} steps; checkpoint at {ckpt}")
    return 0


def cmd_eval(args, argv) -> int:
    from .evaluation import subset_eval_grid
    from .plotting import plot_grid_heatmap
    from .training import TrainingSet, model_from_checkpoint

    model = model_from_checkpoint(args.checkpoint)
    dataset = TrainingSet.from_volumes(read_dataset(args.data))
    grid = subset_eval_grid(model, dataset, seed=args.seed)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    grid.write_csv(out)
    heatmap = plot_grid_heatmap(grid, out.with_name(out.stem + "_heatmap.png"))
    RunManifest("eval", argv, seed=args.seed,
                artifacts={"grid": str(out), "heatmap": str(heatmap)},
                extra={"checkpoint": str(args.checkpoint), "data": str(args.data),
                       "cases": len(dataset)}).write(out.with_name(out.stem + ".manifest.json"))
    print(grid.to_csv(), end="")
    return 0


def _load_inputs(paths: list[str], subset: ModalitySubset) -> Volume:
    """Map ``--in`` files onto modality channels.

    Either one file per present modality (in FL, T1, T1c, T2 order) or one per
    modality, in which case the files of absent modalities are not read.
    """
    subset.require_nonempty()
    if len(paths) == subset.count:
        files = dict(zip(subset.indices, paths))
    elif len(paths) == len(MODALITIES):
        files = {m: paths[m] for m in subset.indices}
    else:
        raise ContractViolation(f"--in takes {subset.count} files (one per present modality) or "
                                f"{len(MODALITIES)}, got {len(paths)}")
    vols = {m: read_nifti1(p) for m, p in files.items()}
    extents = {v.extent for v in vols.values()}
    if len(extents) != 1:
        raise ContractViolation(f"input volumes have different extents: {sorted(extents)}")
    extent = extents.pop()
    data = np.zeros((1, len(MODALITIES)) + extent, dtype=np.float32)
    for m, v in vols.items():
        data[0, m] = v.data[0, 0]
    spacing = next(iter(vols.values())).spacing_mm
    return normalize_intensities(Volume(data, spacing, MODALITIES), subset)


def _infer(args):
    from .tensor import Tensor, no_grad
    from .training import model_from_checkpoint

    args.subset.require_nonempty()
    model = model_from_checkpoint(args.checkpoint)
    volume = _load_inputs(args.inputs, args.subset)
    with no_grad():
        out = model(Tensor(volume.data), args.subset, mode="mean")
    return volume, out


def cmd_segment(args, argv) -> int:
    from .metrics import enforce_nesting

    volume, out = _infer(args)
    masks = enforce_nesting(out.seg.probs.data[0], spacing_mm=volume.spacing_mm)
    labels = (masks.WT.astype(np.float32) + masks.TC + masks.ET).astype(np.float32)
    path = write_nifti1(labels, args.out, volume.spacing_mm)
    RunManifest("segment", argv, artifacts={"segmentation": str(path)},
                extra={"checkpoint": str(args.checkpoint), "inputs": list(args.inputs),
                       "subset": args.subset.mask, "labels": "0 background, 1 WT, 2 TC, 3 ET"}
                ).write(Path(args.out).with_name(Path(args.out).stem + ".manifest.json"))
    print(f"wrote {path}")
    return 0


def cmd_reconstruct(args, argv) -> int:
    from .subsets import SHORT_NAMES

    volume, out = _infer(args)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = RunManifest("reconstruct", argv, extra={"checkpoint": str(args.checkpoint),
                                                      "inputs": list(args.inputs),
                                                      "subset": args.subset.mask})
    for m, name in enumerate(SHORT_NAMES):
        path = write_nifti1(out.recon.data[0, m], out_dir / f"recon_{name}.nii", volume.spacing_mm)
        manifest.artifacts[name] = str(path)
    manifest.write(out_dir / "manifest.json")
    print(f"wrote {len(SHORT_NAMES)} reconstructions to {out_dir}")
    return 0


def cmd_gradcheck(args, argv) -> int:
    from .gradsuite import SUITES, run_suite

    modules = [args.module] if args.module else list(SUITES)
    failures = 0

    def show(r):
        nonlocal failures
        failures += not r.passed
        log.info("%s/%s %d-bit seed %d: max rel err %.2e %s", r.module, r.block, r.bits, r.seed,
                 r.max_rel_err, "ok" if r.passed else "FAIL")

    results = run_suite(modules, range(args.seeds), tuple(args.bits), progress=show)
    summary: dict[tuple, list] = {}
    for r in results:
        summary.setdefault((r.module, r.block, r.bits), []).append(r)
    for (module, block, bits), rs in summary.items():
        worst = max(rs, key=lambda r: r.max_rel_err)
        bad = sum(not r.passed for r in rs)
        print(f"{'PASS' if not bad else 'FAIL'} {module}/{block} {bits}-bit: {len(rs)} seeds, "
              f"max rel err {worst.max_rel_err:.2e}" + (f", {bad} failing" if bad else ""))
    return 0 if failures == 0 else 1


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    from .gradsuite import SUITES

    p = _Parser(prog="xlstm-hved", description="Missing-modality tumour segmentation toolkit.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("generate-phantoms", help="write synthetic cases to a data directory")
    g.add_argument("--count", type=int, required=True)
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--extent", type=_extent, default=(64, 64, 64), help="N or D,H,W (default 64)")
    g.set_defaults(func=cmd_generate_phantoms)

    t = sub.add_parser("train", help="train a model on a data directory")
    t.add_argument("--config", help="JSON object with TrainConfig fields")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--phase", choices=("pretrain", "joint", "both"), default="both")
    t.add_argument("--seed", type=int, help="override the config seed")
    t.add_argument("--steps", type=int, help="override train_steps")
    t.add_argument("--init", help="start from this checkpoint's parameters (fresh optimizer)")
    t.add_argument("--resume", help="continue a run from this checkpoint (parameters, optimizer, RNG)")
    t.add_argument("--no-save-attention", action="store_true")
    t.add_argument("--no-vila", action="store_true")
    t.add_argument("--no-sfeca", action="store_true")
    t.add_argument("--log-every", type=int, default=10)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint over all 15 modality subsets")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--out", required=True, help="grid CSV path; a heatmap PNG is written beside it")
    e.add_argument("--seed", type=int, default=0)
    e.set_defaults(func=cmd_eval)

    for name, func, helptext, outhelp in (
            ("segment", cmd_segment, "segment one case", "output label map (.nii)"),
            ("reconstruct", cmd_reconstruct, "reconstruct all four modalities", "output directory")):
        s = sub.add_parser(name, help=helptext)
        s.add_argument("--checkpoint", required=True)
        s.add_argument("--in", dest="inputs", nargs="+", required=True,
                       help="NIfTI files: one per present modality, or all four in FL,T1,T1c,T2 order")
        s.add_argument("--subset", type=_subset, required=True, help="mask like 1011 or names like fl,t1c,t2")
        s.add_argument("--out", required=True, help=outhelp)
        s.set_defaults(func=func)

    c = sub.add_parser("gradcheck", help="finite-difference checks of every differentiable block")
    c.add_argument("--module", choices=sorted(SUITES))
    c.add_argument("--seeds", type=int, default=20)
    c.add_argument("--bits", type=int, nargs="+", choices=(32, 64), default=[32, 64])
    c.set_defaults(func=cmd_gradcheck)
    return p


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    except SystemExit as exc:   # --help / --version
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(message)s", stream=sys.stderr)
    try:
        return args.func(args, argv)
    except (ContractViolation, NumericError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (ParseError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
