"""Objective, subset dropout, Adam and the two-phase training loop."""

from __future__ import annotations

import csv
import hashlib
import io
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .data.volume import Volume, normalize_intensities
from .decoders import SegPrediction
from .encoder import LatentGaussian, kl_standard_normal
from .errors import ContractViolation, NumericError, ParseError
from .model import ModelConfig, ModelOutput, XLSTMHVED
from .nn import Module
from .rng import get_state, set_state, substream
from .subsets import ModalitySubset, all_subsets
from .tensor import Tensor
from .tensor import functional as F

DICE_EPS = 1e-5
STRATEGIES = ("uniform15", "full_only")
TOGGLES = ("save_attention", "vila", "sfeca")
PHASES = ("pretrain", "joint")
LOG_FIELDS = ("step", "phase", "loss", "dice_loss", "rec_loss", "kl", "grad_norm")
RNG_STREAMS = ("subset", "batch", "noise")


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------

@dataclass
class TrainConfig:
    batch_size: int = 2
    learning_rate: float = 1e-4
    lambda_rec: float = 0.1
    lambda_kl: float = 0.01
    pretrain_steps: int = 0
    train_steps: int = 100
    seed: int = 0
    subset_strategy: str = "uniform15"
    module_toggles: dict = field(default_factory=lambda: {k: True for k in TOGGLES})
    grad_clip: float = 5.0
    channels: tuple[int, ...] = (8, 16, 32, 64)
    include_prior: bool = True

    def __post_init__(self):
        toggles = {k: True for k in TOGGLES}
        toggles.update(self.module_toggles or {})
        self.module_toggles = toggles
        self.channels = tuple(self.channels)
        self.validate()

    def validate(self) -> None:
        if self.batch_size < 1:
            raise ContractViolation("batch_size must be >= 1")
        if not self.learning_rate > 0:
            raise ContractViolation("learning_rate must be > 0")
        if self.lambda_rec < 0 or self.lambda_kl < 0:
            raise ContractViolation("loss weights must be >= 0")
        if self.pretrain_steps < 0 or self.train_steps < 0:
            raise ContractViolation("step counts must be >= 0")
        if self.subset_strategy not in STRATEGIES:
            raise ContractViolation(f"subset_strategy must be one of {STRATEGIES}")
        unknown = set(self.module_toggles) - set(TOGGLES)
        if unknown:
            raise ContractViolation(f"unknown module toggles {sorted(unknown)}")
        if not self.grad_clip > 0:
            raise ContractViolation("grad_clip must be > 0")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        """Strict JSON decoding; any unknown or ill-typed field raises :class:`ParseError` naming it."""
        if not isinstance(d, dict):
            raise ParseError("config", "top level must be a JSON object")
        known = {f.name for f in fields(cls)}
        for key in d:
            if key not in known:
                raise ParseError(key, "unknown config field")
        kinds = {"batch_size": int, "pretrain_steps": int, "train_steps": int, "seed": int,
                 "learning_rate": float, "lambda_rec": float, "lambda_kl": float, "grad_clip": float,
                 "subset_strategy": str, "include_prior": bool, "module_toggles": dict, "channels": list}
        for key, value in d.items():
            want = kinds[key]
            ok = isinstance(value, want) and not (want in (int, float) and isinstance(value, bool))
            if want is float and isinstance(value, int) and not isinstance(value, bool):
                ok = True
            if not ok:
                raise ParseError(key, f"expected {want.__name__}, got {type(value).__name__}")
        if "module_toggles" in d:
            for k, v in d["module_toggles"].items():
                if k not in TOGGLES:
                    raise ParseError(f"module_toggles.{k}", "unknown toggle")
                if not isinstance(v, bool):
                    raise ParseError(f"module_toggles.{k}", "expected bool")
        if "channels" in d and not all(isinstance(c, int) and c > 0 for c in d["channels"]):
            raise ParseError("channels", "expected a list of positive integers")
        try:
            return cls(**d)
        except ContractViolation as exc:
            raise ParseError("config", str(exc)) from None

    def to_dict(self) -> dict:
        d = asdict(self)
        d["channels"] = list(self.channels)
        return d

    def model_config(self, extent) -> ModelConfig:
        t = self.module_toggles
        return ModelConfig(channels=self.channels, extent=tuple(extent), save_attention=t["save_attention"],
                           vila=t["vila"], sfeca=t["sfeca"], include_prior=self.include_prior, seed=self.seed)


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

def sample_subset(rng: np.random.Generator, strategy: str = "uniform15") -> ModalitySubset:
    if strategy == "full_only":
        return ModalitySubset.full()
    if strategy != "uniform15":
        raise ContractViolation(f"unknown subset strategy {strategy!r}")
    return ModalitySubset.from_int(int(rng.integers(1, 16)))


def dice_loss(pred: SegPrediction | Tensor, target) -> Tensor:
    """Soft Dice loss averaged over the three regions; sums run over batch and space."""
    probs = pred.probs if isinstance(pred, SegPrediction) else pred
    t = target.data if isinstance(target, Tensor) else np.asarray(target)
    if probs.shape != t.shape:
        raise ContractViolation(f"dice_loss: prediction {probs.shape} vs target {t.shape}")
    t = Tensor(t, dtype=probs.dtype)
    axes = (0,) + tuple(range(2, probs.ndim))
    inter = F.sum(F.mul(probs, t), axis=axes)
    denom = F.add(F.add(F.sum(probs, axis=axes), F.sum(t, axis=axes)), DICE_EPS)
    ratio = F.div(F.add(F.mul(inter, 2.0), DICE_EPS), denom)
    return F.sub(1.0, F.mean(ratio))


def mse_loss(pred: Tensor, target) -> Tensor:
    t = target.data if isinstance(target, Tensor) else np.asarray(target)
    if pred.shape != t.shape:
        raise ContractViolation(f"mse_loss: prediction {pred.shape} vs target {t.shape}")
    return F.mean(F.square(F.sub(pred, Tensor(t, dtype=pred.dtype))))


def kl_total(gaussians: list[LatentGaussian]) -> Tensor:
    total = kl_standard_normal(gaussians[0])
    for g in gaussians[1:]:
        total = F.add(total, kl_standard_normal(g))
    return total


@dataclass
class LossTerms:
    total: Tensor
    dice: Tensor
    rec: Tensor
    kl: Tensor

    def values(self) -> dict[str, float]:
        return {"loss": self.total.item(), "dice_loss": self.dice.item(),
                "rec_loss": self.rec.item(), "kl": self.kl.item()}


def total_loss(seg: SegPrediction, recon: Tensor, kl_terms: list[LatentGaussian] | Tensor,
               targets, images, subset: ModalitySubset | None = None,
               lambda_rec: float = 0.1, lambda_kl: float = 0.01, phase: str = "joint") -> LossTerms:
    """Dice + lambda_rec * MSE + lambda_kl * KL (joint) or MSE + lambda_kl * KL (pretrain).

    ``images`` must hold all four modalities: reconstruction is supervised on
    the dropped ones too. ``subset`` only documents what the encoder saw.
    """
    if phase not in PHASES:
        raise ContractViolation(f"unknown phase {phase!r}")
    img = images.data if isinstance(images, Tensor) else np.asarray(images)
    if img.shape != recon.shape:
        raise ContractViolation(f"reconstruction targets need all modalities: {img.shape} vs {recon.shape}")
    d = dice_loss(seg, targets)
    rec = mse_loss(recon, img)
    kl = kl_terms if isinstance(kl_terms, Tensor) else kl_total(kl_terms)
    if phase == "pretrain":
        total = F.add(rec, F.mul(kl, lambda_kl))
    else:
        total = F.add(F.add(d, F.mul(rec, lambda_rec)), F.mul(kl, lambda_kl))
    return LossTerms(total, d, rec, kl)


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------

class Adam:
    """Adam with bias correction and optional global grad-norm clipping."""

    def __init__(self, params: dict[str, Tensor], lr: float = 1e-4, betas=(0.9, 0.999),
                 eps: float = 1e-8, clip: float | None = 5.0):
        if not lr > 0:
            raise ContractViolation("learning rate must be > 0")
        self.params = dict(params)
        self.lr, self.betas, self.eps, self.clip = lr, tuple(betas), eps, clip
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in self.params.items()}

    def grad_norm(self, names) -> float:
        sq = 0.0
        for k in names:
            g = self.params[k].grad
            if g is not None:
                sq += float(np.sum(np.square(g, dtype=np.float64)))
        return float(np.sqrt(sq))

    def step(self, frozen: set[str] = frozenset()) -> float:
        """One update of every non-frozen parameter; returns the pre-clip gradient norm."""
        names = [k for k in self.params if k not in frozen]
        norm = self.grad_norm(names)
        if not np.isfinite(norm):
            raise NumericError("non-finite gradient norm")
        scale = self.clip / norm if self.clip is not None and norm > self.clip else 1.0
        self.t += 1
        b1, b2 = self.betas
        c1, c2 = 1.0 - b1 ** self.t, 1.0 - b2 ** self.t
        for k in names:
            p = self.params[k]
            if p.grad is None:
                continue
            g = p.grad * p.dtype.type(scale) if scale != 1.0 else p.grad
            m, v = self.m[k], self.v[k]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * np.square(g)
            p.data = (p.data - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.dtype)
        return norm

    def state_dict(self) -> dict[str, np.ndarray]:
        out = {"__step__": np.array(self.t, dtype=np.int64)}
        for k in self.params:
            out[f"m/{k}"] = self.m[k].copy()
            out[f"v/{k}"] = self.v[k].copy()
        return out

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        self.t = int(state["__step__"])
        for k in self.params:
            self.m[k] = np.array(state[f"m/{k}"], dtype=self.params[k].dtype)
            self.v[k] = np.array(state[f"v/{k}"], dtype=self.params[k].dtype)


# ---------------------------------------------------------------------------
# data
# ---------------------------------------------------------------------------

@dataclass
class Batch:
    images: np.ndarray    # [B, 4, D, H, W], all modalities, normalized
    labels: np.ndarray    # [B, 3, D, H, W]

    def masked(self, subset: ModalitySubset) -> np.ndarray:
        """Images with the channels outside ``subset`` zeroed."""
        return self.images * subset.channel_mask()[None, :, None, None, None].astype(self.images.dtype)


@dataclass
class TrainingSet:
    images: np.ndarray
    labels: np.ndarray
    spacing_mm: tuple[float, float, float] = (1.0, 1.0, 1.0)

    @classmethod
    def from_volumes(cls, volumes: list[Volume]) -> "TrainingSet":
        if not volumes:
            raise ContractViolation("empty dataset")
        full = ModalitySubset.full()
        norm = [normalize_intensities(v, full) for v in volumes]
        images = np.concatenate([v.images() for v in norm]).astype(np.float32)
        labels = np.concatenate([v.labels() for v in norm]).astype(np.float32)
        return cls(images, labels, volumes[0].spacing_mm)

    def __len__(self) -> int:
        return self.images.shape[0]

    @property
    def extent(self) -> tuple[int, int, int]:
        return tuple(self.images.shape[2:])

    def batch(self, indices) -> Batch:
        idx = np.asarray(indices)
        return Batch(self.images[idx], self.labels[idx])

    def sample_indices(self, rng: np.random.Generator, batch_size: int) -> np.ndarray:
        n = len(self)
        return rng.choice(n, size=batch_size, replace=batch_size > n)


# ---------------------------------------------------------------------------
# stepping
# ---------------------------------------------------------------------------

def frozen_names(model: XLSTMHVED, phase: str) -> set[str]:
    if phase == "joint":
        return set()
    prefixes = tuple(model.frozen_for_pretraining())
    return {n for n, _ in model.named_parameters() if n.startswith(prefixes)}


def parameter_digest(model: Module, names=None) -> dict[str, str]:
    """SHA-256 of each parameter's bytes (used to verify the freeze contract)."""
    own = dict(model.named_parameters())
    names = own.keys() if names is None else names
    return {n: hashlib.sha256(own[n].data.tobytes()).hexdigest() for n in names}


def train_step(model: XLSTMHVED, batch: Batch, phase: str, optimizer: Adam, subset: ModalitySubset,
               noise_rng: np.random.Generator, lambda_rec: float = 0.1, lambda_kl: float = 0.01) -> dict:
    """Forward, backward and one optimizer update; returns the logged quantities."""
    if phase not in PHASES:
        raise ContractViolation(f"unknown phase {phase!r}")
    if batch.images.shape[1] != 4 or batch.labels.shape[1] != 3:
        raise ContractViolation("a training batch needs 4 modalities and 3 label channels")
    model.zero_grad()
    out: ModelOutput = model(Tensor(batch.masked(subset)), subset, mode="sample", rng=noise_rng)
    terms = total_loss(out.seg, out.recon, out.fused, batch.labels, batch.images, subset,
                       lambda_rec, lambda_kl, phase)
    values = terms.values()
    if not all(np.isfinite(v) for v in values.values()):
        raise NumericError(f"non-finite loss at {phase} step: {values}")
    terms.total.backward()
    values["grad_norm"] = optimizer.step(frozen_names(model, phase))
    return values


class Trainer:
    """Owns the model, optimizer and RNG substreams of one run."""

    def __init__(self, config: TrainConfig, dataset: TrainingSet, model: XLSTMHVED | None = None):
        self.config = config
        self.dataset = dataset
        self.model = model or XLSTMHVED(config.model_config(dataset.extent))
        if self.model.config.extent != dataset.extent:
            raise ContractViolation(f"model extent {self.model.config.extent} != data extent {dataset.extent}")
        self.optimizer = Adam(dict(self.model.named_parameters()), config.learning_rate,
                              clip=config.grad_clip)
        self.rngs = {name: substream(config.seed, name) for name in RNG_STREAMS}
        self.step = 0
        self.log: list[dict] = []

    def schedule(self, phase: str = "both") -> list[str]:
        c = self.config
        if phase == "both":
            return ["pretrain"] * c.pretrain_steps + ["joint"] * c.train_steps
        if phase == "pretrain":
            return ["pretrain"] * c.pretrain_steps
        if phase == "joint":
            return ["joint"] * c.train_steps
        raise ContractViolation(f"unknown phase {phase!r}")

    def train_one(self, phase: str) -> dict:
        c = self.config
        subset = sample_subset(self.rngs["subset"], c.subset_strategy)
        batch = self.dataset.batch(self.dataset.sample_indices(self.rngs["batch"], c.batch_size))
        values = train_step(self.model, batch, phase, self.optimizer, subset, self.rngs["noise"],
                            c.lambda_rec, c.lambda_kl)
        self.step += 1
        row = {"step": self.step, "phase": phase, **values}
        self.log.append(row)
        return row

    def run(self, phase: str = "both", n_steps: int | None = None, callback=None) -> list[dict]:
        """Run the remaining steps of the schedule (or at most ``n_steps`` of them)."""
        plan = self.schedule(phase)[self.step:] if phase == "both" else self.schedule(phase)
        if n_steps is not None:
            plan = plan[:n_steps]
        rows = []
        for ph in plan:
            row = self.train_one(ph)
            rows.append(row)
            if callback is not None:
                callback(row)
        return rows

    # -- persistence -------------------------------------------------------

    def checkpoint(self) -> Checkpoint:
        meta = {"rng_state": {k: get_state(g) for k, g in self.rngs.items()},
                "model_config": self.model.config.to_dict(), "train_config": self.config.to_dict(),
                "step": self.step}
        return Checkpoint(self.model.state_dict(), self.optimizer.state_dict(), meta)

    def save(self, path) -> Path:
        return save_checkpoint(self.checkpoint(), path)

    @classmethod
    def resume(cls, path, dataset: TrainingSet) -> "Trainer":
        ckpt = load_checkpoint(path)
        config = TrainConfig.from_dict(ckpt.meta["train_config"])
        trainer = cls(config, dataset, model_from_checkpoint(ckpt))
        trainer.optimizer.load_state_dict(ckpt.optimizer)
        for k, g in trainer.rngs.items():
            set_state(g, ckpt.meta["rng_state"][k])
        trainer.step = int(ckpt.meta["step"])
        return trainer


def model_from_checkpoint(ckpt: Checkpoint | str | Path) -> XLSTMHVED:
    if not isinstance(ckpt, Checkpoint):
        ckpt = load_checkpoint(ckpt)
    cfg = dict(ckpt.meta.get("model_config", {}))
    if not cfg:
        raise ParseError("model_config", "checkpoint carries no model configuration")
    model = XLSTMHVED(ModelConfig(**cfg))
    try:
        model.load_state_dict(ckpt.params)
    except (KeyError, ValueError) as exc:
        raise ParseError("parameters", str(exc)) from None
    return model


def save_model(model: XLSTMHVED, path, optimizer: Adam | None = None, meta: dict | None = None) -> Path:
    full_meta = {"model_config": model.config.to_dict(), **(meta or {})}
    return save_checkpoint(Checkpoint(model.state_dict(), optimizer.state_dict() if optimizer else {},
                                      full_meta), path)


def format_log(rows: list[dict]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(LOG_FIELDS)
    for r in rows:
        w.writerow([r["step"], r["phase"]] + [f"{r[k]:.8g}" for k in LOG_FIELDS[2:]])
    return buf.getvalue()
