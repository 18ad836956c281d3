"""Finite-difference suites for every differentiable block.

Each case builder takes a seed and returns ``(objective, tensors)``: a
closure computing a scalar from the current values of ``tensors``. At 32-bit
the analytic gradient comes from a float32 build and the central differences
from a float64 twin built from the same seed, so the comparison measures the
backward rules rather than float32 rounding in the difference quotient.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .decoders import CSFE, SSFE, DualDecoder, DualFeatures, DuSFE
from .encoder import DimensionReduction, SpatialAttention
from .model import ModelConfig, XLSTMHVED
from .nn import Conv3d, GroupNorm, Linear, Module
from .subsets import ModalitySubset
from .tensor import Tensor, dtype_scope
from .tensor.gradcheck import check_gradients
from .tensor import functional as F
from .training import total_loss
from .vila import MlstmState, ViLA, ViLBlock, mlstm_step

# The differences are always taken on the float64 twin, with branch decisions
# replayed from the analytic pass.
# floor: absolute disagreement treated as agreement; sized to the analytic
# build's rounding (float32 accumulations reach ~1e-6 on O(1) gradients)
SETTINGS = {32: {"h": 1e-5, "tol": 1e-3, "floor": 1e-5}, 64: {"h": 1e-5, "tol": 1e-6, "floor": 1e-8}}

Builder = Callable[[int], tuple[Callable[[], Tensor], dict[str, Tensor]]]


def _leaf(rng, shape, scale=1.0) -> Tensor:
    return Tensor(rng.standard_normal(shape) * scale, requires_grad=True)


def _probe(rng, out_shape) -> np.ndarray:
    """Fixed random weights turning a tensor output into a scalar objective."""
    return rng.standard_normal(out_shape)


def _weighted(y: Tensor, w: np.ndarray) -> Tensor:
    return F.sum(F.mul(y, Tensor(w, dtype=y.dtype)))


def _params(module: Module, prefix: str = "", names=None) -> dict[str, Tensor]:
    own = dict(module.named_parameters())
    keep = own if names is None else {n: own[n] for n in names}
    return {prefix + n: p for n, p in keep.items()}


def case_conv3d(seed):
    rng = np.random.default_rng(seed)
    stride = int(rng.integers(1, 3))
    k = int(rng.choice([1, 3]))
    x = _leaf(rng, (1, 2, 5, 5, 5))
    w = _leaf(rng, (2, 2, k, k, k), 0.5)
    b = _leaf(rng, (2,))
    probe = _probe(rng, F.conv3d(x, w, b, stride, k // 2).shape)
    return (lambda: _weighted(F.conv3d(x, w, b, stride, k // 2), probe)), {"input": x, "kernel": w, "bias": b}


def case_linear(seed):
    rng = np.random.default_rng(seed)
    layer = Linear(5, 4, rng=rng)
    layer.bias.data = rng.standard_normal(4).astype(layer.bias.dtype)
    x = _leaf(rng, (3, 5))
    probe = _probe(rng, (3, 4))
    return (lambda: _weighted(layer(x), probe)), {"input": x, **_params(layer)}


def case_group_norm(seed):
    rng = np.random.default_rng(seed)
    norm = GroupNorm(4, groups=2)
    norm.gamma.data = (1 + 0.3 * rng.standard_normal(4)).astype(norm.gamma.dtype)
    norm.beta.data = rng.standard_normal(4).astype(norm.beta.dtype)
    x = _leaf(rng, (2, 4, 3, 3, 3))
    probe = _probe(rng, x.shape)
    return (lambda: _weighted(norm(x), probe)), {"input": x, **_params(norm)}


def case_primitives(seed):
    """Elementwise, reduction, shape and resampling primitives in one composite."""
    rng = np.random.default_rng(seed)
    x = _leaf(rng, (2, 3, 4, 4, 4))
    y = Tensor(rng.uniform(0.5, 2.0, (2, 3, 4, 4, 4)), requires_grad=True)
    m = _leaf(rng, (3, 4))
    probe = _probe(rng, (2, 3, 4, 4, 4))

    def f():
        a = F.softmax(x, axis=1)
        b = F.sigmoid(F.mul(x, y))
        c = F.exp(F.mul(F.log_sigmoid(x), 0.5))
        d = F.resample(F.resample(F.div(x, y), "down2"), "up2")
        e = F.sqrt(F.add(F.square(y), 1.0))
        mx = F.max(F.concat([x, F.neg(y)], axis=1), axis=1, keepdims=True)
        total = F.add(F.add(F.add(a, b), F.add(c, d)), F.add(e, mx))
        flat = F.mean(F.reshape(F.transpose(total, (0, 2, 3, 4, 1)), (2, 64, 3)), axis=1)
        mm = F.matmul(flat, m)
        return F.add(_weighted(total, probe), F.sum(F.square(mm)))

    return f, {"x": x, "y": y, "matrix": m}


def case_spatial_attention(seed):
    rng = np.random.default_rng(seed)
    block = SpatialAttention(rng=rng)
    block.conv.bias.data = rng.standard_normal(1).astype(block.conv.bias.dtype)
    x = _leaf(rng, (1, 3, 6, 6, 6))
    probe = _probe(rng, x.shape)
    return (lambda: _weighted(block(x), probe)), {"input": x, **_params(block)}


def case_drb_reduce(seed):
    rng = np.random.default_rng(seed)
    block = DimensionReduction(4, rng=rng)
    x = _leaf(rng, (1, 4, 3, 3, 3))
    probe = _probe(rng, (1, 2, 3, 3, 3))
    return (lambda: _weighted(block(x), probe)), {"input": x, **_params(block)}


def case_mlstm_step(seed):
    rng = np.random.default_rng(seed)
    B, d = 2, 3
    q, k, v = (_leaf(rng, (B, d)) for _ in range(3))
    i_pre, f_pre, o_pre = (_leaf(rng, (B,), 2.0) for _ in range(3))
    C = _leaf(rng, (B, d, d))
    n = _leaf(rng, (B, d))
    m = Tensor(rng.uniform(-1, 1, B), requires_grad=True)
    probe_h, probe_c = _probe(rng, (B, d)), _probe(rng, (B, d, d))

    def f():
        h, st = mlstm_step(MlstmState(C, n, m), q, k, v, i_pre, f_pre, o_pre)
        return F.add(_weighted(h, probe_h), _weighted(st.C, probe_c))

    return f, {"q": q, "k": k, "v": v, "i": i_pre, "f": f_pre, "o": o_pre, "C": C, "n": n, "m": m}


def case_vil_block(seed):
    """Forward then backward block over 8 tokens of width 4."""
    rng = np.random.default_rng(seed)
    fwd = ViLBlock(4, direction="forward", rng=rng)
    bwd = ViLBlock(4, direction="backward", rng=rng)
    t = _leaf(rng, (1, 8, 4))
    probe = _probe(rng, (1, 8, 4))
    tensors = {"tokens": t, **_params(fwd, "forward.", ["q.weight", "gates.weight", "out.weight"]),
               **_params(bwd, "backward.", ["k.weight", "v.weight", "norm.gamma"])}
    return (lambda: _weighted(bwd(fwd(t)), probe)), tensors


def case_vila_gate(seed):
    rng = np.random.default_rng(seed)
    block = ViLA(4, 8, rng=rng)
    x = _leaf(rng, (1, 4, 2, 2, 2))
    probe = _probe(rng, x.shape)
    tensors = {"input": x, **_params(block, "", ["stack.tokenizer.proj.weight", "stack.tokenizer.pos_embed",
                                                   "stack.blocks.0.v.weight", "stack.blocks.1.q.weight",
                                                   "stack.norm.gamma"])}
    return (lambda: _weighted(block(x), probe)), tensors


def _dual_inputs(rng, shape=(1, 4, 4, 4, 4)):
    return _leaf(rng, shape), _leaf(rng, shape)


def _dual_case(block, rng):
    f1, f2 = _dual_inputs(rng)
    p1, p2 = _probe(rng, f1.shape), _probe(rng, f2.shape)

    def f():
        out = block(DualFeatures(f1, f2))
        return F.add(_weighted(out.seg, p1), _weighted(out.rec, p2))

    return f, {"seg_features": f1, "rec_features": f2, **_params(block)}


def case_csfe(seed):
    rng = np.random.default_rng(seed)
    return _dual_case(CSFE(4, rng=rng), rng)


def case_ssfe(seed):
    rng = np.random.default_rng(seed)
    return _dual_case(SSFE(4, rng=rng), rng)


def case_dusfe_block(seed):
    rng = np.random.default_rng(seed)
    f, tensors = _dual_case(DuSFE(4, rng=rng), rng)
    keep = ["seg_features", "rec_features", "csfe.fuse.weight", "csfe.excite_rec.weight",
            "ssfe.squeeze_seg.weight", "ssfe.fuse.weight", "ssfe.excite_seg.weight"]
    return f, {k: tensors[k] for k in keep}


TOY_CHANNELS = (2, 4, 4, 4)


def case_decode(seed):
    """Both decoders with the exchange blocks, from bottleneck and skips of an 8^3 toy pyramid."""
    rng = np.random.default_rng(seed)
    dec = DualDecoder(TOY_CHANNELS, rng=rng)
    skips = [_leaf(rng, (1, c, 8 >> i, 8 >> i, 8 >> i)) for i, c in enumerate(TOY_CHANNELS)]
    bottleneck = _leaf(rng, (1, TOY_CHANNELS[-1], 1, 1, 1))
    p_seg, p_rec = _probe(rng, (1, 3, 8, 8, 8)), _probe(rng, (1, 4, 8, 8, 8))

    def f():
        seg, rec = dec(bottleneck, skips)
        return F.add(_weighted(seg.probs, p_seg), _weighted(rec, p_rec))

    tensors = {"bottleneck": bottleneck, "skip0": skips[0], "skip2": skips[2],
               **_params(dec, "", ["seg_stages.2.conv1.conv.weight", "rec_stages.0.conv2.norm.gamma",
                                   "exchange.1.ssfe.fuse.weight", "rec_head.weight"])}
    return f, tensors


def case_total_loss(seed):
    """End to end: encoder input and sampled parameters through the full objective."""
    rng = np.random.default_rng(seed)
    # 16^3 is the smallest extent whose last stride-2 level still sees a 3^3 window
    model = XLSTMHVED(ModelConfig(channels=TOY_CHANNELS, extent=(16, 16, 16), seed=int(rng.integers(1 << 30))))
    images = Tensor(rng.standard_normal((1, 4, 16, 16, 16)), requires_grad=True)
    labels = (rng.random((1, 3, 16, 16, 16)) < 0.3).astype(np.float64)
    target_images = rng.standard_normal((1, 4, 16, 16, 16))
    subset = ModalitySubset.from_int(int(rng.integers(1, 16)))
    noise_seed = int(rng.integers(1 << 30))

    def f():
        out = model(images, subset, mode="sample", rng=np.random.default_rng(noise_seed))
        return total_loss(out.seg, out.recon, out.fused, labels, target_images, subset,
                          lambda_rec=0.5, lambda_kl=0.01).total

    names = ["encoder.modality_encoders.%d.levels.0.conv1.conv.weight" % subset.indices[0],
             "encoder.modality_encoders.%d.heads.3.logvar.weight" % subset.indices[-1],
             "vila.stack.blocks.0.q.weight", "decoder.exchange.0.csfe.fuse.weight"]
    return f, {"images": images, **_params(model, "", names)}


SUITES: dict[str, dict[str, Builder]] = {
    "tensor-core": {"conv3d": case_conv3d, "linear": case_linear, "group_norm": case_group_norm,
                    "primitives": case_primitives},
    "save-encoder": {"spatial_attention": case_spatial_attention, "drb_reduce": case_drb_reduce},
    "vila": {"mlstm_step": case_mlstm_step, "vil_block": case_vil_block, "vila_gate": case_vila_gate},
    "sfeca-decoders": {"csfe": case_csfe, "ssfe": case_ssfe, "dusfe_block": case_dusfe_block,
                       "decode": case_decode},
    "training": {"total_loss": case_total_loss},
}
MAX_COORDS = {"decode": 12, "total_loss": 5, "vil_block": 16, "vila_gate": 16, "ssfe": 32, "dusfe_block": 32}


@dataclass
class CaseResult:
    module: str
    block: str
    bits: int
    seed: int
    max_rel_err: float
    passed: bool
    worst: str


def run_case(module: str, block: str, seed: int, bits: int) -> CaseResult:
    builder = SUITES[module][block]
    h, tol, floor = SETTINGS[bits]["h"], SETTINGS[bits]["tol"], SETTINGS[bits]["floor"]
    max_coords = MAX_COORDS.get(block, 64)
    with dtype_scope(np.float64):
        f_ref, ref = builder(seed)
    if bits == 64:
        f_an, tensors = f_ref, ref
    else:
        with dtype_scope(np.float32):
            f_an, tensors = builder(seed)
    with dtype_scope(np.float32 if bits == 32 else np.float64):
        reports = check_gradients(f_an, tensors, h, tol, max_coords, seed=seed * 101, floor=floor,
                                  reference=(f_ref, ref))
    worst_name = max(reports, key=lambda n: reports[n].max_rel_err)
    worst_err = reports[worst_name].max_rel_err
    return CaseResult(module, block, bits, seed, worst_err, worst_err <= tol, worst_name)


def run_suite(modules=None, seeds=range(20), bits=(32, 64), progress=None) -> list[CaseResult]:
    modules = list(SUITES) if modules is None else list(modules)
    results = []
    for module in modules:
        for block in SUITES[module]:
            for b in bits:
                for s in seeds:
                    r = run_case(module, block, s, b)
                    results.append(r)
                    if progress is not None:
                        progress(r)
    return results
