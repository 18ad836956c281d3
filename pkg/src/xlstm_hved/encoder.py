"""Self-attention variational encoder.

One convolutional encoder per modality emits a diagonal Gaussian at each of
four pyramid levels. Gaussians of the available modalities are fused by a
product of Gaussians (with a standard-normal prior expert), sampled with the
reparameterization trick, and the coarsest level is merged with the unimodal
features through a dimension reduction block before the attention bottleneck.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .nn import LEAKY_SLOPE, Conv3d, ConvNormAct, GroupNorm, Module
from .subsets import ModalitySubset
from .tensor import ContractViolation, Tensor
from .tensor import functional as F

LOGVAR_MIN = -10.0
LOGVAR_MAX = 10.0


@dataclass
class LatentGaussian:
    mu: Tensor
    logvar: Tensor
    level: int
    modality: int | None = None

    @property
    def shape(self) -> tuple:
        return self.mu.shape

    def precision(self) -> np.ndarray:
        return np.exp(-self.logvar.data)


@dataclass
class EncoderOutput:
    """Per-level features and Gaussians of one modality encoder."""
    features: list[Tensor]
    gaussians: list[LatentGaussian]


@dataclass
class EncodedSubset:
    skips: list[Tensor]           # sampled (or mean) latents, one per level
    bottleneck: Tensor            # DRB output at the coarsest level
    fused: list[LatentGaussian]   # fused posteriors, used for the KL term


# ---------------------------------------------------------------------------
# Gaussian algebra
# ---------------------------------------------------------------------------

def pog_fuse(gaussians: list[LatentGaussian], include_prior: bool = True) -> LatentGaussian:
    """Product of diagonal Gaussians, elementwise.

    Precisions add; the mean is the precision-weighted average. Experts are
    summed in ascending modality order so the result does not depend on the
    order of ``gaussians``.
    """
    if not gaussians:
        raise ContractViolation("pog_fuse needs at least one expert")
    shape, level = gaussians[0].shape, gaussians[0].level
    for g in gaussians:
        if g.shape != shape or g.logvar.shape != shape:
            raise ContractViolation(f"pog_fuse: mixed shapes {g.shape} vs {shape}")
        if g.level != level:
            raise ContractViolation("pog_fuse: experts from different levels")
    experts = sorted(gaussians, key=lambda g: -1 if g.modality is None else g.modality)

    precision = weighted = None
    for g in experts:
        lam = F.exp(F.neg(g.logvar))
        lm = F.mul(lam, g.mu)
        precision = lam if precision is None else F.add(precision, lam)
        weighted = lm if weighted is None else F.add(weighted, lm)
    if include_prior:
        # prior N(0, 1): precision 1, contributes nothing to the weighted sum
        precision = F.add(precision, 1.0)
    mu = F.div(weighted, precision)
    logvar = F.neg(F.log(precision))
    return LatentGaussian(mu, logvar, level)


def reparameterize(g: LatentGaussian, eps: Tensor | np.ndarray | None, mode: str = "sample") -> Tensor:
    """``mu + exp(logvar / 2) * eps`` in sample mode, ``mu`` in mean mode."""
    if mode == "mean":
        return g.mu
    if mode != "sample":
        raise ContractViolation(f"unknown reparameterize mode {mode!r}")
    eps_arr = eps.data if isinstance(eps, Tensor) else np.asarray(eps, dtype=g.mu.dtype)
    if eps_arr.shape != g.mu.shape:
        raise ContractViolation(f"eps shape {eps_arr.shape} != latent shape {g.mu.shape}")
    if not np.isfinite(eps_arr).all():
        raise ContractViolation("eps must be finite")
    std = F.exp(F.mul(g.logvar, 0.5))
    return F.add(g.mu, F.mul(std, Tensor(eps_arr, dtype=g.mu.dtype)))


def kl_standard_normal(g: LatentGaussian) -> Tensor:
    """KL(N(mu, exp(logvar)) || N(0, 1)), summed over elements, averaged over batch."""
    term = F.sub(F.add(F.square(g.mu), F.exp(g.logvar)), F.add(g.logvar, 1.0))
    return F.mul(F.sum(term), 0.5 / g.mu.shape[0])


# ---------------------------------------------------------------------------
# blocks
# ---------------------------------------------------------------------------

class SpatialAttention(Module):
    """Channel mean/max pooling -> 7^3 conv -> sigmoid gate."""

    def __init__(self, kernel: int = 7, rng=None):
        self.conv = Conv3d(2, 1, kernel, padding=(kernel - 1) // 2, rng=rng)

    def gate(self, f: Tensor) -> Tensor:
        pooled = F.concat([F.mean(f, axis=1, keepdims=True), F.max(f, axis=1, keepdims=True)], axis=1)
        return F.sigmoid(self.conv(pooled))

    def forward(self, f: Tensor) -> Tensor:
        return F.mul(f, self.gate(f))


def spatial_attention(f: Tensor, block: SpatialAttention) -> Tensor:
    return block(f)


class DimensionReduction(Module):
    """1^3 conv halving the channel count -> group norm -> leaky ReLU."""

    def __init__(self, channels: int, rng=None):
        if channels % 2:
            raise ContractViolation(f"DRB needs an even channel count, got {channels}")
        self.channels = channels
        self.conv = Conv3d(channels, channels // 2, 1, rng=rng)
        self.norm = GroupNorm(channels // 2)

    def forward(self, f: Tensor) -> Tensor:
        if f.shape[1] != self.channels:
            raise ContractViolation(f"DRB built for {self.channels} channels, got {f.shape[1]}")
        return F.leaky_relu(self.norm(self.conv(f)), LEAKY_SLOPE)


def drb_reduce(f: Tensor, block: DimensionReduction) -> Tensor:
    if f.shape[1] % 2:
        raise ContractViolation(f"drb_reduce needs an even channel count, got {f.shape[1]}")
    return block(f)


class GaussianHead(Module):
    """Two 1^3 convolutions emitting mean and (clamped) log-variance."""

    def __init__(self, channels: int, rng=None):
        self.mu = Conv3d(channels, channels, 1, rng=rng)
        self.logvar = Conv3d(channels, channels, 1, rng=rng, init_scale=0.1)

    def forward(self, f: Tensor, level: int, modality: int | None = None) -> LatentGaussian:
        logvar = F.clip(self.logvar(f), LOGVAR_MIN, LOGVAR_MAX)
        return LatentGaussian(self.mu(f), logvar, level, modality)


class EncoderLevel(Module):
    def __init__(self, cin: int, cout: int, downsample: bool, attention: bool, rng=None):
        self.conv1 = ConvNormAct(cin, cout, 3, 2 if downsample else 1, rng=rng)
        self.conv2 = ConvNormAct(cout, cout, 3, 1, rng=rng)
        self.attention = SpatialAttention(rng=rng) if attention else None

    def forward(self, x: Tensor) -> Tensor:
        f = self.conv2(self.conv1(x))
        if self.attention is not None:
            f = self.attention(f)
        return f


class ModalityEncoder(Module):
    """Four-level encoder for one modality; level l has ``channels[l]`` maps at 1/2^l scale."""

    def __init__(self, channels=(8, 16, 32, 64), attention: bool = True, rng=None):
        self.channels = tuple(channels)
        cins = (1,) + self.channels[:-1]
        self.levels = [EncoderLevel(ci, co, i > 0, attention, rng)
                       for i, (ci, co) in enumerate(zip(cins, self.channels))]
        self.heads = [GaussianHead(c, rng) for c in self.channels]

    def forward(self, image: Tensor, modality: int | None = None) -> EncoderOutput:
        if image.ndim != 5 or image.shape[1] != 1:
            raise ContractViolation(f"modality encoder expects [B,1,D,H,W], got {image.shape}")
        factor = 2 ** (len(self.channels) - 1)
        if any(n % factor for n in image.shape[2:]):
            raise ContractViolation(f"spatial extent {image.shape[2:]} not divisible by {factor}")
        feats, gaussians = [], []
        x = image
        for lvl, (level, head) in enumerate(zip(self.levels, self.heads)):
            x = level(x)
            feats.append(x)
            gaussians.append(head(x, lvl, modality))
        return EncoderOutput(feats, gaussians)


def encode_modality(image: Tensor, encoder: ModalityEncoder, modality: int | None = None) -> EncoderOutput:
    return encoder(image, modality)


class SAVEEncoder(Module):
    """Per-modality encoders, multi-scale PoG fusion and the bottleneck DRB."""

    def __init__(self, channels=(8, 16, 32, 64), n_modalities: int = 4, attention: bool = True,
                 include_prior: bool = True, rng=None):
        self.channels = tuple(channels)
        self.include_prior = include_prior
        self.modality_encoders = [ModalityEncoder(channels, attention, rng) for _ in range(n_modalities)]
        # fused latent (C) concatenated with mean unimodal feature (C) -> C
        self.drb = DimensionReduction(2 * self.channels[-1], rng)

    def encode_subset(self, images: Tensor, subset: ModalitySubset, mode: str = "mean",
                      rng: np.random.Generator | None = None) -> EncodedSubset:
        subset.require_nonempty()
        if images.ndim != 5 or images.shape[1] != len(self.modality_encoders):
            raise ContractViolation(f"expected [B,{len(self.modality_encoders)},D,H,W], got {images.shape}")
        if mode == "sample" and rng is None:
            raise ContractViolation("sample mode needs a noise generator")
        outputs = {m: self.modality_encoders[m](images[:, m:m + 1], m) for m in subset.indices}
        n_levels = len(self.channels)
        skips, fused = [], []
        for lvl in range(n_levels):
            g = pog_fuse([outputs[m].gaussians[lvl] for m in subset.indices], self.include_prior)
            eps = rng.standard_normal(g.shape) if mode == "sample" else None
            skips.append(reparameterize(g, eps, mode))
            fused.append(g)
        unimodal = [outputs[m].features[-1] for m in subset.indices]
        pooled = unimodal[0]
        for f in unimodal[1:]:
            pooled = F.add(pooled, f)
        if len(unimodal) > 1:
            pooled = F.mul(pooled, 1.0 / len(unimodal))
        bottleneck = self.drb(F.concat([skips[-1], pooled], axis=1))
        return EncodedSubset(skips, bottleneck, fused)

    forward = encode_subset
