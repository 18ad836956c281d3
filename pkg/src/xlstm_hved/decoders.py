"""Dual decoders with squeeze-fusion-excitation cross awareness.

A segmentation decoder and a reconstruction decoder mirror the encoder
pyramid. At their 16- and 8-channel stages the two branches exchange
information: channel gates come from a fused global-average-pooled vector,
spatial gates from a fused single-channel map.
"""

from __future__ import annotations

from dataclasses import dataclass

from .nn import LEAKY_SLOPE, Conv3d, ConvNormAct, Linear, Module
from .tensor import ContractViolation, Tensor
from .tensor import functional as F


@dataclass
class DualFeatures:
    seg: Tensor    # F1
    rec: Tensor    # F2

    def __post_init__(self):
        if self.seg.shape != self.rec.shape:
            raise ContractViolation(f"branch shapes differ: {self.seg.shape} vs {self.rec.shape}")


@dataclass
class SegPrediction:
    probs: Tensor              # [B, 3, D, H, W], channels WT, TC, ET
    threshold: float = 0.5


def _channel_broadcast(v: Tensor) -> Tensor:
    B, C = v.shape
    return F.reshape(v, (B, C, 1, 1, 1))


class CSFE(Module):
    """Channel squeeze-fusion-excitation."""

    def __init__(self, channels: int, reduction: int = 2, rng=None):
        hidden = max(1, channels // reduction)
        self.fuse = Linear(2 * channels, hidden, rng=rng)
        self.excite_seg = Linear(hidden, channels, rng=rng)
        self.excite_rec = Linear(hidden, channels, rng=rng)

    def gates(self, f: DualFeatures) -> tuple[Tensor, Tensor]:
        v1 = F.mean(f.seg, axis=(2, 3, 4))
        v2 = F.mean(f.rec, axis=(2, 3, 4))
        v_fuse = F.leaky_relu(self.fuse(F.concat([v1, v2], axis=1)), LEAKY_SLOPE)
        return F.sigmoid(self.excite_seg(v_fuse)), F.sigmoid(self.excite_rec(v_fuse))

    def forward(self, f: DualFeatures) -> DualFeatures:
        r1, r2 = self.gates(f)
        return DualFeatures(F.mul(f.seg, _channel_broadcast(r1)),
                            F.mul(f.rec, _channel_broadcast(r2)))


class SSFE(Module):
    """Spatial squeeze-fusion-excitation."""

    def __init__(self, channels: int, rng=None):
        self.squeeze_seg = Conv3d(channels, channels, 3, rng=rng)
        self.squeeze_rec = Conv3d(channels, channels, 3, rng=rng)
        self.fuse = Conv3d(2 * channels, 1, 3, rng=rng)
        self.excite_seg = Conv3d(1, 1, 1, rng=rng)
        self.excite_rec = Conv3d(1, 1, 1, rng=rng)

    def gates(self, f: DualFeatures) -> tuple[Tensor, Tensor]:
        s1 = F.leaky_relu(self.squeeze_seg(f.seg), LEAKY_SLOPE)
        s2 = F.leaky_relu(self.squeeze_rec(f.rec), LEAKY_SLOPE)
        m_fuse = self.fuse(F.concat([s1, s2], axis=1))
        return F.sigmoid(self.excite_seg(m_fuse)), F.sigmoid(self.excite_rec(m_fuse))

    def forward(self, f: DualFeatures) -> DualFeatures:
        g1, g2 = self.gates(f)
        return DualFeatures(F.mul(f.seg, g1), F.mul(f.rec, g2))


class DuSFE(Module):
    """cSFE then sSFE, with a residual connection per branch."""

    def __init__(self, channels: int, reduction: int = 2, rng=None):
        self.csfe = CSFE(channels, reduction, rng)
        self.ssfe = SSFE(channels, rng)

    def forward(self, f: DualFeatures) -> DualFeatures:
        g = self.ssfe(self.csfe(f))
        return DualFeatures(F.add(g.seg, f.seg), F.add(g.rec, f.rec))


def csfe(f: DualFeatures, block: CSFE) -> DualFeatures:
    return block(f)


def ssfe(f: DualFeatures, block: SSFE) -> DualFeatures:
    return block(f)


def dusfe_block(f: DualFeatures, block: DuSFE) -> DualFeatures:
    return block(f)


class DecoderStage(Module):
    """up2 -> concat skip -> two conv/norm/act layers."""

    def __init__(self, cin: int, cskip: int, cout: int, rng=None):
        self.conv1 = ConvNormAct(cin + cskip, cout, 3, rng=rng)
        self.conv2 = ConvNormAct(cout, cout, 3, rng=rng)

    def forward(self, x: Tensor, skip: Tensor) -> Tensor:
        up = F.resample(x, "up2")
        if up.shape[2:] != skip.shape[2:] or up.shape[0] != skip.shape[0]:
            raise ContractViolation(f"decoder stage: upsampled {up.shape} does not match skip {skip.shape}")
        return self.conv2(self.conv1(F.concat([up, skip], axis=1)))


class DualDecoder(Module):
    """Mirrored segmentation / reconstruction decoders."""

    def __init__(self, channels=(8, 16, 32, 64), n_modalities: int = 4, n_regions: int = 3,
                 sfeca: bool = True, reduction: int = 2, rng=None):
        self.channels = tuple(channels)
        self.sfeca = sfeca
        widths = self.channels[::-1]   # 64, 32, 16, 8
        self.seg_stages = [DecoderStage(widths[i], widths[i + 1], widths[i + 1], rng)
                           for i in range(len(widths) - 1)]
        self.rec_stages = [DecoderStage(widths[i], widths[i + 1], widths[i + 1], rng)
                           for i in range(len(widths) - 1)]
        # exchange after the stages producing the two finest widths
        self.exchange_stages = tuple(range(len(widths) - 1))[-2:]
        self.exchange = [DuSFE(widths[i + 1], reduction, rng) for i in self.exchange_stages] if sfeca else []
        self.seg_head = Conv3d(self.channels[0], n_regions, 1, rng=rng)
        self.rec_head = Conv3d(self.channels[0], n_modalities, 1, rng=rng)

    def frozen_for_pretraining(self) -> list[str]:
        """Parameter-name prefixes kept static while only reconstruction is trained."""
        names = [f"seg_stages.{i}." for i in range(1, len(self.seg_stages))]
        names.append("seg_head.")
        names += [f"exchange.{i}." for i in range(len(self.exchange))]
        return names

    def forward(self, bottleneck: Tensor, skips: list[Tensor]) -> tuple[SegPrediction, Tensor]:
        n = len(self.channels)
        if len(skips) != n:
            raise ContractViolation(f"decoder expects {n} skip levels, got {len(skips)}")
        for lvl, (s, c) in enumerate(zip(skips, self.channels)):
            if s.shape[1] != c:
                raise ContractViolation(f"skip level {lvl} has {s.shape[1]} channels, expected {c}")
        if bottleneck.shape[1] != self.channels[-1]:
            raise ContractViolation(
                f"bottleneck has {bottleneck.shape[1]} channels, expected {self.channels[-1]}")
        x_seg = x_rec = bottleneck
        ex = 0
        for i, (s_stage, r_stage) in enumerate(zip(self.seg_stages, self.rec_stages)):
            skip = skips[n - 2 - i]
            x_seg, x_rec = s_stage(x_seg, skip), r_stage(x_rec, skip)
            if self.sfeca and i in self.exchange_stages:
                dual = self.exchange[ex](DualFeatures(x_seg, x_rec))
                x_seg, x_rec = dual.seg, dual.rec
                ex += 1
        seg = SegPrediction(F.sigmoid(self.seg_head(x_seg)))
        return seg, self.rec_head(x_rec)


def decode(bottleneck: Tensor, skips: list[Tensor], decoder: DualDecoder) -> tuple[SegPrediction, Tensor]:
    return decoder(bottleneck, skips)


__all__ = ["DualFeatures", "SegPrediction", "CSFE", "SSFE", "DuSFE", "DecoderStage", "DualDecoder",
           "csfe", "ssfe", "dusfe_block", "decode"]
