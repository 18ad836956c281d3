"""The full network: variational encoder -> attention bottleneck -> dual decoders."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .decoders import DualDecoder, SegPrediction
from .encoder import LatentGaussian, SAVEEncoder
from .nn import Module
from .subsets import ModalitySubset
from .tensor import ContractViolation, Tensor
from .vila import ViLA


@dataclass
class ModelConfig:
    channels: tuple[int, ...] = (8, 16, 32, 64)
    extent: tuple[int, int, int] = (32, 32, 32)
    n_modalities: int = 4
    n_regions: int = 3
    save_attention: bool = True
    vila: bool = True
    sfeca: bool = True
    include_prior: bool = True
    vil_blocks: int = 2
    vil_inner: int | None = None
    reduction: int = 2
    seed: int = 0

    def __post_init__(self):
        self.channels = tuple(int(c) for c in self.channels)
        self.extent = tuple(int(n) for n in self.extent)
        factor = 2 ** (len(self.channels) - 1)
        if any(n % factor for n in self.extent):
            raise ContractViolation(f"extent {self.extent} must be divisible by {factor}")

    @property
    def bottleneck_extent(self) -> tuple[int, int, int]:
        factor = 2 ** (len(self.channels) - 1)
        return tuple(n // factor for n in self.extent)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["channels"] = list(self.channels)
        d["extent"] = list(self.extent)
        return d


@dataclass
class ModelOutput:
    seg: SegPrediction
    recon: Tensor
    fused: list[LatentGaussian] = field(default_factory=list)


class XLSTMHVED(Module):
    def __init__(self, config: ModelConfig | None = None):
        self.config = config or ModelConfig()
        cfg = self.config
        rng = np.random.default_rng(cfg.seed)
        self.encoder = SAVEEncoder(cfg.channels, cfg.n_modalities, cfg.save_attention,
                                   cfg.include_prior, rng)
        n_tokens = int(np.prod(cfg.bottleneck_extent))
        self.vila = ViLA(cfg.channels[-1], n_tokens, cfg.vil_blocks, cfg.vil_inner, rng) if cfg.vila else None
        self.decoder = DualDecoder(cfg.channels, cfg.n_modalities, cfg.n_regions, cfg.sfeca,
                                   cfg.reduction, rng)

    def frozen_for_pretraining(self) -> list[str]:
        return ["decoder." + p for p in self.decoder.frozen_for_pretraining()]

    def forward(self, images: Tensor, subset: ModalitySubset, mode: str = "mean",
                rng: np.random.Generator | None = None) -> ModelOutput:
        """Segment and reconstruct from the modalities flagged in ``subset``.

        Channels of ``images`` outside the subset are never read.
        """
        if tuple(images.shape[2:]) != self.config.extent:
            raise ContractViolation(f"model built for extent {self.config.extent}, got {images.shape[2:]}")
        enc = self.encoder.encode_subset(images, subset, mode, rng)
        x = enc.bottleneck
        if self.vila is not None:
            x = self.vila(x)
        seg, recon = self.decoder(x, enc.skips)
        return ModelOutput(seg, recon, enc.fused)
