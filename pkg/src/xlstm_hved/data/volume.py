"""Volumes, channel roles and intensity normalization."""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from ..errors import ContractViolation
from ..subsets import MODALITIES, ModalitySubset

LABEL_ROLES = ("WT", "TC", "ET")
ROLES = MODALITIES + LABEL_ROLES + ("generic",)
PHANTOM_ROLES = MODALITIES + LABEL_ROLES


@dataclass
class Volume:
    """A [B, C, D, H, W] array with voxel spacing (mm) and one role per channel."""

    data: np.ndarray
    spacing_mm: tuple[float, float, float] = (1.0, 1.0, 1.0)
    channel_roles: tuple[str, ...] = field(default=())

    def __post_init__(self):
        self.data = np.asarray(self.data)
        if self.data.ndim != 5:
            raise ContractViolation(f"volume data must be [B,C,D,H,W], got shape {self.data.shape}")
        self.spacing_mm = tuple(float(s) for s in self.spacing_mm)
        if len(self.spacing_mm) != 3 or any(not s > 0 for s in self.spacing_mm):
            raise ContractViolation(f"spacing must be three positive values, got {self.spacing_mm}")
        if not self.channel_roles:
            self.channel_roles = ("generic",) * self.data.shape[1]
        self.channel_roles = tuple(self.channel_roles)
        if len(self.channel_roles) != self.data.shape[1]:
            raise ContractViolation(
                f"{len(self.channel_roles)} channel roles for {self.data.shape[1]} channels")
        for role in self.channel_roles:
            if role not in ROLES:
                raise ContractViolation(f"unknown channel role {role!r}")
        for i, role in enumerate(self.channel_roles):
            if role in LABEL_ROLES and not np.isin(self.data[:, i], (0, 1)).all():
                raise ContractViolation(f"label channel {role} must be binary")

    @property
    def extent(self) -> tuple[int, int, int]:
        return tuple(self.data.shape[2:])

    def channel(self, role: str) -> np.ndarray:
        """[B, D, H, W] data of the channel tagged ``role``."""
        try:
            return self.data[:, self.channel_roles.index(role)]
        except ValueError:
            raise ContractViolation(f"volume has no {role} channel") from None

    def select(self, roles) -> np.ndarray:
        """[B, len(roles), D, H, W] stack of the named channels."""
        return np.stack([self.channel(r) for r in roles], axis=1)

    def images(self) -> np.ndarray:
        return self.select(MODALITIES)

    def labels(self) -> np.ndarray:
        return self.select(LABEL_ROLES)


def normalize_intensities(volume: Volume, subset: ModalitySubset) -> Volume:
    """Z-score each available modality over its nonzero voxels; zero the missing ones.

    Voxels outside the support stay zero. A channel whose support has zero
    variance (or is empty) comes back as all zeros. Non-modality channels
    pass through untouched.
    """
    data = volume.data.astype(np.float32, copy=True)
    for i, role in enumerate(volume.channel_roles):
        if role not in MODALITIES:
            continue
        if not subset.bits[MODALITIES.index(role)]:
            data[:, i] = 0.0
            continue
        for b in range(data.shape[0]):
            ch = volume.data[b, i].astype(np.float64)
            support = ch != 0
            out = np.zeros_like(ch)
            if support.any():
                vals = ch[support]
                std = vals.std()
                if std > 0:
                    out[support] = (vals - vals.mean()) / std
            data[b, i] = out
    return replace(volume, data=data)


def concat_cases(volumes: list[Volume]) -> Volume:
    """Stack single-case volumes along the batch axis."""
    if not volumes:
        raise ContractViolation("no volumes to stack")
    first = volumes[0]
    for v in volumes[1:]:
        if v.channel_roles != first.channel_roles or v.extent != first.extent:
            raise ContractViolation("cannot batch volumes with different roles or extents")
    return Volume(np.concatenate([v.data for v in volumes], axis=0), first.spacing_mm, first.channel_roles)
