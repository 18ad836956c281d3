"""Synthetic brain-tumour phantoms with exact nested labels.

Tissue is a normalized sum of Gaussian blobs. The tumour is three nested
ellipsoids (WT contains TC contains ET). Each pseudo-modality is a gain times
the tissue map plus per-region contrast offsets plus Gaussian noise. The
default contrasts make the enhancing core visible only in T1c and the oedema
bright in FLAIR and T2, so which regions can be recovered depends on which
modalities are present.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..errors import ContractViolation
from .volume import PHANTOM_ROLES, Volume

# rows FLAIR, T1, T1c, T2; columns are the increments added inside WT, TC, ET.
# Net intensity offsets per compartment (oedema / non-enhancing core / enhancing):
#   FLAIR  +0.8 / +0.4 / +0.3     T1   -0.35 / -0.4 / -0.3
#   T1c     0.0 / -0.2 / +1.0     T2   +0.7 / +0.9 / +0.5
DEFAULT_CONTRAST = (
    (0.80, -0.40, -0.10),
    (-0.35, -0.05, 0.10),
    (0.00, -0.20, 1.20),
    (0.70, 0.20, -0.40),
)
DEFAULT_GAINS = (0.5, 0.8, 0.7, 0.5)
DEFAULT_RADII_64 = (14.0, 9.0, 5.0)


@dataclass
class PhantomSpec:
    extent: tuple[int, int, int] = (64, 64, 64)
    seed: int = 0
    n_tissue_blobs: int = 6
    tumor_center: tuple[float, float, float] | None = None   # None: seeded placement
    radii_mm: tuple[float, float, float] = DEFAULT_RADII_64
    noise_sigma: float = 0.03
    contrast_table: tuple = DEFAULT_CONTRAST
    base_gains: tuple[float, float, float, float] = DEFAULT_GAINS
    spacing_mm: tuple[float, float, float] = (1.0, 1.0, 1.0)
    aspect: tuple[float, float, float] = (1.0, 1.0, 1.0)   # per-axis stretch of all three ellipsoids

    def __post_init__(self):
        self.extent = tuple(int(n) for n in self.extent)
        self.radii_mm = tuple(float(r) for r in self.radii_mm)
        r_wt, r_tc, r_et = self.radii_mm
        if not r_wt > r_tc > r_et > 0:
            raise ContractViolation(f"radii must satisfy WT > TC > ET > 0, got {self.radii_mm}")
        if self.noise_sigma < 0:
            raise ContractViolation("noise_sigma must be >= 0")
        if np.shape(self.contrast_table) != (4, 3):
            raise ContractViolation("contrast_table must be 4 x 3")
        if len(self.base_gains) != 4:
            raise ContractViolation("base_gains needs one value per modality")
        if any(s <= 0 for s in self.spacing_mm) or any(a <= 0 for a in self.aspect):
            raise ContractViolation("spacing and aspect must be positive")
        if self.n_tissue_blobs < 1:
            raise ContractViolation("need at least one tissue blob")

    def semi_axes(self, radius_mm: float) -> np.ndarray:
        """Ellipsoid semi-axes in voxels for a given radius."""
        return radius_mm * np.asarray(self.aspect) / np.asarray(self.spacing_mm)

    def to_dict(self) -> dict:
        return {
            "extent": list(self.extent), "seed": int(self.seed), "n_tissue_blobs": self.n_tissue_blobs,
            "tumor_center": None if self.tumor_center is None else [float(c) for c in self.tumor_center],
            "radii_mm": list(self.radii_mm), "noise_sigma": self.noise_sigma,
            "contrast_table": [list(r) for r in self.contrast_table], "base_gains": list(self.base_gains),
            "spacing_mm": list(self.spacing_mm), "aspect": list(self.aspect),
        }


def _grid(extent):
    return np.meshgrid(*(np.arange(n, dtype=np.float64) for n in extent), indexing="ij")


def ellipsoid_mask(extent, center, semi_axes) -> np.ndarray:
    """Voxels whose centres satisfy sum(((x - c) / a)^2) <= 1."""
    grid = _grid(extent)
    q = sum(((g - c) / a) ** 2 for g, c, a in zip(grid, center, semi_axes))
    return q <= 1.0


def _check_fits(extent, center, semi_axes, what):
    for n, c, a in zip(extent, center, semi_axes):
        if c - a < 0 or c + a > n - 1:
            raise ContractViolation(
                f"{what} ellipsoid (centre {tuple(center)}, semi-axes {tuple(np.round(semi_axes, 2))}) "
                f"does not fit in extent {extent}")


def tissue_map(extent, n_blobs: int, rng: np.random.Generator) -> np.ndarray:
    grid = _grid(extent)
    size = np.asarray(extent, dtype=np.float64)
    t = np.zeros(extent)
    for _ in range(n_blobs):
        center = rng.uniform(0, size - 1)
        sigma = rng.uniform(0.08, 0.25) * size
        amp = rng.uniform(0.5, 1.0)
        t += amp * np.exp(-0.5 * sum(((g - c) / s) ** 2 for g, c, s in zip(grid, center, sigma)))
    lo, hi = t.min(), t.max()
    return (t - lo) / (hi - lo) if hi > lo else np.zeros(extent)


def _offset_inside(rng, room: float, aspect, spacing) -> np.ndarray:
    """Random displacement (voxels) of at most half the radial room, in ellipsoid-scaled space."""
    direction = rng.standard_normal(3)
    direction /= np.linalg.norm(direction) or 1.0
    mag = rng.uniform(0, 0.5 * room)
    return direction * mag * np.asarray(aspect) / np.asarray(spacing)


def generate_phantom(spec: PhantomSpec) -> Volume:
    """Four pseudo-modalities plus WT/TC/ET labels; a pure function of ``spec``."""
    rng = np.random.default_rng(spec.seed)
    extent = spec.extent
    r_wt, r_tc, r_et = spec.radii_mm
    ax_wt, ax_tc, ax_et = (spec.semi_axes(r) for r in spec.radii_mm)

    tissue = tissue_map(extent, spec.n_tissue_blobs, rng)
    if spec.tumor_center is None:
        lo, hi = ax_wt + 1.0, np.asarray(extent) - 2.0 - ax_wt
        if np.any(hi < lo):
            raise ContractViolation(f"WT radius {r_wt} mm does not fit in extent {extent}")
        center = rng.uniform(lo, hi)
    else:
        center = np.asarray(spec.tumor_center, dtype=np.float64)
    _check_fits(extent, center, ax_wt, "WT")
    c_tc = center + _offset_inside(rng, r_wt - r_tc, spec.aspect, spec.spacing_mm)
    c_et = c_tc + _offset_inside(rng, r_tc - r_et, spec.aspect, spec.spacing_mm)

    wt = ellipsoid_mask(extent, center, ax_wt)
    tc = ellipsoid_mask(extent, c_tc, ax_tc) & wt
    et = ellipsoid_mask(extent, c_et, ax_et) & tc
    regions = (wt, tc, et)

    table = np.asarray(spec.contrast_table, dtype=np.float64)
    mods = []
    for m in range(4):
        img = spec.base_gains[m] * tissue
        for r, mask in enumerate(regions):
            img = img + table[m, r] * mask
        img = img + rng.normal(0.0, spec.noise_sigma, size=extent) if spec.noise_sigma > 0 else img
        mods.append(img)
    data = np.stack(mods + [r.astype(np.float64) for r in regions])[None].astype(np.float32)
    return Volume(data, spec.spacing_mm, PHANTOM_ROLES)


def phantom_specs(count: int, seed: int, extent=(64, 64, 64), **overrides) -> list[PhantomSpec]:
    """Specs for a phantom set; item ``i`` uses seed ``seed XOR i``, radii scale with the extent."""
    if count < 1:
        raise ContractViolation("phantom count must be >= 1")
    scale = min(extent) / 64.0
    radii = overrides.pop("radii_mm", tuple(r * scale for r in DEFAULT_RADII_64))
    return [PhantomSpec(extent=tuple(extent), seed=int(seed) ^ i, radii_mm=radii, **overrides)
            for i in range(count)]


def generate_phantom_set(count: int, seed: int, extent=(64, 64, 64), **overrides) -> list[Volume]:
    return [generate_phantom(s) for s in phantom_specs(count, seed, extent, **overrides)]
