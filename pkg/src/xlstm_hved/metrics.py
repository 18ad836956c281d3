"""Overlap, surface-distance and reconstruction metrics."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .decoders import SegPrediction
from .errors import ContractViolation

PSNR_CAP_DB = 99.0


@dataclass
class RegionMasks:
    WT: np.ndarray
    TC: np.ndarray
    ET: np.ndarray
    spacing_mm: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def as_tuple(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        return self.WT, self.TC, self.ET

    def is_nested(self) -> bool:
        return bool(np.all(self.ET <= self.TC) and np.all(self.TC <= self.WT))


def enforce_nesting(pred: SegPrediction | np.ndarray, threshold: float | None = None,
                    spacing_mm=(1.0, 1.0, 1.0)) -> RegionMasks:
    """Threshold WT/TC/ET probabilities, then clip TC to WT and ET to TC.

    Accepts a :class:`SegPrediction` or a raw ``[3, D, H, W]`` / ``[1, 3, D, H, W]`` array.
    """
    if isinstance(pred, SegPrediction):
        probs, thr = pred.probs.data, pred.threshold
    else:
        probs, thr = np.asarray(pred), 0.5
    thr = thr if threshold is None else threshold
    if probs.ndim == 5:
        if probs.shape[0] != 1:
            raise ContractViolation("enforce_nesting works on one case at a time")
        probs = probs[0]
    if probs.ndim != 4 or probs.shape[0] != 3:
        raise ContractViolation(f"expected 3 region maps, got shape {probs.shape}")
    wt = probs[0] >= thr
    tc = (probs[1] >= thr) & wt
    et = (probs[2] >= thr) & tc
    return RegionMasks(wt, tc, et, tuple(spacing_mm))


def _same_shape(a, b, what):
    a, b = np.asarray(a, dtype=bool), np.asarray(b, dtype=bool)
    if a.shape != b.shape:
        raise ContractViolation(f"{what}: mask shapes differ, {a.shape} vs {b.shape}")
    return a, b


def dice_score(a, b) -> float:
    """Dice overlap in percent; two empty masks score 100."""
    a, b = _same_shape(a, b, "dice_score")
    total = int(a.sum()) + int(b.sum())
    if total == 0:
        return 100.0
    return 100.0 * 2.0 * int(np.logical_and(a, b).sum()) / total


def surface_voxels(mask: np.ndarray) -> np.ndarray:
    """Mask voxels with at least one face neighbour outside the mask or the volume."""
    mask = np.asarray(mask, dtype=bool)
    padded = np.pad(mask, 1, constant_values=False)
    interior = mask.copy()
    for axis in range(mask.ndim):
        for shift in (-1, 1):
            interior &= np.roll(padded, shift, axis=axis)[(slice(1, -1),) * mask.ndim]
    return mask & ~interior


def volume_diagonal(shape, spacing_mm) -> float:
    return float(np.sqrt(sum(((n - 1) * s) ** 2 for n, s in zip(shape, spacing_mm))))


def _directed_distances(src: np.ndarray, dst: np.ndarray, spacing: np.ndarray) -> np.ndarray:
    """Distance from every voxel of surface ``src`` to the nearest voxel of surface ``dst``."""
    _, nearest = ndimage.distance_transform_edt(~dst, sampling=spacing, return_indices=True)
    pts = np.argwhere(src)
    targets = nearest[(slice(None),) + tuple(pts.T)].T
    # recomputed from voxel coordinates so the value does not depend on the transform's rounding
    diff = (pts - targets) * spacing
    return np.sqrt((diff ** 2).sum(axis=1))


def nearest_rank(values: np.ndarray, percent: int) -> float:
    """1-based nearest-rank percentile: element ceil(percent/100 * n) of the sorted values."""
    values = np.sort(np.asarray(values, dtype=np.float64))
    n = values.size
    if n == 0:
        raise ContractViolation("percentile of an empty set")
    rank = max(1, (percent * n + 99) // 100)
    return float(values[rank - 1])


def hd95(a, b, spacing_mm=(1.0, 1.0, 1.0)) -> float:
    """95th percentile of the pooled surface-to-surface distances, in mm.

    Both masks empty gives 0; exactly one empty gives the volume diagonal.
    """
    a, b = _same_shape(a, b, "hd95")
    spacing = np.asarray(spacing_mm, dtype=np.float64)
    if spacing.shape != (a.ndim,) or np.any(spacing <= 0):
        raise ContractViolation(f"spacing {spacing_mm} does not fit a {a.ndim}-D mask")
    has_a, has_b = a.any(), b.any()
    if not has_a and not has_b:
        return 0.0
    if not (has_a and has_b):
        return volume_diagonal(a.shape, spacing)
    sa, sb = surface_voxels(a), surface_voxels(b)
    pooled = np.concatenate([_directed_distances(sa, sb, spacing), _directed_distances(sb, sa, spacing)])
    return nearest_rank(pooled, 95)


def psnr(recon, reference, data_range: float | None = None) -> float:
    """10 log10(range^2 / MSE) in dB, capped at 99 dB; range defaults to max - min of the reference."""
    recon = np.asarray(recon, dtype=np.float64)
    reference = np.asarray(reference, dtype=np.float64)
    if recon.shape != reference.shape:
        raise ContractViolation(f"psnr: shapes differ, {recon.shape} vs {reference.shape}")
    if data_range is None:
        data_range = float(reference.max() - reference.min())
    if not data_range > 0:
        raise ContractViolation("psnr needs a positive data range")
    mse = float(np.mean((recon - reference) ** 2))
    if mse == 0.0:
        return PSNR_CAP_DB
    return float(min(PSNR_CAP_DB, 10.0 * np.log10(data_range ** 2 / mse)))
