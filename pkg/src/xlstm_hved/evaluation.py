"""Evaluation over all 15 modality subsets."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from pathlib import Path
from typing import Protocol

import numpy as np

from .errors import ContractViolation
from .metrics import dice_score, enforce_nesting, hd95, psnr
from .model import XLSTMHVED
from .subsets import SHORT_NAMES, ModalitySubset, all_subsets
from .tensor import Tensor, no_grad
from .training import TrainingSet

REGIONS = ("wt", "tc", "et")
METRIC_COLUMNS = ([f"dice_{r}" for r in REGIONS] + [f"hd95_{r}" for r in REGIONS]
                  + [f"psnr_{m}" for m in SHORT_NAMES])
CSV_HEADER = list(SHORT_NAMES) + METRIC_COLUMNS


class Predictor(Protocol):
    def predict(self, images: np.ndarray, subset: ModalitySubset, index: int) -> tuple[np.ndarray, np.ndarray]:
        """Return ``(probs [1,3,D,H,W], recon [1,4,D,H,W])`` for one case.

        ``images`` is [1, 4, D, H, W] with the channels outside ``subset`` zeroed;
        ``index`` is the case position in the dataset.
        """


class ModelPredictor:
    """Inference wrapper: posterior means, no graph recording."""

    def __init__(self, model: XLSTMHVED):
        self.model = model

    def predict(self, images, subset, index=0):
        with no_grad():
            out = self.model(Tensor(images), subset, mode="mean")
        return out.seg.probs.data, out.recon.data


@dataclass
class SubsetResultGrid:
    subsets: list[ModalitySubset]
    rows: np.ndarray                 # [15, len(METRIC_COLUMNS)]

    def __post_init__(self):
        if len(self.subsets) != 15 or self.rows.shape != (15, len(METRIC_COLUMNS)):
            raise ContractViolation("a subset grid has exactly 15 rows")

    def average(self) -> np.ndarray:
        return self.rows.mean(axis=0)

    def row(self, subset: ModalitySubset | str) -> dict[str, float]:
        if isinstance(subset, str):
            subset = ModalitySubset.parse(subset)
        return dict(zip(METRIC_COLUMNS, self.rows[self.subsets.index(subset)]))

    def column(self, name: str) -> np.ndarray:
        return self.rows[:, METRIC_COLUMNS.index(name)]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_HEADER)
        for s, vals in zip(self.subsets, self.rows):
            w.writerow([int(b) for b in s.bits] + [f"{v:.6f}" for v in vals])
        w.writerow(["avg", "", "", ""] + [f"{v:.6f}" for v in self.average()])
        return buf.getvalue()

    def write_csv(self, path) -> Path:
        path = Path(path)
        path.write_text(self.to_csv(), encoding="utf-8")
        return path


def case_metrics(probs: np.ndarray, recon: np.ndarray, labels: np.ndarray, reference: np.ndarray,
                 spacing_mm) -> list[float]:
    """Metric vector (METRIC_COLUMNS order) for one case."""
    masks = enforce_nesting(probs, spacing_mm=spacing_mm).as_tuple()
    truth = labels.astype(bool)
    dice = [dice_score(p, t) for p, t in zip(masks, truth)]
    dist = [hd95(p, t, spacing_mm) for p, t in zip(masks, truth)]
    rec = [psnr(recon[m], reference[m]) for m in range(reference.shape[0])]
    return dice + dist + rec


def subset_eval_grid(model: XLSTMHVED | Predictor, dataset: TrainingSet, seed: int = 0) -> SubsetResultGrid:
    """Mean metrics over the dataset for every non-empty subset, rows in ascending mask order.

    Inference uses posterior means, so ``seed`` does not change the result; it
    is accepted so every evaluation entry point takes the run seed.
    """
    if len(dataset) == 0:
        raise ContractViolation("cannot evaluate on an empty dataset")
    predictor = ModelPredictor(model) if isinstance(model, XLSTMHVED) else model
    subsets = all_subsets()
    rows = []
    for subset in subsets:
        per_case = []
        mask = subset.channel_mask()[None, :, None, None, None].astype(dataset.images.dtype)
        for i in range(len(dataset)):
            images = dataset.images[i:i + 1]
            probs, recon = predictor.predict(images * mask, subset, i)
            per_case.append(case_metrics(probs[0], recon[0], dataset.labels[i], images[0],
                                         dataset.spacing_mm))
        rows.append(np.mean(np.asarray(per_case, dtype=np.float64), axis=0))
    return SubsetResultGrid(subsets, np.asarray(rows))


def zero_prediction_psnr(dataset: TrainingSet) -> np.ndarray:
    """Per-modality PSNR of an all-zero reconstruction, averaged over cases."""
    vals = [[psnr(np.zeros_like(img[m]), img[m]) for m in range(img.shape[0])] for img in dataset.images]
    return np.mean(np.asarray(vals), axis=0)


def missing_modality_psnr(grid: SubsetResultGrid) -> float:
    """Mean PSNR of the modalities each row did not see, over rows with at least one missing."""
    vals = []
    for s, row in zip(grid.subsets, grid.rows):
        for m, present in enumerate(s.bits):
            if not present:
                vals.append(row[METRIC_COLUMNS.index(f"psnr_{SHORT_NAMES[m]}")])
    return float(np.mean(vals))
