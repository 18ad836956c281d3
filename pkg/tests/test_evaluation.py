import csv
import io

import numpy as np
import pytest

from xlstm_hved.errors import ContractViolation
from xlstm_hved.evaluation import (CSV_HEADER, METRIC_COLUMNS, SubsetResultGrid, missing_modality_psnr,
                                   subset_eval_grid, zero_prediction_psnr)
from xlstm_hved.metrics import PSNR_CAP_DB
from xlstm_hved.model import ModelConfig, XLSTMHVED
from xlstm_hved.subsets import ModalitySubset, all_subsets


class OraclePredictor:
    """Returns the ground truth of each case, whatever the subset."""

    def __init__(self, dataset):
        self.dataset = dataset
        self.seen = []

    def predict(self, images, subset, index):
        self.seen.append((subset, images))
        return self.dataset.labels[index:index + 1], self.dataset.images[index:index + 1]


class ZeroPredictor:
    def predict(self, images, subset, index):
        shape = images.shape
        return np.zeros((1, 3) + shape[2:]), np.zeros(shape)


def test_oracle_predictor_scores_perfectly(tiny_dataset):
    grid = subset_eval_grid(OraclePredictor(tiny_dataset), tiny_dataset)
    assert grid.rows.shape == (15, len(METRIC_COLUMNS))
    for name in ("dice_wt", "dice_tc", "dice_et"):
        assert np.all(grid.column(name) == 100.0)
    for name in ("hd95_wt", "hd95_tc", "hd95_et"):
        assert np.all(grid.column(name) == 0.0)
    assert np.all(grid.column("psnr_fl") == PSNR_CAP_DB)


def test_predictor_sees_only_present_modalities(tiny_dataset):
    oracle = OraclePredictor(tiny_dataset)
    subset_eval_grid(oracle, tiny_dataset)
    assert len(oracle.seen) == 15 * len(tiny_dataset)
    for subset, images in oracle.seen:
        for m in range(4):
            assert subset.bits[m] or not images[0, m].any()


def test_rows_follow_ascending_masks(tiny_dataset):
    grid = subset_eval_grid(OraclePredictor(tiny_dataset), tiny_dataset)
    assert grid.subsets == all_subsets()
    assert [s.to_int() for s in grid.subsets] == list(range(1, 16))


def test_average_is_mean_of_rows():
    rows = np.random.default_rng(0).uniform(0, 100, size=(15, len(METRIC_COLUMNS)))
    grid = SubsetResultGrid(all_subsets(), rows)
    np.testing.assert_allclose(grid.average(), rows.sum(axis=0) / 15, rtol=1e-9)


def test_grid_needs_fifteen_rows():
    with pytest.raises(ContractViolation):
        SubsetResultGrid(all_subsets()[:14], np.zeros((14, len(METRIC_COLUMNS))))


def test_csv_layout(tiny_dataset):
    grid = subset_eval_grid(OraclePredictor(tiny_dataset), tiny_dataset)
    rows = list(csv.reader(io.StringIO(grid.to_csv())))
    assert rows[0] == CSV_HEADER
    assert CSV_HEADER[:4] == ["fl", "t1", "t1c", "t2"]
    assert len(rows) == 1 + 15 + 1 and rows[-1][0] == "avg"
    assert rows[1][:4] == ["0", "0", "0", "1"] and rows[15][:4] == ["1", "1", "1", "1"]
    for row in rows[1:]:
        assert len(row) == len(CSV_HEADER)


def test_row_lookup_by_mask_or_names(tiny_dataset):
    grid = subset_eval_grid(OraclePredictor(tiny_dataset), tiny_dataset)
    assert grid.row("1010") == grid.row(ModalitySubset.from_names("fl,t1c"))


def test_zero_prediction_psnr_matches_zero_predictor(tiny_dataset):
    grid = subset_eval_grid(ZeroPredictor(), tiny_dataset)
    baseline = zero_prediction_psnr(tiny_dataset)
    for m, name in enumerate(("fl", "t1", "t1c", "t2")):
        np.testing.assert_allclose(grid.column(f"psnr_{name}"), baseline[m], rtol=1e-12)
    assert missing_modality_psnr(grid) == pytest.approx(baseline.mean(), rel=1e-12)
    # an all-zero segmentation of non-empty tumours scores zero overlap
    assert np.all(grid.column("dice_wt") == 0.0)


def test_missing_modality_psnr_counts_absent_channels_only():
    rows = np.zeros((15, len(METRIC_COLUMNS)))
    start = METRIC_COLUMNS.index("psnr_fl")
    for i, s in enumerate(all_subsets()):
        rows[i, start:start + 4] = [10.0 if present else 30.0 for present in s.bits]
    assert missing_modality_psnr(SubsetResultGrid(all_subsets(), rows)) == 30.0


def test_model_grid_is_seed_independent(tiny_dataset):
    model = XLSTMHVED(ModelConfig(channels=(2, 4, 4, 4), extent=tiny_dataset.extent))
    a = subset_eval_grid(model, tiny_dataset, seed=0)
    b = subset_eval_grid(model, tiny_dataset, seed=99)
    assert a.rows.tobytes() == b.rows.tobytes()
    assert np.all(np.isfinite(a.rows))


def test_empty_dataset_rejected(tiny_dataset):
    empty = type(tiny_dataset)(tiny_dataset.images[:0], tiny_dataset.labels[:0])
    with pytest.raises(ContractViolation):
        subset_eval_grid(ZeroPredictor(), empty)
