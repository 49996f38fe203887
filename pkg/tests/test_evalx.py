import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from _oracles import ap_oracle, auc_oracle
from attrbench import evalx
from attrbench.attribution import Heatmap
from attrbench.volume import BinaryMask, Volume3D


def _mask(arr):
    arr = np.asarray(arr, bool)
    return BinaryMask(arr, (1.0,) * 3)


class TestDice:
    def test_identical(self):
        a = np.zeros((4, 4, 4), bool)
        a[1:3, 1:3, 1:3] = True
        assert evalx.dice(_mask(a), _mask(a)) == 1.0

    def test_disjoint(self):
        a = np.zeros((4, 4, 4), bool)
        b = np.zeros((4, 4, 4), bool)
        a[0], b[3] = True, True
        assert evalx.dice(_mask(a), _mask(b)) == 0.0

    def test_half_overlap(self):
        a = np.zeros((4, 4, 4), bool)
        b = np.zeros((4, 4, 4), bool)
        a[0, 0, :] = a[0, 1, :] = True
        b[0, 1, :] = b[0, 2, :] = True
        assert a.sum() == b.sum() == 8 and (a & b).sum() == 4
        assert evalx.dice(_mask(a), _mask(b)) == 0.5

    def test_both_empty(self):
        z = np.zeros((2, 2, 2), bool)
        assert evalx.dice(_mask(z), _mask(z)) == 1.0

    def test_grid_mismatch(self):
        with pytest.raises(ValueError):
            evalx.dice(_mask(np.ones((2, 2, 2))), _mask(np.ones((2, 2, 3))))


def test_thresholds_exclude_endpoints():
    t = evalx.thresholds_between(0.0, 51.0)
    assert len(t) == 50
    np.testing.assert_allclose(t, np.arange(1, 51))


# --------------------------------------------------------------------------
# ROC / PR against exhaustive enumeration
# --------------------------------------------------------------------------


HAND = [
    (np.array([0.9, 0.8, 0.7, 0.6, 0.5, 0.4]), np.array([1, 0, 1, 0, 0, 1], bool)),
    (np.array([0.3, 0.3, 0.1, 0.9, 0.3, 0.2]), np.array([1, 0, 0, 1, 1, 0], bool)),
    (np.array([1.0, 1.0, 1.0, 0.0, 0.0, 0.0]), np.array([1, 0, 1, 1, 0, 0], bool)),
    (np.array([-2.0, 5.0, 0.5, 0.5, 3.0, -1.0]), np.array([0, 1, 1, 0, 0, 1], bool)),
]


@pytest.mark.parametrize("scores,labels", HAND)
def test_roc_auc_matches_enumeration(scores, labels):
    assert evalx.roc_auc(scores, labels) == pytest.approx(auc_oracle(scores, labels), abs=1e-12)


@pytest.mark.parametrize("scores,labels", HAND)
def test_pr_auc_matches_enumeration(scores, labels):
    assert evalx.pr_auc(scores, labels) == pytest.approx(ap_oracle(scores, labels), abs=1e-12)


@pytest.mark.parametrize("scores,labels", HAND)
def test_pr_auc_at_least_prevalence_when_informative(scores, labels):
    if evalx.roc_auc(scores, labels) > 0.5:
        assert evalx.pr_auc(scores, labels) >= labels.mean() - 1e-12


def test_indicator_scores():
    lab = np.array([0, 1, 1, 0, 0], bool)
    assert evalx.roc_auc(lab.astype(float), lab) == 1.0
    assert evalx.roc_auc(-lab.astype(float), lab) == 0.0
    assert evalx.pr_auc(lab.astype(float), lab) == 1.0


def test_constant_scores_give_prevalence():
    lab = np.array([0, 1, 1, 0, 0, 0, 0, 1], bool)
    assert evalx.pr_auc(np.ones(8), lab) == pytest.approx(3 / 8)
    assert evalx.roc_auc(np.ones(8), lab) == 0.5


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10**6), st.integers(2, 40))
def test_roc_auc_of_negated_scores_complements(seed, n):
    rng = np.random.default_rng(seed)
    scores = rng.integers(0, 5, n).astype(float)  # many ties
    labels = rng.random(n) < 0.5
    labels[0], labels[1] = True, False
    assert evalx.roc_auc(scores, labels) + evalx.roc_auc(-scores, labels) == pytest.approx(1.0, abs=1e-12)


def test_needs_both_classes():
    with pytest.raises(ValueError):
        evalx.roc_auc(np.arange(3.0), np.ones(3, bool))


def test_curves_are_monotone():
    rng = np.random.default_rng(0)
    s = rng.normal(size=200)
    lab = rng.random(200) < 0.3
    fpr, tpr, _ = evalx.roc_curve(s, lab)
    assert np.all(np.diff(fpr) >= 0) and np.all(np.diff(tpr) >= 0)
    assert fpr[-1] == tpr[-1] == 1.0
    _, rec, _ = evalx.pr_curve(s, lab)
    assert np.all(np.diff(rec) >= 0)


# --------------------------------------------------------------------------
# Dice grid
# --------------------------------------------------------------------------


def _truth(dims=(12, 12, 12)):
    t = np.zeros(dims, bool)
    t[4:8, 3:9, 4:8] = True
    return BinaryMask(t, (2.0, 2.0, 2.0))


def test_grid_shape_is_17_by_50():
    truth = _truth()
    h = Heatmap(Volume3D(np.random.default_rng(0).random(truth.dims), truth.spacing_mm), "IG")
    rep = evalx.dice_grid(h, truth)
    assert rep.shape == (17, 50)
    assert rep.shape[0] * rep.shape[1] == 850
    assert rep.fwhm == list(evalx.FWHM_LEVELS)
    d = np.asarray(rep.dice)
    assert np.all((d >= 0) & (d <= 1))
    assert all(0 <= a <= 1 for a in rep.roc_auc + rep.pr_auc)


def test_indicator_heatmap_is_perfect_unsmoothed():
    truth = _truth()
    rep = evalx.dice_grid(truth.to_volume(), truth, fwhm_levels=(0,), method="IG")
    assert max(rep.dice[0]) == 1.0
    assert rep.best()["fwhm"] == 0


def test_negative_values_count_by_magnitude():
    truth = _truth()
    rep = evalx.dice_grid(truth.to_volume().like(-truth.data.astype(float)), truth, fwhm_levels=(0,), method="IG")
    assert max(rep.dice[0]) == 1.0


@pytest.mark.parametrize("seed", range(5))
def test_uniform_noise_dice_envelope(seed):
    rng = np.random.default_rng(seed)
    dims = (20, 20, 20)
    t = np.zeros(dims, bool)
    t[5:15, 5:15, 5:9] = True  # 400 of 8000 voxels: f = 0.05
    truth = BinaryMask(t, (1.0,) * 3)
    rep = evalx.dice_grid(Volume3D(rng.random(dims)), truth, fwhm_levels=(0,), method="IG")
    assert max(rep.dice[0]) <= 0.15


def test_constant_heatmap_row_flagged():
    truth = _truth()
    rep = evalx.dice_grid(Volume3D(np.full(truth.dims, 3.0), truth.spacing_mm), truth, fwhm_levels=(0, 4), method="IG")
    assert rep.constant_rows == [0]
    full = 2 * truth.voxel_count() / (truth.voxel_count() + truth.data.size)
    assert rep.dice[0] == [pytest.approx(full)] * 50
    assert all(np.isfinite(rep.dice[1]))


def test_cells_independent_of_threshold_order():
    truth = _truth()
    vol = Volume3D(np.random.default_rng(3).random(truth.dims), truth.spacing_mm)
    rep = evalx.dice_grid(vol, truth, fwhm_levels=(2,), method="IG")
    for t, d in zip(rep.thresholds[0][::-1], rep.dice[0][::-1]):
        assert evalx._dice_arrays(evalx.gaussian_smooth(vol, 2).data > t, truth.data) == d


def test_grid_mismatch():
    with pytest.raises(ValueError):
        evalx.dice_grid(Volume3D(np.zeros((3, 3, 3))), _truth())


def test_report_serialization(tmp_path):
    truth = _truth()
    rep = evalx.dice_grid(Volume3D(np.random.default_rng(1).random(truth.dims), truth.spacing_mm), truth, method="LRP")
    back = evalx.OverlapReport.from_dict(json.loads(rep.to_json()))
    assert back.dice == rep.dice and back.method == "LRP"
    rep.write_csv(tmp_path / "r.csv")
    assert len((tmp_path / "r.csv").read_text().splitlines()) == 1 + 850


# --------------------------------------------------------------------------
# best smoothing
# --------------------------------------------------------------------------


def _report(fwhm, best_dice, pr):
    dice = [[0.0] * 49 + [d] for d in best_dice]
    return evalx.OverlapReport("IG", list(fwhm), [[0.0] * 50 for _ in fwhm], dice, [0.5] * len(fwhm), list(pr))


def test_single_level_selects_same_fwhm():
    row = evalx.best_smoothing_table([_report([4], [0.6], [0.3])])[0]
    assert row["dice_fwhm"] == row["pr_fwhm"] == 4
    assert row["dice_at_dice_fwhm"] == 0.6 and row["pr_auc_at_pr_fwhm"] == 0.3


def test_unimodal_picks_interior_argmax():
    row = evalx.best_smoothing_table([_report([0, 1, 2, 3, 4], [0.2, 0.5, 0.7, 0.4, 0.1], [0.1, 0.6, 0.3, 0.2, 0.1])])[0]
    assert row["dice_fwhm"] == 2 and row["pr_fwhm"] == 1
    assert row["pr_auc_at_dice_fwhm"] == 0.3 and row["dice_at_pr_fwhm"] == 0.5


def test_ties_pick_smallest_fwhm():
    row = evalx.best_smoothing_table([_report([8, 2, 4], [0.5, 0.5, 0.5], [0.2, 0.2, 0.2])])[0]
    assert row["dice_fwhm"] == 2 and row["pr_fwhm"] == 2


def test_empty_reports_rejected():
    with pytest.raises(ValueError):
        evalx.best_smoothing_table([])


def test_format_table_has_one_row_per_method():
    rows = evalx.best_smoothing_table([_report([0, 1], [0.1, 0.2], [0.3, 0.1])] * 4)
    assert len(evalx.format_table(rows).splitlines()) == 5
