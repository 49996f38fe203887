import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from attrbench import ale
from attrbench.volume import BinaryMask, Volume3D

GRID = Volume3D(np.zeros((20, 20, 20)), (4.0, 4.0, 4.0), (-40.0, -40.0, -40.0))


def _table(rows):
    return ale.FociTable([ale.Focus(*r) for r in rows])


class TestParse:
    def test_empty_body(self, tmp_path):
        p = tmp_path / "f.csv"
        p.write_text("study,n,contrast,x,y,z\n")
        assert len(ale.parse_foci(p)) == 0

    def test_round_trip(self, tmp_path):
        t = _table([("a", 12, "AD<HC", 1.5, -2.0, 3.25), ("b", 30, "AD<HC", -10.0, 0.0, 8.0)])
        ale.write_foci(t, tmp_path / "f.csv")
        assert ale.parse_foci(tmp_path / "f.csv").rows == t.rows

    def test_zero_subjects(self, tmp_path):
        p = tmp_path / "f.csv"
        p.write_text("study,n,contrast,x,y,z\na,10,c,0,0,0\nb,0,c,1,1,1\n")
        with pytest.raises(ale.FociParseError) as err:
            ale.parse_foci(p)
        assert err.value.line == 3

    def test_bad_header(self, tmp_path):
        p = tmp_path / "f.csv"
        p.write_text("id,n,x,y,z\n")
        with pytest.raises(ale.FociParseError):
            ale.parse_foci(p)

    def test_short_row(self, tmp_path):
        p = tmp_path / "f.csv"
        p.write_text("study,n,contrast,x,y,z\na,10,c,0,0\n")
        with pytest.raises(ale.FociParseError, match="line 2"):
            ale.parse_foci(p)


def test_fwhm_model():
    assert ale.fwhm_of(1) == pytest.approx(math.hypot(5.7, 11.6))
    assert ale.fwhm_of(10**9) == pytest.approx(5.7, abs=1e-3)
    assert ale.fwhm_of(10) > ale.fwhm_of(40)


class TestModeledActivation:
    def test_single_focus_peak(self):
        ma = ale.modeled_activation([ale.Focus("a", 10, "c", 0.0, 4.0, -8.0)], GRID)
        assert np.unravel_index(np.argmax(ma.data), GRID.dims) == ale.mm_to_voxel(GRID, (0.0, 4.0, -8.0))
        assert 0 < ma.data.max() <= 1
        assert ma.data.sum() == pytest.approx(1.0, abs=1e-9)

    def test_coincident_foci_use_max(self):
        f = ale.Focus("a", 10, "c", 0.0, 0.0, 0.0)
        one = ale.modeled_activation([f], GRID)
        two = ale.modeled_activation([f, f], GRID)
        np.testing.assert_array_equal(one.data, two.data)

    def test_far_foci_compose_by_max(self):
        f1 = ale.Focus("a", 10, "c", -28.0, 0.0, 0.0)
        f2 = ale.Focus("a", 10, "c", 28.0, 4.0, 0.0)
        both = ale.modeled_activation([f1, f2], GRID).data
        expected = np.maximum(ale.modeled_activation([f1], GRID).data, ale.modeled_activation([f2], GRID).data)
        np.testing.assert_array_equal(both, expected)

    def test_kernel_matches_gaussian_density(self):
        k = ale._kernel(10.0, (2.0, 2.0, 2.0))
        sigma = 10.0 / (2 * math.sqrt(2 * math.log(2)))
        r = k.shape[0] // 2
        off = (np.arange(k.shape[0]) - r) * 2.0
        d2 = off[:, None, None] ** 2 + off[None, :, None] ** 2 + off[None, None, :] ** 2
        g = np.exp(-0.5 * d2 / sigma**2)
        np.testing.assert_allclose(k, g / g.sum(), rtol=1e-12)

    def test_outside_grid(self):
        with pytest.raises(ValueError):
            ale.modeled_activation([ale.Focus("a", 10, "c", 500.0, 0.0, 0.0)], GRID)


class TestUnion:
    def test_single_study_equals_ma(self):
        ma = ale.modeled_activation([ale.Focus("a", 10, "c", 0.0, 0.0, 0.0)], GRID)
        np.testing.assert_allclose(ale.ale_union([ma]).data, ma.data, atol=1e-15)

    def test_certain_voxel(self):
        a = GRID.like(np.zeros(GRID.dims))
        b = GRID.like(np.zeros(GRID.dims))
        b.data[3, 3, 3] = 1.0
        assert ale.ale_union([a, b]).data[3, 3, 3] == 1.0

    def test_two_halves(self):
        half = GRID.like(np.full(GRID.dims, 0.5))
        np.testing.assert_allclose(ale.ale_union([half, half]).data, 0.75)

    def test_grid_mismatch(self):
        with pytest.raises(ValueError):
            ale.ale_union([GRID, Volume3D(np.zeros((2, 2, 2)))])


def _random_table(rng, n_studies, mask=None):
    mask = mask or BinaryMask(np.ones(GRID.dims, bool), GRID.spacing_mm, GRID.origin_mm)
    return ale.random_foci(mask, GRID, n_studies, 3, int(rng.integers(8, 40)), rng)


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 10_000))
def test_adding_a_study_never_decreases(seed):
    rng = np.random.default_rng(seed)
    t = _random_table(rng, 4)
    extra = [ale.Focus("zz", 15, "c", *ale.voxel_to_mm(GRID, rng.integers(0, 20, 3))) for _ in range(2)]
    before = ale.ale_map(t, GRID).data
    after = ale.ale_map(ale.FociTable(t.rows + extra), GRID).data
    assert np.all(after >= before)
    assert np.all((after >= 0) & (after < 1))


def _clustered_table(rng):
    rows = [("hit%02d" % s, 20, "c", 8.0, -12.0, 4.0) for s in range(10)]
    for s in range(5):
        for _ in range(2):
            rows.append(("rnd%02d" % s, 20, "c", *ale.voxel_to_mm(GRID, rng.integers(2, 18, 3))))
    return _table(rows)


@pytest.fixture(scope="module")
def forced_result():
    t = _clustered_table(np.random.default_rng(0))
    mask = BinaryMask(np.ones(GRID.dims, bool), GRID.spacing_mm, GRID.origin_mm)
    return t, mask, ale.permutation_threshold(t, GRID, mask, n_perm=200, p_voxel=0.001, p_cluster=0.05, seed=3)


def test_forced_cluster_survives(forced_result):
    _, _, res = forced_result
    focus = ale.mm_to_voxel(GRID, (8.0, -12.0, 4.0))
    assert res.mask.data[focus]
    assert res.clusters and res.clusters[0].peak_mm == pytest.approx((8.0, -12.0, 4.0))
    # binary map sits inside the support of the continuous one
    assert np.all(res.ale.data[res.mask.data] > 0)


def test_result_is_seeded(forced_result):
    t, mask, res = forced_result
    again = ale.permutation_threshold(t, GRID, mask, n_perm=200, p_voxel=0.001, p_cluster=0.05, seed=3)
    np.testing.assert_array_equal(res.mask.data, again.mask.data)
    assert res.report() == again.report()


def test_study_order_does_not_matter(forced_result):
    t, mask, res = forced_result
    shuffled = ale.FociTable(list(reversed(t.rows)))
    other = ale.permutation_threshold(shuffled, GRID, mask, n_perm=200, p_voxel=0.001, p_cluster=0.05, seed=3)
    np.testing.assert_array_equal(res.mask.data, other.mask.data)
    assert res.voxel_threshold == other.voxel_threshold


def test_cluster_report_json(forced_result, tmp_path):
    res = forced_result[2]
    ale.write_cluster_report(res, tmp_path / "c.json")
    d = json.loads((tmp_path / "c.json").read_text())
    assert d["surviving_voxels"] == res.mask.voxel_count()
    assert d["null"]["n_perm"] == 200


class TestPermutationErrors:
    def _mask(self, fill=True):
        return BinaryMask(np.full(GRID.dims, fill), GRID.spacing_mm, GRID.origin_mm)

    def test_too_few_permutations(self):
        t = _random_table(np.random.default_rng(0), 3)
        with pytest.raises(ValueError):
            ale.permutation_threshold(t, GRID, self._mask(), n_perm=50)

    def test_quantile_out_of_reach(self):
        t = _random_table(np.random.default_rng(0), 3)
        with pytest.raises(ValueError):
            ale.permutation_threshold(t, GRID, self._mask(), n_perm=100, p_cluster=0.001)

    def test_empty_mask(self):
        t = _random_table(np.random.default_rng(0), 3)
        with pytest.raises(ValueError):
            ale.permutation_threshold(t, GRID, self._mask(False), n_perm=100, p_voxel=0.01)

    def test_empty_table(self):
        with pytest.raises(ValueError):
            ale.permutation_threshold(ale.FociTable(), GRID, self._mask(), n_perm=100, p_voxel=0.01)
