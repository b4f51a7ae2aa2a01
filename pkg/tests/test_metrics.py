import numpy as np
import pytest

import oracles
from mtunet import kernels
from mtunet.errors import DimensionError
from mtunet.metrics import boundary, dice_score, evaluate, hd95, nearest_rank


def random_mask_pairs(n, size=16, seed=0):
    rng = np.random.default_rng(seed)
    for _ in range(n):
        density = rng.uniform(0.05, 0.6, 2)
        yield rng.random((size, size)) < density[0], rng.random((size, size)) < density[1]


def test_dice_identical_disjoint_partial():
    a = np.zeros((4, 4), bool)
    a[0, :] = True
    b = np.zeros((4, 4), bool)
    b[3, :] = True
    assert dice_score(a, a) == 1.0
    assert dice_score(a, b) == 0.0
    c = np.zeros((4, 4), bool)
    c[0, :2] = True
    assert dice_score(a, c) == pytest.approx(2 * 2 / 6)


def test_dice_empty_conventions():
    z = np.zeros((3, 3), bool)
    o = np.ones((3, 3), bool)
    assert dice_score(z, z) == 1.0
    assert dice_score(z, o) == 0.0


def test_shape_mismatch():
    with pytest.raises(DimensionError):
        dice_score(np.zeros((2, 2)), np.zeros((3, 3)))
    with pytest.raises(DimensionError):
        hd95(np.zeros((2, 2)), np.zeros((3, 3)))


def test_hd95_spot_values():
    a = np.zeros((8, 8), bool)
    a[2, 1] = True
    b = np.zeros((8, 8), bool)
    b[2, 4] = True
    assert hd95(a, b) == 3.0
    blob = np.zeros((8, 8), bool)
    blob[2:6, 1:7] = True
    assert hd95(blob, blob) == 0.0
    assert hd95(blob, np.zeros_like(blob)) is None


def test_boundary_includes_image_border():
    m = np.ones((4, 4), bool)
    b = boundary(m)
    assert b[0].all() and b[-1].all() and not b[1:3, 1:3].any()


def test_nearest_rank_index():
    vals = np.arange(1, 21, dtype=float)  # n = 20, rank 19
    assert nearest_rank(vals) == 19.0
    assert nearest_rank(np.array([7.0])) == 7.0
    assert nearest_rank(np.arange(1, 101, dtype=float)) == 95.0
    assert nearest_rank(np.arange(1, 102, dtype=float)) == 96.0


def test_dice_matches_counting_oracle():
    for a, b in random_mask_pairs(200, seed=1):
        assert dice_score(a, b) == oracles.dice(a, b)


def test_hd95_matches_all_pairs_oracle():
    for a, b in random_mask_pairs(200, seed=2):
        got, ref = hd95(a, b), oracles.hd95(a, b)
        assert (got is None) == (ref is None)
        if ref is not None:
            assert abs(got - ref) <= 1e-9


@pytest.mark.parametrize("seed", range(20))
def test_symmetry_and_translation(seed):
    rng = np.random.default_rng(seed)
    a = np.zeros((20, 20), bool)
    b = np.zeros((20, 20), bool)
    a[4:12, 4:12] = rng.random((8, 8)) < 0.7
    b[4:12, 4:12] = rng.random((8, 8)) < 0.7
    a[4, 4] = b[5, 5] = True
    assert dice_score(a, b) == dice_score(b, a)
    assert hd95(a, b) == hd95(b, a)
    shift = tuple(int(v) for v in rng.integers(-3, 4, 2))
    sa, sb = np.roll(a, shift, (0, 1)), np.roll(b, shift, (0, 1))
    assert dice_score(sa, sb) == dice_score(a, b)
    assert hd95(sa, sb) == hd95(a, b)


def test_compiled_and_python_distance_kernels_agree():
    if kernels.compiled_kernels is None:
        pytest.skip("compiled kernels not built")
    rng = np.random.default_rng(0)
    a, b = rng.random((50, 2)) * 16, rng.random((70, 2)) * 16
    np.testing.assert_array_equal(kernels.compiled_kernels.min_distances(a, b),
                                  kernels.python_kernels.min_distances(a, b))


def test_evaluate_ground_truth_as_prediction():
    rng = np.random.default_rng(0)
    gt = rng.integers(0, 3, (4, 16, 16))
    samples, agg = evaluate(gt, gt, 3)
    assert len(samples) == 4
    assert agg.mean_dsc == 1.0 and agg.mean_hd95 == 0.0


def test_evaluate_all_background():
    gt = np.random.default_rng(0).integers(0, 3, (3, 16, 16))
    _, agg = evaluate(np.zeros_like(gt), gt, 3)
    assert agg.mean_dsc == 0.0 and agg.mean_hd95 is None
    assert "mean_hd95: missing" in agg.to_text()


def test_missing_hd95_excluded_from_mean():
    gt = np.zeros((2, 8, 8), np.int64)
    gt[:, 2:5, 2:5] = 1
    pred = gt.copy()
    pred[1] = 0
    _, agg = evaluate(pred, gt, 2)
    assert agg.per_class[0].dsc == 0.5
    assert agg.per_class[0].hd95 == 0.0
