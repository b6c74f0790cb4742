import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra import numpy as hnp

from cellattn import metrics
from cellattn.metrics import MetricError, bucket_mass, euclidean_distance, weighted_jaccard

nonneg = hnp.arrays(np.float64, (4, 5), elements=st.floats(0, 10))


# Euclidean distance, as printed: sum |ref - R| / sum ref

@pytest.mark.parametrize("ref,R,expected", [
    ([1, 0], [0.5, 0.5], 1.0),
    ([1, 1, 0], [1, 1, 0], 0.0),
    ([1, 1, 1, 0], [0, 0, 0, 0], 1.0),
    ([1, 0, 0, 0], [0, 0, 0, 2], 3.0),
    ([[1, 1], [0, 0]], [[0.25, 0.75], [0.5, 0]], 1.5 / 2),
])
def test_euclidean_examples(ref, R, expected):
    assert euclidean_distance(np.array(ref, float), np.array(R, float)) == pytest.approx(expected, abs=1e-12)


def test_euclidean_empty_mask_is_an_error():
    with pytest.raises(MetricError):
        euclidean_distance(np.zeros(3), np.ones(3))


def test_euclidean_shape_mismatch():
    with pytest.raises(MetricError):
        euclidean_distance(np.ones(3), np.ones(4))


@given(st.integers(0, 10_000))
@settings(max_examples=40, deadline=None)
def test_euclidean_invariant_under_joint_permutation(seed):
    rng = np.random.default_rng(seed)
    ref = (rng.random(20) < 0.3).astype(float)
    ref[0] = 1.0
    R = rng.random(20)
    perm = rng.permutation(20)
    assert euclidean_distance(ref[perm], R[perm]) == pytest.approx(euclidean_distance(ref, R), rel=1e-12)


# weighted Jaccard

@pytest.mark.parametrize("x,R,expected", [
    ([1, 1], [0, 0], 0.0),
    ([2, 0], [1, 1], 1 / 3),
    ([3, 1, 2], [3, 1, 2], 1.0),
    ([1, 2, 3, 4], [4, 3, 2, 1], (1 + 2 + 2 + 1) / (4 + 3 + 3 + 4)),
    ([0.5, 0], [0, 0.5], 0.0),
])
def test_weighted_jaccard_examples(x, R, expected):
    assert weighted_jaccard(np.array(x, float), np.array(R, float)) == pytest.approx(expected, abs=1e-12)


def test_weighted_jaccard_both_zero_is_one():
    assert weighted_jaccard(np.zeros((2, 2)), np.zeros((2, 2))) == 1.0


def test_weighted_jaccard_rejects_negative():
    with pytest.raises(MetricError):
        weighted_jaccard(np.array([-1.0]), np.array([1.0]))


@given(nonneg, nonneg)
@settings(max_examples=60, deadline=None)
def test_weighted_jaccard_symmetric_and_bounded(a, b):
    j = weighted_jaccard(a, b)
    assert 0.0 <= j <= 1.0
    assert j == pytest.approx(weighted_jaccard(b, a), abs=1e-15)


def test_weighted_jaccard_is_not_scale_covariant():
    a, b = np.array([1.0, 2.0]), np.array([2.0, 1.0])
    # scaling one argument changes the value, scaling both leaves it alone
    assert weighted_jaccard(a, 3 * b) != pytest.approx(weighted_jaccard(a, b))
    assert weighted_jaccard(3 * a, 3 * b) == pytest.approx(weighted_jaccard(a, b))


# bucket mass

def test_bucket_mass_uniform():
    mass, degenerate = bucket_mass(np.ones((8, 3)), 4)
    np.testing.assert_allclose(mass, 0.25)
    assert not degenerate


def test_bucket_mass_last_bucket_only():
    R = np.zeros((10, 2))
    R[9] = 1.0
    mass, _ = bucket_mass(R, 3)
    np.testing.assert_array_equal(mass, [0, 0, 1])


def test_bucket_mass_remainder_goes_to_last():
    R = np.ones((10, 1))
    mass, _ = bucket_mass(R, 3)
    np.testing.assert_allclose(mass, [0.3, 0.3, 0.4])


def test_bucket_mass_zero_map_flagged():
    mass, degenerate = bucket_mass(np.zeros((6, 2)), 3)
    np.testing.assert_allclose(mass, 1 / 3)
    assert degenerate


@given(hnp.arrays(np.float64, (12, 3), elements=st.floats(0, 1e3)), st.integers(1, 12))
@settings(max_examples=60, deadline=None)
def test_bucket_mass_sums_to_one(R, n):
    mass, _ = bucket_mass(R, n)
    assert mass.sum() == pytest.approx(1.0, abs=1e-9)


# feature drop

class ThresholdModel:
    """Predicts class 1 when the sum over cell (0, 0) and (1, 1) is positive."""

    class spec:
        n_classes = 2

    def predict(self, X):
        s = X[:, 0, 0] + X[:, 1, 1]
        return np.stack([-s, s], axis=1)


def test_top_cells_tie_break_is_lexicographic():
    R = np.array([[1.0, 2.0], [2.0, 0.0]])
    np.testing.assert_array_equal(metrics.top_cells(R, 2), [1, 2])
    np.testing.assert_array_equal(metrics.top_cells(np.ones((2, 2)), 3), [0, 1, 2])


def test_drop_zeroes_salient_cells():
    X = np.ones((1, 2, 2))
    R = np.array([[[0.1, 0.9], [0.5, 0.2]]])
    out = metrics.drop_top_cells(X, R, 50)
    np.testing.assert_array_equal(out[0], [[1, 0], [0, 1]])
    assert X.min() == 1  # input untouched


def test_feature_drop_curve():
    X = np.zeros((4, 2, 2))
    X[:, 0, 0] = [1, -1, 2, -2]
    y = np.array([1, 0, 1, 0])
    R = np.zeros_like(X)
    R[:, 0, 0] = 1.0
    curve = metrics.feature_drop_eval(ThresholdModel(), X, y, R, [25, 100])
    assert curve[0] == (0.0, 1.0)
    # dropping the only informative cell leaves a constant input: chance-level accuracy
    assert curve[1] == (25.0, 0.5)
    assert curve[2] == (100.0, 0.5)


def test_feature_drop_tiny_percent_is_a_no_op():
    X = np.random.default_rng(0).normal(size=(6, 2, 2))
    y = (X[:, 0, 0] + X[:, 1, 1] > 0).astype(int)
    curve = metrics.feature_drop_eval(ThresholdModel(), X, y, np.abs(X), [1])
    assert curve[1][1] == curve[0][1]


def test_feature_drop_validates_grid():
    X = np.zeros((2, 2, 2))
    with pytest.raises(MetricError):
        metrics.feature_drop_eval(ThresholdModel(), X, np.zeros(2), X, [])
    with pytest.raises(MetricError):
        metrics.feature_drop_eval(ThresholdModel(), X, np.zeros(2), X, [0])
    with pytest.raises(MetricError):
        metrics.feature_drop_eval(ThresholdModel(), X, np.zeros(2), X, [101])


def test_report_csv(tmp_path):
    rows = [dict(dataset="earlier", model="lstm", seed=0, wjac=0.1, euc=0.9, acc=1.0)]
    metrics.write_report(rows, tmp_path / "r.csv")
    assert (tmp_path / "r.csv").read_text() == "dataset,model,seed,wjac,euc,acc\nearlier,lstm,0,0.100000,0.900000,1.000000\n"
