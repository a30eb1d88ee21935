import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pda.errors import DataError
from pda.metrics import (MMD_ESTIMATOR, accuracy, class_distance_stats, domain_report,
                         kl_diag_gaussian, kl_gaussian, mmd, per_class_accuracy)


def test_accuracy_counts():
    assert accuracy([1, 2, 3], [1, 2, 3]) == 1.0
    assert accuracy([0, 0], [1, 1]) == 0.0
    assert accuracy([0, 1, 1, 0], [0, 1, 1, 1]) == 0.75


def test_accuracy_length_mismatch():
    with pytest.raises(DataError):
        accuracy([0, 1], [0])


def test_per_class_accuracy():
    assert per_class_accuracy([0, 1, 1, 0], [0, 1, 1, 1], 2) == [1.0, 2 / 3]


def brute_stats(X, y):
    classes = sorted(set(y))
    cent = {k: [sum(X[i][c] for i in range(len(X)) if y[i] == k) / y.count(k)
                for c in range(len(X[0]))] for k in classes}
    D1 = sum(math.dist(X[i], cent[y[i]]) for i in range(len(X))) / len(X)
    pairs = [math.dist(X[i], cent[k]) for i in range(len(X)) for k in classes if k != y[i]]
    var = sum((X[i][c] - cent[y[i]][c]) ** 2 for i in range(len(X))
              for c in range(len(X[0]))) / (len(X) * len(X[0]))
    return D1, sum(pairs) / len(pairs), var


def test_collapsed_classes_flag_infinite_ratio():
    s = class_distance_stats([[0, 0], [0, 0], [3, 0], [3, 0]], [0, 0, 1, 1])
    assert s.D1 == 0 and s.r == math.inf and s.r_infinite


def test_two_points():
    s = class_distance_stats([[0, 0], [1, 0]], [0, 1])
    assert (s.D1, s.D2) == (0.0, 1.0)


def test_four_point_hand_case():
    s = class_distance_stats([[0, 0], [2, 0], [0, 3], [0, 5]], [0, 0, 1, 1])
    assert s.D1 == 1.0
    assert abs(s.D2 - 4.183358282190186) < 1e-12
    assert s.variance == 0.5
    assert abs(s.r - s.D2 / s.D1) < 1e-12


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_class_stats_match_bruteforce_and_rotation(seed):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(9, 3))
    y = [0, 1, 2] * 3
    s = class_distance_stats(X, y)
    D1, D2, var = brute_stats(X.tolist(), y)
    np.testing.assert_allclose([s.D1, s.D2, s.variance], [D1, D2, var], atol=1e-12)
    Q, _ = np.linalg.qr(rng.normal(size=(3, 3)))
    r = class_distance_stats(X @ Q.T, y)
    np.testing.assert_allclose([r.D1, r.D2, r.variance, r.r], [s.D1, s.D2, s.variance, s.r],
                               atol=1e-9)


def test_single_class_error_names_metric():
    with pytest.raises(DataError, match="D2"):
        class_distance_stats([[0.0], [1.0]], [0, 0])


def test_mmd_self_is_zero():
    X = np.random.default_rng(0).normal(size=(20, 3))
    assert mmd(X, X) <= 1e-12


def test_mmd_two_point_scalar_kernel():
    assert abs(mmd([[0.0], [1.0]], [[0.0], [2.0]], bandwidth=1.0) - 0.31606027941427883) < 1e-15


def test_mmd_separates_shifted_samples():
    for seed in range(5):
        rng = np.random.default_rng(seed)
        X, Y, Z = rng.normal(size=(50, 2)), rng.normal(size=(50, 2)), rng.normal(size=(50, 2)) + 5
        assert mmd(X, Z) > mmd(X, Y)


def test_mmd_symmetric_and_permutation_invariant():
    rng = np.random.default_rng(1)
    X, Y = rng.normal(size=(15, 3)), rng.normal(size=(12, 3)) + 0.5
    assert abs(mmd(X, Y) - mmd(Y, X)) < 1e-12
    assert abs(mmd(X[rng.permutation(15)], Y[rng.permutation(12)]) - mmd(X, Y)) < 1e-12


def test_mmd_rejects_empty():
    with pytest.raises(DataError):
        mmd(np.zeros((0, 2)), np.zeros((3, 2)))


def test_kl_self_is_zero():
    X = np.random.default_rng(0).normal(size=(30, 4))
    assert abs(kl_gaussian(X, X)) <= 1e-9


def test_kl_unit_gaussian_shift_by_one():
    assert kl_diag_gaussian([0.0], [1.0], [1.0], [1.0]) == 0.5


def test_kl_grows_with_shift():
    vals = [kl_diag_gaussian([0.0, 0.0], [1.0, 2.0], [s, s], [1.0, 2.0]) for s in (0, 1, 2)]
    assert vals[0] < vals[1] < vals[2]


def test_kl_is_asymmetric():
    rng = np.random.default_rng(2)
    X, Y = rng.normal(size=(40, 2)), rng.normal(size=(40, 2)) * 3 + 1
    assert abs(kl_gaussian(X, Y) - kl_gaussian(Y, X)) > 1e-3


def test_kl_needs_two_samples():
    with pytest.raises(DataError):
        kl_gaussian(np.zeros((1, 2)), np.zeros((3, 2)))


def test_report_records_estimators_and_flags():
    X = np.array([[0.0, 0], [0, 0], [3, 0], [3, 0]])
    rep = domain_report(X, X, [0, 0, 1, 1], [0, 0, 1, 1], predictions=[0, 0, 1, 1],
                        provenance="unit")
    names = {name: (value, est) for name, value, est, _ in rep.records()}
    assert names["mmd"] == (0.0, MMD_ESTIMATOR)
    assert names["accuracy"][0] == 1.0
    text = rep.to_text()
    assert "inf(flagged:D1=0)" in text and text.startswith("# name")


def test_metrics_are_deterministic():
    rng = np.random.default_rng(3)
    X, Y = rng.normal(size=(10, 2)), rng.normal(size=(10, 2))
    assert mmd(X, Y) == mmd(X, Y) and kl_gaussian(X, Y) == kl_gaussian(X, Y)
