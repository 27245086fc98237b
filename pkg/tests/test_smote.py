import warnings

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fedgcae.smote import LatentSMOTE, SmoteConfig, nearest_neighbors, on_segment_residual, smote_balance


def test_balanced_input_returned_unchanged():
    X = np.arange(12.0).reshape(6, 2)
    y = np.array([0, 1, 2, 0, 1, 2])
    Xo, yo, mask = smote_balance(X, y)
    np.testing.assert_array_equal(Xo, X)
    np.testing.assert_array_equal(yo, y)
    assert not mask.any()


def test_two_class_example():
    rng = np.random.default_rng(0)
    X = rng.normal(size=(7, 3))
    y = np.array([0, 0, 0, 0, 0, 1, 1])
    Xo, yo, mask = smote_balance(X, y, seed=4)
    assert np.bincount(yo).tolist() == [5, 5]
    assert mask.sum() == 3 and np.all(yo[mask] == 1)
    for s in Xo[mask]:
        assert on_segment_residual(s, X[y == 1]) < 1e-9


def test_k1_two_points_stay_on_segment():
    X = np.array([[0.0, 0.0], [1.0, 2.0], [5.0, 5.0], [6.0, 5.0], [7.0, 5.0]])
    y = np.array([0, 0, 1, 1, 1])
    Xo, yo, mask = smote_balance(X, y, k_neighbors=1, seed=0)
    for s in Xo[mask]:
        t = s[0]
        np.testing.assert_allclose(s, [t, 2 * t], atol=1e-15)
        assert 0 <= t <= 1


def test_single_member_class_is_duplicated_with_warning():
    X = np.array([[0.0], [1.0], [2.0], [9.0]])
    y = np.array([0, 0, 0, 1])
    with pytest.warns(RuntimeWarning, match="single sample"):
        Xo, yo, mask = smote_balance(X, y)
    np.testing.assert_array_equal(Xo[mask], [[9.0], [9.0]])


def test_empty_class_names_class():
    with pytest.raises(ValueError, match=r"\[2\]"):
        smote_balance(np.zeros((3, 2)), np.array([0, 1, 1]), classes=[0, 1, 2])


def test_neighbours_same_class_only():
    # class 1 points sit next to class 0 points; synthetics must stay in the class-1 hull
    X = np.array([[0.0, 0.0], [0.1, 0.0], [10.0, 0.0], [0.05, 0.1], [20.0, 0.0], [30.0, 0.0]])
    y = np.array([0, 0, 1, 0, 1, 1])
    Xo, yo, mask = smote_balance(np.vstack([X, X[y == 0] + 0.01]), np.concatenate([y, [0, 0, 0]]), seed=1)
    assert np.all(Xo[mask][:, 0] >= 10.0)


def test_nearest_neighbors_order_and_ties():
    X = np.array([[0.0], [1.0], [-1.0], [3.0]])
    nb = nearest_neighbors(X, 2)
    np.testing.assert_array_equal(nb[0], [1, 2])  # equal distance -> lower index
    np.testing.assert_array_equal(nb[3], [1, 0])


def test_seeded():
    rng = np.random.default_rng(5)
    X = rng.normal(size=(20, 4))
    y = np.array([0] * 12 + [1] * 5 + [2] * 3)
    a = smote_balance(X, y, seed=11)
    b = smote_balance(X, y, seed=11)
    c = smote_balance(X, y, seed=12)
    np.testing.assert_array_equal(a[0], b[0])
    assert not np.array_equal(a[0], c[0])


@settings(max_examples=60, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), n=st.integers(2, 40), classes=st.integers(1, 5),
       dim=st.integers(1, 6), k=st.integers(1, 6))
def test_properties(seed, n, classes, dim, k):
    rng = np.random.default_rng(seed)
    y = rng.integers(0, classes, size=n)
    present = np.unique(y)
    X = rng.normal(size=(n, dim))
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        Xo, yo, mask = smote_balance(X, y, k_neighbors=k, seed=seed)
    counts = np.bincount(yo)[present]
    assert np.all(counts == counts.max()) and counts.max() == np.bincount(y).max()
    np.testing.assert_array_equal(Xo[:n], X)
    np.testing.assert_array_equal(yo[:n], y)
    for s, lab in zip(Xo[mask], yo[mask]):
        assert on_segment_residual(s, X[y == lab]) < 1e-9


def test_segment_oracle_rejects_off_segment_point():
    M = np.array([[0.0, 0.0], [1.0, 0.0]])
    assert on_segment_residual([0.5, 0.0], M) < 1e-15
    assert on_segment_residual([0.5, 0.1], M) == pytest.approx(0.1)
    assert on_segment_residual([1.5, 0.0], M) == pytest.approx(0.5)


def test_estimator_api():
    rng = np.random.default_rng(0)
    X = rng.normal(size=(9, 3))
    y = np.array([0] * 6 + [1] * 3)
    sm = LatentSMOTE(k_neighbors=2, random_state=3)
    assert sm.get_params() == {"k_neighbors": 2, "random_state": 3}
    Xo, yo = sm.fit_resample(X, y)
    assert np.bincount(yo).tolist() == [6, 6] and sm.synthetic_mask_.sum() == 3
    assert sm.target_count_ == 6 and sm.n_features_in_ == 3
    with pytest.raises(ValueError):
        sm.fit_resample(X[:, :, None], y)


def test_config_validation():
    with pytest.raises(ValueError):
        SmoteConfig(k_neighbors=0)
    with pytest.raises(ValueError):
        smote_balance(np.zeros((2, 1)), np.array([0, 1]), k_neighbors=0)
