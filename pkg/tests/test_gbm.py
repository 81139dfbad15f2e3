import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import naive_best_split
from phase import gbm
from phase.errors import ConfigError, DataError
from phase.eval import average_precision


def test_grad_hess_values():
    g, h = gbm.logistic_grad_hess(np.array([0.0, 1.0, 40.0]), np.array([1.0, 0.0, 1.0]))
    np.testing.assert_allclose(g[:2], [-0.5, 0.7310585786300049], rtol=1e-12)
    np.testing.assert_allclose(h[:2], [0.25, 0.19661193324148185], rtol=1e-12)
    assert abs(g[2]) < 1e-15 and h[2] < 1e-15


def test_hand_split():
    # G_L = -2, H_L = 2: 0.5 * (4/3 + 4/3 - 0/5) = 4/3
    thr, gain, _ = gbm.find_best_split(np.array([0.0, 1, 2, 3]), np.array([-1.0, -1, 1, 1]), np.ones(4), 1.0, 0.0)
    assert thr == 1.5
    assert gain == pytest.approx(4 / 3, abs=1e-15)


def test_constant_feature_never_splits():
    assert gbm.find_best_split(np.ones(10), np.arange(10.0) - 4.5, np.ones(10)) is None


def test_split_matches_exhaustive_oracle():
    rng = np.random.default_rng(0)
    for _ in range(200):
        x = np.round(rng.normal(size=20), 1)
        x[rng.random(20) < 0.2] = np.nan
        g = rng.normal(size=20)
        h = rng.uniform(0.05, 1.0, size=20)
        lam = float(rng.choice([0.0, 1.0, 3.0]))
        gamma = float(rng.choice([0.0, 0.1]))
        mcw = float(rng.choice([0.0, 1.0]))
        got = gbm.find_best_split(x, g, h, lam, gamma, mcw)
        want = naive_best_split(x, g, h, lam, gamma, mcw)
        if want is None:
            assert got is None
        else:
            assert got[0] == want[0] and got[2] == want[2]
            assert got[1] == pytest.approx(want[1], rel=1e-12, abs=1e-12)


def test_tree_root_agrees_with_reference_split():
    # the level-wise kernel must pick the same root as a per-feature scan
    rng = np.random.default_rng(5)
    for _ in range(10):
        X = np.round(rng.normal(size=(80, 4)), 1)
        X[rng.random(X.shape) < 0.1] = np.nan
        y = (rng.random(80) < 0.4).astype(float)
        y[:2] = [0, 1]
        cfg = gbm.GBMConfig(learning_rate=1.0, max_depth=1, subsample_rate=1.0, max_rounds=1,
                            early_stopping_rounds=1, min_child_weight=0.0)
        forest = gbm.fit(X, y, X, y, cfg)
        g, h = gbm.logistic_grad_hess(np.full(80, forest.base_margin), y)
        best = None
        for f in range(4):
            s = gbm.find_best_split(X[:, f], g, h, 1.0, 0.0, 0.0)
            if s is not None and (best is None or s[1] > best[1][1] * (1 + gbm.TIE_RTOL)):
                best = (f, s)
        tree = forest.trees[0]
        if best is None:
            assert tree.feature[0] == -1
            continue
        assert tree.feature[0] == best[0]
        assert tree.threshold[0] == best[1][0]
        assert tree.missing_left[0] == best[1][2]


@pytest.mark.parametrize("seed", range(20))
def test_training_loss_monotone_full_sample(seed):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(150, 5))
    X[rng.random(X.shape) < 0.1] = np.nan
    y = (np.nan_to_num(X[:, 0]) + rng.normal(size=150) > 0.5).astype(float)
    cfg = gbm.GBMConfig(learning_rate=0.3, max_depth=3, subsample_rate=1.0, max_rounds=15,
                        early_stopping_rounds=100, reg_lambda=1.0, gamma=0.0, seed=seed)
    f = gbm.fit(X, y, X, y, cfg)
    losses = [gbm.logloss(np.full(150, f.base_margin), y)] + f.train_loss
    assert all(b <= a + 1e-12 for a, b in zip(losses, losses[1:]))


def test_separable_feature_reaches_ap_one():
    rng = np.random.default_rng(1)
    X = rng.normal(size=(400, 3))
    y = (X[:, 1] > 0.3).astype(float)
    Xv = rng.normal(size=(200, 3))
    yv = (Xv[:, 1] > 0.3).astype(float)
    f = gbm.fit(X, y, Xv, yv, gbm.GBMConfig(max_rounds=10, subsample_rate=1.0))
    assert average_precision(gbm.predict_proba(f, Xv), yv) == 1.0


def test_missing_direction_is_learned():
    rng = np.random.default_rng(2)
    X = rng.normal(size=(500, 1))
    y = (rng.random(500) < 0.1).astype(float)
    X[y == 1, 0] = np.nan  # missingness is the signal
    f = gbm.fit(X, y, X, y, gbm.GBMConfig(learning_rate=0.5, max_rounds=20, max_depth=1, subsample_rate=1.0))
    assert all(t.missing_left[0] == (t.left[0] != -1 and t.value[t.left[0]] > t.value[t.right[0]])
               for t in f.trees if t.feature[0] >= 0)
    p_missing = gbm.predict_proba(f, np.array([[np.nan]]))[0]
    p_seen = gbm.predict_proba(f, np.array([[0.0]]))[0]
    assert p_missing > 0.5 > p_seen


def test_early_stopping_and_best_round():
    rng = np.random.default_rng(3)
    X = rng.normal(size=(300, 4))
    y = (rng.random(300) < 0.3).astype(float)  # pure noise: validation loss worsens quickly
    Xv = rng.normal(size=(300, 4))
    yv = (rng.random(300) < 0.3).astype(float)
    cfg = gbm.GBMConfig(learning_rate=0.5, max_rounds=200, early_stopping_rounds=5)
    f = gbm.fit(X, y, Xv, yv, cfg)
    assert len(f.trees) < 200
    assert len(f.trees) - 1 - f.best_round == 5 or f.best_round == -1
    if f.best_round >= 0:
        assert f.valid_loss[f.best_round] == min(f.valid_loss)
    full = gbm.predict_margin(f, Xv)
    manual = f.base_margin + sum(t.predict(Xv) for t in f.trees[:f.best_round + 1])
    np.testing.assert_allclose(full, manual, rtol=0, atol=0)


def test_empty_forest_predicts_base_rate():
    f = gbm.Forest(np.log(0.25 / 0.75), [], 3, -1)
    assert gbm.predict_proba(f, np.zeros((1, 3)))[0] == pytest.approx(0.25)
    with pytest.raises(DataError):
        gbm.predict_margin(f, np.zeros((1, 4)))


def test_hand_routed_leaf():
    t = gbm.Tree(np.array([1, -1, -1]), np.array([0.5, 0, 0]), np.array([1, -1, -1]), np.array([2, -1, -1]),
                 np.array([False, True, True]), np.array([0.0, -0.3, 0.7]), np.zeros(3))
    X = np.array([[9.0, 0.2], [9.0, 0.9], [9.0, np.nan]])
    np.testing.assert_array_equal(t.predict(X), [-0.3, 0.7, 0.7])


def test_batch_equals_single_and_round_trip(tmp_path):
    rng = np.random.default_rng(4)
    X = rng.normal(size=(200, 3))
    X[rng.random(X.shape) < 0.1] = np.nan
    y = (np.nan_to_num(X[:, 2]) > 0).astype(float)
    f = gbm.fit(X, y, X, y, gbm.GBMConfig(max_rounds=8, seed=4))
    batch = gbm.predict_margin(f, X)
    single = np.array([gbm.predict_margin(f, x) for x in X])
    np.testing.assert_array_equal(batch, single)
    gbm.save_forest(f, tmp_path / "f.json")
    g = gbm.load_forest(tmp_path / "f.json")
    np.testing.assert_array_equal(gbm.predict_margin(g, X), batch)


def test_deterministic_with_seed():
    rng = np.random.default_rng(6)
    X = rng.normal(size=(300, 5))
    y = (X[:, 0] + rng.normal(size=300) > 0).astype(float)
    a = gbm.fit(X, y, X, y, gbm.GBMConfig(max_rounds=6, seed=9))
    b = gbm.fit(X, y, X, y, gbm.GBMConfig(max_rounds=6, seed=9))
    assert a.to_dict() == b.to_dict()


def test_depth_limit_respected():
    rng = np.random.default_rng(7)
    X = rng.normal(size=(500, 6))
    y = (np.sin(3 * X[:, 0]) + X[:, 1] * X[:, 2] > 0).astype(float)
    f = gbm.fit(X, y, X, y, gbm.GBMConfig(max_rounds=5, max_depth=3))
    assert all(t.depth() <= 3 for t in f.trees)
    assert all(np.all(np.isfinite(t.threshold)) for t in f.trees)


def test_config_and_data_errors():
    with pytest.raises(ConfigError):
        gbm.GBMConfig(learning_rate=0)
    with pytest.raises(ConfigError):
        gbm.GBMConfig(subsample_rate=1.5)
    with pytest.raises(DataError):
        gbm.fit(np.zeros((4, 1)), np.zeros(4), np.zeros((2, 1)), np.zeros(2))
    assert gbm.config_for_task("hypoxemia").learning_rate == 0.02
    assert gbm.config_for_task("hypotension").learning_rate == 0.1
    assert gbm.config_for_task("hypocapnia").learning_rate == 0.1


@settings(max_examples=40, deadline=None)
@given(st.lists(st.floats(-3, 3), min_size=2, max_size=15), st.integers(0, 2**31))
def test_split_gain_is_optimal_property(xs, seed):
    x = np.array(xs)
    rng = np.random.default_rng(seed)
    g = rng.normal(size=len(x))
    h = rng.uniform(0.1, 1, size=len(x))
    got = gbm.find_best_split(x, g, h)
    want = naive_best_split(x, g, h, 1.0, 0.0, 0.0)
    assert (got is None) == (want is None)
    if got is not None:
        assert got[0] == want[0] and got[1] == pytest.approx(want[1], rel=1e-12, abs=1e-12)
