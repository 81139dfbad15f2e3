import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import finite_difference_error, random_tiny_net
from phase import neuralnet as nn
from phase.errors import ConfigError, DataError, NumericError


@pytest.mark.parametrize("loss", ["mse", "bce"])
def test_backward_matches_finite_differences(loss):
    rng = np.random.default_rng(5 if loss == "mse" else 6)
    for _ in range(3):
        assert finite_difference_error(*random_tiny_net(rng, loss), loss) < 1e-4


def test_dense_only_gradient():
    rng = np.random.default_rng(0)
    spec = nn.NetworkSpec(3, [("dense", 4, "relu"), ("dense", 3, "tanh")], 2, "linear", None, 0.2)
    params = nn.init_params(spec, 1)
    X = rng.normal(size=(6, 3))
    Y = rng.normal(size=(6, 2))
    assert finite_difference_error(spec, params, X, Y, "mse") < 1e-4


def test_logit_gradient_equals_chain_rule():
    rng = np.random.default_rng(1)
    spec, params, X, Y = random_tiny_net(rng, "bce")
    out, cache = nn.forward(spec, params, X, "train", 3)
    a = nn.backward(spec, params, cache, nn.bce_loss(out, Y)[1])
    b = nn.backward(spec, params, cache, nn.bce_from_logits(cache["z"], Y)[1], wrt_logits=True)
    for k in a:
        np.testing.assert_allclose(a[k], b[k], rtol=1e-7, atol=1e-12)


def test_output_and_embedding_shapes():
    spec = nn.lstm_spec((5, 4), output_units=3, seq_len=7)
    params = nn.init_params(spec, 0)
    X = np.zeros((9, 7, 1))
    out, cache = nn.forward(spec, params, X)
    assert out.shape == (9, 3)
    assert cache["embedding"].shape == (9, 4)
    assert nn.embed(spec, params, X, batch_size=4).shape == (9, 4)


def test_input_shape_checked():
    spec = nn.lstm_spec((3,), seq_len=5)
    with pytest.raises(DataError):
        nn.forward(spec, nn.init_params(spec, 0), np.zeros((2, 4, 1)))


def test_forget_bias_initialised_to_one():
    spec = nn.lstm_spec((4,), seq_len=3)
    b = nn.init_params(spec, 0)["L0.b"]
    np.testing.assert_array_equal(b[4:8], 1.0)
    np.testing.assert_array_equal(np.delete(b, range(4, 8)), 0.0)


def test_eval_mode_ignores_dropout():
    spec = nn.lstm_spec((6,), seq_len=4, dropout_rate=0.5, recurrent_dropout_rate=0.5)
    params = nn.init_params(spec, 2)
    X = np.random.default_rng(0).normal(size=(5, 4, 1))
    a, _ = nn.forward(spec, params, X, "eval", 1)
    b, _ = nn.forward(spec, params, X, "eval", 99)
    np.testing.assert_array_equal(a, b)
    c, _ = nn.forward(spec, params, X, "train", 1)
    assert not np.array_equal(a, c)


def test_inverted_dropout_preserves_expectation():
    spec = nn.NetworkSpec(1, [("dense", 1, "linear")], 1, "linear", None, 0.5)
    params = {"D0.W": np.ones((1, 1)), "D0.b": np.zeros(1), "out.W": np.ones((1, 1)), "out.b": np.zeros(1)}
    out, _ = nn.forward(spec, params, np.ones((200000, 1)), "train", 4)
    assert set(np.unique(out).tolist()) == {0.0, 2.0}
    assert abs(out.mean() - 1.0) < 0.01


def test_stale_cache_rejected():
    spec = nn.lstm_spec((3,), seq_len=2)
    params = nn.init_params(spec, 0)
    out, cache = nn.forward(spec, params, np.zeros((2, 2, 1)))
    params["out.b"] += 1.0
    with pytest.raises(DataError):
        nn.backward(spec, params, cache, np.ones_like(out))


@pytest.mark.parametrize("bad", [
    dict(hidden=[("dense", 3, "relu"), ("lstm", 2)]),
    dict(hidden=[("lstm", 0)]),
    dict(hidden=[("dense", 3, "softmax")]),
    dict(dropout_rate=1.0),
    dict(output_activation="relu"),
])
def test_spec_validation(bad):
    kw = dict(input_dim=1, hidden=[("lstm", 2)], output_units=1, seq_len=3)
    kw.update(bad)
    with pytest.raises(ConfigError):
        nn.NetworkSpec(**kw)


@given(st.floats(-50, 50), st.sampled_from([0, 1]))
def test_bce_from_logits_matches_probability_form(z, y):
    zv, yv = np.array([[z]]), np.array([[float(y)]])
    p = nn.sigmoid(zv)
    if 1e-10 < p[0, 0] < 1 - 1e-10:
        assert nn.bce_from_logits(zv, yv)[0] == pytest.approx(nn.bce_loss(p, yv)[0], rel=1e-6)


def _quadratic_descent(step, state, lr, n=300):
    params = {"w": np.array([3.0, -2.0])}
    for _ in range(n):
        step(params, {"w": 2 * params["w"]}, state, lr)
    return params["w"]


def test_optimizers_descend():
    assert np.abs(_quadratic_descent(nn.adam_step, nn.adam_state(), 0.05)).max() < 0.05
    assert np.abs(_quadratic_descent(nn.rmsprop_step, nn.rmsprop_state(), 0.01, n=800)).max() < 0.05


def test_adam_first_step_is_lr_times_sign():
    params = {"w": np.array([1.0, -1.0, 0.5])}
    nn.adam_step(params, {"w": np.array([4.0, -0.1, 2.0])}, nn.adam_state(), 0.01)
    np.testing.assert_allclose(params["w"], [0.99, -0.99, 0.49], atol=1e-8)


def test_nonfinite_gradient_raises():
    with pytest.raises(NumericError):
        nn.adam_step({"w": np.zeros(1)}, {"w": np.array([np.nan])}, nn.adam_state(), 0.1)


def _toy_sequences(n, seed):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(n, 5, 1))
    return X, (X[:, -1, 0] > 0).astype(float)[:, None]


def test_training_learns_and_is_deterministic():
    spec = nn.lstm_spec((6,), output_units=1, output_activation="sigmoid", seq_len=5,
                        dropout_rate=0.0, recurrent_dropout_rate=0.0)
    cfg = nn.TrainConfig("adam", 0.02, "bce", epochs=15, batch_size=32, seed=3)
    X, Y = _toy_sequences(400, 0)
    Xv, Yv = _toy_sequences(100, 1)
    p1, h1 = nn.train(spec, cfg, X, Y, Xv, Yv)
    p2, h2 = nn.train(spec, cfg, X, Y, Xv, Yv)
    for k in p1:
        np.testing.assert_array_equal(p1[k], p2[k])
    assert h1.valid_loss == h2.valid_loss
    assert min(h1.valid_loss) < 0.5 * h1.initial_valid_loss
    assert h1.valid_loss[h1.selected_epoch] == min(h1.valid_loss)
    assert nn.loss_value("bce", spec, p1, Xv, Yv) == pytest.approx(min(h1.valid_loss))


def test_zero_epochs_returns_initial_parameters():
    spec = nn.lstm_spec((3,), seq_len=5)
    X, Y = _toy_sequences(20, 0)
    init = nn.init_params(spec, 9)
    p, h = nn.train(spec, nn.TrainConfig(epochs=0), X, Y, X, Y, init=init)
    assert h.selected_epoch == -1
    for k in p:
        np.testing.assert_array_equal(p[k], init[k])


def test_balanced_batches_are_half_positive():
    cfg = nn.TrainConfig(batch_size=10, balanced_upsampling=True, loss="bce")
    y = np.zeros(100)
    y[:3] = 1
    for idx in nn._batches(np.random.default_rng(0), y, cfg):
        assert y[idx].sum() == len(idx) / 2


def test_balanced_upsampling_needs_both_classes():
    spec = nn.lstm_spec((3,), output_activation="sigmoid", seq_len=5)
    X, _ = _toy_sequences(20, 0)
    with pytest.raises(DataError):
        nn.train(spec, nn.TrainConfig(loss="bce", balanced_upsampling=True, epochs=1), X,
                 np.zeros((20, 1)), X, np.zeros((20, 1)))


@settings(max_examples=20, deadline=None)
@given(st.integers(1, 6), st.integers(1, 5), st.integers(1, 4))
def test_batched_embed_matches_single_pass(n, hid, bs):
    spec = nn.lstm_spec((hid,), seq_len=3)
    params = nn.init_params(spec, n)
    X = np.random.default_rng(n).normal(size=(n, 3, 1))
    _, cache = nn.forward(spec, params, X)
    np.testing.assert_allclose(nn.embed(spec, params, X, batch_size=bs), cache["embedding"], rtol=0, atol=1e-14)


def test_zero_parameters_give_zero_hidden_state():
    spec = nn.lstm_spec((3, 2), seq_len=4, dropout_rate=0.0, recurrent_dropout_rate=0.0)
    params = nn.zero_params(spec)
    params["out.b"][:] = 0.7
    out, cache = nn.forward(spec, params, np.random.default_rng(0).normal(size=(2, 4, 1)))
    np.testing.assert_array_equal(cache["embedding"], 0.0)
    np.testing.assert_array_equal(out, 0.7)


def test_single_cell_hand_value():
    spec = nn.NetworkSpec(1, [("lstm", 1)], 1, "linear", 1)
    params = {"L0.W": np.ones((4, 1)), "L0.R": np.zeros((4, 1)), "L0.b": np.zeros(4),
              "out.W": np.ones((1, 1)), "out.b": np.zeros(1)}
    _, cache = nn.forward(spec, params, np.ones((1, 1, 1)))
    s = 1 / (1 + np.exp(-1.0))
    assert cache["embedding"][0, 0] == pytest.approx(s * np.tanh(s * np.tanh(1.0)), abs=1e-10)
    assert round(cache["embedding"][0, 0], 10) == 0.3696063529  # 30-digit mpmath value


def test_zero_loss_gradient_gives_zero_grads():
    rng = np.random.default_rng(2)
    spec, params, X, Y = random_tiny_net(rng, "mse")
    out, cache = nn.forward(spec, params, X)
    for g in nn.backward(spec, params, cache, np.zeros_like(out)).values():
        np.testing.assert_array_equal(g, 0.0)
    _, dl = nn.mse_loss(out, out.copy())
    for g in nn.backward(spec, params, cache, dl).values():
        np.testing.assert_array_equal(g, 0.0)


def test_optimizer_hand_steps():
    p = {"w": np.zeros(1)}
    nn.adam_step(p, {"w": np.ones(1)}, nn.adam_state(), 0.1)
    assert p["w"][0] == pytest.approx(-0.1, rel=1e-6)
    p = {"w": np.zeros(1)}
    state = nn.rmsprop_state()
    nn.rmsprop_step(p, {"w": np.ones(1)}, state, 0.1)
    assert p["w"][0] == pytest.approx(-0.1 / (np.sqrt(0.1) + 1e-8), rel=1e-12)
    assert (state["v"]["w"] >= 0).all()
    p = {"w": np.array([1.0])}
    nn.sgd_step(p, {"w": np.array([2.0])}, nn.sgd_state(), 0.25)
    assert p["w"][0] == 0.5
    for step, st_ in ((nn.adam_step, nn.adam_state()), (nn.rmsprop_step, nn.rmsprop_state())):
        p = {"w": np.array([1.5])}
        step(p, {"w": np.zeros(1)}, st_, 0.1)
        assert p["w"][0] == 1.5


def test_one_epoch_selects_epoch_zero():
    spec = nn.lstm_spec((3,), seq_len=5, dropout_rate=0.0, recurrent_dropout_rate=0.0)
    X, Y = _toy_sequences(40, 0)
    _, h = nn.train(spec, nn.TrainConfig(epochs=1, batch_size=16), X, Y, X, Y)
    assert h.selected_epoch == 0 and len(h.valid_loss) == len(h.train_loss) == 1


def test_dense_net_fits_separable_toy_set():
    rng = np.random.default_rng(0)
    X = rng.normal(size=(400, 2))
    y = (X[:, 0] + X[:, 1] > 0).astype(float)[:, None]
    X = X + np.sign(X[:, :1] + X[:, 1:]) * 0.5  # widen the margin
    spec = nn.NetworkSpec(2, [("dense", 8, "tanh")], 1, "sigmoid")
    _, h = nn.train(spec, nn.TrainConfig("adam", 0.01, "bce", epochs=200, batch_size=32), X, y, X, y)
    assert min(h.train_loss) < 0.1


def test_recurrent_mask_constant_over_time():
    spec = nn.lstm_spec((5,), seq_len=6, dropout_rate=0.0, recurrent_dropout_rate=0.5)
    masks = nn._masks(spec, 3, "train", 1)
    assert masks[0][0] is None and masks[0][1].shape == (3, 5)  # one (batch, units) mask per sequence
