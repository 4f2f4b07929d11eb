import copy
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fedsim.datasets import Examples
from fedsim.models import (
    ModelKind,
    ModelSpec,
    TrainConfig,
    deserialize_params,
    evaluate,
    local_train,
    loss_and_gradient,
    predict_proba,
    serialize_params,
    sgd,
    sgd_stacked,
)


def central_difference(f, w, h=1e-6):
    g = np.zeros_like(w)
    for i in range(len(w)):
        e = np.zeros_like(w)
        e[i] = h
        g[i] = (f(w + e) - f(w - e)) / (2 * h)
    return g


def max_relative_error(a, b):
    return np.max(np.abs(a - b)) / max(np.max(np.abs(b)), 1e-12)


def random_instance(kind, seed):
    rng = np.random.default_rng(seed)
    d, C, h = rng.integers(2, 6), rng.integers(2, 5), rng.integers(2, 6)
    spec = ModelSpec(kind=kind, input_dim=int(d), num_classes=int(C), hidden_dim=int(h) if kind == "mlp" else 0)
    w = rng.standard_normal(spec.num_params)
    n = int(rng.integers(1, 8))
    batch = Examples(rng.standard_normal((n, d)), rng.integers(0, C, n))
    return spec, w, batch


def toy_data(n=30, d=3, C=3, seed=0):
    rng = np.random.default_rng(seed)
    return Examples(rng.standard_normal((n, d)), rng.integers(0, C, n))


def test_param_counts():
    assert ModelSpec(input_dim=60, num_classes=10).num_params == 610
    assert ModelSpec(kind="mlp", input_dim=5, num_classes=3, hidden_dim=4).num_params == 4 * 5 + 4 + 3 * 4 + 3


def test_predict_proba_zero_weights_uniform():
    spec = ModelSpec(input_dim=4, num_classes=10)
    p = predict_proba(spec, np.zeros(spec.num_params), np.ones(4))
    assert np.allclose(p, 0.1, atol=1e-15)


def test_predict_proba_closed_form():
    # logits (0, ln 3): bias-only MLR with zero weights
    spec = ModelSpec(input_dim=1, num_classes=2)
    w = np.array([0.0, 0.0, 0.0, math.log(3)])
    p = predict_proba(spec, w, np.array([2.5]))
    assert p == pytest.approx([0.25, 0.75], abs=1e-15)


def test_predict_proba_shift_invariant_and_overflow_safe():
    spec = ModelSpec(input_dim=1, num_classes=3)
    w = np.array([0.0, 0.0, 0.0, 1.0, 2.0, 3.0])
    shifted = w.copy()
    shifted[3:] += 7.0
    x = np.array([0.3])
    assert predict_proba(spec, w, x) == pytest.approx(predict_proba(spec, shifted, x), abs=1e-15)
    huge = w.copy()
    huge[3:] += 1e4
    p = predict_proba(spec, huge, x)
    assert np.all(np.isfinite(p)) and abs(p.sum() - 1) < 1e-12


def test_predict_proba_rejects_nonfinite():
    spec = ModelSpec(input_dim=2, num_classes=2)
    with pytest.raises(ValueError):
        predict_proba(spec, np.zeros(spec.num_params), np.array([np.nan, 0.0]))


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 10_000), kind=st.sampled_from(["mlr", "mlp"]))
def test_predict_proba_simplex(seed, kind):
    spec, w, batch = random_instance(kind, seed)
    p = predict_proba(spec, 10 * w, batch.x)
    assert np.all(p >= 0)
    assert np.all(np.abs(p.sum(axis=1) - 1) <= 1e-12)


def test_loss_uniform_prediction():
    spec = ModelSpec(input_dim=5, num_classes=10)
    loss, _ = loss_and_gradient(spec, np.zeros(spec.num_params), toy_data(d=5, C=10))
    assert loss == pytest.approx(math.log(10), abs=1e-12)
    assert loss == pytest.approx(2.302585, abs=1e-6)


def test_loss_perfect_prediction():
    spec = ModelSpec(input_dim=1, num_classes=2)
    w = np.array([0.0, 0.0, 0.0, 800.0])
    loss, g = loss_and_gradient(spec, w, Examples(np.array([[1.0]]), np.array([1])))
    assert loss == 0.0
    assert np.all(g == 0.0)


def test_loss_never_nan_on_extreme_logits():
    spec = ModelSpec(input_dim=1, num_classes=2)
    w = np.array([0.0, 0.0, 800.0, 0.0])
    loss, g = loss_and_gradient(spec, w, Examples(np.array([[1.0]]), np.array([1])))
    assert loss == pytest.approx(800.0)
    assert np.all(np.isfinite(g))


@pytest.mark.parametrize("kind", ["mlr", "mlp"])
def test_gradient_matches_finite_differences(kind):
    for seed in range(25):
        spec, w, batch = random_instance(kind, seed)
        _, g = loss_and_gradient(spec, w, batch)
        fd = central_difference(lambda v: loss_and_gradient(spec, v, batch)[0], w)
        assert max_relative_error(g, fd) <= 1e-6, seed


def test_mlr_convexity():
    rng = np.random.default_rng(3)
    spec = ModelSpec(input_dim=4, num_classes=3)
    data = toy_data(n=40, d=4, C=3)
    loss = lambda v: loss_and_gradient(spec, v, data)[0]
    for _ in range(50):
        w1, w2 = rng.standard_normal((2, spec.num_params)) * 2
        lam = rng.random()
        assert loss(lam * w1 + (1 - lam) * w2) <= lam * loss(w1) + (1 - lam) * loss(w2) + 1e-9


def test_local_train_zero_lr():
    spec = ModelSpec(input_dim=3, num_classes=3)
    w = spec.init()
    delta, w_local = local_train(spec, w, toy_data(), TrainConfig(epochs=3, batch_size=7, learning_rate=0.0),
                                 np.random.default_rng(0))
    assert np.all(delta == 0.0)
    assert np.array_equal(w_local, w)


@pytest.mark.parametrize("kind", ["mlr", "mlp"])
def test_local_train_single_step_closed_form(kind):
    spec = ModelSpec(kind=kind, input_dim=3, num_classes=3, hidden_dim=4 if kind == "mlp" else 0)
    w = spec.init()
    data = toy_data(n=12)
    rng = np.random.default_rng(8)
    perm = copy.deepcopy(rng).permutation(len(data))
    delta, _ = local_train(spec, w, data, TrainConfig(epochs=1, batch_size=50, learning_rate=0.05), rng)
    _, g = loss_and_gradient(spec, w, data[perm])
    assert np.array_equal(delta, -(0.05 * g))
    # order only changes float summation
    _, g_plain = loss_and_gradient(spec, w, data)
    assert np.allclose(delta, -0.05 * g_plain, rtol=1e-12, atol=1e-15)


def test_local_train_small_step_linearity():
    spec = ModelSpec(input_dim=3, num_classes=3, init_seed=2)
    w = spec.init()
    data = toy_data(n=40)
    d1, _ = local_train(spec, w, data, TrainConfig(epochs=1, batch_size=8, learning_rate=1e-6), np.random.default_rng(0))
    d2, _ = local_train(spec, w, data, TrainConfig(epochs=2, batch_size=8, learning_rate=1e-6), np.random.default_rng(0))
    ratio = np.linalg.norm(d2) / np.linalg.norm(d1)
    assert ratio == pytest.approx(2.0, rel=0.05)


def test_local_train_deterministic_and_reconstruction():
    spec = ModelSpec(kind="mlp", input_dim=3, num_classes=3, hidden_dim=5)
    w = spec.init()
    cfg = TrainConfig(epochs=2, batch_size=7, learning_rate=0.1)
    a = local_train(spec, w, toy_data(), cfg, np.random.default_rng(4))
    b = local_train(spec, w, toy_data(), cfg, np.random.default_rng(4))
    assert a[0].tobytes() == b[0].tobytes()
    assert np.array_equal(w + a[0], a[1])


def test_local_train_step_count():
    assert TrainConfig(epochs=3, batch_size=20).local_steps(200) == 30
    assert TrainConfig(epochs=1, batch_size=20).local_steps(161) == 9


def test_local_train_moves_downhill():
    spec = ModelSpec(input_dim=3, num_classes=3)
    data = toy_data(n=60)
    w = spec.init()
    _, w_local = local_train(spec, w, data, TrainConfig(epochs=5, batch_size=10, learning_rate=0.2),
                             np.random.default_rng(0))
    assert evaluate(spec, w_local, data)[0] < evaluate(spec, w, data)[0]


def test_evaluate_tie_break_lowest_class():
    spec = ModelSpec(input_dim=2, num_classes=2)
    data = Examples(np.ones((4, 2)), np.array([0, 1, 0, 1]))
    loss, acc = evaluate(spec, np.zeros(spec.num_params), data)
    assert acc == 0.5


def test_evaluate_counting():
    spec = ModelSpec(input_dim=1, num_classes=2)
    w = np.array([-1.0, 1.0, 0.0, 0.0])  # predicts class 1 for x > 0
    data = Examples(np.array([[1.0], [2.0], [-1.0], [-3.0]]), np.array([1, 1, 0, 1]))
    assert evaluate(spec, w, data)[1] == 0.75


def test_evaluate_loss_agrees_with_gradient_loss():
    spec, w, batch = random_instance("mlp", 17)
    assert evaluate(spec, w, batch)[0] == pytest.approx(loss_and_gradient(spec, w, batch)[0], abs=1e-12)


def test_evaluate_empty():
    spec = ModelSpec(input_dim=2, num_classes=2)
    with pytest.raises(ValueError):
        evaluate(spec, np.zeros(spec.num_params), Examples(np.zeros((0, 2)), np.zeros(0, dtype=int)))


def test_init_modes():
    spec = ModelSpec(input_dim=60, num_classes=10, init_seed=1)
    w = spec.init()
    assert np.array_equal(w, spec.init())
    assert 0.008 < w.std() < 0.012
    assert np.all(ModelSpec(zero_init=True).init() == 0)


def test_param_serialization_roundtrip():
    w = np.random.default_rng(0).standard_normal(17)
    buf = serialize_params(w)
    assert len(buf) == 8 + 17 * 8
    assert buf[:8] == (17).to_bytes(8, "little")
    back, end = deserialize_params(buf)
    assert end == len(buf)
    assert back.tobytes() == w.tobytes()
    with pytest.raises(ValueError):
        deserialize_params(buf[:-1])


def test_model_kind_validation():
    with pytest.raises(ValueError):
        ModelSpec(kind=ModelKind.MLP, hidden_dim=0)
    with pytest.raises(ValueError):
        ModelSpec(kind="cnn")


def test_stacked_sgd_matches_per_node_bits():
    spec = ModelSpec(input_dim=6, num_classes=4, init_seed=3)
    w = spec.init()
    sets = [toy_data(n=45, d=6, C=4, seed=s) for s in range(5)]
    rows = sgd_stacked(spec, w, sets, 10, 0.07, 23, [np.random.default_rng([7, k]) for k in range(5)])
    for k, data in enumerate(sets):
        alone = sgd(spec, w, data, 10, 0.07, 23, np.random.default_rng([7, k]))
        assert rows[k].tobytes() == alone.tobytes()


def test_stacked_sgd_rejects_bad_input():
    spec = ModelSpec(input_dim=3, num_classes=3)
    w = spec.init()
    rng = np.random.default_rng(0)
    with pytest.raises(ValueError, match="equal-sized"):
        sgd_stacked(spec, w, [toy_data(n=10), toy_data(n=11)], 5, 0.1, 2, [rng, rng])
    with pytest.raises(ValueError):
        sgd_stacked(spec, w, [toy_data()], 5, 0.1, 2, [])
    mlp = ModelSpec(kind="mlp", input_dim=3, num_classes=3, hidden_dim=2)
    with pytest.raises(ValueError, match="MLR"):
        sgd_stacked(mlp, mlp.init(), [toy_data()], 5, 0.1, 2, [rng])
