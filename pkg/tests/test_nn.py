import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dpfedsim.nn import (
    Batch,
    ModelSpec,
    NonFiniteGradientError,
    ParamVector,
    ShapeError,
    compute_loss,
    evaluate,
    forward,
    init_params,
    loss_and_gradient,
    sgd_step,
    update_norm,
)


def numeric_gradient(spec, params, batch, h=1e-6):
    """Central finite differences of the batch loss, one coordinate at a time."""
    base = params.values.copy()
    grad = np.empty_like(base)
    for j in range(base.size):
        up, down = base.copy(), base.copy()
        up[j] += h
        down[j] -= h
        lu = compute_loss(forward(spec, params.with_values(up), batch.inputs), batch.targets, spec.task)
        ld = compute_loss(forward(spec, params.with_values(down), batch.inputs), batch.targets, spec.task)
        grad[j] = (lu - ld) / (2 * h)
    return grad


def max_rel_error(a, b, floor=1e-7):
    return float(np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)))


def seeded_case(seed, sizes=(2, 4, 3), task="classification", n=5):
    rng = np.random.default_rng(seed)
    spec = ModelSpec(sizes, task)
    params = init_params(spec, rng)
    # random biases so ReLU kinks are not all at the same place
    params = params.with_values(params.values + 0.1 * rng.standard_normal(len(params)))
    X = rng.standard_normal((n, sizes[0]))
    if task == "classification":
        y = rng.integers(0, sizes[-1], n)
    else:
        y = rng.standard_normal((n, sizes[-1])) if sizes[-1] > 1 else rng.standard_normal(n)
    return spec, params, Batch(X, y)


# --- layout ----------------------------------------------------------------

def test_param_count_matches_layout():
    spec = ModelSpec((784, 64, 10))
    assert spec.n_params == 784 * 64 + 64 + 64 * 10 + 10
    assert len(init_params(spec, np.random.default_rng(0))) == spec.n_params


def test_param_vector_rejects_wrong_length():
    with pytest.raises(ShapeError):
        ParamVector(np.zeros(5), ((2, 2),))


def test_param_vector_is_read_only():
    p = init_params(ModelSpec((2, 3, 2)), np.random.default_rng(0))
    with pytest.raises(ValueError):
        p.values[0] = 1.0


def test_classification_needs_two_outputs():
    with pytest.raises(ValueError):
        ModelSpec((4, 3, 1), "classification")


def test_init_is_glorot_bounded_with_zero_bias():
    spec = ModelSpec((20, 30, 5))
    p = init_params(spec, np.random.default_rng(1))
    for (w, b), (rows, cols) in zip(p.layers(), spec.shapes):
        assert np.all(np.abs(w) <= math.sqrt(6 / (rows + cols)))
        assert np.all(b == 0)


# --- forward ----------------------------------------------------------------

def test_identity_linear_net():
    spec = ModelSpec((2, 2), "regression")
    p = ParamVector.from_layers([(np.eye(2), np.zeros(2))])
    assert np.array_equal(forward(spec, p, np.array([[1.0, 2.0]])), np.array([[1.0, 2.0]]))


def test_zero_final_layer_gives_uniform_log_probs():
    spec = ModelSpec((3, 4, 5))
    rng = np.random.default_rng(2)
    p = init_params(spec, rng)
    (w1, b1), (w2, b2) = p.layers()
    p = ParamVector.from_layers([(w1, b1), (np.zeros_like(w2), np.zeros_like(b2))])
    out = forward(spec, p, rng.standard_normal((7, 3)))
    assert np.allclose(out, math.log(1 / 5), atol=1e-12)


def test_forward_matches_hand_stepped_arithmetic():
    spec = ModelSpec((2, 4, 3))
    p = init_params(spec, np.random.default_rng(3))
    p = p.with_values(p.values + 0.05)
    x = [0.7, -1.3]
    (w1, b1), (w2, b2) = p.layers()
    hidden = []
    for r in range(4):
        z = b1[r] + sum(w1[r][c] * x[c] for c in range(2))
        hidden.append(z if z > 0 else 0.0)
    logits = [b2[r] + sum(w2[r][c] * hidden[c] for c in range(4)) for r in range(3)]
    norm = math.log(sum(math.exp(v) for v in logits))
    expected = [v - norm for v in logits]
    got = forward(spec, p, np.array([x]))[0]
    assert np.allclose(got, expected, rtol=0, atol=1e-12)


def test_forward_rejects_wrong_width():
    spec = ModelSpec((3, 4, 2))
    p = init_params(spec, np.random.default_rng(0))
    with pytest.raises(ShapeError):
        forward(spec, p, np.zeros((2, 4)))


@given(st.integers(0, 10_000))
@settings(max_examples=40, deadline=None)
def test_log_softmax_rows_normalize(seed):
    spec, params, batch = seeded_case(seed, sizes=(3, 5, 4))
    out = forward(spec, params, batch.inputs * 50)
    assert np.allclose(np.exp(out).sum(axis=1), 1.0, atol=1e-9)


# --- loss -------------------------------------------------------------------

def test_perfect_prediction_loss_zero():
    out = np.array([[0.0, -1e300]])
    assert compute_loss(out, np.array([0]), "classification") == 0.0


def test_uniform_ten_class_loss():
    out = np.full((4, 10), math.log(0.1))
    assert compute_loss(out, np.array([0, 3, 9, 2]), "classification") == pytest.approx(2.302585, abs=1e-6)


def test_mse_example():
    assert compute_loss(np.array([[1.0], [2.0]]), np.array([0.0, 0.0]), "regression") == 2.5


def test_empty_batch_rejected():
    with pytest.raises(ValueError):
        compute_loss(np.zeros((0, 3)), np.zeros(0), "classification")


# --- gradients and SGD ------------------------------------------------------

def test_single_neuron_step():
    spec = ModelSpec((1, 1), "regression")
    p = ParamVector.from_layers([(np.array([[1.0]]), np.array([0.0]))])
    batch = Batch(np.array([[2.0]]), np.array([0.0]))
    _, g = loss_and_gradient(spec, p, batch)
    assert g.values[0] == pytest.approx(8.0)
    assert numeric_gradient(spec, p, batch)[0] == pytest.approx(8.0, rel=1e-6)
    assert sgd_step(spec, p, batch, 0.1).values[0] == pytest.approx(0.2)


def test_zero_gradient_leaves_params():
    spec = ModelSpec((1, 1), "regression")
    p = ParamVector.from_layers([(np.array([[2.0]]), np.array([1.0]))])
    batch = Batch(np.array([[1.0], [3.0]]), np.array([3.0, 7.0]))
    assert sgd_step(spec, p, batch, 0.5) == p


@pytest.mark.parametrize("task,sizes", [("classification", (2, 4, 3)), ("regression", (3, 5, 1)),
                                        ("regression", (2, 4, 2))])
def test_gradient_matches_finite_differences(task, sizes):
    spec, params, batch = seeded_case(11, sizes, task)
    _, g = loss_and_gradient(spec, params, batch)
    assert max_rel_error(g.values, numeric_gradient(spec, params, batch)) < 1e-4


@given(st.integers(0, 2**31 - 1), st.sampled_from(["classification", "regression"]))
@settings(max_examples=30, deadline=None)
def test_gradient_property(seed, task):
    sizes = (3, 4, 3) if task == "classification" else (3, 4, 1)
    spec, params, batch = seeded_case(seed, sizes, task)
    _, g = loss_and_gradient(spec, params, batch)
    assert max_rel_error(g.values, numeric_gradient(spec, params, batch)) < 1e-4


def test_small_step_does_not_increase_loss():
    worse = 0
    for seed in range(120):
        task = "classification" if seed % 2 else "regression"
        spec, params, batch = seeded_case(seed, (3, 6, 3) if task == "classification" else (3, 6, 1), task)
        before, _ = loss_and_gradient(spec, params, batch)
        after, _ = loss_and_gradient(spec, sgd_step(spec, params, batch, 1e-3), batch)
        worse += after > before
    assert worse == 0


def test_non_finite_gradient_names_layer():
    spec = ModelSpec((2, 3, 1), "regression")
    p = init_params(spec, np.random.default_rng(0))
    batch = Batch(np.array([[1e200, 1e200]]), np.array([0.0]))
    with pytest.raises(NonFiniteGradientError) as err:
        with np.errstate(all="ignore"):
            loss_and_gradient(spec, p.with_values(p.values + 1.0), batch)
    assert err.value.layer in (0, 1)


def test_lr_must_be_positive():
    spec, params, batch = seeded_case(0)
    with pytest.raises(ValueError):
        sgd_step(spec, params, batch, 0.0)


def test_training_is_bitwise_deterministic():
    def run():
        spec, params, batch = seeded_case(5, (4, 8, 3), n=16)
        for _ in range(20):
            params = sgd_step(spec, params, batch, 0.1)
        return params
    assert run() == run()


# --- norm -------------------------------------------------------------------

def test_update_norm_examples():
    assert update_norm(np.zeros(4)) == 0.0
    assert update_norm(np.array([3.0, 4.0])) == 5.0


def test_update_norm_matches_compensated_sum():
    v = np.random.default_rng(9).standard_normal(10_001) * 1e3
    oracle = math.sqrt(math.fsum(float(x) * float(x) for x in v))
    assert update_norm(v) == pytest.approx(oracle, rel=1e-12)


def test_evaluate_regression_accuracy_is_nan():
    spec, params, batch = seeded_case(1, (3, 4, 1), "regression")
    loss, acc = evaluate(spec, params, batch.inputs, batch.targets)
    assert loss >= 0 and math.isnan(acc)
