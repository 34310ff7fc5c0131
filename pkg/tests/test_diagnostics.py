import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from factornet import diagnostics as diag
from factornet.factorization import FactorizePolicy, factorize_model
from factornet.models import smallcnn
from factornet.regularization import nuclear_bound_gap
from factornet.tensor import Rng, frobenius_norm


def norm_model(seed=0):
    model = smallcnn(1, (4, 6, 6), 3, seed=seed)
    return factorize_model(model, FactorizePolicy("lowrank", rank=2, spectral=True))


def test_metric_trace_csv_format():
    tr = diag.MetricTrace()
    tr.add(0, "train", "loss", 0.1)
    tr.add(3, "eval", "accuracy", 1 / 3)
    text = tr.to_csv()
    assert text == "step,phase,metric,value\n0,train,loss,0.1\n3,eval,accuracy,0.3333333333333333\n"
    back = diag.MetricTrace.from_csv(text)
    assert back.rows == tr.rows
    assert back.values("accuracy") == [1 / 3]
    with pytest.raises(ValueError):
        tr.add(4, "train", "loss", float("nan"))
    with pytest.raises(ValueError):
        diag.MetricTrace.from_csv("a,b\n")


def test_effective_step_size_example():
    model = norm_model()
    layers = [l for l in diag.normalized_weighted_layers(model) if hasattr(l.weight, "inner")]
    for layer in layers:
        diag.rescale_to_norm(layer, 2.0)
    assert diag.effective_step_size(model, 0.1, layers) == pytest.approx(0.025, rel=1e-12)


@settings(max_examples=20, deadline=None)
@given(c=st.floats(0.1, 10.0))
def test_effective_step_size_homogeneity(c):
    model = norm_model()
    layers = [l for l in diag.normalized_weighted_layers(model) if hasattr(l.weight, "inner")]
    before = diag.effective_step_size(model, 0.1, layers)
    for layer in layers:
        diag.rescale_to_norm(layer, c * diag.layer_norm(layer))
    assert diag.effective_step_size(model, 0.1, layers) == pytest.approx(before / c ** 2, rel=1e-9)


def test_effective_step_size_skips_zero_layers(caplog):
    model = norm_model()
    layers = [l for l in diag.normalized_weighted_layers(model) if hasattr(l.weight, "inner")]
    layers[0].weight.U.value[:] = 0.0
    val = diag.effective_step_size(model, 0.1, layers)
    assert math.isfinite(val) and "zero norm" in caplog.text


def test_normalized_layers_detection():
    model = smallcnn(1, (4, 6, 6), 3)
    names = [l.name for l in diag.normalized_weighted_layers(model)]
    assert len(names) == 3
    assert all(getattr(l, "normalized", False) for l in diag.normalized_weighted_layers(model))


def test_update_order_zero_gradient_is_exact(rng):
    U, V = rng.normal((6, 4)), rng.normal((4, 4))
    fit = diag.update_order_check(U, V, np.zeros((6, 4)))
    assert fit.exact and all(e < 1e-14 for e in fit.errors)


@pytest.mark.parametrize("shape", [(6, 4, 3), (10, 10, 5), (8, 3, 1)])
def test_update_order_slope_near_two(shape):
    m, n, r = shape
    slopes = []
    for seed in range(10):
        rng = Rng(seed, 77)
        fit = diag.update_order_check(rng.normal((m, r)), rng.normal((n, r)), rng.normal((m, n)))
        slopes.append(fit.slope)
    assert 1.8 <= float(np.median(slopes)) <= 2.2


def test_update_order_prediction_stays_unit_to_first_order(rng):
    U, V, G = rng.normal((6, 3)), rng.normal((4, 3)), rng.normal((6, 4))
    pred = diag.predicted_direction(U, V, G, 1e-3)
    w_hat = diag.vec(U @ V.T) / frobenius_norm(U @ V.T)
    assert abs(w_hat @ (pred - w_hat)) <= 1e-14


def test_unit_norm_defect_is_second_order(rng):
    U, V, G = rng.normal((6, 3)), rng.normal((4, 3)), rng.normal((6, 4))
    cs = [diag.unit_norm_defect(U, V, G, lr) / lr ** 2 for lr in (1e-2, 5e-3, 2.5e-3, 1.25e-3)]
    assert max(cs) / min(cs) < 1.2


def test_norm_matching_preserves_function_and_hits_target():
    model = norm_model(1)
    x = Rng(3).normal((16, 1, 8, 8))
    layers = diag.normalized_weighted_layers(model)
    # work at a weight scale where the normalization epsilon is negligible
    diag.norm_matching_controller(model, {l.name: 30 * diag.layer_norm(l) for l in layers})
    before = model.forward(x, train=True)
    targets = {l.name: 1.7 * diag.layer_norm(l) for l in layers}
    diag.norm_matching_controller(model, targets)
    for layer in layers:
        assert abs(diag.layer_norm(layer) - targets[layer.name]) <= 1e-10 * targets[layer.name]
    after = model.forward(x, train=True)
    assert np.max(np.abs(after - before)) <= 1e-6


def test_norm_matching_rejects_zero_layer():
    model = norm_model(1)
    layer = [l for l in diag.normalized_weighted_layers(model) if hasattr(l.weight, "inner")][0]
    layer.weight.U.value[:] = 0.0
    with pytest.raises(ValueError):
        diag.norm_matching_controller(model, {layer.name: 1.0})


def test_rescale_keeps_factor_balance(rng):
    model = norm_model(2)
    layer = [l for l in diag.normalized_weighted_layers(model) if hasattr(l.weight, "inner")][0]
    diag.rescale_to_norm(layer, 5.0)
    assert abs(nuclear_bound_gap(layer.weight)[2]) <= 1e-8


def test_nuclear_trace_at_si():
    nuc, bound = diag.nuclear_trace(norm_model())
    assert abs(nuc - bound) <= 1e-8


def test_bounds_zero_weights():
    inp = diag.BoundInputs([np.zeros((3, 4)), np.zeros((2, 3))], margin=0.5, data_bound=1.0,
                           n_samples=100, width=4)
    expected = math.sqrt(math.log(2 * 100 / 0.01) / (0.25 * 100))
    assert diag.rank_bound(inp, 3) == pytest.approx(expected, rel=1e-14)
    assert diag.frobenius_bound(inp) == pytest.approx(expected, rel=1e-14)


def test_bound_inputs_validation():
    with pytest.raises(ValueError):
        diag.BoundInputs([np.eye(2)], margin=0.0, data_bound=1.0, n_samples=5, width=2)


def test_frobenius_bound_direct_formula(rng):
    W1, W2 = rng.normal((5, 4)), rng.normal((3, 5))
    inp = diag.BoundInputs([W1, W2], margin=2.0, data_bound=1.5, n_samples=200, width=5)
    # independent evaluation from singular values
    s = [np.linalg.svd(W, compute_uv=False) for W in (W1, W2)]
    sigma = max(x[0] for x in s)
    fro = sum(float(np.sum(x ** 2)) for x in s)
    L, m = 2, 5
    data = 1.5 ** 2 * L ** 2 * m * sigma ** (2 * L - 2) * math.log(L * m) * fro
    direct = math.sqrt((data + math.log(L * 200 / 0.01)) / (4.0 * 200))
    assert diag.frobenius_bound(inp) == pytest.approx(direct, rel=1e-10)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_bounds_permutation_invariant(seed):
    rng = Rng(seed)
    Ws = [rng.normal((4, 4)) for _ in range(4)]
    a = diag.BoundInputs(Ws, 1.0, 1.0, 50, 4)
    b = diag.BoundInputs(Ws[::-1], 1.0, 1.0, 50, 4)
    assert diag.rank_bound(a, 2) == pytest.approx(diag.rank_bound(b, 2), rel=1e-12)
    assert diag.frobenius_bound(a) == pytest.approx(diag.frobenius_bound(b), rel=1e-12)
    assert diag.rank_bound(a, 3) >= diag.rank_bound(a, 2)
    lhs, rhs = diag.frobenius_identity_sides(Ws)
    assert abs(lhs - rhs) <= 1e-10 * abs(rhs)


def test_margin_loss_examples():
    scores = np.array([[2.0, 1.0], [0.0, 1.0], [1.0, 1.0]])
    labels = np.array([0, 1, 0])
    assert diag.margin_loss(scores, labels, 0.0) == pytest.approx(1 / 3)
    assert diag.accuracy(scores, labels) == pytest.approx(2 / 3)
    assert diag.margin_loss(scores, labels, 1e9) == 1.0
    with pytest.raises(ValueError):
        diag.margin_loss(scores, labels, -1.0)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_margin_loss_monotone_and_consistent(seed):
    rng = Rng(seed)
    scores = rng.normal((64, 4))
    labels = np.arange(64) % 4
    gammas = [0.0, 0.1, 0.5, 1.0, 3.0]
    vals = [diag.margin_loss(scores, labels, g) for g in gammas]
    assert vals == sorted(vals)
    assert vals[0] == 1.0 - diag.accuracy(scores, labels)


def test_interface_names_are_aliases():
    assert diag.claim1_order_check is diag.update_order_check
    assert diag.claim1_predicted_direction is diag.predicted_direction
    assert diag.cor1_bound is diag.rank_bound and diag.cor2_bound is diag.frobenius_bound
