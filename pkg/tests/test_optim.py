import logging
import math

import numpy as np
import pytest

from factornet.factorization import FactorizedParam
from factornet.layers import Parameter
from factornet.optim import FLAMBe, LAMB, SGD, lamb_update, lr_schedule, trust_ratio
from factornet.regularization import fd_gradients, fd_penalty
from factornet.tensor import Rng, frobenius_norm


def test_sgd_plain_step(rng):
    p = Parameter(rng.normal((3, 2)))
    w0 = p.value.copy()
    p.grad = rng.normal((3, 2))
    SGD([p], 0.1, momentum=0.0).step()
    assert np.array_equal(p.value, w0 - 0.1 * p.grad)


def test_sgd_quadratic_bowl_contracts():
    p = Parameter(np.array([1.0, -2.0]))
    opt = SGD([p], 0.2, momentum=0.0)
    for t in range(1, 6):
        p.grad = p.value.copy()
        opt.step()
        assert np.allclose(p.value, np.array([1.0, -2.0]) * 0.8 ** t, atol=1e-15)


def test_sgd_momentum_hand_unrolled(rng):
    p = Parameter(rng.normal(4))
    w0 = p.value.copy()
    g1, g2 = rng.normal(4), rng.normal(4)
    opt = SGD([p], 0.05, momentum=0.9)
    p.grad = g1
    opt.step()
    p.grad = g2
    opt.step()
    b1 = g1
    b2 = 0.9 * b1 + g2
    assert np.max(np.abs(p.value - (w0 - 0.05 * b1 - 0.05 * b2))) <= 1e-12


def test_sgd_rejects_nonpositive_lr():
    with pytest.raises(ValueError):
        SGD([], 0.0)


def reference_lamb(P, grads, lr, lam, b1=0.9, b2=0.999, eps=1e-6):
    """Straight transcription of the LAMB update for one parameter."""
    m = np.zeros_like(P)
    v = np.zeros_like(P)
    for t, g in enumerate(grads, start=1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        mh, vh = m / (1 - b1 ** t), v / (1 - b2 ** t)
        u = mh / (np.sqrt(vh) + eps) + lam * P
        pn, un = np.linalg.norm(P), np.linalg.norm(u)
        phi = 1.0 if pn == 0 or un == 0 else min(max(pn / un, 0.0), 10.0)
        P = P - lr * phi * u
    return P


def test_lamb_matches_reference_on_2x2(rng):
    P0 = rng.normal((2, 2))
    grads = [rng.normal((2, 2)) for _ in range(3)]
    p = Parameter(P0)
    opt = LAMB([p], 0.01, 0.1)
    for g in grads:
        p.grad = g
        opt.step()
    assert np.max(np.abs(p.value - reference_lamb(P0, grads, 0.01, 0.1))) <= 1e-12


def test_lamb_zero_history_no_decay_no_update(rng):
    p = Parameter(rng.normal((3, 3)))
    w0 = p.value.copy()
    opt = LAMB([p], 0.1, 0.0)
    p.grad = np.zeros((3, 3))
    opt.step()
    assert np.array_equal(p.value, w0)


def test_lamb_pure_decay_shrinks(rng):
    p = Parameter(rng.normal((3, 3)))
    opt = LAMB([p], 0.01, 0.1)
    prev = frobenius_norm(p.value)
    for _ in range(10):
        p.grad = np.zeros((3, 3))
        opt.step()
        assert frobenius_norm(p.value) < prev
        prev = frobenius_norm(p.value)


def test_trust_ratio_clamp_and_degenerate():
    assert trust_ratio(0.0, 1.0) == 1.0 and trust_ratio(1.0, 0.0) == 1.0
    assert trust_ratio(100.0, 1.0) == 10.0
    assert trust_ratio(1.0, 4.0) == 0.25


def test_lamb_update_scale_consistency(rng):
    P, g = rng.normal((3, 2)), rng.normal((3, 2))
    m, v = rng.normal((3, 2)) * 0.1, np.abs(rng.normal((3, 2))) * 0.1
    rho = 0.5  # shrinking keeps the trust ratio below its clamp
    assert trust_ratio(np.linalg.norm(P), 1.0) < 10
    a = lamb_update(P, g, m.copy(), v.copy(), 2, 0.01, 0.0, eps=0.0)
    b = lamb_update(rho * P, rho * g, rho * m, rho ** 2 * v, 2, 0.01, 0.0, eps=0.0)
    assert np.allclose(b, rho * a, rtol=1e-12)


def make_pair(rng):
    return FactorizedParam(rng.normal((5, 3)), [], rng.normal((4, 3)))


def test_flambe_equals_lamb_at_zero_decay(rng):
    a = make_pair(rng)
    b = FactorizedParam(a.U.value.copy(), [], a.V.value.copy())
    oa, ob = LAMB(a.params(), 0.02, 0.0), FLAMBe(b.params(), [b], 0.02, 0.0)
    for _ in range(15):
        gU, gV = rng.normal((5, 3)), rng.normal((4, 3))
        a.U.grad, a.V.grad = gU, gV
        b.U.grad, b.V.grad = gU.copy(), gV.copy()
        oa.step()
        ob.step()
    assert np.array_equal(a.U.value, b.U.value) and np.array_equal(a.V.value, b.V.value)


def test_flambe_decay_terms_are_frobenius_gradients(rng):
    fp = make_pair(rng)
    opt = FLAMBe(fp.params(), [fp], 0.01, 0.3)
    terms = opt.decay_terms()
    for p, g in zip(fp.params(), fd_gradients(fp, 0.3)):
        assert np.array_equal(terms[id(p)], g)
    U, V = fp.U.value, fp.V.value
    assert np.allclose(terms[id(fp.U)], 0.3 * U @ V.T @ V)


def test_flambe_matches_lamb_decay_for_orthonormal_V(rng):
    Q, _ = np.linalg.qr(rng.normal((4, 3)))
    fp = FactorizedParam(rng.normal((5, 3)), [], Q)
    f_terms = FLAMBe(fp.params(), [fp], 0.01, 0.2).decay_terms()
    l_terms = LAMB(fp.params(), 0.01, 0.2).decay_terms()
    assert np.allclose(f_terms[id(fp.U)], l_terms[id(fp.U)], atol=1e-15)


def test_flambe_decay_only_monotone(rng):
    fp = make_pair(rng)
    opt = FLAMBe(fp.params(), [fp], 0.01, 0.5)
    prev = frobenius_norm(fp.recompose())
    for _ in range(100):
        for p in fp.params():
            p.grad = np.zeros_like(p.value)
        opt.step()
        cur = frobenius_norm(fp.recompose())
        assert cur <= prev
        prev = cur


def test_flambe_warns_on_unfactorized(rng, caplog):
    fp = make_pair(rng)
    extra = Parameter(rng.normal(3), "bias")
    with caplog.at_level(logging.WARNING):
        FLAMBe(fp.params() + [extra], [fp], 0.01, 0.1)
    assert "unfactorized" in caplog.text


def test_sgd_coupled_fd_descends_penalty(rng):
    fp = make_pair(rng)
    opt = SGD(fp.params(), 0.01, momentum=0.0)
    for _ in range(50):
        grads = fd_gradients(fp, 1.0)
        # directional derivative of the penalty along the update is negative
        assert -sum(float(np.sum(g * g)) for g in grads) < 0
        before = fd_penalty(fp, 1.0)
        for p, g in zip(fp.params(), grads):
            p.grad = g
        opt.step()
        assert fd_penalty(fp, 1.0) < before


def test_lr_schedules():
    assert lr_schedule("step_decay", 5, 0.1, milestones=(10, 20)) == 0.1
    assert lr_schedule("step_decay", 10, 0.1, milestones=(10, 20)) == pytest.approx(0.01)
    assert lr_schedule("step_decay", 25, 0.1, milestones=(10, 20)) == pytest.approx(0.001)
    assert lr_schedule("warmup_const", 50, 0.1, warmup=100) == pytest.approx(0.05)
    assert lr_schedule("warmup_const", 500, 0.1, warmup=100) == 0.1
    trace = [lr_schedule("step_decay", s, 1.0, milestones=(3, 6)) for s in range(8)]
    assert trace == [1.0] * 3 + [0.1] * 3 + [pytest.approx(0.01)] * 2
    with pytest.raises(ValueError):
        lr_schedule("cosine", 0, 0.1)


def test_optimizer_state_round_trip(rng):
    p = Parameter(rng.normal((2, 3)))
    opt = LAMB([p], 0.01, 0.1)
    p.grad = rng.normal((2, 3))
    opt.step()
    state = opt.state_dict()
    q = Parameter(p.value.copy())
    opt2 = LAMB([q], 0.01, 0.1)
    opt2.load_state_dict(state)
    g = rng.normal((2, 3))
    p.grad, q.grad = g, g.copy()
    opt.step()
    opt2.step()
    assert np.array_equal(p.value, q.value)
