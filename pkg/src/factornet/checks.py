"""Reusable numerical verifiers.

Each ``check_*`` function returns a :class:`CheckResult`; the ``check`` CLI
command and the acceptance tests both run them.
"""
import math
import time
from dataclasses import dataclass

import numpy as np

from . import diagnostics as diag
from .factorization import FactorizedParam, default_factor_init, spectral_init
from .layers import (BatchNorm, Conv2d, Embedding, GlobalAvgPool, Linear,
                     MultiHeadAttention, Parameter, PositionalEncoding, ReLU,
                     conv2d_forward, factorized_conv_forward, finite_diff_check,
                     matrix_to_kernel, numeric_gradient, relative_error,
                     softmax_cross_entropy)
from .models import Sequential
from .optim import FLAMBe, LAMB
from .regularization import (DecayConfig, fd_gradients, fd_penalty, mha_decay,
                             nuclear_bound_gap, wd_gradients, wd_penalty)
from .tensor import Rng, frobenius_norm, matmul, spectral_norm

GRAD_TOL = 1e-5


@dataclass
class CheckResult:
    name: str
    passed: bool
    value: float
    threshold: float
    detail: str = ""
    seconds: float = 0.0

    def line(self):
        status = "PASS" if self.passed else "FAIL"
        return f"[{status}] {self.name}: {self.detail} ({self.seconds:.1f}s)"


def _timed(fn):
    def wrapper(*args, **kw):
        t0 = time.perf_counter()
        res = fn(*args, **kw)
        res.seconds = time.perf_counter() - t0
        return res

    wrapper.__name__ = fn.__name__
    wrapper.__doc__ = fn.__doc__
    return wrapper


# ---------------------------------------------------------------------------
# gradient soundness


def _layer_cases(seed):
    """(name, model, inputs) triples covering every layer type."""
    rng = Rng(seed, 21)
    x2 = rng.normal((5, 4))
    img = rng.normal((3, 2, 5, 5))
    tokens = rng.integers(6, (2, 4))

    def fact_linear(d):
        lin = Linear(4, 5, rng=rng, name="fcf")
        lin.weight = default_factor_init(5, 4, 3, d, rng=rng, name="fcf.w")
        for M in lin.weight.inner:
            M.value = M.value + rng.normal(M.shape, 0.3)
        return lin

    def fact_conv(d, stride=1):
        conv = Conv2d(2, 3, 3, stride=stride, rng=rng, name="convf")
        conv.weight = default_factor_init(9, 6, 4, d, rng=rng, name="convf.w")
        for M in conv.weight.inner:
            M.value = M.value + rng.normal(M.shape, 0.3)
        return conv

    return [
        ("linear", Sequential([Linear(4, 5, rng=rng)]), x2),
        ("linear_factorized_d0", Sequential([fact_linear(0)]), x2),
        ("linear_factorized_d2", Sequential([fact_linear(2)]), x2),
        ("batchnorm_2d", Sequential([Linear(4, 5, bias=False, rng=rng), BatchNorm(5)]), x2),
        ("relu", Sequential([Linear(4, 5, rng=rng), ReLU()]), x2),
        ("conv", Sequential([Conv2d(2, 3, 3, rng=rng)]), img),
        ("conv_stride2", Sequential([Conv2d(2, 3, 3, stride=2, rng=rng)]), img),
        ("conv_factorized_d0", Sequential([fact_conv(0)]), img),
        ("conv_factorized_d1", Sequential([fact_conv(1)]), img),
        ("conv_factorized_stride2", Sequential([fact_conv(0, 2)]), img),
        ("batchnorm_4d_pool", Sequential([Conv2d(2, 3, 3, rng=rng), BatchNorm(3), GlobalAvgPool()]), img),
        ("attention", Sequential([MultiHeadAttention(4, 2, rng=rng)]), rng.normal((2, 3, 4))),
        ("embedding_positions", Sequential([Embedding(6, 4, rng=rng), PositionalEncoding(),
                                            MultiHeadAttention(4, 1, rng=rng)]), tokens),
    ]


def layer_gradient_errors(seeds):
    """{case: worst relative error over seeds and parameters (and inputs)}."""
    worst = {}
    for seed in seeds:
        for name, model, x in _layer_cases(seed):
            errs = [finite_diff_check(model, x, p) for p in model.parameters()]
            if x.dtype == np.float64 and not isinstance(model.layers[0], Embedding):
                errs.append(_input_gradient_error(model, x))
            worst[name] = max(worst.get(name, 0.0), max(errs))
    # softmax cross-entropy w.r.t. logits
    for seed in seeds:
        rng = Rng(seed, 22)
        logits = rng.normal((6, 5))
        labels = rng.integers(5, 6)
        _, g = softmax_cross_entropy(logits, labels)
        num = numeric_gradient(lambda: softmax_cross_entropy(logits, labels)[0], logits)
        worst["softmax_cross_entropy"] = max(worst.get("softmax_cross_entropy", 0.0),
                                             relative_error(g, num))
    return worst


def _input_gradient_error(model, x):
    x = x.copy()
    out = model.forward(x, train=True)
    R = Rng(12345, 98).normal(out.shape)
    for p in model.parameters():
        p.zero_grad()
    model.forward(x, train=True)
    dx = model.backward(R)
    num = numeric_gradient(lambda: float(np.sum(R * model.forward(x, train=True))), x)
    return relative_error(dx, num)


def _random_fp(rng, m, n, r, d):
    U = rng.normal((m, r))
    V = rng.normal((n, r))
    inner = [np.eye(r) + rng.normal((r, r), 0.4) for _ in range(d)]
    return FactorizedParam(U, inner, V, "lowrank" if d == 0 else "deep", (m, n))


def decay_gradient_errors(seeds):
    worst = {}

    def record(name, err):
        worst[name] = max(worst.get(name, 0.0), err)

    for seed in seeds:
        rng = Rng(seed, 23)
        lam = 0.5 + rng.uniform(1)[0]
        for d in (0, 1, 2):
            fp = _random_fp(rng, 5, 4, 3, d)
            for p, g in zip(fp.params(), wd_gradients(fp, lam)):
                record("WD", relative_error(g, numeric_gradient(lambda: wd_penalty(fp, lam), p.value)))
            for p, g in zip(fp.params(), fd_gradients(fp, lam)):
                record(f"FD_d{d}", relative_error(g, numeric_gradient(lambda: fd_penalty(fp, lam), p.value)))
        mha = MultiHeadAttention(4, 2, rng=rng)
        for target in ("OV_only", "OV_and_QK"):
            cfg = DecayConfig("FD", lam, target)
            forms = mha.ov + (mha.qk if target == "OV_and_QK" else [])
            grads = mha_decay(mha, cfg)

            def penalty():
                return sum(fd_penalty(fp, lam) for fp in forms)

            for fp in mha.forms:
                for p in fp.params():
                    num = numeric_gradient(penalty, p.value)
                    ana = grads.get(id(p), np.zeros_like(p.value))
                    err = relative_error(ana, num) if np.any(num) or np.any(ana) else 0.0
                    record(f"MHA_FD_{target}", err)
    return worst


@_timed
def check_gradients(n_seeds=20):
    errs = layer_gradient_errors(range(n_seeds))
    errs.update(decay_gradient_errors(range(n_seeds)))
    name, worst = max(errs.items(), key=lambda kv: kv[1])
    return CheckResult("gradient soundness", worst <= GRAD_TOL, worst, GRAD_TOL,
                       f"{len(errs)} cases x {n_seeds} seeds, worst {name} rel err {worst:.2e}")


# ---------------------------------------------------------------------------
# conv factorization


CONV_TRIPLES = ((4, 3, 3), (8, 8, 3), (6, 4, 5))  # (c_out, c_in, k)


@_timed
def check_conv_equivalence(n_seeds=10, tol=1e-10):
    worst = 0.0
    for c_out, c_in, k in CONV_TRIPLES:
        for seed in range(n_seeds):
            rng = Rng(seed, 31)
            for r in (c_in * k, max(1, c_in * k // 2)):
                U = rng.normal((c_out * k, r))
                V = rng.normal((c_in * k, r))
                x = rng.normal((2, c_in, 7, 6))
                K = matrix_to_kernel(matmul(U, V.T), c_out, c_in, k)
                for stride in (1, 2):
                    fact = factorized_conv_forward(U, V, x, c_out, k, stride=stride)
                    direct = conv2d_forward(K, x, stride)
                    worst = max(worst, float(np.max(np.abs(fact - direct))))
    return CheckResult("conv factorization equivalence", worst <= tol, worst, tol,
                       f"max abs deviation {worst:.2e} over {len(CONV_TRIPLES)} shapes x {n_seeds} seeds")


# ---------------------------------------------------------------------------
# spectral init


@_timed
def check_spectral_init(n_mats=20, ranks=(1, 2, 4), rtol=1e-7, full_tol=1e-8):
    worst_rel, worst_full = 0.0, 0.0
    for seed in range(n_mats):
        rng = Rng(seed, 41)
        m, n = 6 + seed % 4, 5 + seed % 3
        W = rng.normal((m, n))
        eig = np.sort(np.linalg.eigvalsh(W.T @ W))[::-1]
        for r in ranks:
            fp = spectral_init(W, r)
            err = frobenius_norm(W - fp.recompose()) ** 2
            tail = float(np.sum(np.clip(eig[r:], 0.0, None)))
            worst_rel = max(worst_rel, abs(err - tail) / max(tail, 1e-300))
        full = spectral_init(W, min(m, n))
        worst_full = max(worst_full, float(np.max(np.abs(W - full.recompose()))))
    ok = worst_rel <= rtol and worst_full <= full_tol
    return CheckResult("spectral init optimality", ok, worst_rel, rtol,
                       f"tail-energy rel err {worst_rel:.2e}, full-rank reconstruction {worst_full:.2e}")


# ---------------------------------------------------------------------------
# nuclear-norm bound


@_timed
def check_nuclear_bound(n_random=10_000, n_si=100):
    worst_gap, worst_si = math.inf, 0.0
    rng = Rng(0, 51)
    for i in range(n_random):
        m, n, r = 2 + i % 4, 2 + (i // 4) % 4, 1 + (i // 16) % 3
        fp = FactorizedParam(rng.normal((m, r)), [], rng.normal((n, r)))
        worst_gap = min(worst_gap, nuclear_bound_gap(fp)[2])
    for i in range(n_si):
        W = rng.normal((5, 4))
        fp = spectral_init(W, 1 + i % 4)
        worst_si = max(worst_si, abs(nuclear_bound_gap(fp)[2]))
    ok = worst_gap >= -1e-9 and worst_si <= 1e-8
    return CheckResult("nuclear-norm bound", ok, worst_gap, -1e-9,
                       f"min gap {worst_gap:.2e} over {n_random} random, max |gap| at SI {worst_si:.2e}")


# ---------------------------------------------------------------------------
# effective update rule


ORDER_SHAPES = ((6, 4, 3), (10, 10, 5), (8, 3, 1))


def update_order_slopes(trials=50):
    out = {}
    for m, n, r in ORDER_SHAPES:
        slopes = []
        for seed in range(trials):
            rng = Rng(seed, 61)
            U, V, G = rng.normal((m, r)), rng.normal((n, r)), rng.normal((m, n))
            fit = diag.update_order_check(U, V, G)
            slopes.append(fit.slope)
        out[(m, n, r)] = float(np.median(slopes))
    return out


@_timed
def check_update_order(trials=50):
    slopes = update_order_slopes(trials)
    ok = all(1.8 <= s <= 2.2 for s in slopes.values())
    detail = ", ".join(f"{m}x{n} r{r}: {s:.3f}" for (m, n, r), s in slopes.items())
    return CheckResult("effective-update order", ok, min(slopes.values()), 1.8,
                       f"median slopes {detail}")


# ---------------------------------------------------------------------------
# optimizer sanity


@_timed
def check_flambe_lamb_identity(steps=20):
    rng = Rng(3, 71)

    def make():
        fp = FactorizedParam(rng.normal((5, 3)), [], rng.normal((4, 3)))
        return fp

    a = make()
    b = FactorizedParam(a.U.value.copy(), [], a.V.value.copy())
    grads = [rng.normal((5, 3)) for _ in range(steps)], [rng.normal((4, 3)) for _ in range(steps)]
    opt_a = LAMB(a.params(), 0.01, 0.0)
    opt_b = FLAMBe(b.params(), [b], 0.01, 0.0)
    for t in range(steps):
        for fp in (a, b):
            fp.U.grad = grads[0][t].copy()
            fp.V.grad = grads[1][t].copy()
        opt_a.step()
        opt_b.step()
    same = np.array_equal(a.U.value, b.U.value) and np.array_equal(a.V.value, b.V.value)
    return CheckResult("FLAMBe equals LAMB at zero decay", same, float(same), 1.0,
                       "bitwise identical" if same else "trajectories differ")


@_timed
def check_flambe_shrinks(steps=100, lam=0.1):
    rng = Rng(4, 72)
    fp = FactorizedParam(rng.normal((6, 3)), [], rng.normal((5, 3)))
    opt = FLAMBe(fp.params(), [fp], 0.01, lam)
    norms = [frobenius_norm(fp.recompose())]
    for _ in range(steps):
        for p in fp.params():
            p.grad = np.zeros_like(p.value)
        opt.step()
        norms.append(frobenius_norm(fp.recompose()))
    ok = all(b < a for a, b in zip(norms, norms[1:]))
    return CheckResult("decay-only FLAMBe shrinks the product", ok, norms[-1] / norms[0], 1.0,
                       f"norm {norms[0]:.4f} -> {norms[-1]:.4f}, strictly decreasing: {ok}")


# ---------------------------------------------------------------------------
# bound evaluators


@_timed
def check_bounds(n_stacks=20):
    ok_mono, worst_id, margin_exact = True, 0.0, True
    for seed in range(n_stacks):
        rng = Rng(seed, 81)
        Ws = [rng.normal((6, 6), 0.5) for _ in range(4)]
        inp = diag.BoundInputs(Ws, margin=1.0, data_bound=1.0, n_samples=100, width=6)
        vals = [diag.rank_bound(inp, r) for r in range(1, 7)]
        ok_mono &= all(b >= a for a, b in zip(vals, vals[1:]))
        lhs, rhs = diag.frobenius_identity_sides(Ws)
        worst_id = max(worst_id, abs(lhs - rhs) / abs(rhs))
        n = 64  # power of two: every fraction k / n is exact
        scores = rng.normal((n, 4))
        scores[:5, 0] = scores[:5, 1]  # ties count as misclassified
        labels = rng.integers(4, n)
        true = scores[np.arange(n), labels]
        correct = sum(all(true[i] > scores[i, j] for j in range(4) if j != labels[i])
                      for i in range(n))
        margin_exact &= diag.margin_loss(scores, labels, 0.0) == 1.0 - correct / n
    ok = ok_mono and worst_id <= 1e-10 and margin_exact
    return CheckResult("bound evaluators", ok, worst_id, 1e-10,
                       f"rank bound monotone in r: {ok_mono}, identity rel err {worst_id:.2e}, "
                       f"margin(0) == 1 - accuracy: {margin_exact}")


FAST_CHECKS = (check_gradients, check_conv_equivalence, check_spectral_init,
               check_nuclear_bound, check_update_order, check_flambe_lamb_identity,
               check_flambe_shrinks, check_bounds)


def run_fast_checks():
    return [fn() for fn in FAST_CHECKS]
