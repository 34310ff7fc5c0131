"""Verifiers for the training-dynamics analysis of factorized layers."""
import io
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .tensor import frobenius_norm, matmul, spectral_norm, unvec, vec

log = logging.getLogger(__name__)

BOUND_DELTA = 0.01


class MetricTrace:
    """Append-only (step, phase, metric, value) rows."""

    HEADER = "step,phase,metric,value"

    def __init__(self, rows=None):
        self.rows = list(rows or [])

    def add(self, step, phase, metric, value):
        value = float(value)
        if not math.isfinite(value):
            raise ValueError(f"non-finite value for {metric} at step {step}")
        self.rows.append((int(step), phase, metric, value))

    def values(self, metric, phase=None):
        return [v for _, ph, m, v in self.rows if m == metric and (phase is None or ph == phase)]

    def series(self, metric, phase=None):
        return [(s, v) for s, ph, m, v in self.rows if m == metric and (phase is None or ph == phase)]

    def to_csv(self):
        buf = io.StringIO()
        buf.write(self.HEADER + "\n")
        for step, phase, metric, value in self.rows:
            buf.write(f"{step},{phase},{metric},{value!r}\n")
        return buf.getvalue()

    def write_csv(self, path):
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(self.to_csv())

    @classmethod
    def from_csv(cls, text):
        lines = text.strip("\n").split("\n")
        if lines[0] != cls.HEADER:
            raise ValueError("unexpected metric CSV header")
        rows = []
        for line in lines[1:]:
            step, phase, metric, value = line.split(",")
            rows.append((int(step), phase, metric, float(value)))
        return cls(rows)


# ---------------------------------------------------------------------------
# effective step size and norm matching


def _normalized_factorized(model):
    from .factorization import weighted_layers

    return [l for l in weighted_layers(model) if hasattr(l.weight, "inner")]


def effective_step_size(model, lr, layers=None):
    """Mean over factorized layers of lr / ||W||_F^2 (zero-norm layers skipped)."""
    layers = _normalized_factorized(model) if layers is None else layers
    vals = []
    for layer in layers:
        sq = frobenius_norm(layer.weight.recompose()) ** 2
        if sq == 0.0:
            log.warning("effective step size: %s has zero norm, excluded", layer.name)
            continue
        vals.append(lr / sq)
    if not vals:
        raise ValueError("no factorized layer with nonzero norm")
    return float(np.mean(vals))


def normalized_weighted_layers(model):
    """fc/conv layers directly followed by batch normalization."""
    from .layers import BatchNorm, Conv2d, Linear

    out = []
    for a, b in zip(model.layers, model.layers[1:]):
        if isinstance(a, (Linear, Conv2d)) and isinstance(b, BatchNorm):
            out.append(a)
    return out


def layer_norm(layer):
    w = layer.weight
    return frobenius_norm(w.recompose() if hasattr(w, "inner") else w.value)


def rescale_to_norm(layer, target):
    """Scale a layer's weight so its (recomposed) Frobenius norm equals ``target``.

    Factorized weights scale U and V by the same factor sqrt(target/current);
    inner factors are untouched.
    """
    current = layer_norm(layer)
    if current == 0.0:
        raise ValueError(f"cannot rescale {layer.name}: current norm is 0")
    ratio = target / current
    w = layer.weight
    if hasattr(w, "inner"):
        s = math.sqrt(ratio)
        w.U.value = w.U.value * s
        w.V.value = w.V.value * s
    else:
        w.value = w.value * ratio


def norm_matching_controller(model, reference_norms):
    """Rescale each normalized layer to the reference norm recorded for it.

    ``reference_norms`` maps layer name -> target Frobenius norm for the
    current step.  Normalized layers are scale invariant, so the model
    function is unchanged (up to the normalization epsilon).
    """
    for layer in normalized_weighted_layers(model):
        if layer.name in reference_norms:
            rescale_to_norm(layer, reference_norms[layer.name])


def nuclear_trace(model):
    """(mean nuclear norm, mean factor-norm bound) over depth-0 factorized layers."""
    from .regularization import nuclear_bound_gap

    nucs, bounds = [], []
    for layer in _normalized_factorized(model):
        if layer.weight.inner:
            continue
        lhs, rhs, _ = nuclear_bound_gap(layer.weight)
        nucs.append(rhs)
        bounds.append(lhs)
    if not nucs:
        raise ValueError("no depth-0 factorized layers")
    return float(np.mean(nucs)), float(np.mean(bounds))


# ---------------------------------------------------------------------------
# effective update rule of a normalized factorized layer


def claim1_predicted_direction(U, V, grad_W, lr):
    """First-order prediction of vec(W_next / ||W_next||) after one SGD step
    on (U, V) for a scale-invariant layer with composed gradient ``grad_W``."""
    U, V, G = (np.asarray(a, dtype=np.float64) for a in (U, V, grad_W))
    W = matmul(U, V.T)
    rho = frobenius_norm(W)
    if rho == 0.0:
        raise ValueError("composed matrix is zero")
    w_hat = vec(W) / rho
    g_dir = rho * G
    g_lin = matmul(g_dir, matmul(V, V.T)) + matmul(matmul(U, U.T), g_dir)
    gv = vec(g_lin)
    projected = gv - (w_hat @ gv) * w_hat
    return w_hat - (lr / rho ** 2) * projected


def factored_sgd_direction(U, V, grad_W, lr):
    """vec of the normalized product after U <- U - lr G V, V <- V - lr G^T U."""
    U, V, G = (np.asarray(a, dtype=np.float64) for a in (U, V, grad_W))
    U1 = U - lr * matmul(G, V)
    V1 = V - lr * matmul(G.T, U)
    W1 = matmul(U1, V1.T)
    return vec(W1) / frobenius_norm(W1)


@dataclass
class OrderFit:
    slope: float
    errors: list = field(default_factory=list)
    lrs: list = field(default_factory=list)
    exact: bool = False


def claim1_order_check(U, V, grad_W, lrs=None, floor=1e-14):
    """Least-squares slope of log ||actual - predicted|| against log lr.

    A slope near 2 means the prediction is correct to first order.
    """
    if lrs is None:
        lrs = [1e-2 * 2.0 ** -k for k in range(5)]
    errs = []
    for lr in lrs:
        actual = factored_sgd_direction(U, V, grad_W, lr)
        pred = claim1_predicted_direction(U, V, grad_W, lr)
        d = actual - pred
        errs.append(float(np.sqrt(d @ d)))
    if all(e < floor for e in errs):
        return OrderFit(float("nan"), errs, list(lrs), exact=True)
    x = np.log(np.asarray(lrs))
    y = np.log(np.maximum(np.asarray(errs), 1e-300))
    slope = float(np.polyfit(x, y, 1)[0])
    return OrderFit(slope, errs, list(lrs))


def unit_norm_defect(U, V, grad_W, lr):
    """|w_hat . (w_hat_next - w_hat)| for the actual factored step."""
    U = np.asarray(U, dtype=np.float64)
    W = matmul(U, np.asarray(V, dtype=np.float64).T)
    w_hat = vec(W) / frobenius_norm(W)
    nxt = factored_sgd_direction(U, V, grad_W, lr)
    return abs(float(w_hat @ (nxt - w_hat)))


# ---------------------------------------------------------------------------
# generalization-bound terms


@dataclass
class BoundInputs:
    """Inputs to the margin bounds; constants inside O(.) are taken as 1."""

    weights: list
    margin: float
    data_bound: float
    n_samples: int
    width: int
    delta: float = BOUND_DELTA

    def __post_init__(self):
        if not self.margin > 0:
            raise ValueError(f"margin must be positive, got {self.margin}")
        if self.n_samples < 1:
            raise ValueError("need at least one sample")

    @property
    def depth(self):
        return len(self.weights)


def _confidence_term(inp):
    L, S = inp.depth, inp.n_samples
    return math.log(L * S / inp.delta)


def cor1_bound(inp, rank):
    """Relative rank-based bound term for factorized ReLU nets."""
    L, m, B = inp.depth, inp.width, inp.data_bound
    specs = [spectral_norm(W) for W in inp.weights]
    sigma = max(specs)
    prod = float(np.prod(np.square(specs)))
    data = B ** 2 * L ** 3 * m * sigma ** (2 * L) * rank * math.log(L * m) * prod
    return math.sqrt((data + _confidence_term(inp)) / (inp.margin ** 2 * inp.n_samples))


def cor2_bound(inp):
    """Relative Frobenius-based bound term for factorized ReLU nets."""
    L, m, B = inp.depth, inp.width, inp.data_bound
    sigma = max(spectral_norm(W) for W in inp.weights)
    fro = sum(frobenius_norm(W) ** 2 for W in inp.weights)
    data = B ** 2 * L ** 2 * m * sigma ** (2 * L - 2) * math.log(L * m) * fro
    return math.sqrt((data + _confidence_term(inp)) / (inp.margin ** 2 * inp.n_samples))


def frobenius_identity_sides(weights):
    """Both sides of prod_i s_i^2 * sum_i f_i^2 / s_i^2 = sum_i f_i^2 prod_{j!=i} s_j^2,
    with s the spectral and f the Frobenius norms."""
    s2 = [spectral_norm(W) ** 2 for W in weights]
    f2 = [frobenius_norm(W) ** 2 for W in weights]
    lhs = float(np.prod(s2)) * sum(f / s for f, s in zip(f2, s2))
    rhs = sum(f2[i] * float(np.prod([s2[j] for j in range(len(s2)) if j != i]))
              for i in range(len(s2)))
    return lhs, rhs


# descriptive aliases for the interface names
predicted_direction = claim1_predicted_direction
update_order_check = claim1_order_check
rank_bound = cor1_bound
frobenius_bound = cor2_bound


def margin_loss(scores, labels, margin):
    """Fraction of rows whose true-class score does not beat every other
    score by more than ``margin``."""
    if margin < 0:
        raise ValueError("margin must be >= 0")
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    rows = np.arange(len(labels))
    true = scores[rows, labels]
    others = scores.copy()
    others[rows, labels] = -np.inf
    return float(np.mean(true <= margin + others.max(axis=1)))


def accuracy(scores, labels):
    """Fraction of rows whose true-class score strictly beats all others."""
    return 1.0 - margin_loss(scores, labels, 0.0)


def model_margin_loss(model, inputs, labels, margin):
    return margin_loss(model.forward(inputs, train=False), labels, margin)


__all__ = [
    "MetricTrace", "effective_step_size", "claim1_predicted_direction",
    "claim1_order_check", "norm_matching_controller", "nuclear_trace",
    "cor1_bound", "cor2_bound", "margin_loss", "BoundInputs", "unvec",
    "predicted_direction", "update_order_check", "rank_bound", "frobenius_bound",
]
