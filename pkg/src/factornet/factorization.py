"""Factorized parameters W = U (M_1 ... M_d) V^T and model-level transforms."""
import copy
import logging
import math
from dataclasses import dataclass

import numpy as np

from .layers import Conv2d, Linear, MultiHeadAttention, Parameter
from .tensor import Rng, matmul, svd

log = logging.getLogger(__name__)

MODES = ("lowrank", "full", "deep", "wide")
WIDE_MULTIPLIER = 3


class FactorizedParam:
    """Factors of an m x n matrix: U (m x r), inner r x r matrices, V (n x r)."""

    def __init__(self, U, inner, V, mode="lowrank", target_shape=None, name=""):
        self.U = U if isinstance(U, Parameter) else Parameter(U, f"{name}.U")
        self.V = V if isinstance(V, Parameter) else Parameter(V, f"{name}.V")
        self.inner = [
            M if isinstance(M, Parameter) else Parameter(M, f"{name}.M{j + 1}")
            for j, M in enumerate(inner)
        ]
        if mode not in MODES:
            raise ValueError(f"unknown factorization mode {mode!r}")
        self.mode = mode
        self.name = name
        m, r = self.U.shape
        n = self.V.shape[0]
        if self.V.shape[1] != r or any(M.shape != (r, r) for M in self.inner):
            raise ValueError(
                f"inconsistent factor shapes U {self.U.shape}, V {self.V.shape}, "
                f"inner {[M.shape for M in self.inner]}"
            )
        self.target_shape = tuple(target_shape) if target_shape else (m, n)
        if self.target_shape != (m, n):
            raise ValueError(f"factors give {(m, n)}, expected {self.target_shape}")

    @property
    def rank(self):
        return self.U.shape[1]

    @property
    def depth(self):
        return len(self.inner)

    def params(self):
        return [self.U, *self.inner, self.V]

    @property
    def size(self):
        return sum(p.size for p in self.params())

    def inner_product(self):
        """M_1 ... M_d (identity when d = 0)."""
        P = np.eye(self.rank)
        for M in self.inner:
            P = matmul(P, M.value)
        return P

    def recompose(self):
        return recompose(self)

    def __repr__(self):
        return (f"FactorizedParam({self.name!r}, mode={self.mode}, "
                f"shape={self.target_shape}, rank={self.rank}, depth={self.depth})")


def recompose(fp):
    """U M_1 ... M_d V^T, multiplied left to right."""
    W = fp.U.value
    for M in fp.inner:
        W = matmul(W, M.value)
    return matmul(W, fp.V.value.T)


def spectral_init(W, r, name=""):
    """U = U_r sqrt(S_r), V = V_r sqrt(S_r) from the rank-r SVD of W."""
    W = np.asarray(W, dtype=np.float64)
    m, n = W.shape
    if not 1 <= r <= min(m, n):
        raise ValueError(f"spectral init rank {r} out of range [1, {min(m, n)}]")
    res = svd(W, r)
    root = np.sqrt(res.singular_values)
    return FactorizedParam(res.left * root, [], res.right * root, "lowrank", (m, n), name)


def default_factor_init(m, n, r, d=0, seed=0, fan_in=None, mode="lowrank", name="", rng=None):
    """Gaussian factors with std sqrt(2 / fan_in) and identity inner matrices.

    ``fan_in`` defaults to ``n``, the fan-in of the unfactorized layer.
    """
    if r < 1:
        raise ValueError(f"rank must be >= 1, got {r}")
    rng = rng or Rng(seed, 11)
    std = math.sqrt(2.0 / (fan_in or n))
    U = rng.normal((m, r), std)
    V = rng.normal((n, r), std)
    return FactorizedParam(U, [np.eye(r) for _ in range(d)], V, mode, (m, n), name)


def rank_from_scale(scale, c_out, k, c_in):
    """round(scale * c_out * k) clamped to [1, min(c_out k, c_in k)]; ties round down."""
    if not scale > 0:
        raise ValueError(f"rank scale must be positive, got {scale}")
    r = math.ceil(scale * c_out * k - 0.5)
    return int(min(max(r, 1), min(c_out * k, c_in * k)))


def mode_rank(mode, m, n):
    """Inner width of an overcomplete factorization of an m x n matrix."""
    if mode in ("full", "deep"):
        return m
    if mode == "wide":
        return WIDE_MULTIPLIER * m
    raise ValueError(f"mode {mode!r} has no fixed rank")


@dataclass(frozen=True)
class CompressionReport:
    original_params: int
    factorized_params: int

    @property
    def rate(self):
        return self.factorized_params / self.original_params


@dataclass
class FactorizePolicy:
    """Which layers to factorize and how.

    ``mode='lowrank'`` uses ``rank`` if given, else ``rank_from_scale(scale)``.
    ``skip`` lists layer names left dense; ``None`` means the first and last
    weighted layers.
    """

    mode: str = "lowrank"
    scale: float = None
    rank: int = None
    spectral: bool = True
    skip: tuple = None
    attn_rank: int = None
    seed: int = 0


def weighted_layers(model):
    return [l for l in model.layers if isinstance(l, (Linear, Conv2d))]


def _layer_dims(layer):
    if isinstance(layer, Conv2d):
        return layer.c_out, layer.k, layer.c_in, layer.fan_in
    return layer.n_out, 1, layer.n_in, layer.n_in


def _factorize_layer(layer, policy, rng):
    m, n = layer.matrix_shape
    c_out, k, c_in, fan_in = _layer_dims(layer)
    name = f"{layer.name}.weight"
    if policy.mode == "lowrank":
        if policy.rank is not None:
            r = int(policy.rank)
        elif policy.scale is not None:
            r = rank_from_scale(policy.scale, c_out, k, c_in)
        else:
            raise ValueError("lowrank policy needs a rank or a scale")
        if r > min(m, n):
            log.warning("skipping %s: rank %d exceeds min%s", layer.name, r, (m, n))
            return None
        if policy.spectral:
            return spectral_init(layer.dense_matrix(), r, name=name)
        return default_factor_init(m, n, r, 0, fan_in=fan_in, name=name, rng=rng)
    r = mode_rank(policy.mode, m, n)
    if policy.spectral:
        raise ValueError(
            f"layer {layer.name}: spectral init needs rank <= {min(m, n)}, "
            f"mode {policy.mode!r} uses rank {r}"
        )
    d = 1 if policy.mode == "deep" else 0
    return default_factor_init(m, n, r, d, fan_in=fan_in, mode=policy.mode, name=name, rng=rng)


def factorize_model(model, policy):
    """Copy of ``model`` with selected dense fc/conv weights factorized.

    MHA layers are factorized already; with ``policy.attn_rank`` their forms
    are re-ranked by spectral truncation of the current products.
    """
    out = copy.deepcopy(model)
    layers = weighted_layers(out)
    if policy.skip is None:
        skip = {layers[0].name, layers[-1].name} if layers else set()
    else:
        skip = set(policy.skip)
    rng = Rng(policy.seed, 13)
    for layer in layers:
        if layer.name in skip or hasattr(layer.weight, "inner"):
            continue
        fp = _factorize_layer(layer, policy, rng)
        if fp is not None:
            layer.weight = fp
    if policy.attn_rank is not None:
        for layer in out.layers:
            if isinstance(layer, MultiHeadAttention):
                _rerank_attention(layer, policy.attn_rank)
    return out


def _rerank_attention(layer, r):
    if r > layer.d:
        raise ValueError(f"attention rank {r} exceeds model dim {layer.d}")
    layer.qk = [spectral_init(fp.recompose(), r, fp.name) for fp in layer.qk]
    layer.ov = [spectral_init(fp.recompose(), r, fp.name) for fp in layer.ov]
    layer.r = r


def collapse(model):
    """Copy of ``model`` with every factorized fc/conv weight multiplied out.

    Attention forms are left as they are: their factor form is already the
    compact architecture.
    """
    out = copy.deepcopy(model)
    for layer in weighted_layers(out):
        if hasattr(layer.weight, "inner"):
            layer.set_dense_matrix(layer.weight.recompose())
    return out


def factorized_params(model):
    """All FactorizedParams of a model, including attention forms."""
    fps = [l.weight for l in weighted_layers(model) if hasattr(l.weight, "inner")]
    for layer in model.layers:
        if isinstance(layer, MultiHeadAttention):
            fps.extend(layer.forms)
    return fps


def compression_report(model):
    """Parameter counts over the factorized fc/conv layers of ``model``."""
    fps = [l.weight for l in weighted_layers(model) if hasattr(l.weight, "inner")]
    if not fps:
        raise ValueError("model has no factorized fc/conv layers")
    original = sum(fp.target_shape[0] * fp.target_shape[1] for fp in fps)
    return CompressionReport(original, sum(fp.size for fp in fps))


def count_params(model):
    return sum(p.size for p in model.parameters())


def scale_for_rate(model, target_rate, lo=1e-4, hi=10.0, iters=60):
    """Uniform rank-scale whose low-rank compression rate is closest to target.

    The rate is a nondecreasing step function of the scale, so bisection finds
    the boundary and the better of its two sides is returned.
    """
    layers = weighted_layers(model)[1:-1]
    if not layers:
        raise ValueError("model has no layers eligible for factorization")

    def rate(scale):
        orig = fact = 0
        for l in layers:
            m, n = l.matrix_shape
            c_out, k, c_in, _ = _layer_dims(l)
            r = rank_from_scale(scale, c_out, k, c_in)
            orig += m * n
            fact += r * (m + n)
        return fact / orig

    for _ in range(iters):
        mid = math.sqrt(lo * hi)
        if rate(mid) < target_rate:
            lo = mid
        else:
            hi = mid
    best = min((lo, hi), key=lambda s: abs(rate(s) - target_rate))
    return best, rate(best)
