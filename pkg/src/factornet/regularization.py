"""Decay penalties on factorized weights and the nuclear-norm bound they imply."""
from dataclasses import dataclass

import numpy as np

from .tensor import frobenius_norm, matmul, nuclear_norm

DECAY_MODES = ("none", "WD", "CRS", "FD")
MHA_TARGETS = ("OV_only", "OV_and_QK")


@dataclass
class DecayConfig:
    mode: str = "none"
    lam: float = 0.0
    mha_target: str = "OV_only"

    def __post_init__(self):
        if self.mode not in DECAY_MODES:
            raise ValueError(f"decay mode must be one of {DECAY_MODES}, got {self.mode!r}")
        if self.lam < 0:
            raise ValueError(f"decay coefficient must be >= 0, got {self.lam}")
        if self.mha_target not in MHA_TARGETS:
            raise ValueError(f"mha_target must be one of {MHA_TARGETS}")


def wd_penalty(fp, lam):
    return 0.5 * lam * sum(float(np.sum(p.value ** 2)) for p in fp.params())


def wd_gradients(fp, lam):
    """lam * P for every factor P; returns a list aligned with ``fp.params()``."""
    return [lam * p.value for p in fp.params()]


def fd_penalty(fp, lam):
    return 0.5 * lam * frobenius_norm(fp.recompose()) ** 2


def fd_gradients(fp, lam):
    """Gradients of (lam/2) ||U M_1..M_d V^T||_F^2 aligned with ``fp.params()``.

    With W the product and P = M_1..M_d:  dU = lam W V P^T,  dV = lam W^T U P,
    dM_j = lam A_j^T W B_j^T with A_j = U M_1..M_{j-1}, B_j = M_{j+1}..M_d V^T.
    """
    U, V = fp.U.value, fp.V.value
    Ms = [M.value for M in fp.inner]
    d = len(Ms)
    r = U.shape[1]
    # prefix[j] = M_1..M_j, suffix[j] = M_{j+1}..M_d
    prefix = [np.eye(r)]
    for M in Ms:
        prefix.append(matmul(prefix[-1], M))
    suffix = [np.eye(r)] * (d + 1)
    for j in range(d - 1, -1, -1):
        suffix[j] = matmul(Ms[j], suffix[j + 1])
    P = prefix[-1]
    UP = matmul(U, P)
    W = matmul(UP, V.T)
    WV = matmul(W, V)
    grads = [lam * matmul(WV, P.T)]
    for j in range(d):
        A = matmul(U, prefix[j])
        Bt = matmul(V, suffix[j + 1].T)  # B_j^T
        grads.append(lam * matmul(matmul(A.T, W), Bt))
    grads.append(lam * matmul(W.T, UP))
    return grads


def crs_lambda(lam, report):
    """Weight decay scaled by the compression rate."""
    return lam * report.rate


def nuclear_bound_gap(fp):
    """(1/2)(|U|_F^2 + |V|_F^2), |U V^T|_*, and their difference (>= 0)."""
    if fp.inner:
        raise ValueError("nuclear bound applies to depth-0 factorizations")
    lhs = 0.5 * (float(np.sum(fp.U.value ** 2)) + float(np.sum(fp.V.value ** 2)))
    rhs = nuclear_norm(fp.recompose())
    return lhs, rhs, lhs - rhs


def mha_decay(layer, cfg):
    """FD gradients for attention forms: {id(param): grad}.

    OV forms are always decayed; QK forms only for ``OV_and_QK``.
    """
    if cfg.mode != "FD":
        raise ValueError("mha_decay expects an FD decay config")
    out = {}
    if cfg.lam == 0:
        return out
    forms = list(layer.ov)
    if cfg.mha_target == "OV_and_QK":
        forms += list(layer.qk)
    for fp in forms:
        for p, g in zip(fp.params(), fd_gradients(fp, cfg.lam)):
            out[id(p)] = g
    return out


def decay_gradients(model, cfg, report=None):
    """Decay gradient for every decayed parameter of ``model``: {id(param): grad}.

    Dense fc/conv/embedding weights get ``lam W`` under every non-``none``
    mode.  Factorized weights get factor-wise decay (WD), rate-scaled
    factor-wise decay (CRS) or Frobenius decay (FD).  Attention QK forms not
    targeted by FD fall back to factor-wise decay.  Biases and normalization
    parameters are never decayed.
    """
    from .factorization import weighted_layers
    from .layers import Embedding, MultiHeadAttention

    out = {}
    if cfg.mode == "none" or cfg.lam == 0:
        return out
    lam = cfg.lam
    fact_lam = lam
    if cfg.mode == "CRS":
        if report is None:
            raise ValueError("CRS decay needs a CompressionReport")
        fact_lam = crs_lambda(lam, report)

    def add(fp, grads):
        for p, g in zip(fp.params(), grads):
            out[id(p)] = g

    for layer in weighted_layers(model):
        w = layer.weight
        if hasattr(w, "inner"):
            add(w, fd_gradients(w, lam) if cfg.mode == "FD" else wd_gradients(w, fact_lam))
        else:
            out[id(w)] = lam * w.value
    for layer in model.layers:
        if isinstance(layer, Embedding):
            out[id(layer.weight)] = lam * layer.weight.value
        elif isinstance(layer, MultiHeadAttention):
            if cfg.mode == "FD":
                out.update(mha_decay(layer, cfg))
                if cfg.mha_target == "OV_only":
                    for fp in layer.qk:
                        add(fp, wd_gradients(fp, lam))
            else:
                for fp in layer.forms:
                    add(fp, wd_gradients(fp, lam))
    return out
