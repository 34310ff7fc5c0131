"""SGD with momentum, LAMB and FLAMBe, plus learning-rate schedules.

SGD expects decay gradients to be folded into ``param.grad`` beforehand
(coupled decay).  LAMB and FLAMBe apply decay inside the trust-ratio update
(decoupled): LAMB uses ``lam * P``, FLAMBe replaces it by the Frobenius-decay
gradient for factorized parameters.
"""
import logging
import math

import numpy as np

from .regularization import fd_gradients

log = logging.getLogger(__name__)

TRUST_CLIP = 10.0


class SGD:
    def __init__(self, params, lr, momentum=0.9):
        if not lr > 0:
            raise ValueError(f"learning rate must be positive, got {lr}")
        self.params = list(params)
        self.lr = lr
        self.momentum = momentum
        self.step_count = 0
        self.buffers = {id(p): np.zeros_like(p.value) for p in self.params}

    def step(self):
        self.step_count += 1
        for p in self.params:
            buf = self.buffers[id(p)]
            buf *= self.momentum
            buf += p.grad
            p.value -= self.lr * buf

    def state_dict(self):
        return {"step": self.step_count, "buffers": [self.buffers[id(p)] for p in self.params]}

    def load_state_dict(self, state):
        self.step_count = state["step"]
        for p, b in zip(self.params, state["buffers"]):
            self.buffers[id(p)] = np.array(b, dtype=np.float64).reshape(p.shape)


def trust_ratio(p_norm, u_norm):
    if p_norm == 0.0 or u_norm == 0.0:
        return 1.0
    return min(max(p_norm / u_norm, 0.0), TRUST_CLIP)


def lamb_update(value, grad, m, v, t, lr, decay, beta1=0.9, beta2=0.999, eps=1e-6):
    """One LAMB step for a single parameter; ``m`` and ``v`` update in place.

    ``decay`` is the decoupled decay direction (``lam * P`` for LAMB) and is
    added to the Adam direction before the trust ratio is formed.
    Returns the new value.
    """
    m *= beta1
    m += (1.0 - beta1) * grad
    v *= beta2
    v += (1.0 - beta2) * grad * grad
    m_hat = m / (1.0 - beta1 ** t)
    v_hat = v / (1.0 - beta2 ** t)
    upd = m_hat / (np.sqrt(v_hat) + eps) + decay
    phi = trust_ratio(math.sqrt(float(np.sum(value * value))), math.sqrt(float(np.sum(upd * upd))))
    return value - lr * phi * upd


class LAMB:
    def __init__(self, params, lr, weight_decay=0.0, betas=(0.9, 0.999), eps=1e-6,
                 decay_params=None, decay_fn=None):
        """``decay_params`` restricts decoupled ``lam * P`` decay to those
        parameters (default: all).  ``decay_fn()``, if given, returns the
        decay directions {id(param): term} instead."""
        if not lr > 0:
            raise ValueError(f"learning rate must be positive, got {lr}")
        self.params = list(params)
        self.lr = lr
        self.weight_decay = weight_decay
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.step_count = 0
        self.m = {id(p): np.zeros_like(p.value) for p in self.params}
        self.v = {id(p): np.zeros_like(p.value) for p in self.params}
        ids = self.params if decay_params is None else decay_params
        self._decayed = {id(p) for p in ids}
        self.decay_fn = decay_fn

    def decay_terms(self):
        if self.decay_fn is not None:
            return self.decay_fn()
        lam = self.weight_decay
        return {id(p): lam * p.value for p in self.params if id(p) in self._decayed}

    def step(self):
        self.step_count += 1
        terms = self.decay_terms()
        new = {}
        for p in self.params:
            decay = terms.get(id(p), 0.0)
            new[id(p)] = lamb_update(p.value, p.grad, self.m[id(p)], self.v[id(p)],
                                     self.step_count, self.lr, decay,
                                     self.beta1, self.beta2, self.eps)
        for p in self.params:
            p.value = new[id(p)]

    def state_dict(self):
        return {
            "step": self.step_count,
            "m": [self.m[id(p)] for p in self.params],
            "v": [self.v[id(p)] for p in self.params],
        }

    def load_state_dict(self, state):
        self.step_count = state["step"]
        for p, m, v in zip(self.params, state["m"], state["v"]):
            self.m[id(p)] = np.array(m, dtype=np.float64).reshape(p.shape)
            self.v[id(p)] = np.array(v, dtype=np.float64).reshape(p.shape)


class FLAMBe(LAMB):
    """LAMB whose decay on factorized weights is the Frobenius-decay gradient.

    For a pair (U, V) the decay directions are ``lam U V^T V`` and
    ``lam V U^T U``, evaluated at the pre-step factors.  Decayed parameters
    outside ``factorized`` get ordinary ``lam * P`` decay.
    """

    def __init__(self, params, factorized, lr, weight_decay=0.0, betas=(0.9, 0.999),
                 eps=1e-6, decay_params=None):
        super().__init__(params, lr, weight_decay, betas, eps, decay_params)
        self.factorized = list(factorized)
        covered = {id(p) for fp in self.factorized for p in fp.params()}
        plain = [p.name for p in self.params if id(p) in self._decayed and id(p) not in covered]
        if plain:
            log.warning("FLAMBe: %d unfactorized parameters use LAMB decay (%s)",
                        len(plain), ", ".join(plain[:4]))

    def decay_terms(self):
        terms = super().decay_terms()
        for fp in self.factorized:
            for p, g in zip(fp.params(), fd_gradients(fp, self.weight_decay)):
                terms[id(p)] = g
        return terms


def lr_schedule(kind, step, base_lr, milestones=(), warmup=0, gamma=0.1):
    """Learning rate at ``step``.

    ``step_decay`` multiplies by ``gamma`` at each milestone reached;
    ``warmup_const`` ramps linearly to ``base_lr`` over ``warmup`` steps.
    """
    if kind == "constant":
        return base_lr
    if kind == "step_decay":
        return base_lr * gamma ** sum(1 for m in milestones if step >= m)
    if kind == "warmup_const":
        if warmup <= 0 or step >= warmup:
            return base_lr
        return base_lr * step / warmup
    raise ValueError(f"unknown schedule {kind!r}")
