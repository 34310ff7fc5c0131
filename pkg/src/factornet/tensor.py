"""Dense float64 arithmetic: seeded RNG, deterministic matmul, SVD and norms.

Tensors are plain C-contiguous ``float64`` numpy arrays.
"""
from dataclasses import dataclass

import numpy as np

from . import kernels

SVD_TOL = 1e-12
SVD_MAX_SWEEPS = 60
_EPS = np.finfo(np.float64).eps


class SvdConvergenceError(RuntimeError):
    def __init__(self, sweeps, residual):
        super().__init__(
            f"Jacobi SVD did not converge after {sweeps} sweeps "
            f"(max off-diagonal cosine {residual:.3e})"
        )
        self.sweeps = sweeps
        self.residual = residual


class Rng:
    """Seeded stream of uniforms and normals.

    Raw 64-bit words come from numpy's PCG64 bit generator (multiplier
    0x2360ed051fc65da44385df649fccf645, XSL-RR output).  Doubles use the top
    53 bits of each word; normals use the Box-Muller transform.  Neither step
    depends on numpy's ``Generator`` methods, whose streams are not pinned
    across releases.
    """

    def __init__(self, seed, stream=0):
        ss = np.random.SeedSequence([int(seed), int(stream)])
        self._bitgen = np.random.PCG64(ss)

    def uniform(self, size):
        n = int(np.prod(size, dtype=np.int64))
        raw = self._bitgen.random_raw(n)
        u = (raw >> np.uint64(11)).astype(np.float64) * (1.0 / 9007199254740992.0)
        return u.reshape(size)

    def normal(self, size, std=1.0):
        n = int(np.prod(size, dtype=np.int64))
        half = (n + 1) // 2
        u1 = 1.0 - self.uniform(half)  # (0, 1]
        u2 = self.uniform(half)
        rad = np.sqrt(-2.0 * np.log(u1))
        z = np.empty(2 * half)
        z[0::2] = rad * np.cos(2.0 * np.pi * u2)
        z[1::2] = rad * np.sin(2.0 * np.pi * u2)
        return (std * z[:n]).reshape(size)

    def integers(self, high, size):
        return np.minimum((self.uniform(size) * high).astype(np.int64), high - 1)

    def permutation(self, n):
        return np.argsort(self.uniform(n), kind="stable")

    @property
    def state(self):
        return self._bitgen.state

    @state.setter
    def state(self, value):
        self._bitgen.state = value


def random_gaussian(shape, std, seed, stream=0):
    if not std > 0:
        raise ValueError(f"std must be positive, got {std}")
    return Rng(seed, stream).normal(tuple(shape), std)


def as_tensor(a):
    return np.ascontiguousarray(a, dtype=np.float64)


def matmul(a, b):
    """Matrix product with the inner sum accumulated sequentially over k."""
    a = as_tensor(a)
    b = as_tensor(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ValueError(f"matmul expects matrices, got shapes {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    return kernels.matmul_kernel(a, b)


def bmm(a, b):
    """Batched ``matmul`` over a leading axis."""
    return np.stack([matmul(a[i], b[i]) for i in range(a.shape[0])])


def vec(a):
    """Column-major stacking of a matrix."""
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2:
        raise ValueError(f"vec expects a matrix, got shape {a.shape}")
    return np.ascontiguousarray(a.T).reshape(-1)


def unvec(w, shape):
    m, n = shape
    return np.ascontiguousarray(np.asarray(w).reshape(n, m).T)


@dataclass(frozen=True)
class SvdResult:
    left: np.ndarray
    singular_values: np.ndarray
    right: np.ndarray

    def reconstruct(self):
        return matmul(self.left * self.singular_values, self.right.T)


def _complete_basis(q, k):
    """Replace the last columns of ``q`` (from index k) by an orthonormal
    completion of its first k columns."""
    m, r = q.shape
    basis = list(q[:, :k].T)
    e = 0
    while len(basis) < r:
        cand = np.zeros(m)
        cand[e] = 1.0
        e += 1
        for b in basis:
            cand = cand - (b @ cand) * b
        for b in basis:  # second pass for stability
            cand = cand - (b @ cand) * b
        nrm = np.sqrt(cand @ cand)
        if nrm > 1e-8:
            basis.append(cand / nrm)
    return np.stack(basis, axis=1)


def _jacobi_full(a):
    """Thin SVD of a tall (m >= n) matrix via one-sided Jacobi."""
    m, n = a.shape
    x = np.array(a.T, order="C", copy=True)  # rotated in place
    v = np.eye(n)
    normf2 = float(np.sum(a * a))
    sched = kernels.round_robin_schedule(n)
    sweeps, ok, off = kernels.jacobi_kernel(
        x, v, sched, SVD_TOL, 1e-30 * normf2, SVD_MAX_SWEEPS
    )
    if not ok:
        raise SvdConvergenceError(sweeps, off)
    s = np.sqrt(np.einsum("ij,ij->i", x, x))
    order = np.argsort(-s, kind="stable")
    s = s[order]
    x = x[order]
    v = v[order]
    u = np.zeros((m, n))
    # columns at roundoff level carry no direction; rebuild them orthonormally
    live = s > max(m, n) * _EPS * s[0]
    s[~live] = 0.0
    u[:, live] = (x[live] / s[live, None]).T
    k = int(live.sum())
    if k < n:
        u = _complete_basis(u, k)
    return u, s, np.ascontiguousarray(v.T)


def svd(a, r=None):
    """Top-``r`` singular triplets of ``a``.

    Sign convention: the largest-magnitude entry of each left singular vector
    is nonnegative (first such entry on ties).
    """
    a = as_tensor(a)
    if a.ndim != 2:
        raise ValueError(f"svd expects a matrix, got shape {a.shape}")
    m, n = a.shape
    kmax = min(m, n)
    if r is None:
        r = kmax
    if not 1 <= r <= kmax:
        raise ValueError(f"rank {r} out of range [1, {kmax}] for shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ValueError("svd input contains non-finite entries")
    if m >= n:
        u, s, v = _jacobi_full(a)
    else:
        v, s, u = _jacobi_full(a.T)
    u, s, v = u[:, :r].copy(), s[:r].copy(), v[:, :r].copy()
    idx = np.argmax(np.abs(u), axis=0)
    flip = u[idx, np.arange(r)] < 0
    u[:, flip] *= -1.0
    v[:, flip] *= -1.0
    return SvdResult(u, s, v)


def singular_values(a):
    return svd(a).singular_values


def frobenius_norm(a):
    a = np.asarray(a, dtype=np.float64)
    return float(np.sqrt(np.sum(a * a)))


def spectral_norm(a, tol=1e-10, max_iter=100000, seed=0):
    """Largest singular value by power iteration on A^T A."""
    a = as_tensor(a)
    if a.ndim != 2:
        raise ValueError(f"spectral_norm expects a matrix, got shape {a.shape}")
    if not np.any(a):
        return 0.0
    ata = matmul(a.T, a)
    x = Rng(seed, 7).normal(ata.shape[0])
    x /= np.sqrt(x @ x)
    lam = 0.0
    for _ in range(max_iter):
        y = matmul(ata, x[:, None])[:, 0]
        new = float(x @ y)
        nrm = np.sqrt(y @ y)
        if nrm == 0.0:
            return 0.0
        x = y / nrm
        if abs(new - lam) <= tol * abs(new):
            lam = new
            break
        lam = new
    return float(np.sqrt(max(lam, 0.0)))


def nuclear_norm(a):
    a = as_tensor(a)
    if a.ndim != 2:
        raise ValueError(f"nuclear_norm expects a matrix, got shape {a.shape}")
    return float(np.sum(singular_values(a)))
