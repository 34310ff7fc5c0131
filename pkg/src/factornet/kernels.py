"""Hot numeric kernels: sequential-order matmul and one-sided Jacobi sweeps.

Each kernel has a numba ``@njit`` implementation and a pure-numpy fallback.
The numba path is used unless ``FACTORNET_NO_NUMBA`` is set to a truthy value
or numba cannot be imported.  Both matmul paths accumulate over the inner
dimension in the same order and produce bit-identical results.
"""
import os

import numpy as np

_FLAG = os.environ.get("FACTORNET_NO_NUMBA", "").strip().lower()
_DISABLED = _FLAG not in ("", "0", "false", "no")

try:
    if _DISABLED:
        raise ImportError("disabled by FACTORNET_NO_NUMBA")
    from numba import njit

    HAVE_NUMBA = True
except ImportError:
    HAVE_NUMBA = False

USE_NUMBA = HAVE_NUMBA


def backend():
    return "numba" if USE_NUMBA else "numpy"


# ---------------------------------------------------------------------------
# matmul


def matmul_numpy(a, b):
    m, k = a.shape
    out = np.zeros((m, b.shape[1]))
    # one rank-1 update per inner index keeps the summation order sequential
    for p in range(k):
        out += np.multiply.outer(a[:, p], b[p])
    return out


def _matmul_loops(a, b):
    m, k = a.shape
    n = b.shape[1]
    out = np.zeros((m, n))
    for i in range(m):
        for p in range(k):
            aip = a[i, p]
            for j in range(n):
                out[i, j] += aip * b[p, j]
    return out


# ---------------------------------------------------------------------------
# one-sided Jacobi (Hestenes) on the rows of X = A^T


def round_robin_schedule(n):
    """Pair schedule visiting every (p, q), p < q, exactly once per sweep.

    Returns an int array of shape (rounds, n_pairs, 2).  Within a round the
    pairs are disjoint.  Odd ``n`` is padded with a dummy index that is
    dropped from the output.
    """
    if n < 2:
        return np.zeros((0, 0, 2), dtype=np.int64)
    size = n + (n % 2)
    players = list(range(size))
    rounds = []
    for _ in range(size - 1):
        pairs = []
        for i in range(size // 2):
            p, q = players[i], players[size - 1 - i]
            if p < n and q < n:
                pairs.append((min(p, q), max(p, q)))
        rounds.append(pairs)
        players = [players[0]] + [players[-1]] + players[1:-1]
    width = max(len(r) for r in rounds)
    sched = np.full((len(rounds), width, 2), -1, dtype=np.int64)
    for i, r in enumerate(rounds):
        sched[i, : len(r)] = r
    return sched


def _jacobi_loops(x, v, sched, tol, abs_floor, max_sweeps):
    n, m = x.shape
    sweeps = 0
    off = 0.0
    while sweeps < max_sweeps:
        sweeps += 1
        rotated = False
        off = 0.0
        for rnd in range(sched.shape[0]):
            for k in range(sched.shape[1]):
                p = sched[rnd, k, 0]
                q = sched[rnd, k, 1]
                if p < 0:
                    continue
                alpha = 0.0
                beta = 0.0
                gamma = 0.0
                for i in range(m):
                    alpha += x[p, i] * x[p, i]
                    beta += x[q, i] * x[q, i]
                    gamma += x[p, i] * x[q, i]
                if abs(gamma) <= abs_floor:
                    continue
                ratio = abs(gamma) / np.sqrt(alpha * beta)
                if ratio > off:
                    off = ratio
                if ratio <= tol:
                    continue
                rotated = True
                zeta = (beta - alpha) / (2.0 * gamma)
                sgn = 1.0 if zeta >= 0.0 else -1.0
                t = sgn / (abs(zeta) + np.sqrt(1.0 + zeta * zeta))
                c = 1.0 / np.sqrt(1.0 + t * t)
                s = c * t
                for i in range(m):
                    xp = x[p, i]
                    xq = x[q, i]
                    x[p, i] = c * xp - s * xq
                    x[q, i] = s * xp + c * xq
                for i in range(n):
                    vp = v[p, i]
                    vq = v[q, i]
                    v[p, i] = c * vp - s * vq
                    v[q, i] = s * vp + c * vq
        if not rotated:
            return sweeps, True, off
    return sweeps, False, off


def jacobi_numpy(x, v, sched, tol, abs_floor, max_sweeps):
    """Vectorized fallback: all disjoint pairs of a round rotate at once."""
    sweeps = 0
    off = 0.0
    while sweeps < max_sweeps:
        sweeps += 1
        rotated = False
        off = 0.0
        for rnd in sched:
            rnd = rnd[rnd[:, 0] >= 0]
            if len(rnd) == 0:
                continue
            p, q = rnd[:, 0], rnd[:, 1]
            xp, xq = x[p], x[q]
            alpha = np.einsum("ij,ij->i", xp, xp)
            beta = np.einsum("ij,ij->i", xq, xq)
            gamma = np.einsum("ij,ij->i", xp, xq)
            live = np.abs(gamma) > abs_floor
            ratio = np.zeros_like(gamma)
            ratio[live] = np.abs(gamma[live]) / np.sqrt(alpha[live] * beta[live])
            if len(ratio):
                off = max(off, float(ratio.max()))
            act = live & (ratio > tol)
            if not act.any():
                continue
            rotated = True
            p, q = p[act], q[act]
            a, b, g = alpha[act], beta[act], gamma[act]
            zeta = (b - a) / (2.0 * g)
            sgn = np.where(zeta >= 0.0, 1.0, -1.0)
            t = sgn / (np.abs(zeta) + np.sqrt(1.0 + zeta * zeta))
            c = (1.0 / np.sqrt(1.0 + t * t))[:, None]
            s = c * t[:, None]
            xp, xq = x[p], x[q]
            x[p], x[q] = c * xp - s * xq, s * xp + c * xq
            vp, vq = v[p], v[q]
            v[p], v[q] = c * vp - s * vq, s * vp + c * vq
        if not rotated:
            return sweeps, True, off
    return sweeps, False, off


if HAVE_NUMBA:
    matmul_numba = njit(cache=True)(_matmul_loops)
    jacobi_numba = njit(cache=True)(_jacobi_loops)
else:  # pragma: no cover - exercised only without numba
    matmul_numba = None
    jacobi_numba = None


def matmul_kernel(a, b):
    if USE_NUMBA:
        return matmul_numba(a, b)
    return matmul_numpy(a, b)


def jacobi_kernel(x, v, sched, tol, abs_floor, max_sweeps):
    """Rotate rows of ``x`` (and ``v``) in place until mutually orthogonal.

    A pair is left alone when |<x_p, x_q>| <= tol * |x_p| |x_q| or when the
    inner product is below ``abs_floor`` (numerically zero columns).

    Returns ``(sweeps, converged, max_off_ratio)`` where the ratio is the
    largest |<x_p, x_q>| / (|x_p| |x_q|) seen in the final sweep.
    """
    if USE_NUMBA:
        return jacobi_numba(x, v, sched, float(tol), float(abs_floor), int(max_sweeps))
    return jacobi_numpy(x, v, sched, tol, abs_floor, max_sweeps)
