"""Layers with explicit forward/backward passes.

A layer's weight is either a dense :class:`Parameter` or a
:class:`~factornet.factorization.FactorizedParam`; factorized weights are
applied on the factored path so factor gradients come straight out of the
chain rule.
"""
import math

import numpy as np

from .tensor import Rng, as_tensor, bmm, matmul


class Parameter:
    def __init__(self, value, name=""):
        self.value = as_tensor(value).copy()
        self.grad = np.zeros_like(self.value)
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    @property
    def size(self):
        return self.value.size

    def zero_grad(self):
        self.grad = np.zeros_like(self.value)

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.value.shape})"


def _is_factorized(w):
    return hasattr(w, "inner")


# ---------------------------------------------------------------------------
# fully connected


def fc_forward(W, x):
    """y = x W^T for W (m x n) and x (B x n)."""
    W, x = as_tensor(W), as_tensor(x)
    if x.shape[-1] != W.shape[1]:
        raise ValueError(f"fc shape mismatch: W {W.shape}, x {x.shape}")
    return matmul(x, W.T)


def fc_backward(W, x, dy):
    """Returns (dW, dx) for y = x W^T."""
    return matmul(as_tensor(dy).T, x), matmul(dy, W)


def factored_linear_forward(fp, x):
    """x W^T with W = U M_1 ... M_d V^T, applied right to left.

    Returns the output and the list of intermediate activations needed by
    :func:`factored_linear_backward`.
    """
    acts = [x]
    h = matmul(x, fp.V.value)
    for M in reversed(fp.inner):
        acts.append(h)
        h = matmul(h, M.value.T)
    acts.append(h)
    return matmul(h, fp.U.value.T), acts


def factored_linear_backward(fp, acts, dy):
    """Accumulates factor gradients into ``fp`` and returns dx."""
    fp.U.grad += matmul(dy.T, acts[-1])
    dh = matmul(dy, fp.U.value)
    for j, M in enumerate(fp.inner):
        h_in = acts[len(acts) - 2 - j]
        M.grad += matmul(dh.T, h_in)
        dh = matmul(dh, M.value)
    fp.V.grad += matmul(acts[0].T, dh)
    return matmul(dh, fp.V.value.T)


class Layer:
    normalized = False

    def parameters(self):
        return []

    def forward(self, x, train=True):
        raise NotImplementedError

    def backward(self, dy):
        raise NotImplementedError

    def __call__(self, x, train=True):
        return self.forward(x, train)


class Linear(Layer):
    def __init__(self, n_in, n_out, bias=True, rng=None, name="fc"):
        rng = rng or Rng(0)
        self.n_in, self.n_out = n_in, n_out
        self.name = name
        std = math.sqrt(2.0 / n_in)
        self.weight = Parameter(rng.normal((n_out, n_in), std), f"{name}.weight")
        self.bias = Parameter(np.zeros(n_out), f"{name}.bias") if bias else None

    @property
    def matrix_shape(self):
        return (self.n_out, self.n_in)

    def dense_matrix(self):
        w = self.weight
        return w.recompose() if _is_factorized(w) else w.value

    def set_dense_matrix(self, W):
        self.weight = Parameter(W, f"{self.name}.weight")

    def parameters(self):
        ps = self.weight.params() if _is_factorized(self.weight) else [self.weight]
        return ps + ([self.bias] if self.bias is not None else [])

    def forward(self, x, train=True):
        lead = x.shape[:-1]
        x2 = as_tensor(x).reshape(-1, x.shape[-1])
        if _is_factorized(self.weight):
            y, self._acts = factored_linear_forward(self.weight, x2)
        else:
            y = fc_forward(self.weight.value, x2)
        self._x = x2
        if self.bias is not None:
            y = y + self.bias.value
        return y.reshape(lead + (self.n_out,))

    def backward(self, dy):
        lead = dy.shape[:-1]
        dy2 = as_tensor(dy).reshape(-1, self.n_out)
        if self.bias is not None:
            self.bias.grad += dy2.sum(axis=0)
        if _is_factorized(self.weight):
            dx = factored_linear_backward(self.weight, self._acts, dy2)
        else:
            dW, dx = fc_backward(self.weight.value, self._x, dy2)
            self.weight.grad += dW
        return dx.reshape(lead + (self.n_in,))


# ---------------------------------------------------------------------------
# convolution via im2col


def _out_size(size, k, stride):
    return (size + 2 * (k // 2) - k) // stride + 1


def im2col(x, kh, kw, sh=1, sw=1):
    """Patches of ``x`` (B, C, H, W) with "same" zero padding.

    Column index is c * kh * kw + a * kw + b.
    """
    B, C, H, W = x.shape
    ph, pw = kh // 2, kw // 2
    Ho, Wo = _out_size(H, kh, sh), _out_size(W, kw, sw)
    xp = np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    cols = np.empty((B, C, kh, kw, Ho, Wo))
    for a in range(kh):
        for b in range(kw):
            cols[:, :, a, b] = xp[:, :, a : a + sh * Ho : sh, b : b + sw * Wo : sw]
    return cols.transpose(0, 4, 5, 1, 2, 3).reshape(B * Ho * Wo, C * kh * kw)


def col2im(cols, x_shape, kh, kw, sh=1, sw=1):
    B, C, H, W = x_shape
    ph, pw = kh // 2, kw // 2
    Ho, Wo = _out_size(H, kh, sh), _out_size(W, kw, sw)
    cols = cols.reshape(B, Ho, Wo, C, kh, kw).transpose(0, 3, 4, 5, 1, 2)
    xp = np.zeros((B, C, H + 2 * ph, W + 2 * pw))
    for a in range(kh):
        for b in range(kw):
            xp[:, :, a : a + sh * Ho : sh, b : b + sw * Wo : sw] += cols[:, :, a, b]
    return xp[:, :, ph : ph + H, pw : pw + W]


def _conv_apply(x, kflat, kh, kw, sh, sw):
    B, _, H, W = x.shape
    Ho, Wo = _out_size(H, kh, sh), _out_size(W, kw, sw)
    cols = im2col(x, kh, kw, sh, sw)
    y = matmul(cols, kflat.T)
    return y.reshape(B, Ho, Wo, -1).transpose(0, 3, 1, 2), cols


def _conv_grads(dy, cols, kflat, x_shape, kh, kw, sh, sw):
    O = dy.shape[1]
    dyf = np.ascontiguousarray(dy.transpose(0, 2, 3, 1)).reshape(-1, O)
    dk = matmul(dyf.T, cols)
    dx = col2im(matmul(dyf, kflat), x_shape, kh, kw, sh, sw)
    return dk, dx


def _check_conv(K, x):
    if K.ndim != 4 or K.shape[2] != K.shape[3]:
        raise ValueError(f"kernel must be (c_out, c_in, k, k), got {K.shape}")
    if K.shape[2] % 2 == 0:
        raise ValueError(f"kernel size must be odd, got {K.shape[2]}")
    if x.ndim != 4 or x.shape[1] != K.shape[1]:
        raise ValueError(f"input {x.shape} does not match kernel {K.shape}")


def conv2d_forward(K, x, stride=1):
    """Cross-correlation of x (B, c_in, h, w) with K (c_out, c_in, k, k)."""
    K, x = as_tensor(K), as_tensor(x)
    _check_conv(K, x)
    k = K.shape[2]
    y, _ = _conv_apply(x, K.reshape(K.shape[0], -1), k, k, stride, stride)
    return y


def conv2d_backward(K, x, dy, stride=1):
    """Returns (dK, dx)."""
    K, x = as_tensor(K), as_tensor(x)
    k = K.shape[2]
    cols = im2col(x, k, k, stride, stride)
    dk, dx = _conv_grads(dy, cols, K.reshape(K.shape[0], -1), x.shape, k, k, stride, stride)
    return dk.reshape(K.shape), dx


def kernel_to_matrix(K):
    """(c_out, c_in, k, k) -> (c_out k) x (c_in k), rows (o, a), columns (c, b)."""
    c_out, c_in, k, _ = K.shape
    return np.ascontiguousarray(K.transpose(0, 2, 1, 3)).reshape(c_out * k, c_in * k)


def matrix_to_kernel(W, c_out, c_in, k):
    return np.ascontiguousarray(W.reshape(c_out, k, c_in, k).transpose(0, 2, 1, 3))


def _horizontal_kernel(V):
    # V: (c_in k) x r -> r filters of shape (c_in, 1, k), flattened
    return np.ascontiguousarray(V.T)


def _vertical_kernel(U, c_out, k):
    # U: (c_out k) x r -> c_out filters of shape (r, k, 1), flattened
    r = U.shape[1]
    return np.ascontiguousarray(U.reshape(c_out, k, r).transpose(0, 2, 1)).reshape(c_out, r * k)


def _channel_mix(z, M):
    B, r, H, W = z.shape
    zf = np.ascontiguousarray(z.transpose(0, 2, 3, 1)).reshape(-1, r)
    return matmul(zf, M.T).reshape(B, H, W, -1).transpose(0, 3, 1, 2)


def _channel_mix_backward(dz, z_in, M):
    B, r, H, W = dz.shape
    dzf = np.ascontiguousarray(dz.transpose(0, 2, 3, 1)).reshape(-1, r)
    zf = np.ascontiguousarray(z_in.transpose(0, 2, 3, 1)).reshape(-1, z_in.shape[1])
    dM = matmul(dzf.T, zf)
    dx = matmul(dzf, M).reshape(B, H, W, -1).transpose(0, 3, 1, 2)
    return dM, dx


def factorized_conv_forward(U, V, x, c_out, k, inner=(), stride=1, cache=None):
    """Two 1d convolutions equivalent to the k x k conv with kernel U V^T.

    The first applies V^T (r output channels, width-k filters along the
    horizontal axis), then optional r x r channel mixes for inner factors,
    then U (c_out outputs, height-k filters along the vertical axis).
    """
    U, V, x = as_tensor(U), as_tensor(V), as_tensor(x)
    c_in = x.shape[1]
    if V.shape[0] != c_in * k or U.shape[0] != c_out * k or U.shape[1] != V.shape[1]:
        raise ValueError(
            f"factor shapes U {U.shape}, V {V.shape} do not match c_out={c_out}, "
            f"c_in={c_in}, k={k}"
        )
    z, cols1 = _conv_apply(x, _horizontal_kernel(V), 1, k, 1, stride)
    zs = [z]
    for M in reversed(inner):
        z = _channel_mix(z, as_tensor(M))
        zs.append(z)
    y, cols2 = _conv_apply(z, _vertical_kernel(U, c_out, k), k, 1, stride, 1)
    if cache is not None:
        cache.update(cols1=cols1, cols2=cols2, zs=zs, x_shape=x.shape)
    return y


def factorized_conv_backward(U, V, inner, dy, cache, c_out, k, stride=1):
    """Returns (dU, dV, [dM_1..dM_d], dx) on the factored path."""
    r = U.shape[1]
    zs = cache["zs"]
    dk2, dz = _conv_grads(dy, cache["cols2"], _vertical_kernel(U, c_out, k),
                          zs[-1].shape, k, 1, stride, 1)
    dU = np.ascontiguousarray(dk2.reshape(c_out, r, k).transpose(0, 2, 1)).reshape(c_out * k, r)
    dMs = []
    for j, M in enumerate(inner):
        dM, dz = _channel_mix_backward(dz, zs[len(zs) - 2 - j], M)
        dMs.append(dM)
    dk1, dx = _conv_grads(dz, cache["cols1"], _horizontal_kernel(V),
                          cache["x_shape"], 1, k, 1, stride)
    return dU, np.ascontiguousarray(dk1.T), dMs, dx


class Conv2d(Layer):
    def __init__(self, c_in, c_out, k=3, stride=1, rng=None, name="conv"):
        if k % 2 == 0:
            raise ValueError(f"kernel size must be odd, got {k}")
        if stride not in (1, 2):
            raise ValueError(f"stride must be 1 or 2, got {stride}")
        rng = rng or Rng(0)
        self.c_in, self.c_out, self.k, self.stride = c_in, c_out, k, stride
        self.name = name
        std = math.sqrt(2.0 / (c_in * k * k))
        self.weight = Parameter(rng.normal((c_out, c_in, k, k), std), f"{name}.weight")

    @property
    def fan_in(self):
        return self.c_in * self.k * self.k

    @property
    def matrix_shape(self):
        return (self.c_out * self.k, self.c_in * self.k)

    def dense_matrix(self):
        w = self.weight
        return w.recompose() if _is_factorized(w) else kernel_to_matrix(w.value)

    def set_dense_matrix(self, W):
        K = matrix_to_kernel(W, self.c_out, self.c_in, self.k)
        self.weight = Parameter(K, f"{self.name}.weight")

    def parameters(self):
        return self.weight.params() if _is_factorized(self.weight) else [self.weight]

    def forward(self, x, train=True):
        w = self.weight
        if _is_factorized(w):
            self._cache = {}
            return factorized_conv_forward(
                w.U.value, w.V.value, x, self.c_out, self.k,
                [M.value for M in w.inner], self.stride, self._cache,
            )
        K = w.value
        _check_conv(K, x)
        y, self._cols = _conv_apply(as_tensor(x), K.reshape(self.c_out, -1),
                                    self.k, self.k, self.stride, self.stride)
        self._x_shape = x.shape
        return y

    def backward(self, dy):
        w = self.weight
        if _is_factorized(w):
            dU, dV, dMs, dx = factorized_conv_backward(
                w.U.value, w.V.value, [M.value for M in w.inner], dy,
                self._cache, self.c_out, self.k, self.stride,
            )
            w.U.grad += dU
            w.V.grad += dV
            for M, dM in zip(w.inner, dMs):
                M.grad += dM
            return dx
        k = self.k
        dk, dx = _conv_grads(dy, self._cols, w.value.reshape(self.c_out, -1),
                             self._x_shape, k, k, self.stride, self.stride)
        w.grad += dk.reshape(w.value.shape)
        return dx


# ---------------------------------------------------------------------------
# normalization, activations, pooling


class BatchNorm(Layer):
    """Per-channel standardization over batch (and spatial) axes + affine."""

    def __init__(self, channels, eps=1e-5, momentum=0.1, affine=True, name="norm"):
        self.channels = channels
        self.eps = eps
        self.momentum = momentum
        self.affine = affine
        self.name = name
        self.gamma = Parameter(np.ones(channels), f"{name}.gamma")
        self.beta = Parameter(np.zeros(channels), f"{name}.beta")
        self.running_mean = np.zeros(channels)
        self.running_var = np.ones(channels)

    def parameters(self):
        return [self.gamma, self.beta] if self.affine else []

    def _axes(self, x):
        return (0,) if x.ndim == 2 else (0, 2, 3)

    def _shape(self, x):
        return (1, -1) if x.ndim == 2 else (1, -1, 1, 1)

    def forward(self, x, train=True):
        axes, shp = self._axes(x), self._shape(x)
        if train:
            if x.shape[0] < 2:
                raise ValueError("batch normalization in training mode needs batch size > 1")
            mean = x.mean(axis=axes)
            var = x.var(axis=axes)
            count = x.size // self.channels
            self.running_mean = (1 - self.momentum) * self.running_mean + self.momentum * mean
            unbiased = var * count / max(count - 1, 1)
            self.running_var = (1 - self.momentum) * self.running_var + self.momentum * unbiased
        else:
            mean, var = self.running_mean, self.running_var
        inv = 1.0 / np.sqrt(var + self.eps)
        xhat = (x - mean.reshape(shp)) * inv.reshape(shp)
        self._xhat, self._inv, self._train = xhat, inv, train
        if not self.affine:
            return xhat
        return xhat * self.gamma.value.reshape(shp) + self.beta.value.reshape(shp)

    def backward(self, dy):
        axes, shp = self._axes(dy), self._shape(dy)
        xhat = self._xhat
        if self.affine:
            self.gamma.grad += (dy * xhat).sum(axis=axes)
            self.beta.grad += dy.sum(axis=axes)
            dxhat = dy * self.gamma.value.reshape(shp)
        else:
            dxhat = dy
        if not self._train:
            return dxhat * self._inv.reshape(shp)
        mean_d = dxhat.mean(axis=axes, keepdims=True)
        mean_dx = (dxhat * xhat).mean(axis=axes, keepdims=True)
        return (dxhat - mean_d - xhat * mean_dx) * self._inv.reshape(shp)


def norm_layer_forward(W, x, gamma=None, beta=None, eps=1e-5):
    """Normalized fully connected layer: batch-standardized x W^T with affine."""
    y = fc_forward(W, x)
    mean = y.mean(axis=0)
    var = y.var(axis=0)
    out = (y - mean) / np.sqrt(var + eps)
    if gamma is not None:
        out = out * gamma
    if beta is not None:
        out = out + beta
    return out


class ReLU(Layer):
    def forward(self, x, train=True):
        self._mask = x > 0
        return np.where(self._mask, x, 0.0)

    def backward(self, dy):
        return np.where(self._mask, dy, 0.0)


class GlobalAvgPool(Layer):
    def forward(self, x, train=True):
        self._shape = x.shape
        return x.mean(axis=(2, 3))

    def backward(self, dy):
        B, C, H, W = self._shape
        return np.broadcast_to(dy[:, :, None, None] / (H * W), self._shape).copy()


class Embedding(Layer):
    def __init__(self, vocab, dim, rng=None, name="embed"):
        rng = rng or Rng(0)
        self.vocab, self.dim, self.name = vocab, dim, name
        self.weight = Parameter(rng.normal((vocab, dim), 1.0 / math.sqrt(dim)), f"{name}.weight")

    def parameters(self):
        return [self.weight]

    def forward(self, tokens, train=True):
        self._tokens = np.asarray(tokens)
        return self.weight.value[self._tokens]

    def backward(self, dy):
        np.add.at(self.weight.grad, self._tokens.reshape(-1), dy.reshape(-1, self.dim))
        return None


def sinusoidal_table(T, d):
    pos = np.arange(T)[:, None]
    i = np.arange(d)[None, :]
    angle = pos / np.power(10000.0, (2 * (i // 2)) / d)
    return np.where(i % 2 == 0, np.sin(angle), np.cos(angle))


class PositionalEncoding(Layer):
    def forward(self, x, train=True):
        return x + sinusoidal_table(x.shape[-2], x.shape[-1])

    def backward(self, dy):
        return dy


# ---------------------------------------------------------------------------
# multi-head attention


def _softmax_rows(s):
    s = s - s.max(axis=-1, keepdims=True)
    e = np.exp(s)
    return e / e.sum(axis=-1, keepdims=True)


def mha_forward(Q, K, V, O, x, r_attn=None):
    """Sum over heads of Softmax(x Q_h K_h^T x^T / sqrt(r)) x V_h O_h^T.

    ``Q, K, V, O`` are sequences of d x r matrices (one per head); ``x`` is
    T x d.
    """
    x = as_tensor(x)
    T, d = x.shape
    out = np.zeros((T, d))
    for Qh, Kh, Vh, Oh in zip(Q, K, V, O):
        for P in (Qh, Kh, Vh, Oh):
            if P.shape[0] != d:
                raise ValueError(f"head matrix {P.shape} does not match model dim {d}")
        r = Qh.shape[1] if r_attn is None else r_attn
        if r < 1:
            raise ValueError("r_attn must be >= 1")
        S = matmul(matmul(x, Qh), matmul(x, Kh).T) / math.sqrt(r)
        A = _softmax_rows(S)
        out += matmul(matmul(A, matmul(x, Vh)), as_tensor(Oh).T)
    return out


class MultiHeadAttention(Layer):
    """MHA over (B, T, d) whose QK and OV forms are factor pairs.

    ``qk[h]`` holds (U=Q_h, V=K_h) and ``ov[h]`` holds (U=V_h, V=O_h), so
    ``qk[h].recompose() = Q_h K_h^T`` and ``ov[h].recompose() = V_h O_h^T``.
    """

    def __init__(self, d, heads, r_attn=None, rng=None, spectral=False, name="mha"):
        from .factorization import FactorizedParam, spectral_init

        if r_attn is None:
            if d % heads:
                raise ValueError(f"d={d} not divisible by heads={heads}")
            r_attn = d // heads
        if r_attn < 1:
            raise ValueError("r_attn must be >= 1")
        rng = rng or Rng(0)
        self.d, self.heads, self.r = d, heads, r_attn
        self.name = name
        self.qk, self.ov = [], []
        std = 1.0 / math.sqrt(d)
        for h in range(heads):
            pair = []
            for form in ("qk", "ov"):
                tag = f"{name}.h{h}.{form}"
                if spectral:
                    fp = spectral_init(rng.normal((d, d), std), min(r_attn, d), name=tag)
                else:
                    fp = FactorizedParam(
                        Parameter(rng.normal((d, r_attn), std), f"{tag}.U"), [],
                        Parameter(rng.normal((d, r_attn), std), f"{tag}.V"),
                        mode="lowrank", target_shape=(d, d), name=tag,
                    )
                pair.append(fp)
            self.qk.append(pair[0])
            self.ov.append(pair[1])

    @property
    def forms(self):
        return self.qk + self.ov

    def parameters(self):
        return [p for fp in self.forms for p in fp.params()]

    def forward(self, x, train=True):
        B, T, d = x.shape
        x2 = x.reshape(B * T, d)
        scale = 1.0 / math.sqrt(self.r)
        out = np.zeros((B * T, d))
        self._cache = []
        for qk, ov in zip(self.qk, self.ov):
            q = matmul(x2, qk.U.value).reshape(B, T, -1)
            k = matmul(x2, qk.V.value).reshape(B, T, -1)
            v = matmul(x2, ov.U.value).reshape(B, T, -1)
            S = bmm(q, k.transpose(0, 2, 1)) * scale
            A = _softmax_rows(S)
            ctx = bmm(A, v)
            out += matmul(ctx.reshape(B * T, -1), ov.V.value.T)
            self._cache.append((q, k, v, A, ctx))
        self._x2 = x2
        return out.reshape(B, T, d)

    def backward(self, dy):
        B, T, d = dy.shape
        dy2 = dy.reshape(B * T, d)
        x2 = self._x2
        scale = 1.0 / math.sqrt(self.r)
        dx = np.zeros((B * T, d))
        for (qk, ov), (q, k, v, A, ctx) in zip(zip(self.qk, self.ov), self._cache):
            ctx2 = ctx.reshape(B * T, -1)
            ov.V.grad += matmul(dy2.T, ctx2)
            dctx = matmul(dy2, ov.V.value).reshape(B, T, -1)
            dA = bmm(dctx, v.transpose(0, 2, 1))
            dv = bmm(A.transpose(0, 2, 1), dctx).reshape(B * T, -1)
            dS = A * (dA - (dA * A).sum(axis=-1, keepdims=True)) * scale
            dq = bmm(dS, k).reshape(B * T, -1)
            dk = bmm(dS.transpose(0, 2, 1), q).reshape(B * T, -1)
            qk.U.grad += matmul(x2.T, dq)
            qk.V.grad += matmul(x2.T, dk)
            ov.U.grad += matmul(x2.T, dv)
            dx += matmul(dq, qk.U.value.T) + matmul(dk, qk.V.value.T) + matmul(dv, ov.U.value.T)
        return dx.reshape(B, T, d)


# ---------------------------------------------------------------------------
# loss and gradient checking


def softmax_cross_entropy(logits, labels):
    """Mean negative log-softmax of the true class and its gradient."""
    logits = as_tensor(logits)
    labels = np.asarray(labels, dtype=np.int64)
    N, C = logits.shape
    if labels.shape != (N,):
        raise ValueError(f"labels shape {labels.shape} does not match logits {logits.shape}")
    if labels.min(initial=0) < 0 or labels.max(initial=0) >= C:
        raise ValueError(f"labels must lie in [0, {C})")
    shifted = logits - logits.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1))
    rows = np.arange(N)
    loss = float(np.mean(lse - shifted[rows, labels]))
    grad = np.exp(shifted - lse[:, None])
    grad[rows, labels] -= 1.0
    return loss, grad / N


def relative_error(analytic, numeric, floor=1e-8):
    """max |a - n| over entries, relative to the largest magnitude in either."""
    a, n = np.asarray(analytic).ravel(), np.asarray(numeric).ravel()
    if not a.size:
        return 0.0
    scale = max(float(np.max(np.abs(a))), float(np.max(np.abs(n))), floor)
    return float(np.max(np.abs(a - n))) / scale


def numeric_gradient(f, x, eps=1e-5):
    """Central differences of scalar ``f()`` w.r.t. array ``x`` (perturbed in place)."""
    g = np.zeros_like(x)
    flat, gflat = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + eps
        fp = f()
        flat[i] = old - eps
        fm = f()
        flat[i] = old
        gflat[i] = (fp - fm) / (2.0 * eps)
    return g


def finite_diff_check(model, inputs, param, eps=1e-5, loss=None, floor=1e-8):
    """Worst relative error between ``param.grad`` and central differences.

    ``loss(out) -> (value, dout)`` defaults to a fixed random projection of the
    model output, which keeps every gradient coordinate generic.
    """
    if not 1e-7 <= eps <= 1e-3:
        raise ValueError(f"eps must lie in [1e-7, 1e-3], got {eps}")
    if loss is None:
        out = model.forward(inputs, train=True)
        R = Rng(12345, 99).normal(out.shape)

        def loss(o):
            return float(np.sum(R * o)), R

    for p in model.parameters():
        p.zero_grad()
    _, dout = loss(model.forward(inputs, train=True))
    model.backward(dout)
    analytic = param.grad.copy()

    def f():
        return loss(model.forward(inputs, train=True))[0]

    numeric = numeric_gradient(f, param.value, eps)
    return relative_error(analytic, numeric, floor)
