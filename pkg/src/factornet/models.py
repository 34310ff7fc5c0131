"""Sequential container and the three desk-scale architectures."""
from .layers import (BatchNorm, Conv2d, Embedding, GlobalAvgPool, Linear,
                     MultiHeadAttention, PositionalEncoding, ReLU)
from .tensor import Rng

ARCHS = ("mlp", "smallcnn", "tiny_attn")


class Sequential:
    def __init__(self, layers):
        self.layers = list(layers)
        for a, b in zip(self.layers, self.layers[1:]):
            if isinstance(b, BatchNorm) and isinstance(a, (Linear, Conv2d)):
                a.normalized = True

    def forward(self, x, train=True):
        for layer in self.layers:
            x = layer.forward(x, train)
        return x

    __call__ = forward

    def backward(self, dy):
        for layer in reversed(self.layers):
            dy = layer.backward(dy)
            if dy is None:
                break
        return dy

    def parameters(self):
        return [p for layer in self.layers for p in layer.parameters()]

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()

    def buffers(self):
        """Non-trainable state (normalization running statistics)."""
        out = []
        for layer in self.layers:
            if isinstance(layer, BatchNorm):
                out.append((f"{layer.name}.running_mean", layer, "running_mean"))
                out.append((f"{layer.name}.running_var", layer, "running_var"))
        return out


def mlp(dim, hidden, classes, seed=0):
    """fc -> norm -> relu, repeated per hidden width, then an fc head."""
    rng = Rng(seed, 7)
    layers, width = [], dim
    for i, h in enumerate(hidden):
        layers += [Linear(width, h, bias=False, rng=rng, name=f"fc{i + 1}"),
                   BatchNorm(h, name=f"norm{i + 1}"), ReLU()]
        width = h
    layers.append(Linear(width, classes, rng=rng, name="head"))
    return Sequential(layers)


def smallcnn(in_channels, widths, classes, seed=0, k=3):
    """conv -> norm -> relu per width, global average pool, fc head."""
    rng = Rng(seed, 7)
    layers, c = [], in_channels
    for i, w in enumerate(widths):
        layers += [Conv2d(c, w, k, rng=rng, name=f"conv{i + 1}"),
                   BatchNorm(w, name=f"norm{i + 1}"), ReLU()]
        c = w
    layers += [GlobalAvgPool(), Linear(c, classes, rng=rng, name="head")]
    return Sequential(layers)


def tiny_attn(vocab, d_model, heads=1, r_attn=None, seed=0, spectral=False):
    """embedding + positions -> attention -> fc head, no residual path."""
    rng = Rng(seed, 7)
    return Sequential([
        Embedding(vocab, d_model, rng=rng),
        PositionalEncoding(),
        MultiHeadAttention(d_model, heads, r_attn, rng=rng, spectral=spectral),
        Linear(d_model, vocab, rng=rng, name="head"),
    ])


def build_architecture(arch, seed=0, **kw):
    if arch == "mlp":
        return mlp(kw.get("dim", 16), tuple(kw.get("hidden", (32, 32))), kw.get("classes", 4), seed)
    if arch == "smallcnn":
        return smallcnn(kw.get("in_channels", 1), tuple(kw.get("widths", (8, 16))),
                        kw.get("classes", 4), seed, kw.get("kernel", 3))
    if arch == "tiny_attn":
        return tiny_attn(kw.get("vocab", 8), kw.get("d_model", 16), kw.get("heads", 1),
                         kw.get("r_attn"), seed, kw.get("attn_spectral", False))
    raise ValueError(f"unknown architecture {arch!r}")


def closed_form_param_count(arch, **kw):
    """Parameter count of the unfactorized architecture, by formula."""
    if arch == "mlp":
        dims = [kw.get("dim", 16), *kw.get("hidden", (32, 32))]
        n = sum(a * b + 2 * b for a, b in zip(dims, dims[1:]))
        return n + dims[-1] * kw.get("classes", 4) + kw.get("classes", 4)
    if arch == "smallcnn":
        k = kw.get("kernel", 3)
        chans = [kw.get("in_channels", 1), *kw.get("widths", (8, 16))]
        n = sum(a * b * k * k + 2 * b for a, b in zip(chans, chans[1:]))
        return n + chans[-1] * kw.get("classes", 4) + kw.get("classes", 4)
    if arch == "tiny_attn":
        V, d, H = kw.get("vocab", 8), kw.get("d_model", 16), kw.get("heads", 1)
        r = kw.get("r_attn") or d // H
        return V * d + H * 4 * d * r + d * V + V
    raise ValueError(f"unknown architecture {arch!r}")
