"""Seeded synthetic datasets: Gaussian blobs, oriented-bar patches, sequence copy."""
from dataclasses import dataclass

import numpy as np

from .tensor import Rng


@dataclass
class Dataset:
    x: np.ndarray
    y: np.ndarray
    classes: int

    def __len__(self):
        return len(self.y)

    def batch(self, idx):
        return self.x[idx], self.y[idx]


def _check_size(n, classes):
    if n < classes * 10:
        raise ValueError(f"need n >= 10 * classes = {classes * 10}, got {n}")


def _balanced_labels(n, classes, rng):
    y = np.arange(n) % classes
    return y[rng.permutation(n)]


def gen_blobs_cls(n, classes, dim, seed, spread=1.0, separation=4.0, stream=0):
    """Gaussian clusters around random centers.

    Centers are drawn once per ``seed`` (so train and eval splits drawn with
    different ``stream`` share them); points add isotropic noise of std
    ``spread``.
    """
    _check_size(n, classes)
    centers = Rng(seed, 1000).normal((classes, dim), separation / np.sqrt(dim))
    rng = Rng(seed, 1001 + stream)
    y = _balanced_labels(n, classes, rng)
    x = centers[y] + rng.normal((n, dim), 1.0) * spread
    return Dataset(x, y, classes)


def bar_texture(angle, freq, phase, size=8):
    """Sinusoidal grating with crests perpendicular to ``angle``."""
    r = np.arange(size, dtype=np.float64)
    yy, xx = np.meshgrid(r, r, indexing="ij")
    t = xx * np.cos(angle) + yy * np.sin(angle)
    return np.sin(2.0 * np.pi * freq * t + phase)


def gen_patches_cls(n, classes=4, seed=0, noise=0.8, size=8, jitter=0.25, stream=0):
    """Single-channel ``size`` x ``size`` images of class-oriented gratings.

    Class ``c`` uses orientation ``pi * c / classes``; each image gets a
    random phase, a frequency in [0.2, 0.35] cycles per pixel, an angle
    perturbation of up to ``jitter`` times the class spacing, and Gaussian
    pixel noise of std ``noise``.
    """
    _check_size(n, classes)
    rng = Rng(seed, 2000 + stream)
    y = _balanced_labels(n, classes, rng)
    phase = rng.uniform(n) * 2.0 * np.pi
    freq = 0.2 + 0.15 * rng.uniform(n)
    wobble = (2.0 * rng.uniform(n) - 1.0) * jitter * np.pi / classes
    x = np.empty((n, 1, size, size))
    for i in range(n):
        x[i, 0] = bar_texture(np.pi * y[i] / classes + wobble[i], freq[i], phase[i], size)
    x += rng.normal(x.shape, noise)
    return Dataset(x, y, classes)


def gen_seq_copy(n, T, vocab, seed, stream=0):
    """Uniform random token sequences whose target is the sequence itself."""
    if n < 1 or T < 1 or vocab < 2:
        raise ValueError("need n >= 1, T >= 1 and vocab >= 2")
    tokens = Rng(seed, 3000 + stream).integers(vocab, (n, T))
    return Dataset(tokens, tokens.copy(), vocab)


def make_dataset(task, n, seed, stream=0, **kw):
    if task == "blobs_cls":
        return gen_blobs_cls(n, kw.get("classes", 4), kw.get("dim", 16), seed,
                             kw.get("spread", 1.0), kw.get("separation", 4.0), stream)
    if task == "patches_cls":
        return gen_patches_cls(n, kw.get("classes", 4), seed, kw.get("noise", 0.8),
                               kw.get("size", 8), kw.get("jitter", 0.25), stream)
    if task == "seq_copy":
        return gen_seq_copy(n, kw.get("seq_len", 8), kw.get("vocab", 8), seed, stream)
    raise ValueError(f"unknown task {task!r}")
