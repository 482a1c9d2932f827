"""Independent reference implementations the tests compare against.

Everything here is written with plain Python loops or closed forms and
shares no code with the package under test.
"""

from __future__ import annotations

import math

import numpy as np


def conv2d_loops(x: np.ndarray, k: np.ndarray, stride: int = 1, padding: int = 0) -> np.ndarray:
    B, C, H, W = x.shape
    F, _, kh, kw = k.shape
    xp = np.zeros((B, C, H + 2 * padding, W + 2 * padding), dtype=np.float64)
    xp[:, :, padding:padding + H, padding:padding + W] = x
    Ho = (H + 2 * padding - kh) // stride + 1
    Wo = (W + 2 * padding - kw) // stride + 1
    out = np.zeros((B, F, Ho, Wo))
    for b in range(B):
        for f in range(F):
            for i in range(Ho):
                for j in range(Wo):
                    patch = xp[b, :, i * stride:i * stride + kh, j * stride:j * stride + kw]
                    out[b, f, i, j] = float((patch * k[f]).sum())
    return out


def cross_entropy_closed_form(logits: list[float], label: int) -> float:
    # log-sum-exp written out by hand, shifted by the max for stability
    top = max(logits)
    lse = top + math.log(sum(math.exp(z - top) for z in logits))
    return lse - logits[label]


def adam_scalar(w: float, grads: list[float], lr: float, b1: float, b2: float, eps: float,
                wd: float) -> float:
    m = v = 0.0
    for t, g in enumerate(grads, start=1):
        g = g + wd * w
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        w -= lr * (m / (1 - b1 ** t)) / (math.sqrt(v / (1 - b2 ** t)) + eps)
    return w


def sgd_scalar(w: float, grads: list[float], lr: float, momentum: float, wd: float) -> float:
    buf = None
    for g in grads:
        g = g + wd * w
        buf = g if buf is None else momentum * buf + g
        w -= lr * buf
    return w


def magnitude_prune_sorted(values: list[float], keep: list[bool], p: float) -> list[bool]:
    """Prune floor(p * kept) smallest-|w| kept entries; ties go to the lower index."""
    remaining = [i for i, k in enumerate(keep) if k]
    n = math.floor(round(p * len(remaining), 9))
    order = sorted(remaining, key=lambda i: (abs(values[i]), i))
    out = list(keep)
    for i in order[:n]:
        out[i] = False
    return out


def lth_kept(n: int, p: float, rounds: int) -> list[int]:
    """kept(k) = kept(k-1) - floor(p * kept(k-1)), using exact rational p."""
    from fractions import Fraction

    frac = Fraction(str(p))
    kept = [n]
    for _ in range(rounds):
        kept.append(kept[-1] - math.floor(frac * kept[-1]))
    return kept


def least_squares_accuracy(train_x, train_y, test_x, test_y, num_classes: int) -> float:
    """One-vs-all linear regression on one-hot targets, argmax decision."""
    X = np.hstack([train_x.reshape(len(train_x), -1), np.ones((len(train_x), 1))]).astype(np.float64)
    Y = np.eye(num_classes)[train_y]
    W, *_ = np.linalg.lstsq(X, Y, rcond=None)
    Xt = np.hstack([test_x.reshape(len(test_x), -1), np.ones((len(test_x), 1))])
    return 100.0 * float(np.mean((Xt @ W).argmax(axis=1) == test_y))


def idx_bytes_images(images: list[list[list[int]]]) -> bytes:
    n, rows, cols = len(images), len(images[0]), len(images[0][0])
    out = bytearray([0, 0, 0x08, 0x03])
    for v in (n, rows, cols):
        out += v.to_bytes(4, "big")
    for img in images:
        for row in img:
            out += bytes(row)
    return bytes(out)


def idx_bytes_labels(labels: list[int]) -> bytes:
    return bytes([0, 0, 0x08, 0x01]) + len(labels).to_bytes(4, "big") + bytes(labels)
