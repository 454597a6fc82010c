"""Slow, loop-based reference implementations used as test oracles.

Nothing here imports the package's numerics; each function is written
directly from the formula it checks.
"""
from __future__ import annotations

import itertools
import math

import numpy as np

GX = [[-1, 0, 1], [-2, 0, 2], [-1, 0, 1]]
GY = [[-1, -2, -1], [0, 0, 0], [1, 2, 1]]


def cubic(x: float, a: float = -0.5) -> float:
    x = abs(x)
    if x <= 1:
        return (a + 2) * x ** 3 - (a + 3) * x ** 2 + 1
    if x < 2:
        return a * x ** 3 - 5 * a * x ** 2 + 8 * a * x - 4 * a
    return 0.0


def _clampi(i: int, n: int) -> int:
    return min(max(i, 0), n - 1)


def bicubic(img, out_h: int, out_w: int):
    """Separable Catmull-Rom resize, half-pixel centres, edge-clamped taps."""
    c, h, w = len(img), len(img[0]), len(img[0][0])
    if (h, w) == (out_h, out_w):
        return [[list(map(float, row)) for row in ch] for ch in img]
    out = [[[0.0] * out_w for _ in range(out_h)] for _ in range(c)]
    for ch in range(c):
        for oy in range(out_h):
            sy = (oy + 0.5) * h / out_h - 0.5
            fy = math.floor(sy)
            for ox in range(out_w):
                sx = (ox + 0.5) * w / out_w - 0.5
                fx = math.floor(sx)
                acc = 0.0
                for ty in range(fy - 1, fy + 3):
                    wy = cubic(sy - ty)
                    for tx in range(fx - 1, fx + 3):
                        acc += wy * cubic(sx - tx) * img[ch][_clampi(ty, h)][_clampi(tx, w)]
                out[ch][oy][ox] = acc
    return out


def sobel(img):
    """Per-channel sqrt(max(gx^2 + gy^2, 1e-12)) with replicate padding."""
    c, h, w = len(img), len(img[0]), len(img[0][0])
    out = [[[0.0] * w for _ in range(h)] for _ in range(c)]
    for ch in range(c):
        for i in range(h):
            for j in range(w):
                sx = sy = 0.0
                for u in range(3):
                    for v in range(3):
                        val = img[ch][_clampi(i + u - 1, h)][_clampi(j + v - 1, w)]
                        sx += GX[u][v] * val
                        sy += GY[u][v] * val
                out[ch][i][j] = math.sqrt(max(sx * sx + sy * sy, 1e-12))
    return out


def minmax(ch):
    lo = min(min(r) for r in ch)
    hi = max(max(r) for r in ch)
    if hi - lo < 1e-12:
        return [[0.0] * len(r) for r in ch]
    return [[(v - lo) / (hi - lo) for v in r] for r in ch]


def eta(t: float, mu: float = 2.5) -> float:
    return math.tanh(mu + math.log(t / (1 - t)))


def edge_act(mag: float, mu: float = 2.5, eps: float = 1e-4) -> float:
    t = min(max(mag / (4 * math.sqrt(2)), eps), 1 - eps)
    return eta(t, mu)


def deal(cam, labels, depth, align_h: int, align_w: int, mu: float = 2.5, eps: float = 1e-4) -> float:
    """Edge alignment loss evaluated pixel by pixel and class by class."""
    d = bicubic([minmax(depth[0])], align_h, align_w)
    d_mag = sobel(d)[0]
    present = [k for k in range(len(labels)) if labels[k] == 1]
    if not present:
        return 0.0
    s = bicubic([cam[k] for k in present], align_h, align_w)
    s = [[[min(max(v, 0.0), 1.0) for v in row] for row in ch] for ch in s]
    a_mag = sobel(s)
    total = 0.0
    for i in range(align_h):
        for j in range(align_w):
            dp = edge_act(d_mag[i][j], mu, eps)
            per = 0.0
            for c in range(len(present)):
                per += edge_act(a_mag[c][i][j], mu, eps) * dp
            total += per / len(present)
    return -total / (align_h * align_w)


def gaussian(di: float, dj: float, sigma: float) -> float:
    return math.exp(-(di * di + dj * dj) / (2 * sigma * sigma)) / (2 * math.pi * sigma * sigma)


def fsl(img, cam, sigma: float = 5.0, mu: float = 2.5, eps: float = 1e-4, radius: int | None = None) -> float:
    """Feature similarity loss over all ordered pixel pairs (optionally truncated)."""
    k, h, w = len(cam), len(cam[0]), len(cam[0][0])
    total = 0.0
    for i, j, u, v in itertools.product(range(h), range(w), range(h), range(w)):
        if radius is not None and max(abs(i - u), abs(j - v)) > radius:
            continue
        g = 0.5 * sum((cam[c][i][j] - cam[c][u][v]) ** 2 for c in range(k))
        if g == 0.0:
            continue
        delta = math.sqrt(sum((img[c][i][j] - img[c][u][v]) ** 2 for c in range(3))) / 3
        total += gaussian(i - u, j - v, sigma) * g * eta(min(max(delta, eps), 1 - eps), mu)
    return -total / (h * w)


def mlsm(logits, labels) -> float:
    acc = 0.0
    for x, y in zip(logits, labels):
        log_p = -math.log1p(math.exp(-x)) if x >= 0 else x - math.log1p(math.exp(x))
        log_q = -math.log1p(math.exp(x)) if x <= 0 else -x - math.log1p(math.exp(-x))
        acc += y * log_p + (1 - y) * log_q
    return -acc / len(logits)


def isl_expectation(cam, labels) -> float:
    """Exact expected single-draw ISL by enumerating every joint pixel choice."""
    k = len(cam)
    flat = [[v for row in ch for v in row] for ch in cam]
    n = len(flat[0])
    probs = []
    for ch in flat:
        s = sum(ch)
        probs.append([v / s for v in ch] if s >= 1e-12 else [1.0 / n] * n)
    expect = 0.0
    for choice in itertools.product(range(n), repeat=k):
        p = 1.0
        for c in range(k):
            p *= probs[c][choice[c]]
        if p == 0.0:
            continue
        expect += p * mlsm([flat[c][choice[c]] for c in range(k)], labels)
    return expect


def threshold_map(cam, tau: float, labels=None):
    k, h, w = len(cam), len(cam[0]), len(cam[0][0])
    out = [[0] * w for _ in range(h)]
    for i in range(h):
        for j in range(w):
            best, arg = -1.0, 0
            for c in range(k):
                v = cam[c][i][j] * (1 if labels is None else labels[c])
                if v > best:
                    best, arg = v, c
            out[i][j] = arg + 1 if best >= tau else 0
    return out


def miou_of(preds, gts, n_classes: int) -> float:
    """Mean IoU over classes 0..n_classes with a non-empty union."""
    ious = []
    for c in range(n_classes + 1):
        inter = union = 0
        for p, g in zip(preds, gts):
            for pr, gr in zip(p, g):
                for a, b in zip(pr, gr):
                    inter += (a == c) and (b == c)
                    union += (a == c) or (b == c)
        if union:
            ious.append(inter / union)
    return sum(ious) / len(ious)


def naive_sweep(cams, gts, taus, labels=None):
    """(best tau, best mIoU) by re-thresholding at every grid value; first max wins."""
    k = len(cams[0])
    best = (None, -1.0)
    for tau in sorted(taus):
        preds = [threshold_map(c, tau, None if labels is None else labels[i]) for i, c in enumerate(cams)]
        m = miou_of(preds, gts, k)
        if m > best[1]:
            best = (tau, m)
    return best


def to_lists(a: np.ndarray):
    return np.asarray(a, dtype=float).tolist()
