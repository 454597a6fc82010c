"""Depth edge alignment, importance sampling and feature similarity losses."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from . import autograd as ag
from .autograd import DomainError, ShapeError, Tensor
from .imageops import SOBEL_MAX, bicubic_resize, minmax_normalize, sobel_magnitude

logger = logging.getLogger(__name__)


@dataclass
class LossConfig:
    mu: float = 2.5
    sigma: float = 5.0
    n_is: int = 10
    w_edge: float = 0.04
    w_is: float = 0.2
    w_fs: float = 1.0
    aux_scale: float = 0.1
    warmup_fraction: float = 1.0 / 3.0
    # None means "depth resolution // 4"
    align_h: int | None = None
    align_w: int | None = None
    eps: float = 1e-4
    fsl_radius: int | None = None

    def __post_init__(self):
        if self.fsl_radius is None:
            self.fsl_radius = int(math.ceil(3 * self.sigma))
        if self.mu < 0:
            raise ValueError(f"mu must be >= 0, got {self.mu}")
        if self.sigma <= 0:
            raise ValueError(f"sigma must be > 0, got {self.sigma}")
        if self.n_is < 1:
            raise ValueError(f"n_is must be >= 1, got {self.n_is}")
        if not 0 <= self.warmup_fraction < 1:
            raise ValueError(f"warmup_fraction must lie in [0, 1), got {self.warmup_fraction}")
        if not 0 < self.eps < 0.5:
            raise ValueError(f"eps must lie in (0, 0.5), got {self.eps}")
        if self.fsl_radius < 1:
            raise ValueError(f"fsl_radius must be >= 1, got {self.fsl_radius}")

    def align_size(self, h: int, w: int) -> tuple[int, int]:
        return (self.align_h or max(h // 4, 3), self.align_w or max(w // 4, 3))


@dataclass
class LabeledCam:
    """Class activation maps in [0, 1] with their image-level labels."""

    cam: Tensor
    labels: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def __post_init__(self):
        if not isinstance(self.cam, Tensor):
            self.cam = Tensor(self.cam)
        self.labels = np.asarray(self.labels, dtype=np.float64).reshape(-1)
        if self.cam.ndim != 3:
            raise ShapeError(f"cam must be K x H x W, got {list(self.cam.shape)}")
        if self.labels.size != self.cam.shape[0]:
            raise ShapeError(f"{self.labels.size} labels for {self.cam.shape[0]} cam channels")
        if not np.all(np.isin(self.labels, (0.0, 1.0))):
            raise ValueError("labels must be binary")
        d = self.cam.data
        if not np.all(np.isfinite(d)) or d.min() < 0.0 or d.max() > 1.0:
            raise DomainError("cam values must lie in [0, 1]")


def eta(t: Tensor, mu: float = 2.5) -> Tensor:
    """tanh(mu + log(t / (1 - t))): maps (0, 1) onto (-1, 1), small t to -1."""
    if np.any(t.data <= 0.0) or np.any(t.data >= 1.0):
        raise DomainError("eta needs inputs strictly inside (0, 1); clamp to [eps, 1 - eps] first")
    logit = ag.sub(ag.log(t), ag.log(ag.sub(1.0, t)))
    return ag.tanh(ag.add(logit, mu))


def edge_activation(t: Tensor, cfg: LossConfig) -> Tensor:
    """Sobel magnitude scaled into (0, 1), clamped, then passed through eta."""
    mag = ag.mul(sobel_magnitude(t), 1.0 / SOBEL_MAX)
    return eta(ag.clamp(mag, cfg.eps, 1.0 - cfg.eps), cfg.mu)


@dataclass
class DealParts:
    """Intermediate maps of one edge alignment evaluation."""

    loss: Tensor
    cam_edges: Tensor | None  # a', present classes only
    depth_edges: Tensor  # d'
    alignment: Tensor | None  # per-pixel class mean of a' * d'
    present: np.ndarray


def deal_parts(cam: LabeledCam, depth: Tensor, cfg: LossConfig, depth_edges: Tensor | None = None) -> DealParts:
    """Run the full alignment pipeline; ``depth_edges`` may carry a cached d'."""
    if depth.ndim != 3 or depth.shape[0] != 1:
        raise ShapeError(f"depth must be 1 x H x W, got {list(depth.shape)}")
    if not np.all(np.isfinite(depth.data)):
        raise DomainError("depth contains non-finite values")
    ah, aw = cfg.align_size(*depth.shape[-2:])
    if depth_edges is None:
        depth_edges = edge_activation(bicubic_resize(minmax_normalize(depth), ah, aw), cfg)
    d_prime = depth_edges

    present = np.flatnonzero(cam.labels > 0.5)
    if present.size == 0:
        logger.debug("no-positive-class: edge alignment loss is 0 for this sample")
        return DealParts(Tensor(0.0), None, d_prime, None, present)
    # absent classes never enter the graph
    s = cam.cam if present.size == cam.cam.shape[0] else ag.getitem(cam.cam, present)
    s = ag.clamp(bicubic_resize(s, ah, aw), 0.0, 1.0)
    a_prime = edge_activation(s, cfg)
    align = ag.mean(ag.mul(a_prime, d_prime), axes=0)
    loss = ag.neg(ag.mean(align))
    return DealParts(loss, a_prime, d_prime, align, present)


def deal_loss(cam: LabeledCam, depth: Tensor, cfg: LossConfig) -> Tensor:
    """Negative mean agreement between CAM edges and depth edges, in [-1, 1]."""
    return deal_parts(cam, depth, cfg).loss


def mlsm_loss(logits: Tensor, labels) -> Tensor:
    """Multi-label soft margin loss averaged over classes (and leading axes)."""
    y = np.asarray(labels, dtype=np.float64)
    if logits.shape[-1] != y.shape[-1]:
        raise ShapeError(f"{logits.shape[-1]} logits for {y.shape[-1]} labels")
    if not np.all(np.isfinite(logits.data)):
        raise DomainError("logits must be finite")
    y = Tensor(np.broadcast_to(y, logits.shape))
    pos = ag.mul(y, ag.log_sigmoid(logits))
    negt = ag.mul(ag.sub(1.0, y), ag.log_sigmoid(ag.neg(logits)))
    return ag.neg(ag.mean(ag.add(pos, negt)))


def sampling_distribution(cam: np.ndarray) -> np.ndarray:
    """Per-class pixel probabilities s / sum(s), uniform for an all-zero channel."""
    flat = np.asarray(cam, dtype=np.float64).reshape(cam.shape[0], -1)
    totals = flat.sum(axis=1, keepdims=True)
    uniform = np.full_like(flat, 1.0 / flat.shape[1])
    safe = np.where(totals < 1e-12, 1.0, totals)
    return np.where(totals < 1e-12, uniform, flat / safe)


def draw_indices(cam: np.ndarray, rng: np.random.Generator, n: int = 1) -> np.ndarray:
    """Flat pixel indices, shape n x K, one inverse-CDF draw per (repeat, class)."""
    p = sampling_distribution(cam)
    cdf = np.cumsum(p, axis=1)
    u = rng.random((n, p.shape[0])) * cdf[:, -1]
    idx = np.empty(u.shape, dtype=np.intp)
    for k in range(p.shape[0]):
        idx[:, k] = np.searchsorted(cdf[k], u[:, k], side="right")
    return np.minimum(idx, p.shape[1] - 1)


def is_aggregate(cam: LabeledCam, rng: np.random.Generator) -> Tensor:
    """One importance-sampled score per class; indices are constants on the tape."""
    idx = draw_indices(cam.cam.data, rng, 1)[0]
    return ag.take_flat(cam.cam, idx)


def isl_loss(cam: LabeledCam, cfg: LossConfig, rng: np.random.Generator) -> Tensor:
    """Mean soft-margin loss over ``cfg.n_is`` importance-sampled predictions."""
    idx = draw_indices(cam.cam.data, rng, cfg.n_is)
    scores = ag.take_flat(cam.cam, idx)  # n_is x K
    return mlsm_loss(scores, cam.labels)


def gaussian_weight(di, dj, sigma: float = 5.0):
    if sigma <= 0:
        raise ValueError(f"sigma must be > 0, got {sigma}")
    d2 = np.asarray(di, dtype=np.float64) ** 2 + np.asarray(dj, dtype=np.float64) ** 2
    out = np.exp(-d2 / (2 * sigma * sigma)) / (2 * np.pi * sigma * sigma)
    return float(out) if np.ndim(out) == 0 else out


def eta_np(t: np.ndarray, mu: float) -> np.ndarray:
    return np.tanh(mu + np.log(t) - np.log1p(-t))


@dataclass
class PairGraph:
    """Unordered pixel pairs with their colour-gated Gaussian weights.

    ``laplacian`` is D - W for the symmetric weight matrix W, so that
    ``s^T L s`` equals ``sum_pairs coef * (s_p - s_q)^2``.
    """

    first: np.ndarray
    second: np.ndarray
    coef: np.ndarray
    laplacian: sp.csr_matrix
    shape: tuple[int, int]


def fsl_affinity(image: Tensor | np.ndarray, cfg: LossConfig) -> PairGraph:
    """Pair graph of an RGB image for :func:`fsl_loss`.

    Pairs are pixels within Chebyshev radius ``cfg.fsl_radius``; each
    unordered pair is stored once and counts for both orderings.
    """
    x = image.data if isinstance(image, Tensor) else np.asarray(image, dtype=np.float64)
    if x.ndim != 3 or x.shape[0] != 3:
        raise ShapeError(f"image must be 3 x H x W, got {list(x.shape)}")
    _, h, w = x.shape
    ids = np.arange(h * w).reshape(h, w)
    r = cfg.fsl_radius
    rows, cols, vals = [], [], []
    # half-plane of offsets
    for di in range(0, min(r, h - 1) + 1):
        for dj in range(-min(r, w - 1), min(r, w - 1) + 1):
            if di == 0 and dj <= 0:
                continue
            i0, i1 = 0, h - di
            j0, j1 = max(0, -dj), w - max(0, dj)
            if j1 <= j0:
                continue
            a = x[:, i0:i1, j0:j1]
            b = x[:, i0 + di:i1 + di, j0 + dj:j1 + dj]
            delta = np.sqrt(((a - b) ** 2).sum(axis=0)) / 3.0
            c = gaussian_weight(di, dj, cfg.sigma) * eta_np(np.clip(delta, cfg.eps, 1 - cfg.eps), cfg.mu)
            rows.append(ids[i0:i1, j0:j1].ravel())
            cols.append(ids[i0 + di:i1 + di, j0 + dj:j1 + dj].ravel())
            vals.append(c.ravel())
    n = h * w
    if rows:
        first, second, coef = np.concatenate(rows), np.concatenate(cols), np.concatenate(vals)
    else:
        first = second = np.zeros(0, dtype=np.intp)
        coef = np.zeros(0)
    weights = sp.coo_matrix((coef, (first, second)), shape=(n, n)).tocsr()
    weights = weights + weights.T
    degree = np.asarray(weights.sum(axis=1)).ravel()
    return PairGraph(first, second, coef, (sp.diags(degree) - weights).tocsr(), (h, w))


def fsl_loss(image: Tensor, cam: Tensor, cfg: LossConfig, affinity: PairGraph | None = None) -> Tensor:
    """Colour-guided pairwise smoothness/contrast loss on a spatially aligned CAM.

    The image is treated as a constant.  A precomputed ``affinity`` from
    :func:`fsl_affinity` may be passed to skip rebuilding it.
    """
    cam = cam.cam if isinstance(cam, LabeledCam) else cam
    if cam.ndim != 3 or image.shape[-2:] != cam.shape[-2:]:
        raise ShapeError(f"image {list(image.shape)} and cam {list(cam.shape)} are not spatially aligned")
    graph = fsl_affinity(image, cfg) if affinity is None else affinity
    k, h, w = cam.shape
    if graph.shape != (h, w):
        raise ShapeError(f"pair graph built for {graph.shape}, cam is {h}x{w}")
    s = cam.data.reshape(k, h * w)
    diff = s[:, graph.first] - s[:, graph.second]
    # ordered pairs count each unordered pair twice, which cancels g's 1/2
    scale = -1.0 / (h * w)
    value = scale * float(np.sum(graph.coef * np.sum(diff * diff, axis=0)))

    def vjp(g):
        ls = graph.laplacian @ s.T
        return (g * scale * 2.0 * ls.T.reshape(k, h, w),)

    return ag.custom("fsl", np.array(value), (cam,), vjp)


def edge_weight(cfg: LossConfig, epoch: int, total_epochs: int) -> float:
    """w_edge after warmup, 0 during the first ``warmup_fraction`` of epochs."""
    return 0.0 if epoch < math.floor(cfg.warmup_fraction * total_epochs) else cfg.w_edge


def combine_losses(base: Tensor, edge: Tensor | None = None, is_: Tensor | None = None,
                   fs: Tensor | None = None, cfg: LossConfig | None = None,
                   epoch: int = 0, total_epochs: int = 1) -> Tensor:
    """Weighted training objective with the edge-loss warmup schedule."""
    cfg = cfg or LossConfig()
    if not 0 <= epoch < total_epochs:
        raise ValueError(f"epoch {epoch} outside [0, {total_epochs})")
    total = base
    if is_ is not None:
        total = ag.add(ag.mul(total, 1.0 - cfg.w_is), ag.mul(is_, cfg.w_is * cfg.aux_scale))
    if fs is not None:
        total = ag.add(total, ag.mul(fs, cfg.w_fs * cfg.aux_scale))
    if edge is not None:
        we = edge_weight(cfg, epoch, total_epochs)
        if we != 0.0:
            total = ag.add(total, ag.mul(edge, we))
    return total


def average_heads(*losses: Tensor) -> Tensor:
    """Mean over several CAM heads (e.g. fine and coarse) of one loss."""
    if not losses:
        raise ValueError("need at least one loss")
    acc = losses[0]
    for x in losses[1:]:
        acc = ag.add(acc, x)
    return ag.mul(acc, 1.0 / len(losses))
