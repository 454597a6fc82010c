"""A small CAM classifier and the training / comparison loop around it."""
from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .dataio import Scene
from .evaluation import EvalReport, SeedSummary, aggregate_seeds, threshold_sweep
from .imageops import bicubic_resize
from .losses import (LabeledCam, LossConfig, combine_losses, deal_parts, edge_activation, edge_weight,
                     fsl_affinity, fsl_loss, isl_loss, mlsm_loss)

logger = logging.getLogger(__name__)

CAM_EPS = 1e-12
# final-epoch train mIoU this far below the run's best marks a degraded run
DEGRADE_GAP = 0.05


class TrainingAborted(RuntimeError):
    """Raised when a loss turns non-finite; carries the last component values."""

    def __init__(self, message: str, components: dict[str, float]):
        super().__init__(message)
        self.components = components


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 8
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    deal: bool = False
    isl: bool = False
    fsl: bool = False
    loss: LossConfig = field(default_factory=LossConfig)
    seed: int = 0
    widths: tuple[int, int] = (8, 16)

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if self.lr <= 0:
            raise ValueError(f"lr must be > 0, got {self.lr}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")


VARIANTS = {
    "baseline": dict(deal=False, isl=False, fsl=False),
    "deal": dict(deal=True, isl=False, fsl=False),
    "isl-fsl": dict(deal=False, isl=True, fsl=True),
    "deal-isl-fsl": dict(deal=True, isl=True, fsl=True),
}


class ToyModel:
    """Three 3x3 conv stages (widths ``[w1, w2, K]``), ReLU between them."""

    def __init__(self, num_classes: int, widths: Sequence[int] = (8, 16), seed: int = 0, in_channels: int = 3):
        rng = np.random.default_rng(seed)
        chans = [in_channels, *widths, num_classes]
        self.num_classes = num_classes
        self.params: dict[str, Tensor] = {}
        for i, (cin, cout) in enumerate(zip(chans[:-1], chans[1:])):
            std = math.sqrt(2.0 / (cin * 9))
            self.params[f"w{i}"] = Tensor(rng.normal(0.0, std, size=(cout, cin, 3, 3)), requires_grad=True)
            self.params[f"b{i}"] = Tensor(np.zeros(cout), requires_grad=True)

    @property
    def n_layers(self) -> int:
        return len(self.params) // 2

    def state(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        for k, v in state.items():
            self.params[k] = Tensor(v, requires_grad=True)


def normalize_cam(raw: Tensor) -> Tensor:
    """relu(raw) divided by its per-channel spatial max; flat channels -> 0."""
    r = ag.relu(raw)
    peak = ag.amax(r, axes=(-2, -1), keepdims=True)
    dead = peak.data < CAM_EPS
    cam = ag.div(r, ag.add(peak, Tensor(dead.astype(np.float64))))
    if dead.any():
        cam = ag.mul(cam, Tensor((~dead).astype(np.float64)))
    return cam


def forward_cam(model: ToyModel, x, track: bool = True) -> tuple[Tensor, Tensor]:
    """CAMs in [0, 1] and GAP logits; accepts 3xHxW or Nx3xHxW input."""
    x = x if isinstance(x, Tensor) else Tensor(x)
    single = x.ndim == 3
    if single:
        x = ag.reshape(x, (1,) + x.shape)
    if x.shape[-1] < 8 or x.shape[-2] < 8:
        raise ag.ShapeError(f"input must be at least 8x8, got {list(x.shape)}")
    params = model.params if track else {k: Tensor(v.data) for k, v in model.params.items()}
    for k, p in params.items():
        if not np.all(np.isfinite(p.data)):
            raise ValueError(f"parameter {k} is not finite")
    h = x
    for i in range(model.n_layers):
        h = ag.conv2d(h, params[f"w{i}"], params[f"b{i}"])
        if i < model.n_layers - 1:
            h = ag.relu(h)
    logits = ag.mean(h, axes=(-2, -1))
    cam = normalize_cam(h)
    if single:
        cam = ag.reshape(cam, cam.shape[1:])
        logits = ag.reshape(logits, logits.shape[1:])
    return cam, logits


class Adam:
    def __init__(self, params: dict[str, Tensor], lr: float, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = {k: np.zeros(v.shape) for k, v in params.items()}
        self.v = {k: np.zeros(v.shape) for k, v in params.items()}
        self.t = 0

    def step(self, model: ToyModel, grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        c1 = 1 - self.beta1 ** self.t
        c2 = 1 - self.beta2 ** self.t
        for k, p in model.params.items():
            g = grads[k]
            self.m[k] = self.beta1 * self.m[k] + (1 - self.beta1) * g
            self.v[k] = self.beta2 * self.v[k] + (1 - self.beta2) * g * g
            update = self.lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)
            model.params[k] = Tensor(p.data - update, requires_grad=True)


class SampleCache:
    """Per-sample constants that do not depend on the model: d' and the FSL graph."""

    def __init__(self, cfg: LossConfig):
        self.cfg = cfg
        self._depth: dict[int, Tensor] = {}
        self._affinity: dict[int, object] = {}
        self._image: dict[int, Tensor] = {}

    def depth_edges(self, key: int, scene: Scene) -> Tensor:
        if key not in self._depth:
            from .imageops import minmax_normalize
            ah, aw = self.cfg.align_size(*scene.depth.shape[-2:])
            self._depth[key] = edge_activation(bicubic_resize(minmax_normalize(Tensor(scene.depth)), ah, aw), self.cfg)
        return self._depth[key]

    def fsl_inputs(self, key: int, scene: Scene):
        if key not in self._affinity:
            ah, aw = self.cfg.align_size(*scene.rgb.shape[-2:])
            img = bicubic_resize(Tensor(scene.rgb), ah, aw)
            img = Tensor(np.clip(img.data, 0.0, 1.0))
            self._image[key] = img
            self._affinity[key] = fsl_affinity(img, self.cfg)
        return self._image[key], self._affinity[key]


@dataclass
class StepReport:
    total: float
    components: dict[str, float]
    edge_weight: float


def sample_losses(cam: Tensor, logits: Tensor, scene: Scene, cfg: TrainConfig, rng: np.random.Generator,
                  cache: SampleCache | None = None, key: int = 0) -> dict[str, Tensor]:
    """Every enabled loss term of one sample (cam K x H x W, logits K)."""
    lc = cfg.loss
    cache = cache or SampleCache(lc)
    out = {"base": mlsm_loss(logits, scene.labels)}
    labeled = None
    if cfg.deal or cfg.isl:
        labeled = LabeledCam(cam, scene.labels)
    if cfg.deal:
        out["deal"] = deal_parts(labeled, Tensor(scene.depth), lc, depth_edges=cache.depth_edges(key, scene)).loss
    if cfg.isl:
        out["isl"] = isl_loss(labeled, lc, rng)
    if cfg.fsl:
        img, aff = cache.fsl_inputs(key, scene)
        small = ag.clamp(bicubic_resize(cam, *img.shape[-2:]), 0.0, 1.0)
        out["fsl"] = fsl_loss(img, small, lc, affinity=aff)
    return out


def batch_objective(model: ToyModel, scenes: Sequence[Scene], cfg: TrainConfig, epoch: int,
                    rng: np.random.Generator, cache: SampleCache | None = None,
                    keys: Sequence[int] | None = None) -> tuple[Tensor, dict[str, float]]:
    """Combined objective averaged over the batch, plus mean component values."""
    keys = list(range(len(scenes))) if keys is None else list(keys)
    x = Tensor(np.stack([s.rgb for s in scenes]))
    cams, logits = forward_cam(model, x)
    totals = []
    sums: dict[str, float] = {}
    for i, scene in enumerate(scenes):
        try:
            parts = sample_losses(cams[i], logits[i], scene, cfg, rng, cache, keys[i])
        except ag.DomainError as err:
            # non-finite network outputs; report what the batch produced so far
            done = {k: v / max(i, 1) for k, v in sums.items()}
            raise TrainingAborted(f"loss undefined at epoch {epoch}, batch sample {i}: {err}", done) from err
        for name, value in parts.items():
            sums[name] = sums.get(name, 0.0) + value.item()
        totals.append(combine_losses(parts["base"], parts.get("deal"), parts.get("isl"), parts.get("fsl"),
                                     cfg.loss, epoch, cfg.epochs))
    total = ag.mean(ag.stack(totals))
    return total, {k: v / len(scenes) for k, v in sums.items()}


def train_step(model: ToyModel, opt: Adam, scenes: Sequence[Scene], cfg: TrainConfig, epoch: int,
               rng: np.random.Generator, cache: SampleCache | None = None,
               keys: Sequence[int] | None = None) -> StepReport:
    if not scenes:
        raise ValueError("empty batch")
    total, comps = batch_objective(model, scenes, cfg, epoch, rng, cache, keys)
    if not np.isfinite(total.item()) or not all(np.isfinite(v) for v in comps.values()):
        raise TrainingAborted(f"non-finite loss at epoch {epoch}: {comps}", comps)
    ag.backward(total)
    grads = {k: p.grad for k, p in model.params.items()}
    opt.step(model, grads)
    return StepReport(total=total.item(), components=comps,
                      edge_weight=edge_weight(cfg.loss, epoch, cfg.epochs) if cfg.deal else 0.0)


def predict_cams(model: ToyModel, scenes: Sequence[Scene], batch: int = 32) -> list[np.ndarray]:
    out = []
    for i in range(0, len(scenes), batch):
        x = Tensor(np.stack([s.rgb for s in scenes[i:i + batch]]))
        cams, _ = forward_cam(model, x, track=False)
        out.extend(cams.data)
    return out


def evaluate(model: ToyModel, scenes: Sequence[Scene], taus=None) -> EvalReport:
    """Best-threshold mIoU of label-masked CAMs over a split."""
    cams = predict_cams(model, scenes)
    return threshold_sweep(cams, [s.gt_mask for s in scenes], taus, labels=[s.labels for s in scenes])


def cam_diagnostics(model: ToyModel, scenes: Sequence[Scene]) -> dict[str, float]:
    """Collapse indicators: share of present-class CAM peaks on the image border and mean coverage."""
    cams = predict_cams(model, scenes)
    border = total = 0
    coverage = []
    for cam, s in zip(cams, scenes):
        h, w = cam.shape[-2:]
        for k in np.flatnonzero(s.labels):
            ch = cam[k]
            total += 1
            if ch.max() < CAM_EPS:
                border += 1
                continue
            i, j = np.unravel_index(int(ch.argmax()), ch.shape)
            border += int(i < 2 or j < 2 or i >= h - 2 or j >= w - 2)
            coverage.append(float((ch >= 0.5).mean()))
    return {"border_peak_fraction": border / max(total, 1), "coverage": float(np.mean(coverage)) if coverage else 0.0}


@dataclass
class RunResult:
    variant: str
    seed: int
    best_epoch: int
    train: EvalReport
    val: EvalReport
    history: list[dict[str, float]]
    state: dict[str, np.ndarray]
    diagnostics: dict[str, float]

    @property
    def collapsed(self) -> bool:
        return self.diagnostics.get("border_peak_fraction", 0.0) > 0.5

    @property
    def degraded(self) -> bool:
        """Training drifted away from its best checkpoint (e.g. an overweighted auxiliary loss)."""
        return bool(self.history) and self.history[-1]["train_miou"] < self.train.miou - DEGRADE_GAP


def train_run(train: Sequence[Scene], val: Sequence[Scene], cfg: TrainConfig, variant: str = "run",
              log: Callable[[str], None] | None = None, taus=None) -> RunResult:
    """Train one model; keep the epoch with the best train-split mIoU."""
    k = len(train[0].labels)
    model = ToyModel(k, cfg.widths, seed=cfg.seed)
    opt = Adam(model.params, cfg.lr, cfg.beta1, cfg.beta2, cfg.adam_eps)
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 1]))
    cache = SampleCache(cfg.loss)
    history = []
    best = None
    for epoch in range(cfg.epochs):
        t0 = time.perf_counter()
        order = rng.permutation(len(train))
        comp_acc: dict[str, float] = {}
        total_acc = 0.0
        n_steps = 0
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            rep = train_step(model, opt, [train[i] for i in idx], cfg, epoch, rng, cache, keys=idx)
            total_acc += rep.total
            for name, v in rep.components.items():
                comp_acc[name] = comp_acc.get(name, 0.0) + v
            n_steps += 1
        tr = evaluate(model, train, taus)
        va = evaluate(model, val, taus)
        row = {"epoch": epoch, "loss": total_acc / n_steps,
               **{f"loss_{k}": v / n_steps for k, v in comp_acc.items()},
               "edge_weight": edge_weight(cfg.loss, epoch, cfg.epochs) if cfg.deal else 0.0,
               "train_miou": tr.miou, "train_tau": tr.threshold, "val_miou": va.miou, "val_tau": va.threshold}
        # wall-clock time stays out of the history so logs are reproducible byte for byte
        logger.debug("%s seed %d epoch %d took %.2fs", variant, cfg.seed, epoch, time.perf_counter() - t0)
        history.append(row)
        if log:
            log(" ".join(f"{k}={_fmt(v)}" for k, v in [("variant", variant), ("seed", cfg.seed), *row.items()]))
        if best is None or tr.miou > best[1].miou:
            best = (epoch, tr, va, model.state())
    epoch, tr, va, state = best
    final = ToyModel(k, cfg.widths, seed=cfg.seed)
    final.load_state(state)
    return RunResult(variant, cfg.seed, epoch, tr, va, history, state, cam_diagnostics(final, val))


def _fmt(v) -> str:
    if isinstance(v, float):
        return f"{v:.6g}"
    return str(v)


@dataclass
class VariantSummary:
    variant: str
    train: SeedSummary
    val: SeedSummary
    runs: list[RunResult]

    @property
    def collapsed(self) -> bool:
        return any(r.collapsed for r in self.runs)

    @property
    def degraded(self) -> bool:
        return any(r.degraded for r in self.runs)

    @property
    def flags(self) -> str:
        return ",".join(name for name, on in (("collapsed", self.collapsed), ("degraded", self.degraded)) if on)

    @property
    def deal_term(self) -> float | None:
        """Weighted DEAL contribution in the last epoch, averaged over seeds (None when DEAL is off)."""
        last = [r.history[-1] for r in self.runs if r.history and "loss_deal" in r.history[-1]]
        if not last:
            return None
        return float(np.mean([h["edge_weight"] * h["loss_deal"] for h in last]))


@dataclass
class Comparison:
    rows: list[VariantSummary]

    def row(self, variant: str) -> VariantSummary:
        for r in self.rows:
            if r.variant == variant:
                return r
        raise KeyError(variant)

    def table(self) -> str:
        """Aligned text table: mean mIoU per split, best seed, and delta to the first row."""
        base = self.rows[0]
        head = f"{'variant':<14} {'train':>8} {'val':>8} {'best_train':>10} {'best_val':>9} {'d_train':>8} {'d_val':>8} {'deal_term':>9}  flags"
        lines = [head, "-" * len(head)]
        for r in self.rows:
            lines.append(
                f"{r.variant:<14} {100 * r.train.mean_miou:8.3f} {100 * r.val.mean_miou:8.3f} "
                f"{100 * r.train.best_miou:10.3f} {100 * r.val.best_miou:9.3f} "
                f"{100 * (r.train.mean_miou - base.train.mean_miou):+8.3f} "
                f"{100 * (r.val.mean_miou - base.val.mean_miou):+8.3f} "
                f"{'-' if r.deal_term is None else format(r.deal_term, '.5f'):>9}  {r.flags}".rstrip())
        return "\n".join(lines) + "\n"

    def records(self) -> str:
        """Machine-readable companion of :meth:`table`, one ``key = value`` per line."""
        out = []
        for r in self.rows:
            p = r.variant
            out += [f"{p}.train_mean = {r.train.mean_miou:.6f}", f"{p}.val_mean = {r.val.mean_miou:.6f}",
                    f"{p}.train_best = {r.train.best_miou:.6f}", f"{p}.val_best = {r.val.best_miou:.6f}",
                    f"{p}.train_per_seed = {','.join(f'{v:.6f}' for v in r.train.per_seed)}",
                    f"{p}.val_per_seed = {','.join(f'{v:.6f}' for v in r.val.per_seed)}",
                    f"{p}.seeds = {','.join(str(x.seed) for x in r.runs)}",
                    f"{p}.deal_term = {'' if r.deal_term is None else format(r.deal_term, '.6f')}",
                    f"{p}.collapsed = {int(r.collapsed)}", f"{p}.degraded = {int(r.degraded)}"]
        return "\n".join(out) + "\n"


def run_experiment(train: Sequence[Scene], val: Sequence[Scene], variants: dict[str, TrainConfig],
                   seeds: Sequence[int], log: Callable[[str], None] | None = None,
                   on_run: Callable[[RunResult], None] | None = None) -> Comparison:
    """Train every (variant, seed) cell and aggregate per variant."""
    if not variants or not seeds:
        raise ValueError("need at least one variant and one seed")
    rows = []
    for name, base_cfg in variants.items():
        runs = []
        for seed in seeds:
            cfg = _with_seed(base_cfg, seed)
            res = train_run(train, val, cfg, name, log)
            if on_run:
                on_run(res)
            runs.append(res)
        rows.append(VariantSummary(name, aggregate_seeds([r.train for r in runs]),
                                   aggregate_seeds([r.val for r in runs]), runs))
    return Comparison(rows)


def _with_seed(cfg: TrainConfig, seed: int) -> TrainConfig:
    from dataclasses import replace
    return replace(cfg, seed=int(seed))


def variant_config(name: str, base: TrainConfig | None = None) -> TrainConfig:
    from dataclasses import replace
    if name not in VARIANTS:
        raise KeyError(f"unknown variant {name!r}; choose from {sorted(VARIANTS)}")
    return replace(base or TrainConfig(), **VARIANTS[name])
