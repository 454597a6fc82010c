"""Randomised finite-difference audits of every loss and of the full objective."""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .dataio import Scene, SynthConfig, generate_scene
from .losses import LabeledCam, LossConfig, deal_loss, fsl_affinity, fsl_loss, isl_loss, mlsm_loss
from .trainer import SampleCache, TrainConfig, ToyModel, batch_objective

LOSSES = ("deal", "fsl", "mlsm", "isl", "total")


@dataclass
class AuditReport:
    loss: str
    trials: int
    worst: float
    passed: bool
    tolerance: float


def _random_cam(rng: np.random.Generator, k: int, h: int, w: int) -> np.ndarray:
    # keep away from the [0, 1] clamp so finite differences stay one-sided-smooth
    return rng.uniform(0.02, 0.98, size=(k, h, w))


def _random_labels(rng: np.random.Generator, k: int) -> np.ndarray:
    y = (rng.random(k) < 0.6).astype(float)
    if not y.any():
        y[rng.integers(k)] = 1.0
    return y


def instance_check(name: str, rng: np.random.Generator, cfg: LossConfig, step: float, tolerance: float,
                   size: int = 8, coords: int = 24) -> ag.GradCheckReport:
    """One random 8x8 instance with K <= 3 classes."""
    k = int(rng.integers(1, 4))
    if name == "deal":
        depth = Tensor(rng.uniform(0.5, 3.0, size=(1, size, size)))
        y = _random_labels(rng, k)
        return ag.finite_diff_check(lambda t: deal_loss(LabeledCam(t, y), depth, cfg),
                                    _random_cam(rng, k, size, size), step, tolerance)
    if name == "fsl":
        img = Tensor(rng.random((3, size, size)))
        graph = fsl_affinity(img, cfg)
        return ag.finite_diff_check(lambda t: fsl_loss(img, t, cfg, affinity=graph), _random_cam(rng, k, size, size),
                                    step, tolerance)
    if name == "mlsm":
        y = (rng.random(k) < 0.5).astype(float)
        return ag.finite_diff_check(lambda t: mlsm_loss(t, y), rng.normal(0, 3, size=k), step, tolerance)
    if name == "isl":
        y = _random_labels(rng, k)
        seed = int(rng.integers(2**31))
        return ag.finite_diff_check(lambda t: isl_loss(LabeledCam(t, y), cfg, np.random.default_rng(seed)),
                                    _random_cam(rng, k, size, size), step, tolerance)
    if name == "total":
        return total_check(rng, k, cfg, step, tolerance, size=size, coords=coords)
    raise ValueError(f"unknown loss {name!r}")


def tiny_batch(rng: np.random.Generator, k: int, size: int = 16, n: int = 2) -> list[Scene]:
    synth = SynthConfig(image_size=max(size, 16), num_classes=k, min_objects=1, max_objects=min(k, 2))
    scenes = []
    for _ in range(n):
        s = generate_scene(synth, rng)
        if size < synth.image_size:
            step = synth.image_size // size
            s = Scene(s.rgb[:, ::step, ::step][:, :size, :size].copy(), s.depth[:, ::step, ::step][:, :size, :size].copy(),
                      s.gt_mask[::step, ::step][:size, :size].copy(), s.labels)
        scenes.append(s)
    return scenes


def total_check(rng: np.random.Generator, k: int, cfg: LossConfig, step: float, tolerance: float,
                size: int = 8, coords: int | None = 24, toggles=(True, True, True)) -> ag.GradCheckReport:
    """Full objective (model + every enabled loss) against finite differences.

    ``coords`` random parameter coordinates are probed per tensor (all of
    them when None).
    """
    deal, isl, fsl = toggles
    tc = TrainConfig(epochs=3, deal=deal, isl=isl, fsl=fsl, loss=replace(cfg, warmup_fraction=0.0),
                     seed=int(rng.integers(2**31)))
    model = ToyModel(k, tc.widths, seed=tc.seed)
    for name, p in model.params.items():
        if name.startswith("b"):
            # nonzero biases so every path carries signal
            model.params[name] = Tensor(rng.normal(0, 0.1, size=p.shape), requires_grad=True)
    scenes = tiny_batch(rng, k, size)
    isl_seed = int(rng.integers(2**31))
    cache = SampleCache(tc.loss)
    worst = 0.0
    excluded: list[int] = []
    checked = 0
    for name in list(model.params):
        base = model.params[name].data.copy()
        idx = None if coords is None else rng.choice(base.size, size=min(coords, base.size), replace=False)

        def f(t: Tensor, name=name) -> Tensor:
            saved = model.params[name]
            model.params[name] = t
            try:
                total, _ = batch_objective(model, scenes, tc, 1, np.random.default_rng(isl_seed), cache)
            finally:
                model.params[name] = saved
            return total

        rep = ag.finite_diff_check(f, base, step, tolerance, indices=idx)
        worst = max(worst, rep.max_rel_error)
        excluded += rep.excluded
        checked += rep.n_checked
    return ag.GradCheckReport(worst, worst < tolerance, checked, excluded)


def run_gradcheck(name: str, trials: int, tolerance: float, seed: int = 0, cfg: LossConfig | None = None,
                  step: float = 1e-5, size: int = 8) -> AuditReport:
    cfg = cfg or LossConfig()
    cfg = replace(cfg, align_h=cfg.align_h or size, align_w=cfg.align_w or size)
    rng = np.random.default_rng(np.random.SeedSequence([seed, LOSSES.index(name)]))
    worst = 0.0
    for _ in range(trials):
        rep = instance_check(name, rng, cfg, step, tolerance, size=size)
        worst = max(worst, rep.max_rel_error)
    return AuditReport(name, trials, worst, worst < tolerance, tolerance)
