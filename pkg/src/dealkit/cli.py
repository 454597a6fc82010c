"""Command line entry point: ``dealkit {synth,loss,gradcheck,train,eval}``.

Exit codes: 0 ok, 1 verification failure, 2 usage/format, 3 I/O, 4 numerical abort.
"""
from __future__ import annotations

import argparse
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .autograd import DomainError, ShapeError, Tensor
from .config import ConfigError, load_config
from .dataio import (FormatError, generate_dataset, load_split, read_cam_pfm, read_pfm, read_ppm,
                     write_cam_pfm, write_pfm)
from .evaluation import ConfusionMatrix, EvalReport, accumulate, miou, threshold_sweep
from .gradcheck import LOSSES, run_gradcheck
from .losses import LabeledCam, deal_parts, fsl_loss, isl_loss, mlsm_loss
from .trainer import TrainingAborted, run_experiment, variant_config

EXIT_OK, EXIT_VERIFY, EXIT_USAGE, EXIT_IO, EXIT_NUMERIC = 0, 1, 2, 3, 4


class UsageError(Exception):
    pass


def _parse_int_list(text: str, what: str) -> list[int]:
    text = text.strip()
    if not text:
        return []
    try:
        return [int(v) for v in text.split(",")]
    except ValueError:
        raise UsageError(f"bad {what} list {text!r}") from None


# config flags shared by several commands: flag -> config key
LOSS_FLAGS = {
    "--mu": ("mu", float), "--sigma": ("sigma", float), "--n-is": ("n_is", int), "--eps": ("eps", float),
    "--w-edge": ("w_edge", float), "--align-h": ("align_h", int), "--align-w": ("align_w", int),
    "--fsl-radius": ("fsl_radius", int), "--warmup-fraction": ("warmup_fraction", float),
}
SYNTH_FLAGS = {
    "--image-size": ("image_size", int), "--num-classes": ("num_classes", int),
    "--min-objects": ("min_objects", int), "--max-objects": ("max_objects", int),
    "--depth-noise-std": ("depth_noise_std", float), "--color-jitter": ("color_jitter", float),
    "--n-train": ("n_train", int), "--n-val": ("n_val", int),
}
TRAIN_FLAGS = {"--epochs": ("epochs", int), "--batch-size": ("batch_size", int), "--lr": ("lr", float)}


def _add_flags(p: argparse.ArgumentParser, table: dict) -> None:
    for flag, (key, typ) in table.items():
        p.add_argument(flag, dest=key, type=typ, default=None)


def _overrides(args, *tables) -> dict:
    return {key: getattr(args, key) for t in tables for key, _ in t.values()}


def _load(args, *tables):
    return load_config(getattr(args, "config", None), _overrides(args, *tables))


# ---------------------------------------------------------------------------

def cmd_synth(args) -> int:
    overrides = _overrides(args, SYNTH_FLAGS)
    if args.seed is not None:
        overrides["seed"] = args.seed
    cfg = load_config(args.config, overrides)
    n_train, n_val = cfg.paths.n_train, cfg.paths.n_val
    if n_train < 0 or n_val < 0 or n_train + n_val == 0:
        raise UsageError("dataset must contain at least one sample")
    out = args.out or cfg.paths.out_dir or cfg.paths.data_dir
    if not out:
        raise UsageError("--out is required")
    manifest = generate_dataset(cfg.synth, n_train, n_val, out)
    print(f"manifest = {manifest}")
    print(f"train = {n_train}")
    print(f"val = {n_val}")
    return EXIT_OK


def _read_input(path: str, reader, *a):
    try:
        return reader(path, *a)
    except FormatError as exc:
        msg = str(exc)
        raise UsageError(msg if msg.startswith(str(path)) else f"{path}: {msg}") from None


def cmd_loss(args) -> int:
    cfg = _load(args, LOSS_FLAGS).loss
    depth = _read_input(args.depth, read_pfm) if args.depth else None
    image = _read_input(args.image, read_ppm) if args.image else None
    if image is not None and image.ndim != 3:
        raise UsageError(f"{args.image}: expected an RGB (P6) image")
    height = args.cam_height or (depth.shape[1] if depth is not None else image.shape[1] if image is not None else None)
    cam = _read_input(args.cam, read_cam_pfm, height) if args.cam else None
    labels = None
    if args.labels is not None:
        k = cam.shape[0] if cam is not None else len(args.logits.split(",")) if args.logits else None
        if k is None:
            raise UsageError("--labels needs --cam or --logits to know the class count")
        idx = _parse_int_list(args.labels, "label")
        if any(not 0 <= i < k for i in idx):
            raise UsageError(f"label index outside 0..{k - 1} in {args.labels!r}")
        labels = np.zeros(k)
        labels[idx] = 1.0

    def need(value, flag):
        if value is None:
            raise UsageError(f"--loss {args.loss} requires {flag}")
        return value

    try:
        if args.loss == "deal":
            cam_t, depth_t, y = need(cam, "--cam"), need(depth, "--depth"), need(labels, "--labels")
            try:
                labeled = LabeledCam(Tensor(cam_t), y)
            except (DomainError, ShapeError) as exc:
                raise UsageError(f"{args.cam}: {exc}") from None
            parts = deal_parts(labeled, Tensor(depth_t), cfg)
            value = parts.loss.item()
            if args.dump:
                d = Path(args.dump)
                d.mkdir(parents=True, exist_ok=True)
                write_pfm(d / "d_prime.pfm", parts.depth_edges.data)
                if parts.cam_edges is not None:
                    write_cam_pfm(d / "a_prime.pfm", parts.cam_edges.data)
                    write_pfm(d / "alignment.pfm", parts.alignment.data[None])
        elif args.loss == "fsl":
            cam_t, img = need(cam, "--cam"), need(image, "--image")
            if cam_t.shape[-2:] != img.shape[-2:]:
                raise UsageError(f"{args.cam}: cam {cam_t.shape[-2:]} and image {img.shape[-2:]} differ in size")
            value = fsl_loss(Tensor(img), Tensor(cam_t), cfg).item()
        elif args.loss == "isl":
            if args.seed is None:
                raise UsageError("--loss isl is stochastic and needs --seed")
            labeled = LabeledCam(Tensor(need(cam, "--cam")), need(labels, "--labels"))
            value = isl_loss(labeled, cfg, np.random.default_rng(args.seed)).item()
        else:
            if args.logits:
                try:
                    logits = np.array([float(v) for v in args.logits.split(",")])
                except ValueError:
                    raise UsageError(f"bad --logits {args.logits!r}") from None
            else:
                logits = need(cam, "--cam or --logits").mean(axis=(1, 2))
            value = mlsm_loss(Tensor(logits), need(labels, "--labels")).item()
    except (DomainError, ShapeError) as exc:
        raise UsageError(str(exc)) from None
    print(f"loss = {value:.12g}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    if args.trials < 1:
        raise UsageError("--trials must be >= 1")
    cfg = _load(args, LOSS_FLAGS).loss
    ok = True
    for name in (LOSSES if args.loss == "all" else [args.loss]):
        rep = run_gradcheck(name, args.trials, args.tolerance, args.seed, cfg, step=args.step)
        status = "pass" if rep.passed else "FAIL"
        print(f"{name}: trials = {rep.trials} worst_rel_error = {rep.worst:.3e} tolerance = {args.tolerance:g} {status}")
        ok &= rep.passed
    return EXIT_OK if ok else EXIT_VERIFY


def cmd_train(args) -> int:
    cfg = _load(args, LOSS_FLAGS, TRAIN_FLAGS)
    data = args.data or cfg.paths.data_dir
    out = Path(args.out or cfg.paths.out_dir or "runs")
    if not data:
        raise UsageError("--data (or data_dir in the config) is required")
    seeds = _parse_int_list(args.seeds, "seed")
    if not seeds:
        raise UsageError("--seeds must list at least one seed")
    variants = [v.strip() for v in args.variant.split(",") if v.strip()]
    try:
        configs = {v: variant_config(v, cfg.train_config()) for v in variants}
    except KeyError as exc:
        raise UsageError(str(exc.args[0])) from None
    if not (Path(data) / "manifest.txt").exists():
        raise OSError(f"no dataset at {data} (manifest.txt missing)")
    train = [s for _, s in load_split(data, "train")]
    val = [s for _, s in load_split(data, "val")]
    if not train or not val:
        raise UsageError(f"{data}: both train and val splits must be non-empty")
    out.mkdir(parents=True, exist_ok=True)
    (out / "run.cfg").write_text(replace(cfg, paths=replace(cfg.paths, data_dir=str(data), out_dir=str(out))).to_text())

    with open(out / "epochs.log", "w") as logf:
        def log(line: str) -> None:
            logf.write(line + "\n")
            logf.flush()
            if args.verbose:
                print(line, file=sys.stderr)

        def save(run) -> None:
            np.savez(out / f"best_{run.variant}_seed{run.seed}.npz", **run.state)

        try:
            comparison = run_experiment(train, val, configs, seeds, log=log, on_run=save)
        except TrainingAborted as exc:
            print(f"training aborted: {exc}", file=sys.stderr)
            print(" ".join(f"{k}={v}" for k, v in exc.components.items()), file=sys.stderr)
            return EXIT_NUMERIC
    table = comparison.table()
    (out / "table.txt").write_text(table)
    (out / "table.kv").write_text(comparison.records())
    print(table, end="")
    return EXIT_OK


def _sample_ids(root: Path) -> dict[str, Path]:
    """Map sample id -> path for ``<id>/`` sub-directories or ``<id>.pfm|.ppm`` files."""
    found: dict[str, Path] = {}
    for p in sorted(root.iterdir()):
        if p.is_dir():
            found[p.name] = p
        elif p.suffix in (".pfm", ".ppm", ".pgm"):
            found[p.stem] = p
    return found


def _load_mask(p: Path) -> np.ndarray:
    if p.is_dir():
        for name in ("gt_mask.ppm", "mask.ppm", "pred.ppm"):
            if (p / name).exists():
                p = p / name
                break
        else:
            raise FormatError(f"{p}: no mask file")
    m = _read_input(str(p), read_ppm)
    if m.ndim != 2:
        raise UsageError(f"{p}: expected a single-channel (P5) mask")
    return m


def _load_pred(p: Path, height: int):
    """Either ('cam', K x H x W) or ('mask', H x W)."""
    cam_file = p / "cam.pfm" if p.is_dir() else p if p.suffix == ".pfm" else None
    if cam_file is not None and cam_file.exists():
        return "cam", _read_input(str(cam_file), read_cam_pfm, height)
    return "mask", _load_mask(p)


def cmd_eval(args) -> int:
    pred_root, gt_root = Path(args.pred), Path(args.gt)
    for root in (pred_root, gt_root):
        if not root.is_dir():
            raise OSError(f"{root} is not a directory")
    preds, gts = _sample_ids(pred_root), _sample_ids(gt_root)
    if set(preds) != set(gts):
        missing = sorted(set(gts) ^ set(preds))
        raise UsageError(f"sample ids differ between --pred and --gt: {', '.join(missing[:5])}")
    ids = sorted(gts)
    if not ids:
        raise UsageError("no samples found")
    gt_masks = [_load_mask(gts[i]) for i in ids]
    loaded = [_load_pred(preds[i], g.shape[0]) for i, g in zip(ids, gt_masks)]
    kinds = {k for k, _ in loaded}
    if len(kinds) > 1:
        raise UsageError("--pred mixes CAM and mask files")
    if kinds == {"mask"}:
        k = max(int(max(g.max(), m.max())) for g, (_, m) in zip(gt_masks, loaded))
        k = max(k, args.num_classes or 0)
        conf = ConfusionMatrix(k)
        for g, (_, m) in zip(gt_masks, loaded):
            if m.shape != g.shape:
                raise UsageError(f"prediction and ground truth differ in shape: {m.shape} vs {g.shape}")
            conf = accumulate(conf, m, g)
        report = miou(conf)
        report.n_samples = len(ids)
    else:
        cams = [c for _, c in loaded]
        k = cams[0].shape[0]
        # image-level labels are the classes present in the ground truth
        labels = None if args.no_label_mask else [
            np.array([(g == c + 1).any() for c in range(k)], dtype=float) for g in gt_masks]
        taus = None if args.sweep else [args.tau]
        report = threshold_sweep(cams, gt_masks, taus, labels=labels)
    _print_report(report, sweep=args.sweep)
    return EXIT_OK


def _print_report(report: EvalReport, sweep: bool) -> None:
    for line in report.lines():
        if line.startswith("threshold") and np.isnan(report.threshold):
            continue
        print(line)


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dealkit", description="Depth edge alignment loss toolkit")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate a synthetic RGB-D dataset")
    s.add_argument("--config")
    s.add_argument("--out")
    s.add_argument("--seed", type=int)
    _add_flags(s, SYNTH_FLAGS)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("loss", help="evaluate one loss on files")
    s.add_argument("--loss", required=True, choices=["deal", "isl", "fsl", "mlsm"])
    s.add_argument("--cam", help="PFM with K planes stacked vertically")
    s.add_argument("--cam-height", type=int, help="plane height when no depth/image is given")
    s.add_argument("--depth")
    s.add_argument("--image")
    s.add_argument("--labels", help='present class indices, e.g. "0,3"')
    s.add_argument("--logits", help="comma-separated logits for mlsm")
    s.add_argument("--seed", type=int)
    s.add_argument("--dump", help="directory for a', d' and alignment PFMs")
    s.add_argument("--config")
    _add_flags(s, LOSS_FLAGS)
    s.set_defaults(func=cmd_loss)

    s = sub.add_parser("gradcheck", help="audit autodiff against finite differences")
    s.add_argument("--loss", required=True, choices=[*LOSSES, "all"])
    s.add_argument("--trials", type=int, default=20)
    s.add_argument("--tolerance", type=float, default=1e-5)
    s.add_argument("--step", type=float, default=1e-5)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--config")
    _add_flags(s, LOSS_FLAGS)
    s.set_defaults(func=cmd_gradcheck)

    s = sub.add_parser("train", help="train variants over seeds and compare")
    s.add_argument("--config")
    s.add_argument("--data")
    s.add_argument("--variant", default="baseline", help="comma-separated: baseline, deal, isl-fsl, deal-isl-fsl")
    s.add_argument("--seeds", default="0")
    s.add_argument("--out")
    s.add_argument("-v", "--verbose", action="store_true")
    _add_flags(s, LOSS_FLAGS)
    _add_flags(s, TRAIN_FLAGS)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", help="mIoU of CAMs or masks against ground truth")
    s.add_argument("--pred", required=True)
    s.add_argument("--gt", required=True)
    mode = s.add_mutually_exclusive_group()
    mode.add_argument("--sweep", action="store_true")
    mode.add_argument("--tau", type=float, default=0.5)
    s.add_argument("--num-classes", type=int)
    s.add_argument("--no-label-mask", action="store_true", help="keep CAM channels of absent classes")
    s.set_defaults(func=cmd_eval)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0) and EXIT_USAGE
    try:
        return args.func(args)
    except (UsageError, ConfigError, FormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
