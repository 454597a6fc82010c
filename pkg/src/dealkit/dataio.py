"""Synthetic RGB-D scenes and the PFM / PPM / label file formats."""
from __future__ import annotations

import logging
import os
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Iterable

import numpy as np

logger = logging.getLogger(__name__)

SHAPES = ("disc", "square", "triangle", "ring")
# one base colour per class; repeats with a shifted hue beyond four classes
PALETTE = np.array([
    [0.85, 0.25, 0.20],
    [0.20, 0.65, 0.30],
    [0.20, 0.35, 0.85],
    [0.90, 0.75, 0.15],
    [0.65, 0.25, 0.75],
    [0.15, 0.75, 0.80],
    [0.95, 0.50, 0.60],
    [0.50, 0.50, 0.20],
])

MAX_PLACEMENT_ATTEMPTS = 200


class FormatError(ValueError):
    """A file does not follow the expected raster or label format."""


@dataclass
class SynthConfig:
    image_size: int = 64
    num_classes: int = 4
    min_objects: int = 1
    max_objects: int = 3
    depth_noise_std: float = 0.0
    color_jitter: float = 0.05
    seed: int = 0

    def __post_init__(self):
        if self.image_size < 16:
            raise ValueError(f"image_size must be >= 16, got {self.image_size}")
        if self.num_classes < 1:
            raise ValueError(f"num_classes must be >= 1, got {self.num_classes}")
        if not 0 <= self.min_objects <= self.max_objects:
            raise ValueError(f"bad object range {self.min_objects}..{self.max_objects}")
        if self.depth_noise_std < 0 or self.color_jitter < 0:
            raise ValueError("noise and jitter must be non-negative")


@dataclass
class Scene:
    rgb: np.ndarray  # 3 x H x W, multiples of 1/255
    depth: np.ndarray  # 1 x H x W metres, float32-representable
    gt_mask: np.ndarray  # H x W ints, 0 = background, k + 1 = class k
    labels: np.ndarray  # K binary

    def __eq__(self, other):
        if not isinstance(other, Scene):
            return NotImplemented
        return all(np.array_equal(getattr(self, f.name), getattr(other, f.name)) for f in fields(self))


def class_color(k: int) -> np.ndarray:
    base = PALETTE[k % len(PALETTE)]
    if k >= len(PALETTE):
        base = np.roll(base, k // len(PALETTE))
    return base


def shape_mask(kind: str, cy: float, cx: float, radius: float, size: int) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    dy, dx = yy - cy, xx - cx
    if kind == "disc":
        return dy * dy + dx * dx <= radius * radius
    if kind == "square":
        half = radius * 0.85
        return (np.abs(dy) <= half) & (np.abs(dx) <= half)
    if kind == "triangle":
        # apex up, base at cy + radius/2
        top, bottom = cy - radius, cy + 0.6 * radius
        frac = np.clip((yy - top) / (bottom - top), 0, None)
        return (yy >= top) & (yy <= bottom) & (np.abs(dx) <= frac * radius)
    if kind == "ring":
        r2 = dy * dy + dx * dx
        return (r2 <= radius * radius) & (r2 >= (0.5 * radius) ** 2)
    raise ValueError(f"unknown shape {kind!r}")


def _background_rgb(rng: np.random.Generator, size: int) -> np.ndarray:
    # smooth two-colour gradient in a random direction, muted tones
    c0, c1 = rng.uniform(0.3, 0.7, size=(2, 3))
    angle = rng.uniform(0, 2 * np.pi)
    yy, xx = np.mgrid[0:size, 0:size] / (size - 1)
    t = np.clip(0.5 + (np.cos(angle) * (xx - 0.5) + np.sin(angle) * (yy - 0.5)), 0, 1)
    return c0[:, None, None] * (1 - t) + c1[:, None, None] * t


def generate_scene(cfg: SynthConfig, rng: np.random.Generator, n_objects: int | None = None) -> Scene:
    """Paint shapes at constant depth over a ramped background.

    Geometry, colour jitter and depth noise use independent sub-streams, so
    changing ``depth_noise_std`` or ``color_jitter`` never moves a pixel of
    the ground-truth mask.
    """
    geo_seed, color_seed, noise_seed = rng.integers(0, 2**63 - 1, size=3)
    geo = np.random.default_rng(geo_seed)
    col = np.random.default_rng(color_seed)
    noise = np.random.default_rng(noise_seed)
    size, k_classes = cfg.image_size, cfg.num_classes

    if n_objects is None:
        n_objects = int(geo.integers(cfg.min_objects, cfg.max_objects + 1))
    n_objects = min(n_objects, k_classes)
    depth = np.repeat(np.linspace(2.0, 3.0, size)[:, None], size, axis=1)[None].copy()
    rgb = _background_rgb(col, size)
    mask = np.zeros((size, size), dtype=np.int64)

    classes = geo.choice(k_classes, size=n_objects, replace=False) if n_objects else np.array([], dtype=int)
    min_pixels = max(12, size * size // 100)
    for attempt in range(MAX_PLACEMENT_ATTEMPTS):
        objs = []
        for k in classes:
            radius = geo.uniform(0.12, 0.22) * size
            cy, cx = geo.uniform(radius, size - radius, size=2)
            z = geo.uniform(0.5, 1.8)
            objs.append((int(k), shape_mask(SHAPES[int(k) % len(SHAPES)], cy, cx, radius, size), z))
        # far to near so the nearest object wins every pixel
        objs.sort(key=lambda o: -o[2])
        trial = np.zeros_like(mask)
        for k, m, _ in objs:
            trial[m] = k + 1
        if all((trial == k + 1).sum() >= min_pixels for k, _, _ in objs):
            break
    else:
        logger.warning("placement did not reach %d visible pixels per object after %d attempts",
                       min_pixels, MAX_PLACEMENT_ATTEMPTS)
    for k, m, z in objs:
        mask[m] = k + 1
        depth[0][m] = z
        rgb[:, m] = class_color(k)[:, None]

    if cfg.color_jitter > 0:
        rgb = rgb + col.normal(0.0, cfg.color_jitter, size=rgb.shape)
    if cfg.depth_noise_std > 0:
        depth = depth + noise.normal(0.0, cfg.depth_noise_std, size=depth.shape)
    rgb = np.round(np.clip(rgb, 0.0, 1.0) * 255.0) / 255.0
    depth = np.maximum(depth, 0.05).astype(np.float32).astype(np.float64)
    labels = np.array([(mask == k + 1).any() for k in range(k_classes)], dtype=np.int64)
    return Scene(rgb=rgb, depth=depth, gt_mask=mask, labels=labels)


# ---------------------------------------------------------------------------
# PFM

def write_pfm(path, t) -> None:
    """Write a 1 x H x W or 3 x H x W array as little-endian PFM."""
    arr = np.asarray(getattr(t, "data", t), dtype=np.float64)
    if arr.ndim == 2:
        arr = arr[None]
    if arr.ndim != 3 or arr.shape[0] not in (1, 3):
        raise FormatError(f"PFM holds 1 or 3 channels, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise FormatError("PFM writer received non-finite values")
    c, h, w = arr.shape
    magic = b"Pf" if c == 1 else b"PF"
    raster = np.transpose(arr, (1, 2, 0))[::-1].astype("<f4")
    with open(path, "wb") as fh:
        fh.write(magic + b"\n" + f"{w} {h}\n".encode() + b"-1.0\n")
        fh.write(raster.tobytes())


def _read_line(buf: bytes, pos: int) -> tuple[str, int]:
    end = buf.find(b"\n", pos)
    if end < 0:
        raise FormatError("truncated header")
    return buf[pos:end].decode("ascii", errors="replace").strip(), end + 1


def parse_pfm(buf: bytes) -> np.ndarray:
    magic, pos = _read_line(buf, 0)
    if magic not in ("Pf", "PF"):
        raise FormatError(f"not a PFM file (magic {magic[:8]!r})")
    dims, pos = _read_line(buf, pos)
    try:
        w, h = (int(v) for v in dims.split())
    except ValueError:
        raise FormatError(f"bad PFM dimensions line {dims!r}") from None
    if w < 1 or h < 1:
        raise FormatError(f"bad PFM dimensions {w}x{h}")
    scale_line, pos = _read_line(buf, pos)
    try:
        scale = float(scale_line)
    except ValueError:
        raise FormatError(f"bad PFM scale line {scale_line!r}") from None
    if scale == 0 or not np.isfinite(scale):
        raise FormatError(f"unsupported PFM endianness/scale {scale_line!r}")
    c = 1 if magic == "Pf" else 3
    n = w * h * c
    if len(buf) - pos < 4 * n:
        raise FormatError(f"truncated PFM raster: need {4 * n} bytes, have {len(buf) - pos}")
    dtype = "<f4" if scale < 0 else ">f4"
    raster = np.frombuffer(buf, dtype=dtype, count=n, offset=pos).reshape(h, w, c)
    return np.transpose(raster[::-1], (2, 0, 1)).astype(np.float64)


def read_pfm(path) -> np.ndarray:
    """Read a PFM file into a C x H x W float64 array."""
    return parse_pfm(Path(path).read_bytes())


# ---------------------------------------------------------------------------
# PPM (P6) / PGM (P5)

def write_ppm(path, arr, is_mask: bool | None = None) -> None:
    """Write RGB in [0, 1] (3 x H x W) as P6, or an integer H x W map as P5."""
    a = np.asarray(getattr(arr, "data", arr))
    if is_mask is None:
        is_mask = a.ndim == 2
    if is_mask:
        if a.ndim == 3 and a.shape[0] == 1:
            a = a[0]
        if a.ndim != 2 or a.min(initial=0) < 0 or a.max(initial=0) > 255:
            raise FormatError("mask must be H x W with values in 0..255")
        h, w = a.shape
        header, raster = b"P5", a.astype(np.uint8)
    else:
        if a.ndim != 3 or a.shape[0] != 3:
            raise FormatError(f"RGB must be 3 x H x W, got {a.shape}")
        _, h, w = a.shape
        header = b"P6"
        raster = np.round(np.clip(a, 0.0, 1.0) * 255.0).astype(np.uint8).transpose(1, 2, 0)
    with open(path, "wb") as fh:
        fh.write(header + f"\n{w} {h}\n255\n".encode())
        fh.write(np.ascontiguousarray(raster).tobytes())


def parse_ppm(buf: bytes) -> tuple[str, np.ndarray]:
    """Return (magic, raw uint8 raster) for a binary P5/P6 file."""
    tokens: list[bytes] = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(buf) and buf[pos:pos + 1].isspace():
            pos += 1
        if pos >= len(buf):
            raise FormatError("truncated PPM header")
        if buf[pos:pos + 1] == b"#":
            end = buf.find(b"\n", pos)
            pos = len(buf) if end < 0 else end + 1
            continue
        start = pos
        while pos < len(buf) and not buf[pos:pos + 1].isspace():
            pos += 1
        tokens.append(buf[start:pos])
    pos += 1  # single whitespace byte before the raster
    magic = tokens[0].decode("ascii", errors="replace")
    if magic not in ("P5", "P6"):
        raise FormatError(f"not a binary PPM/PGM file (magic {magic!r})")
    try:
        w, h, maxval = (int(t) for t in tokens[1:])
    except ValueError:
        raise FormatError("non-integer PPM header field") from None
    if maxval != 255:
        raise FormatError(f"only maxval 255 is supported, got {maxval}")
    c = 3 if magic == "P6" else 1
    n = w * h * c
    if len(buf) - pos < n:
        raise FormatError(f"truncated raster: need {n} bytes, have {len(buf) - pos}")
    raster = np.frombuffer(buf, dtype=np.uint8, count=n, offset=pos).reshape(h, w, c)
    return magic, raster


def read_ppm(path) -> np.ndarray:
    """P6 -> 3 x H x W float in [0, 1]; P5 -> H x W int64."""
    magic, raster = parse_ppm(Path(path).read_bytes())
    if magic == "P6":
        return raster.transpose(2, 0, 1).astype(np.float64) / 255.0
    return raster[..., 0].astype(np.int64)


# ---------------------------------------------------------------------------
# labels

def format_labels(sample_id: str, labels) -> str:
    present = np.flatnonzero(np.asarray(labels))
    return f"{sample_id} {','.join(str(int(k)) for k in present)}"


def write_labels(path, labels: dict[str, np.ndarray]) -> None:
    lengths = {len(v) for v in labels.values()}
    if len(lengths) > 1:
        raise ValueError(f"label vectors have mixed lengths {sorted(lengths)}")
    with open(path, "w") as fh:
        for sid, y in labels.items():
            if not sid or any(ch.isspace() for ch in sid):
                raise ValueError(f"sample id {sid!r} must be non-empty without whitespace")
            fh.write(format_labels(sid, y) + "\n")


def read_labels(path, num_classes: int) -> dict[str, np.ndarray]:
    out: dict[str, np.ndarray] = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        if not line.strip():
            continue
        sid, _, rest = line.partition(" ")
        if sid in out:
            raise FormatError(f"{path}:{lineno}: duplicate sample id {sid!r}")
        y = np.zeros(num_classes, dtype=np.int64)
        rest = rest.strip()
        if rest:
            try:
                idx = [int(v) for v in rest.split(",")]
            except ValueError:
                raise FormatError(f"{path}:{lineno}: bad class list {rest!r}") from None
            for k in idx:
                if not 0 <= k < num_classes:
                    raise FormatError(f"{path}:{lineno}: class index {k} outside 0..{num_classes - 1}")
                y[k] = 1
        out[sid] = y
    return out


# ---------------------------------------------------------------------------
# datasets on disk

SPLITS = ("train", "val")


def split_seeds(seed: int, n_train: int, n_val: int) -> dict[str, list[np.random.SeedSequence]]:
    """Disjoint per-sample seed streams for the train and val splits."""
    train_ss, val_ss = np.random.SeedSequence(seed).spawn(2)
    return {"train": train_ss.spawn(n_train), "val": val_ss.spawn(n_val)}


def generate_split(cfg: SynthConfig, n_train: int, n_val: int) -> dict[str, list[Scene]]:
    seeds = split_seeds(cfg.seed, n_train, n_val)
    return {split: [generate_scene(cfg, np.random.default_rng(ss)) for ss in seeds[split]] for split in SPLITS}


def sample_id(i: int) -> str:
    return f"s{i:05d}"


def write_manifest(path, cfg: SynthConfig, n_train: int, n_val: int) -> None:
    lines = ["# dealkit synthetic RGB-D dataset", "format_version = 1"]
    lines += [f"{k} = {v}" for k, v in asdict(cfg).items()]
    lines += [f"n_train = {n_train}", f"n_val = {n_val}"]
    Path(path).write_text("\n".join(lines) + "\n")


def read_manifest(path) -> dict[str, str]:
    out = {}
    for line in Path(path).read_text().splitlines():
        line = line.split("#", 1)[0].strip()
        if line:
            key, _, value = line.partition("=")
            out[key.strip()] = value.strip()
    return out


def generate_dataset(cfg: SynthConfig, n_train: int, n_val: int, out_dir) -> Path:
    """Write ``<split>/<id>/{rgb.ppm,depth.pfm,gt_mask.ppm}``, label files and a manifest."""
    out = Path(out_dir)
    scenes = generate_split(cfg, n_train, n_val)
    for split in SPLITS:
        labels = {}
        for i, scene in enumerate(scenes[split]):
            sid = sample_id(i)
            d = out / split / sid
            d.mkdir(parents=True, exist_ok=True)
            write_ppm(d / "rgb.ppm", scene.rgb)
            write_pfm(d / "depth.pfm", scene.depth)
            write_ppm(d / "gt_mask.ppm", scene.gt_mask, is_mask=True)
            labels[sid] = scene.labels
        write_labels(out / f"{split}_labels.txt", labels)
    manifest = out / "manifest.txt"
    write_manifest(manifest, cfg, n_train, n_val)
    return manifest


def load_split(root, split: str) -> list[tuple[str, Scene]]:
    root = Path(root)
    manifest = read_manifest(root / "manifest.txt")
    k = int(manifest["num_classes"])
    labels = read_labels(root / f"{split}_labels.txt", k)
    out = []
    for sid, y in labels.items():
        d = root / split / sid
        out.append((sid, Scene(rgb=read_ppm(d / "rgb.ppm"), depth=read_pfm(d / "depth.pfm"),
                               gt_mask=read_ppm(d / "gt_mask.ppm"), labels=y)))
    return out


def iter_files(root) -> Iterable[Path]:
    for dirpath, _, names in sorted(os.walk(root)):
        for name in sorted(names):
            yield Path(dirpath) / name


def write_cam_pfm(path, cam) -> None:
    """Store K x H x W activations as one ``Pf`` raster of K planes stacked top to bottom."""
    arr = np.asarray(getattr(cam, "data", cam), dtype=np.float64)
    if arr.ndim == 2:
        arr = arr[None]
    k, h, w = arr.shape
    write_pfm(path, arr.reshape(1, k * h, w))


def read_cam_pfm(path, height: int | None = None) -> np.ndarray:
    """Inverse of :func:`write_cam_pfm`; ``height`` defaults to the raster width."""
    arr = read_pfm(path)
    if arr.shape[0] == 3:
        return arr
    rows, w = arr.shape[1:]
    h = height or w
    if rows % h:
        raise FormatError(f"{path}: {rows} rows is not a multiple of the plane height {h}")
    return arr.reshape(rows // h, h, w)
