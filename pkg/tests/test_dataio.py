import filecmp
import struct
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dealkit.autograd import Tensor
from dealkit.dataio import (FormatError, Scene, SynthConfig, generate_dataset, generate_scene, generate_split,
                            iter_files, load_split, parse_pfm, parse_ppm, read_cam_pfm, read_labels,
                            read_manifest, read_pfm, read_ppm, write_cam_pfm, write_labels, write_pfm,
                            write_ppm)
from dealkit.imageops import sobel_magnitude


# generator

def test_synth_config_validation():
    with pytest.raises(ValueError):
        SynthConfig(image_size=8)
    with pytest.raises(ValueError):
        SynthConfig(num_classes=0)
    with pytest.raises(ValueError):
        SynthConfig(depth_noise_std=-0.1)
    with pytest.raises(ValueError):
        SynthConfig(min_objects=3, max_objects=2)


def test_zero_objects_gives_background_only():
    s = generate_scene(SynthConfig(), np.random.default_rng(0), n_objects=0)
    assert not s.gt_mask.any()
    assert not s.labels.any()


def test_same_seed_same_scene():
    a = generate_scene(SynthConfig(), np.random.default_rng(5))
    b = generate_scene(SynthConfig(), np.random.default_rng(5))
    assert a == b


def test_scene_invariants_over_a_generated_set():
    cfg = SynthConfig(depth_noise_std=0.02)
    for split in generate_split(cfg, 60, 20).values():
        for s in split:
            counts = np.bincount(s.gt_mask.ravel(), minlength=cfg.num_classes + 1)[1:]
            assert np.array_equal(s.labels, (counts >= 1).astype(int))
            assert s.depth.min() > 0
            assert s.rgb.min() >= 0 and s.rgb.max() <= 1
            assert np.array_equal(np.round(s.rgb * 255) / 255, s.rgb)
            assert s.depth.shape == (1, 64, 64) and s.rgb.shape == (3, 64, 64)
            assert 1 <= s.labels.sum() <= 3


def test_objects_are_nearer_than_background():
    for s in generate_split(SynthConfig(), 30, 0)["train"]:
        fg = s.gt_mask > 0
        assert s.depth[0][fg].max() <= 1.8 + 1e-6
        assert s.depth[0][~fg].min() >= 2.0 - 1e-6
        for k in np.flatnonzero(s.labels):
            vals = s.depth[0][s.gt_mask == k + 1]
            assert np.ptp(vals) == 0.0  # constant per-object depth


def test_noise_and_jitter_never_move_the_mask():
    base = SynthConfig(seed=3)
    clean = generate_split(base, 10, 5)
    noisy = generate_split(replace(base, depth_noise_std=0.02, color_jitter=0.2), 10, 5)
    for split in clean:
        for a, b in zip(clean[split], noisy[split]):
            assert np.array_equal(a.gt_mask, b.gt_mask)
            assert np.array_equal(a.labels, b.labels)
            assert not np.array_equal(a.depth, b.depth)


def test_disc_depth_edges():
    # one disc at depth 1.0 on the 2-3 m ramp, no noise
    cfg = SynthConfig(min_objects=1, max_objects=1, num_classes=1, color_jitter=0.0)
    s = generate_scene(cfg, np.random.default_rng(0))
    depth = s.depth.copy()
    depth[0][s.gt_mask == 1] = 1.0
    mag = sobel_magnitude(Tensor(depth)).data[0]
    fg = s.gt_mask == 1
    inner = fg.copy()
    inner[1:-1, 1:-1] = fg[1:-1, 1:-1] & fg[:-2, 1:-1] & fg[2:, 1:-1] & fg[1:-1, :-2] & fg[1:-1, 2:]
    boundary = fg & ~inner
    ramp_step = 1.0 / 63
    assert mag[boundary].min() >= 1.0
    far = np.ones_like(fg)
    for di in range(-2, 3):
        for dj in range(-2, 3):
            far &= ~np.roll(np.roll(fg, di, 0), dj, 1)
    assert mag[far].max() <= 8 * ramp_step + 1e-6  # depth is stored as float32


# PFM

def test_pfm_roundtrip_small(tmp_path):
    t = np.array([1.0, 2.0, 3.0, 4.0]).reshape(1, 2, 2)
    write_pfm(tmp_path / "a.pfm", t)
    assert np.array_equal(read_pfm(tmp_path / "a.pfm"), t)


def test_pfm_header_layout(tmp_path):
    t = np.array([1.0, 2.0, 3.0, 4.0]).reshape(1, 2, 2)
    write_pfm(tmp_path / "a.pfm", t)
    raw = (tmp_path / "a.pfm").read_bytes()
    assert raw.startswith(b"Pf\n2 2\n-1.0\n")
    # rows are stored bottom to top
    assert struct.unpack("<4f", raw[-16:]) == (3.0, 4.0, 1.0, 2.0)


def test_pfm_hand_built_header_accepted():
    buf = b"Pf\n2 2\n-1.0\n" + struct.pack("<4f", 1, 2, 3, 4)
    assert np.array_equal(parse_pfm(buf)[0], [[3, 4], [1, 2]])


def test_pfm_big_endian_read():
    buf = b"Pf\n2 1\n1.0\n" + struct.pack(">2f", 1.5, -2.0)
    assert np.array_equal(parse_pfm(buf)[0], [[1.5, -2.0]])


@pytest.mark.parametrize("buf", [b"P6\n2 2\n255\n", b"Pf\n2 2\n-1.0\n" + b"\0" * 8, b"Pf\n2 x\n-1.0\n",
                                 b"Pf\n2 2\n0\n" + b"\0" * 16, b"Pf\n2 2\n"])
def test_pfm_rejects_malformed(buf):
    with pytest.raises(FormatError):
        parse_pfm(buf)


def test_pfm_rejects_non_finite(tmp_path):
    with pytest.raises(FormatError):
        write_pfm(tmp_path / "a.pfm", np.array([[[np.nan]]]))


def test_pfm_three_channels(tmp_path):
    x = np.random.default_rng(0).random((3, 4, 5)).astype(np.float32).astype(np.float64)
    write_pfm(tmp_path / "c.pfm", x)
    assert (tmp_path / "c.pfm").read_bytes().startswith(b"PF\n")
    assert np.array_equal(read_pfm(tmp_path / "c.pfm"), x)


@settings(max_examples=100, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), c=st.sampled_from([1, 3]), h=st.integers(1, 9), w=st.integers(1, 9))
def test_pfm_roundtrip_is_float32_exact(tmp_path_factory, seed, c, h, w):
    x = np.random.default_rng(seed).normal(0, 100, size=(c, h, w))
    path = tmp_path_factory.mktemp("pfm") / "x.pfm"
    write_pfm(path, x)
    assert np.array_equal(read_pfm(path), x.astype(np.float32).astype(np.float64))
    first = path.read_bytes()
    write_pfm(path, read_pfm(path))
    assert path.read_bytes() == first


def test_cam_pfm_roundtrip(tmp_path):
    cam = np.random.default_rng(1).random((3, 5, 4)).astype(np.float32).astype(np.float64)
    write_cam_pfm(tmp_path / "cam.pfm", cam)
    assert np.array_equal(read_cam_pfm(tmp_path / "cam.pfm", 5), cam)
    with pytest.raises(FormatError):
        read_cam_pfm(tmp_path / "cam.pfm", 4)


# PPM

def test_ppm_all_zero_rgb(tmp_path):
    write_ppm(tmp_path / "z.ppm", np.zeros((3, 2, 2)))
    raw = (tmp_path / "z.ppm").read_bytes()
    assert raw == b"P6\n2 2\n255\n" + bytes(12)


def test_ppm_mask_bytes(tmp_path):
    write_ppm(tmp_path / "m.ppm", np.array([[0, 1], [2, 0]]), is_mask=True)
    raw = (tmp_path / "m.ppm").read_bytes()
    assert raw == b"P5\n2 2\n255\n" + bytes([0, 1, 2, 0])
    assert np.array_equal(read_ppm(tmp_path / "m.ppm"), [[0, 1], [2, 0]])


@settings(max_examples=100, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), h=st.integers(1, 9), w=st.integers(1, 9))
def test_ppm_roundtrip_bytes(tmp_path_factory, seed, h, w):
    rng = np.random.default_rng(seed)
    rgb = rng.integers(0, 256, size=(3, h, w)) / 255.0
    d = tmp_path_factory.mktemp("ppm")
    write_ppm(d / "a.ppm", rgb)
    back = read_ppm(d / "a.ppm")
    assert np.array_equal(back, rgb)
    write_ppm(d / "b.ppm", back)
    assert (d / "a.ppm").read_bytes() == (d / "b.ppm").read_bytes()


def test_ppm_header_with_comment():
    magic, raster = parse_ppm(b"P5\n# made by hand\n2 1\n255\n\x07\x09")
    assert magic == "P5"
    assert raster[..., 0].tolist() == [[7, 9]]


@pytest.mark.parametrize("buf", [b"P5\n2 2\n65535\n" + bytes(8), b"P6\n2 2\n255\n" + bytes(5), b"P3\n1 1\n255\n0 0 0",
                                 b"P5\n2"])
def test_ppm_rejects_malformed(buf):
    with pytest.raises(FormatError):
        parse_ppm(buf)


def test_ppm_rejects_bad_mask(tmp_path):
    with pytest.raises(FormatError):
        write_ppm(tmp_path / "m.ppm", np.array([[300]]), is_mask=True)


# labels

def test_label_lines(tmp_path):
    write_labels(tmp_path / "l.txt", {"s0": np.array([1, 0, 0, 1]), "s1": np.zeros(4)})
    assert (tmp_path / "l.txt").read_text() == "s0 0,3\ns1 \n"


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**32 - 1))
def test_labels_roundtrip(tmp_path_factory, seed):
    rng = np.random.default_rng(seed)
    labels = {f"s{i}": rng.integers(0, 2, size=5) for i in range(100)}
    path = tmp_path_factory.mktemp("lab") / "l.txt"
    write_labels(path, labels)
    back = read_labels(path, 5)
    assert list(back) == list(labels)
    assert all(np.array_equal(back[k], labels[k]) for k in labels)


def test_labels_errors(tmp_path):
    (tmp_path / "dup.txt").write_text("s0 1\ns0 2\n")
    with pytest.raises(FormatError):
        read_labels(tmp_path / "dup.txt", 4)
    (tmp_path / "big.txt").write_text("s0 4\n")
    with pytest.raises(FormatError):
        read_labels(tmp_path / "big.txt", 4)
    with pytest.raises(ValueError):
        write_labels(tmp_path / "mixed.txt", {"a": np.zeros(3), "b": np.zeros(4)})


# datasets

def test_dataset_census(tmp_path):
    generate_dataset(SynthConfig(seed=1), 2, 1, tmp_path)
    dirs = sorted(p.relative_to(tmp_path).as_posix() for p in tmp_path.glob("*/*") if p.is_dir())
    assert dirs == ["train/s00000", "train/s00001", "val/s00000"]
    assert (tmp_path / "train_labels.txt").exists() and (tmp_path / "val_labels.txt").exists()
    manifest = read_manifest(tmp_path / "manifest.txt")
    assert manifest["seed"] == "1" and manifest["n_train"] == "2"


def test_dataset_is_byte_identical(tmp_path):
    generate_dataset(SynthConfig(seed=4), 3, 2, tmp_path / "a")
    generate_dataset(SynthConfig(seed=4), 3, 2, tmp_path / "b")
    fa = [p.relative_to(tmp_path / "a") for p in iter_files(tmp_path / "a")]
    fb = [p.relative_to(tmp_path / "b") for p in iter_files(tmp_path / "b")]
    assert fa == fb
    assert all(filecmp.cmp(tmp_path / "a" / f, tmp_path / "b" / f, shallow=False) for f in fa)


def test_noisy_dataset_changes_only_depth(tmp_path):
    generate_dataset(SynthConfig(seed=4), 2, 1, tmp_path / "a")
    generate_dataset(SynthConfig(seed=4, depth_noise_std=0.02), 2, 1, tmp_path / "b")
    for f in iter_files(tmp_path / "a"):
        rel = f.relative_to(tmp_path / "a")
        same = filecmp.cmp(f, tmp_path / "b" / rel, shallow=False)
        if f.name == "depth.pfm":
            assert not same
        elif f.name in ("gt_mask.ppm", "rgb.ppm") or f.name.endswith("_labels.txt"):
            assert same


def test_splits_do_not_share_scenes():
    data = generate_split(SynthConfig(seed=2), 40, 40)
    train = {s.rgb.tobytes() for s in data["train"]}
    assert not any(s.rgb.tobytes() in train for s in data["val"])


def test_load_split_matches_memory(tmp_path):
    cfg = SynthConfig(seed=6, depth_noise_std=0.02)
    generate_dataset(cfg, 3, 2, tmp_path)
    mem = generate_split(cfg, 3, 2)
    for split in ("train", "val"):
        loaded = [s for _, s in load_split(tmp_path, split)]
        assert loaded == mem[split]


def test_scene_equality():
    s = generate_scene(SynthConfig(), np.random.default_rng(0))
    t = Scene(s.rgb.copy(), s.depth.copy(), s.gt_mask.copy(), s.labels.copy())
    assert s == t
    t.gt_mask[0, 0] += 1
    assert s != t
