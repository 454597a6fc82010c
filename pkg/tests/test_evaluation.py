import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dealkit.evaluation import (ConfusionMatrix, EvalReport, accumulate, aggregate_seeds, default_taus, miou,
                                threshold_cam, threshold_sweep)

from . import oracles


def _conf(k, pairs):
    conf = ConfusionMatrix(k)
    for pred, gt in pairs:
        conf = accumulate(conf, np.asarray(pred), np.asarray(gt))
    return conf


def test_threshold_examples():
    assert not threshold_cam(np.zeros((2, 3, 3)), 0.5).any()
    assert threshold_cam(np.random.default_rng(0).random((2, 3, 3)), 0.0).min() >= 1
    cam = np.zeros((2, 2, 4))
    cam[0, :, :2] = 0.6
    cam[1, :, 2:] = 0.7
    assert threshold_cam(cam, 0.65).tolist() == [[0, 0, 2, 2]] * 2


def test_threshold_ties_go_to_smallest_class():
    cam = np.full((3, 1, 1), 0.8)
    assert threshold_cam(cam, 0.5)[0, 0] == 1


def test_threshold_label_masking():
    cam = np.zeros((2, 1, 2))
    cam[1] = 0.9
    cam[0] = 0.4
    assert threshold_cam(cam, 0.3, labels=np.array([1, 0])).tolist() == [[1, 1]]


def test_threshold_rejects_bad_tau():
    with pytest.raises(ValueError):
        threshold_cam(np.zeros((1, 2, 2)), 1.5)


def test_accumulate_examples():
    gt = np.array([[0, 1], [2, 1]])
    assert np.array_equal(_conf(2, [(gt, gt)]).counts, np.diag([1, 2, 1]))
    c = _conf(1, [(np.ones((2, 2), int), np.zeros((2, 2), int))])
    assert c.counts[0, 1] == 4 and c.total == 4


def test_accumulate_is_mergeable():
    rng = np.random.default_rng(1)
    samples = [(rng.integers(0, 4, (5, 5)), rng.integers(0, 4, (5, 5))) for _ in range(4)]
    joint = accumulate(ConfusionMatrix(3), np.concatenate([p for p, _ in samples]),
                       np.concatenate([g for _, g in samples]))
    split = sum((_conf(3, [s]) for s in samples[1:]), _conf(3, samples[:1]))
    reversed_order = _conf(3, samples[::-1])
    assert np.array_equal(joint.counts, split.counts)
    assert np.array_equal(joint.counts, reversed_order.counts)


def test_accumulate_errors():
    with pytest.raises(ValueError):
        accumulate(ConfusionMatrix(1), np.zeros((2, 2), int), np.zeros((2, 3), int))
    with pytest.raises(ValueError):
        accumulate(ConfusionMatrix(1), np.full((2, 2), 2), np.zeros((2, 2), int))


def test_miou_examples():
    gt = np.array([[0, 1], [2, 1]])
    assert miou(_conf(2, [(gt, gt)])).miou == 1.0
    half = np.array([[1, 1], [0, 0]])
    rep = miou(_conf(1, [(np.zeros((2, 2), int), half)]))
    assert rep.per_class_iou.tolist() == [0.5, 0.0]
    assert rep.miou == 0.25


def test_miou_excludes_zero_union_classes():
    gt = np.array([[0, 1], [1, 0]])
    rep = miou(_conf(3, [(gt, gt)]))
    assert np.isnan(rep.per_class_iou[2]) and np.isnan(rep.per_class_iou[3])
    assert rep.miou == 1.0


def test_miou_rejects_empty():
    with pytest.raises(ValueError):
        miou(ConfusionMatrix(2))


@settings(max_examples=60, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), k=st.integers(1, 4))
def test_miou_bounds_and_relabeling(seed, k):
    rng = np.random.default_rng(seed)
    pred = rng.integers(0, k + 1, (6, 6))
    gt = rng.integers(0, k + 1, (6, 6))
    rep = miou(_conf(k, [(pred, gt)]))
    valid = rep.per_class_iou[~np.isnan(rep.per_class_iou)]
    assert np.all((valid >= 0) & (valid <= 1)) and 0 <= rep.miou <= 1
    assert rep.miou == pytest.approx(oracles.miou_of([pred.tolist()], [gt.tolist()], k), abs=1e-12)
    perm = np.concatenate([[0], 1 + rng.permutation(k)])
    relabeled = miou(_conf(k, [(perm[pred], perm[gt])]))
    assert relabeled.miou == pytest.approx(rep.miou, abs=1e-12)


def test_sweep_finds_exact_threshold():
    gt = np.array([[1, 0], [0, 1]])
    cam = np.array([[[0.35, 0.2], [0.25, 0.9]]])
    rep = threshold_sweep([cam], [gt])
    assert rep.miou == 1.0
    assert rep.threshold == pytest.approx(0.26)
    assert threshold_sweep([cam], [gt], taus=[0.3]).miou == 1.0


def test_sweep_all_zero_cams_report_smallest_positive_tau():
    rep = threshold_sweep([np.zeros((2, 3, 3))], [np.zeros((3, 3), int)], taus=[0.0, 0.2, 0.5, 0.7])
    assert rep.threshold == 0.2


def test_sweep_single_threshold_is_a_plain_evaluation():
    rng = np.random.default_rng(2)
    cams = [rng.random((2, 4, 4)) for _ in range(3)]
    gts = [rng.integers(0, 3, (4, 4)) for _ in range(3)]
    rep = threshold_sweep(cams, gts, taus=[0.5])
    conf = _conf(2, [(threshold_cam(c, 0.5), g) for c, g in zip(cams, gts)])
    assert rep.miou == miou(conf).miou and rep.n_samples == 3


def test_four_by_four_fixture():
    gt = np.zeros((4, 4), int)
    gt[:, 2:] = 1
    cam = np.zeros((1, 4, 4))
    rep = threshold_sweep([cam], [gt], taus=[0.5])
    assert rep.miou == 0.25


def test_sweep_errors():
    with pytest.raises(ValueError):
        threshold_sweep([], [])
    with pytest.raises(ValueError):
        threshold_sweep([np.zeros((1, 2, 2))], [np.zeros((2, 2), int)], taus=[])
    with pytest.raises(ValueError):
        threshold_sweep([np.zeros((1, 2, 2))], [np.zeros((2, 2), int)], taus=[1.2])


@settings(max_examples=100, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), k=st.integers(1, 3), n=st.integers(1, 3), grid=st.integers(1, 12),
       masked=st.booleans())
def test_sweep_is_grid_argmax(seed, k, n, grid, masked):
    rng = np.random.default_rng(seed)
    # coarse CAM values make exact ties between thresholds common
    cams = [np.round(rng.random((k, 4, 4)) * 4) / 4 for _ in range(n)]
    gts = [rng.integers(0, k + 1, (4, 4)) for _ in range(n)]
    labels = [rng.integers(0, 2, k) for _ in range(n)] if masked else None
    taus = np.round(rng.random(grid) * 20) / 20
    rep = threshold_sweep(cams, gts, taus=taus, labels=labels)
    ref_tau, ref_miou = oracles.naive_sweep([oracles.to_lists(c) for c in cams], [g.tolist() for g in gts], taus,
                                           None if labels is None else [lab.tolist() for lab in labels])
    assert rep.miou == pytest.approx(ref_miou, abs=1e-12)
    assert rep.threshold == ref_tau
    for tau in taus:
        fixed = _conf(k, [(threshold_cam(c, tau, None if labels is None else labels[i]), g)
                          for i, (c, g) in enumerate(zip(cams, gts))])
        assert rep.miou >= miou(fixed).miou - 1e-12


def test_default_grid():
    taus = default_taus()
    assert len(taus) == 101 and taus[0] == 0.0 and taus[-1] == 1.0 and taus[37] == 0.37


def test_report_lines():
    rep = EvalReport(np.array([0.5, np.nan]), 0.5, 0.3, 2)
    assert rep.lines() == ["miou = 0.500000", "threshold = 0.30", "n_samples = 2", "iou_0 = 0.500000", "iou_1 = nan"]


def test_aggregate_seeds():
    s = aggregate_seeds([0.4, 0.6])
    assert s.mean_miou == pytest.approx(0.5) and s.best_miou == 0.6 and s.best_seed == 1
    one = aggregate_seeds([EvalReport(np.array([0.3]), 0.3)])
    assert one.mean_miou == one.best_miou == 0.3
    eq = aggregate_seeds([0.7] * 4)
    assert eq.mean_miou == 0.7 and eq.best_seed == 0
    with pytest.raises(ValueError):
        aggregate_seeds([])
