import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ctvol.metrics import (
    ConfusionCounts,
    EmptyDataset,
    NonBinaryInput,
    ShapeMismatch,
    confusion_counts,
    dataset_iou,
    iou,
    mask_iou,
)


def loop_counts(pred, gt):
    tp = fp = fn = tn = 0
    for p, g in zip(pred.ravel().tolist(), gt.ravel().tolist()):
        if p and g:
            tp += 1
        elif p:
            fp += 1
        elif g:
            fn += 1
        else:
            tn += 1
    return tp, fp, fn, tn


def loop_iou(tp, fp, fn):
    return 1.0 if tp + fp + fn == 0 else tp / (tp + fp + fn)


def test_confusion_trivial():
    ones = np.ones((2, 2), dtype=np.uint8)
    zeros = np.zeros((2, 2), dtype=np.uint8)
    assert confusion_counts(ones, ones) == ConfusionCounts(4, 0, 0, 0)
    assert confusion_counts(ones, zeros) == ConfusionCounts(0, 4, 0, 0)
    assert confusion_counts(zeros, ones) == ConfusionCounts(0, 0, 4, 0)
    assert confusion_counts(zeros, zeros).total == 4


def test_confusion_errors():
    with pytest.raises(ShapeMismatch):
        confusion_counts(np.zeros((2, 2)), np.zeros((2, 3)))
    with pytest.raises(NonBinaryInput):
        confusion_counts(np.full((2, 2), 2), np.zeros((2, 2)))


def test_iou_cases():
    a = np.zeros((4, 4), dtype=np.uint8)
    a[0, :2] = 1
    b = np.zeros((4, 4), dtype=np.uint8)
    b[0, 1:3] = 1
    assert mask_iou(a, a) == 1.0
    assert mask_iou(a, 1 - a) == 0.0
    assert mask_iou(a, b) == pytest.approx(1 / 3)
    assert iou(ConfusionCounts(0, 0, 0, 9)) == 1.0


@settings(max_examples=200, deadline=None)
@given(seed=st.integers(0, 2**31), h=st.integers(1, 20), w=st.integers(1, 20), p=st.floats(0, 1))
def test_confusion_matches_loop_oracle(seed, h, w, p):
    rng = np.random.default_rng(seed)
    pred = (rng.uniform(size=(h, w)) < p).astype(np.uint8)
    gt = (rng.uniform(size=(h, w)) < 0.5).astype(np.uint8)
    c = confusion_counts(pred, gt)
    assert (c.tp, c.fp, c.fn, c.tn) == loop_counts(pred, gt)
    assert c.total == h * w
    # symmetry and bounds
    assert mask_iou(pred, gt) == mask_iou(gt, pred)
    assert 0.0 <= mask_iou(pred, gt) <= 1.0


@settings(max_examples=100, deadline=None)
@given(seed=st.integers(0, 2**31))
def test_iou_monotone_in_true_positives(seed):
    rng = np.random.default_rng(seed)
    pred = (rng.uniform(size=(8, 8)) < 0.4).astype(np.uint8)
    gt = (rng.uniform(size=(8, 8)) < 0.5).astype(np.uint8)
    misses = np.argwhere((pred == 0) & (gt == 1))
    if len(misses):
        before = mask_iou(pred, gt)
        pred[tuple(misses[0])] = 1
        assert mask_iou(pred, gt) >= before


def test_iou_one_iff_identical():
    rng = np.random.default_rng(0)
    a = (rng.uniform(size=(6, 6)) < 0.5).astype(np.uint8)
    assert mask_iou(a, a) == 1.0
    b = a.copy()
    b[0, 0] ^= 1
    assert mask_iou(a, b) < 1.0


def test_dataset_iou_identical_and_pooled():
    rng = np.random.default_rng(1)
    gts = [(rng.uniform(size=(2, 5, 5)) < 0.5).astype(np.uint8) for _ in range(3)]
    assert dataset_iou([(g, g) for g in gts]) == (1.0, 1.0)

    # slice A: tp=2, fp=1 ; slice B: tp=1, fn=2 -> pooled tp=3, fp=1, fn=2 -> 0.5
    pa = np.array([[1, 1, 1, 0]])
    ga = np.array([[1, 1, 0, 0]])
    pb = np.array([[1, 0, 0, 0]])
    gb = np.array([[1, 1, 1, 0]])
    pairs = [(np.stack([pa, pa]), np.stack([ga, ga])), (np.stack([pb, pb]), np.stack([gb, gb]))]
    assert dataset_iou(pairs) == (0.5, 0.5)
    mean = dataset_iou(pairs, reduction="mean")
    assert mean[0] == pytest.approx((2 / 3 + 1 / 3) / 2)


def test_dataset_iou_errors():
    with pytest.raises(EmptyDataset):
        dataset_iou([])
    with pytest.raises(ShapeMismatch):
        dataset_iou([(np.zeros((3, 2, 2)), np.zeros((3, 2, 2)))])


def test_dataset_iou_matches_loop_oracle():
    rng = np.random.default_rng(2)
    pairs = [((rng.uniform(size=(2, 12, 12)) < 0.3).astype(np.uint8),
              (rng.uniform(size=(2, 12, 12)) < 0.4).astype(np.uint8)) for _ in range(20)]
    want = []
    for ch in range(2):
        tot = np.zeros(4, dtype=np.int64)
        for pred, gt in pairs:
            tot += loop_counts(pred[ch], gt[ch])
        want.append(loop_iou(*tot[:3]))
    assert dataset_iou(pairs) == tuple(want)
