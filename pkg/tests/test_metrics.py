import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from paanet.metrics import binarize, confusion, evaluate, image_scores


def brute_counts(p, g):
    """Pixel-by-pixel tally."""
    tp = fp = fn = tn = 0
    for a, b in zip(np.ravel(p), np.ravel(g)):
        if a and b:
            tp += 1
        elif a:
            fp += 1
        elif b:
            fn += 1
        else:
            tn += 1
    return tp, fp, fn, tn


def test_confusion_matches_brute_force(rng):
    for _ in range(100):
        p = (rng.uniform(size=(8, 8)) < rng.uniform()).astype(np.uint8)
        g = (rng.uniform(size=(8, 8)) < rng.uniform()).astype(np.uint8)
        c = confusion(p, g)
        assert (c.tp, c.fp, c.fn, c.tn) == brute_counts(p, g)


def test_worked_example():
    pred = np.array([[1, 1, 0, 0]] * 4)
    gt = np.array([[1, 0, 0, 0]] * 4)
    c = confusion(pred, gt)
    assert (c.tp, c.fp, c.fn, c.tn) == (4, 4, 0, 8)
    dsc, iou, recall, precision = image_scores(c)
    assert dsc == pytest.approx(8 / 12)
    assert iou == pytest.approx(0.5)
    assert recall == 1.0
    assert precision == 0.5


def test_empty_vs_empty_is_perfect():
    z = np.zeros((4, 4))
    assert image_scores(confusion(z, z)) == (1.0, 1.0, 1.0, 1.0)


def test_empty_prediction_with_foreground():
    dsc, iou, recall, precision = image_scores(confusion(np.zeros((4, 4)), np.eye(4)))
    assert dsc == iou == recall == 0.0
    # no predicted positives and no false positives
    assert precision == 1.0


@settings(max_examples=100, deadline=None)
@given(
    p=arrays(np.uint8, (6, 7), elements=st.integers(0, 1)),
    g=arrays(np.uint8, (6, 7), elements=st.integers(0, 1)),
)
def test_dice_iou_identity(p, g):
    dsc, iou, _, _ = image_scores(confusion(p, g))
    assert abs(dsc - 2 * iou / (1 + iou)) <= 1e-12
    assert 0.0 <= iou <= dsc <= 1.0


def test_binarize_threshold_is_inclusive():
    np.testing.assert_array_equal(binarize(np.array([0.49, 0.5, 0.51]), 0.5), [0, 1, 1])
    assert binarize(np.array([0.3]), 0.3).dtype == np.uint8


def test_evaluate_averages_per_image():
    gt = [np.ones((1, 2, 2)), np.ones((1, 2, 2))]
    preds = [np.ones((1, 2, 2)), np.zeros((1, 2, 2))]
    rep = evaluate(preds, gt, 0.5)
    assert rep.dsc == 0.5 and rep.miou == 0.5 and rep.n_images == 2
    assert rep.tsv().split("\t")[:2] == ["0.500000", "0.500000"]


def test_errors():
    with pytest.raises(ValueError, match="binary"):
        confusion(np.array([0, 2]), np.array([0, 1]))
    with pytest.raises(ValueError, match="shape"):
        confusion(np.zeros(3), np.zeros(4))
    with pytest.raises(ValueError, match="at least one"):
        evaluate([], [])
    with pytest.raises(ValueError, match="predictions"):
        evaluate([np.zeros(2)], [])


def test_binarize_examples():
    assert binarize(np.full((3, 3), 0.5)).all()
    assert not binarize(np.full((3, 3), 0.4999)).any()
    x = np.linspace(0, 1, 11)
    np.testing.assert_array_equal(binarize(binarize(x)), binarize(x))


def test_confusion_examples():
    ones = np.ones((4, 4))
    c = confusion(ones, ones)
    assert (c.tp, c.fp, c.fn, c.tn) == (16, 0, 0, 0)
    g = np.eye(4)
    c = confusion(1 - g, g)
    assert c.tp == 0 and c.tn == 0


def test_metric_examples():
    assert evaluate([np.eye(3)] * 2, [np.eye(3)] * 2).dsc == 1.0
    # tp = 2, fp = 2, fn = 2
    p = np.array([1, 1, 1, 1, 0, 0, 0])
    g = np.array([1, 1, 0, 0, 1, 1, 0])
    dsc, iou, recall, precision = image_scores(confusion(p, g))
    assert (dsc, recall, precision) == (0.5, 0.5, 0.5) and iou == pytest.approx(1 / 3)
    rep = evaluate([np.array([1, 0, 0])], [np.array([0, 0, 1])])
    assert (rep.dsc, rep.miou, rep.recall, rep.precision) == (0.0, 0.0, 0.0, 0.0)
