import numpy as np
import pytest

from terraseg.metrics import (
    PROBABILITY_CUTOFF,
    ConfusionCounts,
    confusion,
    evaluate_masks,
    read_report_csv,
    report_csv,
    segmentation_metrics,
    threshold_mask,
    threshold_scaled,
)
from terraseg.tensor import DimensionError


def test_threshold_boundary_scaled():
    assert threshold_scaled(np.array([189.0, 189.999999, 190.0, 255.0])).tolist() == [0, 0, 255, 255]


def test_threshold_probability_extremes_and_midpoint():
    assert threshold_mask(np.array([0.0, 1.0, 0.75])).tolist() == [0, 255, 255]


def test_probability_cutoff():
    assert abs(PROBABILITY_CUTOFF - 190 / 255) < 1e-12
    assert threshold_mask(np.array([190 / 255]))[0] == 255
    assert threshold_mask(np.array([np.nextafter(190 / 255, 0)]))[0] == 0


@pytest.mark.parametrize("bad", [-0.01, 1.01, np.nan])
def test_threshold_rejects_out_of_range(bad):
    with pytest.raises(ValueError):
        threshold_mask(np.array([0.5, bad]))


def test_confusion_examples():
    assert confusion(np.array([1, 1, 0, 0]), np.array([1, 1, 0, 0])) == ConfusionCounts(2, 2, 0, 0)
    assert confusion(np.array([1, 0, 1, 0]), np.array([1, 1, 0, 0])) == ConfusionCounts(1, 1, 1, 1)
    assert confusion(np.zeros(4), np.zeros(4)) == ConfusionCounts(0, 4, 0, 0)


def test_confusion_accepts_255_masks():
    assert confusion(np.array([255, 0]), np.array([1, 0])) == ConfusionCounts(1, 1, 0, 0)


def test_confusion_shape_mismatch():
    with pytest.raises(DimensionError):
        confusion(np.zeros((2, 2)), np.zeros((2, 3)))


def test_confusion_rejects_nonbinary():
    with pytest.raises(ValueError):
        confusion(np.array([0, 128]), np.array([0, 1]))


def test_metrics_single_sample():
    r = segmentation_metrics([ConfusionCounts(1, 1, 1, 1)])
    assert r.MA == 0.5 and r.MDC == 0.5 and abs(r.MIoU - 1 / 3) < 1e-15


def test_metrics_perfect():
    m = np.array([[1, 0], [0, 1]])
    r = evaluate_masks([m, m], [m, m])
    assert (r.MA, r.MDC, r.MIoU) == (1.0, 1.0, 1.0)


def test_metrics_are_per_sample_means():
    # Dice 1.0 and 0.5: per-sample mean 0.75, whereas pooling would give 2/3.
    a = ConfusionCounts(2, 0, 0, 0)
    b = ConfusionCounts(1, 0, 1, 1)
    assert b.dice() == 0.5
    assert segmentation_metrics([a, b]).MDC == 0.75


def test_both_empty_scores_one():
    c = confusion(np.zeros((3, 3)), np.zeros((3, 3)))
    assert c.dice() == 1.0 and c.iou() == 1.0


def test_empty_report_list_rejected():
    with pytest.raises(ValueError):
        segmentation_metrics([])


def _oracle(p, g):
    tp = tn = fp = fn = 0
    for a, b in zip(p.ravel(), g.ravel()):
        if a and b:
            tp += 1
        elif a:
            fp += 1
        elif b:
            fn += 1
        else:
            tn += 1
    return tp, tn, fp, fn


def test_brute_force_oracle_200_pairs():
    rng = np.random.default_rng(7)
    accs, dcs, ious = [], [], []
    preds, gts = [], []
    for _ in range(200):
        p = (rng.random((16, 16)) < rng.random()).astype(np.uint8)
        g = (rng.random((16, 16)) < rng.random()).astype(np.uint8)
        tp, tn, fp, fn = _oracle(p, g)
        c = confusion(p, g)
        assert (c.TP, c.TN, c.FP, c.FN) == (tp, tn, fp, fn)
        assert c.total == 256
        accs.append((tp + tn) / 256)
        dcs.append(1.0 if tp + fp + fn == 0 else 2 * tp / (2 * tp + fp + fn))
        ious.append(1.0 if tp + fp + fn == 0 else tp / (tp + fp + fn))
        preds.append(p)
        gts.append(g)
        if tp + fp + fn:
            assert abs(c.dice() - 2 * c.iou() / (1 + c.iou())) < 1e-12
    r = evaluate_masks(preds, gts)
    assert r.MA == sum(accs) / 200
    assert r.MDC == sum(dcs) / 200
    assert r.MIoU == sum(ious) / 200
    assert 0 <= r.MIoU <= r.MDC <= 1


def test_imbalance_pathology():
    # One foreground pixel per 147.368 pixels on average: ratio 146.368.
    H, W = 400, 368
    n_fg = round(H * W / 147.368)
    mask = np.zeros(H * W, dtype=np.uint8)
    mask[np.random.default_rng(0).choice(H * W, n_fg, replace=False)] = 1
    r = evaluate_masks([np.zeros((H, W), np.uint8)], [mask.reshape(H, W)])
    assert r.MA >= 0.993
    assert r.MDC == 0 and r.MIoU == 0


def test_report_csv_sorting_and_determinism(tmp_path):
    r = segmentation_metrics([ConfusionCounts(1, 1, 1, 1)])
    reports = {("val", 100): r, ("val", 50): r}
    text = report_csv(reports, tmp_path / "m.csv")
    lines = text.splitlines()
    assert lines[0] == "split,epoch,MA,MDC,MIoU"
    assert lines[1].startswith("val,50,") and lines[2].startswith("val,100,")
    assert lines[1] == "val,50,0.500000,0.500000,0.333333"
    assert report_csv(reports) == text
    assert read_report_csv(tmp_path / "m.csv")[("val", 100)] == (0.5, 0.5, 0.333333)


def test_report_csv_single_row():
    text = report_csv({("test", 1): segmentation_metrics([ConfusionCounts(0, 4, 0, 0)])})
    assert len(text.splitlines()) == 2
