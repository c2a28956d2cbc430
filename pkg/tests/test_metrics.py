import numpy as np
import pytest

from roverseg import metrics
from roverseg.autodiff import Tensor
from roverseg.errors import DomainError, ShapeError
from roverseg.metrics import ConfusionMatrix, accumulate, argmax_labels, class_metrics


def cm_from(pred, gt, nc=3):
    cm = ConfusionMatrix(nc)
    accumulate(np.asarray(pred, np.uint8), np.asarray(gt, np.uint8), cm)
    return cm


def test_counting_oracle_tp3_fp1_fn1():
    gt = [1, 1, 1, 1, 0]
    pred = [1, 1, 1, 0, 1]
    cm = cm_from(pred, gt)
    acc, iou, f1 = class_metrics(cm, 1)
    assert acc == 3 / 4
    assert iou == 3 / 5
    assert f1 == 6 / 8


def test_absent_class_scores_perfect():
    cm = cm_from([0, 1, 0], [0, 1, 0])
    assert class_metrics(cm, 2) == (1.0, 1.0, 1.0)


def test_vacuous_acc_with_false_positives():
    # no rock ground truth, one rock prediction: recall holds vacuously while
    # iou and f1 both see the false positive
    cm = cm_from([2, 0, 0], [0, 0, 0])
    acc, iou, f1 = class_metrics(cm, 2)
    assert acc == 1.0
    assert iou == 0.0
    assert f1 == 0.0


def test_confusion_additivity():
    rng = np.random.default_rng(0)
    a_pred, a_gt = rng.integers(0, 3, 100), rng.integers(0, 3, 100)
    b_pred, b_gt = rng.integers(0, 3, 77), rng.integers(0, 3, 77)
    joint = cm_from(np.concatenate([a_pred, b_pred]), np.concatenate([a_gt, b_gt]))
    summed = cm_from(a_pred, a_gt).add(cm_from(b_pred, b_gt))
    assert np.array_equal(joint.counts, summed.counts)
    with pytest.raises(ShapeError):
        ConfusionMatrix(3).add(ConfusionMatrix(4))


def test_f1_iou_identity():
    rng = np.random.default_rng(1)
    for _ in range(20):
        cm = cm_from(rng.integers(0, 3, 500), rng.integers(0, 3, 500))
        for c in (1, 2):
            _, iou, f1 = class_metrics(cm, c)
            assert abs(f1 - 2 * iou / (1 + iou)) < 1e-12


def test_accumulate_validation():
    cm = ConfusionMatrix(3)
    with pytest.raises(ShapeError):
        accumulate(np.zeros((2, 3)), np.zeros((3, 2)), cm)
    with pytest.raises(DomainError):
        accumulate(np.array([3]), np.array([0]), cm)
    with pytest.raises(DomainError):
        accumulate(np.array([0]), np.array([255]), cm)
    accumulate(np.zeros(0, np.uint8), np.zeros(0, np.uint8), cm)
    assert cm.total == 0


def test_confusion_matrix_needs_two_classes():
    with pytest.raises(ShapeError):
        ConfusionMatrix(1)


def test_argmax_tie_resolves_to_lowest_class():
    logits = np.zeros((3, 2, 2))
    logits[1, 0, 0] = 5.0
    out = argmax_labels(Tensor(logits))
    assert out.dtype == np.uint8
    assert out[0, 0] == 1
    assert out[1, 1] == 0  # all-equal tie goes to class 0
    with pytest.raises(ShapeError):
        argmax_labels(np.zeros((2, 2)))


def test_report_means_cover_obstacles_only():
    # craters perfect, rocks at iou 0.5, background deliberately terrible:
    # the means must not see background at all
    gt = np.array([1, 1, 2, 2, 0, 0])
    pred = np.array([1, 1, 2, 0, 2, 1])
    report = metrics.compute_report(cm_from(pred, gt))
    assert set(report.per_class) == {1, 2}
    acc1, iou1, f1_1 = report.per_class[1]
    acc2, iou2, f1_2 = report.per_class[2]
    assert report.m_acc == (acc1 + acc2) / 2
    assert report.m_iou == (iou1 + iou2) / 2
    assert report.m_f1 == (f1_1 + f1_2) / 2
    assert metrics.aggregate(report) == (report.m_acc, report.m_iou, report.m_f1)


def test_aggregate_requires_both_obstacle_classes():
    report = metrics.MetricsReport({1: (1.0, 1.0, 1.0)}, 1.0, 1.0, 1.0)
    with pytest.raises(ShapeError):
        metrics.aggregate(report)


def test_format_pct_two_decimals():
    assert metrics.format_pct(0.9652) == "96.52"
    assert metrics.format_pct(0.9620) == "96.20"
    assert metrics.format_pct(0.0) == "0.00"
    assert metrics.format_pct(1.0) == "100.00"


def test_format_pct_representation_guard():
    # 0.9279 * 100 is 92.78999999999999 in binary; the pre-quantize step must
    # recover the intended 92.79 instead of flooring to 92.78
    assert metrics.format_pct(0.9279) == "92.79"
    # true half-way ties round up
    assert metrics.format_pct(0.123450) == "12.35"
    assert metrics.format_pct(0.99995) == "100.00"


def test_report_lines_format():
    gt = np.array([1, 1, 2, 2])
    pred = np.array([1, 1, 2, 2])
    report = metrics.compute_report(cm_from(pred, gt))
    lines = metrics.report_lines(report)
    assert lines == [
        "class=1 acc=1.000000 iou=1.000000 f1=1.000000",
        "class=2 acc=1.000000 iou=1.000000 f1=1.000000",
        "mean acc=1.000000 iou=1.000000 f1=1.000000",
    ]
    table = metrics.format_report(report, title="test")
    assert table.splitlines()[0] == "[test]"
    assert "crater" in table and "rock" in table and "100.00" in table


def test_class_metrics_range_check():
    cm = ConfusionMatrix(3)
    with pytest.raises(ShapeError):
        class_metrics(cm, 3)
    with pytest.raises(ShapeError):
        class_metrics(cm, -1)
