import numpy as np
import pytest

from asanet.errors import DataError, EmptyEvaluationError
from asanet.metrics import ConfusionMatrix, confusion_update, csv_header, csv_row, format_report, summary, to_csv


def brute_force(pred, label, k, ignore=255):
    """Recompute the metrics from raw pixel pairs, one class at a time."""
    keep = label != ignore
    p, t = pred[keep].tolist(), label[keep].tolist()
    n = len(t)
    iou = []
    for c in range(k):
        inter = sum(1 for a, b in zip(p, t) if a == c and b == c)
        union = sum(1 for a, b in zip(p, t) if a == c or b == c)
        iou.append(inter / union if union else float("nan"))
    oa = sum(1 for a, b in zip(p, t) if a == b) / n
    pe = sum((t.count(c) / n) * (p.count(c) / n) for c in range(k))
    kappa = (oa - pe) / (1 - pe) if pe != 1 else (1.0 if oa == 1 else 0.0)
    present = [v for v in iou if v == v]
    return iou, sum(present) / len(present), oa, kappa


def test_hand_count_update():
    cm = confusion_update(ConfusionMatrix(2), np.array([[0, 1], [1, 1]]), np.array([[0, 0], [1, 1]]))
    assert cm.counts.tolist() == [[1, 1], [0, 2]]


def test_perfect_prediction_diagonal():
    lab = np.random.default_rng(0).integers(0, 3, (5, 6))
    cm = ConfusionMatrix(3).update(lab, lab)
    assert np.trace(cm.counts) == 30 and cm.counts.sum() == 30
    s = summary(cm)
    assert s["miou"] == s["oa"] == s["kappa"] == 1.0


def test_all_ignored_unchanged():
    cm = ConfusionMatrix(3).update(np.zeros((2, 2), int), np.full((2, 2), 255))
    assert cm.total == 0
    with pytest.raises(EmptyEvaluationError):
        summary(cm)


def test_hand_case():
    s = summary(ConfusionMatrix(2, np.array([[40, 10], [5, 45]])))
    assert s["oa"] == pytest.approx(0.85, abs=1e-12)
    assert s["pe"] == pytest.approx(0.5, abs=1e-12)
    assert s["kappa"] == pytest.approx(0.70, abs=1e-12)
    assert s["iou"] == pytest.approx([40 / 55, 45 / 60], abs=1e-12)
    assert s["miou"] == pytest.approx(0.738636, abs=1e-6)


def test_brute_force_oracle_100_instances():
    rng = np.random.default_rng(42)
    for _ in range(100):
        k = int(rng.integers(2, 8))
        h, w = rng.integers(1, 33, 2)
        label = rng.integers(0, k, (h, w))
        label[rng.random((h, w)) < 0.1] = 255
        pred = np.where(rng.random((h, w)) < 0.6, np.where(label == 255, 0, label), rng.integers(0, k, (h, w)))
        if (label != 255).sum() == 0:
            continue
        s = summary(ConfusionMatrix(k).update(pred, label))
        iou, miou, oa, kappa = brute_force(pred, label, k)
        np.testing.assert_allclose(s["iou"], iou, rtol=0, atol=1e-12)
        assert abs(s["miou"] - miou) <= 1e-12 and abs(s["oa"] - oa) <= 1e-12 and abs(s["kappa"] - kappa) <= 1e-12


def test_absent_class_excluded():
    s = summary(ConfusionMatrix(3, np.array([[3, 1, 0], [0, 4, 0], [0, 0, 0]])))
    assert np.isnan(s["iou"][2])
    assert s["miou"] == pytest.approx((3 / 4 + 4 / 5) / 2)


def test_degenerate_kappa():
    assert summary(ConfusionMatrix(2, np.array([[5, 0], [0, 0]])))["kappa"] == 1.0
    assert summary(ConfusionMatrix(2, np.array([[0, 5], [0, 0]])))["kappa"] == 0.0


def test_permutation_equivariance():
    rng = np.random.default_rng(1)
    counts = rng.integers(0, 20, (4, 4))
    perm = np.array([2, 0, 3, 1])
    a = summary(ConfusionMatrix(4, counts))
    b = summary(ConfusionMatrix(4, counts[np.ix_(perm, perm)]))
    np.testing.assert_allclose(b["iou"], np.array(a["iou"])[perm], rtol=1e-15)
    for key in ("miou", "oa", "kappa"):
        assert b[key] == pytest.approx(a[key], abs=1e-15)


def test_bounds():
    rng = np.random.default_rng(2)
    for _ in range(50):
        s = summary(ConfusionMatrix(3, rng.integers(0, 9, (3, 3)) + np.eye(3, dtype=int)))
        assert 0 <= s["oa"] <= 1 and -1 <= s["kappa"] <= 1
        assert all(0 <= v <= 1 for v in s["iou"])


def test_merge_equals_joint_accumulation():
    rng = np.random.default_rng(3)
    p1, l1 = rng.integers(0, 4, (8, 8)), rng.integers(0, 4, (8, 8))
    p2, l2 = rng.integers(0, 4, (8, 8)), rng.integers(0, 4, (8, 8))
    a = ConfusionMatrix(4).update(p1, l1)
    b = ConfusionMatrix(4).update(p2, l2)
    joint = ConfusionMatrix(4).update(np.stack([p1, p2]), np.stack([l1, l2]))
    assert a + b == joint and b + a == joint
    assert summary(a.merge(b)) == summary(joint)


def test_out_of_range_reports_coordinates():
    label = np.zeros((3, 3), int)
    label[2, 1] = 5
    with pytest.raises(DataError, match=r"\(2, 1\)"):
        ConfusionMatrix(3).update(np.zeros((3, 3), int), label)
    pred = np.zeros((3, 3), int)
    pred[0, 2] = -1
    with pytest.raises(DataError, match=r"\(0, 2\)"):
        ConfusionMatrix(3).update(pred, np.zeros((3, 3), int))


def test_report_and_csv():
    s = summary(ConfusionMatrix(2, np.array([[40, 10], [5, 45]])))
    text = format_report(s, ["land", "water"])
    assert "mIoU   73.86" in text and "water" in text
    assert csv_header(2) == ["model", "seed", "miou", "oa", "kappa", "iou_0", "iou_1"]
    out = to_csv([csv_row("pwa-only", 0, s)], 2)
    assert out.splitlines()[1].startswith("pwa-only,0,0.738636,0.850000,0.700000")
