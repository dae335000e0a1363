import itertools
import json

import numpy as np
import pytest

from avprompt.metrics import eval_metrics, frame_fscore, frame_jaccard, null_score


def count_jaccard(pred, gt):
    inter = union = 0
    for p, g in zip(pred.ravel(), gt.ravel()):
        inter += int(p and g)
        union += int(p or g)
    return 1.0 if union == 0 else inter / union


def count_fscore(pred, gt, beta2=0.3):
    tp = fp = fn = 0
    for p, g in zip(pred.ravel(), gt.ravel()):
        tp += int(p and g)
        fp += int(p and not g)
        fn += int(g and not p)
    if tp + fp + fn == 0:
        return 1.0
    prec = tp / (tp + fp) if tp + fp else 0.0
    rec = tp / (tp + fn) if tp + fn else 0.0
    if beta2 * prec + rec == 0:
        return 0.0
    return (1 + beta2) * prec * rec / (beta2 * prec + rec)


def all_3x3_masks():
    return np.array([np.array(bits, bool).reshape(3, 3) for bits in itertools.product([0, 1], repeat=9)])


def test_hand_cases():
    a = np.zeros((4, 4), bool)
    a[:2] = True
    b = np.zeros((4, 4), bool)
    b[2:] = True
    half = np.zeros((4, 4), bool)
    half[1:3] = True
    assert frame_jaccard(a, a) == 1.0
    assert frame_jaccard(a, b) == 0.0
    # 4 shared pixels out of a union of 12
    assert frame_jaccard(a, half) == 1 / 3
    assert frame_fscore(a, a) == 1.0 and frame_fscore(a, b) == 0.0


def test_empty_conventions():
    empty = np.zeros((3, 3), bool)
    full = np.ones((3, 3), bool)
    assert frame_jaccard(empty, empty) == 1.0 and frame_fscore(empty, empty) == 1.0
    assert frame_jaccard(full, empty) == 0.0 and frame_fscore(full, empty) == 0.0


def test_all_512_masks_against_pixel_counting():
    preds = all_3x3_masks()
    gt = np.array([[1, 0, 0], [1, 1, 0], [0, 1, 0]], bool)
    gts = np.broadcast_to(gt, preds.shape)
    j = frame_jaccard(preds, gts)
    f = frame_fscore(preds, gts)
    j_ref = np.array([count_jaccard(p, gt) for p in preds])
    f_ref = np.array([count_fscore(p, gt) for p in preds])
    assert np.array_equal(j, j_ref)
    assert np.allclose(f, f_ref, rtol=0, atol=1e-15)
    report = eval_metrics(preds, gts)
    assert report.m_j == pytest.approx(j_ref.mean(), abs=1e-15)
    assert report.m_f == pytest.approx(f_ref.mean(), abs=1e-15)
    assert report.jf == pytest.approx((report.m_j + report.m_f) / 2, abs=1e-15)


def test_permutation_invariance():
    rng = np.random.default_rng(0)
    pred = rng.random((10, 5, 5)) > 0.5
    gt = rng.random((10, 5, 5)) > 0.5
    perm = rng.permutation(10)
    a, b = eval_metrics(pred, gt), eval_metrics(pred[perm], gt[perm])
    assert a.m_j == pytest.approx(b.m_j, abs=1e-15) and a.m_f == pytest.approx(b.m_f, abs=1e-15)


def test_null_score():
    empty = np.zeros((2, 4, 4), bool)
    assert null_score(empty) == 0.0
    quarter = np.zeros((4, 4), bool)
    quarter[:2, :2] = True
    assert null_score(np.stack([quarter, np.ones((4, 4), bool)])) == pytest.approx((0.5 + 1.0) / 2)


def test_report_columns_and_per_clip():
    pred = np.zeros((3, 2, 2), bool)
    gt = np.zeros((3, 2, 2), bool)
    gt[2, 0, 0] = True
    report = eval_metrics(pred, gt, ["a", "a", "b"], null_masks=pred[:2])
    row = report.row()
    assert row["M_J"] == pytest.approx(100 * 2 / 3, abs=1e-3)
    assert row["S"] == 0.0
    assert [r["clip_id"] for r in report.per_clip] == ["a", "b"]
    assert "M_J" in report.to_table()
    assert json.loads(report.to_json())["columns"]["M_J"] == row["M_J"]
    assert eval_metrics(pred, gt).s is None


def test_shape_mismatch():
    with pytest.raises(ValueError):
        eval_metrics(np.zeros((1, 2, 2)), np.zeros((1, 3, 3)))
