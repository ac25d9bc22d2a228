import json

import numpy as np
import pytest

from priorseg.dataio import ImageRecord
from priorseg.metrics import (
    dice,
    evaluate,
    format_summary,
    iou,
    save_report_csv,
    save_report_json,
)


class PerfectPredictor:
    def __init__(self, lookup):
        self.lookup = lookup

    def predict_mask(self, image, eval_size=None):
        return self.lookup[image.tobytes()]


def test_dice_and_iou_known_values():
    target = np.zeros((8, 8), np.uint8)
    target[2:6, 2:6] = 1  # 16 px
    pred = np.zeros((8, 8), np.uint8)
    pred[2:6, 2:4] = 1  # 8 px, all inside target
    assert dice(pred, target) == pytest.approx(2 * 8 / (8 + 16))
    assert iou(pred, target) == pytest.approx(0.5)


def test_identical_masks_score_one():
    rng = np.random.default_rng(0)
    mask = (rng.random((16, 16)) < 0.4).astype(np.uint8)
    assert dice(mask, mask) == 1.0
    assert iou(mask, mask) == 1.0


def test_disjoint_masks_score_zero():
    a = np.zeros((8, 8), np.uint8)
    a[:4] = 1
    b = np.zeros((8, 8), np.uint8)
    b[4:] = 1
    assert dice(a, b) == 0.0
    assert iou(a, b) == 0.0


def test_both_empty_masks_score_one():
    empty = np.zeros((8, 8), np.uint8)
    assert dice(empty, empty) == 1.0
    assert iou(empty, empty) == 1.0


def test_one_empty_mask_scores_zero():
    empty = np.zeros((8, 8), np.uint8)
    full = np.ones((8, 8), np.uint8)
    assert dice(empty, full) == 0.0
    assert iou(full, empty) == 0.0


def test_shape_mismatch_is_an_error():
    with pytest.raises(ValueError, match="shape mismatch"):
        dice(np.zeros((8, 8)), np.zeros((8, 9)))
    with pytest.raises(ValueError, match="shape mismatch"):
        iou(np.zeros((4, 4)), np.zeros((8, 8)))


def test_iou_follows_from_dice_identity():
    rng = np.random.default_rng(1)
    for _ in range(200):
        a = (rng.random((12, 12)) < rng.uniform(0.1, 0.9)).astype(np.uint8)
        b = (rng.random((12, 12)) < rng.uniform(0.1, 0.9)).astype(np.uint8)
        d = dice(a, b)
        assert iou(a, b) == pytest.approx(d / (2.0 - d), abs=1e-12)
        assert dice(a, b) == dice(b, a)
        assert 0.0 <= d <= 1.0


def _records_with_lookup(count, seed):
    rng = np.random.default_rng(seed)
    records, lookup = [], {}
    for i in range(count):
        image = rng.random((16, 16)).astype(np.float32)
        mask = (rng.random((16, 16)) < 0.5).astype(np.uint8)
        records.append(ImageRecord(f"rec{i}", image, mask, "synthetic"))
        lookup[image.tobytes()] = mask
    return records, lookup


def test_evaluate_perfect_predictor_scores_hundred():
    records, lookup = _records_with_lookup(6, seed=2)
    report = evaluate(PerfectPredictor(lookup), records)
    assert report.mean_dice == 100.0
    assert report.mean_iou == 100.0
    assert report.ids == [r.id for r in records]
    assert report.count == 6
    assert all(score == 100.0 for score in report.dice_scores)


def test_evaluate_reports_percentages():
    target = np.zeros((8, 8), np.uint8)
    target[2:6, 2:6] = 1
    pred = np.zeros((8, 8), np.uint8)
    pred[2:6, 2:4] = 1

    class Fixed:
        def predict_mask(self, image, eval_size=None):
            return pred

    record = ImageRecord("one", np.zeros((8, 8), np.float32), target, "synthetic")
    report = evaluate(Fixed(), [record])
    assert report.mean_dice == pytest.approx(100.0 * 2 * 8 / 24)
    assert report.mean_iou == pytest.approx(50.0)


def test_evaluate_requires_masks_and_records():
    record = ImageRecord("x", np.zeros((8, 8), np.float32), None, "synthetic")

    class Never:
        def predict_mask(self, image, eval_size=None):  # pragma: no cover
            raise AssertionError("should not be called")

    with pytest.raises(ValueError, match="ground-truth"):
        evaluate(Never(), [record])
    with pytest.raises(ValueError, match="empty"):
        evaluate(Never(), [])


def test_evaluate_fingerprint_tracks_eval_size():
    records, lookup = _records_with_lookup(3, seed=4)
    a = evaluate(PerfectPredictor(lookup), records, eval_size=None)
    b = evaluate(PerfectPredictor(lookup), records, eval_size=64)
    assert a.fingerprint != b.fingerprint


def test_report_serialization_roundtrip(tmp_path):
    records, lookup = _records_with_lookup(4, seed=5)
    report = evaluate(PerfectPredictor(lookup), records)
    json_path = save_report_json(report, tmp_path / "report.json")
    csv_path = save_report_csv(report, tmp_path / "report.csv")
    parsed = json.loads(json_path.read_text())
    assert parsed["mean_dice"] == 100.0
    assert parsed["ids"] == report.ids
    lines = csv_path.read_text().strip().splitlines()
    assert lines[0] == "id,dice,iou"
    assert lines[-1].startswith("mean,")
    assert len(lines) == 2 + len(records)
    summary = format_summary(report)
    assert "Dice" in summary and "IoU" in summary and "100.00" in summary
