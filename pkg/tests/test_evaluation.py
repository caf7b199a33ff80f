import numpy as np
import pytest
import torch

from weakcrack.config import Config
from weakcrack.data import scan_directory
from weakcrack.evaluation import (ConfusionCounts, accumulate, classify_image,
                                  detect_pixels, evaluate_manifest, finalize,
                                  patch_grid_infer, predict_mask)
from weakcrack.training import build_models


def _brute_force(pairs):
    tp = fp = fn = tn = 0
    for pred, gt in pairs:
        for p, g in zip(pred.ravel().tolist(), gt.ravel().tolist()):
            if p and g:
                tp += 1
            elif p and not g:
                fp += 1
            elif not p and g:
                fn += 1
            else:
                tn += 1
    return tp, fp, fn, tn


def test_worked_four_by_four():
    pred = np.zeros((4, 4), dtype=np.uint8)
    gt = np.zeros((4, 4), dtype=np.uint8)
    pred[0, 0] = gt[0, 0] = 1
    pred[0, 1] = gt[0, 1] = 1          # tp = 2
    pred[1, 0] = 1                     # fp = 1
    gt[2, 0] = 1                       # fn = 1
    c = accumulate(ConfusionCounts(), pred, gt)
    assert (c.tp, c.fp, c.fn, c.tn) == (2, 1, 1, 12)
    m = finalize(c)
    assert m["precision"] == 2 / 3
    assert m["recall"] == 2 / 3
    assert abs(m["f1"] - 2 / 3) < 1e-12
    assert m["iou"] == 0.5
    assert m["accuracy"] == 14 / 16
    assert m["degenerate"] == []


def test_trivial_count_cases():
    ones = np.ones((4, 4), dtype=np.uint8)
    zeros = np.zeros((4, 4), dtype=np.uint8)
    c = accumulate(ConfusionCounts(), ones, ones)
    assert c.fp == 0 and c.fn == 0
    c = accumulate(ConfusionCounts(), ones, zeros)
    assert c.fp == 16
    perfect = finalize(accumulate(ConfusionCounts(), ones, ones))
    for key in ("precision", "recall", "f1", "iou", "accuracy"):
        assert perfect[key] == 1.0


def test_accumulate_validates_inputs():
    with pytest.raises(ValueError):
        accumulate(ConfusionCounts(), np.zeros((2, 2)), np.zeros((2, 3)))
    with pytest.raises(ValueError):
        accumulate(ConfusionCounts(), np.full((2, 2), 2), np.zeros((2, 2)))


def test_matches_brute_force_and_is_order_invariant():
    rng = np.random.default_rng(0)
    pairs = []
    for _ in range(20):
        h, w = rng.integers(1, 9, size=2)
        pairs.append(((rng.random((h, w)) > 0.5).astype(np.uint8),
                      (rng.random((h, w)) > 0.5).astype(np.uint8)))
    c = ConfusionCounts()
    for pred, gt in pairs:
        accumulate(c, pred, gt)
    assert (c.tp, c.fp, c.fn, c.tn) == _brute_force(pairs)
    assert c.total == sum(p.size for p, _ in pairs)
    c_rev = ConfusionCounts()
    for pred, gt in reversed(pairs):
        accumulate(c_rev, pred, gt)
    assert (c.tp, c.fp, c.fn, c.tn) == (c_rev.tp, c_rev.fp, c_rev.fn, c_rev.tn)


def test_degenerate_flags():
    zeros = np.zeros((3, 3), dtype=np.uint8)
    m = finalize(accumulate(ConfusionCounts(), zeros, zeros))
    assert m["precision"] == 0.0 and "precision" in m["degenerate"]
    assert "recall" in m["degenerate"] and "iou" in m["degenerate"]
    assert m["accuracy"] == 1.0


def test_f1_iou_relationship():
    # micro F1 and IoU are tied by iou = f1 / (2 - f1); the benchmark pair
    # (81.760, 69.148) satisfies it within rounding of 3-decimal percentages
    c = ConfusionCounts(tp=81760, fp=18240, fn=18240, tn=0)
    m = finalize(c)
    assert abs(m["f1"] - 0.81760) < 1e-12
    assert abs(m["iou"] - m["f1"] / (2.0 - m["f1"])) < 1e-12
    assert abs(m["iou"] * 100 - 69.148) < 2e-3


class _StubClassifier(torch.nn.Module):
    def __init__(self, crack_logit):
        super().__init__()
        self.crack_logit = crack_logit

    def forward(self, x):
        n = x.shape[0]
        logits = torch.tensor([[0.0, self.crack_logit]]).repeat(n, 1)
        return {"logits": logits, "cam_raw": torch.zeros(n, 2, 4, 4),
                "feature": torch.zeros(n, 8, 4, 4)}


def test_classifier_gate_threshold():
    cfg = Config()
    cfg.data.input_size = 32
    image = np.random.default_rng(0).random((32, 32, 3)).astype(np.float32)
    for logit, expect in ((0.3, 1), (0.0, 0), (-0.3, 0)):
        models = {"cls": _StubClassifier(logit)}
        assert classify_image(models, image, cfg) == expect


def test_road_classification_short_circuits_detector():
    class Exploding(torch.nn.Module):
        def forward(self, x):
            raise AssertionError("detector must not run for road images")

    cfg = Config()
    cfg.data.input_size = 32
    models = {"cls": _StubClassifier(-1.0), "det": Exploding(),
              "fusion": Exploding()}
    image = np.random.default_rng(1).random((32, 32, 3)).astype(np.float32)
    mask = predict_mask(models, image, cfg)
    assert mask.shape == (32, 32) and mask.sum() == 0


def _tiny_models(seed=0):
    torch.manual_seed(seed)
    cfg = Config()
    cfg.data.input_size = 32
    cfg.model.backbone = "tiny_test"
    cfg.model.width = 4
    models = build_models(cfg.model, cfg.attention)
    for m in models.values():
        m.eval()
    return cfg, models


def test_detect_pixels_geometry():
    cfg, models = _tiny_models()
    image = np.random.default_rng(2).random((40, 40, 3)).astype(np.float32)
    prob = detect_pixels(models, image, cfg)
    assert prob.shape == (32, 32)
    assert prob.min() >= 0.0 and prob.max() <= 1.0


def test_patch_grid_matches_per_patch_stitch():
    cfg, models = _tiny_models(seed=3)
    image = np.random.default_rng(3).random((30, 34, 3)).astype(np.float32)
    whole = patch_grid_infer(models, image, cfg, grid=1)
    assert np.array_equal(whole, predict_mask(models, image, cfg))

    grid = 2
    out = patch_grid_infer(models, image, cfg, grid=grid)
    assert out.shape == image.shape[:2]
    assert set(np.unique(out)) <= {0, 1}
    h, w = image.shape[:2]
    hb = [round(i * h / grid) for i in range(grid + 1)]
    wb = [round(j * w / grid) for j in range(grid + 1)]
    for i in range(grid):
        for j in range(grid):
            cell = image[hb[i]:hb[i + 1], wb[j]:wb[j + 1]]
            ref = predict_mask(models, cell, cfg)
            assert np.array_equal(out[hb[i]:hb[i + 1], wb[j]:wb[j + 1]], ref)


def test_patch_grid_rejects_small_images():
    cfg, models = _tiny_models()
    with pytest.raises(ValueError):
        patch_grid_infer(models, np.zeros((2, 2, 3), dtype=np.float32), cfg,
                         grid=3)


def test_evaluate_manifest_micro_macro(corpus_dir):
    cfg, models = _tiny_models(seed=4)
    cfg.data.root = str(corpus_dir)
    manifest = scan_directory(corpus_dir, "test")
    micro = evaluate_manifest(models, manifest, cfg)
    assert micro["n_images"] == 6 and micro["n_with_masks"] == 6
    assert micro["input_size"] == 32 and micro["average"] == "micro"
    assert 0.0 <= micro["classification_accuracy"] <= 1.0
    counts = micro["counts"]
    assert counts["tp"] + counts["fp"] + counts["fn"] + counts["tn"] \
        == 6 * 32 * 32
    cfg.eval.average = "macro"
    macro = evaluate_manifest(models, manifest, cfg)
    assert macro["average"] == "macro"
    for key in ("precision", "recall", "f1", "iou", "accuracy"):
        assert 0.0 <= macro["pixel"][key] <= 1.0
    # pooled counts are averaging-independent
    assert macro["counts"] == micro["counts"]
