"""Pixel metrics and full-image / patch-grid inference.

Counts accumulate over whole manifests (micro averaging by default, per-image
macro behind eval.average); degenerate denominators yield 0 and are reported
in the ``degenerate`` list instead of raising. Inference always gates the
detector behind the classifier: an image classified as road gets an empty
mask.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .data import DatasetManifest, load_image, load_mask, normalize
from .networks import normalize_cam


@dataclass
class ConfusionCounts:
    tp: int = 0
    fp: int = 0
    fn: int = 0
    tn: int = 0

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn


def accumulate(counts: ConfusionCounts, pred: np.ndarray,
               gt: np.ndarray) -> ConfusionCounts:
    if pred.shape != gt.shape:
        raise ValueError(f"pred {pred.shape} vs gt {gt.shape}")
    for name, arr in (("pred", pred), ("gt", gt)):
        vals = np.unique(arr)
        if not np.isin(vals, (0, 1)).all():
            raise ValueError(f"{name} must be binary, found values {vals[:5]}")
    p = pred.astype(bool)
    g = gt.astype(bool)
    counts.tp += int(np.count_nonzero(p & g))
    counts.fp += int(np.count_nonzero(p & ~g))
    counts.fn += int(np.count_nonzero(~p & g))
    counts.tn += int(np.count_nonzero(~p & ~g))
    return counts


def finalize(counts: ConfusionCounts) -> dict:
    """Precision/recall/F1/IoU/accuracy with explicit zero-division handling."""
    degenerate = []

    def ratio(num, den, name):
        if den == 0:
            degenerate.append(name)
            return 0.0
        return num / den

    precision = ratio(counts.tp, counts.tp + counts.fp, "precision")
    recall = ratio(counts.tp, counts.tp + counts.fn, "recall")
    f1 = ratio(2 * precision * recall, precision + recall, "f1")
    iou = ratio(counts.tp, counts.tp + counts.fp + counts.fn, "iou")
    accuracy = ratio(counts.tp + counts.tn, counts.total, "accuracy")
    return {"precision": precision, "recall": recall, "f1": f1, "iou": iou,
            "accuracy": accuracy, "degenerate": degenerate}


# ------------------------------------------------------------------- inference

def _prepare(image: np.ndarray, size: int, cfg) -> tuple:
    from .data import resize_image
    arr = resize_image(image, size)
    raw = torch.from_numpy(arr.transpose(2, 0, 1)[None].copy())
    return normalize(raw, cfg.data.normalize_mean, cfg.data.normalize_std), raw


@torch.no_grad()
def classify_image(models: dict, image: np.ndarray, cfg, device="cpu") -> int:
    """Image-level label: 1 iff sigmoid(crack logit) > 0.5, else 0 road."""
    x, _ = _prepare(image, cfg.data.input_size, cfg)
    logits = models["cls"](x.to(device))["logits"][0]
    return int(logits[1].item() > 0.0)


@torch.no_grad()
def detect_pixels(models: dict, image: np.ndarray, cfg, device="cpu") -> np.ndarray:
    """Detector probability map at input_size resolution, no gating."""
    x, _ = _prepare(image, cfg.data.input_size, cfg)
    x = x.to(device)
    feats = [models["cls"](x)["feature"]]
    if "rec_e" in models:
        feats.append(models["rec_e"](x)["z"])
    fused = models["fusion"](torch.cat(feats, dim=1))["features"]
    prob = torch.sigmoid(models["det"](fused))[0, 0]
    return prob.cpu().numpy()


def _resize_mask(mask: np.ndarray, hw) -> np.ndarray:
    if mask.shape == tuple(hw):
        return mask
    im = Image.fromarray((mask * 255).astype(np.uint8))
    im = im.resize((hw[1], hw[0]), Image.NEAREST)
    return (np.asarray(im) > 127).astype(np.uint8)


def predict_mask(models: dict, image: np.ndarray, cfg, device="cpu") -> np.ndarray:
    """Classifier-gated detector mask at the image's own resolution."""
    hw = image.shape[:2]
    if classify_image(models, image, cfg, device) == 0:
        return np.zeros(hw, dtype=np.uint8)
    prob = detect_pixels(models, image, cfg, device)
    return _resize_mask((prob > cfg.eval.threshold).astype(np.uint8), hw)


def patch_grid_infer(models: dict, image: np.ndarray, cfg, grid: int = None,
                     device="cpu") -> np.ndarray:
    """Split the image into a grid, run gated inference per cell, stitch.

    grid=1 degenerates to whole-image inference.
    """
    g = grid if grid is not None else cfg.eval.patch_grid
    if g < 1:
        raise ValueError("grid must be >= 1")
    h, w = image.shape[:2]
    if h < g or w < g:
        raise ValueError(f"image {h}x{w} smaller than {g}x{g} grid")
    hb = [int(round(i * h / g)) for i in range(g + 1)]
    wb = [int(round(j * w / g)) for j in range(g + 1)]
    out = np.zeros((h, w), dtype=np.uint8)
    for i in range(g):
        for j in range(g):
            cell = image[hb[i]:hb[i + 1], wb[j]:wb[j + 1]]
            out[hb[i]:hb[i + 1], wb[j]:wb[j + 1]] = \
                predict_mask(models, cell, cfg, device)
    return out


def evaluate_manifest(models: dict, manifest: DatasetManifest, cfg,
                      device="cpu") -> dict:
    """Classification accuracy over all samples plus pixel metrics over the
    samples that carry GT masks (micro pools counts, macro averages images)."""
    for m in models.values():
        m.eval()
    root = Path(manifest.root)
    counts = ConfusionCounts()
    per_image = []
    n_correct = 0
    for s in manifest.samples:
        image = load_image(root / s.path)
        label = classify_image(models, image, cfg, device)
        n_correct += int(label == s.label)
        if s.mask is not None:
            pred = patch_grid_infer(models, image, cfg)
            c = accumulate(ConfusionCounts(), pred, load_mask(root / s.mask))
            counts.tp += c.tp
            counts.fp += c.fp
            counts.fn += c.fn
            counts.tn += c.tn
            per_image.append(finalize(c))
    n_masked = len(per_image)
    if not n_masked:
        pixel = None
    elif cfg.eval.average == "macro":
        keys = ("precision", "recall", "f1", "iou", "accuracy")
        pixel = {k: sum(m[k] for m in per_image) / n_masked for k in keys}
        pixel["degenerate"] = sorted({d for m in per_image
                                      for d in m["degenerate"]})
    else:
        pixel = finalize(counts)
    result = {
        "split": manifest.split,
        "n_images": len(manifest),
        "n_with_masks": n_masked,
        "input_size": cfg.data.input_size,
        "average": cfg.eval.average,
        "classification_accuracy": n_correct / max(len(manifest), 1),
        "pixel": pixel,
        "counts": {"tp": counts.tp, "fp": counts.fp,
                   "fn": counts.fn, "tn": counts.tn},
    }
    return result


@torch.no_grad()
def export_cam_bundle(models: dict, image: np.ndarray, cfg, device="cpu") -> dict:
    """Raw material behind a prediction: normalized crack CAM, refined CRF
    marginal, and the binarized pseudo mask, all at input resolution."""
    from .pseudo_label import binarize_and_select, refine_cam
    x, raw = _prepare(image, cfg.data.input_size, cfg)
    cam_raw = models["cls"](x.to(device))["cam_raw"]
    cam = normalize_cam(cam_raw)[0, 1].cpu().numpy().astype(np.float64)
    img = raw[0].permute(1, 2, 0).numpy()
    marg = refine_cam(cam, img, cfg.crf)
    pm = binarize_and_select(marg, step=-1, min_pixels=cfg.train.min_pixels)
    return {"cam": cam, "marginal": marg[1], "pseudo": pm.mask,
            "valid": pm.valid}
