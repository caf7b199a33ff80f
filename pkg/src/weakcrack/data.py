"""Dataset layout, manifests and batch loading.

Canonical weak-label layout:

    root/<split>/crack/*.png   image-level positive samples
    root/<split>/road/*.png    image-level negative samples
    root/<split>/masks/*.png   optional pixel GT (same filename), eval only

Trainers only ever consume the class directories; masks are read by the
evaluation code. ``build_weak_dataset`` converts a pixel-labeled source
(images/ + masks/ pairs) into this layout by splitting each image into a
grid of patches and labeling every patch from its mask content.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .errors import DataError

CLASS_NAMES = ("road", "crack")  # index = label


@dataclass
class ImageSample:
    path: str          # relative to manifest root
    label: int         # 0 road, 1 crack
    mask: str | None = None  # relative path to pixel GT, if present


@dataclass
class DatasetManifest:
    root: str
    split: str
    samples: list = field(default_factory=list)

    def __len__(self):
        return len(self.samples)

    @property
    def class_counts(self):
        counts = [0, 0]
        for s in self.samples:
            counts[s.label] += 1
        return tuple(counts)


@dataclass
class Batch:
    images: torch.Tensor      # (N,3,S,S) float32, normalized
    images_raw: torch.Tensor  # (N,3,S,S) float32 in [0,1], for CRF / recon targets
    targets: torch.Tensor     # (N,2) float32 one-hot
    labels: torch.Tensor      # (N,) int64
    names: list
    crack_indices: list = field(default_factory=list)  # rows with label 1


# ------------------------------------------------------------------- scanning

def scan_directory(root, split: str) -> DatasetManifest:
    root = Path(root)
    split_dir = root / split
    if not split_dir.is_dir():
        raise DataError(f"split directory not found: {split_dir}")
    manifest = DatasetManifest(root=str(root), split=split)
    found_any = False
    for label, cls in enumerate(CLASS_NAMES):
        cls_dir = split_dir / cls
        if not cls_dir.is_dir():
            continue
        found_any = True
        for p in sorted(cls_dir.iterdir()):
            if p.suffix.lower() not in (".png", ".jpg", ".jpeg", ".bmp"):
                continue
            mask_rel = None
            mask_path = split_dir / "masks" / p.name
            if mask_path.is_file():
                mask_rel = str(mask_path.relative_to(root))
            manifest.samples.append(
                ImageSample(path=str(p.relative_to(root)), label=label, mask=mask_rel))
    if not found_any:
        raise DataError(f"{split_dir} has neither crack/ nor road/ subdirectory")
    if not manifest.samples:
        raise DataError(f"no images found under {split_dir}")
    return manifest


def save_manifest(manifest: DatasetManifest, path) -> None:
    d = dataclasses.asdict(manifest)
    Path(path).write_text(json.dumps(d, indent=1))


def load_manifest(path) -> DatasetManifest:
    path = Path(path)
    if not path.is_file():
        raise DataError(f"manifest not found: {path}")
    try:
        d = json.loads(path.read_text())
        samples = [ImageSample(**s) for s in d["samples"]]
        return DatasetManifest(root=d["root"], split=d["split"], samples=samples)
    except (KeyError, TypeError, json.JSONDecodeError) as e:
        raise DataError(f"malformed manifest {path}: {e}") from e


# -------------------------------------------------------------------- loading

def load_image(path) -> np.ndarray:
    """Read an image file as float32 RGB in [0,1], shape (H,W,3)."""
    path = Path(path)
    if not path.is_file():
        raise DataError(f"image not found: {path}")
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
    return arr


def load_mask(path) -> np.ndarray:
    """Read a pixel GT mask as uint8 {0,1}, shape (H,W). Any nonzero is crack."""
    path = Path(path)
    if not path.is_file():
        raise DataError(f"mask not found: {path}")
    with Image.open(path) as im:
        arr = np.asarray(im.convert("L"))
    return (arr > 0).astype(np.uint8)


def resize_image(arr: np.ndarray, size: int) -> np.ndarray:
    if arr.shape[0] == size and arr.shape[1] == size:
        return arr
    im = Image.fromarray((arr * 255.0 + 0.5).astype(np.uint8))
    im = im.resize((size, size), Image.BILINEAR)
    return np.asarray(im, dtype=np.float32) / 255.0


def normalize(images: torch.Tensor, mean, std) -> torch.Tensor:
    """Channelwise (x - mean) / std on an (N,3,H,W) tensor."""
    m = torch.tensor(mean, dtype=images.dtype).view(1, -1, 1, 1)
    s = torch.tensor(std, dtype=images.dtype).view(1, -1, 1, 1)
    return (images - m) / s


def compute_norm_stats(manifest: DatasetManifest, limit: int = 256):
    """Per-channel mean/std over (up to ``limit``) images of a manifest."""
    total = np.zeros(3, dtype=np.float64)
    total_sq = np.zeros(3, dtype=np.float64)
    npix = 0
    for s in manifest.samples[:limit]:
        arr = load_image(Path(manifest.root) / s.path).astype(np.float64)
        total += arr.sum(axis=(0, 1))
        total_sq += (arr ** 2).sum(axis=(0, 1))
        npix += arr.shape[0] * arr.shape[1]
    if npix == 0:
        raise DataError("cannot compute normalization stats of an empty manifest")
    mean = total / npix
    var = np.maximum(total_sq / npix - mean ** 2, 1e-8)
    return [float(m) for m in mean], [float(v) for v in np.sqrt(var)]


def epoch_indices(n: int, epoch: int, seed: int) -> np.ndarray:
    """Deterministic per-epoch shuffle; recomputable from (seed, epoch) alone."""
    rng = np.random.default_rng([seed, epoch])
    return rng.permutation(n)


def load_batch(manifest: DatasetManifest, indices, input_size: int,
               mean, std, augment: bool = False, seed: int = 0) -> Batch:
    """Assemble a batch from manifest rows. Bit-identical for equal arguments."""
    rng = np.random.default_rng([seed, 977]) if augment else None
    imgs, labels, names = [], [], []
    root = Path(manifest.root)
    for idx in indices:
        s = manifest.samples[int(idx)]
        arr = resize_image(load_image(root / s.path), input_size)
        if rng is not None and rng.random() < 0.5:
            arr = arr[:, ::-1, :].copy()
        imgs.append(arr)
        labels.append(s.label)
        names.append(s.path)
    raw = torch.from_numpy(np.stack(imgs).transpose(0, 3, 1, 2).copy())
    labels_t = torch.tensor(labels, dtype=torch.int64)
    targets = torch.zeros(len(labels), 2)
    targets[torch.arange(len(labels)), labels_t] = 1.0
    return Batch(images=normalize(raw, mean, std), images_raw=raw,
                 targets=targets, labels=labels_t, names=names,
                 crack_indices=[i for i, lb in enumerate(labels) if lb == 1])


# ------------------------------------------------------- weak dataset builder

def _grid_bounds(n: int, g: int):
    return [int(round(i * n / g)) for i in range(g + 1)]


def build_weak_dataset(source_root, out_root, grid: int = 1,
                       min_crack_pixels: int = 1, splits=("train", "test")) -> dict:
    """Split a pixel-labeled source into grid patches with image-level labels.

    Source layout: source/<split>/images/*.png + source/<split>/masks/*.png
    (same filenames). A patch is labeled crack iff its mask patch contains at
    least ``min_crack_pixels`` positive pixels and road iff the mask patch is
    all-zero; patches between the two thresholds are dropped. Mask patches are
    copied through for pixel-level evaluation on every split except train,
    which carries weak labels only.
    """
    source_root, out_root = Path(source_root), Path(out_root)
    counts = {}
    for split in splits:
        img_dir = source_root / split / "images"
        mask_dir = source_root / split / "masks"
        if not img_dir.is_dir() or not mask_dir.is_dir():
            raise DataError(f"source split {split} needs images/ and masks/ under "
                            f"{source_root / split}")
        write_masks = split != "train"
        n_crack = n_road = n_skipped = 0
        for img_path in sorted(img_dir.iterdir()):
            if img_path.suffix.lower() not in (".png", ".jpg", ".jpeg", ".bmp"):
                continue
            mask_path = mask_dir / img_path.name
            if not mask_path.is_file():
                raise DataError(f"missing mask for {img_path.name} in {mask_dir}")
            arr = load_image(img_path)
            mask = load_mask(mask_path)
            if mask.shape != arr.shape[:2]:
                raise DataError(f"mask/image shape mismatch for {img_path.name}")
            h_bounds = _grid_bounds(arr.shape[0], grid)
            w_bounds = _grid_bounds(arr.shape[1], grid)
            for i in range(grid):
                for j in range(grid):
                    sub = arr[h_bounds[i]:h_bounds[i + 1], w_bounds[j]:w_bounds[j + 1]]
                    sub_mask = mask[h_bounds[i]:h_bounds[i + 1],
                                    w_bounds[j]:w_bounds[j + 1]]
                    positives = int(sub_mask.sum())
                    if positives >= min_crack_pixels:
                        cls = "crack"
                        n_crack += 1
                    elif positives == 0:
                        cls = "road"
                        n_road += 1
                    else:  # damaged but below the crack threshold: ambiguous
                        n_skipped += 1
                        continue
                    stem = img_path.stem if grid == 1 else \
                        f"{img_path.stem}_r{i}c{j}"
                    out_img = out_root / split / cls / f"{stem}.png"
                    out_img.parent.mkdir(parents=True, exist_ok=True)
                    Image.fromarray((sub * 255.0 + 0.5).astype(np.uint8)).save(out_img)
                    if write_masks:
                        out_mask = out_root / split / "masks" / f"{stem}.png"
                        out_mask.parent.mkdir(parents=True, exist_ok=True)
                        Image.fromarray(sub_mask * 255).save(out_mask)
        if n_crack + n_road == 0:
            raise DataError(f"source split {split} contains no images")
        if n_road == 0:
            raise DataError(f"source split {split}: the all-zero-mask criterion "
                            f"produced no road patches")
        counts[split] = {"crack": n_crack, "road": n_road, "skipped": n_skipped}
    return counts
