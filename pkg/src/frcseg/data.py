"""Dataset scanning, split manifests, batch loading and a synthetic corpus.

Supported folder layouts:

* ``generic`` / ``kvasir``: ``root/images/*`` and ``root/masks/*`` paired by
  file stem.
* ``isic``: the official 2016 lesion segmentation layout with
  ``ISBI2016_ISIC_Part1_Training_Data`` / ``_GroundTruth`` directories and a
  ``_Segmentation`` suffix on mask stems; the official test directories, when
  present, become the predefined test split.

Splits are written as JSON manifests holding labeled, unlabeled and test id
lists plus the seed and ratio that produced them. Batch order is a pure
function of (ids, seed, stream, epoch), so runs are reproducible and labeled
and unlabeled streams do not disturb each other.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image
from scipy.ndimage import gaussian_filter

from .errors import ConfigError, DataError

logger = logging.getLogger(__name__)

IMAGE_EXTENSIONS = (".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff")
LAYOUTS = ("generic", "kvasir", "isic", "synth")


@dataclass
class DatasetIndex:
    """Id -> (image path, mask path), plus any predefined test ids."""

    entries: dict[str, tuple[Path, Path]]
    predefined_test_ids: list[str] | None = None


@dataclass
class SplitManifest:
    labeled_ids: list[str]
    unlabeled_ids: list[str]
    test_ids: list[str]
    seed: int
    ratio: float

    def validate(self) -> None:
        groups = [set(self.labeled_ids), set(self.unlabeled_ids), set(self.test_ids)]
        total = sum(len(g) for g in groups)
        if len(groups[0] | groups[1] | groups[2]) != total:
            raise DataError("split manifest has overlapping id groups")
        if not self.labeled_ids:
            raise DataError("split manifest has no labeled ids")

    def save(self, path: str | Path) -> None:
        payload = {"labeled_ids": self.labeled_ids, "unlabeled_ids": self.unlabeled_ids,
                   "test_ids": self.test_ids, "seed": self.seed, "ratio": self.ratio}
        Path(path).write_text(json.dumps(payload, indent=2))

    @classmethod
    def load(cls, path: str | Path) -> "SplitManifest":
        try:
            payload = json.loads(Path(path).read_text())
            manifest = cls(list(payload["labeled_ids"]), list(payload["unlabeled_ids"]),
                           list(payload["test_ids"]), int(payload["seed"]),
                           float(payload["ratio"]))
        except (OSError, KeyError, ValueError, TypeError) as exc:
            raise DataError(f"cannot read split manifest {path}: {exc}") from exc
        manifest.validate()
        return manifest


def _collect_files(directory: Path) -> dict[str, Path]:
    files = {}
    for f in sorted(directory.iterdir()):
        if f.is_file() and f.suffix.lower() in IMAGE_EXTENSIONS:
            files[f.stem] = f
    return files


def _pair_dirs(image_dir: Path, mask_dir: Path, mask_suffix: str = "") -> dict[str, tuple[Path, Path]]:
    if not image_dir.is_dir():
        raise DataError(f"missing image directory {image_dir}")
    if not mask_dir.is_dir():
        raise DataError(f"missing mask directory {mask_dir}")
    images = _collect_files(image_dir)
    masks = _collect_files(mask_dir)
    entries = {}
    for stem, image_path in images.items():
        mask_path = masks.get(stem + mask_suffix)
        if mask_path is None:
            logger.warning("image '%s' has no mask, skipping it", stem)
            continue
        entries[stem] = (image_path, mask_path)
    return entries


def scan_dataset(root: str | Path, layout: str = "generic") -> DatasetIndex:
    """Index a dataset folder. Unpaired images are skipped with a warning."""
    root = Path(root)
    if not root.is_dir():
        raise DataError(f"dataset root {root} does not exist")
    if layout in ("generic", "kvasir"):
        entries = _pair_dirs(root / "images", root / "masks")
        index = DatasetIndex(entries)
    elif layout == "isic":
        entries = _pair_dirs(root / "ISBI2016_ISIC_Part1_Training_Data",
                             root / "ISBI2016_ISIC_Part1_Training_GroundTruth",
                             mask_suffix="_Segmentation")
        test_dir = root / "ISBI2016_ISIC_Part1_Test_Data"
        predefined = None
        if test_dir.is_dir():
            test_entries = _pair_dirs(test_dir,
                                      root / "ISBI2016_ISIC_Part1_Test_GroundTruth",
                                      mask_suffix="_Segmentation")
            overlap = set(entries) & set(test_entries)
            if overlap:
                raise DataError(f"ids appear in both train and test: {sorted(overlap)[:5]}")
            entries.update(test_entries)
            predefined = sorted(test_entries)
        index = DatasetIndex(entries, predefined)
    else:
        raise ConfigError(f"unknown dataset layout '{layout}', expected one of {LAYOUTS[:3]}")
    if not index.entries:
        raise DataError(f"no usable image/mask pairs under {root}")
    return index


def make_split(index: "DatasetIndex | Sequence[str]", ratio: float, seed: int,
               test_fraction: float = 0.2) -> SplitManifest:
    """Deterministic labeled/unlabeled/test split.

    The test set is held out first (the predefined test ids when the layout
    ships them, otherwise a ``test_fraction`` share), then ``ratio`` of the
    remainder becomes labeled (count rounded up) and the rest unlabeled.
    """
    if not 0.0 < ratio <= 1.0:
        raise ConfigError(f"labeled ratio must be in (0, 1], got {ratio}")
    if not 0.0 <= test_fraction < 1.0:
        raise ConfigError(f"test_fraction must be in [0, 1), got {test_fraction}")
    if isinstance(index, DatasetIndex):
        ids = sorted(index.entries)
        predefined = index.predefined_test_ids
    else:
        ids = sorted(index)
        predefined = None
    if not ids:
        raise DataError("cannot split an empty dataset")
    rng = np.random.default_rng(seed)
    order = [ids[i] for i in rng.permutation(len(ids))]
    if predefined is not None:
        test = list(predefined)
        held = set(test)
        remainder = [i for i in order if i not in held]
    else:
        n_test = int(round(test_fraction * len(order)))
        test = sorted(order[:n_test])
        remainder = order[n_test:]
    if not remainder:
        raise DataError("test split consumed every sample")
    # epsilon guards against float noise pushing ceil one too high
    n_labeled = min(len(remainder), math.ceil(ratio * len(remainder) - 1e-9))
    n_labeled = max(1, n_labeled)
    manifest = SplitManifest(sorted(remainder[:n_labeled]), sorted(remainder[n_labeled:]),
                             test, seed, ratio)
    manifest.validate()
    return manifest


class FolderSource:
    """Loads image/mask pairs from an on-disk index."""

    def __init__(self, entries: dict[str, tuple[Path, Path]]):
        self.entries = entries

    def ids(self) -> list[str]:
        return sorted(self.entries)

    def load(self, sample_id: str) -> tuple[np.ndarray, np.ndarray]:
        if sample_id not in self.entries:
            raise DataError(f"unknown sample id '{sample_id}'")
        image_path, mask_path = self.entries[sample_id]
        with Image.open(image_path) as im:
            image = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
        with Image.open(mask_path) as im:
            mask = (np.asarray(im.convert("L"), dtype=np.float32) > 127.5).astype(np.uint8)
        return image, mask


class SyntheticSource:
    """In-memory image/mask pairs."""

    def __init__(self, images: dict[str, np.ndarray], masks: dict[str, np.ndarray]):
        self.images = images
        self.masks = masks

    def ids(self) -> list[str]:
        return sorted(self.images)

    def load(self, sample_id: str) -> tuple[np.ndarray, np.ndarray]:
        if sample_id not in self.images:
            raise DataError(f"unknown sample id '{sample_id}'")
        return self.images[sample_id], self.masks[sample_id]

    def save_folder(self, root: str | Path) -> Path:
        """Materialize as a 'generic' layout folder of PNGs."""
        root = Path(root)
        (root / "images").mkdir(parents=True, exist_ok=True)
        (root / "masks").mkdir(parents=True, exist_ok=True)
        for sid in self.ids():
            image, mask = self.images[sid], self.masks[sid]
            Image.fromarray(np.clip(image * 255.0, 0, 255).round().astype(np.uint8)).save(
                root / "images" / f"{sid}.png")
            Image.fromarray((mask * 255).astype(np.uint8)).save(
                root / "masks" / f"{sid}.png")
        return root


def _synth_sample(rng: np.random.Generator, size: int) -> tuple[np.ndarray, np.ndarray]:
    ys, xs = np.mgrid[0:size, 0:size].astype(np.float64)
    for _ in range(200):
        base = rng.uniform(0.35, 0.60)
        tint = rng.uniform(-0.04, 0.04, size=3)
        image = np.full((size, size, 3), base, dtype=np.float64) + tint
        for _ in range(3):
            fx, fy = rng.uniform(-3.0, 3.0, size=2) / size
            phase = rng.uniform(0.0, 2.0 * math.pi)
            amp = rng.uniform(0.01, 0.04)
            wave = amp * np.sin(2.0 * math.pi * (fx * xs + fy * ys) + phase)
            image += wave[..., None] * rng.uniform(0.5, 1.0, size=3)
        image += rng.normal(0.0, 0.015, size=(size, size, 3))

        mask = np.zeros((size, size), dtype=bool)
        offset = np.zeros((size, size), dtype=np.float64)
        for _ in range(int(rng.integers(1, 4))):
            cx, cy = rng.uniform(0.20 * size, 0.80 * size, size=2)
            rx, ry = rng.uniform(0.08 * size, 0.24 * size, size=2)
            theta = rng.uniform(0.0, math.pi)
            dx, dy = xs - cx, ys - cy
            u = dx * math.cos(theta) + dy * math.sin(theta)
            v = -dx * math.sin(theta) + dy * math.cos(theta)
            r2 = (u / rx) ** 2 + (v / ry) ** 2
            mask |= r2 <= 1.0
            delta = rng.choice([-1.0, 1.0]) * rng.uniform(0.06, 0.16)
            offset += delta * np.clip(1.15 - r2, 0.0, 1.0)
        coverage = mask.mean()
        if 0.02 <= coverage <= 0.40:
            offset = gaussian_filter(offset, sigma=0.7)
            image += offset[..., None] * rng.uniform(0.85, 1.15, size=3)
            image = np.clip(image, 0.01, 0.99)
            return image.astype(np.float32), mask.astype(np.uint8)
    raise DataError("could not draw a synthetic mask within coverage bounds")


def synth_dataset(n: int, size: int = 64, seed: int = 0) -> SyntheticSource:
    """Deterministic synthetic corpus: low-contrast blobs on textured ground.

    Foreground coverage of every mask lies in [0.02, 0.40]. The same
    (n, size, seed) always produces bit-identical arrays.
    """
    if n < 1:
        raise ConfigError(f"need at least one synthetic sample, got n={n}")
    if size < 16:
        raise ConfigError(f"synthetic size must be >= 16, got {size}")
    rng = np.random.default_rng(seed)
    images, masks = {}, {}
    for i in range(n):
        image, mask = _synth_sample(rng, size)
        sid = f"synth_{i:04d}"
        images[sid] = image
        masks[sid] = mask
    return SyntheticSource(images, masks)


def load_batch(source, ids: Sequence[str], target_size: int,
               with_masks: bool = True) -> tuple[torch.Tensor, torch.Tensor | None]:
    """Load and resize a batch.

    Images are resized bilinearly to (target_size, target_size) and clamped
    to [0, 1]; masks use nearest neighbor and stay strictly binary. When the
    stored size already matches, pixels pass through untouched. Unlabeled
    batches are requested with ``with_masks=False`` and carry no masks at all.
    """
    if not ids:
        raise DataError("empty batch request")
    images, masks = [], []
    for sid in ids:
        try:
            image, mask = source.load(sid)
        except DataError:
            raise
        except Exception as exc:
            raise DataError(f"failed to load sample '{sid}': {exc}") from exc
        t = torch.from_numpy(np.ascontiguousarray(image)).permute(2, 0, 1).float()
        if t.shape[-2:] != (target_size, target_size):
            t = F.interpolate(t[None], size=(target_size, target_size),
                              mode="bilinear", align_corners=False)[0]
        images.append(t.clamp(0.0, 1.0))
        if with_masks:
            if mask is None:
                raise DataError(f"sample '{sid}' has no mask")
            m = torch.from_numpy(np.ascontiguousarray(mask)).float()
            if m.shape != (target_size, target_size):
                m = F.interpolate(m[None, None], size=(target_size, target_size),
                                  mode="nearest")[0, 0]
            masks.append((m > 0.5).long())
    batch = torch.stack(images)
    return batch, (torch.stack(masks) if with_masks else None)


def epoch_batches(ids: Sequence[str], batch_size: int, seed: int, epoch: int,
                  stream: int = 0, shuffle: bool = True,
                  drop_last: bool = True) -> list[list[str]]:
    """Batch id lists for one epoch, a pure function of its arguments."""
    if batch_size < 1:
        raise ConfigError(f"batch_size must be >= 1, got {batch_size}")
    ids = list(ids)
    if not ids:
        return []
    if shuffle:
        rng = np.random.default_rng([seed, stream, epoch])
        ids = [ids[i] for i in rng.permutation(len(ids))]
    if len(ids) <= batch_size:
        return [ids]
    batches = [ids[i:i + batch_size] for i in range(0, len(ids), batch_size)]
    if drop_last and len(batches[-1]) < batch_size:
        batches.pop()
    return batches


def cycling_batches(ids: Sequence[str], batch_size: int, seed: int,
                    stream: int = 0) -> Iterator[list[str]]:
    """Endless batch stream: reshuffles every epoch, deterministic per stream."""
    epoch = 0
    while True:
        for batch in epoch_batches(ids, batch_size, seed, epoch, stream):
            yield batch
        epoch += 1
