"""Dataset handling: PNG geometry images listed in a JSON manifest.

The training manifest is a list of records {"image": path, "label": int,
"scan": str, "subject": str}; paths resolve relative to the manifest.
The images are the primary pipeline's PNG outputs (160x160x3, 8 bit).
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .net import INPUT_SIZE


class ShapeMismatch(Exception):
    pass


class DataTooSmall(Exception):
    pass


@dataclass
class ImageDataset:
    images: torch.Tensor  # (N, 3, H, W) float32 in [0, 1]
    labels: torch.Tensor  # (N,) int64
    scans: list[str]
    subjects: list[str]

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def n_classes(self) -> int:
        return int(self.labels.max().item()) + 1


def load_png(path) -> np.ndarray:
    arr = np.asarray(Image.open(path))
    if arr.ndim == 3 and arr.shape[2] == 4:
        arr = arr[:, :, :3]
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise ShapeMismatch(f"{path}: expected an RGB image, got {arr.shape}")
    if arr.shape[:2] != (INPUT_SIZE, INPUT_SIZE):
        raise ShapeMismatch(
            f"{path}: expected {INPUT_SIZE}x{INPUT_SIZE}, got {arr.shape[:2]}")
    return arr


def load_dataset(manifest_path) -> ImageDataset:
    manifest_path = Path(manifest_path)
    with open(manifest_path) as fh:
        records = json.load(fh)
    if not records:
        raise DataTooSmall("manifest lists no images")
    images = np.stack([load_png(manifest_path.parent / r["image"])
                       for r in records])
    labels = np.array([int(r["label"]) for r in records], dtype=np.int64)
    scans = [r.get("scan", r["image"]) for r in records]
    subjects = [str(r.get("subject", r["label"])) for r in records]
    return ImageDataset(
        images=torch.from_numpy(images).permute(0, 3, 1, 2).float() / 255.0,
        labels=torch.from_numpy(labels),
        scans=scans,
        subjects=subjects,
    )


def stratified_split(labels: torch.Tensor, train_fraction: float,
                     seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Per-identity split; every identity keeps at least one training scan."""
    rng = np.random.default_rng(seed)
    lab = labels.numpy()
    train_idx, val_idx = [], []
    for value in np.unique(lab):
        rows = np.flatnonzero(lab == value)
        rng.shuffle(rows)
        cut = max(1, int(round(train_fraction * len(rows))))
        train_idx.extend(rows[:cut])
        val_idx.extend(rows[cut:])
    return np.sort(np.array(train_idx)), np.sort(np.array(val_idx))
