import json

import numpy as np
import pytest
import torch
from PIL import Image

from fr3dnet_toy.data import ImageDataset


def synthetic_dataset(n_ids, per_id, seed=0, noise=0.08):
    """Easy per-identity block patterns at the network's input size."""
    rng = np.random.default_rng(seed)
    base = rng.uniform(0, 1, (n_ids, 8, 8, 3))
    images, labels = [], []
    for i in range(n_ids):
        up = np.kron(base[i], np.ones((20, 20, 1)))
        for _ in range(per_id):
            images.append(np.clip(up + rng.normal(0, noise, up.shape), 0, 1))
            labels.append(i)
    return ImageDataset(
        images=torch.from_numpy(np.stack(images)).permute(0, 3, 1, 2).float(),
        labels=torch.tensor(labels, dtype=torch.int64),
        scans=[f"scan{k}" for k in range(len(labels))],
        subjects=[f"id{v}" for v in labels],
    )


def write_png_manifest(outdir, dataset: ImageDataset):
    """Dataset to PNG files + JSON manifest (the file contract)."""
    outdir.mkdir(parents=True, exist_ok=True)
    records = []
    arrays = (dataset.images.permute(0, 2, 3, 1).numpy() * 255).astype(np.uint8)
    for k, arr in enumerate(arrays):
        name = f"img{k:04d}.png"
        Image.fromarray(arr, mode="RGB").save(outdir / name)
        records.append({
            "image": name,
            "label": int(dataset.labels[k]),
            "scan": dataset.scans[k],
            "subject": dataset.subjects[k],
        })
    manifest = outdir / "manifest.json"
    manifest.write_text(json.dumps(records, indent=2))
    return manifest


@pytest.fixture(scope="session")
def tiny_dataset():
    return synthetic_dataset(n_ids=5, per_id=6, seed=3)
