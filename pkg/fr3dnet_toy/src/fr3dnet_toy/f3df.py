"""F3DF feature-file writer: the binary contract with the evaluation
toolkit. Layout: magic 'F3DF', u32 dim, u32 count, count x dim float32
rows, all little-endian, plus a JSON id index alongside."""

from __future__ import annotations

import json
import struct

import numpy as np

MAGIC = b"F3DF"


def write_features(path, values: np.ndarray, subjects, scans) -> None:
    values = np.asarray(values, dtype=np.float32)
    if values.ndim != 2:
        raise ValueError("values must be (count, dim)")
    if len(subjects) != len(values) or len(scans) != len(values):
        raise ValueError("label lists must match the row count")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", values.shape[1], values.shape[0]))
        fh.write(values.astype("<f4").tobytes())
    index = {
        "dim": int(values.shape[1]),
        "count": int(values.shape[0]),
        "ids": [{"subject": s, "scan": c} for s, c in zip(subjects, scans)],
    }
    with open(str(path) + ".json", "w") as fh:
        json.dump(index, fh, indent=2, sort_keys=True)
        fh.write("\n")


def read_features(path) -> tuple[np.ndarray, list, list]:
    with open(path, "rb") as fh:
        if fh.read(4) != MAGIC:
            raise ValueError(f"{path}: bad magic")
        dim, count = struct.unpack("<II", fh.read(8))
        values = np.frombuffer(fh.read(4 * dim * count),
                               dtype="<f4").reshape(count, dim)
    with open(str(path) + ".json") as fh:
        index = json.load(fh)
    return (values.copy(),
            [r["subject"] for r in index["ids"]],
            [r["scan"] for r in index["ids"]])
