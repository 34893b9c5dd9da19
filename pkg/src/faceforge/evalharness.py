"""Closed- and open-world identification with a single-sample gallery.

The gallery enrolls exactly one scan per subject (first neutral scan,
else first available). Probes are matched by cosine similarity; results
come out as CMC curves, ROC curves over score thresholds, and an
open-world sweep over the unknown-person acceptance rate tau, where the
acceptance threshold at each tau is the tau-quantile of the probe top-1
scores (tau = 0 rejects everything, tau = 1 accepts everything).
"""

from __future__ import annotations

import csv
import json
import struct
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .errors import (
    DimensionMismatch,
    EmptyGalleryAfterRemoval,
    InvalidCounts,
    NoGenuinePairs,
    Unachievable,
    UnknownProbeInClosedWorld,
    ZeroVector,
)

UNKNOWN = "UNKNOWN"

F3DF_MAGIC = b"F3DF"


# --- feature files -------------------------------------------------------------


@dataclass
class FeatureSet:
    """Feature vectors with subject and scan labels, one row per scan."""

    values: np.ndarray
    subjects: list
    scans: list[str]

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 2:
            raise DimensionMismatch("values must be a 2-D array")
        if not np.isfinite(v).all():
            raise ValueError("feature vectors contain NaN/Inf")
        if len(self.subjects) != len(v) or len(self.scans) != len(v):
            raise DimensionMismatch("labels disagree with the row count")
        self.values = v

    @property
    def dim(self) -> int:
        return self.values.shape[1]

    def row_of(self, scan: str) -> int:
        try:
            return self.scans.index(scan)
        except ValueError:
            raise KeyError(f"scan {scan!r} not in the feature set") from None


def save_features(features: FeatureSet, path) -> None:
    """Binary: magic 'F3DF', u32 dim, u32 count, count x dim float32 rows,
    little-endian; subject/scan labels go to a JSON index alongside."""
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(F3DF_MAGIC)
        fh.write(struct.pack("<II", features.dim, len(features.values)))
        fh.write(features.values.astype("<f4").tobytes())
    index = {
        "dim": features.dim,
        "count": len(features.values),
        "ids": [{"subject": s, "scan": c}
                for s, c in zip(features.subjects, features.scans)],
    }
    with open(str(path) + ".json", "w") as fh:
        json.dump(index, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_features(path) -> FeatureSet:
    """Reads the F3DF binary (with its JSON index) or a CSV fallback with
    rows subject,scan,f0,f1,..."""
    path = Path(path)
    if path.suffix.lower() == ".csv":
        return _load_features_csv(path)
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != F3DF_MAGIC:
            raise ValueError(f"{path}: bad magic {magic!r}")
        dim, count = struct.unpack("<II", fh.read(8))
        data = np.frombuffer(fh.read(4 * dim * count), dtype="<f4")
    if data.size != dim * count:
        raise ValueError(f"{path}: truncated feature data")
    with open(str(path) + ".json") as fh:
        index = json.load(fh)
    ids = index["ids"]
    if len(ids) != count:
        raise ValueError(f"{path}: index lists {len(ids)} ids for {count} rows")
    return FeatureSet(
        values=data.reshape(count, dim).astype(np.float64),
        subjects=[r["subject"] for r in ids],
        scans=[r["scan"] for r in ids],
    )


def _load_features_csv(path: Path) -> FeatureSet:
    subjects, scans, rows = [], [], []
    with open(path, newline="") as fh:
        for rec in csv.reader(fh):
            if not rec or rec[0].startswith("#"):
                continue
            subjects.append(rec[0])
            scans.append(rec[1])
            rows.append([float(v) for v in rec[2:]])
    return FeatureSet(values=np.array(rows), subjects=subjects, scans=scans)


# --- manifest -------------------------------------------------------------------


@dataclass(frozen=True)
class ManifestEntry:
    subject: str | None  # None marks an unknown probe
    scan: str
    feature_file: str | None = None


@dataclass
class EvalManifest:
    gallery: list[ManifestEntry]
    probes: list[ManifestEntry]
    feature_dim: int
    gallery_rule: str = "first neutral scan, else first available"

    def __post_init__(self):
        subjects = [e.subject for e in self.gallery]
        if None in subjects:
            raise ValueError("gallery entries must carry a subject")
        if len(set(subjects)) != len(subjects):
            raise ValueError("gallery subjects must be unique")

    @property
    def closed_world(self) -> bool:
        enrolled = {e.subject for e in self.gallery}
        return all(p.subject is not None and p.subject in enrolled
                   for p in self.probes)


def save_manifest(manifest: EvalManifest, path) -> None:
    payload = {
        "feature_dim": manifest.feature_dim,
        "gallery_rule": manifest.gallery_rule,
        "gallery": [{"subject": e.subject, "scan": e.scan,
                     "feature_file": e.feature_file} for e in manifest.gallery],
        "probes": [{"subject": e.subject if e.subject is not None else UNKNOWN,
                    "scan": e.scan, "feature_file": e.feature_file}
                   for e in manifest.probes],
    }
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_manifest(path) -> EvalManifest:
    with open(path) as fh:
        payload = json.load(fh)
    gallery = [ManifestEntry(e["subject"], e["scan"], e.get("feature_file"))
               for e in payload["gallery"]]
    probes = [ManifestEntry(None if e["subject"] == UNKNOWN else e["subject"],
                            e["scan"], e.get("feature_file"))
              for e in payload["probes"]]
    return EvalManifest(gallery=gallery, probes=probes,
                        feature_dim=payload["feature_dim"],
                        gallery_rule=payload.get("gallery_rule", ""))


def build_manifest(scans, feature_dim: int,
                   feature_file: str | None = None) -> EvalManifest:
    """Single-sample-gallery manifest from (subject, scan, expression)
    records: the first neutral scan of each subject is enrolled, else its
    first scan; everything else probes."""
    first_any: dict[str, int] = {}
    first_neutral: dict[str, int] = {}
    for i, (subject, scan, expression) in enumerate(scans):
        first_any.setdefault(subject, i)
        if expression == 0:
            first_neutral.setdefault(subject, i)
    chosen = {s: first_neutral.get(s, first_any[s]) for s in first_any}
    gallery_rows = set(chosen.values())
    gallery = [ManifestEntry(scans[i][0], scans[i][1], feature_file)
               for i in sorted(gallery_rows)]
    probes = [ManifestEntry(subject, scan, feature_file)
              for i, (subject, scan, _) in enumerate(scans)
              if i not in gallery_rows]
    return EvalManifest(gallery=gallery, probes=probes, feature_dim=feature_dim)


# --- scoring --------------------------------------------------------------------


@dataclass
class ScoreMatrix:
    """probes x gallery cosine similarities plus the id order."""

    scores: np.ndarray
    probe_subjects: list
    gallery_subjects: list

    def __post_init__(self):
        s = np.asarray(self.scores, dtype=np.float64)
        if s.shape != (len(self.probe_subjects), len(self.gallery_subjects)):
            raise DimensionMismatch("score shape disagrees with the id lists")
        if not np.isfinite(s).all():
            raise ValueError("scores contain NaN/Inf")
        self.scores = s


def match_all(probe_features: np.ndarray, gallery_features: np.ndarray,
              probe_subjects=None, gallery_subjects=None) -> ScoreMatrix:
    """Cosine similarity of every probe against every gallery vector."""
    p = np.asarray(probe_features, dtype=np.float64)
    g = np.asarray(gallery_features, dtype=np.float64)
    if p.ndim != 2 or g.ndim != 2 or p.shape[1] != g.shape[1]:
        raise DimensionMismatch(
            f"probe dim {p.shape} vs gallery dim {g.shape}")
    pn = np.linalg.norm(p, axis=1)
    gn = np.linalg.norm(g, axis=1)
    if np.any(pn == 0) or np.any(gn == 0):
        raise ZeroVector("zero-norm feature vector")
    scores = (p / pn[:, None]) @ (g / gn[:, None]).T
    np.clip(scores, -1.0, 1.0, out=scores)
    if probe_subjects is None:
        probe_subjects = list(range(len(p)))
    if gallery_subjects is None:
        gallery_subjects = list(range(len(g)))
    return ScoreMatrix(scores, list(probe_subjects), list(gallery_subjects))


def _true_column(scores: ScoreMatrix) -> np.ndarray:
    col = {s: i for i, s in enumerate(scores.gallery_subjects)}
    out = np.full(len(scores.probe_subjects), -1, dtype=np.intp)
    for i, subject in enumerate(scores.probe_subjects):
        if subject is not None and subject in col:
            out[i] = col[subject]
    return out


def cmc(scores: ScoreMatrix, manifest: EvalManifest | None = None) -> np.ndarray:
    """Identification rate at every rank 1..|gallery| (closed world).

    Equal scores rank by gallery index, lowest first.
    """
    if manifest is not None and not manifest.closed_world:
        raise UnknownProbeInClosedWorld("manifest contains unknown probes")
    true_col = _true_column(scores)
    if np.any(true_col < 0):
        raise UnknownProbeInClosedWorld("probe subject missing from the gallery")
    s = scores.scores
    n_probes, n_gallery = s.shape
    true_scores = s[np.arange(n_probes), true_col]
    better = (s > true_scores[:, None]).sum(axis=1)
    tied_before = ((s == true_scores[:, None])
                   & (np.arange(n_gallery)[None, :] < true_col[:, None])).sum(axis=1)
    ranks = better + tied_before + 1
    counts = np.bincount(ranks, minlength=n_gallery + 1)[1:]
    return np.cumsum(counts) / n_probes


def roc(scores: ScoreMatrix, manifest: EvalManifest | None = None,
        thresholds=None) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(thresholds, FAR, VR) over genuine and impostor score pools.

    Genuine pairs are each known probe against its own gallery entry;
    every other probe-gallery pair is an impostor claim. Default
    thresholds are all distinct scores (exhaustive curve).
    """
    true_col = _true_column(scores)
    s = scores.scores
    genuine = s[true_col >= 0, :][np.arange((true_col >= 0).sum()),
                                  true_col[true_col >= 0]]
    if genuine.size == 0:
        raise NoGenuinePairs("no probe has its subject enrolled")
    impostor_mask = np.ones_like(s, dtype=bool)
    rows = np.flatnonzero(true_col >= 0)
    impostor_mask[rows, true_col[rows]] = False
    impostor = s[impostor_mask]

    if thresholds is None:
        thresholds = np.unique(np.concatenate([genuine, impostor]))
    thresholds = np.asarray(thresholds, dtype=np.float64)
    far = (impostor[None, :] >= thresholds[:, None]).mean(axis=1)
    vr = (genuine[None, :] >= thresholds[:, None]).mean(axis=1)
    return thresholds, far, vr


def vr_at_far(scores: ScoreMatrix, far_grid,
              manifest: EvalManifest | None = None) -> np.ndarray:
    """Verification rate at requested FAR values, interpolating the
    threshold between adjacent impostor order statistics."""
    thresholds, far, vr = roc(scores, manifest)
    order = np.argsort(far)
    return np.interp(np.asarray(far_grid, dtype=np.float64),
                     far[order], vr[order])


# --- open world -----------------------------------------------------------------


@dataclass(frozen=True)
class OpenWorldSpec:
    n_target: int
    n_test: int
    unknown_ids: tuple
    folds: int = 10
    seed: int = 0

    def __post_init__(self):
        if self.n_target < 1:
            raise InvalidCounts("gallery must keep at least one identity")
        if self.n_target + len(self.unknown_ids) != self.n_test:
            raise InvalidCounts("unknown set size disagrees with the counts")


def openness(n_target: int, n_test: int) -> float:
    """1 - sqrt(2 T / (E + T)) for T gallery and E probe identities."""
    if n_target < 1 or n_test < 1:
        raise InvalidCounts("identity counts must be >= 1")
    if n_target > n_test:
        raise InvalidCounts("gallery cannot exceed the probe identity count")
    return 1.0 - np.sqrt(2.0 * n_target / (n_test + n_target))


def unknown_count_for_openness(n_identities: int, target: float) -> int:
    """The unknown count whose achieved openness is nearest the target."""
    if not 0.0 <= target < 1.0:
        raise Unachievable(f"target openness {target} outside [0, 1)")
    counts = np.arange(0, n_identities)
    achieved = np.array([openness(n_identities - u, n_identities) for u in counts])
    return int(counts[np.argmin(np.abs(achieved - target))])


def make_open_world_folds(identities, target_openness: float, folds: int = 10,
                          seed: int = 0) -> list[OpenWorldSpec]:
    """Seeded random unknown sets, one per fold, at the nearest achievable
    openness."""
    identities = list(identities)
    n = len(identities)
    u = unknown_count_for_openness(n, target_openness)
    specs = []
    for fold in range(folds):
        rng = np.random.default_rng(np.random.SeedSequence([seed, fold]))
        unknown = tuple(sorted(rng.choice(identities, size=u, replace=False).tolist())) \
            if u else ()
        specs.append(OpenWorldSpec(n_target=n - u, n_test=n, unknown_ids=unknown,
                                   folds=folds, seed=seed))
    return specs


def apply_open_world(manifest: EvalManifest, spec: OpenWorldSpec) -> EvalManifest:
    """Remove the fold's unknown identities from the gallery and relabel
    their probes as unknown."""
    unknown = set(spec.unknown_ids)
    gallery = [e for e in manifest.gallery if e.subject not in unknown]
    if not gallery:
        raise EmptyGalleryAfterRemoval("every gallery identity was removed")
    probes = [replace(e, subject=None) if e.subject in unknown else e
              for e in manifest.probes]
    return EvalManifest(gallery=gallery, probes=probes,
                        feature_dim=manifest.feature_dim,
                        gallery_rule=manifest.gallery_rule)


def open_world_eval(scores: ScoreMatrix, manifest: EvalManifest | None,
                    spec: OpenWorldSpec | None = None,
                    tau_grid=None) -> tuple[np.ndarray, np.ndarray, float]:
    """(tau_grid, correct-fraction curve, mean over the grid).

    At each tau the acceptance threshold is the tau-quantile of all probe
    top-1 scores; tau = 0 rejects every probe, tau = 1 accepts every
    probe, ties at the threshold accept. A known probe is correct when
    accepted with the right top-1 identity; an unknown probe is correct
    when rejected.
    """
    if tau_grid is None:
        tau_grid = np.linspace(0.0, 1.0, 101)
    tau_grid = np.asarray(tau_grid, dtype=np.float64)
    if scores.scores.shape[1] == 0:
        raise EmptyGalleryAfterRemoval("score matrix has no gallery columns")

    s = scores.scores
    top_col = np.argmax(s, axis=1)  # lowest index wins ties
    top_score = s[np.arange(len(s)), top_col]
    true_col = _true_column(scores)
    known = true_col >= 0
    top_correct = known & (top_col == true_col)

    curve = np.empty_like(tau_grid)
    for i, tau in enumerate(tau_grid):
        if tau <= 0.0:
            accepted = np.zeros(len(s), dtype=bool)
        else:
            threshold = np.quantile(top_score, 1.0 - tau)
            accepted = top_score >= threshold
        correct = np.where(known, accepted & top_correct, ~accepted)
        curve[i] = correct.mean()
    return tau_grid, curve, float(curve.mean())


# --- reports --------------------------------------------------------------------


def write_curve_csv(path, header: tuple[str, str], xs, ys) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for x, y in zip(xs, ys):
            writer.writerow([repr(float(x)), repr(float(y))])


def write_summary_json(path, summary: dict) -> None:
    with open(path, "w") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
        fh.write("\n")
