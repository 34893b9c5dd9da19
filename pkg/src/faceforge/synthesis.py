"""New identities from midpoints of face pairs, crossed over expressions.

A selected pair (i, j) yields one new identity; each configured
expression combination (e_i, e_j) yields one scan of that identity, so
interpolating differently-expressioned parents produces intra-identity
expression variants. Midpoints of corresponded vertices keep the high
frequency surface detail of the parents, unlike samples from a low-rank
statistical model.
"""

from __future__ import annotations

import hashlib
import json
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .bending import PairSelection
from .core import CorrespondedFace, FaceSet, PointCloud
from .errors import PlanExhausted, SizeMismatch
from .io import save_cloud

PROVENANCES = ("dissimilar_pool", "similar_pool", "real")


@dataclass(frozen=True)
class SynthesisPlan:
    pair_selection: PairSelection
    expressions_per_pair: tuple[tuple[int, int], ...]
    target_new_identities: int
    scans_per_identity: int = 15
    provenance: str = "dissimilar_pool"
    seed: int = 0

    def __post_init__(self):
        if self.target_new_identities > len(self.pair_selection.pairs):
            raise PlanExhausted(
                f"{self.target_new_identities} identities requested from "
                f"{len(self.pair_selection.pairs)} pairs"
            )
        if not self.expressions_per_pair:
            raise ValueError("expressions_per_pair must not be empty")
        if self.provenance not in PROVENANCES:
            raise ValueError(f"unknown provenance {self.provenance!r}")

    def expected_scans(self, poses: int = 1) -> int:
        """Candidate scan count before any random thinning."""
        return self.target_new_identities * len(self.expressions_per_pair) * poses

    def content_hash(self) -> str:
        blob = json.dumps(
            {
                "pairs": self.pair_selection.pairs,
                "mode": self.pair_selection.mode,
                "expressions": self.expressions_per_pair,
                "target": self.target_new_identities,
                "provenance": self.provenance,
                "seed": self.seed,
            },
            sort_keys=True,
        ).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


@dataclass(frozen=True)
class SyntheticIdentity:
    face: CorrespondedFace
    parent_ids: tuple[int, int]
    parent_expressions: tuple[int, int]
    provenance: str


def default_expression_combos(shared_expressions) -> tuple[tuple[int, int], ...]:
    """(neutral, neutral) plus (e, 0), (0, e), (e, e) per shared expression e."""
    combos = [(0, 0)]
    for e in sorted(set(shared_expressions) - {0}):
        combos += [(e, 0), (0, e), (e, e)]
    return tuple(combos)


def interpolate_pair(face_i: CorrespondedFace,
                     face_j: CorrespondedFace) -> CorrespondedFace:
    """Vertex-wise midpoint of two corresponded faces.

    The child carries placeholder labels (identity 0, neutral) until
    generate_identities assigns fresh ones.
    """
    if face_i.vertex_count != face_j.vertex_count:
        raise SizeMismatch(
            f"parents have {face_i.vertex_count} vs {face_j.vertex_count} vertices"
        )
    mid = 0.5 * (face_i.coords() + face_j.coords())
    return CorrespondedFace(cloud=PointCloud(mid), identity_id=0, expression_id=0)


def generate_identities(face_set: FaceSet, plan: SynthesisPlan) -> list[SyntheticIdentity]:
    """One new identity per selected pair, one scan per expression combo.

    Pairs lacking an expression keep their remaining combos (warning); a
    pair with no usable combo is skipped entirely. New identity labels are
    assigned sequentially above the parent set's range, in pair order, so
    regeneration from the same plan is byte-identical.
    """
    ids = face_set.identity_ids()
    next_id = face_set.max_identity() + 1
    out: list[SyntheticIdentity] = []

    for i, j in plan.pair_selection.pairs[: plan.target_new_identities]:
        id_i, id_j = ids[i], ids[j]
        by_expr_i = {f.expression_id: f for f in face_set.faces_of(id_i)}
        by_expr_j = {f.expression_id: f for f in face_set.faces_of(id_j)}
        scans = []
        for expr_index, (e_i, e_j) in enumerate(plan.expressions_per_pair):
            if e_i not in by_expr_i or e_j not in by_expr_j:
                warnings.warn(
                    f"pair ({id_i}, {id_j}) lacks expression combo ({e_i}, {e_j})"
                )
                continue
            child = interpolate_pair(by_expr_i[e_i], by_expr_j[e_j])
            face = CorrespondedFace(
                cloud=child.cloud,
                identity_id=next_id,
                expression_id=expr_index,
            )
            scans.append(SyntheticIdentity(
                face=face,
                parent_ids=(id_i, id_j),
                parent_expressions=(e_i, e_j),
                provenance=plan.provenance,
            ))
        if not scans:
            warnings.warn(f"pair ({id_i}, {id_j}) skipped: no usable combo")
            continue
        out.extend(scans)
        next_id += 1
    return out


def thin_randomly(items: list, keep: int, seed: int) -> list:
    """Seeded uniform draw without replacement, original order preserved."""
    if keep >= len(items):
        return list(items)
    rng = np.random.default_rng(seed)
    chosen = np.sort(rng.choice(len(items), size=keep, replace=False))
    return [items[k] for k in chosen]


def synthetic_face_set(scans: list[SyntheticIdentity]) -> FaceSet:
    return FaceSet([s.face for s in scans])


def save_synthetic(scans: list[SyntheticIdentity], outdir,
                   plan: SynthesisPlan) -> list[Path]:
    """PLY per scan plus a provenance ledger (parents, expressions, seed,
    plan hash)."""
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    records = []
    paths = []
    for scan in scans:
        name = f"id{scan.face.identity_id:06d}_e{scan.face.expression_id:02d}.ply"
        save_cloud(scan.face.cloud, outdir / name)
        paths.append(outdir / name)
        records.append({
            "file": name,
            "identity": scan.face.identity_id,
            "expression": scan.face.expression_id,
            "parents": list(scan.parent_ids),
            "parent_expressions": list(scan.parent_expressions),
            "provenance": scan.provenance,
        })
    ledger = {
        "plan_hash": plan.content_hash(),
        "seed": plan.seed,
        "scans": records,
    }
    with open(outdir / "provenance.json", "w") as fh:
        json.dump(ledger, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return paths
