"""faceforge: seeded, resumable pipeline driver.

Subcommands run the stages (distances, pairs, synth, views, images,
kstats, eval, all) against a TOML config. Each stage is idempotent: it
writes a fingerprint of its config, seed and inputs next to its outputs
and is skipped when the fingerprint already matches. Data artifacts land
under <out>/artifacts/<stage>/, run metadata (ledger, fingerprints) under
<out>/run/ so artifact trees can be compared byte for byte.

Exit codes: 0 success, 2 config error, 3 stage failure.
FACEFORGE_LOG sets the log level (DEBUG, INFO, WARNING, ...).
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # Python 3.10
    import tomli as tomllib

from . import bending, evalharness, kernelstats, synthesis, views
from .core import compute_normals
from .errors import ConfigError, FaceForgeError, StageFailure
from .geomimage import GridSpec, load_image3c, make_three_channel, save_image3c
from .io import load_cloud, load_face_set
from .views import ViewCloud, camera_poses, render_view

log = logging.getLogger("faceforge")

STAGES = ("distances", "pairs", "synth", "views", "images", "kstats", "eval")


# --- config ---------------------------------------------------------------------


class RunConfig:
    """Parsed config plus run-wide flags; stage tables come out as dicts."""

    def __init__(self, data: dict, out: Path, seed: int, workers: int,
                 resume: bool, config_path: Path | None):
        self.data = data
        self.out = out
        self.seed = seed
        self.workers = max(1, workers)
        self.resume = resume
        self.config_path = config_path

    def stage(self, name: str) -> dict:
        return dict(self.data.get(name, {}))

    @property
    def artifacts(self) -> Path:
        return self.out / "artifacts"

    @property
    def rundir(self) -> Path:
        return self.out / "run"


def load_config(args) -> RunConfig:
    data = {}
    config_path = None
    if args.config:
        config_path = Path(args.config)
        if not config_path.exists():
            raise ConfigError(f"config file {config_path} does not exist")
        try:
            with open(config_path, "rb") as fh:
                data = tomllib.load(fh)
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"{config_path}: {exc}") from None
    run = data.get("run", {})
    out = Path(args.out or data.get("io", {}).get("out", "out"))
    seed = args.seed if args.seed is not None else int(run.get("seed", 0))
    workers = args.workers if args.workers is not None else int(run.get("workers", 1))
    return RunConfig(data, out, seed, workers, bool(args.resume), config_path)


def _resolve(cfg: RunConfig, value: str) -> Path:
    """Paths in the config resolve relative to the config file."""
    p = Path(value)
    if not p.is_absolute() and cfg.config_path is not None:
        p = cfg.config_path.parent / p
    return p


# --- fingerprints and the run ledger ---------------------------------------------


def _hash_file(path: Path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def _fingerprint(stage: str, cfg: RunConfig, inputs: list[Path]) -> str:
    payload = {
        "stage": stage,
        "config": cfg.stage(stage),
        "seed": cfg.seed,
        "inputs": {str(p): _hash_file(p) for p in sorted(inputs)},
    }
    blob = json.dumps(payload, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()


def _marker(cfg: RunConfig, stage: str) -> Path:
    return cfg.rundir / f"{stage}.done.json"


def _stage_current(cfg: RunConfig, stage: str, fingerprint: str) -> bool:
    marker = _marker(cfg, stage)
    if not marker.exists():
        return False
    try:
        with open(marker) as fh:
            payload = json.load(fh)
    except (OSError, json.JSONDecodeError):
        return False
    if payload.get("fingerprint") != fingerprint:
        return False
    outputs = payload.get("outputs", {})
    return all(Path(p).exists() for p in outputs)


def _finish_stage(cfg: RunConfig, stage: str, fingerprint: str,
                  outputs: list[Path], started: float) -> None:
    duration = time.monotonic() - started
    record = {
        "stage": stage,
        "fingerprint": fingerprint,
        "duration_s": duration,
        "outputs": {str(p): _hash_file(p) for p in sorted(outputs)},
    }
    cfg.rundir.mkdir(parents=True, exist_ok=True)
    with open(_marker(cfg, stage), "w") as fh:
        json.dump(record, fh, indent=2, sort_keys=True)
        fh.write("\n")
    with open(cfg.rundir / "ledger.jsonl", "a") as fh:
        fh.write(json.dumps(record, sort_keys=True) + "\n")
    log.info("stage %s finished in %.2fs (%d outputs)",
             stage, duration, len(outputs))


def run_stage(cfg: RunConfig, stage: str, inputs: list[Path], worker) -> None:
    fingerprint = _fingerprint(stage, cfg, inputs)
    if _stage_current(cfg, stage, fingerprint):
        log.info("stage %s up to date, skipping", stage)
        print(f"[skip] {stage} (fingerprint match)")
        return
    started = time.monotonic()
    try:
        outputs = worker()
    except FaceForgeError:
        raise
    except Exception as exc:
        raise StageFailure(f"stage {stage}: {exc}") from exc
    outputs.append(_write_stage_sidecar(cfg, stage))
    _finish_stage(cfg, stage, fingerprint, outputs, started)
    print(f"[done] {stage} -> {len(outputs)} artifacts")


def _write_stage_sidecar(cfg: RunConfig, stage: str) -> Path:
    """Seed and effective config recorded next to the stage's outputs."""
    stage_dir = cfg.artifacts / stage
    stage_dir.mkdir(parents=True, exist_ok=True)
    sidecar = stage_dir / "stage.json"
    with open(sidecar, "w") as fh:
        json.dump({"stage": stage, "seed": cfg.seed, "config": cfg.stage(stage)},
                  fh, indent=2, sort_keys=True)
        fh.write("\n")
    return sidecar


# --- stages ---------------------------------------------------------------------


def _faces_manifest(cfg: RunConfig) -> Path:
    value = cfg.data.get("io", {}).get("faces_manifest")
    if not value:
        raise ConfigError("io.faces_manifest is required for this stage")
    path = _resolve(cfg, value)
    if not path.exists():
        raise ConfigError(f"faces manifest {path} does not exist")
    return path


def _input_files(manifest: Path) -> list[Path]:
    with open(manifest) as fh:
        payload = json.load(fh)
    return [manifest] + [manifest.parent / r["path"] for r in payload["faces"]]


def stage_distances(cfg: RunConfig) -> None:
    manifest = _faces_manifest(cfg)

    def worker() -> list[Path]:
        face_set = load_face_set(manifest)
        sub = int(cfg.stage("distances").get("subsample", bending.DEFAULT_SUBSAMPLE))
        dmat = bending.pairwise_distances(face_set, sub, seed=cfg.seed)
        outdir = cfg.artifacts / "distances"
        outdir.mkdir(parents=True, exist_ok=True)
        out = outdir / "distances.bin"
        bending.save_distance_matrix(dmat, out)
        return [out, Path(str(out) + ".json")]

    run_stage(cfg, "distances", _input_files(manifest), worker)


def stage_pairs(cfg: RunConfig) -> None:
    dist_path = cfg.artifacts / "distances" / "distances.bin"
    if not dist_path.exists():
        raise StageFailure("pairs: run the distances stage first")

    def worker() -> list[Path]:
        dmat = bending.load_distance_matrix(dist_path)
        conf = cfg.stage("pairs")
        m = int(conf.get("count", min(5, dmat.n * (dmat.n - 1) // 2)))
        mode = conf.get("mode", "most_dissimilar")
        selection = bending.select_pairs(dmat, m, mode)
        outdir = cfg.artifacts / "pairs"
        outdir.mkdir(parents=True, exist_ok=True)
        out = outdir / "pairs.json"
        with open(out, "w") as fh:
            json.dump({"pairs": selection.pairs, "mode": selection.mode,
                       "m": selection.m, "face_ids": dmat.face_ids},
                      fh, indent=2, sort_keys=True)
            fh.write("\n")
        return [out]

    run_stage(cfg, "pairs", [dist_path, Path(str(dist_path) + ".json")], worker)


def stage_synth(cfg: RunConfig) -> None:
    manifest = _faces_manifest(cfg)
    pairs_path = cfg.artifacts / "pairs" / "pairs.json"
    if not pairs_path.exists():
        raise StageFailure("synth: run the pairs stage first")

    def worker() -> list[Path]:
        face_set = load_face_set(manifest)
        with open(pairs_path) as fh:
            pair_payload = json.load(fh)
        selection = bending.PairSelection(
            pairs=[tuple(p) for p in pair_payload["pairs"]],
            mode=pair_payload["mode"], m=pair_payload["m"])
        conf = cfg.stage("synth")
        if "expressions" in conf:
            combos = tuple(tuple(c) for c in conf["expressions"])
        else:
            shared = set.intersection(*(
                {f.expression_id for f in face_set.faces_of(i)}
                for i in face_set.identity_ids()))
            combos = synthesis.default_expression_combos(shared)
        plan = synthesis.SynthesisPlan(
            pair_selection=selection,
            expressions_per_pair=combos,
            target_new_identities=int(conf.get("target_identities",
                                               len(selection.pairs))),
            provenance=conf.get("provenance", "dissimilar_pool"),
            seed=cfg.seed,
        )
        scans = synthesis.generate_identities(face_set, plan)
        outdir = cfg.artifacts / "synth"
        paths = synthesis.save_synthetic(scans, outdir, plan)
        return paths + [outdir / "provenance.json"]

    run_stage(cfg, "synth", _input_files(manifest) + [pairs_path], worker)


def _collect_scan_files(cfg: RunConfig) -> list[tuple[str, Path]]:
    conf = cfg.stage("views")
    scans: list[tuple[str, Path]] = []
    synth_dir = cfg.artifacts / "synth"
    if synth_dir.exists():
        scans += [(p.stem, p) for p in sorted(synth_dir.glob("*.ply"))]
    if conf.get("include_real", False):
        manifest = _faces_manifest(cfg)
        with open(manifest) as fh:
            payload = json.load(fh)
        scans += [(Path(r["path"]).stem, manifest.parent / r["path"])
                  for r in payload["faces"]]
    if not scans:
        raise StageFailure("views: no input scans (run synth or set include_real)")
    return scans


def stage_views(cfg: RunConfig) -> None:
    conf = cfg.stage("views")
    scans = _collect_scan_files(cfg)

    def worker() -> list[Path]:
        layout = conf.get("layout", "paper15")
        if isinstance(layout, list):
            layout = [tuple(p) for p in layout]
        poses = camera_poses(layout, radius=float(conf.get("radius",
                                                           views.DEFAULT_RADIUS_MM)))
        exponent = float(conf.get("radius_exponent", views.DEFAULT_RADIUS_EXPONENT))
        normals_k = int(conf.get("normals_k", 12))

        jobs = [(stem, path, pose) for stem, path in scans for pose in poses]
        max_scans = int(conf.get("max_scans", 0))
        if max_scans:
            jobs = synthesis.thin_randomly(jobs, max_scans, cfg.seed)

        outdir = cfg.artifacts / "views"

        def render_one(job) -> list[Path]:
            stem, path, pose = job
            cloud = load_cloud(path)
            if not cloud.has_normals:
                cloud = compute_normals(cloud, normals_k)
            view = render_view(cloud, pose, exponent, source_ref=stem)
            ply = views.save_view(view, outdir / stem, pose.label())
            return [ply, ply.with_suffix(".json")]

        outputs: list[Path] = []
        with ThreadPoolExecutor(max_workers=cfg.workers) as pool:
            for produced in pool.map(render_one, jobs):
                outputs.extend(produced)
        return outputs

    run_stage(cfg, "views", [path for _, path in scans], worker)


def stage_images(cfg: RunConfig) -> None:
    views_dir = cfg.artifacts / "views"
    view_files = sorted(views_dir.glob("*/*.ply"))
    if not view_files:
        raise StageFailure("images: no rendered views found")

    conf = cfg.stage("images")

    def worker() -> list[Path]:
        outdir = cfg.artifacts / "images"
        spacing = float(conf.get("spacing", 0.75))
        smoothness = float(conf.get("smoothness", 1e-2))
        crop = int(conf.get("crop", 224))
        out_size = int(conf.get("out_size", 160))
        central = float(conf.get("central_fraction", 0.4))
        normals_k = int(conf.get("normals_k", 12))

        def render_one(ply: Path) -> list[Path]:
            with open(ply.with_suffix(".json")) as fh:
                side = json.load(fh)
            cloud = load_cloud(ply)
            if not cloud.has_normals:
                cloud = compute_normals(cloud, normals_k)
            pose = views.CameraPose(side["longitude"], side["latitude"],
                                    side["radius"])
            view = ViewCloud(cloud=cloud, pose=pose,
                             visible_indices=np.arange(len(cloud)),
                             source_ref=side["scan_id"])
            spec = GridSpec.cover(cloud.points, spacing=spacing,
                                  smoothness=smoothness)
            image = make_three_channel(view, spec, crop=crop, out_size=out_size,
                                       central_fraction=central)
            target = outdir / ply.parent.name
            target.mkdir(parents=True, exist_ok=True)
            png = target / (ply.stem + ".png")
            save_image3c(image, png)
            return [png, png.with_suffix(".json")]

        outputs: list[Path] = []
        with ThreadPoolExecutor(max_workers=cfg.workers) as pool:
            for produced in pool.map(render_one, view_files):
                outputs.extend(produced)
        return outputs

    run_stage(cfg, "images", view_files, worker)


def stage_kstats(cfg: RunConfig) -> None:
    images_dir = cfg.artifacts / "images"
    pngs = sorted(images_dir.glob("*/*.png"))
    if not pngs:
        raise StageFailure("kstats: no images found")

    conf = cfg.stage("kstats")

    def worker() -> list[Path]:
        fields = [kernelstats.DepthField.from_image3c(load_image3c(p))
                  for p in pngs]
        sizes = tuple(conf.get("sizes", list(kernelstats.DEFAULT_SIZES)))
        kappa = float(conf.get("kappa", kernelstats.DEFAULT_KAPPA))
        report = kernelstats.analyze(fields, sizes, kappa)
        outdir = cfg.artifacts / "kstats"
        outdir.mkdir(parents=True, exist_ok=True)
        kernelstats.report_to_json(report, outdir / "report.json")
        kernelstats.report_to_csv(report, outdir / "report.csv")
        return [outdir / "report.json", outdir / "report.csv"]

    run_stage(cfg, "kstats", pngs, worker)


def _gather_features(manifest: evalharness.EvalManifest,
                     entries, override: Path | None) -> np.ndarray:
    cache: dict[str, evalharness.FeatureSet] = {}
    rows = []
    for entry in entries:
        source = str(override) if override else entry.feature_file
        if not source:
            raise ConfigError(f"no feature file for scan {entry.scan!r}")
        if source not in cache:
            cache[source] = evalharness.load_features(source)
        fs = cache[source]
        rows.append(fs.values[fs.row_of(entry.scan)])
    return np.vstack(rows)


def stage_eval(cfg: RunConfig, args=None) -> None:
    conf = cfg.stage("eval")
    manifest_path = getattr(args, "manifest", None) or conf.get("manifest")
    if not manifest_path:
        raise ConfigError("eval: --manifest or eval.manifest is required")
    manifest_path = _resolve(cfg, str(manifest_path))
    features_arg = getattr(args, "features", None) or conf.get("features")
    features_path = _resolve(cfg, str(features_arg)) if features_arg else None
    mode = getattr(args, "mode", None) or conf.get("mode", "closed")
    target_openness = getattr(args, "openness", None)
    if target_openness is None:
        target_openness = float(conf.get("openness", 0.0))
    folds = getattr(args, "folds", None) or int(conf.get("folds", 10))
    unknown_count = getattr(args, "unknown_count", None)
    if not manifest_path.exists():
        raise ConfigError(f"eval manifest {manifest_path} does not exist")

    inputs = [manifest_path] + ([features_path] if features_path else [])

    def worker() -> list[Path]:
        manifest = evalharness.load_manifest(manifest_path)
        outdir = cfg.artifacts / "eval"
        outdir.mkdir(parents=True, exist_ok=True)
        gallery = _gather_features(manifest, manifest.gallery, features_path)
        probes = _gather_features(manifest, manifest.probes, features_path)
        outputs = []

        if mode == "closed":
            scores = evalharness.match_all(
                probes, gallery,
                probe_subjects=[e.subject for e in manifest.probes],
                gallery_subjects=[e.subject for e in manifest.gallery])
            curve = evalharness.cmc(scores, manifest)
            evalharness.write_curve_csv(outdir / "cmc.csv", ("rank", "rate"),
                                        np.arange(1, len(curve) + 1), curve)
            far_grid = conf.get("far_grid", [0.001, 0.01, 0.1])
            thresholds, far, vr = evalharness.roc(scores, manifest)
            evalharness.write_curve_csv(outdir / "roc.csv", ("far", "vr"), far, vr)
            summary = {
                "mode": "closed",
                "rank1": float(curve[0]),
                "rank5": float(curve[min(4, len(curve) - 1)]),
                "vr_at_far": {str(f): float(v) for f, v in zip(
                    far_grid, evalharness.vr_at_far(scores, far_grid))},
                "probes": len(manifest.probes),
                "gallery": len(manifest.gallery),
                "seed": cfg.seed,
            }
            evalharness.write_summary_json(outdir / "summary.json", summary)
            outputs += [outdir / "cmc.csv", outdir / "roc.csv",
                        outdir / "summary.json"]
        elif mode == "open":
            identities = [e.subject for e in manifest.gallery]
            if unknown_count is not None:
                n = len(identities)
                achieved = evalharness.openness(n - unknown_count, n)
                specs = evalharness.make_open_world_folds(identities, achieved,
                                                          folds, cfg.seed)
            else:
                specs = evalharness.make_open_world_folds(
                    identities, target_openness, folds, cfg.seed)
            tau = np.linspace(0.0, 1.0, int(conf.get("tau_points", 101)))
            curves, means = [], []
            for spec in specs:
                fold_manifest = evalharness.apply_open_world(manifest, spec)
                keep = [i for i, e in enumerate(manifest.gallery)
                        if e.subject not in set(spec.unknown_ids)]
                scores = evalharness.match_all(
                    probes, gallery[keep],
                    probe_subjects=[e.subject for e in fold_manifest.probes],
                    gallery_subjects=[e.subject for e in fold_manifest.gallery])
                _, curve, mean = evalharness.open_world_eval(
                    scores, fold_manifest, spec, tau)
                curves.append(curve)
                means.append(mean)
            mean_curve = np.mean(curves, axis=0)
            evalharness.write_curve_csv(outdir / "dir.csv", ("tau", "dir"),
                                        tau, mean_curve)
            summary = {
                "mode": "open",
                "openness_target": target_openness,
                "openness_achieved": evalharness.openness(
                    specs[0].n_target, specs[0].n_test),
                "unknown_count": len(specs[0].unknown_ids),
                "folds": folds,
                "mean_rank1_over_tau": float(np.mean(means)),
                "std_rank1_over_tau": float(np.std(means)),
                "seed": cfg.seed,
            }
            evalharness.write_summary_json(outdir / "summary.json", summary)
            outputs += [outdir / "dir.csv", outdir / "summary.json"]
        else:
            raise ConfigError(f"eval: unknown mode {mode!r}")
        return outputs

    run_stage(cfg, "eval", inputs, worker)


_STAGE_FUNCS = {
    "distances": stage_distances,
    "pairs": stage_pairs,
    "synth": stage_synth,
    "views": stage_views,
    "images": stage_images,
    "kstats": stage_kstats,
}


# --- entry point ------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="faceforge",
        description="synthetic 3D face corpus generation and evaluation")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in STAGES + ("all",):
        p = sub.add_parser(name)
        p.add_argument("--config", help="TOML config file")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--workers", type=int, default=None)
        p.add_argument("--out", help="output root (default from config or ./out)")
        p.add_argument("--resume", action="store_true",
                       help="skip stages whose fingerprints match")
        if name in ("eval", "all"):
            p.add_argument("--manifest", help="evaluation manifest JSON")
            p.add_argument("--features", help="feature file for all entries")
            p.add_argument("--mode", choices=("closed", "open"), default=None)
            p.add_argument("--openness", type=float, default=None)
            p.add_argument("--folds", type=int, default=None)
            p.add_argument("--unknown-count", dest="unknown_count", type=int,
                           default=None)
    return parser


def main(argv=None) -> int:
    logging.basicConfig(
        level=getattr(logging, os.environ.get("FACEFORGE_LOG", "WARNING").upper(),
                      logging.WARNING),
        format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = load_config(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2

    if args.command == "all":
        ordered = ["distances", "pairs", "synth", "views", "images", "kstats"]
        has_eval = (getattr(args, "manifest", None)
                    or cfg.stage("eval").get("manifest"))
        if has_eval:
            ordered.append("eval")
    else:
        ordered = [args.command]

    try:
        for stage in ordered:
            if stage == "eval":
                stage_eval(cfg, args)
            else:
                _STAGE_FUNCS[stage](cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except FaceForgeError as exc:
        print(f"stage failure: {exc}", file=sys.stderr)
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())
