import json

import numpy as np
import pytest

from faceforge.cli import main
from faceforge.demo import write_demo_input
from faceforge.evalharness import (
    FeatureSet,
    build_manifest,
    save_features,
    save_manifest,
)


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("pipeline")
    write_demo_input(root / "input", n_identities=4, expressions=(0, 1),
                     n_grid=24, seed=3)
    config = root / "run.toml"
    config.write_text(f"""
[io]
faces_manifest = "input/faces.json"
out = "{(root / 'out').as_posix()}"

[distances]
subsample = 120

[pairs]
count = 2
mode = "most_dissimilar"

[synth]
target_identities = 2

[views]
layout = [[0, 0], [30, 0], [0, 15]]
radius = 600.0
normals_k = 10

[images]
spacing = 4.0
smoothness = 1e-2
crop = 40
out_size = 32

[kstats]
sizes = [3, 7]
kappa = 0.3
""")
    return root


def run_cli(*argv):
    return main([str(a) for a in argv])


class TestPipelineStages:
    def test_full_run_and_idempotence(self, workspace, capsys):
        config = workspace / "run.toml"
        assert run_cli("all", "--config", config, "--seed", "7") == 0
        capsys.readouterr()

        out = workspace / "out"
        assert (out / "artifacts/distances/distances.bin").exists()
        pairs = json.loads((out / "artifacts/pairs/pairs.json").read_text())
        assert len(pairs["pairs"]) == 2
        synth_plys = list((out / "artifacts/synth").glob("*.ply"))
        assert len(synth_plys) == 2 * 4  # 2 ids x 4 expression combos
        views = list((out / "artifacts/views").glob("*/*.ply"))
        assert len(views) == len(synth_plys) * 3
        images = list((out / "artifacts/images").glob("*/*.png"))
        assert len(images) == len(views)
        report = json.loads(
            (out / "artifacts/kstats/report.json").read_text())
        assert set(report["mean_variance"]) == {"3", "7"}

        # a second identical run skips every stage
        assert run_cli("all", "--config", config, "--seed", "7") == 0
        printed = capsys.readouterr().out
        assert printed.count("[skip]") == 6

    def test_seed_change_invalidates_fingerprints(self, workspace, capsys):
        config = workspace / "run.toml"
        assert run_cli("distances", "--config", config, "--seed", "8") == 0
        printed = capsys.readouterr().out
        assert "[done] distances" in printed

    def test_eval_closed_and_open(self, workspace, rng, tmp_path):
        n_ids, per_id = 12, 3
        scans = [(f"s{i}", f"s{i}_scan{k}", 0)
                 for i in range(n_ids) for k in range(per_id)]
        manifest = build_manifest(scans, feature_dim=16,
                                  feature_file=str(tmp_path / "feat.bin"))
        base = rng.normal(size=(n_ids, 16))
        rows, subjects, names = [], [], []
        for i in range(n_ids):
            for k in range(per_id):
                rows.append(base[i] + rng.normal(0, 0.3, 16))
                subjects.append(f"s{i}")
                names.append(f"s{i}_scan{k}")
        save_features(FeatureSet(np.array(rows), subjects, names),
                      tmp_path / "feat.bin")
        save_manifest(manifest, tmp_path / "manifest.json")

        out = tmp_path / "evalout"
        assert run_cli("eval", "--manifest", tmp_path / "manifest.json",
                       "--mode", "closed", "--out", out) == 0
        summary = json.loads(
            (out / "artifacts/eval/summary.json").read_text())
        assert 0.0 <= summary["rank1"] <= 1.0
        cmc_rows = (out / "artifacts/eval/cmc.csv").read_text().splitlines()
        assert cmc_rows[0] == "rank,rate"
        assert len(cmc_rows) == 1 + n_ids

        out2 = tmp_path / "evalopen"
        assert run_cli("eval", "--manifest", tmp_path / "manifest.json",
                       "--mode", "open", "--openness", "0.2", "--folds", "3",
                       "--out", out2) == 0
        summary = json.loads(
            (out2 / "artifacts/eval/summary.json").read_text())
        assert summary["folds"] == 3
        assert summary["unknown_count"] > 0
        assert (out2 / "artifacts/eval/dir.csv").exists()


class TestCliErrors:
    def test_missing_config_file(self, tmp_path):
        assert run_cli("distances", "--config", tmp_path / "nope.toml") == 2

    def test_eval_without_manifest(self, tmp_path):
        assert run_cli("eval", "--out", tmp_path) == 2

    def test_stage_failure_without_inputs(self, tmp_path):
        config = tmp_path / "c.toml"
        config.write_text("[io]\nfaces_manifest = 'missing.json'\n")
        assert run_cli("distances", "--config", config) == 2

    def test_pairs_before_distances(self, tmp_path):
        assert run_cli("pairs", "--out", tmp_path) == 3
