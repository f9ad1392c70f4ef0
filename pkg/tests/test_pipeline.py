import json

import numpy as np
import pytest

from fluxlattice import pipeline
from fluxlattice.cli import EXIT_DEPENDENCY, EXIT_OK, EXIT_VALIDATION, main
from fluxlattice.data_model import Clustering
from fluxlattice.errors import ConfigError, RoutingError, StageDependencyError

SMALL = {
    "seed": 3,
    "synth": {"n_cycles": 24, "n_predict": 4},
    "split": {"n_predict": 4},
    "mlp": {"epochs": 3, "mc_passes": 20, "hidden_sizes": [8, 8]},
}


@pytest.fixture
def small_config(tmp_path):
    import yaml

    path = tmp_path / "run.yaml"
    path.write_text(yaml.safe_dump(SMALL))
    return path


def _artifacts(root):
    return pipeline.read_manifest(root / "manifest.txt")


def test_config_mapping():
    cfg = pipeline.config_from_mapping(SMALL)
    assert cfg.seed == 3 and cfg.synth.seed == 3 and cfg.mlp.seed == 3 and cfg.kmeans.seed == 3
    assert cfg.mlp.hidden_sizes == (8, 8) and cfg.gp.axial_stride == 3
    with pytest.raises(ConfigError):
        pipeline.config_from_mapping({"bogus": 1})
    with pytest.raises(ConfigError):
        pipeline.config_from_mapping({"gp": {"lengthscale": 1}})
    with pytest.raises(ConfigError):
        pipeline.config_from_mapping({"cluster": {"method": "spectral"}})


def test_derive_seed_stable():
    assert pipeline.derive_seed(1, "mlp", "A", "c0") == pipeline.derive_seed(1, "mlp", "A", "c0")
    assert pipeline.derive_seed(1, "mlp", "A", "c0") != pipeline.derive_seed(1, "mlp", "A", "c1")


def test_route_nearest_representative():
    c = Clustering(["a", "b"], [0, 1], "kmeans", np.array([[0.0, 0.0], [3.0, 3.0]]))
    assert pipeline.route([2.0, 2.5], c)[0] == 1
    assert pipeline.route([1.5, 1.5], c)[0] == 0  # tie -> lowest index
    with pytest.raises(RoutingError):
        pipeline.route([np.nan, 0.0], c)
    with pytest.raises(RoutingError):
        pipeline.route([0.0, 0.0], Clustering(["a"], [0], "kmeans"))


def test_stage_dependency_names_file(tmp_path):
    run = pipeline.Run(tmp_path / "r", pipeline.RunConfig())
    with pytest.raises(StageDependencyError) as exc:
        pipeline.run_stage("preprocess", run)
    assert "dataset.csv" in str(exc.value)


def test_cli_exit_codes(tmp_path, small_config, capsys):
    assert main(["--out", str(tmp_path / "r"), "cluster"]) == EXIT_DEPENDENCY
    bad = tmp_path / "bad.yaml"
    bad.write_text("kmeans: {k: 0}\n")
    assert main(["--config", str(bad), "--out", str(tmp_path / "r"), "synth"]) == EXIT_VALIDATION
    with pytest.raises(SystemExit):
        main(["--seed", "-1", "synth"])


def test_full_run_is_reproducible(tmp_path, small_config):
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(["--config", str(small_config), "--out", str(a), "run"]) == EXIT_OK
    assert main(["--config", str(small_config), "--out", str(b), "--jobs", "2", "run"]) == EXIT_OK
    ma, mb = _artifacts(a), _artifacts(b)
    assert ma == mb and len(ma) > 20
    assert "volatile timings.json" in (a / "manifest.txt").read_text()
    summary = json.loads((a / "reports" / "report" / "summary.json").read_text())
    assert set(summary["evaluation"]) >= {"gp", "mlp", "noise_floor", "routing"}
    assert (a / "reports" / "cluster" / "agreement_ARI.csv").exists()
    speed = json.loads((a / "timings.json").read_text())["gp_speedup"]
    assert speed["total"]["ratio"] > 0


def test_stages_one_by_one_and_seed_override(tmp_path, small_config):
    root = tmp_path / "s"
    for stage in pipeline.STAGES:
        assert main(["--config", str(small_config), "--out", str(root), stage]) == EXIT_OK
    other = tmp_path / "o"
    assert main(["--config", str(small_config), "--out", str(other), "--seed", "4", "synth"]) == EXIT_OK
    assert _artifacts(root)["data/dataset.csv"] != _artifacts(other)["data/dataset.csv"]
    preds = pipeline.read_predictions(root / "reports" / "predict" / "predictions.csv")
    assert len(preds) == 2 * 4 * 2 * 2  # assemblies x cycles x models x scopes
    for rec in preds.values():
        np.testing.assert_allclose(rec["ci95_high"] - rec["mean"], 1.96 * rec["std"], atol=1e-12)


def test_shipped_config_matches_defaults():
    from pathlib import Path

    path = Path(__file__).parent.parent / "configs" / "default.yaml"
    assert pipeline.load_config(path) == pipeline.RunConfig()
