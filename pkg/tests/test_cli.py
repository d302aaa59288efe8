import json

import pytest

from conftest import SMALL_CASE
from vertebra_hfe.cli import EXIT_EXCLUDED, EXIT_OK, EXIT_STAGE, main

STRICT_TRIGGER = ["--set", "exclusion.strain_warning=1e-9", "--set", "exclusion.strain_limit=1e-9",
                  "--set", "exclusion.max_over_fraction=0"]


@pytest.fixture(scope="module")
def case(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    (root / "small.ini").write_text(SMALL_CASE)
    assert main(["phantom", "--config", str(root / "small.ini"), "--out", str(root / "case")]) == EXIT_OK
    return root / "case"


def run(*argv):
    return main([str(a) for a in argv])


def test_phantom_writes_inputs(case):
    for name in ("ct.hdr", "ct.raw", "mask.hdr", "mesh.txt", "dvc.csv", "dvc.csv.hdr", "calibration_samples.txt",
                 "uncertainty_a.csv", "uncertainty_b.csv", "clinical_ct.hdr", "transform.txt"):
        assert (case / "inputs" / name).is_file(), name
    assert "enabled = false" in (case / "case.ini").read_text()


def test_stage_by_stage(case, tmp_path, capsys):
    ini = case / "case.ini"
    assert run("calibrate", "--config", ini, "--out", tmp_path) == EXIT_OK
    assert json.loads(capsys.readouterr().out)["source"] == "fitted"
    assert (tmp_path / "density.hdr").is_file()

    assert run("map-materials", "--config", ini, "--out", tmp_path) == EXIT_OK
    assert run("solve", "--config", ini, "--materials", tmp_path / "materials.csv", "--out", tmp_path) == EXIT_OK
    assert run("validate", "--config", ini, "--solution", tmp_path / "solution_nodes.csv",
               "--out", tmp_path) == EXIT_OK
    capsys.readouterr()
    assert run("exclude", "--config", ini, "--pairs", tmp_path / "pairs.csv", "--out", tmp_path) == EXIT_OK
    rep = json.loads(capsys.readouterr().out)
    assert rep["criterion3"]["status"] == "evaluated"
    assert run("exclude", "--config", ini, "--pairs", tmp_path / "pairs.csv", "--out", tmp_path, "--strict",
               *STRICT_TRIGGER) == EXIT_EXCLUDED
    assert run("propagate-error", "--config", ini, "--pairs", tmp_path / "pairs.csv", "--out", tmp_path) == EXIT_OK
    assert (tmp_path / "error_strain.csv").is_file()

    # clinical model through the transform branch, then compare the two solutions
    clin = tmp_path / "clinical"
    assert run("map-materials", "--config", ini, "--volume", case / "inputs" / "clinical_ct.hdr",
               "--calibration", case / "inputs" / "clinical_calibration.txt",
               "--transform", case / "inputs" / "transform.txt", "--out", clin) == EXIT_OK
    assert run("solve", "--config", ini, "--materials", clin / "materials.csv", "--out", clin) == EXIT_OK
    capsys.readouterr()
    assert run("compare-models", "--config", ini, "--solution-a", tmp_path / "solution_nodes.csv",
               "--solution-b", clin / "solution_nodes.csv", "--out", tmp_path) == EXIT_OK
    res = json.loads(capsys.readouterr().out)
    assert res["reaction_delta"] < 0.02 and res["per_direction"]["z"]["r2"] > 0.99


def test_pipeline_exit_codes(tmp_path):
    (tmp_path / "small.ini").write_text(SMALL_CASE)
    assert run("pipeline", "--config", tmp_path / "small.ini", "--out", tmp_path / "a") == EXIT_OK
    assert (tmp_path / "a" / "report.json").is_file()
    assert run("pipeline", "--config", tmp_path / "small.ini", "--out", tmp_path / "b", "--strict",
               *STRICT_TRIGGER) == EXIT_EXCLUDED


def test_stage_error_exit(tmp_path, capsys):
    assert run("solve", "--mesh", tmp_path / "missing.txt", "--out", tmp_path) == EXIT_STAGE
    assert "stage 'solve' failed" in capsys.readouterr().err
    assert run("pipeline", "--set", "solver.n_steps=0", "--out", tmp_path) == EXIT_STAGE


def test_required_flag(case, tmp_path, capsys):
    assert run("exclude", "--config", case / "case.ini", "--out", tmp_path) == EXIT_STAGE
    assert "--pairs is required" in capsys.readouterr().err
