import json

import numpy as np
import pytest

from conftest import SMALL_CASE
from vertebra_hfe.errors import ContractError, StageError
from vertebra_hfe.export import read_solution_nodes
from vertebra_hfe.materials import MaterialField, read_materials_csv
from vertebra_hfe.mesh import box_mesh, read_mesh
from vertebra_hfe.pipeline import (PipelineConfig, compare_models, endplate_loading, load_config, run_pipeline,
                                   synthetic_grid_geometry)
from vertebra_hfe.solver import solve_elastic
from vertebra_hfe.validate import read_pairs_csv, regression_metrics


class TestConfig:
    def test_defaults(self):
        cfg = PipelineConfig()
        assert cfg.dvc.spacing == 1.95 and cfg.dvc.central_fraction == 0.75
        assert cfg.material.nu == 0.3 and cfg.exclusion.max_over_fraction == 0.25

    def test_parse_and_round_trip(self):
        cfg = PipelineConfig.from_string(SMALL_CASE)
        assert cfg.synthetic.radii == (10.0, 8.0) and cfg.synthetic.clinical is True and cfg.run.seed == 7
        again = PipelineConfig.from_string(cfg.to_ini())
        assert again.as_dict() == cfg.as_dict()

    def test_overrides(self):
        cfg = PipelineConfig().override(["solver.n_steps=4", "dvc.extrapolate=no", "synthetic.radii=3 2"])
        assert cfg.solver.n_steps == 4 and cfg.dvc.extrapolate is False and cfg.synthetic.radii == (3.0, 2.0)

    @pytest.mark.parametrize("bad", ["solver.n_steps=0", "material.nu=0.5", "nosuch.key=1", "dvc.nosuch=1",
                                     "dvc.extrapolate=maybe", "missing-dot=1", "exclusion.strain_warning=0.02"])
    def test_rejects_invalid(self, bad):
        with pytest.raises(ValueError):
            PipelineConfig().override([bad])

    def test_unknown_section(self):
        with pytest.raises(ValueError):
            PipelineConfig.from_string("[extra]\na = 1\n")

    def test_load_config_seed_and_relative_paths(self, tmp_path):
        (tmp_path / "c.ini").write_text("[paths]\nmesh = m.txt\n")
        cfg = load_config(tmp_path / "c.ini", ["run.seed=3"], seed=11)
        assert cfg.run.seed == 11 and cfg.resolve(cfg.paths.mesh) == tmp_path / "m.txt"


class TestSyntheticHelpers:
    def test_grid_geometry(self):
        m = box_mesh((7.8, 7.8, 11.7), (4, 4, 6), origin=(-3.9, -3.9, 0.0))
        origin, dims = synthetic_grid_geometry(m, 1.95, 1.95)
        assert np.allclose(origin, (-3.9, -3.9, 1.95)) and dims == (5, 5, 5)
        with pytest.raises(ContractError):
            synthetic_grid_geometry(m, 1.95, 5.0)

    def test_endplate_loading_is_affine_in_plane(self):
        m = box_mesh((4.0, 4.0, 4.0), (2, 2, 2))
        bc, low, up = endplate_loading(m, 0.0, 4.0, 0.1, tilt=0.01, shear=0.02)
        vals = bc.values.reshape(-1, 3)
        on_up = np.isin(bc.nodes.reshape(-1, 3)[:, 0], up)
        assert np.allclose(vals[~on_up], 0.0)
        assert np.allclose(vals[on_up, 2], -0.1 + 0.01 * m.coords[bc.nodes.reshape(-1, 3)[on_up, 0], 0])
        assert np.allclose(vals[on_up, 0], 0.02)


class TestCompareModels:
    def setup_method(self):
        self.m = box_mesh((2.0, 2.0, 4.0), (2, 2, 4))
        rng = np.random.default_rng(1)
        self.mat = MaterialField(np.full(self.m.n_elements, 0.5), 500 + 1000 * rng.random(self.m.n_elements), 0.3)
        self.bc, self.low, _ = endplate_loading(self.m, 0.0, 4.0, 0.05, tilt=0.01)

    def test_identical_models(self):
        s = solve_elastic(self.m, self.mat, self.bc, rtol=1e-12)
        res = compare_models(s, s, self.low)
        assert res["reaction_delta"] == 0.0
        assert all(v is None or v.r2 == 1.0 for v in res["per_direction"].values())

    def test_scaled_modulus(self):
        a = solve_elastic(self.m, self.mat, self.bc, rtol=1e-12)
        mat2 = MaterialField(self.mat.density, 2 * self.mat.E, 0.3)
        b = solve_elastic(self.m, mat2, self.bc, rtol=1e-12)
        assert np.allclose(a.u, b.u, atol=1e-10)
        res = compare_models(a, b, self.low)
        assert res["reaction_delta"] == pytest.approx(1.0, rel=1e-8)

    def test_mesh_mismatch(self):
        s = solve_elastic(self.m, self.mat, self.bc)
        with pytest.raises(ContractError):
            compare_models(s, s, self.low, mesh_a=self.m, mesh_b=box_mesh((2.0, 2.0, 4.1), (2, 2, 4)))


class TestRun:
    def test_report_contents(self, small_run):
        out, rep = small_run
        assert json.loads((out / "report.json").read_text()) == rep
        for key in ("calibration", "materials", "boundary_conditions", "solve", "reactions", "comparison",
                    "exclusion", "error_propagation", "clinical", "excluded", "artifacts"):
            assert key in rep
        assert rep["reactions"]["down_N"] == pytest.approx(-rep["reactions"]["up_N"], rel=1e-6)

    def test_artifacts_exist(self, small_run):
        out, rep = small_run
        for rel in rep["artifacts"].values():
            assert (out / rel).is_file(), rel

    def test_metrics_recomputable_from_pairs(self, small_run):
        out, rep = small_run
        pairs = read_pairs_csv(out / rep["artifacts"]["pairs"])
        assert len(pairs) == rep["comparison"]["n_points"]
        for d, name in enumerate("xyz"):
            got = rep["comparison"]["per_direction"][name]
            m = regression_metrics(pairs.dvc[:, d], pairs.fe[:, d])
            assert got["r2"] == pytest.approx(m.r2, rel=1e-12) and got["rmse"] == pytest.approx(m.rmse, rel=1e-12)

    def test_reactions_recomputable_from_solution(self, small_run):
        out, rep = small_run
        mesh, _ = read_mesh(out / rep["artifacts"]["input_mesh"])
        sol = read_solution_nodes(mesh, out / rep["artifacts"]["solution_nodes"])
        down = sol.nodes_in("down")
        assert np.sum(sol.nodal_forces[down, 2]) == pytest.approx(rep["reactions"]["down_N"], rel=1e-12)
        mat = read_materials_csv(mesh, out / rep["artifacts"]["materials"])
        assert mat.E.min() == pytest.approx(rep["materials"]["E_MPa"]["min"], rel=1e-12)

    def test_missing_mesh_is_stage_error_without_report(self, tmp_path):
        cfg = PipelineConfig.from_string(SMALL_CASE).override(["synthetic.enabled=false"])
        cfg.paths.volume = str(tmp_path / "nothing.hdr")
        with pytest.raises(StageError) as exc:
            run_pipeline(cfg, tmp_path / "out")
        assert exc.value.stage == "calibrate"
        assert not (tmp_path / "out" / "report.json").exists()

    def test_missing_mesh_named(self, small_run, tmp_path):
        src, rep = small_run
        cfg = PipelineConfig.from_string(SMALL_CASE).override(["synthetic.enabled=false"])
        cfg.base_dir = src
        cfg.paths.volume = "inputs/ct.hdr"
        cfg.paths.calibration_samples = "inputs/calibration_samples.txt"
        cfg.paths.mesh = "inputs/absent.txt"
        with pytest.raises(StageError) as exc:
            run_pipeline(cfg, tmp_path / "out")
        assert exc.value.stage == "mesh" and "absent.txt" in str(exc.value)
        assert not (tmp_path / "out" / "report.json").exists()
