import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from vertebra_hfe.dvcfield import DvcGrid, differentiate_strains, grid_from_function
from vertebra_hfe.errors import (CoverageError, DegenerateRegressionError, EmptyComparisonError,
                                 InsufficientDataError)
from vertebra_hfe.materials import MaterialField
from vertebra_hfe.mesh import barycentric, box_mesh
from vertebra_hfe.solver import solve_elastic
from vertebra_hfe.validate import (ExclusionConfig, Pairs, build_dirichlet_from_dvc, direction_metrics,
                                   direction_reliability, error_grid, exclusion_check, extract_bc_slices,
                                   fe_at_dvc_points, propagate_displacement_error, read_pairs_csv,
                                   regression_metrics, subset_trabecular)
from vertebra_hfe.volume import VoxelVolume

H = 1.95


def flagged_grid(dims, inside_k=None, corr=None, fn=None, origin=(0.0, 0.0, 0.0), spacing=H):
    inside = np.zeros(dims, bool)
    if inside_k is None:
        inside[:] = True
    else:
        inside[:, :, inside_k] = True
    fn = fn or (lambda p: np.zeros_like(p))
    return grid_from_function(fn, origin, spacing, dims, correlate=corr, inside_bone=inside)


def naive_metrics(x, y):
    n = len(x)
    mx, my = sum(x) / n, sum(y) / n
    sxy = sum((a - mx) * (b - my) for a, b in zip(x, y))
    sxx = sum((a - mx) ** 2 for a in x)
    slope = sxy / sxx
    icpt = my - slope * mx
    ss_res = sum((b - slope * a - icpt) ** 2 for a, b in zip(x, y))
    ss_tot = sum((b - my) ** 2 for b in y)
    rmse = (sum((b - a) ** 2 for a, b in zip(x, y)) / n) ** 0.5
    return slope, icpt, 1 - ss_res / ss_tot, rmse, 100 * rmse / max(abs(a) for a in x)


class TestBcSlices:
    def test_extremal_slices(self):
        assert extract_bc_slices(flagged_grid((4, 4, 15), inside_k=slice(3, 13))) == (12, 3)

    def test_threshold(self):
        corr = np.ones((4, 4, 15), bool)
        corr[:, :, 12] = False
        corr[:2, 0, 12] = True
        assert extract_bc_slices(flagged_grid((4, 4, 15), inside_k=slice(3, 13), corr=corr)) == (11, 3)

    def test_no_bone(self):
        g = grid_from_function(lambda p: p * 0, (0, 0, 0), H, (3, 3, 3), inside_bone=np.zeros((3, 3, 3), bool))
        with pytest.raises(CoverageError):
            extract_bc_slices(g)


class TestDirichletFromDvc:
    def setup_method(self):
        self.mesh = box_mesh((4 * H,) * 3, (4, 4, 4))

    def test_constant_slice_values(self):
        g = flagged_grid((5, 5, 5), inside_k=slice(1, 4),
                         fn=lambda p: np.where(p[:, 2:3] > 4, [[0.1, 0.2, -0.3]], [[0.0, 0.0, 0.0]]))
        b = build_dirichlet_from_dvc(self.mesh, g, extract_bc_slices(g))
        assert b.upper_z == pytest.approx(3 * H) and b.lower_z == pytest.approx(H)
        assert np.all(self.mesh.coords[b.up_nodes, 2] >= 3 * H - 1e-9)
        vals = b.bc.values.reshape(-1, 3)
        up = np.isin(b.bc.nodes.reshape(-1, 3)[:, 0], b.up_nodes)
        assert np.allclose(vals[up], [0.1, 0.2, -0.3]) and np.allclose(vals[~up], 0.0)

    def test_values_match_direct_slice_interpolation(self, rng):
        A = rng.normal(size=(3, 3)) * 1e-3
        g = flagged_grid((5, 5, 5), inside_k=slice(1, 4), fn=lambda p: p @ A.T + 0.01 * np.sin(p))
        b = build_dirichlet_from_dvc(self.mesh, g, (3, 1))
        from vertebra_hfe.dvcfield import interpolate_slice
        node = b.bc.nodes.reshape(-1, 3)[:, 0]
        for nodes, k in ((b.up_nodes, 3), (b.down_nodes, 1)):
            want, ok = interpolate_slice(g, k, self.mesh.coords[nodes, :2])
            got = b.bc.values.reshape(-1, 3)[np.searchsorted(node, nodes)]
            assert ok.all() and np.array_equal(got, want)

    def test_affine_patch_composition(self):
        # uniaxial stress plus a rigid motion: affine and traction free on the lateral faces,
        # so constraining only the end slabs reproduces it exactly
        eps, nu = -0.002, 0.3
        W = np.array([[0.0, -1e-3, 2e-3], [1e-3, 0.0, -5e-4], [-2e-3, 5e-4, 0.0]])
        A = np.diag([-nu * eps, -nu * eps, eps]) + W
        f = lambda p: p @ A.T + [0.01, -0.02, 0.005]  # noqa: E731
        g = flagged_grid((5, 5, 5), fn=f)
        b = build_dirichlet_from_dvc(self.mesh, g, extract_bc_slices(g))
        mat = MaterialField(np.full(self.mesh.n_elements, 0.5), 1000.0, nu)
        sol = solve_elastic(self.mesh, mat, b.bc, rtol=1e-13)
        pairs = fe_at_dvc_points(self.mesh, sol, g)
        per, _ = direction_metrics(pairs)
        assert per["z"].r2 == pytest.approx(1.0, abs=1e-12) and per["z"].rmse <= 1e-8
        assert np.max(np.abs(pairs.error)) <= 1e-8
        assert np.allclose(sol.strain, np.diag([-nu * eps, -nu * eps, eps]), atol=1e-10)

    def test_full_affine_reproduced_with_boundary_data(self, rng):
        # constrain every slice so the data define all boundary motion: interior reproduces the field
        A = rng.normal(size=(3, 3)) * 1e-3
        f = lambda p: p @ A.T + [0.01, -0.02, 0.005]  # noqa: E731
        g = flagged_grid((5, 5, 5), inside_k=slice(0, 5), fn=f)
        b = build_dirichlet_from_dvc(self.mesh, g, extract_bc_slices(g))
        side = np.flatnonzero(np.any(np.isclose(self.mesh.coords[:, :2], 0.0)
                                     | np.isclose(self.mesh.coords[:, :2], 4 * H), axis=1))
        side = np.setdiff1d(side, b.bc.nodes)
        from vertebra_hfe.solver import DirichletSet
        bc = b.bc.merge(DirichletSet.from_nodes(side, f(self.mesh.coords[side])))
        mat = MaterialField(np.full(self.mesh.n_elements, 0.5), 1000.0, 0.3)
        sol = solve_elastic(self.mesh, mat, bc, rtol=1e-13)
        pairs = fe_at_dvc_points(self.mesh, sol, g)
        m = regression_metrics(pairs.dvc[:, 2], pairs.fe[:, 2])
        assert m.r2 == pytest.approx(1.0, abs=1e-12) and m.rmse <= 1e-8
        assert np.allclose(sol.strain, 0.5 * (A + A.T), atol=1e-10)

    def test_uncovered_nodes(self):
        corr = np.ones((5, 5, 5), bool)
        corr[4, 4, 3] = False
        g = flagged_grid((5, 5, 5), inside_k=slice(1, 4), corr=corr)
        with pytest.raises(CoverageError) as exc:
            build_dirichlet_from_dvc(self.mesh, g, (3, 1))
        assert len(exc.value.args) >= 1
        b = build_dirichlet_from_dvc(self.mesh, g, (3, 1), extrapolate=True)
        assert len(b.extrapolated_nodes) > 0
        assert np.allclose(b.bc.values, 0.0)

    def test_slice_order(self):
        with pytest.raises(ValueError):
            build_dirichlet_from_dvc(self.mesh, flagged_grid((5, 5, 5)), (1, 3))


class TestPairs:
    def setup_method(self):
        self.mesh = box_mesh((4.0, 4.0, 20.0), (2, 2, 5))
        self.u = self.mesh.coords * [0.0, 0.0, -0.01]

    def test_identical_when_synthesized(self):
        from vertebra_hfe.dvcfield import synthesize_dvc
        g = synthesize_dvc(self.mesh, self.u, (0.5, 0.5, 0.5), H, (3, 3, 11))
        p = fe_at_dvc_points(self.mesh, self.u, g)
        assert np.allclose(p.dvc, p.fe, atol=1e-15)

    def test_count_matches_brute_force(self, rng):
        g = grid_from_function(lambda q: rng.normal(size=q.shape), (-1.0, -1.0, -2.0), 1.3, (6, 6, 20),
                               correlate=rng.random((6, 6, 20)) > 0.2)
        p = fe_at_dvc_points(self.mesh, self.u, g)
        pts = g.node_coords().reshape(-1, 3)[g.correlate.reshape(-1)]
        n = 0
        for q in pts:
            if not (2.5 <= q[2] <= 17.5):
                continue
            lam = barycentric(self.mesh, np.arange(self.mesh.n_elements), np.repeat(q[None], self.mesh.n_elements, 0))
            n += bool(np.any(lam.min(axis=1) >= -1e-9))
        assert len(p) == n

    def test_empty(self):
        g = grid_from_function(lambda q: q * 0, (50.0, 0.0, 0.0), H, (2, 2, 2))
        with pytest.raises(EmptyComparisonError):
            fe_at_dvc_points(self.mesh, self.u, g)

    def test_csv_round_trip(self, tmp_path, rng):
        p = Pairs(rng.integers(0, 9, (5, 3)), rng.random((5, 3)), rng.random((5, 3)), rng.random((5, 3)))
        p.write_csv(tmp_path / "p.csv")
        q = read_pairs_csv(tmp_path / "p.csv")
        for k in ("indices", "points", "dvc", "fe"):
            assert np.array_equal(getattr(p, k), getattr(q, k))


class TestTrabecularSubset:
    def setup_method(self):
        self.pts = np.array([[0.2, 0.5, 0.5], [1.6, 0.5, 0.5], [0.6, 1.5, 0.2], [1.2, 0.1, 1.6]])

    def test_all_and_none(self):
        ones = VoxelVolume(np.ones((4, 4, 4)), 0.5, kind="mask")
        assert subset_trabecular(self.pts, ones).all()
        assert not subset_trabecular(self.pts, ones.with_values(np.zeros((4, 4, 4)))).any()

    def test_half_space(self):
        v = VoxelVolume(np.zeros((4, 4, 4)), 0.5, kind="mask")
        vals = (v.voxel_centers()[..., 0] >= 1.0).astype(float)
        got = subset_trabecular(self.pts, v.with_values(vals))
        # voxels centred at x >= 1 cover the half-space x >= 0.75
        assert got.tolist() == (self.pts[:, 0] >= 0.75).tolist()

    def test_rejects_non_mask(self):
        with pytest.raises(ValueError):
            subset_trabecular(self.pts, VoxelVolume(np.ones((2, 2, 2)), 1.0))


class TestRegression:
    def test_identity(self, rng):
        x = rng.normal(size=20)
        m = regression_metrics(x, x)
        assert (m.slope, m.r2, m.rmse) == (pytest.approx(1.0), 1.0, 0.0) and m.intercept == pytest.approx(0, abs=1e-15)

    def test_worked_example(self):
        m = regression_metrics([1.0, 2.0, 3.0], [1.0, 2.0, 4.0])
        assert m.rmse == pytest.approx(np.sqrt(1 / 3))
        assert m.rmse_pct == pytest.approx(19.245, abs=1e-3)
        assert m.max_abs_error == 1.0 and m.n_points == 3

    def test_wrong_gain(self, rng):
        x = rng.normal(size=10)
        m = regression_metrics(x, 2 * x)
        assert m.slope == pytest.approx(2.0) and m.r2 == pytest.approx(1.0)

    def test_errors(self):
        with pytest.raises(InsufficientDataError):
            regression_metrics([1.0, 2.0], [1.0, 2.0])
        with pytest.raises(DegenerateRegressionError):
            regression_metrics([1.0, 1.0, 1.0], [1.0, 2.0, 3.0])

    def test_constant_prediction_gives_zero_r2(self):
        assert regression_metrics([1.0, 2.0, 3.0], [5.0, 5.0, 5.0]).r2 == 0.0

    @settings(max_examples=100, deadline=None)
    @given(st.integers(3, 40), st.integers(0, 2 ** 32 - 1))
    def test_matches_naive(self, n, seed):
        r = np.random.default_rng(seed)
        x = r.normal(size=n)
        y = 0.7 * x + r.normal(size=n) * 0.3
        m = regression_metrics(x, y)
        ref = naive_metrics(x.tolist(), y.tolist())
        assert np.allclose([m.slope, m.intercept, m.r2, m.rmse, m.rmse_pct], ref, rtol=1e-10, atol=1e-12)

    @given(arrays(np.float64, 6, elements=st.floats(-10, 10)), st.floats(1e-3, 1e3))
    def test_rmse_pct_scale_invariant(self, x, c):
        if np.ptp(x) < 1e-3:
            return
        y = x[::-1] + 0.5
        a = regression_metrics(x, y)
        b = regression_metrics(c * x, c * y)
        assert a.rmse_pct == pytest.approx(b.rmse_pct, rel=1e-9)
        assert 0.0 <= a.r2 <= 1.0 and a.rmse >= 0


class TestReliability:
    def test_flags(self):
        g = grid_from_function(lambda p: np.column_stack([0 * p[:, 0], 0.01 + 0 * p[:, 0], -0.2 + 0 * p[:, 0]]),
                               (0, 0, 0), H, (2, 2, 2))
        r = direction_reliability(g, 0.039)
        assert [r[d]["reliable"] for d in r] == [False, False, True]
        assert direction_reliability(g, 0.01)["y"]["reliable"]

    def test_median_oracle(self, rng):
        g = grid_from_function(lambda p: rng.normal(size=p.shape) * 0.05, (0, 0, 0), H, (4, 4, 4),
                               correlate=rng.random((4, 4, 4)) > 0.3)
        r = direction_reliability(g, 0.039)
        for d, name in enumerate(r):
            vals = np.sort(np.abs(g.displacement[g.correlate][:, d]))
            n = len(vals)
            med = vals[n // 2] if n % 2 else 0.5 * (vals[n // 2 - 1] + vals[n // 2])
            assert r[name]["median_abs_mm"] == pytest.approx(med)


class TestExclusion:
    def base(self, rng, strain_fn=None, corr=None, dims=(4, 4, 10)):
        fn = strain_fn or (lambda p: p * 1e-3)
        g = grid_from_function(fn, (0, 0, 0), H, dims, correlate=corr)
        idx = np.argwhere(g.correlate)
        pts = g.node_coords()[g.correlate]
        dvc = g.displacement[g.correlate]
        fe = dvc + rng.normal(size=dvc.shape) * 1e-3
        return g, Pairs(idx, pts, dvc, fe)

    def test_quiet_case(self, rng):
        g, pairs = self.base(rng)
        unc = rng.random(g.dims)
        r = exclusion_check(pairs, differentiate_strains(g), g, unc)
        assert r.criterion1["fraction_over_limit"] == 0.0 and not r.overall_excluded and r.triggered() == []

    def test_thirty_percent_over_limit(self, rng):
        # cells k < 2 carry 3% strain: nodes k = 0, 1 at 3%, interface k = 2 averages to 1.5%
        g, pairs = self.base(rng, lambda p: np.column_stack([0 * p[:, 0], 0 * p[:, 0],
                                                             -0.03 * np.minimum(p[:, 2], 2 * H)]))
        r = exclusion_check(pairs, differentiate_strains(g), g)
        assert r.criterion1["fraction_over_limit"] == pytest.approx(0.3)
        assert r.triggered() == [1]
        assert r.criterion3["status"] == "not evaluated" and r.criterion3["excluded"] is None

    def test_correlation_fraction(self, rng):
        corr = np.zeros((4, 4, 10), bool)
        corr[:, :, :4] = True
        g, pairs = self.base(rng, corr=corr)
        r = exclusion_check(pairs, differentiate_strains(g), g)
        assert r.criterion2["correlating_fraction"] == pytest.approx(0.4) and r.triggered() == [2]

    def test_error_proportional_to_uncertainty(self, rng):
        g, pairs = self.base(rng)
        unc = rng.random(g.dims) * 1e-3
        u = unc[tuple(pairs.indices.T)]
        pairs = Pairs(pairs.indices, pairs.points, pairs.dvc, pairs.dvc + 3.0 * u[:, None])
        r = exclusion_check(pairs, differentiate_strains(g), g, unc)
        assert r.triggered() == [3]
        assert all(v["r2"] == pytest.approx(1.0) for v in r.criterion3["per_direction"].values())
        # correlation is scale invariant
        scaled = Pairs(pairs.indices, pairs.points, 5 * pairs.dvc, 5 * pairs.fe)
        r2 = exclusion_check(scaled, differentiate_strains(g), g, unc)
        assert r2.criterion3["per_direction"]["z"]["r2"] == pytest.approx(r.criterion3["per_direction"]["z"]["r2"])

    def test_thresholds_configurable(self, rng):
        g, pairs = self.base(rng, lambda p: np.column_stack([0 * p[:, 0], 0 * p[:, 0],
                                                             -0.03 * np.minimum(p[:, 2], 2 * H)]))
        r = exclusion_check(pairs, differentiate_strains(g), g, config=ExclusionConfig(max_over_fraction=0.35))
        assert not r.criterion1["excluded"]


class TestErrorPropagation:
    def grid(self, dims=(4, 4, 4)):
        return grid_from_function(lambda p: p * 0, (0, 0, 0), H, dims)

    def test_zero_error(self):
        g = self.grid()
        e = propagate_displacement_error(g, np.zeros(g.dims + (3,)))
        assert np.all(e.quick == 0) and np.all(e.strains.cell_strain == 0) and np.all(e.peak == 0)

    def test_affine_error(self, rng):
        g = self.grid()
        A = rng.normal(size=(3, 3)) * 1e-3
        err = g.node_coords() @ A.T
        e = propagate_displacement_error(g, err)
        assert np.max(np.abs(e.strains.cell_strain - 0.5 * (A + A.T))) <= 1e-15
        q = np.nanmax(e.quick)
        assert q / np.abs(A).max() < 4 * np.max(np.array(g.dims) - 1) * 4

    @pytest.mark.parametrize("comp", [0, 1, 2])
    def test_single_node_closed_form(self, comp):
        g = self.grid((5, 5, 5))
        err = np.zeros(g.dims + (3,))
        e = 0.004
        err[2, 2, 2, comp] = e
        out = propagate_displacement_error(g, err)
        # at cell centres each adjacent cell sees one of four parallel edges
        touched = out.strains.cell_strain[1:3, 1:3, 1:3]
        assert np.max(np.abs(touched[..., comp, comp])) == pytest.approx(e / (4 * H), rel=1e-12)
        # within each cell the interpolant peaks at the perturbed corner, where it is exactly e / h
        assert np.nanmax(out.peak) == pytest.approx(e / H, rel=1e-12)
        far = out.strains.cell_strain[0, 0, 0]
        assert np.all(far == 0)

    def test_uncertainty_residual(self, rng):
        g = self.grid()
        err = rng.normal(size=g.dims + (3,)) * 1e-3
        unc = np.full(g.dims, 1e-4)
        out = propagate_displacement_error(g, err, unc)
        assert np.allclose(out.residual, out.node_error_strain - 1e-4)
        assert set(out.summary()) >= {"quick_estimate", "error_strain", "residual_after_uncertainty"}

    def test_error_grid_from_pairs(self, rng):
        g = self.grid()
        idx = np.array([[0, 0, 0], [1, 2, 3]])
        p = Pairs(idx, g.node_coords()[tuple(idx.T)], np.zeros((2, 3)), np.ones((2, 3)))
        eg = error_grid(g, p)
        assert isinstance(eg, DvcGrid) and eg.correlate.sum() == 2
        assert np.array_equal(eg.displacement[1, 2, 3], [1.0, 1.0, 1.0])
