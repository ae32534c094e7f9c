"""Tests for the active-subspace reduction and the reduced inversion driver."""

import dataclasses
import math

import numpy as np
import pytest

from dteki import surrogate as sg
from dteki.inversion import EkiConfig, run_dteki
from dteki.numerics import SeededRng, thin_svd
from dteki.problems import (PdeForwardModel, build_forward_model, generate_data,
                            make_problem, residual_rows)
from dteki.subspace import (SubspaceBlock, SubspaceForwardModel, SubspaceMap,
                            build_subspace, build_subspace_for_model,
                            gradient_matrix, left_singular_factors, lift,
                            restrict, run_sdteki)


def make_model(name, protocol="inverse", seed=3, **spec_overrides):
    problem = make_problem(name)
    if spec_overrides:
        problem = dataclasses.replace(problem, **spec_overrides)
    data = generate_data(problem, protocol, SeededRng(seed))
    return build_forward_model(problem, data)


def exact_predict(model, members):
    """Exact float64 stacked rows, composed independently of model.predict."""
    members = np.atleast_2d(np.asarray(members, dtype=np.float64))
    obs = model.observations
    lam = {name: members[:, i][:, None]
           for i, name in enumerate(model.unknown_lambdas)}
    for name in model.problem.lambda_names:
        lam.setdefault(name, model.problem.true_lambda(name))
    th0 = members[:, model.theta_slices[0]]
    fp = obs.residual.points
    uv, ug, us = sg.batch_derivs(model.templates[0], th0, fp)
    u_v, u_g = uv[:, :, 0], ug[:, :, 0, :]
    u_l = us[:, :, 0, :].sum(axis=-1)
    if model.problem.name == "darcy":
        th1 = members[:, model.theta_slices[1]]
        kv, kg, _ = sg.batch_derivs(model.templates[1], th1, fp)
        res = residual_rows(model.problem, lam, u_v, u_g, u_l,
                            kv[:, :, 0], kg[:, :, 0, :])
    else:
        res = residual_rows(model.problem, lam, u_v, u_g, u_l)
    bu = np.concatenate([obs.boundary.points, obs.interior.points])
    parts = [res, sg.batch_values(model.templates[0], th0, bu)[:, :, 0]]
    if obs.kappa_boundary is not None:
        parts.append(sg.batch_values(model.templates[1], th1,
                                     obs.kappa_boundary.points)[:, :, 0])
    return np.concatenate(parts, axis=1)


def random_orthonormal(n, m, seed=0):
    q, _ = np.linalg.qr(SeededRng(seed).standard_normal((n, max(m, 1))))
    return q[:, :m]


# ---------------------------------------------------------------------------
# SubspaceMap algebra
# ---------------------------------------------------------------------------


class TestSubspaceMap:
    def map_2blocks(self):
        b1 = random_orthonormal(12, 4, seed=1)
        b2 = random_orthonormal(9, 3, seed=2)
        return SubspaceMap((
            SubspaceBlock(b1, np.linspace(4, 1, 12), 0.99),
            SubspaceBlock(b2, np.linspace(3, 1, 9), 0.98),
        ))

    def test_lift_of_zero_is_zero(self):
        smap = self.map_2blocks()
        assert np.all(smap.lift(np.zeros(smap.m)) == 0.0)

    def test_restrict_after_lift_is_identity(self):
        smap = self.map_2blocks()
        omega = SeededRng(5).standard_normal((6, smap.m))
        back = smap.restrict(smap.lift(omega))
        assert np.max(np.abs(back - omega)) <= 1e-10

    def test_lift_after_restrict_is_orthogonal_projection(self):
        smap = self.map_2blocks()
        theta = SeededRng(6).standard_normal(smap.n_theta)
        residual = smap.lift(smap.restrict(theta)) - theta
        # the projection residual has no component along any basis column
        assert np.max(np.abs(smap.restrict(residual))) <= 1e-10

    def test_block_structure_is_respected(self):
        smap = self.map_2blocks()
        omega = np.zeros(smap.m)
        omega[smap.blocks[0].m:] = 1.0  # excite only the second block
        theta = smap.lift(omega)
        assert np.all(theta[:smap.blocks[0].n_theta] == 0.0)
        assert np.any(theta[smap.blocks[0].n_theta:] != 0.0)

    def test_module_level_wrappers_match_methods(self):
        smap = self.map_2blocks()
        omega = SeededRng(7).standard_normal(smap.m)
        assert np.array_equal(lift(smap, omega), smap.lift(omega))
        theta = smap.lift(omega)
        assert np.array_equal(restrict(smap, theta), smap.restrict(theta))

    def test_dimension_mismatches_raise(self):
        smap = self.map_2blocks()
        with pytest.raises(ValueError, match="reduced vector length"):
            smap.lift(np.zeros(smap.m + 1))
        with pytest.raises(ValueError, match="coefficient vector length"):
            smap.restrict(np.zeros(smap.n_theta - 1))
        with pytest.raises(ValueError, match="at least one block"):
            SubspaceMap(())

    def test_save_load_roundtrip(self, tmp_path):
        smap = self.map_2blocks()
        path = tmp_path / "map.npz"
        smap.save(path)
        loaded = SubspaceMap.load(path)
        assert len(loaded.blocks) == 2
        for a, b in zip(smap.blocks, loaded.blocks):
            assert np.array_equal(a.basis, b.basis)
            assert np.array_equal(a.singular_values, b.singular_values)
            assert a.energy == b.energy


# ---------------------------------------------------------------------------
# factorization routes
# ---------------------------------------------------------------------------


class TestBuildSubspace:
    def test_gram_eigenvalues_match_squared_singular_values(self):
        g = SeededRng(11).standard_normal((18, 40))
        _, s, _ = thin_svd(g)
        eigvals = np.sort(np.linalg.eigvalsh(g @ g.T))[::-1]
        assert np.max(np.abs(eigvals - s**2) / eigvals[0]) <= 1e-8

    def test_svd_and_eigen_routes_agree(self):
        g = SeededRng(12).standard_normal((15, 90))
        w_svd, s_svd = left_singular_factors(g, route="svd")
        w_eig, s_eig = left_singular_factors(g, route="eigen")
        assert np.max(np.abs(s_svd - s_eig)) <= 1e-8 * s_svd[0]
        # bases agree as subspaces (columns may flip sign)
        m = 6
        p_svd = w_svd[:, :m] @ w_svd[:, :m].T
        p_eig = w_eig[:, :m] @ w_eig[:, :m].T
        assert np.max(np.abs(p_svd - p_eig)) <= 1e-8

    def test_auto_route_picks_eigen_for_wide_matrices(self):
        rng = SeededRng(13)
        wide = rng.standard_normal((10, 100))
        w_auto, s_auto = left_singular_factors(wide, route="auto")
        w_eig, s_eig = left_singular_factors(wide, route="eigen")
        assert np.array_equal(w_auto, w_eig)
        assert np.array_equal(s_auto, s_eig)
        narrow = rng.standard_normal((10, 20))
        w_auto, s_auto = left_singular_factors(narrow, route="auto")
        w_svd, _ = left_singular_factors(narrow, route="svd")
        assert np.array_equal(w_auto, w_svd)

    def test_default_dimension_rule_at_benchmark_sizes(self):
        # the two 1D benchmark networks reduce 1040 -> 347 and 960 -> 320
        for n_theta, expect in [(1040, 347), (960, 320)]:
            g = SeededRng(n_theta).standard_normal((n_theta, 400))
            smap = build_subspace(g)
            assert smap.blocks[0].m == expect
            basis = smap.blocks[0].basis
            gram = basis.T @ basis
            assert np.max(np.abs(gram - np.eye(expect))) <= 1e-10

    def test_singular_values_descending_and_nonnegative(self):
        g = SeededRng(14).standard_normal((30, 50))
        smap = build_subspace(g, fraction=0.5)
        s = smap.blocks[0].singular_values
        assert np.all(s >= 0)
        assert np.all(np.diff(s) <= 1e-12)

    def test_energy_matches_hand_value(self):
        u = random_orthonormal(6, 6, seed=15)
        v = random_orthonormal(8, 6, seed=16)
        s = np.array([4.0, 2.0, 1.0, 0.5, 0.25, 0.125])
        smap = build_subspace(u @ np.diag(s) @ v.T, fraction=1 / 3.0)
        expect = (16 + 4) / np.sum(s**2)
        assert abs(smap.blocks[0].energy - expect) <= 1e-12
        assert smap.blocks[0].m == 2

    def test_rank_deficient_matrix_truncates_with_warning(self):
        g = SeededRng(17).standard_normal((10, 2))  # rank 2 < ceil(10/3) = 4
        with pytest.warns(RuntimeWarning, match="rank 2 is below"):
            smap = build_subspace(g)
        assert smap.blocks[0].m == 2

    def test_zero_matrix_keeps_no_directions(self):
        with pytest.warns(RuntimeWarning, match="rank 0"):
            smap = build_subspace(np.zeros((6, 4)))
        assert smap.blocks[0].m == 0
        assert smap.blocks[0].energy == 0.0

    def test_multiple_blocks_build_independently(self):
        rng = SeededRng(18)
        gs = [rng.standard_normal((12, 30)), rng.standard_normal((9, 30))]
        smap = build_subspace(gs)
        assert [b.n_theta for b in smap.blocks] == [12, 9]
        assert [b.m for b in smap.blocks] == [4, 3]
        solo = build_subspace(gs[1])
        assert np.array_equal(smap.blocks[1].basis, solo.blocks[0].basis)

    def test_invalid_arguments_raise(self):
        g = np.ones((4, 4))
        with pytest.raises(ValueError, match="fraction"):
            build_subspace(g, fraction=0.0)
        with pytest.raises(ValueError, match="fraction"):
            build_subspace(g, fraction=1.5)
        with pytest.raises(ValueError, match="route"):
            left_singular_factors(g, route="qr")
        with pytest.raises(ValueError, match="2-d"):
            left_singular_factors(np.zeros(3))


# ---------------------------------------------------------------------------
# gradient sampling
# ---------------------------------------------------------------------------


def reproduce_draws(model, n_samples, rng_seed, sample_lambda=False):
    """Replay the prior draws gradient_matrix makes for a fixed point subset."""
    rng = SeededRng(rng_seed)
    theta_w = rng.standard_normal((n_samples, model.n_theta))
    lam = (rng.standard_normal((n_samples, model.lambda_dim))
           if sample_lambda else np.zeros((n_samples, model.lambda_dim)))
    scales = model.prior_std[model.lambda_dim:]
    members = np.hstack([lam, theta_w * scales])
    return theta_w, members


class TestGradientMatrix:
    @pytest.mark.parametrize("name,protocol,surrogate,sample_lambda", [
        ("transport", "inverse", "ckan", True),
        ("diffusion", "inverse", "ckan", True),
        ("diffusion", "inverse", "mlp", True),
        ("nonlinear", "big_data", "ckan", False),
        ("darcy", "inverse", "ckan", False),
    ])
    def test_columns_match_finite_differences(self, name, protocol, surrogate,
                                              sample_lambda):
        problem = make_problem(name)
        data = generate_data(problem, protocol, SeededRng(3))
        model = build_forward_model(problem, data, surrogate)
        n_rows_total = model.row_count()
        sel_rng = np.random.default_rng(9)
        rows = np.sort(sel_rng.choice(n_rows_total, size=6, replace=False))
        # make sure every block type is exercised
        rows[0] = 0
        rows[-1] = n_rows_total - 1
        rows = np.unique(rows)
        n_samples = 2
        mats = gradient_matrix(model, n_samples, point_subset=rows, rng=SeededRng(21),
                               sample_lambda=sample_lambda)
        theta_w, members = reproduce_draws(model, n_samples, 21, sample_lambda)
        scales = model.prior_std[model.lambda_dim:]
        offsets = np.concatenate(
            [[0], np.cumsum([t.n_params for t in model.templates])])
        h = 1e-6
        for net, mat in enumerate(mats):
            coords = sel_rng.choice(model.templates[net].n_params, size=8,
                                    replace=False)
            for i in range(n_samples):
                for c in coords:
                    flat_c = offsets[net] + c
                    plus = members[i].copy()
                    plus[model.lambda_dim + flat_c] += h * scales[flat_c]
                    minus = members[i].copy()
                    minus[model.lambda_dim + flat_c] -= h * scales[flat_c]
                    fd = (exact_predict(model, plus)[0, rows]
                          - exact_predict(model, minus)[0, rows]) / (2 * h)
                    got = mat[c, i * rows.size:(i + 1) * rows.size] \
                        * math.sqrt(n_samples)
                    scale_ref = max(1.0, float(np.max(np.abs(fd))))
                    assert np.max(np.abs(got - fd)) <= 1e-5 * scale_ref, (
                        f"net {net} sample {i} coord {c}")

    def test_linear_surrogate_has_identical_jacobians(self):
        # a single cKAN layer is linear in its coefficients, so every prior
        # sample produces the same Jacobian and the rank is set by the rows
        model = make_model("diffusion", ckan_widths=((1, 1),))
        n_rows = model.row_count()
        mats = gradient_matrix(model, n_samples=3, rng=SeededRng(4),
                               n_points=n_rows)
        g = mats[0]
        r = n_rows
        assert g.shape == (model.n_theta, 3 * r)
        for i in (1, 2):
            assert np.allclose(g[:, :r], g[:, i * r:(i + 1) * r],
                               rtol=0, atol=1e-12)
        rank = np.linalg.matrix_rank(g)
        assert rank <= r

    def test_single_sample_matches_first_draw(self):
        model = make_model("diffusion", ckan_widths=((1, 1),))
        rows = np.arange(model.row_count())
        g1 = gradient_matrix(model, 1, point_subset=rows, rng=SeededRng(8))[0]
        g3 = gradient_matrix(model, 3, point_subset=rows, rng=SeededRng(8))[0]
        # same leading prior draw; only the 1/sqrt(M) scale differs
        assert np.allclose(g1, g3[:, :rows.size] * math.sqrt(3.0),
                           rtol=0, atol=1e-12)

    def test_deterministic_in_seed(self):
        model = make_model("transport")
        a = gradient_matrix(model, 4, rng=SeededRng(31), n_points=12)
        b = gradient_matrix(model, 4, rng=SeededRng(31), n_points=12)
        c = gradient_matrix(model, 4, rng=SeededRng(32), n_points=12)
        assert np.array_equal(a[0], b[0])
        assert not np.array_equal(a[0], c[0])

    def test_darcy_cross_network_blocks_are_zero(self):
        model = make_model("darcy")
        obs = model.observations
        nf = model.n_residual_rows
        n_bu = obs.boundary.count + obs.interior.count
        rows = np.array([0, 1, nf, nf + n_bu], dtype=np.intp)  # f, f, u, kb
        mats = gradient_matrix(model, 2, point_subset=rows, rng=SeededRng(41))
        assert len(mats) == 2
        for i in range(2):
            cols_u = mats[0][:, i * 4:(i + 1) * 4]
            cols_k = mats[1][:, i * 4:(i + 1) * 4]
            assert np.any(cols_u[:, 0] != 0) and np.any(cols_k[:, 0] != 0)
            assert np.any(cols_u[:, 2] != 0) and np.all(cols_k[:, 2] == 0)
            assert np.all(cols_u[:, 3] == 0) and np.any(cols_k[:, 3] != 0)

    def test_shapes_at_full_benchmark_size(self):
        model = make_model("transport")
        mats = gradient_matrix(model, 3, rng=SeededRng(51), n_points=10)
        assert len(mats) == 1
        assert mats[0].shape == (1040, 30)

    def test_non_finite_gradient_names_sample(self):
        # needs depth: a single layer is linear in theta, so its gradient
        # stays finite no matter how badly the coefficients blow up
        model = make_model("diffusion", ckan_widths=((1, 2, 1),))
        model.prior_std[model.lambda_dim:] = np.inf
        with pytest.raises(FloatingPointError, match="sample 0"):
            gradient_matrix(model, 2, rng=SeededRng(6), n_points=4)

    def test_invalid_arguments_raise(self):
        model = make_model("diffusion", ckan_widths=((1, 1),))
        with pytest.raises(ValueError, match="at least one sample"):
            gradient_matrix(model, 0)
        with pytest.raises(ValueError, match="empty"):
            gradient_matrix(model, 2, point_subset=np.array([], dtype=int))
        with pytest.raises(ValueError, match="row indices"):
            gradient_matrix(model, 2, point_subset=np.array([-1]))
        with pytest.raises(ValueError, match="row indices"):
            gradient_matrix(model, 2,
                            point_subset=np.array([model.row_count()]))


# ---------------------------------------------------------------------------
# reduced model and driver
# ---------------------------------------------------------------------------


def small_diffusion_model(seed=3):
    return make_model("diffusion", seed=seed, ckan_widths=((1, 4, 1),))


def full_rank_map(model, seed=61):
    n = model.n_theta
    g = SeededRng(seed).standard_normal((n, 2 * n))
    return build_subspace(g, fraction=1.0)


class TestSubspaceForwardModel:
    def test_roundtrip_through_full_coordinates(self):
        model = small_diffusion_model()
        reduced = SubspaceForwardModel(model, full_rank_map(model))
        zeta = SeededRng(7).standard_normal((5, reduced.n_params))
        back = reduced.from_full(reduced.to_full(zeta))
        assert np.max(np.abs(back - zeta)) <= 1e-10

    def test_full_rank_reduction_reproduces_predictions(self):
        model = small_diffusion_model()
        reduced = SubspaceForwardModel(model, full_rank_map(model))
        members = SeededRng(8).standard_normal((4, model.n_params))
        zeta = reduced.from_full(members)
        full_again = reduced.to_full(zeta)
        # a square orthonormal basis reproduces the member exactly
        assert np.max(np.abs(full_again - members)) <= 1e-8
        pred = reduced.predict(zeta)
        assert np.max(np.abs(pred - model.predict(members))) <= 1e-4

    def test_row_bookkeeping_delegates(self):
        model = small_diffusion_model()
        reduced = SubspaceForwardModel(model, full_rank_map(model))
        assert reduced.row_count() == model.row_count()
        idx = np.array([0, 3], dtype=np.intp)
        for got, want in zip(reduced.select_rows(idx), model.select_rows(idx)):
            assert np.array_equal(got, want)
        assert reduced.n_params == model.lambda_dim + model.n_theta
        assert np.all(reduced.prior_std == 1.0)

    def test_mismatched_block_sizes_raise(self):
        model = small_diffusion_model()
        wrong = build_subspace(SeededRng(9).standard_normal((10, 20)))
        with pytest.raises(ValueError, match="do not match"):
            SubspaceForwardModel(model, wrong)


class TestRunSdteki:
    def test_reduced_run_shapes_and_names(self):
        model = small_diffusion_model()
        smap = build_subspace_for_model(model, n_samples=6, n_points=10,
                                        rng=SeededRng(71))
        cfg = EkiConfig(n_members=20, n_iterations=5, batch_size=None, seed=5)
        res = run_sdteki(model.problem, model.observations, cfg, subspace=smap)
        assert res.members.shape == (20, model.lambda_dim + smap.m)
        assert res.diagnostics.lambda_names == ("D",)
        assert np.all(np.isfinite(res.members))
        assert np.all(np.isfinite(res.diagnostics.misfit))

    def test_builds_subspace_deterministically_when_missing(self):
        model = small_diffusion_model()
        cfg = EkiConfig(n_members=10, n_iterations=2, seed=3)
        kw = dict(subspace_rng=5, n_gradient_samples=6, n_gradient_points=8)
        r1 = run_sdteki(model.problem, model.observations, cfg, **kw)
        r2 = run_sdteki(model.problem, model.observations, cfg, **kw)
        assert np.array_equal(r1.members, r2.members)

    def test_accepts_saved_map_path(self, tmp_path):
        model = small_diffusion_model()
        smap = build_subspace_for_model(model, n_samples=6, n_points=10,
                                        rng=SeededRng(72))
        path = tmp_path / "sub.npz"
        smap.save(path)
        cfg = EkiConfig(n_members=12, n_iterations=3, seed=9)
        from_map = run_sdteki(model.problem, model.observations, cfg,
                              subspace=smap)
        from_path = run_sdteki(model.problem, model.observations, cfg,
                               subspace=path)
        assert np.array_equal(from_map.members, from_path.members)

    def test_full_dimension_map_tracks_unreduced_run(self):
        # with a square orthonormal basis the reduced run is the same
        # algorithm in rotated coordinates; misfits should match in scale
        ratios = []
        for seed in (0, 1, 2):
            model = small_diffusion_model(seed=seed)
            cfg = EkiConfig(n_members=40, n_iterations=30, seed=seed + 10)
            full = run_dteki(model.problem, model.observations, cfg)
            smap = full_rank_map(model, seed=62 + seed)
            red = run_sdteki(model.problem, model.observations, cfg,
                             subspace=smap)
            ratios.append(red.diagnostics.misfit[-1]
                          / full.diagnostics.misfit[-1])
        assert 1 / 3 <= np.median(ratios) <= 3.0
