import numpy as np
import pytest

from crbem import (
    CoefVec,
    NumericalError,
    build_initial_square_mesh,
    conf_gap,
    conforming_component,
    conforming_space,
    cr_space,
    curl_field,
    energy_inner,
    estimator_eta,
    estimator_eta_tilde,
    estimator_mu,
    estimator_mu_tilde,
    estimator_report,
    jump_term,
    local_indicators,
    solve_spd,
    uniform_refine,
)
from crbem.spaces import (
    PwConstVecField,
    conforming_to_cr,
    embed_coarse_in_fine,
    prolong_conforming,
)
from crbem.estimators import SolvePair


class TestSolveSpd:
    def test_identity(self):
        b = np.array([3.0, -1.0, 2.0])
        assert np.allclose(solve_spd(np.eye(3), b), b)

    def test_one_by_one(self):
        assert solve_spd(np.array([[4.0]]), np.array([2.0]))[0] == pytest.approx(0.5)

    def test_random_spd(self):
        rng = np.random.default_rng(0)
        m = rng.standard_normal((50, 50))
        a = m.T @ m + np.eye(50)
        x = solve_spd(a, a @ np.ones(50))
        assert np.abs(x - 1.0).max() < 1e-9

    def test_non_spd_rejected(self):
        a = np.array([[1.0, 2.0], [2.0, 1.0]])  # indefinite
        with pytest.raises(NumericalError):
            solve_spd(a, np.ones(2))


class TestSolvePair:
    def test_manufactured_coarse_conforming_is_exact(self, pair_manufactured):
        assert pair_manufactured.phi0.values == pytest.approx([1.0], abs=1e-10)

    def test_partial_orthogonality(self, fixture_pairs):
        for name, pair in fixture_pairs.items():
            a_phi = energy_inner(pair.form_coarse, curl_field(pair.phi),
                                 curl_field(pair.phi))
            what = curl_field(pair.phi_hat)
            wphi = curl_field(pair.phi)
            conf = pair.conf_coarse
            for i in range(conf.dof_count):
                psi = CoefVec(conf, np.eye(conf.dof_count)[i])
                psi_fine = prolong_conforming(psi, pair.fine_mesh, pair.rmap)
                lhs = energy_inner(pair.form_fine, what, curl_field(psi_fine))
                rhs = energy_inner(pair.form_coarse, wphi, curl_field(psi))
                f_psi = pair.rhs["conf_coarse"][i]
                assert abs(lhs - rhs) <= 1e-8 * (a_phi + abs(f_psi)), name

    def test_conforming_component_equals_direct_solve(self, fixture_pairs):
        for name, pair in fixture_pairs.items():
            proj = conforming_component(pair.phi, pair.form_coarse,
                                        pair.conf_coarse)
            scale = np.abs(pair.phi0.values).max() + 1e-30
            assert np.abs(proj.values - pair.phi0.values).max() < 1e-9 * max(
                scale, 1.0), name

    def test_conforming_component_projection_identity(self, pair_constant):
        pair = pair_constant
        conf = pair.conf_coarse
        rng = np.random.default_rng(1)
        psi = CoefVec(conf, rng.standard_normal(conf.dof_count))
        as_cr = conforming_to_cr(psi)
        proj = conforming_component(as_cr, pair.form_coarse, conf)
        assert np.abs(proj.values - psi.values).max() < 1e-10

    def test_conforming_component_orthogonality(self, pair_constant):
        pair = pair_constant
        w_cr = curl_field(pair.phi)
        w_cf = curl_field(pair.phi0)
        d = PwConstVecField(pair.coarse_mesh, w_cr.values - w_cf.values)
        cross = energy_inner(pair.form_coarse, d, w_cf)
        a_phi = energy_inner(pair.form_coarse, w_cr, w_cr)
        assert abs(cross) <= 1e-9 * a_phi


class TestEstimators:
    def test_eta_zero_for_prolongated_solution(self, pair_constant):
        pair = pair_constant
        base = curl_field(pair.phi)
        fake = SolvePair(
            pair.coarse_mesh, pair.fine_mesh, pair.rmap,
            pair.form_coarse, pair.form_fine,
            pair.cr_coarse, pair.cr_fine, pair.conf_coarse, pair.conf_fine,
            pair.phi, pair.phi_hat, pair.phi0, pair.phi0_hat)
        fake._cache["d"] = PwConstVecField(
            pair.fine_mesh, np.zeros((pair.fine_mesh.num_triangles, 2)))
        assert estimator_eta(fake) == 0.0

    def test_eta_positive(self, fixture_pairs):
        for pair in fixture_pairs.values():
            assert estimator_eta(pair) > 0.0

    def test_eta_tilde_zero_for_coarse_conforming(self, pair_constant):
        pair = pair_constant
        conf = pair.conf_coarse
        rng = np.random.default_rng(2)
        psi = CoefVec(conf, rng.standard_normal(conf.dof_count))
        psi_fine_cr = conforming_to_cr(
            prolong_conforming(psi, pair.fine_mesh, pair.rmap))
        fake = SolvePair(
            pair.coarse_mesh, pair.fine_mesh, pair.rmap,
            pair.form_coarse, pair.form_fine,
            pair.cr_coarse, pair.cr_fine, pair.conf_coarse, pair.conf_fine,
            pair.phi, psi_fine_cr, pair.phi0, pair.phi0_hat)
        val = estimator_eta_tilde(fake)
        scale = np.sqrt(energy_inner(pair.form_fine, curl_field(psi_fine_cr),
                                     curl_field(psi_fine_cr)))
        assert val <= 1e-6 * max(scale, 1.0)

    def test_mu_single_element_formula(self, pair_constant):
        pair = pair_constant
        mesh = pair.coarse_mesh
        ones = PwConstVecField(
            pair.fine_mesh, np.tile([1.0, 0.0], (pair.fine_mesh.num_triangles, 1)))
        fake = SolvePair(
            pair.coarse_mesh, pair.fine_mesh, pair.rmap,
            pair.form_coarse, pair.form_fine,
            pair.cr_coarse, pair.cr_fine, pair.conf_coarse, pair.conf_fine,
            pair.phi, pair.phi_hat, pair.phi0, pair.phi0_hat)
        fake._cache["d"] = ones
        total, parts = estimator_mu(fake)
        h = np.sqrt(mesh.areas)
        assert np.allclose(parts, h * mesh.areas)
        assert total ** 2 == pytest.approx(parts.sum(), rel=1e-12)

    def test_mu_tilde_le_mu(self, fixture_pairs):
        for name, pair in fixture_pairs.items():
            mu, _ = estimator_mu(pair)
            mu_t, _ = estimator_mu_tilde(pair)
            assert mu_t <= mu * (1 + 1e-12), name

    def test_mu_parts_sum(self, pair_power):
        total, parts = estimator_mu(pair_power)
        assert parts.sum() == pytest.approx(total ** 2, rel=1e-12)
        total_t, parts_t = estimator_mu_tilde(pair_power)
        assert parts_t.sum() == pytest.approx(total_t ** 2, rel=1e-12)

    def test_mu_tilde_zero_for_parentwise_constant_curl(self, pair_constant):
        pair = pair_constant
        rng = np.random.default_rng(3)
        coarse_vals = rng.standard_normal((pair.coarse_mesh.num_triangles, 2))
        fake = SolvePair(
            pair.coarse_mesh, pair.fine_mesh, pair.rmap,
            pair.form_coarse, pair.form_fine,
            pair.cr_coarse, pair.cr_fine, pair.conf_coarse, pair.conf_fine,
            pair.phi, pair.phi_hat, pair.phi0, pair.phi0_hat)
        fake._cache["curl_hat"] = PwConstVecField(
            pair.fine_mesh, coarse_vals[pair.rmap.child_to_parent])
        total, _ = estimator_mu_tilde(fake)
        assert total < 1e-12

    def test_estimator_ratios_bounded(self, fixture_pairs):
        for name, pair in fixture_pairs.items():
            eta = estimator_eta(pair)
            eta_t = estimator_eta_tilde(pair)
            mu, _ = estimator_mu(pair)
            mu_t, _ = estimator_mu_tilde(pair)
            for val in (eta / eta_t, eta / mu_t, mu / mu_t):
                assert 1e-2 <= val <= 1e2, name


class TestJumpTerm:
    def test_conforming_zero(self, pair_constant):
        mesh = pair_constant.coarse_mesh
        conf = pair_constant.conf_coarse
        rng = np.random.default_rng(4)
        psi = conforming_to_cr(CoefVec(conf, rng.standard_normal(conf.dof_count)))
        total, parts = jump_term(mesh, psi)
        # interior jumps vanish; boundary traces of the hat combination are
        # nonzero only through the trace-against-zero convention
        interior_only, _ = jump_term(mesh, psi, include_boundary=False)
        assert interior_only < 1e-24
        assert np.all(parts >= 0)

    def test_single_edge_formula(self, initial_mesh):
        space = cr_space(initial_mesh)
        phi = CoefVec(space, np.eye(8)[2])
        total, parts = jump_term(initial_mesh, phi, include_boundary=False)
        from crbem.spaces import jump_field
        jumps = jump_field(phi)
        expect = 0.0
        for e in initial_mesh.interior_edges():
            L = initial_mesh.edge_lengths[e]
            expect += L ** 2 * L * jumps.jump_deriv[e] ** 2
        assert total == pytest.approx(expect, rel=1e-12)
        assert parts.sum() == pytest.approx(total, rel=1e-12)

    def test_full_h1_variant_larger(self, pair_power):
        mesh = pair_power.coarse_mesh
        semi, _ = jump_term(mesh, pair_power.phi, full_h1=False)
        full, _ = jump_term(mesh, pair_power.phi, full_h1=True)
        assert full >= semi


class TestIndicators:
    def test_global_identity(self, fixture_pairs):
        for name, pair in fixture_pairs.items():
            rep = estimator_report(pair)
            total = rep.mu_tilde2 + rep.rho2 + rep.rho_hat2
            assert rep.indicators.sum() == pytest.approx(
                total, rel=1e-10), name

    def test_local_indicators_match_report(self, pair_constant):
        rep = estimator_report(pair_constant)
        ind = local_indicators(pair_constant)
        assert np.allclose(ind, rep.indicators)

    def test_symmetric_data_symmetric_indicators(self, pair_constant):
        # f = 1 on the uniformly refined mesh: the square's symmetry group
        # maps elements to elements; indicator values must match on orbits
        pair = pair_constant
        mesh = pair.coarse_mesh
        ind = local_indicators(pair)
        cent = mesh.centroids

        def transform(p, k):
            x, y = p
            ops = [
                (x, y), (1 - x, y), (x, 1 - y), (1 - x, 1 - y),
                (y, x), (1 - y, x), (y, 1 - x), (1 - y, 1 - x),
            ]
            return ops[k]

        for k in range(8):
            mapped = np.array([transform(c, k) for c in cent])
            order = []
            for p in mapped:
                j = np.argmin(np.linalg.norm(cent - p, axis=1))
                assert np.linalg.norm(cent[j] - p) < 1e-12
                order.append(j)
            assert np.abs(ind[order] - ind).max() < 1e-8 * ind.max()

    def test_conf_gap_orthogonality_expansion(self, fixture_pairs):
        for name, pair in fixture_pairs.items():
            gap = conf_gap(pair)
            w_cr = curl_field(pair.phi)
            w_cf = curl_field(pair.phi0)
            a_phi = energy_inner(pair.form_coarse, w_cr, w_cr)
            a_phi0 = energy_inner(pair.form_coarse, w_cf, w_cf)
            assert gap == pytest.approx(a_phi - a_phi0,
                                        rel=1e-9, abs=1e-12 * a_phi), name

    def test_report_values_finite_nonnegative(self, fixture_pairs):
        for pair in fixture_pairs.values():
            rep = estimator_report(pair)
            for v in (rep.eta2, rep.eta_tilde2, rep.mu2, rep.mu_tilde2,
                      rep.rho2, rep.rho_hat2, rep.conf_gap2):
                assert np.isfinite(v) and v >= 0.0
