import numpy as np
import pytest

from trvb.ctmrg import (
    CSV_HEADER, CtmrgEnvironment, PhasePoint, bond_matrix, channel_correlation_length, channel_spectrum,
    classify_degeneracy, ctmrg_fixed_point, fixed_point_degeneracy, link_density, locate_extremum, scan,
    sector_weights, site_expectation,
)
from trvb.tensor_core import ConvergenceError
from trvb.tensors import build_diluted_double_tensor, build_square_trvb_tensor, build_toric_code_tensor


def svals(m):
    s = np.linalg.svd(m, compute_uv=False)
    return s / s[0]


@pytest.fixture(scope="module")
def square_env():
    a = build_square_trvb_tensor(0.0)
    return a, ctmrg_fixed_point(a, 27, tol=1e-10, max_sweeps=500)


def diluted(z, chi=27, theta=0.0):
    bulk, ir, iu, (bd, labels) = build_diluted_double_tensor(theta, z, with_impurities=True, with_boundary=True)
    env = ctmrg_fixed_point(bulk, chi, tol=1e-10, max_sweeps=1000, boundary=bd)
    return bulk, (ir, iu), labels, env


class TestFixedPoint:
    @pytest.mark.parametrize("chi", [3, 9, 27])
    def test_toric_code_fast_and_degenerate(self, chi):
        tc = build_toric_code_tensor()
        env = ctmrg_fixed_point(tc, chi, tol=1e-10, max_sweeps=50)
        assert env.converged and env.sweeps <= 3
        np.testing.assert_allclose(env.corner_spectrum(), [1.0, 1.0, 1.0], atol=1e-12)
        xi, _ = channel_correlation_length(env, tc)
        assert xi == 0.0
        lam = channel_spectrum(env, tc, k=6)
        assert classify_degeneracy(lam) == 3

    def test_chi1_runs(self):
        env = ctmrg_fixed_point(build_square_trvb_tensor(0.0), 1, max_sweeps=50)
        assert env.C[0].shape == (1, 1)
        assert np.all(np.isfinite(env.C[0]))

    def test_metadata(self, square_env):
        _, env = square_env
        assert env.converged and env.delta <= 1e-10
        assert len(env.history) == env.sweeps
        s = env.corner_spectrum()
        assert np.all(np.diff(s) <= 1e-15) and s.min() >= 0

    def test_warm_start_does_not_mutate(self, square_env):
        a, env = square_env
        before = env.C[0].copy()
        env2 = ctmrg_fixed_point(a, 27, tol=1e-10, max_sweeps=5, env=env)
        np.testing.assert_array_equal(env.C[0], before)
        assert env2.sweeps >= env.sweeps

    def test_nonfinite_raises_with_sweep(self):
        a = build_square_trvb_tensor(0.0).data.real.copy()
        a[0, 0, 0, 0] = np.nan
        with pytest.raises(ConvergenceError, match="sweep"):
            ctmrg_fixed_point(a, 9, max_sweeps=5, boundary=[np.ones(3)] * 4)

    def test_rank_check(self):
        with pytest.raises(ValueError):
            ctmrg_fixed_point(np.ones((3, 3, 3)), 4)

    def test_truncation_error_decreases_with_chi(self):
        a = build_square_trvb_tensor(0.0)
        errs = [ctmrg_fixed_point(a, chi, tol=1e-9, max_sweeps=300).truncation_error for chi in (4, 9, 27)]
        assert errs[0] > errs[1] > errs[2]


class TestReflection:
    def test_corner_spectra(self, square_env):
        _, env = square_env
        # the diagonal mirror maps C1 <-> C3 and leaves C2, C4 in place
        np.testing.assert_allclose(svals(env.C[0]), svals(env.C[2]), atol=1e-10)
        np.testing.assert_allclose(svals(env.C[1]), svals(env.C[3]), atol=1e-10)

    def test_channel_directions_agree(self, square_env):
        a, env = square_env
        h = np.abs(channel_spectrum(env, a, k=6, direction="horizontal"))
        v = np.abs(channel_spectrum(env, a, k=6, direction="vertical"))
        np.testing.assert_allclose(h / h[0], v / v[0], atol=1e-8)


class TestObservables:
    def test_square_xi(self, square_env):
        a, env = square_env
        xi, _ = channel_correlation_length(env, a)
        assert 0.9 <= xi <= 1.3

    def test_density_at_full_packing(self):
        bulk, imps, _, env = diluted(0.0)
        assert link_density(env, bulk, imps) == pytest.approx(1 / 3, abs=1e-6)

    def test_density_vacuum_limit(self):
        bulk, imps, _, env = diluted(1e3, chi=9)
        assert link_density(env, bulk, imps) <= 1e-3

    def test_site_expectation_of_bulk_is_one(self, square_env):
        a, env = square_env
        assert site_expectation(env, a, a) == pytest.approx(1.0)

    def test_bond_matrix_trace_is_norm(self, square_env):
        from trvb.ctmrg import _norm_network

        a, env = square_env
        R = bond_matrix(env, a)
        assert np.trace(R) == pytest.approx(_norm_network(a.data.real, env))

    @pytest.mark.parametrize("z,expected", [(0.2, 3), (0.5, 3), (1.5, 9)])
    def test_degeneracy(self, z, expected):
        bulk, _, labels, env = diluted(z)
        assert env.converged
        assert fixed_point_degeneracy(env, bulk, labels) == expected
        xi, deg = channel_correlation_length(env, bulk, labels=labels)
        assert deg == expected and np.isfinite(xi)

    def test_sector_weights_topological_side_is_diagonal(self):
        bulk, _, labels, env = diluted(0.5)
        w = sector_weights(env, bulk, labels)
        assert sum(w.values()) == pytest.approx(1.0)
        off = sum(v for d, v in w.items() if d[0] != d[1])
        assert off < 1e-8

    def test_gauge_invariance(self, rng):
        bulk, (ir, iu), labels, env = diluted(0.5, chi=9)
        D = bulk.shape[0]
        gh = rng.choice([-1.0, 1.0], D)
        gv = rng.choice([-1.0, 1.0], D)

        def gauge(t):
            return np.einsum("lurd,l,u,r,d->lurd", t.data.real, gh, gv, gh, gv)

        _, _, _, (bd, _) = build_diluted_double_tensor(0.0, 0.5, with_impurities=True, with_boundary=True)
        gbd = [bd[0] * gh, bd[1] * gv, bd[2] * gh, bd[3] * gv]
        genv = ctmrg_fixed_point(gauge(bulk), 9, tol=1e-10, max_sweeps=1000, boundary=gbd)
        n0 = link_density(env, bulk, (ir, iu))
        n1 = link_density(genv, gauge(bulk), (gauge(ir), gauge(iu)))
        assert n1 == pytest.approx(n0, abs=1e-8)
        x0, _ = channel_correlation_length(env, bulk)
        x1, _ = channel_correlation_length(genv, gauge(bulk))
        assert x1 == pytest.approx(x0, abs=1e-8)

    def test_classify(self):
        assert classify_degeneracy([3.0, 2.99, 2.995, 1.0]) == 3
        assert classify_degeneracy([3.0, 1.0]) == 1


class TestScan:
    def test_records_failures_and_continues(self):
        pts = scan([(0.0, 0.5), (9.0, 0.5)], [9], max_sweeps=200)
        assert len(pts) == 2
        assert pts[0].degeneracy == 3 and pts[0].error == ""
        assert "ValueError" in pts[1].error and not pts[1].converged

    def test_chi_schedule_must_ascend(self):
        with pytest.raises(ValueError):
            scan([(0.0, 0.5)], [27, 9])

    def test_interpolation_model(self):
        pts = scan([(0.0, 0.0), (0.0, 0.5), (0.0, 1.0)], [9], model="interpolation", max_sweeps=300)
        xis = [p.xi for p in pts]
        assert xis[0] == 0.0
        assert all(np.isfinite(x) and x < 10 for x in xis)
        assert xis[0] <= xis[1] <= xis[2] + 1e-6

    def test_row_matches_header(self):
        p = PhasePoint(0.0, 0.5, 9, 0.3, 1.1, 3, True, 1e-9)
        assert len(p.row()) == len(CSV_HEADER)

    def test_locate_extremum(self):
        zs = np.linspace(0.5, 1.3, 17)
        ns = 0.3 / (1 + np.exp((zs - 0.88) / 0.05))
        zc, dn = locate_extremum(zs, ns)
        assert zc == pytest.approx(0.88, abs=0.01)
        assert len(dn) == len(zs)
