import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from trvb.tensor_core import (
    OMEGA, SIGMA, TAU, ChargedTensor, ChargeError, ConvergenceError, Leg, SectorSpectrum,
    apply_leg_symmetry, contract, fuse_legs, leading_eigs, sorted_entries, trace_legs, unfuse_legs, z3_legs,
)

orientations = st.lists(st.sampled_from(["in", "out"]), min_size=1, max_size=4)


def random_charged(orients, q, seed):
    """Random tensor supported exactly on the charge-q entries."""
    rng = np.random.default_rng(seed)
    legs = z3_legs(orients)
    shell = ChargedTensor(np.zeros([3] * len(orients)), legs, q, check=False)
    data = rng.standard_normal(shell.shape) * (shell.charge_map() == q % 3)
    return ChargedTensor(data, legs, q)


class TestLeg:
    def test_bad_orientation(self):
        with pytest.raises(ChargeError):
            Leg(3, "sideways")

    def test_charge_count_mismatch(self):
        with pytest.raises(ChargeError):
            Leg(2, "in", (0, 1, 2))

    def test_charges_reduced_mod3(self):
        assert Leg(3, "in", (0, 1, -1)).charges == (0, 1, 2)

    def test_dual_and_flip(self):
        leg = Leg(3, "in", (0, 1, 2))
        assert leg.dual().charges == (0, 2, 1)
        assert leg.flipped().orientation == "out"
        assert leg.flipped().flipped() == leg


class TestChargedTensor:
    def test_rejects_wrong_charge(self):
        data = np.zeros((3, 3))
        data[1, 0] = 1.0  # in-leg carries +1, total would be 1
        with pytest.raises(ChargeError):
            ChargedTensor(data, z3_legs(["in", "out"]), 0)
        assert ChargedTensor(data, z3_legs(["in", "out"]), 1).charge_violation() == 0.0

    def test_shape_mismatch(self):
        with pytest.raises(ChargeError):
            ChargedTensor(np.zeros((3, 2)), z3_legs(["in", "out"]), 0)

    def test_immutable(self):
        t = ChargedTensor(np.eye(3), z3_legs(["in", "out"]), 0)
        with pytest.raises(ValueError):
            t.data[0, 0] = 2.0

    @given(orientations, st.integers(0, 2), st.integers(0, 10**6))
    def test_charge_conservation_property(self, orients, q, seed):
        t = random_charged(orients, q, seed)
        assert t.charge_violation() == 0.0
        # every nonzero entry has signed charge q
        for idx, _ in t.nonzero_entries():
            s = sum((1 if o == "in" else -1) * (0, 1, 2)[i] for o, i in zip(orients, idx))
            assert s % 3 == q

    @given(orientations, st.integers(0, 2), st.integers(0, 10**6))
    def test_conj_is_consistent(self, orients, q, seed):
        t = random_charged(orients, q, seed).conj()
        assert t.charge_violation() == 0.0
        assert t.total_charge == (-q) % 3

    @given(st.integers(0, 2), st.integers(0, 10**6))
    def test_symmetry_phase(self, q, seed):
        # sigma on in-legs and sigma^dagger on out-legs multiplies by omega^q
        t = random_charged(["in", "out", "in", "out"], q, seed)
        s = apply_leg_symmetry(t, SIGMA)
        np.testing.assert_allclose(s.data, OMEGA**q * t.data, atol=1e-13)


class TestContraction:
    @given(st.integers(0, 2), st.integers(0, 2), st.integers(0, 10**6))
    def test_charges_add(self, qa, qb, seed):
        a = random_charged(["in", "out", "in"], qa, seed)
        b = random_charged(["in", "out"], qb, seed + 1)
        c = contract(a, b, [(1, 0)])
        assert c.total_charge == (qa + qb) % 3
        np.testing.assert_allclose(c.data, np.einsum("ijk,jl->ikl", a.data, b.data))

    def test_same_orientation_refused(self):
        a = random_charged(["in", "in"], 0, 0)
        with pytest.raises(ChargeError):
            contract(a, a, [(0, 1)])

    def test_charge_list_mismatch_refused(self):
        a = ChargedTensor(np.eye(3), z3_legs(["in", "out"]), 0)
        b = ChargedTensor(np.eye(3), [Leg(3, "in", (0, 2, 1)), Leg(3, "out", (0, 2, 1))], 0)
        with pytest.raises(ChargeError):
            contract(a, b, [(1, 0)])

    def test_trace(self):
        t = random_charged(["in", "out", "in", "out"], 0, 3)
        tr = trace_legs(t, [(0, 1)])
        np.testing.assert_allclose(tr.data, np.einsum("iijk->jk", t.data))

    @given(st.integers(0, 10**6))
    def test_fuse_roundtrip(self, seed):
        t = random_charged(["in", "in", "out", "out"], 1, seed)
        f, info = fuse_legs(t, [(1, 0), (3,), (2,)])
        assert f.shape == (9, 3, 3)
        assert f.charge_violation() == 0.0
        assert unfuse_legs(f, info).allclose(t)

    def test_fuse_mixed_orientation_refused(self):
        t = random_charged(["in", "out"], 0, 0)
        with pytest.raises(ChargeError):
            fuse_legs(t, [(0, 1)])


class TestClockAlgebra:
    def test_sigma_tau_relation(self):
        np.testing.assert_allclose(SIGMA @ TAU, OMEGA * TAU @ SIGMA, atol=1e-15)

    def test_orders(self):
        np.testing.assert_allclose(np.linalg.matrix_power(SIGMA, 3), np.eye(3), atol=1e-14)
        np.testing.assert_allclose(np.linalg.matrix_power(TAU, 3), np.eye(3), atol=1e-14)


class TestSpectrumOrdering:
    def test_sorted_entries(self):
        e = [(1, 0, 1.0), (0, 0, -2.0), (0, 1, 1.0), (2, 0, 2.0)]
        out = sorted_entries(e)
        assert [x[0] for x in out] == [0, 2, 0, 1]  # equal moduli: ascending Q
        assert out[0][2] == -2.0

    def test_sector_selection(self):
        s = SectorSpectrum.from_values([1, 3, 2], Q=1).merged(SectorSpectrum.from_values([2.5], Q=0))
        np.testing.assert_allclose(s.sector(1), [3, 2, 1])
        np.testing.assert_allclose(s.values(), [3, 2.5, 2, 1])


class TestLeadingEigs:
    def test_matches_dense(self, rng):
        n = 300
        m = rng.standard_normal((n, n))
        ref = sorted(np.linalg.eigvals(m), key=lambda v: -abs(v))[:4]
        spec = leading_eigs(lambda v: m @ v, n, 4)
        np.testing.assert_allclose(np.abs(spec.values()), np.abs(ref), rtol=1e-9)

    def test_dense_path_with_projector(self):
        d = np.diag([5.0, 4.0, 3.0, 2.0, 1.0])
        mask = np.array([0, 1, 0, 1, 1], dtype=float)
        spec = leading_eigs(lambda v: d @ v, 5, 2, sector_projector=lambda v: mask * v, Q=2)
        np.testing.assert_allclose(spec.sector(2), [4.0, 2.0])

    def test_residual_failure_raises(self, rng):
        n = 300
        m = rng.standard_normal((n, n))
        with pytest.raises(ConvergenceError) as err:
            leading_eigs(lambda v: m @ v, n, 4, tol=1e-30)
        assert err.value.residual > 1e-30

    def test_bad_k(self):
        with pytest.raises(ValueError):
            leading_eigs(lambda v: v, 5, 0)
