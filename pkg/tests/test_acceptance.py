"""Acceptance criteria 1-12.

Every test records its sub-checks and prints exactly one ``CRITERION k:
PASS/FAIL`` line; the collected lines are repeated in the terminal summary.
Set ``TRVB_FAST=1`` to skip the hour-scale exact-diagonalisation runs (the
48-link part of criterion 9 and criterion 10); they are reported as SKIP.
"""

import math

import numpy as np

from conftest import FAST
from trvb.ctmrg import channel_correlation_length, ctmrg_fixed_point, locate_extremum, scan
from trvb.cylinder import (
    TransferOperator, charged_gaps, correlation_length, fit_exponential_decay, fit_linear, half_cylinder_entropy,
    torus_contract, transfer_spectrum,
)
from trvb.ed import (
    Cluster, RampProtocol, build_basis, build_hamiltonian, evolve, find_peaks, ground_state, sweep, tee,
    toric_code_small_torus,
)
from trvb.lattice import (
    arrow_config, check_tripartite, covering_weight, enumerate_coverings, honeycomb_lattice, square_lattice,
    triangular_lattice, vertex_outflow,
)
from trvb.tensor_core import OMEGA, SIGMA, ChargeError, ChargedTensor, Leg, apply_leg_symmetry
from trvb.tensors import (
    build_diluted_double_tensor, build_honeycomb_tensor, build_interpolation_tensor, build_restricted_trvb_tensor,
    build_square_trvb_tensor, build_toric_code_tensor, triangular_effective_tensor,
)

LN3 = math.log(3.0)


def rel(a, b):
    return abs(a - b) / max(abs(b), 1e-300)


def grid(lo, hi, step):
    n = int(round((hi - lo) / step))
    return [round(lo + i * step, 10) for i in range(n + 1)]


# ---------------------------------------------------------------------------
# 1. tensor-network contraction vs brute-force configuration sums
# ---------------------------------------------------------------------------

def test_criterion_01_oracle_equivalence(acceptance):
    acceptance.start(1, "torus contraction = configuration sum (rel <= 1e-10)")

    for label, theta in (("0", 0.0), ("pi/4", np.pi / 4), ("pi/3", np.pi / 3)):
        w = {"bent": np.cos(theta) ** 2, "straight": np.sin(theta) ** 2}
        errs = []
        for size in ((3, 3), (3, 4)):
            lat = square_lattice(*size)
            ref = sum(covering_weight(lat, c, w) for c in enumerate_coverings(lat))
            errs.append(rel(torus_contract(build_square_trvb_tensor(theta), *size), ref))
        acceptance.check(f"square theta={label}", max(errs) <= 1e-10, f"max rel {max(errs):.1e} on 3x3, 3x4")

    cases = [
        ("honeycomb", build_honeycomb_tensor(), lambda s: len(enumerate_coverings(honeycomb_lattice(*s))),
         ((2, 3), (3, 3))),
        ("triangular", triangular_effective_tensor(), lambda s: len(enumerate_coverings(triangular_lattice(*s))),
         ((3, 3), (3, 4))),
        ("restricted", build_restricted_trvb_tensor(),
         lambda s: len(enumerate_coverings(square_lattice(*s, ("bent",)), restriction="no-wedge")),
         ((3, 6), (3, 9))),
    ]
    for name, t, count, sizes in cases:
        errs = [rel(torus_contract(t, *s), count(s)) for s in sizes]
        acceptance.check(name, max(errs) <= 1e-10, f"max rel {max(errs):.1e} on {sizes}")
    acceptance.finish()


# ---------------------------------------------------------------------------
# 2. toric-code fixed point
# ---------------------------------------------------------------------------

def test_criterion_02_toric_code_fixed_point(acceptance):
    acceptance.start(2, "toric code: xi = 0 and gamma = ln 3 on L=6")
    t = build_toric_code_tensor()
    op6 = TransferOperator(t, 6)
    lam = transfer_spectrum(op6, k_per_sector=2, sectors=(0,)).sector(0)
    ratio = abs(lam[1]) / abs(lam[0])
    acceptance.check("|lambda1/lambda0| <= 1e-12", ratio <= 1e-12, f"{ratio:.1e}")
    acceptance.check("xi = 0", correlation_length(op6) == 0.0)
    S6 = half_cylinder_entropy(op6)
    S3 = half_cylinder_entropy(TransferOperator(t, 3))
    # counting: the neutral ring carries 3^(L-1) equally weighted configurations
    acceptance.check("S_L = (L-1) ln 3", abs(S6 - 5 * LN3) <= 1e-10 and abs(S3 - 2 * LN3) <= 1e-10,
                     f"S6={S6:.12f}, S3={S3:.12f}")
    gamma = S6 - 2 * S3
    acceptance.check("gamma = S6 - 2 S3 = ln 3", abs(gamma - LN3) <= 1e-10, f"gamma={gamma:.12f}")
    acceptance.finish()


# ---------------------------------------------------------------------------
# 3. square tRVB at theta = 0
# ---------------------------------------------------------------------------

def test_criterion_03_square_gapped_liquid(acceptance):
    acceptance.start(3, "square tRVB theta=0: xi in [0.9, 1.3], gamma within 10% of ln 3")
    bulk = build_square_trvb_tensor(0.0, "double")

    xi9 = correlation_length(TransferOperator(bulk, 9))
    acceptance.check("cylinder xi(L=9)", 0.9 <= xi9 <= 1.3, f"xi={xi9:.4f}")

    env = ctmrg_fixed_point(bulk, 243, tol=1e-10)
    xi_c, _ = channel_correlation_length(env, bulk)
    acceptance.check("CTMRG xi(chi=243)", env.converged and 0.9 <= xi_c <= 1.3,
                     f"xi={xi_c:.4f}, converged={env.converged}")

    op12 = TransferOperator(bulk, 12)
    S12 = half_cylinder_entropy(op12)
    S6 = half_cylinder_entropy(TransferOperator(bulk, 6))
    gamma = S12 - 2 * S6
    acceptance.check("gamma = S12 - 2 S6", rel(gamma, LN3) <= 0.10,
                     f"gamma={gamma:.4f} ({100 * (gamma / LN3 - 1):+.1f}%); for context xi(L=12)="
                     f"{correlation_length(op12):.4f}")
    acceptance.finish()


# ---------------------------------------------------------------------------
# 4. approach to the gapless point theta -> pi/2
# ---------------------------------------------------------------------------

def test_criterion_04_gapless_trend(acceptance):
    acceptance.start(4, "xi(theta) at L=9 monotone for theta >= pi/3, xi(0.49pi) > 3 xi(0)")
    fracs = [1 / 3, 0.38, 0.42, 0.45, 0.47, 0.49]
    xi0 = correlation_length(TransferOperator(build_square_trvb_tensor(0.0, "double"), 9))
    xis = [correlation_length(TransferOperator(build_square_trvb_tensor(f * np.pi, "double"), 9)) for f in fracs]
    table = ", ".join(f"{f:.3g}pi:{x:.4f}" for f, x in zip(fracs, xis))
    acceptance.check("monotone increase", all(b > a for a, b in zip(xis, xis[1:])), table)
    acceptance.check("xi(0.49pi) > 3 xi(0)", xis[-1] > 3 * xi0, f"{xis[-1]:.4f} vs 3*{xi0:.4f}={3 * xi0:.4f}")
    acceptance.finish()


# ---------------------------------------------------------------------------
# 5. dilution transition
# ---------------------------------------------------------------------------

def test_criterion_05_dilution_transition(acceptance):
    acceptance.start(5, "CTMRG theta=0 chi=27: z_c in [0.82, 0.94], degeneracy 3 / 9, n(0) = 1/3")
    zs = grid(0.6, 1.15, 0.05)
    pts = scan([(0.0, z) for z in zs], [27])
    acceptance.check("all points converged", all(p.converged for p in pts))
    zc, _ = locate_extremum(zs, [p.n_link for p in pts])
    acceptance.check("z_c", 0.82 <= zc <= 0.94, f"z_c={zc:.4f}")

    lo, hi = scan([(0.0, 0.5 * zc), (0.0, 1.5 * zc)], [27], warm_start=False)
    acceptance.check("degeneracy 3 at 0.5 z_c", lo.degeneracy == 3, f"{lo.degeneracy} at z={0.5 * zc:.4f}")
    acceptance.check("degeneracy 9 at 1.5 z_c", hi.degeneracy == 9, f"{hi.degeneracy} at z={1.5 * zc:.4f}")

    (p0,) = scan([(0.0, 0.0)], [27])
    acceptance.check("n(z=0) = 1/3", abs(p0.n_link - 1 / 3) <= 1e-6, f"n={p0.n_link:.10f}")
    acceptance.finish()


# ---------------------------------------------------------------------------
# 6. toric code -> tRVB interpolation
# ---------------------------------------------------------------------------

def test_criterion_06_interpolation_smooth(acceptance):
    acceptance.start(6, "interpolation: xi(alpha) < 10 and nondecreasing on 11 points")
    alphas = grid(0.0, 1.0, 0.1)
    for label, theta in (("0", 0.0), ("pi/4", np.pi / 4)):
        pts = scan([(theta, a) for a in alphas], [27], model="interpolation")
        xis = [p.xi for p in pts]
        table = ", ".join(f"{x:.4g}" for x in xis)
        acceptance.check(f"theta={label} converged", all(p.converged for p in pts))
        acceptance.check(f"theta={label} finite", all(np.isfinite(x) and x < 10 for x in xis), table)
        # noise floor: truncation of the chi=27 environment (1e-6 absolute)
        drops = [a - b for a, b in zip(xis, xis[1:])]
        acceptance.check(f"theta={label} nondecreasing", max(drops) <= 1e-6, f"smallest step {-max(drops):.2e}")
    acceptance.finish()


# ---------------------------------------------------------------------------
# 7. restricted model
# ---------------------------------------------------------------------------

def test_criterion_07_restricted(acceptance):
    acceptance.start(7, "restricted: charged gap decays exponentially, neutral gap 0.6 +- 0.1")
    t = build_restricted_trvb_tensor()
    Ns, gaps = [], []
    for N in (3, 6):
        op = TransferOperator(t, N)
        if not op.resolved:
            continue
        _, charged = charged_gaps(transfer_spectrum(op, k_per_sector=2))
        Ns.append(N)
        gaps.append(charged)
    detail = ", ".join(f"N={n}:{g:.4f}" for n, g in zip(Ns, gaps))
    acceptance.check("charged gap decreasing", len(gaps) >= 2 and all(b < a for a, b in zip(gaps, gaps[1:])),
                     detail)
    _, _, r2 = fit_exponential_decay(Ns, gaps)
    acceptance.check("exponential fit R^2 > 0.95", r2 > 0.95, f"R^2={r2:.4f} on {len(Ns)} sizes")

    # infinite-size neutral gap from the CTMRG channel spectrum
    env = ctmrg_fixed_point(t, 64, tol=1e-10)
    xi, _ = channel_correlation_length(env, t)
    gap = 1.0 / xi
    acceptance.check("neutral gap 0.6 +- 0.1", abs(gap - 0.6) <= 0.1,
                     f"gap={gap:.4f}, xi={xi:.4f} (chi=64, converged={env.converged})")
    acceptance.finish()


# ---------------------------------------------------------------------------
# 8. triangular and honeycomb lattices
# ---------------------------------------------------------------------------

def test_criterion_08_other_lattices(acceptance):
    acceptance.start(8, "triangular xi(N) linear (R^2 > 0.99); honeycomb finite xi, gamma within 15%")
    tri = triangular_effective_tensor()
    Ns, xis = [], []
    for N in (3, 6, 9, 12):
        op = TransferOperator(tri, N)
        if op.resolved:
            Ns.append(N)
            xis.append(correlation_length(op, distinct=True))
    _, slope, r2 = fit_linear(Ns, xis)
    table = ", ".join(f"N={n}:{x:.4f}" for n, x in zip(Ns, xis))
    acceptance.check("triangular linear xi(N)", r2 > 0.99 and slope > 0, f"{table}; slope={slope:.3f}, R^2={r2:.4f}")

    hc = build_honeycomb_tensor()
    S, hx = {}, {}
    for N in (3, 6, 9, 12):
        op = TransferOperator(hc, N)
        hx[N] = correlation_length(op)
        S[N] = half_cylinder_entropy(op)
    acceptance.check("honeycomb xi finite", all(np.isfinite(x) for x in hx.values()),
                     ", ".join(f"N={n}:{x:.4f}" for n, x in hx.items()))
    gamma = S[12] - 2 * S[6]
    acceptance.check("honeycomb gamma = S12 - 2 S6", rel(gamma, LN3) <= 0.15,
                     f"gamma={gamma:.4f} ({100 * (gamma / LN3 - 1):+.1f}%)")
    acceptance.finish()


# ---------------------------------------------------------------------------
# 9. ground-state sweeps on the 36- and 48-link clusters
# ---------------------------------------------------------------------------

ED_RATIOS = grid(0.4, 2.6, 0.1)


def _overlap_checks(acceptance, tag, rows):
    best = max(rows, key=lambda r: r.overlap_diluted)
    acceptance.check(f"{tag} overlap max at 1.0 +- 0.3", abs(best.delta_over_omega - 1.0) <= 0.3,
                     f"max {best.overlap_diluted:.3f} at {best.delta_over_omega:.2f}")
    acceptance.check(f"{tag} |z| at max <= 0.5", abs(best.opt_z) <= 0.5, f"|z|={abs(best.opt_z):.3f}")
    acceptance.check(f"{tag} gamma at max within 20%", rel(best.gamma, LN3) <= 0.20, f"gamma={best.gamma:.4f}")


def test_criterion_09_ed_intermediate_phase(acceptance):
    acceptance.start(9, "ED sweeps: overlap max, F peaks, |z|, gamma near Delta/Omega = 1")
    if FAST:
        acceptance.skip("TRVB_FAST set: the 48-link sweep takes about an hour")
    rows36 = sweep(build_basis(Cluster.parse("3x6"), "unrestricted"), ED_RATIOS)
    _overlap_checks(acceptance, "36-link", rows36)

    rows48 = sweep(build_basis(Cluster.parse("4x6"), "unrestricted"), ED_RATIOS)
    _overlap_checks(acceptance, "48-link", rows48)
    F = [r.F for r in rows48]
    peaks = [ED_RATIOS[i] for i in find_peaks(ED_RATIOS, F)]
    bracket = any(a <= 1.15 and b >= 0.95 for a, b in zip(peaks, peaks[1:]))
    acceptance.check("48-link F peaks bracket [0.95, 1.15]", bracket, f"peaks at {peaks}")
    acceptance.finish()


# ---------------------------------------------------------------------------
# 10. quench on the 48-link no-wedge cluster
# ---------------------------------------------------------------------------

QUENCH_T = (5, 10, 20, 40)
QUENCH_RATIOS = grid(1.5, 3.0, 0.25)


def test_criterion_10_quench_stabilization(acceptance):
    acceptance.start(10, "quench: gamma enhanced at an intermediate T, tracks the GS at the largest T")
    if FAST:
        acceptance.skip("TRVB_FAST set: the quench ladder takes hours")
    basis = build_basis(Cluster.parse("4x6"), "no-wedge")
    gs, psi = {}, None
    for r in QUENCH_RATIOS:
        psi = ground_state(build_hamiltonian(basis, 1.0, r), v0=psi)[1]
        gs[r] = tee(psi, basis)
    runs = {}
    for T in QUENCH_T:
        snaps, _ = evolve(basis, RampProtocol(T), dt=0.05, snapshot_ratios=QUENCH_RATIOS)
        runs[T] = {round(s.delta / s.omega, 6): s.gamma for s in snaps}
    excess = {T: runs[T][2.0] - gs[2.0] for T in QUENCH_T[1:-1]}
    acceptance.check("intermediate T with gamma excess >= 0.2 at 2.0", max(excess.values()) >= 0.2,
                     ", ".join(f"T={T}:{e:+.3f}" for T, e in excess.items()) + f" (GS {gs[2.0]:.3f})")
    dev = max(abs(runs[QUENCH_T[-1]][r] - gs[r]) for r in QUENCH_RATIOS)
    acceptance.check(f"T={QUENCH_T[-1]} within 0.1 of GS on [1.5, 3]", dev <= 0.1, f"max deviation {dev:.3f}")
    acceptance.finish()


# ---------------------------------------------------------------------------
# 11. tripartite classification
# ---------------------------------------------------------------------------

def test_criterion_11_tripartite(acceptance):
    acceptance.start(11, "tripartite classification")
    table = [
        ("square", ["straight"], True),
        ("square", ["bent"], False),
        ("honeycomb", ["bent"], False),
        ("triangular", ["triangle"], True),
        ("kagome", ["I", "II"], True),
        ("kagome", ["I", "II", "III"], False),
    ]
    for lattice, types, expect in table:
        got = check_tripartite(lattice, types) is not None
        acceptance.check(f"{lattice} {'+'.join(types)}", got == expect, "yes" if got else "no")
    acceptance.finish()


# ---------------------------------------------------------------------------
# 12. invariants
# ---------------------------------------------------------------------------

def test_criterion_12_invariants(acceptance, rng):
    acceptance.start(12, "charge conservation, Gauss law, Z3 leg symmetry, clock algebra, Hermiticity, norm")

    tensors = {
        "square": build_square_trvb_tensor(0.3),
        "square double": build_square_trvb_tensor(0.3, "double"),
        "toric code": build_toric_code_tensor(),
        "restricted": build_restricted_trvb_tensor(),
        "honeycomb": build_honeycomb_tensor(),
        "triangular": triangular_effective_tensor(),
        "interpolation": build_interpolation_tensor(0.3, 0.5),
        "diluted": build_diluted_double_tensor(0.0, 0.7),
    }
    worst = max(t.charge_violation() for t in tensors.values())
    acceptance.check("stored tensors charge-conserving", worst == 0.0, f"max violation {worst:.1e}")
    legs = [Leg(3, "in"), Leg(3, "out")]
    try:
        ChargedTensor(np.ones((3, 3)), legs)
        rejected = False
    except ChargeError:
        rejected = True
    acceptance.check("charge-violating entries rejected", rejected)

    bad = 0
    for size in ((3, 3), (3, 4), (6, 3)):
        lat = square_lattice(*size)
        for cov in enumerate_coverings(lat):
            arrows = arrow_config(lat, cov)
            bad += sum(vertex_outflow(lat, arrows, v) % 3 != 2 for v in range(lat.n_vertices))
    acceptance.check("Gauss law: outflow = 2 mod 3", bad == 0, f"{bad} violations on 3x3, 3x4, 6x3")

    sym = max(float(np.max(np.abs(apply_leg_symmetry(build_square_trvb_tensor(th), SIGMA).data
                                  - OMEGA * build_square_trvb_tensor(th).data)))
              for th in rng.uniform(0, np.pi / 2, 8))
    acceptance.check("leg symmetry T -> omega T", sym <= 1e-14, f"max deviation {sym:.1e}")

    _, rep = toric_code_small_torus(2, 2)
    acceptance.check("clock algebra", rep.clock_algebra)
    acceptance.check("2x2 toric code stabilizers", rep.ok, f"energy {rep.energy:.6f}")

    basis = build_basis(Cluster.parse("3x4"), "unrestricted")
    H = build_hamiltonian(basis, 0.7, 1.3)
    x = rng.standard_normal(basis.dim) + 1j * rng.standard_normal(basis.dim)
    y = rng.standard_normal(basis.dim) + 1j * rng.standard_normal(basis.dim)
    herm = abs(np.vdot(x, H @ y) - np.vdot(H @ x, y)) / (np.linalg.norm(x) * np.linalg.norm(y))
    acceptance.check("Hamiltonian Hermitian", herm <= 1e-12, f"{herm:.1e}")

    small = build_basis(Cluster.parse("3x3"), "unrestricted")
    snaps, _ = evolve(small, RampProtocol(3.0), snapshot_ratios=(0.0, 1.0, 2.0))
    drift = max(abs(s.norm - 1.0) for s in snaps)
    acceptance.check("evolution norm drift <= 1e-8", drift <= 1e-8, f"{drift:.1e}")
    acceptance.finish()
