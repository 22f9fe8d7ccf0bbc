"""Corner-transfer-matrix renormalisation for uniform rank-4 bulk tensors.

The environment of one site consists of four corners and four edges listed
clockwise from the left edge::

    C1 -- T1 -- C2
    |     |     |
    T4 -- a  -- T2
    |     |     |
    C4 -- T3 -- C3

Every environment tensor orders its indices clockwise around the centre:
``C1[t4, t1]``, ``C2[t1, t2]``, ``C3[t2, t3]``, ``C4[t3, t4]`` and
``T1[c1, u, c2]``, ``T2[c2, r, c3]``, ``T3[c3, d, c4]``, ``T4[c4, l, c1]``.
With this convention a 90° clockwise rotation of the whole network is a pure
relabelling (``T4 <- T3``, ``C1 <- C4``, ...) plus ``a.transpose(3, 0, 1, 2)``,
so a single left-absorption move rotated four times gives a full sweep.
Projectors are the half-system oblique projectors of the directional
algorithm; truncation never splits a multiplet of singular values.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse.linalg as spla

from .tensor_core import ChargedTensor, ConvergenceError
from .cylinder import xi_from_ratio

MULTIPLET_RTOL = 1e-6
DEGENERACY_RTOL = 0.01


@dataclass
class CtmrgEnvironment:
    """Fixed-point corners and edges plus convergence metadata.

    Attributes
    ----------
    C : list of ndarray
        Corners ``[C1, C2, C3, C4]``.
    T : list of ndarray
        Edges ``[T1, T2, T3, T4]``.
    chi : int
        Requested environment bond dimension.
    history : list of ndarray
        Normalised singular values of ``C1`` after each sweep.
    converged : bool
    delta : float
        Final distance between successive corner spectra.
    truncation_error : float
        Largest discarded singular weight (relative) in the last sweep.
    sweeps : int
    """

    C: list
    T: list
    chi: int
    history: list = field(default_factory=list)
    converged: bool = False
    delta: float = np.inf
    truncation_error: float = 0.0
    sweeps: int = 0

    @property
    def corner(self):
        return self.C[0]

    @property
    def edge(self):
        return self.T[0]

    def copy(self):
        return CtmrgEnvironment(
            [c.copy() for c in self.C], [t.copy() for t in self.T], self.chi,
            list(self.history), self.converged, self.delta, self.truncation_error, self.sweeps,
        )

    def corner_spectrum(self):
        s = np.linalg.svd(self.C[0], compute_uv=False)
        return s / s[0]


def _raw(bulk):
    data = bulk.data if isinstance(bulk, ChargedTensor) else np.asarray(bulk)
    if data.ndim != 4:
        raise ValueError("CTMRG needs a rank-4 bulk tensor")
    if np.isrealobj(data) or np.abs(data.imag).max() == 0:
        data = np.ascontiguousarray(data.real)
    return data


def rotate_bulk(a):
    """Rotate the bulk 90° clockwise: new (l, u, r, d) = old (d, l, u, r)."""
    return a.transpose(3, 0, 1, 2)


def _rotate_env(C, T):
    return [C[3], C[0], C[1], C[2]], [T[3], T[0], T[1], T[2]]


def boundary_vector(bulk, leg):
    """Charge-neutral boundary vector: ones on the charge-0 symbols of ``leg``."""
    if isinstance(bulk, ChargedTensor):
        q = np.asarray(bulk.legs[leg].charges) % 3
        return (q == 0).astype(float)
    v = np.zeros(np.asarray(bulk).shape[leg])
    v[0] = 1.0
    return v


def initial_environment(a, chi, vectors=None):
    """Environment from open boundaries closed by charge-neutral vectors.

    ``vectors`` gives the boundary vector for the (left, up, right, down)
    legs; the default selects the first symbol, which is the empty,
    charge-0 symbol for every constructor in :mod:`trvb.tensors`.
    """
    if vectors is None:
        vectors = []
        for n in a.shape:
            e = np.zeros(n)
            e[0] = 1.0
            vectors.append(e)
    vl, vu, vr, vd = vectors
    C1 = np.einsum("lurd,l,u->dr", a, vl, vu)
    C2 = np.einsum("lurd,u,r->ld", a, vu, vr)
    C3 = np.einsum("lurd,r,d->ul", a, vr, vd)
    C4 = np.einsum("lurd,d,l->ru", a, vd, vl)
    T1 = np.einsum("lurd,u->ldr", a, vu)
    T2 = np.einsum("lurd,r->uld", a, vr)
    T3 = np.einsum("lurd,d->rul", a, vd)
    T4 = np.einsum("lurd,l->dru", a, vl)
    C = [c / np.abs(c).max() for c in (C1, C2, C3, C4)]
    T = [t / np.abs(t).max() for t in (T1, T2, T3, T4)]
    return CtmrgEnvironment(C, T, chi)


def _cut(s, chi, rel=1e-14):
    """Number of kept singular values: at most ``chi``, not splitting multiplets, dropping zeros."""
    n = int(np.sum(s > rel * s[0]))
    k = min(chi, n)
    while 0 < k < n and abs(s[k - 1] - s[k]) <= MULTIPLET_RTOL * s[k - 1]:
        k -= 1
    if k == 0:
        k = min(chi, n)
    return max(k, 1)


def _left_move(a, C, T, chi):
    C1, C2, C3, C4 = C
    T1, T2, T3, T4 = T
    # upper-left quadrant: rows (c2', r), columns (c4', d)
    A = np.tensordot(np.tensordot(T4, C1, ([2], [0])), T1, ([2], [0]))  # x l u z
    A = np.tensordot(A, a, ([1, 2], [0, 1])).transpose(1, 2, 0, 3)  # z r x d
    A = A.reshape(A.shape[0] * A.shape[1], -1)
    # lower-left quadrant: rows (c1', u), columns (c3', r)
    B = np.tensordot(np.tensordot(T3, C4, ([2], [0])), T4, ([2], [0]))  # w d l y
    B = np.tensordot(B, a, ([1, 2], [3, 0])).transpose(1, 2, 0, 3)  # y u w r
    B = B.reshape(B.shape[0] * B.shape[1], -1)
    M = A @ B
    nrm = np.abs(M).max()
    if not np.isfinite(nrm) or nrm == 0:
        raise FloatingPointError("non-finite or vanishing half-system matrix")
    A, B, M = A / np.sqrt(nrm), B / np.sqrt(nrm), M / nrm
    U, s, Vh = np.linalg.svd(M)
    k = _cut(s, chi)
    trunc = float(np.sum(s[k:] ** 2) / np.sum(s**2)) if len(s) > k else 0.0
    isq = 1.0 / np.sqrt(s[:k])
    P = (B @ Vh[:k].conj().T) * isq  # (c4', d) -> new
    Pt = (isq[:, None] * U[:, :k].conj().T) @ A  # new -> (c1', u)
    chiT, D = T4.shape[0], a.shape[3]
    P = P.reshape(chiT, D, k)
    Pt = Pt.reshape(k, T4.shape[2], a.shape[1])
    C1n = np.tensordot(P, np.tensordot(C1, T1, ([1], [0])), ([0, 1], [0, 1]))
    T4n = np.tensordot(np.tensordot(Pt, T4, ([1], [2])), a, ([1, 3], [1, 0]))  # n x r d
    T4n = np.tensordot(T4n, P, ([1, 3], [0, 1])).transpose(2, 1, 0)
    C4n = np.tensordot(np.tensordot(T3, C4, ([2], [0])), Pt, ([2, 1], [1, 2]))
    C = [C1n / np.abs(C1n).max(), C2, C3, C4n / np.abs(C4n).max()]
    T = [T1, T2, T3, T4n / np.abs(T4n).max()]
    return C, T, trunc


def ctmrg_sweep(a, env: CtmrgEnvironment):
    """One sweep: left moves on the four rotated copies of the network."""
    C, T = env.C, env.T
    trunc = 0.0
    for _ in range(4):
        C, T, tr = _left_move(a, C, T, env.chi)
        trunc = max(trunc, tr)
        C, T = _rotate_env(C, T)
        a = rotate_bulk(a)
    env.C, env.T = C, T
    return trunc


def _spectrum_distance(s, t):
    n = max(len(s), len(t))
    return float(np.linalg.norm(np.pad(s, (0, n - len(s))) - np.pad(t, (0, n - len(t)))))


def ctmrg_fixed_point(bulk, chi, tol=1e-10, max_sweeps=10_000, env: CtmrgEnvironment | None = None, min_sweeps=2,
                      boundary=None):
    """Iterate CTMRG sweeps to a fixed point.

    Parameters
    ----------
    bulk : ChargedTensor or ndarray
        Rank-4 bulk tensor ``(left, up, right, down)``.
    chi : int
        Environment bond dimension.
    tol : float
        Stop when successive normalised ``C1`` spectra differ by less than
        ``tol`` (l2 distance).
    max_sweeps : int
        Sweep cap; reaching it leaves ``converged = False``.
    env : CtmrgEnvironment, optional
        Warm start.  It is copied, never mutated.
    boundary : tuple of ndarray, optional
        Vectors closing the (left, up, right, down) legs of the initial
        environment.  The default uses the charge-0 symbols and falls back
        to uniform vectors when that boundary is incompatible with the bulk.

    Returns
    -------
    CtmrgEnvironment

    Raises
    ------
    ConvergenceError
        On non-finite tensors, carrying the sweep index in the message.
    """
    a = _raw(bulk)
    if not np.all(np.isfinite(a)):
        raise ConvergenceError("CTMRG failed at sweep 0: non-finite bulk tensor")
    if env is None:
        if boundary is not None:
            vecs = list(boundary)
        else:
            vecs = [boundary_vector(bulk, i) for i in range(4)] if isinstance(bulk, ChargedTensor) else None
        env = initial_environment(a, chi, vecs)
        try:
            with np.errstate(all="raise"):
                ctmrg_sweep(a, env.copy())
        except (FloatingPointError, np.linalg.LinAlgError):
            # the neutral boundary is incompatible with the bulk Gauss law
            env = initial_environment(a, chi, [np.ones(n) for n in a.shape])
    else:
        env = env.copy()
        env.chi = chi
        env.converged = False
    prev = env.corner_spectrum()
    for sweep in range(1, max_sweeps + 1):
        try:
            with np.errstate(all="raise"):
                env.truncation_error = ctmrg_sweep(a, env)
        except (FloatingPointError, np.linalg.LinAlgError) as err:
            raise ConvergenceError(f"CTMRG failed at sweep {sweep}: {err}") from err
        cur = env.corner_spectrum()
        env.history.append(cur)
        env.delta = _spectrum_distance(prev, cur)
        env.sweeps += 1
        prev = cur
        if sweep >= min_sweeps and env.delta <= tol:
            env.converged = True
            break
    return env


# ---------------------------------------------------------------------------
# observables


def _norm_network(a, env, site=None):
    """Contract one site (``site``, default the bulk) with its full environment."""
    C1, C2, C3, C4 = env.C
    T1, T2, T3, T4 = env.T
    s = a if site is None else site
    upper = np.tensordot(np.tensordot(C1, T1, ([1], [0])), C2, ([2], [0]))  # x u w
    lower = np.tensordot(np.tensordot(C3, T3, ([1], [0])), C4, ([2], [0]))  # v d s
    x = np.tensordot(upper, T2, ([2], [0]))  # x u r v
    x = np.tensordot(x, lower, ([3], [0]))  # x u r d s
    x = np.tensordot(x, T4, ([4, 0], [0, 2]))  # u r d l
    return np.tensordot(x, s, ([3, 0, 1, 2], [0, 1, 2, 3]))


def site_expectation(env: CtmrgEnvironment, bulk, impurity):
    """``<impurity> / <bulk>`` for one site embedded in the environment."""
    a = _raw(bulk)
    b = _raw(impurity)
    return float(np.real(_norm_network(a, env, b) / _norm_network(a, env)))


def link_density(env: CtmrgEnvironment, bulk, impurity):
    """Average link occupation from one-site impurity contractions.

    Parameters
    ----------
    env : CtmrgEnvironment
    bulk : ChargedTensor
    impurity : tuple of ChargedTensor
        ``(right_link_impurity, up_link_impurity)`` in the same bond basis
        as ``bulk``; a single tensor is accepted as well.

    Returns
    -------
    float
    """
    imps = impurity if isinstance(impurity, (tuple, list)) else [impurity]
    return float(np.mean([site_expectation(env, bulk, t) for t in imps]))


def channel_operator(env: CtmrgEnvironment, bulk, direction="horizontal"):
    """Matvec of the edge-bulk-edge column transfer operator.

    The horizontal channel maps ``(t1, l, t3)`` indices on the left of a
    column to the right; its spectrum controls correlations along x.
    """
    a = _raw(bulk)
    T1, T3 = env.T[0], env.T[2]
    if direction == "vertical":
        a = rotate_bulk(a)
        T1, T3 = env.T[3], env.T[1]
    n1, D, n3 = T1.shape[0], a.shape[0], T3.shape[2]
    dim = n1 * D * n3

    def mv(v):
        x = v.reshape(n1, D, n3)
        # x[c1, l, c4] -> y[c2, r, c3]
        y = np.tensordot(np.tensordot(x, T1, ([0], [0])), a, ([0, 2], [0, 1]))  # c b r d
        y = np.tensordot(y, T3, ([0, 3], [2, 1]))
        return y.reshape(-1)

    return mv, dim, np.result_type(T1, T3, a)


def channel_spectrum(env: CtmrgEnvironment, bulk, k=12, direction="horizontal", seed=0):
    """Leading eigenvalues (by magnitude) of the channel operator, descending."""
    mv, dim, dtype = channel_operator(env, bulk, direction)
    k = min(k, dim - 2) if dim > 2 else 1
    if dim <= 400:
        M = np.column_stack([mv(e) for e in np.eye(dim)])
        w = np.linalg.eigvals(M)
    else:
        op = spla.LinearOperator((dim, dim), matvec=mv, dtype=dtype)
        rng = np.random.default_rng(seed)
        w = spla.eigs(op, k=k, which="LM", v0=rng.standard_normal(dim), ncv=max(30, 4 * k), tol=1e-10,
                      return_eigenvectors=False)
    w = np.asarray(w)
    return w[np.argsort(-np.abs(w), kind="stable")][:k]


def classify_degeneracy(lams, rtol=DEGENERACY_RTOL):
    """Size of the leading multiplet: magnitudes within ``rtol`` of the largest."""
    mags = np.abs(np.asarray(lams))
    return int(np.sum(mags >= (1 - rtol) * mags[0]))


def bond_matrix(env: CtmrgEnvironment, bulk):
    """Network with the bond between the left edge tensor and the site cut open.

    ``R[x, y]``: ``x`` indexes the edge tensor's bulk leg, ``y`` the site's
    left leg; the full norm is ``trace(R)``.
    """
    a = _raw(bulk)
    C1, C2, C3, C4 = env.C
    T1, T2, T3, T4 = env.T
    upper = np.tensordot(np.tensordot(C1, T1, ([1], [0])), C2, ([2], [0]))
    lower = np.tensordot(np.tensordot(C3, T3, ([1], [0])), C4, ([2], [0]))
    x = np.tensordot(upper, T2, ([2], [0]))
    x = np.tensordot(x, lower, ([3], [0]))
    x = np.tensordot(x, T4, ([4, 0], [0, 2]))  # u r d l_edge
    return np.tensordot(x, a, ([0, 1, 2], [1, 2, 3]))


def sector_weights(env: CtmrgEnvironment, bulk, labels):
    """Weight of the cut-bond matrix per charge difference between its two indices.

    ``labels[i]`` is the charge label (an int or a tuple of ints mod 3) of
    bond index ``i``.  A fixed point invariant under a symmetry has weight
    only on differences that are neutral under it.
    """
    R = bond_matrix(env, bulk)
    lab = [tuple(np.atleast_1d(l) % 3) for l in labels]
    w = {}
    for i, li in enumerate(lab):
        for j, lj in enumerate(lab):
            d = tuple((p - q) % 3 for p, q in zip(li, lj))
            w[d] = w.get(d, 0.0) + abs(R[i, j]) ** 2
    tot = sum(w.values())
    return {d: v / tot for d, v in sorted(w.items())}


def fixed_point_degeneracy(env: CtmrgEnvironment, bulk, labels, rel_tol=1e-8):
    """Number of symmetry-related leading fixed points.

    The environment must be seeded with a boundary that is free to break
    the virtual symmetry.  Its fixed point then has weight on a subgroup
    of charge differences whose size equals the number of degenerate
    fixed points: 1 (symmetric), 3 (broken to the diagonal subgroup,
    topological) or 9 (fully broken, trivial).
    """
    return sum(1 for v in sector_weights(env, bulk, labels).values() if v > rel_tol)


def channel_correlation_length(env: CtmrgEnvironment, bulk, k=12, rtol=DEGENERACY_RTOL, labels=None):
    """Correlation length and leading-multiplet degeneracy.

    Parameters
    ----------
    labels : sequence, optional
        Charge labels of the horizontal bond indices.  When given, the
        degeneracy is the number of symmetry-related fixed points
        (``fixed_point_degeneracy``); otherwise it is the size of the
        leading multiplet of the channel spectrum.

    Returns
    -------
    xi : float
        ``1 / ln|lambda_0 / lambda_m|`` with ``lambda_m`` the first channel
        eigenvalue outside the leading multiplet; ``inf`` if the multiplet
        fills ``k``.
    degeneracy : int or str
        3, 9, or ``"other"``.
    """
    if not env.converged:
        warnings.warn("channel spectrum from a non-converged environment", RuntimeWarning, stacklevel=2)
    lams = channel_spectrum(env, bulk, k=k)
    m = classify_degeneracy(lams, rtol)
    xi = xi_from_ratio(lams[0], lams[m]) if m < len(lams) else float("inf")
    deg = fixed_point_degeneracy(env, bulk, labels) if labels is not None else m
    return xi, (deg if deg in (3, 9) else "other")


@dataclass
class PhasePoint:
    """One node of a parameter scan."""

    theta: float
    param: float
    chi: int
    n_link: float
    xi: float
    degeneracy: object
    converged: bool
    truncation_error: float
    sweeps: int = 0
    warm: bool = False
    error: str = ""

    def row(self):
        return [self.theta, self.param, self.chi, self.n_link, self.xi, self.degeneracy,
                int(self.converged), self.truncation_error]


CSV_HEADER = ["theta", "z_or_alpha", "chi", "n_link", "xi", "degeneracy", "converged", "truncation_error"]


def scan(grid, chi_schedule, model="diluted", tol=1e-10, max_sweeps=10_000, warm_start=True,
         audit_every=10, k=12, progress=None, warm_budget=300):
    """Phase points along a grid of ``(theta, z)`` (diluted) or ``(theta, alpha)`` (interpolation).

    Parameters
    ----------
    grid : list of tuple
    chi_schedule : list of int
        Ascending bond dimensions; each point is converged at every ``chi``
        in turn, reusing the previous environment, and reported at the last.
    model : {"diluted", "interpolation", "square"}
    warm_start : bool
        Reuse the previous grid point's environment.  Every ``audit_every``-th
        point is recomputed cold and the difference recorded in ``error``.
    warm_budget : int
        Sweep cap for a warm-started point; if it does not converge within
        it, the point is recomputed from the cold boundary.

    Returns
    -------
    list of PhasePoint
    """
    from .tensors import build_diluted_double_tensor, build_interpolation_tensor, build_square_trvb_tensor

    if list(chi_schedule) != sorted(chi_schedule):
        raise ValueError("chi schedule must be ascending")
    out = []
    prev_env = None
    for i, (theta, p) in enumerate(grid):
        try:
            boundary, labels = None, None
            if model == "diluted":
                bulk, ir, iu, (boundary, labels) = build_diluted_double_tensor(theta, p, with_impurities=True,
                                                                               with_boundary=True)
                imps = (ir, iu)
            elif model == "interpolation":
                bulk, imps = build_interpolation_tensor(theta, p), None
            elif model == "square":
                bulk, imps = build_square_trvb_tensor(theta, "double"), None
            else:
                raise ValueError(f"unknown model {model!r}")

            def run(env0, cap=max_sweeps):
                env = env0
                for chi in chi_schedule:
                    if env is not None and env.C[0].shape[0] > chi:
                        env = None
                    env = ctmrg_fixed_point(bulk, chi, tol=tol, max_sweeps=cap, env=env, boundary=boundary)
                return env

            warm = warm_start and prev_env is not None and prev_env.C[0].shape[0] <= chi_schedule[0]
            note = ""
            if warm:
                # a warm start from the other side of a transition can stall in
                # the wrong symmetry-broken basin; give it a short budget only
                env = run(prev_env, min(max_sweeps, warm_budget))
                if not env.converged:
                    warm = False
                    note = "warm start stalled; cold restart"
            if not warm:
                env = run(None)
            if warm and audit_every and i % audit_every == 0:
                cold = run(None)
                dxi = abs(channel_correlation_length(cold, bulk, k)[0] - channel_correlation_length(env, bulk, k)[0])
                note = f"cold-start audit dxi={dxi:.3e}"
            n = link_density(env, bulk, imps) if imps is not None else float("nan")
            xi, deg = channel_correlation_length(env, bulk, k, labels=labels)
            pt = PhasePoint(theta, p, chi_schedule[-1], n, xi, deg, env.converged, env.truncation_error,
                            env.sweeps, warm, note)
            prev_env = env if warm_start else None
        except Exception as err:  # record and continue
            pt = PhasePoint(theta, p, chi_schedule[-1], float("nan"), float("nan"), "other", False,
                            float("nan"), 0, False, f"{type(err).__name__}: {err}")
            prev_env = None
        out.append(pt)
        if progress:
            progress(pt)
    return out


def locate_extremum(zs, ns):
    """Position of the extremum of the numerical derivative dn/dz.

    Uses central differences and refines with a parabola through the
    extremal point and its neighbours.
    """
    zs = np.asarray(zs, dtype=float)
    ns = np.asarray(ns, dtype=float)
    dn = np.gradient(ns, zs)
    i = int(np.argmax(np.abs(dn)))
    if 0 < i < len(zs) - 1:
        x = zs[i - 1 : i + 2]
        y = np.abs(dn[i - 1 : i + 2])
        c = np.polyfit(x, y, 2)
        if c[0] < 0:
            zv = -c[1] / (2 * c[0])
            if x[0] <= zv <= x[-1]:
                return float(zv), dn
    return float(zs[i]), dn
