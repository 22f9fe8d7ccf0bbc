"""Exact diagonalization of the diluted bent-trimer model on periodic clusters.

A state of the cluster is a set of bent trimers, at most one per vertex.  Each
trimer is a *corner variable*: a (plaquette, corner) pair, equivalently a
(center vertex, orientation) pair, so a cluster with ``N_v`` vertices has
``4 N_v`` variables.  The Hamiltonian

    H = (Omega / 2) sum_j (b_j + b_j^dagger) - Delta sum_j n_j

creates and destroys trimers coherently; the blockade constraint is encoded
in the basis.  In ``"no-wedge"`` mode diagonally wedged same-orientation
pairs are also excluded, which is the Rydberg-atom variant.

States are stored as two ``uint64`` words (variables 0-63 and 64-127), sorted
lexicographically by ``(hi, lo)`` so that lookups are binary searches.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numba
import numpy as np
import scipy.linalg
import scipy.sparse as sp
from scipy.optimize import minimize_scalar
from scipy.sparse.linalg import LinearOperator, eigsh

from .lattice import BENT_ARMS, STEP, BudgetExceeded
from .tensor_core import ConvergenceError, OMEGA

DEFAULT_BUDGET = 10**8
ORIENTATIONS = tuple(BENT_ARMS)  # ("NE", "NW", "SW", "SE")
LN3 = math.log(3.0)

# plaquette (lower-left corner offset from the centre) hosting each orientation
_PLAQUETTE_OFFSET = {"NE": (0, 0), "NW": (-1, 0), "SW": (-1, -1), "SE": (0, -1)}


# ---------------------------------------------------------------------------
# geometry


def _hermite_basis(v1, v2):
    """Row Hermite normal form ``[(a, b), (0, c)]`` of the lattice spanned by v1, v2."""
    m = [list(v1), list(v2)]
    # Euclid on the first column
    while m[1][0] != 0:
        q = m[0][0] // m[1][0]
        m[0] = [m[0][0] - q * m[1][0], m[0][1] - q * m[1][1]]
        m[0], m[1] = m[1], m[0]
    if m[0][0] < 0:
        m[0] = [-m[0][0], -m[0][1]]
    if m[1][1] < 0:
        m[1] = [0, -m[1][1]]
    a, b, c = m[0][0], m[0][1], m[1][1]
    if a == 0 or c == 0:
        raise ValueError(f"spanning vectors {v1}, {v2} are linearly dependent")
    return a, b % c, c


@dataclass
class Cluster:
    """Periodic square-lattice cluster of vertices with its bent-trimer variables.

    Parameters
    ----------
    span : tuple of two (int, int)
        Spanning vectors of the torus; ``Cluster.rectangle(Lx, Ly)`` gives
        ``((Lx, 0), (0, Ly))``.

    Attributes
    ----------
    n_vertices, n_links, n_plaquettes : int
    variables : list of (center, orientation)
        Index ``4 * center + k`` for orientation ``ORIENTATIONS[k]``.
    var_vertices : list of tuple
        ``(center, blue end, orange end)`` per variable.
    """

    span: tuple
    n_vertices: int = field(init=False)
    coords: list = field(init=False, repr=False)
    variables: list = field(init=False, repr=False)
    var_vertices: list = field(init=False, repr=False)

    def __post_init__(self):
        v1, v2 = (tuple(int(c) for c in v) for v in self.span)
        self.span = (v1, v2)
        self._hnf = _hermite_basis(v1, v2)
        a, _, c = self._hnf
        self.n_vertices = a * c
        self.coords = [(x, y) for y in range(c) for x in range(a)]
        self.variables = []
        self.var_vertices = []
        for v, (x, y) in enumerate(self.coords):
            for o in ORIENTATIONS:
                blue, orange = BENT_ARMS[o]
                vs = (v, self.vertex(x + STEP[blue][0], y + STEP[blue][1]),
                      self.vertex(x + STEP[orange][0], y + STEP[orange][1]))
                if len(set(vs)) < 3:
                    raise ValueError(f"cluster {self.span} is too small: a trimer overlaps itself")
                self.variables.append((v, o))
                self.var_vertices.append(vs)
        if self.n_variables > 128:
            raise ValueError("clusters are limited to 32 vertices (128 corner variables)")

    @classmethod
    def rectangle(cls, Lx, Ly):
        return cls(((Lx, 0), (0, Ly)))

    @classmethod
    def parse(cls, spec):
        """``"4x6"`` or ``"a,b;c,d"`` (two spanning vectors)."""
        spec = str(spec).strip()
        if "x" in spec:
            lx, ly = (int(t) for t in spec.split("x"))
            return cls.rectangle(lx, ly)
        v1, v2 = (tuple(int(t) for t in part.split(",")) for part in spec.split(";"))
        return cls((v1, v2))

    @property
    def n_links(self):
        return 2 * self.n_vertices

    @property
    def n_plaquettes(self):
        return self.n_vertices

    @property
    def n_variables(self):
        return 4 * self.n_vertices

    def reduce(self, x, y):
        """Canonical representative ``(x, y)`` of a lattice point."""
        a, b, c = self._hnf
        k = x // a
        return x - k * a, (y - k * b) % c

    def vertex(self, x, y):
        x, y = self.reduce(x, y)
        return x + self._hnf[0] * y

    def plaquette_of(self, j):
        """Plaquette (lower-left vertex id) hosting variable ``j``."""
        v, o = self.variables[j]
        x, y = self.coords[v]
        dx, dy = _PLAQUETTE_OFFSET[o]
        return self.vertex(x + dx, y + dy)

    def conflicts(self, i, j):
        return i != j and bool(set(self.var_vertices[i]) & set(self.var_vertices[j]))

    def wedged(self, i, j):
        """Diagonally wedged same-orientation pair (Rydberg blockade exclusion)."""
        (vi, oi), (vj, oj) = self.variables[i], self.variables[j]
        if oi != oj or vi == vj:
            return False
        blue, orange = BENT_ARMS[oi]
        dx = STEP[blue][0] + STEP[orange][0]
        dy = STEP[blue][1] + STEP[orange][1]
        (xi, yi), (xj, yj) = self.coords[vi], self.coords[vj]
        return self.vertex(xi + dx, yi + dy) == vj or self.vertex(xj + dx, yj + dy) == vi

    def wedge_pairs(self):
        n = self.n_variables
        return [(i, j) for i in range(n) for j in range(i + 1, n) if self.wedged(i, j)]

    def conflict_graph(self, mode="unrestricted"):
        """Adjacency sets of the conflict graph (vertex sharing, plus wedges in no-wedge mode)."""
        n = self.n_variables
        adj = [set() for _ in range(n)]
        for i in range(n):
            for j in range(i + 1, n):
                if self.conflicts(i, j) or (mode == "no-wedge" and self.wedged(i, j)):
                    adj[i].add(j)
                    adj[j].add(i)
        return adj

    def plaquette_vertices(self, px, py):
        return {self.vertex(px + dx, py + dy) for dx in (0, 1) for dy in (0, 1)}


# ---------------------------------------------------------------------------
# basis enumeration


@numba.njit(cache=True)
def _dfs(nv, opt_ptr, opt_var, var_vmask, wedge_lo, wedge_hi, use_wedge, budget, out_lo, out_hi, store):
    """Enumerate independent sets vertex by vertex; returns the count or -1 over budget."""
    st_cov = np.zeros(nv + 2, np.int64)
    st_lo = np.zeros(nv + 2, np.uint64)
    st_hi = np.zeros(nv + 2, np.uint64)
    st_opt = np.full(nv + 2, -1, np.int64)
    full = (np.int64(1) << nv) - 1
    one = np.uint64(1)
    count = 0
    depth = 0
    while depth >= 0:
        cov = st_cov[depth]
        if cov == full:
            if store:
                out_lo[count] = st_lo[depth]
                out_hi[count] = st_hi[depth]
            count += 1
            if count > budget:
                return -1
            depth -= 1
            continue
        v = 0
        while (cov >> v) & 1:
            v += 1
        k = st_opt[depth]
        if k == -1:
            st_opt[depth] = opt_ptr[v]
            depth += 1
            st_cov[depth] = cov | (np.int64(1) << v)
            st_lo[depth] = st_lo[depth - 1]
            st_hi[depth] = st_hi[depth - 1]
            st_opt[depth] = -1
        elif k < opt_ptr[v + 1]:
            st_opt[depth] = k + 1
            j = opt_var[k]
            if var_vmask[j] & cov:
                continue
            lo = st_lo[depth]
            hi = st_hi[depth]
            if use_wedge and ((lo & wedge_lo[j]) or (hi & wedge_hi[j])):
                continue
            depth += 1
            st_cov[depth] = cov | var_vmask[j]
            if j < 64:
                st_lo[depth] = lo | (one << np.uint64(j))
                st_hi[depth] = hi
            else:
                st_lo[depth] = lo
                st_hi[depth] = hi | (one << np.uint64(j - 64))
            st_opt[depth] = -1
        else:
            depth -= 1
    return count


@numba.njit(cache=True)
def _search(lo_arr, hi_arr, lo, hi):
    a = 0
    b = lo_arr.shape[0]
    while a < b:
        m = (a + b) // 2
        if hi_arr[m] < hi or (hi_arr[m] == hi and lo_arr[m] < lo):
            a = m + 1
        else:
            b = m
    if a < lo_arr.shape[0] and lo_arr[a] == lo and hi_arr[a] == hi:
        return a
    return -1


@numba.njit(cache=True)
def _additions(lo_arr, hi_arr, nvar, var_vmask, wedge_lo, wedge_hi, use_wedge, ptr, idx, store):
    """Count (store=False) or fill (store=True) the trimer-creation CSR."""
    n = lo_arr.shape[0]
    one = np.uint64(1)
    total = 0
    for i in range(n):
        lo = lo_arr[i]
        hi = hi_arr[i]
        cov = np.int64(0)
        for j in range(nvar):
            if j < 64:
                on = (lo >> np.uint64(j)) & one
            else:
                on = (hi >> np.uint64(j - 64)) & one
            if on:
                cov |= var_vmask[j]
        if store:
            total = ptr[i]
        for j in range(nvar):
            if var_vmask[j] & cov:
                continue
            if use_wedge and ((lo & wedge_lo[j]) or (hi & wedge_hi[j])):
                continue
            if j < 64:
                nlo = lo | (one << np.uint64(j))
                nhi = hi
            else:
                nlo = lo
                nhi = hi | (one << np.uint64(j - 64))
            if store:
                idx[total] = _search(lo_arr, hi_arr, nlo, nhi)
            total += 1
        if not store:
            ptr[i + 1] = total
    return total


@dataclass
class ClusterBasis:
    """Sorted independent sets of a cluster's conflict graph.

    Attributes
    ----------
    lo, hi : ndarray of uint64
        Occupation bit words of each state, sorted by ``(hi, lo)``.
    n_trimers : ndarray of int64
        Trimer count per state.
    """

    cluster: Cluster
    mode: str
    lo: np.ndarray = field(repr=False)
    hi: np.ndarray = field(repr=False)
    n_trimers: np.ndarray = field(repr=False)
    _adds: tuple | None = field(default=None, repr=False)

    @property
    def dim(self):
        return int(self.lo.shape[0])

    def __len__(self):
        return self.dim

    def state_bits(self, i):
        """Sorted variable indices occupied in state ``i``."""
        lo, hi = int(self.lo[i]), int(self.hi[i])
        word = lo | (hi << 64)
        return tuple(j for j in range(self.cluster.n_variables) if (word >> j) & 1)

    def index(self, variables):
        """Ordinal of the state occupying ``variables``, or -1."""
        word = sum(1 << int(j) for j in set(variables))
        lo, hi = np.uint64(word & ((1 << 64) - 1)), np.uint64(word >> 64)
        return int(_search(self.lo, self.hi, lo, hi))

    def indices(self, words):
        """Vectorised lookup of Python-int occupation words."""
        return np.array([self.index([j for j in range(self.cluster.n_variables) if (w >> j) & 1]) for w in words])

    def masked_counts(self, variables):
        """Per-state number of occupied variables among ``variables``."""
        lo_m, hi_m = _masks(variables)
        return np.bitwise_count(self.lo & lo_m).astype(np.int64) + np.bitwise_count(self.hi & hi_m)

    def additions(self):
        """CSR ``(ptr, idx)``: ``idx[ptr[i]:ptr[i+1]]`` are the states reachable by adding one trimer."""
        if self._adds is None:
            vm, wl, wh = _variable_tables(self.cluster, self.mode)
            ptr = np.zeros(self.dim + 1, np.int64)
            nvar = self.cluster.n_variables
            use = self.mode == "no-wedge"
            total = _additions(self.lo, self.hi, nvar, vm, wl, wh, use, ptr, np.zeros(0, np.int32), False)
            idx = np.empty(total, np.int32)
            _additions(self.lo, self.hi, nvar, vm, wl, wh, use, ptr, idx, True)
            if total and idx.min() < 0:
                raise RuntimeError("basis is not closed under trimer removal")
            self._adds = (ptr, idx)
        return self._adds


def _masks(variables):
    word = 0
    for j in variables:
        word |= 1 << int(j)
    return np.uint64(word & ((1 << 64) - 1)), np.uint64(word >> 64)


def _variable_tables(cluster: Cluster, mode):
    n = cluster.n_variables
    vm = np.array([sum(1 << v for v in set(vs)) for vs in cluster.var_vertices], np.int64)
    wl = np.zeros(n, np.uint64)
    wh = np.zeros(n, np.uint64)
    if mode == "no-wedge":
        for i, j in cluster.wedge_pairs():
            for a, b in ((i, j), (j, i)):
                if b < 64:
                    wl[a] |= np.uint64(1 << b)
                else:
                    wh[a] |= np.uint64(1 << (b - 64))
    return vm, wl, wh


def _check_mode(mode):
    if mode not in ("unrestricted", "no-wedge"):
        raise ValueError(f"mode must be 'unrestricted' or 'no-wedge', got {mode!r}")


def count_states(cluster: Cluster, mode="unrestricted", budget=DEFAULT_BUDGET):
    """Number of basis states, or raise BudgetExceeded once the count passes ``budget``."""
    _check_mode(mode)
    nv = cluster.n_vertices
    vm, wl, wh = _variable_tables(cluster, mode)
    opts = [[] for _ in range(nv)]
    for j, vs in enumerate(cluster.var_vertices):
        opts[min(vs)].append(j)
    ptr = np.zeros(nv + 1, np.int64)
    ptr[1:] = np.cumsum([len(o) for o in opts])
    var = np.array([j for o in opts for j in o], np.int64)
    dummy = np.zeros(0, np.uint64)
    n = _dfs(nv, ptr, var, vm, wl, wh, mode == "no-wedge", budget, dummy, dummy, False)
    if n < 0:
        raise BudgetExceeded(f"cluster {cluster.span} ({mode}) has more than {budget} states", budget + 1)
    return int(n), (nv, ptr, var, vm, wl, wh)


def build_basis(cluster: Cluster, mode="unrestricted", budget=DEFAULT_BUDGET) -> ClusterBasis:
    """Enumerate all (wedge-free) diluted bent-trimer configurations of ``cluster``.

    Raises
    ------
    BudgetExceeded
        If the dimension exceeds ``budget``; ``partial_count`` is a lower bound.
    """
    n, (nv, ptr, var, vm, wl, wh) = count_states(cluster, mode, budget)
    lo = np.empty(n, np.uint64)
    hi = np.empty(n, np.uint64)
    _dfs(nv, ptr, var, vm, wl, wh, mode == "no-wedge", budget, lo, hi, True)
    order = np.lexsort((lo, hi))
    lo, hi = lo[order], hi[order]
    nt = (np.bitwise_count(lo) + np.bitwise_count(hi)).astype(np.int64)
    return ClusterBasis(cluster, mode, lo, hi, nt)


# ---------------------------------------------------------------------------
# Hamiltonian


@numba.njit(cache=True)
def _offdiag(ptr, idx, x, y, half_omega):
    n = ptr.shape[0] - 1
    for i in range(n):
        xi = x[i]
        acc = 0.0
        for k in range(ptr[i], ptr[i + 1]):
            j = idx[k]
            acc += x[j]
            y[j] += half_omega * xi
        y[i] += half_omega * acc


@numba.njit(cache=True)
def _offdiag_complex(ptr, idx, x, y, half_omega):
    n = ptr.shape[0] - 1
    for i in range(n):
        xi = x[i]
        acc = 0.0j
        for k in range(ptr[i], ptr[i + 1]):
            j = idx[k]
            acc += x[j]
            y[j] += half_omega * xi
        y[i] += half_omega * acc


class TrimerHamiltonian(LinearOperator):
    """Matrix-free ``H = (Omega/2) sum (b + b^dagger) - Delta sum n`` on a ClusterBasis."""

    def __init__(self, basis: ClusterBasis, omega=1.0, delta=0.0, dtype=np.float64):
        self.basis = basis
        self.omega = float(omega)
        self.delta = float(delta)
        self.ptr, self.idx = basis.additions()
        self.diag = -self.delta * basis.n_trimers.astype(np.float64)
        super().__init__(dtype=np.dtype(dtype), shape=(basis.dim, basis.dim))

    def _matvec(self, x):
        x = np.ascontiguousarray(np.ravel(x))
        cplx = np.iscomplexobj(x)
        y = self.diag * x
        y = y.astype(np.complex128 if cplx else np.float64, copy=False)
        if self.omega != 0.0:
            xx = x.astype(y.dtype, copy=False)
            (_offdiag_complex if cplx else _offdiag)(self.ptr, self.idx, xx, y, 0.5 * self.omega)
        return y

    def _rmatvec(self, x):
        return self._matvec(np.conj(x)).conj()

    def _adjoint(self):
        return self

    def to_sparse(self):
        """Explicit CSR matrix (small bases and oracles)."""
        n = self.basis.dim
        rows = np.repeat(np.arange(n), np.diff(self.ptr))
        off = sp.coo_matrix((np.full(len(self.idx), 0.5 * self.omega), (rows, self.idx)), shape=(n, n))
        return (off + off.T + sp.diags(self.diag)).tocsr()

    def offdiag_row_sum(self, i):
        """Sum of the off-diagonal entries of row ``i``."""
        e = np.zeros(self.basis.dim)
        e[i] = 1.0
        y = self._matvec(e)
        y[i] -= self.diag[i]
        return float(y.sum())


def build_hamiltonian(basis: ClusterBasis, omega=1.0, delta=0.0) -> TrimerHamiltonian:
    """Sparse symmetric trimer Hamiltonian (matrix-free)."""
    return TrimerHamiltonian(basis, omega, delta)


def ground_state(H, tol=1e-10, v0=None, seed=0, ncv=None, maxiter=None):
    """Lowest eigenpair of a Hermitian operator.

    The returned vector is normalized, with a deterministic sign (largest
    component positive).  Raises ConvergenceError if the relative residual
    ``||H v - E v|| / max(1, |E|)`` exceeds ``tol``.
    """
    n = H.shape[0]
    if n <= 400:
        A = H.to_sparse().toarray() if hasattr(H, "to_sparse") else H @ np.eye(n)
        w, V = np.linalg.eigh(A)
        e, v = float(w[0]), V[:, 0]
    else:
        if v0 is None:
            v0 = np.random.default_rng(seed).random(n) + 0.5
        w, V = eigsh(H, k=1, which="SA", v0=v0, tol=tol * 0.1, ncv=ncv or 24, maxiter=maxiter or 20 * n)
        e, v = float(w[0]), V[:, 0]
    v = v / np.linalg.norm(v)
    if v[np.argmax(np.abs(v))] < 0:
        v = -v
    res = np.linalg.norm(H @ v - e * v) / max(1.0, abs(e))
    if res > tol:
        raise ConvergenceError(f"ground state residual {res:.3e} > {tol:.1e}", res)
    return e, v


def sign_gauge(basis: ClusterBasis):
    """The ``(-1)^n`` gauge that makes the ground state of H non-negative for Omega > 0."""
    return np.where(basis.n_trimers % 2 == 0, 1.0, -1.0)


# ---------------------------------------------------------------------------
# trial states


@dataclass
class TrvbAmplitudes:
    """Sparse polynomial form of the diluted tRVB amplitudes.

    ``amp[index[s]] = sum_k counts[s, k] z^(2k)``: ``counts[s, k]`` is the
    number of maximal coverings containing state ``s`` with ``k`` extra trimers.
    """

    basis: ClusterBasis
    index: np.ndarray
    counts: np.ndarray
    n_maximal: int

    def vector(self, z):
        powers = float(z) ** (2 * np.arange(self.counts.shape[1]))
        amp = self.counts @ powers
        v = np.zeros(self.basis.dim)
        v[self.index] = amp
        nrm = np.linalg.norm(v)
        if nrm == 0:
            raise ValueError("trial vector vanishes on this basis")
        return v / nrm

    def overlap(self, psi, z):
        """``|<Phi(z)|psi>|`` for a normalized ``psi`` (0 where the trial state vanishes)."""
        powers = float(z) ** (2 * np.arange(self.counts.shape[1]))
        amp = self.counts @ powers
        nrm = np.linalg.norm(amp)
        return float(abs(psi[self.index] @ amp) / nrm) if nrm > 0 else 0.0


def maximal_coverings(cluster: Cluster):
    """All maximal bent-trimer coverings as sorted variable tuples (unrestricted)."""
    nv = cluster.n_vertices
    masks = [sum(1 << v for v in vs) for vs in cluster.var_vertices]
    full = (1 << nv) - 1
    groups = [[] for _ in range(nv)]
    for j, vs in enumerate(cluster.var_vertices):
        for v in vs:
            groups[v].append(j)
    out = []
    chosen = []

    def rec(cov):
        if cov == full:
            out.append(tuple(sorted(chosen)))
            return
        v = (~cov & (cov + 1)).bit_length() - 1
        for j in groups[v]:
            if masks[j] & cov:
                continue
            chosen.append(j)
            rec(cov | masks[j])
            chosen.pop()

    rec(0)
    return out


def trvb_amplitudes(basis: ClusterBasis) -> TrvbAmplitudes:
    """Precompute the z-polynomial of every diluted-tRVB amplitude (bent trimers, theta = 0)."""
    maxi = maximal_coverings(basis.cluster)
    if not maxi:
        raise ValueError(f"cluster {basis.cluster.span} has no maximal bent-trimer covering")
    K = len(maxi[0])
    acc = {}
    for m in maxi:
        for r in range(K + 1):
            for sub in _subsets(m, r):
                word = 0
                for j in sub:
                    word |= 1 << j
                row = acc.setdefault(word, np.zeros(K + 1))
                row[K - r] += 1
    words = list(acc)
    lo = np.array([w & ((1 << 64) - 1) for w in words], np.uint64)
    hi = np.array([w >> 64 for w in words], np.uint64)
    idx = np.array([_search(basis.lo, basis.hi, a, b) for a, b in zip(lo, hi)], np.int64)
    counts = np.array([acc[w] for w in words])
    keep = idx >= 0  # no-wedge mode drops wedged sub-configurations
    return TrvbAmplitudes(basis, idx[keep], counts[keep], len(maxi))


def _subsets(items, r):
    from itertools import combinations

    return combinations(items, r)


def trvb_vector(basis: ClusterBasis, theta=0.0, z=0.0, amplitudes: TrvbAmplitudes | None = None):
    """Normalized diluted tRVB state ``prod (1 + z^2 Sigma^-) |tRVB>`` on ``basis``.

    Only ``theta = 0`` (bent trimers, equal weights) is defined on the
    bent-only cluster Hilbert space.
    """
    if theta != 0.0:
        raise ValueError("the cluster Hilbert space holds bent trimers only; theta must be 0")
    amps = amplitudes if amplitudes is not None else trvb_amplitudes(basis)
    return amps.vector(z)


def optimal_overlap(psi, amplitudes: TrvbAmplitudes, zmax=2.0, grid=41):
    """``max_z |<psi|Phi(z)>|`` over ``z in [0, zmax]`` -> ``(overlap, z)``.

    A coarse grid brackets the maximum, refined by bounded golden-section
    (Brent) search.
    """
    zs = np.linspace(0.0, zmax, grid)
    vals = [amplitudes.overlap(psi, z) for z in zs]
    k = int(np.argmax(vals))
    a, b = zs[max(k - 1, 0)], zs[min(k + 1, grid - 1)]
    res = minimize_scalar(lambda z: -amplitudes.overlap(psi, z), bounds=(a, b), method="bounded",
                          options={"xatol": 1e-8})
    if -res.fun >= vals[k]:
        return float(-res.fun), float(res.x)
    return float(vals[k]), float(zs[k])


def link_density(psi, basis: ClusterBasis):
    """Fraction of links covered by a trimer arm (each trimer covers two links)."""
    return float(np.sum(np.abs(psi) ** 2 * 2 * basis.n_trimers) / basis.cluster.n_links)


def fidelity_susceptibility(psi_a, psi_b, n_links, dlam):
    """``(1 - |<a|b>|) / (N dlam^2)``."""
    ov = abs(np.vdot(psi_a, psi_b))
    return float((1.0 - min(ov, 1.0)) / (n_links * dlam**2))


# ---------------------------------------------------------------------------
# entanglement


REGION_PRESETS = {4: (1, 1), 6: (2, 1), 8: (2, 2), 10: (3, 2)}


def region_plaquettes(perimeter, origin=(0, 0)):
    """Rectangular plaquette block with the given perimeter (4, 6, 8 or 10)."""
    try:
        w, h = REGION_PRESETS[perimeter]
    except KeyError:
        raise ValueError(f"no preset region with perimeter {perimeter}; choose from {sorted(REGION_PRESETS)}") from None
    x0, y0 = origin
    return [(x0 + i, y0 + j) for j in range(h) for i in range(w)]


def region_variables(cluster: Cluster, plaquettes):
    """Corner variables of the given plaquettes (unwrapped lower-left coordinates)."""
    seen = {}
    for px, py in plaquettes:
        for dx in (0, 1):
            for dy in (0, 1):
                v = cluster.vertex(px + dx, py + dy)
                if seen.setdefault(v, (px + dx, py + dy)) != (px + dx, py + dy):
                    raise ValueError("region wraps around the torus and touches itself")
    ids = {cluster.vertex(px, py) for px, py in plaquettes}
    if len(ids) != len(plaquettes):
        raise ValueError("region wraps around the torus and touches itself")
    return sorted(j for j in range(cluster.n_variables) if cluster.plaquette_of(j) in ids)


def region_entropy(psi, basis: ClusterBasis, plaquettes):
    """Von Neumann entropy (nats) of the corner variables inside ``plaquettes``.

    The constrained basis embeds in the product space of corner variables,
    so the reduced density matrix is ``Psi Psi^dagger`` with ``Psi`` indexed
    by (inside configuration, outside configuration).
    """
    lo_m, hi_m = _masks(region_variables(basis.cluster, plaquettes))
    a_lo, a_hi = basis.lo & lo_m, basis.hi & hi_m
    b_lo, b_hi = basis.lo & ~lo_m, basis.hi & ~hi_m
    _, ia = np.unique(np.stack([a_lo, a_hi], 1), axis=0, return_inverse=True)
    _, ib = np.unique(np.stack([b_lo, b_hi], 1), axis=0, return_inverse=True)
    ia, ib = ia.ravel(), ib.ravel()
    Psi = sp.csr_matrix((psi, (ia, ib)), shape=(ia.max() + 1, ib.max() + 1))
    rho = (Psi @ Psi.conj().T).toarray()
    w = np.linalg.eigvalsh((rho + rho.conj().T) / 2)
    w = w[w > 1e-15]
    return float(-np.sum(w * np.log(w)))


def tee(psi, basis: ClusterBasis, origin=(0, 0)):
    """``gamma = S_8 - 2 S_4`` with the preset regions."""
    s4 = region_entropy(psi, basis, region_plaquettes(4, origin))
    s8 = region_entropy(psi, basis, region_plaquettes(8, origin))
    return s8 - 2 * s4


def region_entropies(psi, basis: ClusterBasis, perimeters=(4, 6, 8), origin=(0, 0)):
    return {p: region_entropy(psi, basis, region_plaquettes(p, origin)) for p in perimeters}


# ---------------------------------------------------------------------------
# ground-state sweep


@dataclass
class EdPoint:
    """One coupling of a ground-state sweep."""

    cluster: str
    mode: str
    delta_over_omega: float
    energy: float
    overlap_trvb: float
    overlap_diluted: float
    opt_z: float
    F: float
    S_L4: float
    S_L6: float
    S_L8: float
    gamma: float
    link_density: float = float("nan")

    def row(self):
        return [self.cluster, self.mode, self.delta_over_omega, self.energy, self.overlap_trvb, self.overlap_diluted,
                self.opt_z, self.F, self.S_L4, self.S_L6, self.S_L8, self.gamma]


ED_CSV_HEADER = ["cluster", "mode", "delta_over_omega", "energy", "overlap_trvb", "overlap_diluted", "opt_z", "F",
                 "S_L4", "S_L6", "S_L8", "gamma"]


def observables(psi, basis: ClusterBasis, amplitudes: TrvbAmplitudes | None = None, zmax=2.0):
    """Overlaps with the tRVB state, optimal dilution, link density and region entropies.

    ``psi`` is gauged by ``(-1)^n`` first, so the optimal dilution is
    reported as ``|z|`` (the raw ground state corresponds to imaginary z).
    """
    amps = amplitudes if amplitudes is not None else trvb_amplitudes(basis)
    phi = sign_gauge(basis) * psi
    ov0 = amps.overlap(phi, 0.0)
    ovz, zopt = optimal_overlap(phi, amps, zmax)
    ent = region_entropies(psi, basis)
    return {
        "overlap_trvb": ov0,
        "overlap_diluted": ovz,
        "opt_z": zopt,
        "link_density": link_density(psi, basis),
        "S_L4": ent[4],
        "S_L6": ent[6],
        "S_L8": ent[8],
        "gamma": ent[8] - 2 * ent[4],
    }


def sweep(basis: ClusterBasis, ratios, omega=1.0, dlam=1e-3, richardson=False, tol=1e-10, label=None, progress=None):
    """Ground-state observables along ``Delta/Omega`` with the fidelity susceptibility.

    The susceptibility is taken in ``lambda = Omega / Delta`` with forward
    step ``dlam``.  With ``richardson=True`` a second step ``dlam/2`` is
    computed and the extrapolated value ``2 F(dlam/2) - F(dlam)`` reported.
    """
    amps = trvb_amplitudes(basis)
    label = label or "x".join(str(v) for v in _extent_label(basis.cluster))
    H = build_hamiltonian(basis, omega, 0.0)
    out = []
    v0 = None
    for r in ratios:
        delta = r * omega
        H.delta = delta
        H.diag = -delta * basis.n_trimers.astype(np.float64)
        e, psi = ground_state(H, tol=tol, v0=v0)
        v0 = psi
        F = float("nan")
        if delta != 0:
            lam = omega / delta

            def gs_at(dl):
                d2 = omega / (lam + dl)
                H2 = build_hamiltonian(basis, omega, d2)
                return ground_state(H2, tol=tol, v0=psi)[1]

            F = fidelity_susceptibility(psi, gs_at(dlam), basis.cluster.n_links, dlam)
            if richardson:
                F2 = fidelity_susceptibility(psi, gs_at(dlam / 2), basis.cluster.n_links, dlam / 2)
                F = 2 * F2 - F
        obs = observables(psi, basis, amps)
        p = EdPoint(label, basis.mode, float(r), e, obs["overlap_trvb"], obs["overlap_diluted"], obs["opt_z"], F,
                    obs["S_L4"], obs["S_L6"], obs["S_L8"], obs["gamma"], obs["link_density"])
        out.append(p)
        if progress:
            progress(p)
    return out


def _extent_label(cluster: Cluster):
    (a, b), (c, d) = cluster.span
    if b == 0 and c == 0:
        return (a, d)
    return (a, b, c, d)


def find_peaks(x, y):
    """Indices of strict interior local maxima of ``y``."""
    y = np.asarray(y)
    return [i for i in range(1, len(y) - 1) if y[i] > y[i - 1] and y[i] >= y[i + 1]]


# ---------------------------------------------------------------------------
# time evolution


@dataclass
class RampProtocol:
    """Rabi ramp followed by a linear detuning sweep.

    ``Omega`` rises from 0 to ``omega`` over ``T/3`` with a C^1 smoothstep
    while ``Delta`` moves linearly from ``delta_start`` (default ``delta0``)
    to ``delta0``; then ``Delta`` goes linearly from ``delta0`` to ``delta1``
    over the remaining ``2T/3``.
    """

    T: float
    delta0: float = -1.5
    delta1: float = 3.0
    omega: float = 1.0
    delta_start: float | None = None

    def __post_init__(self):
        if self.T <= 0:
            raise ValueError("ramp time T must be positive")

    def omega_at(self, t):
        s = min(max(t / (self.T / 3.0), 0.0), 1.0)
        return self.omega * s * s * (3.0 - 2.0 * s)

    def delta_at(self, t):
        t1 = self.T / 3.0
        if t <= t1:
            d0 = self.delta0 if self.delta_start is None else self.delta_start
            return d0 + (self.delta0 - d0) * (t / t1)
        s = min((t - t1) / (self.T - t1), 1.0)
        return self.delta0 + (self.delta1 - self.delta0) * s

    def time_of_ratio(self, ratio):
        """First time in the detuning segment where ``Delta/Omega = ratio``."""
        t1 = self.T / 3.0
        s = (ratio * self.omega - self.delta0) / (self.delta1 - self.delta0)
        if not 0.0 <= s <= 1.0:
            raise ValueError(f"Delta/Omega = {ratio} is not reached by this ramp")
        return t1 + s * (self.T - t1)


def krylov_expm(H, v, dt, m_max=40, tol=1e-13):
    """``exp(-i H dt) v`` by a Lanczos projection, growing the subspace until converged."""
    beta0 = np.linalg.norm(v)
    V = [v / beta0]
    alpha, beta = [], []
    for k in range(m_max):
        w = H @ V[k]
        a = np.vdot(V[k], w).real
        w = w - a * V[k]
        if k > 0:
            w = w - beta[-1] * V[k - 1]
        # full reorthogonalization keeps the small Krylov basis unitary
        for q in V:
            w = w - np.vdot(q, w) * q
        b = np.linalg.norm(w)
        alpha.append(a)
        Tm = np.diag(alpha) + np.diag(beta, 1) + np.diag(beta, -1)
        c = scipy.linalg.expm(-1j * dt * Tm)[:, 0]
        err = b * abs(c[-1])
        if err < tol or b < 1e-14:
            return beta0 * (np.array(V).T @ c)
        beta.append(b)
        V.append(w / b)
    raise ConvergenceError(f"Krylov exponential did not converge (error {err:.2e})", err)


@dataclass
class Snapshot:
    t: float
    delta: float
    omega: float
    norm: float
    gamma: float
    overlap: float


TRAJECTORY_HEADER = ["t", "delta", "omega", "norm", "gamma", "overlap"]


def evolve(basis: ClusterBasis, protocol: RampProtocol, dt=None, snapshot_ratios=(), amplitudes=None,
           norm_tol=1e-8, keep_states=False):
    """Integrate ``i d/dt psi = H(t) psi`` from the vacuum with exponential midpoint steps.

    Parameters
    ----------
    dt : float, optional
        Step; default ``min(0.01, T/3000)``.  Steps are shortened so that
        every requested snapshot time is hit exactly.
    snapshot_ratios : sequence of float
        ``Delta/Omega`` values (detuning segment) at which gamma and the
        optimal tRVB overlap are recorded; the final state is always recorded.

    Returns
    -------
    list of Snapshot, final state (and the snapshot states if ``keep_states``)
    """
    T = protocol.T
    dt = dt if dt is not None else min(0.01, T / 3000.0)
    amps = amplitudes if amplitudes is not None else trvb_amplitudes(basis)
    vac = basis.index([])
    psi = np.zeros(basis.dim, np.complex128)
    psi[vac] = 1.0
    stops = sorted({protocol.time_of_ratio(r) for r in snapshot_ratios} | {T})
    H = build_hamiltonian(basis, 0.0, 0.0)
    nt = basis.n_trimers.astype(np.float64)
    t = 0.0
    snaps, states = [], []
    for stop in stops:
        while t < stop - 1e-12:
            h = min(dt, stop - t)
            tm = t + h / 2
            H.omega = protocol.omega_at(tm)
            H.diag = -protocol.delta_at(tm) * nt
            psi = krylov_expm(H, psi, h)
            t = t + h if stop - (t + h) > 1e-12 else stop
            nrm = np.linalg.norm(psi)
            if abs(nrm - 1.0) > norm_tol:
                raise ConvergenceError(f"norm drift {abs(nrm - 1):.2e} at t = {t:.4f}", abs(nrm - 1))
        gamma = _gamma_complex(psi, basis)
        ov, _ = optimal_overlap(sign_gauge(basis) * psi, amps)
        snaps.append(Snapshot(t, protocol.delta_at(t), protocol.omega_at(t), float(np.linalg.norm(psi)), gamma, ov))
        if keep_states:
            states.append(psi.copy())
    if keep_states:
        return snaps, psi, states
    return snaps, psi


def _gamma_complex(psi, basis):
    return region_entropy(psi, basis, region_plaquettes(8)) - 2 * region_entropy(psi, basis, region_plaquettes(4))


# ---------------------------------------------------------------------------
# Z3 toric code on a small torus


def _clock_ops():
    sigma = np.diag([1, OMEGA, OMEGA**2])
    tau = np.roll(np.eye(3), 1, axis=0)  # |s> -> |s+1>
    return sigma, tau


@dataclass
class StabilizerReport:
    star: list
    plaquette: list
    commute: bool
    clock_algebra: bool
    energy: float

    @property
    def ok(self):
        return all(self.star) and all(self.plaquette) and self.commute and self.clock_algebra


def _apply_site(state, op, site):
    return np.moveaxis(np.tensordot(op, state, axes=([1], [site])), 0, site)


def toric_code_small_torus(Lx=2, Ly=2, flux=None, atol=1e-12):
    """Equal-weight Gauss-law state of the Z3 toric code with stabilizer checks.

    Links are ``(v, "E")`` and ``(v, "N")`` with site index ``2 v + {0, 1}``.
    ``A_v`` is the product of ``sigma^dagger`` on outgoing and ``sigma`` on
    incoming links, so a vertex with outgoing flux ``f`` (mod 3) has
    ``A_v = omega^(-f)``; the trimer Gauss law ``f = 2`` gives ``A_v = omega``.
    ``B_p = tau_bottom tau_right tau_top^dagger tau_left^dagger``.

    Parameters
    ----------
    flux : {0, 1, 2}, optional
        Outgoing flux imposed at every vertex.  The Gauss law summed over the
        torus requires ``flux * Lx * Ly = 0 (mod 3)``.  Default: 2 (the trimer
        background charge) when the vertex count is a multiple of three,
        otherwise 0 (the charge-free sector; the background charge cannot be
        gauged away on such tori).

    Returns
    -------
    psi : ndarray of shape (3,) * 2 Lx Ly
    report : StabilizerReport
        Star checks test ``A_v psi = omega^(-flux) psi``; ``energy`` is
        ``<H>`` for ``H = -sum_v (omega^flux A_v + h.c.) - sum_p (B_p + h.c.)``,
        equal to ``-2 (N_v + N_p)`` when every stabilizer is satisfied.
    """
    nv = Lx * Ly
    if flux is None:
        flux = 2 if nv % 3 == 0 else 0
    if flux not in (0, 1, 2):
        raise ValueError(f"flux must be 0, 1 or 2, got {flux!r}")
    if (flux * nv) % 3:
        raise ValueError(f"a {Lx}x{Ly} torus has no configurations with vertex flux {flux} "
                         "(flux times vertex count must vanish mod 3)")
    if nv > 6:
        raise BudgetExceeded(f"3^{2 * nv} amplitudes exceed the small-torus budget", 3 ** (2 * nv))
    n = 2 * Lx * Ly
    sigma, tau = _clock_ops()

    def vid(x, y):
        return (x % Lx) + Lx * (y % Ly)

    def link(x, y, d):
        return 2 * vid(x, y) + (0 if d == "E" else 1)

    stars = []
    for y in range(Ly):
        for x in range(Lx):
            out = [link(x, y, "E"), link(x, y, "N")]
            inc = [link(x - 1, y, "E"), link(x, y - 1, "N")]
            stars.append([(s, sigma.conj().T) for s in out] + [(s, sigma) for s in inc])
    plaqs = []
    for y in range(Ly):
        for x in range(Lx):
            plaqs.append([(link(x, y, "E"), tau), (link(x + 1, y, "N"), tau),
                          (link(x, y + 1, "E"), tau.conj().T), (link(x, y, "N"), tau.conj().T)])

    def apply(term, state):
        for s, op in term:
            state = _apply_site(state, op, s)
        return state

    # Gauss-law configurations: outgoing flux fixed at every vertex
    grids = np.indices((3,) * n).reshape(n, -1)
    flux_ok = np.ones(grids.shape[1], bool)
    for y in range(Ly):
        for x in range(Lx):
            f = grids[link(x, y, "E")] + grids[link(x, y, "N")] - grids[link(x - 1, y, "E")] - grids[link(x, y - 1, "N")]
            flux_ok &= (f % 3) == flux
    psi = flux_ok.astype(complex).reshape((3,) * n)
    psi /= np.linalg.norm(psi)
    charge = OMEGA ** ((-flux) % 3)
    star_ok = [np.allclose(apply(t, psi), charge * psi, atol=atol) for t in stars]
    plaq_ok = [np.allclose(apply(t, psi), psi, atol=atol) for t in plaqs]
    # commutation on a random state
    rng = np.random.default_rng(0)
    r = rng.normal(size=(3,) * n) + 1j * rng.normal(size=(3,) * n)
    commute = all(np.allclose(apply(a, apply(b, r)), apply(b, apply(a, r)), atol=1e-10) for a in stars for b in plaqs)
    clock = (np.allclose(sigma @ tau, OMEGA * tau @ sigma, atol=atol)
             and np.allclose(np.linalg.matrix_power(sigma, 3), np.eye(3), atol=atol)
             and np.allclose(np.linalg.matrix_power(tau, 3), np.eye(3), atol=atol))
    energy = 0.0
    for t in stars:
        energy -= 2 * np.real(np.vdot(psi, apply(t, psi)) * np.conj(charge))
    for t in plaqs:
        energy -= 2 * np.real(np.vdot(psi, apply(t, psi)))
    return psi, StabilizerReport(star_ok, plaq_ok, commute, clock, float(energy))


def gauss_eigenvalue(outflux):
    """Eigenvalue of ``A_v`` on a basis state with the given outgoing flux."""
    return OMEGA ** ((-outflux) % 3)


# ---------------------------------------------------------------------------
# 't Hooft loop


def _enclosed_vertices(cluster: Cluster, loop):
    """Vertices inside a closed dual loop given as unwrapped plaquette coordinates."""
    pts = [tuple(p) for p in loop]
    if len(pts) < 5 or pts[0] != pts[-1]:
        raise ValueError("'t Hooft loop must be a closed dual path (first == last plaquette)")
    for (a, b), (c, d) in zip(pts, pts[1:]):
        if abs(a - c) + abs(b - d) != 1:
            raise ValueError("consecutive loop plaquettes must be adjacent")
    if len(set(pts[:-1])) != len(pts) - 1:
        raise ValueError("'t Hooft loop must not self-intersect")
    poly = [(a + 0.5, b + 0.5) for a, b in pts]
    xs = [p[0] for p in poly]
    ys = [p[1] for p in poly]
    inside = []
    for x in range(math.floor(min(xs)), math.ceil(max(xs)) + 1):
        for y in range(math.floor(min(ys)), math.ceil(max(ys)) + 1):
            # even-odd ray casting along +x
            c = False
            for (x1, y1), (x2, y2) in zip(poly, poly[1:]):
                if (y1 > y) != (y2 > y):
                    xc = x1 + (y - y1) * (x2 - x1) / (y2 - y1)
                    if xc > x:
                        c = not c
            if c:
                inside.append((x, y))
    ids = [cluster.vertex(x, y) for x, y in inside]
    if len(set(ids)) != len(ids):
        raise ValueError("loop encloses a region that wraps around the torus")
    return set(ids)


def thooft_loop(psi, basis: ClusterBasis, loop):
    """Expectation of the diagonal 't Hooft loop ``omega^(N_v + n_q - n_qbar)``.

    Each enclosed vertex contributes ``omega^(-f)`` with ``f`` its outgoing
    arrow flux: 2 for a trimer centre, -1 for a trimer end and 0 for a
    monomer, i.e. ``omega`` for every covered vertex and 1 for a monomer.
    """
    enc = _enclosed_vertices(basis.cluster, loop)
    expo = np.zeros(basis.cluster.n_variables, np.int64)
    for j, (c, e1, e2) in enumerate(basis.cluster.var_vertices):
        f = 2 * (c in enc) - (e1 in enc) - (e2 in enc)
        expo[j] = (-f) % 3
    e1 = basis.masked_counts(np.flatnonzero(expo == 1))
    e2 = basis.masked_counts(np.flatnonzero(expo == 2))
    phase = OMEGA ** ((e1 + 2 * e2) % 3)
    return complex(np.sum(np.abs(psi) ** 2 * phase))
