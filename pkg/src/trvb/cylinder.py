"""Finite-circumference transfer-operator diagnostics.

The row transfer operator of a rank-4 bulk tensor ``T[l, u, r, d]`` on a
periodic ring of ``L`` tensors maps a configuration of the ``L`` down legs
to the ``L`` up legs::

    (M v)[u_1..u_L] = sum_{d, h} prod_i T[h_{i-1}, u_i, h_i, d_i] v[d_1..d_L]

with ``h_0 = h_L``.  It is applied implicitly, site by site, and never stored.
Its leading eigenvalues give correlation lengths along the cylinder, and the
product of left and right leading eigenvectors gives the diagonal boundary
density used for half-cylinder entropies.

The ring charge ``Q = sum_i charge(d_i) mod 3`` changes by ``-L * total_charge``
under ``M``; sector-resolved spectra therefore require that product to vanish
mod 3.  Otherwise ``M^3`` is diagonalised in ``Q = 0`` and the principal cube
roots are reported as an unresolved spectrum.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numba
import numpy as np

from .tensor_core import ChargedTensor, ConvergenceError, SectorSpectrum, leading_eigs

MAX_RING_DIM = 2**28
LN3 = float(np.log(3.0))


class MemoryBudgetError(MemoryError):
    """The requested ring exceeds the configured memory ceiling."""

    def __init__(self, message, estimate):
        super().__init__(message)
        self.estimate = estimate


@numba.njit(cache=True)
def _first_step(x, nz_idx, nz_val, out):
    # x: (dd, R); out: (R, D, du, D) with the first left bond kept open
    R = x.shape[1]
    for k in range(nz_idx.shape[0]):
        l, u, r, d = nz_idx[k, 0], nz_idx[k, 1], nz_idx[k, 2], nz_idx[k, 3]
        val = nz_val[k]
        for i in range(R):
            out[i, l, u, r] += val * x[d, i]


@numba.njit(cache=True)
def _step(x, nz_idx, nz_val, out):
    # x: (dd, R, D) -> out: (R, du, D)
    R = x.shape[1]
    for k in range(nz_idx.shape[0]):
        l, u, r, d = nz_idx[k, 0], nz_idx[k, 1], nz_idx[k, 2], nz_idx[k, 3]
        val = nz_val[k]
        for i in range(R):
            out[i, u, r] += val * x[d, i, l]


def _nonzeros(data):
    idx = np.argwhere(data != 0).astype(np.int64)
    return idx, np.ascontiguousarray(data[tuple(idx.T)])


def ring_apply(data, v, L, nonzeros=None):
    """Apply the periodic row transfer operator of ``data`` to ``v``.

    Works on the nonzero entries of ``data`` only; every intermediate keeps
    the next down leg first and the open horizontal bond last, so steps are
    plain reshapes.

    Parameters
    ----------
    data : ndarray, shape (D, du, D, dd)
        Bulk tensor in ``(left, up, right, down)`` order.
    v : ndarray, shape (dd**L,) or (dd**L, B)
        Ring vector(s) over the down legs.
    L : int
        Number of tensors in the ring.
    nonzeros : tuple, optional
        Precomputed ``(indices, values)`` of ``data``.

    Returns
    -------
    ndarray
        ``M v`` over the up legs, with the same batch layout as ``v``.
    """
    D, du, D2, dd = data.shape
    if D != D2:
        raise ValueError("left and right legs must have equal dimension")
    idx, val = nonzeros if nonzeros is not None else _nonzeros(data)
    B = v.shape[1] if v.ndim == 2 else 1
    dtype = np.result_type(v.dtype, val.dtype)
    val = val.astype(dtype, copy=False)
    x = np.ascontiguousarray(v, dtype=dtype).reshape(dd, -1)
    # layout after the first step: (d_2..d_L, B, l_0, u_1, h_1)
    y = np.zeros((x.shape[1], D, du, D), dtype=dtype)
    _first_step(x, idx, val, y)
    for _ in range(1, L):
        x = y.reshape(dd, -1, D)
        y = np.zeros((x.shape[1], du, D), dtype=dtype)
        _step(x, idx, val, y)
    x = y
    # layout: (B, l_0, u_1..u_L, h_L)
    x = x.reshape(B, D, du**L, D)
    out = np.einsum("bkik->ib", x)
    return out if v.ndim == 2 else out[:, 0]


def ring_charges(charges, L):
    """Ring sector label ``sum_i charge(s_i) mod 3`` for every configuration."""
    c = np.asarray(charges, dtype=np.int64) % 3
    q = np.zeros(1, dtype=np.int64)
    for _ in range(L):
        q = (q[:, None] + c[None, :]).reshape(-1) % 3
    return q


@dataclass
class TransferOperator:
    """Row transfer operator of a uniform bulk tensor on a circumference-``L`` ring.

    Parameters
    ----------
    bulk : ChargedTensor
        Rank-4 tensor in ``(left, up, right, down)`` order.  Up and down legs
        must have equal dimension.
    L : int
        Number of tensors in the ring.
    max_dim : int
        Refuse rings whose dimension exceeds this ceiling.
    """

    bulk: ChargedTensor
    L: int
    max_dim: int = MAX_RING_DIM

    def __post_init__(self):
        if self.bulk.rank != 4:
            raise ValueError("transfer operator needs a rank-4 bulk tensor")
        if self.L < 1:
            raise ValueError("circumference must be positive")
        if self.bulk.shape[1] != self.bulk.shape[3]:
            raise ValueError("up and down legs must have equal dimension")
        if self.dim > self.max_dim:
            raise MemoryBudgetError(
                f"ring dimension {self.d}^{self.L} = {self.dim} exceeds the ceiling {self.max_dim}", self.dim
            )
        data = self.bulk.data
        self._data = data.real.copy() if not np.iscomplexobj(data) or np.abs(data.imag).max() == 0 else data
        self._charges = None
        self._nz = _nonzeros(self._data)
        self._nz_t = _nonzeros(self._data.transpose(0, 3, 2, 1))

    @property
    def d(self):
        return self.bulk.shape[3]

    @property
    def dim(self):
        return self.d**self.L

    @property
    def dtype(self):
        return self._data.dtype

    @property
    def resolved(self):
        """Whether the ring charge is conserved by a single application."""
        return (self.L * self.bulk.total_charge) % 3 == 0

    @property
    def charges(self):
        if self._charges is None:
            self._charges = ring_charges(self.bulk.legs[3].charges, self.L)
        return self._charges

    def matvec(self, v):
        return ring_apply(self._data, np.asarray(v), self.L, self._nz)

    def rmatvec(self, v):
        """Transpose action ``M^T v`` (the downward transfer operator)."""
        return ring_apply(self._data.transpose(0, 3, 2, 1), np.asarray(v), self.L, self._nz_t)

    def dense(self):
        """Explicit matrix, for small rings only."""
        if self.dim > 4096:
            raise MemoryBudgetError("dense transfer matrix requested for a large ring", self.dim**2)
        return self.matvec(np.eye(self.dim, dtype=self.dtype))

    def sector_indices(self, Q):
        return np.flatnonzero(self.charges == Q % 3)

    def sector_map(self, Q, power=1, transpose=False):
        """Compressed matvec of ``M**power`` (or its transpose) on sector ``Q``."""
        idx = self.sector_indices(Q)
        apply = self.rmatvec if transpose else self.matvec

        def mv(x):
            full = np.zeros(self.dim, dtype=np.result_type(x, self.dtype))
            full[idx] = x
            for _ in range(power):
                full = apply(full)
            return full[idx]

        return mv, idx

    def symmetry_apply(self, v, op):
        """Apply ``op`` to every leg of a ring vector."""
        x = np.asarray(v).reshape((self.d,) * self.L)
        for ax in range(self.L):
            x = np.moveaxis(np.tensordot(op, x, axes=([1], [ax])), 0, ax)
        return x.reshape(-1)


def _sector_eigs(op: TransferOperator, Q, k, transpose=False, return_vectors=False, ncv=None, tol=1e-10):
    power = 1 if op.resolved else 3
    mv, idx = op.sector_map(Q, power=power, transpose=transpose)
    k = min(k, len(idx))
    dtype = complex if np.iscomplexobj(op._data) else float
    out = leading_eigs(mv, len(idx), k, Q=Q, ncv=ncv, tol=tol, return_vectors=return_vectors, dtype=dtype)
    if power == 3:
        spec = out[0] if return_vectors else out
        spec = SectorSpectrum([(q, n, complex(lam) ** (1.0 / 3.0)) for q, n, lam in spec.entries])
        out = (spec, out[1]) if return_vectors else spec
    return out, idx


def transfer_spectrum(op: TransferOperator, k_per_sector=4, sectors=(0, 1, 2), ncv=None):
    """Leading eigenvalues of the transfer operator in each Z3 sector.

    Parameters
    ----------
    op : TransferOperator
    k_per_sector : int
        Eigenvalues requested per sector.
    sectors : iterable of int
        Sectors to compute.  For rings where the charge is not conserved only
        ``Q = 0`` of ``M^3`` is meaningful; the returned spectrum then carries
        ``resolved = False`` and lists principal cube roots under ``Q = 0``.

    Returns
    -------
    SectorSpectrum
    """
    if not op.resolved:
        spec, _ = _sector_eigs(op, 0, k_per_sector, ncv=ncv)
        spec.resolved = False
        return spec
    spec = SectorSpectrum()
    for Q in sectors:
        s, _ = _sector_eigs(op, Q, k_per_sector, ncv=ncv)
        spec = spec.merged(s)
    spec.resolved = True
    return spec


def xi_from_ratio(lam0, lam1, tol=1e-12):
    """``1 / ln|lam0 / lam1|`` with ``inf`` for degenerate and ``0`` for vanishing ``lam1``."""
    a, b = abs(lam0), abs(lam1)
    if b <= tol * a:
        return 0.0
    if abs(a - b) <= tol * a:
        return float("inf")
    return float(1.0 / np.log(a / b))


def correlation_length(op_or_spectrum, tol=1e-12, distinct=False, rtol=1e-8):
    """Correlation length from the two largest ``Q = 0`` eigenvalues.

    ``xi = 1 / ln|lambda_0 / lambda_1|`` bounds the decay of every correlation
    function along the cylinder axis.  Degenerate leading values return
    ``inf``; an exactly vanishing subleading value returns ``0``.

    With ``distinct=True``, eigenvalues whose magnitude equals ``|lambda_0|``
    (within ``rtol``) are treated as one multiplet and ``lambda_1`` is the
    first smaller magnitude.  This is the relevant decay on lattices whose
    transfer operator has a sublattice period, where ``lambda`` and
    ``-lambda`` (or ``omega lambda``) occur together exactly.
    """
    spec = op_or_spectrum
    if isinstance(spec, TransferOperator):
        spec = transfer_spectrum(spec, k_per_sector=8 if distinct else 2, sectors=(0,))
    lam = spec.sector(0)
    if len(lam) < 2:
        raise ValueError("need at least two Q = 0 eigenvalues")
    if distinct:
        top = abs(lam[0])
        below = [x for x in lam[1:] if abs(x) < top * (1 - rtol)]
        if not below:
            raise ValueError("no Q = 0 eigenvalue below the leading multiplet; request more eigenvalues")
        return xi_from_ratio(lam[0], below[0], tol)
    return xi_from_ratio(lam[0], lam[1], tol)


def charged_gaps(spec: SectorSpectrum):
    """Log-gaps ``ln|lambda^0_0 / lambda^Q_n|`` relative to the neutral leading value.

    Returns ``(neutral_gap, charged_gap)`` where the neutral gap uses the
    second ``Q = 0`` value and the charged gap the leading ``Q = +-1`` value.
    """
    l0 = spec.sector(0)
    ch = [abs(x) for q in (1, 2) for x in spec.sector(q)[:1]]
    neutral = float(np.log(abs(l0[0]) / abs(l0[1]))) if len(l0) > 1 and abs(l0[1]) > 0 else float("inf")
    charged = float(np.log(abs(l0[0]) / max(ch))) if ch and max(ch) > 0 else float("inf")
    return neutral, charged


def _phase_fix(v):
    v = np.asarray(v)
    i = int(np.argmax(np.abs(v)))
    v = v * (abs(v[i]) / v[i])
    return v.real if np.allclose(v.imag, 0.0, atol=1e-10 * abs(v[i])) else v


def boundary_distribution(op: TransferOperator, Q=0, ncv=None, use_reflection=None, neg_tol=1e-12):
    """Diagonal boundary density ``p ∝ v_L ⊙ v_R`` over ring configurations.

    Parameters
    ----------
    op : TransferOperator
    Q : int or None
        Restrict both Perron vectors to sector ``Q``; ``None`` uses the global
        leading vector (ill-defined when it is degenerate).
    use_reflection : bool or None
        Obtain the left vector from the right one through the vertical
        reflection with the +/- symbol swap.  ``None`` decides automatically.
    neg_tol : float
        Relative tolerance for negative entries after phase fixing.

    Returns
    -------
    ndarray
        Normalised probabilities over the full ring space.
    """
    from .tensors import permute_pm, reflect_vertical

    if Q is None:
        dtype = complex if np.iscomplexobj(op._data) else float
        _, vr = leading_eigs(op.matvec, op.dim, 1, return_vectors=True, ncv=ncv, dtype=dtype)
        vr, idx = vr[:, 0], np.arange(op.dim)
    else:
        (_, vr), idx = _sector_eigs(op, Q, 1, return_vectors=True, ncv=ncv)
        vr = vr[:, 0]
    if use_reflection is None:
        use_reflection = op.d == 3 and np.allclose(reflect_vertical(op.bulk).data, op.bulk.data, atol=1e-12)
    full_r = np.zeros(op.dim, dtype=vr.dtype)
    full_r[idx] = vr
    if use_reflection:
        full_l = permute_pm(full_r, op.L)
    else:
        if Q is None:
            dtype = complex if np.iscomplexobj(op._data) else float
            _, vl = leading_eigs(op.rmatvec, op.dim, 1, return_vectors=True, ncv=ncv, dtype=dtype)
            full_l = vl[:, 0]
        else:
            (_, vl), idxl = _sector_eigs(op, Q, 1, transpose=True, return_vectors=True, ncv=ncv)
            full_l = np.zeros(op.dim, dtype=vl.dtype)
            full_l[idxl] = vl[:, 0]
    p = _phase_fix(full_l) * _phase_fix(full_r)
    if np.iscomplexobj(p):
        if np.abs(p.imag).max() > 1e-8 * np.abs(p).max():
            raise ConvergenceError("boundary density is not real: non-Perron leading vector")
        p = p.real
    p = p / p.sum()
    if p.min() < -max(neg_tol, 1e-9 * p.max()):
        raise ConvergenceError(f"negative boundary weight {p.min():.3e}: non-Perron leading vector")
    p = np.clip(p, 0.0, None)
    return p / p.sum()


def shannon(p):
    p = p[p > 0]
    return float(-np.sum(p * np.log(p)))


def half_cylinder_entropy(op: TransferOperator, Q=0, ncv=None, use_reflection=None):
    """Entropy in nats of the diagonal half-cylinder density."""
    return shannon(boundary_distribution(op, Q=Q, ncv=ncv, use_reflection=use_reflection))


@dataclass
class EntropyScan:
    """Half-cylinder entropies ``S(L)`` in nats and their area-law fit."""

    points: list = field(default_factory=list)
    fit: tuple | None = None
    residuals: np.ndarray | None = None

    def add(self, L, S):
        self.points.append((int(L), float(S)))
        return self

    def as_dict(self):
        return dict(sorted(self.points))


def tee_fit(scan: EntropyScan, method="subtraction"):
    """Area law fit ``S_L = alpha L - gamma``.

    Parameters
    ----------
    scan : EntropyScan
    method : {"subtraction", "linear-fit"}
        ``subtraction`` returns ``gamma = S_L - 2 S_{L/2}`` for the largest
        ``L`` whose half is also present (``alpha`` from the same pair);
        ``linear-fit`` is a least-squares line through all points.

    Returns
    -------
    tuple of float
        ``(alpha, gamma)``; residuals are stored on ``scan``.
    """
    pts = scan.as_dict()
    if method == "subtraction":
        pairs = [L for L in pts if L % 2 == 0 and L // 2 in pts]
        if not pairs:
            raise ValueError("no admissible (L, L/2) pair for the subtraction estimate")
        L = max(pairs)
        gamma = pts[L] - 2 * pts[L // 2]
        alpha = (pts[L] - pts[L // 2]) / (L - L // 2)
        scan.residuals = np.zeros(0)
    elif method == "linear-fit":
        if len(pts) < 3:
            raise ValueError("linear fit needs at least three points")
        Ls = np.array(sorted(pts), dtype=float)
        S = np.array([pts[L] for L in sorted(pts)])
        A = np.column_stack([Ls, -np.ones_like(Ls)])
        (alpha, gamma), *_ = np.linalg.lstsq(A, S, rcond=None)
        scan.residuals = S - A @ np.array([alpha, gamma])
    else:
        raise ValueError(f"unknown method {method!r}")
    scan.fit = (float(alpha), float(gamma))
    return scan.fit


def entropy_scan(bulk: ChargedTensor, Ls, Q=0, ncv=None):
    """Half-cylinder entropies for each circumference in ``Ls``."""
    scan = EntropyScan()
    for L in Ls:
        scan.add(L, half_cylinder_entropy(TransferOperator(bulk, L), Q=Q, ncv=ncv))
    return scan


def xi_scan(bulk: ChargedTensor, Ls, ncv=None):
    """Correlation length for each circumference in ``Ls``."""
    return {L: correlation_length(TransferOperator(bulk, L)) for L in Ls}


def torus_contract(bulk: ChargedTensor, Lx, Ly):
    """Exact scalar contraction of an ``Lx`` by ``Ly`` periodic tiling.

    Computes ``Tr M^Ly`` for the width-``Lx`` row transfer operator by
    building ``M`` column block by column block.
    """
    op = TransferOperator(bulk, Lx)
    n = op.dim
    if n > 8192:
        raise MemoryBudgetError(f"torus row space {n} too large for exact contraction", n * n)
    M = np.empty((n, n), dtype=op.dtype)
    step = max(1, 2**22 // (n * bulk.shape[0] ** 2 * bulk.shape[1]))
    for s in range(0, n, step):
        e = np.zeros((n, min(step, n - s)), dtype=op.dtype)
        e[np.arange(s, s + e.shape[1]), np.arange(e.shape[1])] = 1
        M[:, s : s + e.shape[1]] = op.matvec(e)
    P = np.linalg.matrix_power(M, Ly)
    return complex(np.trace(P)) if np.iscomplexobj(P) else float(np.trace(P))


def fit_exponential_decay(Ns, gaps):
    """Least-squares fit ``ln gap = a + b N``; returns ``(a, b, r2)``."""
    N = np.asarray(Ns, dtype=float)
    y = np.log(np.asarray(gaps, dtype=float))
    b, a = np.polyfit(N, y, 1)
    return float(a), float(b), r_squared(N, y, a + b * N)


def fit_linear(x, y):
    """Least-squares line ``y = a + b x``; returns ``(a, b, r2)``."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    b, a = np.polyfit(x, y, 1)
    return float(a), float(b), r_squared(x, y, a + b * x)


def r_squared(x, y, yhat):
    ss_res = float(np.sum((y - yhat) ** 2))
    ss_tot = float(np.sum((y - np.mean(y)) ** 2))
    return 1.0 - ss_res / ss_tot if ss_tot > 0 else 1.0
