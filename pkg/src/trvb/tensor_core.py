"""Dense Z3-charged tensors and the eigensolver shared by all models.

Every virtual basis symbol carries a Z3 charge in {0, +1, -1}.  A leg is
either ``"in"`` or ``"out"``; the signed charge of an entry is the sum of
the charges on in-legs minus the sum on out-legs, and a tensor may only be
nonzero where that signed sum equals its ``total_charge`` (mod 3).

Leg dimensions in this package never exceed 25, so the block structure is
enforced by validation on dense arrays rather than by block-sparse storage.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import scipy.sparse.linalg as spla

OMEGA = np.exp(2j * np.pi / 3)

# clock operators in the basis (0, +1, -1)
SIGMA = np.diag([1.0, OMEGA, OMEGA.conjugate()])
TAU = np.array([[0, 0, 1], [1, 0, 0], [0, 1, 0]], dtype=complex)
# swaps the +1 and -1 symbols
PERM_PM = np.array([[1, 0, 0], [0, 0, 1], [0, 1, 0]], dtype=float)

Z3_BASIS = (0, 1, -1)


class ChargeError(ValueError):
    """Raised when legs or entries violate the Z3 charge rules."""


class ConvergenceError(RuntimeError):
    """Raised when an iterative solver fails; carries the best residual."""

    def __init__(self, message, residual=np.inf):
        super().__init__(message)
        self.residual = residual


def _mod3(x):
    return int(x) % 3


@dataclass(frozen=True)
class Leg:
    dim: int
    orientation: str = "in"
    charges: tuple = Z3_BASIS

    def __post_init__(self):
        if self.orientation not in ("in", "out"):
            raise ChargeError(f"orientation must be 'in' or 'out', got {self.orientation!r}")
        if len(self.charges) != self.dim:
            raise ChargeError(f"leg of dim {self.dim} has {len(self.charges)} charge labels")
        object.__setattr__(self, "charges", tuple(_mod3(c) for c in self.charges))

    @property
    def sign(self):
        return 1 if self.orientation == "in" else -1

    def flipped(self):
        return Leg(self.dim, "out" if self.orientation == "in" else "in", self.charges)

    def dual(self):
        """Same orientation, negated charges (the leg of a complex-conjugated layer)."""
        return Leg(self.dim, self.orientation, tuple(-c for c in self.charges))


def z3_legs(orientations):
    return [Leg(3, o, Z3_BASIS) for o in orientations]


class ChargedTensor:
    """Immutable dense tensor with Z3-charged legs.

    Parameters
    ----------
    data : array_like
        Entries; shape must match the leg dimensions.
    legs : sequence of Leg
    total_charge : int
        Signed charge carried by every nonzero entry, mod 3.
    check : bool
        Validate the charge rule on construction (exact zero test).
    """

    __slots__ = ("_data", "legs", "total_charge")

    def __init__(self, data, legs: Sequence[Leg], total_charge=0, check=True, tol=0.0):
        arr = np.array(data, dtype=complex)
        legs = tuple(legs)
        if arr.ndim != len(legs) or any(arr.shape[i] != legs[i].dim for i in range(len(legs))):
            raise ChargeError(f"data shape {arr.shape} does not match legs {[l.dim for l in legs]}")
        arr.setflags(write=False)
        self._data = arr
        self.legs = legs
        self.total_charge = _mod3(total_charge)
        if check:
            bad = self.charge_violation()
            if bad > tol:
                raise ChargeError(
                    f"entry of magnitude {bad:.3e} violates total charge {self.total_charge}"
                )

    @property
    def data(self):
        return self._data

    @property
    def shape(self):
        return self._data.shape

    @property
    def rank(self):
        return len(self.legs)

    def charge_map(self):
        """Signed charge (mod 3) of every multi-index, as an integer array."""
        q = np.zeros(self.shape, dtype=np.int64)
        for i, leg in enumerate(self.legs):
            view = [1] * self.rank
            view[i] = leg.dim
            q = q + leg.sign * np.asarray(leg.charges, dtype=np.int64).reshape(view)
        return np.mod(q, 3)

    def charge_violation(self):
        """Largest |entry| sitting on a multi-index of the wrong charge."""
        if self._data.size == 0:
            return 0.0
        mask = self.charge_map() != self.total_charge
        return float(np.abs(self._data[mask]).max()) if mask.any() else 0.0

    def nonzero_entries(self, tol=0.0):
        idx = np.argwhere(np.abs(self._data) > tol)
        return [(tuple(int(i) for i in row), self._data[tuple(row)]) for row in idx]

    def conj(self):
        """Complex conjugate; charges are negated so the result is still consistent."""
        return ChargedTensor(self._data.conj(), [l.dual() for l in self.legs], -self.total_charge, check=False)

    def transpose(self, perm):
        perm = list(perm)
        return ChargedTensor(
            self._data.transpose(perm), [self.legs[p] for p in perm], self.total_charge, check=False
        )

    def with_data(self, data, check=True, tol=1e-12):
        return ChargedTensor(data, self.legs, self.total_charge, check=check, tol=tol)

    def real_data(self, tol=1e-12):
        """Entries as a real array; raises if an imaginary part exceeds ``tol``."""
        if np.abs(self._data.imag).max(initial=0.0) > tol:
            raise ValueError("tensor has non-negligible imaginary part")
        return self._data.real.copy()

    def allclose(self, other, atol=1e-12):
        return self.shape == other.shape and np.allclose(self._data, other.data, atol=atol, rtol=0)

    def __repr__(self):
        legs = ",".join(f"{l.dim}{l.orientation[0]}" for l in self.legs)
        return f"ChargedTensor(legs=[{legs}], total_charge={self.total_charge})"


def contract(a: ChargedTensor, b: ChargedTensor, pairs) -> ChargedTensor:
    """Contract leg pairs ``(i, j)`` of ``a`` and ``b``.

    Each pair must join an out-leg with an in-leg of the same dimension and
    identical charge list.  Remaining legs of ``a`` come first, then ``b``.
    """
    pairs = [(int(i), int(j)) for i, j in pairs]
    for i, j in pairs:
        la, lb = a.legs[i], b.legs[j]
        if la.dim != lb.dim:
            raise ChargeError(f"leg a[{i}] has dim {la.dim} but b[{j}] has dim {lb.dim}")
        if la.charges != lb.charges:
            raise ChargeError(f"leg a[{i}] charges {la.charges} differ from b[{j}] charges {lb.charges}")
        if la.orientation == lb.orientation:
            raise ChargeError(f"legs a[{i}] and b[{j}] are both {la.orientation!r}")
    ia = [p[0] for p in pairs]
    ib = [p[1] for p in pairs]
    data = np.tensordot(a.data, b.data, axes=(ia, ib))
    legs = [l for k, l in enumerate(a.legs) if k not in ia] + [l for k, l in enumerate(b.legs) if k not in ib]
    return ChargedTensor(data, legs, a.total_charge + b.total_charge, check=True, tol=1e-10)


def trace_legs(t: ChargedTensor, pairs) -> ChargedTensor:
    """Self-contract leg pairs of one tensor (used to close periodic bonds)."""
    data = np.array(t.data)
    legs = list(t.legs)
    alive = list(range(t.rank))
    for i, j in pairs:
        li, lj = t.legs[i], t.legs[j]
        if li.dim != lj.dim or li.charges != lj.charges or li.orientation == lj.orientation:
            raise ChargeError(f"cannot trace legs {i} and {j}")
        ai, aj = alive.index(i), alive.index(j)
        data = np.trace(data, axis1=ai, axis2=aj)
        alive = [k for k in alive if k not in (i, j)]
    return ChargedTensor(data, [legs[k] for k in alive], t.total_charge, check=True, tol=1e-10)


@dataclass(frozen=True)
class FusionInfo:
    """What ``fuse_legs`` needs to undo itself."""

    order: tuple
    groups: tuple
    legs: tuple


def fuse_legs(t: ChargedTensor, groups):
    """Fuse each group of legs into one leg (row-major order within a group).

    ``groups`` is a partition of ``range(t.rank)``; the fused legs appear in
    the order of ``groups``.  Returns ``(fused_tensor, info)``.
    """
    groups = [tuple(g) for g in groups]
    flat = [i for g in groups for i in g]
    if sorted(flat) != list(range(t.rank)):
        raise ValueError(f"groups {groups} are not a partition of {t.rank} legs")
    new_legs = []
    for g in groups:
        orient = {t.legs[i].orientation for i in g}
        if len(orient) != 1:
            raise ChargeError(f"group {g} mixes leg orientations")
        charges = np.zeros(1, dtype=np.int64)
        dim = 1
        for i in g:
            charges = (charges[:, None] + np.asarray(t.legs[i].charges)[None, :]).ravel()
            dim *= t.legs[i].dim
        new_legs.append(Leg(dim, orient.pop(), tuple(charges)))
    data = t.data.transpose(flat).reshape([l.dim for l in new_legs])
    info = FusionInfo(tuple(flat), tuple(groups), t.legs)
    return ChargedTensor(data, new_legs, t.total_charge, check=False), info


def unfuse_legs(t: ChargedTensor, info: FusionInfo) -> ChargedTensor:
    legs_in_order = [info.legs[i] for i in info.order]
    data = t.data.reshape([l.dim for l in legs_in_order])
    inverse = np.argsort(info.order)
    return ChargedTensor(data.transpose(inverse), info.legs, t.total_charge, check=False)


def apply_leg_symmetry(t: ChargedTensor, op) -> ChargedTensor:
    """Apply ``op`` to every in-leg and ``op^dagger`` to every out-leg.

    With ``op = SIGMA`` a tensor of total charge ``q`` picks up ``omega**q``.
    """
    op = np.asarray(op, dtype=complex)
    data = np.array(t.data)
    for i, leg in enumerate(t.legs):
        if leg.dim != 3:
            raise ChargeError(f"leg {i} has dimension {leg.dim}, symmetry needs 3")
        m = op if leg.orientation == "in" else op.conj().T
        data = np.moveaxis(np.tensordot(m, data, axes=([1], [i])), 0, i)
    return ChargedTensor(data, t.legs, t.total_charge, check=False)


@dataclass
class SectorSpectrum:
    """Eigenvalues tagged by Z3 sector ``Q`` and in-sector index ``n``."""

    entries: list = field(default_factory=list)

    @classmethod
    def from_values(cls, values, Q=0):
        return cls([(Q % 3, n, complex(v)) for n, v in enumerate(_order(values))])

    def merged(self, other):
        return SectorSpectrum(sorted_entries(self.entries + other.entries))

    def sector(self, Q):
        vals = [lam for q, _, lam in self.entries if q == Q % 3]
        return np.array(_order(vals), dtype=complex)

    def values(self):
        return np.array([lam for _, _, lam in sorted_entries(self.entries)], dtype=complex)

    def __len__(self):
        return len(self.entries)


def _order(values):
    vals = list(values)
    return sorted(vals, key=lambda v: (-round(abs(v), 12), round(float(np.angle(v)) % (2 * np.pi), 12)))


def sorted_entries(entries):
    """Descending |lambda|, then ascending Q, then ascending phase."""
    return sorted(
        entries,
        key=lambda e: (-round(abs(e[2]), 12), e[0], round(float(np.angle(e[2])) % (2 * np.pi), 12)),
    )


def _dense_from_matvec(matvec, dim, dtype=complex):
    eye = np.eye(dim, dtype=dtype)
    return np.column_stack([matvec(eye[:, i]) for i in range(dim)])


def leading_eigs(
    matvec: Callable,
    dim: int,
    k: int,
    sector_projector: Callable | None = None,
    Q: int = 0,
    *,
    tol: float = 1e-10,
    ncv: int | None = None,
    max_restarts: int = 50,
    return_vectors: bool = False,
    dense_below: int = 64,
    seed: int = 0,
    dtype=complex,
):
    """Leading ``k`` eigenpairs (by magnitude) of an implicit linear map.

    Uses implicitly restarted Arnoldi (ARPACK) with Krylov dimension
    ``max(30, 4k)`` and verifies every returned pair against
    ``||A v - lambda v|| <= tol * max(|lambda|, |lambda_0|)``.  Maps of
    dimension below ``dense_below`` are diagonalized densely.

    Returns a SectorSpectrum labelled with ``Q``, and the eigenvectors as
    columns if ``return_vectors``.
    """
    if not 1 <= k <= dim:
        raise ValueError(f"need 1 <= k <= dim, got k={k}, dim={dim}")
    if sector_projector is not None:
        base = matvec

        def matvec(v):
            return sector_projector(base(sector_projector(v)))

    if dim <= max(dense_below, k + 2):
        mat = _dense_from_matvec(matvec, dim, dtype)
        w, v = np.linalg.eig(mat)
        if sector_projector is not None:
            # discard eigenvectors living outside the projected subspace
            keep = [i for i in range(len(w)) if np.linalg.norm(sector_projector(v[:, i])) > 0.5]
            w, v = w[keep], v[:, keep]
        idx = sorted(range(len(w)), key=lambda i: (-round(abs(w[i]), 12), round(float(np.angle(w[i])) % (2 * np.pi), 12)))[:k]
        w, v = w[idx], v[:, idx]
    else:
        rng = np.random.default_rng(seed)
        v0 = rng.standard_normal(dim) + (1j * rng.standard_normal(dim) if np.iscomplexobj(np.zeros(1, dtype)) else 0)
        if sector_projector is not None:
            v0 = sector_projector(v0)
        op = spla.LinearOperator((dim, dim), matvec=matvec, dtype=dtype)
        m = ncv or max(30, 4 * k)
        m = min(m, dim - 1)
        try:
            w, v = spla.eigs(op, k=k, which="LM", v0=v0, ncv=m, tol=tol * 1e-3, maxiter=max_restarts * m)
        except spla.ArpackNoConvergence as err:
            raise ConvergenceError(f"Arnoldi did not converge after {max_restarts} restarts") from err
        order = sorted(range(len(w)), key=lambda i: (-round(abs(w[i]), 12), round(float(np.angle(w[i])) % (2 * np.pi), 12)))
        w, v = w[order], v[:, order]
    scale = max(abs(w[0]), np.finfo(float).tiny)
    worst = 0.0
    for i in range(len(w)):
        r = np.linalg.norm(matvec(v[:, i]) - w[i] * v[:, i]) / (np.linalg.norm(v[:, i]) * max(abs(w[i]), scale))
        worst = max(worst, r)
    if worst > tol:
        raise ConvergenceError(f"eigenpair residual {worst:.2e} exceeds {tol:.1e}", worst)
    spec = SectorSpectrum([(Q % 3, n, complex(x)) for n, x in enumerate(w)])
    if return_vectors:
        return spec, v
    return spec
