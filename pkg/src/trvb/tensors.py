"""Constructors for the trimer tensor networks.

Rank-4 square-lattice tensors use leg order ``(left, up, right, down)``;
left and down legs are ``"in"``, right and up are ``"out"``.  A symbol
``+1`` on a leg means an arrow pointing along the link direction (+x for
horizontal links, +y for vertical ones), so a neighbouring pair shares the
same symbol on the link and contraction is a plain index sum.  Every trimer
vertex has outgoing flux 2 mod 3, hence total charge 1 in the in-minus-out
convention of :mod:`trvb.tensor_core`.
"""

from __future__ import annotations

import itertools

import numpy as np

from .lattice import BENT_ARMS, OPPOSITE, ROT_CW, SIDES, STRAIGHT_ARMS
from .tensor_core import ChargedTensor, Leg, PERM_PM, Z3_BASIS, fuse_legs, z3_legs

SQUARE_ORIENT = ("in", "out", "out", "in")
SYMBOL = {0: 0, 1: 1, -1: 2}
# value of an outward-pointing arrow on each side
OUT_VALUE = {"W": -1, "N": 1, "E": 1, "S": -1}


def _check_theta(theta):
    if not 0.0 <= theta <= np.pi / 2 + 1e-15:
        raise ValueError(f"theta must lie in [0, pi/2], got {theta}")


def square_vertex_rules(theta=0.0, layer="single"):
    """``(symbols, weight, kind)`` for the 10 trimer vertex configurations."""
    _check_theta(theta)
    if layer not in ("single", "double"):
        raise ValueError(f"layer must be 'single' or 'double', got {layer!r}")
    p = 1 if layer == "single" else 2
    bent, straight = np.cos(theta) ** p, np.sin(theta) ** p
    rules = []
    for s in SIDES:
        sym = [0, 0, 0, 0]
        sym[SIDES.index(s)] = SYMBOL[-OUT_VALUE[s]]
        rules.append((tuple(sym), 1.0, "endpoint"))
    for arms in BENT_ARMS.values():
        sym = [0, 0, 0, 0]
        for a in arms:
            sym[SIDES.index(a)] = SYMBOL[OUT_VALUE[a]]
        rules.append((tuple(sym), bent, "bent"))
    for arms in STRAIGHT_ARMS.values():
        sym = [0, 0, 0, 0]
        for a in arms:
            sym[SIDES.index(a)] = SYMBOL[OUT_VALUE[a]]
        rules.append((tuple(sym), straight, "straight"))
    return rules


def _from_rules(rules, legs, total_charge):
    data = np.zeros([l.dim for l in legs], dtype=complex)
    for sym, w, *_ in rules:
        data[sym] += w
    return ChargedTensor(data, legs, total_charge)


def build_square_trvb_tensor(theta=0.0, layer="double") -> ChargedTensor:
    """Square-lattice tRVB vertex tensor.

    The single layer carries ``cos(theta)`` per bent and ``sin(theta)`` per
    straight trimer center; the double layer (the norm network) squares them.
    """
    return _from_rules(square_vertex_rules(theta, layer), z3_legs(SQUARE_ORIENT), 1)


def gauss_law_configs():
    """All 27 leg configurations of a vertex with outgoing flux 2 mod 3."""
    out = []
    for sym in itertools.product(range(3), repeat=4):
        vals = [Z3_BASIS[s] for s in sym]
        outflow = sum(OUT_VALUE[side] * v for side, v in zip(SIDES, vals))
        if outflow % 3 == 2:
            out.append(sym)
    return out


def build_toric_code_tensor() -> ChargedTensor:
    """Equal weight on every Gauss-law vertex configuration."""
    return _from_rules([(s, 1.0) for s in gauss_law_configs()], z3_legs(SQUARE_ORIENT), 1)


def forbidden_configs():
    """The 17 Gauss-law configurations that are not trimer vertices."""
    allowed = {r[0] for r in square_vertex_rules(np.pi / 4)}
    return [s for s in gauss_law_configs() if s not in allowed]


def build_interpolation_tensor(theta=0.0, alpha=1.0) -> ChargedTensor:
    """``(1 - alpha) * T_TC + alpha * T_tRVB(theta, double)``."""
    _check_theta(theta)
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must lie in [0, 1], got {alpha}")
    tc = build_toric_code_tensor().data
    tr = build_square_trvb_tensor(theta, "double").data
    return ChargedTensor((1 - alpha) * tc + alpha * tr, z3_legs(SQUARE_ORIENT), 1)


# ---------------------------------------------------------------------------
# diluted PEPS

DILUTED_CHARGES = (0, 1, -1, 1, -1)  # 0, +1, -1, removed +1, removed -1


def _diluted_vertex(theta):
    """Rank-4 virtual tensor on the 5-symbol alphabet (both species)."""
    legs = [Leg(5, o, DILUTED_CHARGES) for o in SQUARE_ORIENT]
    data = np.zeros((5,) * 4)
    for sym, w, kind in square_vertex_rules(theta, "single"):
        data[sym] += w
        # removed species: same diagram with +1 -> 3, -1 -> 4
        data[tuple(s + 2 if s else 0 for s in sym)] += w
    return ChargedTensor(data, legs, 1)


def _link_projector(z):
    """``proj[a, p]``: virtual symbol ``a`` -> physical link state ``p``.

    Physical link states are 0 (empty), 1 (arrow +1), 2 (arrow -1).  Removed
    trimer arrows leave the link empty with fugacity ``z``.
    """
    proj = np.zeros((5, 3))
    proj[0, 0] = 1.0
    proj[1, 1] = 1.0
    proj[2, 2] = 1.0
    proj[3, 0] = z
    proj[4, 0] = z
    return proj


def build_diluted_peps(theta=0.0, z=0.0):
    """Single-layer diluted PEPS tensor ``A[p_right, p_up, l, u, r, d]``.

    Each vertex owns the physical states of its right and up links.
    Bond dimension is 5.
    """
    _check_theta(theta)
    core = _diluted_vertex(theta).data.real
    proj = _link_projector(z)
    # A[pr, pu, l, u, r, d] = T[l, u, r, d] * proj[r, pr] * proj[u, pu]
    return np.einsum("lurd,rp,uq->pqlurd", core, proj, proj)


def build_diluted_peps_tensor(theta=0.0, z=0.0) -> ChargedTensor:
    """Diluted PEPS as a ChargedTensor with the two physical legs fused.

    Leg order ``(physical, left, up, right, down)``; the physical leg has
    dimension 9 and charge 0.
    """
    a = build_diluted_peps(theta, z).reshape(9, 5, 5, 5, 5)
    legs = [Leg(9, "out", (0,) * 9)] + [Leg(5, o, DILUTED_CHARGES) for o in SQUARE_ORIENT]
    return ChargedTensor(a, legs, 1)


def diluted_double_layer(theta=0.0, z=0.0, impurity=None) -> ChargedTensor:
    """Norm tensor of the diluted PEPS with ket/bra legs fused to dimension 25.

    ``impurity`` = ``"right"`` or ``"up"`` inserts the occupation indicator
    of that physical link.
    """
    a = build_diluted_peps(theta, z)
    occ = np.array([0.0, 1.0, 1.0])
    w_r = occ if impurity == "right" else np.ones(3)
    w_u = occ if impurity == "up" else np.ones(3)
    dbl = np.einsum("pqlurd,pqLURD,p,q->lLuUrRdD", a, a.conj(), w_r, w_u)
    ket = _diluted_vertex(theta)
    legs = []
    for leg in ket.legs:
        legs += [leg, leg.dual()]
    t = ChargedTensor(dbl, legs, 0, check=True, tol=1e-12)
    fused, _ = fuse_legs(t, [(0, 1), (2, 3), (4, 5), (6, 7)])
    return fused


def _rank(s, tol):
    return int(np.sum(s > tol * max(s.max(initial=0.0), 1e-300)))


def bond_reduction(tensors, tol=1e-12, labels=None):
    """Exact charge-preserving compression of the horizontal and vertical bonds.

    A bond joins the out-leg of one tensor to the in-leg of its neighbour.
    With ``Uo``/``Ui`` orthonormal bases of the out-leg and in-leg images
    (taken over every tensor in ``tensors``), the bond only needs the rank of
    ``Uo^T Ui``; an SVD of that overlap gives maps ``A`` (out side) and ``B``
    (in side) with ``A B^T`` acting as the identity on every contraction.
    Done blockwise per Z3 charge.

    Parameters
    ----------
    tensors : list of ChargedTensor
        Tensors sharing the bond basis (bulk and impurities).
    tol : float
        Relative singular-value cutoff.
    labels : sequence, optional
        Finer per-symbol block labels (e.g. ket and bra charges separately);
        the reduction never mixes symbols with different labels.

    Returns
    -------
    list
        ``[(A_h, B_h, q_h, l_h), (A_v, B_v, q_v, l_v)]`` with the reduced
        leg charges ``q`` and block labels ``l``.
    """
    out = []
    for leg_out, leg_in in ((2, 0), (1, 3)):
        charges = np.array(tensors[0].legs[leg_out].charges) % 3
        D = len(charges)
        lab = list(labels) if labels is not None else [int(c) for c in charges]
        blocks_a, blocks_b, qs, ls = [], [], [], []
        for key in sorted(set(lab), key=repr):
            idx = np.array([i for i in range(D) if lab[i] == key])
            q = int(charges[idx[0]])
            if len(idx) == 0:
                continue
            mo = np.concatenate(
                [np.moveaxis(t.data, leg_out, 0)[idx].reshape(len(idx), -1) for t in tensors], axis=1
            )
            mi = np.concatenate(
                [np.moveaxis(t.data, leg_in, 0)[idx].reshape(len(idx), -1) for t in tensors], axis=1
            )
            uo, so, _ = np.linalg.svd(mo, full_matrices=False)
            ui, si, _ = np.linalg.svd(mi, full_matrices=False)
            uo, ui = uo[:, : _rank(so, tol)], ui[:, : _rank(si, tol)]
            w, sk, zh = np.linalg.svd(uo.T @ ui, full_matrices=False)
            r = _rank(sk, tol)
            if r == 0:
                continue
            root = np.sqrt(sk[:r])
            a = np.zeros((D, r), dtype=complex)
            b = np.zeros((D, r), dtype=complex)
            a[idx] = uo.conj() @ w[:, :r] * root
            b[idx] = (root[:, None] * zh[:r] @ ui.conj().T).T
            blocks_a.append(a)
            blocks_b.append(b)
            qs += [q] * r
            ls += [key] * r
        out.append((np.concatenate(blocks_a, axis=1), np.concatenate(blocks_b, axis=1), tuple(qs), tuple(ls)))
    return out


def reduce_tensor(t: ChargedTensor, reduction) -> ChargedTensor:
    """Apply ``bond_reduction`` maps: ``A`` on out-legs, ``B`` on in-legs."""
    (ah, bh, qh, _), (av, bv, qv, _) = reduction
    d = np.einsum("lurd,lL,uU,rR,dD->LURD", t.data, bh, av, ah, bv, optimize=True)
    legs = [Leg(len(qh), "in", qh), Leg(len(qv), "out", qv), Leg(len(qh), "out", qh), Leg(len(qv), "in", qv)]
    return ChargedTensor(d, legs, t.total_charge, check=True, tol=1e-10)


def diluted_labels():
    """(ket charge, bra charge) of each fused double-layer symbol."""
    return [(DILUTED_CHARGES[i] % 3, DILUTED_CHARGES[j] % 3) for i in range(5) for j in range(5)]


def build_diluted_double_tensor(theta=0.0, z=0.0, reduced=True, with_impurities=False, with_boundary=False):
    """Double-layer norm tensor of the diluted state, optionally row-reduced.

    The reduction blocks by ket and bra charge separately, so every reduced
    bond index keeps a definite (ket, bra) charge label.

    Parameters
    ----------
    with_impurities : bool
        Also return ``(imp_right, imp_up)`` link-occupation impurities in the
        same bond basis (the common basis has dimension 10 instead of 9).
    with_boundary : bool
        Also return ``(vectors, labels)``: uniform boundary vectors for the
        ``(l, u, r, d)`` legs expressed in the reduced basis (they have
        weight in every charge sector, so CTMRG is free to select a
        symmetry-broken fixed point) and the (ket, bra) labels of the
        horizontal bond indices.
    """
    bulk = diluted_double_layer(theta, z)
    imps = [diluted_double_layer(theta, z, "right"), diluted_double_layer(theta, z, "up")] if with_impurities else []
    e = np.ones(25)
    vecs = [e, e, e, e]
    labels = diluted_labels()
    if reduced:
        red = bond_reduction([bulk] + imps, labels=labels)
        bulk = reduce_tensor(bulk, red)
        imps = [reduce_tensor(t, red) for t in imps]
        (ah, bh, _, labels), (av, bv, _, _) = red
        # in-legs (left, down) were mapped with B, so the outside vector is A^T e
        vecs = [ah.T @ e, bv.T @ e, bh.T @ e, av.T @ e]
    out = [bulk]
    if with_impurities:
        out += imps
    if with_boundary:
        out.append((tuple(np.real_if_close(v) for v in vecs), tuple(labels)))
    return out[0] if len(out) == 1 else tuple(out)


def double_layer_rank(theta=0.0, z=0.0, tol=1e-12):
    """Dimension the horizontal and vertical bonds reduce to."""
    (ah, *_), (av, *_) = bond_reduction([diluted_double_layer(theta, z)], tol, labels=diluted_labels())
    return ah.shape[1], av.shape[1]


# ---------------------------------------------------------------------------
# restricted (wedge-free) model

# symbols on a link: arrows carry the colour of the trimer arm that drew them,
# dashed marks run along the link direction (+), against it (-), or both ways
RESTRICTED_SYMBOLS = ("empty", "+blue", "+orange", "-blue", "-orange", "dash+", "dash-", "dash+-")
RESTRICTED_CHARGES = (0, 1, 1, -1, -1, 0, 0, 0)


def _restricted_symbol(side, arrow=None, color=None, dash_out=False, dash_in=False):
    if arrow is not None:
        value = OUT_VALUE[side] if arrow == "out" else -OUT_VALUE[side]
        return RESTRICTED_SYMBOLS.index(("+" if value > 0 else "-") + color)
    if dash_out and dash_in:
        return 7
    if dash_out or dash_in:
        along = OUT_VALUE[side] > 0 if dash_out else OUT_VALUE[side] < 0
        return 5 if along else 6
    return 0


def restricted_vertex_rules():
    """The 28 vertex diagrams of the wedge-free model.

    * center of a bent trimer (4 orientations), free legs empty;
    * endpoint hit from side ``l`` by a blue or orange arm; a blue endpoint
      sends a dashed mark out of side ``rot_cw(l)``; at most one incoming
      dashed mark, on side ``opposite(l)`` or ``rot_cw(l)``.

    A dashed mark forbids its receiving vertex from being the center of a
    trimer wedged against the emitting one; geometrically such a vertex is
    always an endpoint reached from one of the two sides above.
    """
    rules = []
    for blue, orange in BENT_ARMS.values():
        sym = [0, 0, 0, 0]
        sym[SIDES.index(blue)] = _restricted_symbol(blue, "out", "blue")
        sym[SIDES.index(orange)] = _restricted_symbol(orange, "out", "orange")
        rules.append((tuple(sym), 1.0, "center"))
    for side in SIDES:
        emit = ROT_CW[side]
        for color in ("blue", "orange"):
            for incoming in (None, OPPOSITE[side], ROT_CW[side]):
                sym = [0, 0, 0, 0]
                sym[SIDES.index(side)] = _restricted_symbol(side, "in", color)
                for s in SIDES:
                    if s == side:
                        continue
                    d_out = color == "blue" and s == emit
                    d_in = s == incoming
                    sym[SIDES.index(s)] = _restricted_symbol(s, dash_out=d_out, dash_in=d_in)
                rules.append((tuple(sym), 1.0, f"endpoint-{color}"))
    return rules


def build_restricted_trvb_tensor() -> ChargedTensor:
    """Double-layer vertex tensor of the wedge-free tRVB state, legs of dimension 8."""
    legs = [Leg(8, o, RESTRICTED_CHARGES) for o in SQUARE_ORIENT]
    return _from_rules(restricted_vertex_rules(), legs, 1)


# ---------------------------------------------------------------------------
# honeycomb


def honeycomb_vertex_tensor(orientations=("in", "out", "out")) -> ChargedTensor:
    """Rank-3 tensor: one incoming arrow (endpoint) or two outgoing (center)."""
    sgn = [1 if o == "out" else -1 for o in orientations]
    data = np.zeros((3, 3, 3))
    for i in range(3):
        sym = [0, 0, 0]
        sym[i] = SYMBOL[-sgn[i]]
        data[tuple(sym)] = 1.0
    for i, j in itertools.combinations(range(3), 2):
        sym = [0, 0, 0]
        sym[i] = SYMBOL[sgn[i]]
        sym[j] = SYMBOL[sgn[j]]
        data[tuple(sym)] = 1.0
    return ChargedTensor(data, z3_legs(orientations), 1)


def build_honeycomb_tensor() -> ChargedTensor:
    """Two honeycomb vertices joined by their internal horizontal link.

    Vertex 0 has legs (W in, E out, up out); vertex 1 has (W in, E out,
    down in).  The result has square-lattice legs
    ``(left=v0.W, up=v0.up, right=v1.E, down=v1.down)`` and total charge 2.
    """
    v0 = honeycomb_vertex_tensor(("in", "out", "out"))
    v1 = honeycomb_vertex_tensor(("in", "out", "in"))
    # v0.E (axis 1) contracts with v1.W (axis 0)
    data = np.einsum("aeu,ebd->aubd", v0.data, v1.data)
    return ChargedTensor(data, z3_legs(SQUARE_ORIENT), 2)


# ---------------------------------------------------------------------------
# triangular


def triangular_delta():
    """Copy tensor on a face: three legs of dimension 2, all equal."""
    d = np.zeros((2, 2, 2))
    d[0, 0, 0] = d[1, 1, 1] = 1.0
    return d


def triangular_constraint():
    """Rank-6 tensor: exactly one of the six faces around a vertex is occupied."""
    c = np.zeros((2,) * 6)
    for i in range(6):
        idx = [0] * 6
        idx[i] = 1
        c[tuple(idx)] = 1.0
    return c


def triangular_constraint_halves():
    """Split the constraint into two rank-4 halves sharing a count bond.

    ``C[a..f] = sum_k L[a, b, c, k] R[k, d, e, f]`` where ``k`` records
    whether the first three faces already host the occupied one.
    """
    left = np.zeros((2, 2, 2, 2))
    right = np.zeros((2, 2, 2, 2))
    for bits in itertools.product(range(2), repeat=3):
        s = sum(bits)
        if s <= 1:
            left[bits + (s,)] = 1.0
            right[(1 - s,) + bits] = 1.0
    return left, right


# effective-tensor leg states
# horizontal (right of v): 0 none, 1 up-face of plaquette(v) occupied, 2 down-face occupied
# vertical (up of v): 0 none, 1 relays the diagonal plaquette's occupation, 2 down-face of plaquette(v)
def build_triangular_tensors():
    """Return ``(delta, constraint, effective)`` for triangular-face trimers.

    The effective rank-4 tensor lives on the vertices of the triangular
    lattice drawn as a square lattice with (1,1) diagonals; each vertex owns
    the two faces of its north-east plaquette, tells its right neighbour
    which face (if any) is occupied, and relays its left neighbour's
    occupation upward to the diagonal vertex.
    """
    eff = np.zeros((3, 3, 3, 3))
    for left, down, own in itertools.product(range(3), range(3), range(3)):
        count = (left == 1) + (down in (1, 2)) + (own != 0)
        if count != 1:
            continue
        relay = left != 0
        own_down = own == 2
        if relay and own_down:
            continue
        up = 1 if relay else (2 if own_down else 0)
        eff[left, up, own, down] = 1.0
    legs = [Leg(3, o, (0, 0, 0)) for o in SQUARE_ORIENT]
    return triangular_delta(), triangular_constraint(), ChargedTensor(eff, legs, 0)


def triangular_effective_tensor(grading=None) -> ChargedTensor:
    """Effective triangular tensor, optionally with a Z3 grading of its leg states.

    ``grading`` = ``(charges_h, charges_v, total)``; default uses
    :func:`find_z3_grading`.
    """
    _, _, eff = build_triangular_tensors()
    if grading is None:
        grading = find_z3_grading(eff)
    if grading is None:
        return eff
    qh, qv, tot = grading
    legs = [Leg(3, "in", qh), Leg(3, "out", qv), Leg(3, "out", qh), Leg(3, "in", qv)]
    return ChargedTensor(eff.data, legs, tot)


def find_z3_grading(t: ChargedTensor):
    """Nontrivial Z3 charges on horizontal/vertical leg states conserved by ``t``.

    Searches charge lists ``qh`` (left/right legs) and ``qv`` (up/down legs)
    with ``qh[l] + qv[d] - qh[r] - qv[u]`` constant over the nonzero entries.
    Returns the first grading that is not constant on both leg types, with
    state 0 fixed to charge 0, or None.
    """
    nz = [idx for idx, _ in t.nonzero_entries(1e-14)]
    dh, dv = t.shape[0], t.shape[1]
    for qh in itertools.product(range(3), repeat=dh - 1):
        qh = (0,) + qh
        for qv in itertools.product(range(3), repeat=dv - 1):
            qv = (0,) + qv
            if len(set(qh)) == 1 and len(set(qv)) == 1:
                continue
            tot = {(qh[l] + qv[d] - qh[r] - qv[u]) % 3 for l, u, r, d in nz}
            if len(tot) == 1:
                return tuple(qh), tuple(qv), tot.pop()
    return None


# ---------------------------------------------------------------------------
# symmetry helpers


def reflect_diagonal(t: ChargedTensor) -> ChargedTensor:
    """Mirror across the x = y line: swaps left<->down and up<->right."""
    data = t.data.transpose(3, 2, 1, 0)
    return ChargedTensor(data, t.legs, t.total_charge, check=False)


def has_diagonal_reflection(t: ChargedTensor, tol=1e-12) -> bool:
    if t.rank != 4 or t.shape[0] != t.shape[3] or t.shape[1] != t.shape[2]:
        return False
    return np.allclose(t.data, t.data.transpose(3, 2, 1, 0), atol=tol, rtol=0)


def permute_pm(vec, L):
    """Apply the +1 <-> -1 symbol swap on each of ``L`` dimension-3 legs of a ring vector."""
    v = np.asarray(vec).reshape((3,) * L)
    for ax in range(L):
        v = np.take(v, [0, 2, 1], axis=ax)
    return v.reshape(-1)


def reflect_vertical(t: ChargedTensor) -> ChargedTensor:
    """Mirror ``y -> -y``: swaps up/down legs and reverses vertical arrows.

    A tensor invariant under this map has a downward transfer operator equal
    to the upward one conjugated by the +/- swap on every ring leg, which is
    how the left fixed point is obtained from the right one.
    """
    if t.shape[1] != 3:
        raise ValueError("vertical reflection needs dimension-3 vertical legs")
    data = np.einsum("lurd,uU,dD->lDrU", t.data, PERM_PM, PERM_PM)
    return ChargedTensor(data, t.legs, t.total_charge, check=False)
