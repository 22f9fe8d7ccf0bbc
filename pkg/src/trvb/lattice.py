"""Lattice geometry, trimer placements and brute-force covering enumeration.

Periodic lattices are described by a list of vertices and a list of
``Trimer`` placements (each a frozenset of three vertices plus a shape tag).
Coverings are enumerated by depth-first search over the lowest undecided
vertex, which makes the order deterministic and the output duplicate-free.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np

# sides of a square-lattice vertex, in rank-4 leg order (left, up, right, down)
SIDES = ("W", "N", "E", "S")
STEP = {"E": (1, 0), "N": (0, 1), "W": (-1, 0), "S": (0, -1)}
ROT_CCW = {"E": "N", "N": "W", "W": "S", "S": "E"}
ROT_CW = {v: k for k, v in ROT_CCW.items()}
OPPOSITE = {"E": "W", "W": "E", "N": "S", "S": "N"}
# bent orientation -> (blue arm, orange arm); orange is blue rotated anticlockwise
BENT_ARMS = {o: (b, ROT_CCW[b]) for o, b in {"NE": "E", "NW": "N", "SW": "W", "SE": "S"}.items()}
STRAIGHT_ARMS = {"H": ("E", "W"), "V": ("N", "S")}


class BudgetExceeded(RuntimeError):
    """Enumeration stopped because the configuration budget was exhausted."""

    def __init__(self, message, partial_count):
        super().__init__(message)
        self.partial_count = partial_count


@dataclass(frozen=True)
class Trimer:
    center: int
    shape: str
    orientation: str
    vertices: frozenset
    weight_class: str = ""

    def token(self):
        return f"{self.center}:{self.shape}:{self.orientation}"


@dataclass
class Lattice:
    """A finite periodic lattice with its trimer placements."""

    name: str
    extents: tuple
    n_vertices: int
    trimers: list
    coords: list = field(default_factory=list)

    def trimers_at(self):
        """Placements grouped by their lowest vertex."""
        groups = [[] for _ in range(self.n_vertices)]
        for i, t in enumerate(self.trimers):
            groups[min(t.vertices)].append(i)
        return groups


def square_lattice(Lx, Ly, shapes=("bent", "straight")):
    """Square vertex torus; vertex ``x + Lx*y``."""
    if Lx < 3 or Ly < 3:
        raise ValueError("square tori need extents >= 3 so trimers do not wrap onto themselves")

    def vid(x, y):
        return (x % Lx) + Lx * (y % Ly)

    trimers = []
    for y in range(Ly):
        for x in range(Lx):
            c = vid(x, y)
            if "bent" in shapes:
                for o, (b, r) in BENT_ARMS.items():
                    vs = frozenset({c, vid(x + STEP[b][0], y + STEP[b][1]), vid(x + STEP[r][0], y + STEP[r][1])})
                    trimers.append(Trimer(c, "bent", o, vs, "bent"))
            if "straight" in shapes:
                for o, (a1, a2) in STRAIGHT_ARMS.items():
                    vs = frozenset({c, vid(x + STEP[a1][0], y + STEP[a1][1]), vid(x + STEP[a2][0], y + STEP[a2][1])})
                    trimers.append(Trimer(c, "straight", o, vs, "straight"))
    coords = [(x, y) for y in range(Ly) for x in range(Lx)]
    return Lattice("square", (Lx, Ly), Lx * Ly, trimers, coords)


def honeycomb_lattice(Lx, Ly):
    """Honeycomb torus matching the vertical-pair square network.

    Vertex ``(k, y, s)`` has id ``2*(k + Lx*y) + s``.  Edges: internal
    ``(k,y,0)-(k,y,1)``, horizontal ``(k,y,1)-(k+1,y,0)`` and vertical
    ``(k,y,0)-(k,y+1,1)``.  Multi-edges are kept distinct.
    """

    def vid(k, y, s):
        return 2 * ((k % Lx) + Lx * (y % Ly)) + s

    edges = []
    for y in range(Ly):
        for k in range(Lx):
            edges.append((vid(k, y, 0), vid(k, y, 1)))
            edges.append((vid(k, y, 1), vid(k + 1, y, 0)))
            edges.append((vid(k, y, 0), vid(k, y + 1, 1)))
    n = 2 * Lx * Ly
    incident = [[] for _ in range(n)]
    for e, (a, b) in enumerate(edges):
        incident[a].append((e, b))
        incident[b].append((e, a))
    trimers = []
    for c in range(n):
        for (e1, w1), (e2, w2) in itertools.combinations(incident[c], 2):
            vs = frozenset({c, w1, w2})
            if len(vs) == 3:
                trimers.append(Trimer(c, "bent", f"{e1}-{e2}", vs, "bent"))
    return Lattice("honeycomb", (Lx, Ly), n, trimers)


def triangular_lattice(Lx, Ly):
    """Triangular torus drawn as a square lattice plus the (1,1) diagonals.

    Trimers are the triangular faces: ``up`` = {v, v+x, v+x+y} and
    ``down`` = {v, v+y, v+x+y}.
    """
    if Lx < 2 or Ly < 2:
        raise ValueError("triangular tori need extents >= 2")

    def vid(x, y):
        return (x % Lx) + Lx * (y % Ly)

    trimers = []
    for y in range(Ly):
        for x in range(Lx):
            c = vid(x, y)
            up = frozenset({c, vid(x + 1, y), vid(x + 1, y + 1)})
            dn = frozenset({c, vid(x, y + 1), vid(x + 1, y + 1)})
            if len(up) == 3:
                trimers.append(Trimer(c, "triangle", "up", up, "triangle"))
            if len(dn) == 3:
                trimers.append(Trimer(c, "triangle", "down", dn, "triangle"))
    coords = [(x, y) for y in range(Ly) for x in range(Lx)]
    return Lattice("triangular", (Lx, Ly), Lx * Ly, trimers, coords)


def make_lattice(name, extents):
    if name == "square":
        return square_lattice(*extents)
    if name == "square-bent":
        return square_lattice(*extents, shapes=("bent",))
    if name == "honeycomb":
        return honeycomb_lattice(*extents)
    if name == "triangular":
        return triangular_lattice(*extents)
    raise ValueError(f"unknown lattice {name!r}; expected square, square-bent, honeycomb or triangular")


def square_wedged(lat: Lattice, a: int, b: int) -> bool:
    """True if placements ``a`` and ``b`` form a diagonally wedged same-orientation pair."""
    ta, tb = lat.trimers[a], lat.trimers[b]
    if ta.shape != "bent" or tb.shape != "bent" or ta.orientation != tb.orientation:
        return False
    Lx, Ly = lat.extents
    blue, orange = BENT_ARMS[ta.orientation]
    dx = STEP[blue][0] + STEP[orange][0]
    dy = STEP[blue][1] + STEP[orange][1]
    xa, ya = lat.coords[ta.center]
    xb, yb = lat.coords[tb.center]
    fwd = ((xa + dx - xb) % Lx == 0) and ((ya + dy - yb) % Ly == 0)
    bwd = ((xb + dx - xa) % Lx == 0) and ((yb + dy - ya) % Ly == 0)
    return fwd or bwd


def enumerate_coverings(lat: Lattice, mode="maximal", restriction="none", budget=10**8):
    """All trimer coverings of ``lat`` as sorted tuples of placement indices.

    Parameters
    ----------
    mode : {"maximal", "diluted"}
        Exactly one or at most one trimer per vertex.
    restriction : {"none", "no-wedge"}
        ``"no-wedge"`` drops coverings containing a wedged bent pair.
    budget : int
        Maximum number of coverings; exceeding it raises BudgetExceeded.
    """
    if mode not in ("maximal", "diluted"):
        raise ValueError(f"mode must be 'maximal' or 'diluted', got {mode!r}")
    if restriction not in ("none", "no-wedge"):
        raise ValueError(f"restriction must be 'none' or 'no-wedge', got {restriction!r}")
    groups = lat.trimers_at()
    masks = [sum(1 << v for v in t.vertices) for t in lat.trimers]
    n = lat.n_vertices
    full = (1 << n) - 1
    out = []
    chosen = []

    def wedge_ok(i):
        return all(not square_wedged(lat, i, j) for j in chosen)

    def rec(covered):
        if covered == full:
            out.append(tuple(sorted(chosen)))
            if len(out) > budget:
                raise BudgetExceeded(f"more than {budget} coverings", len(out))
            return
        v = (~covered & (covered + 1)).bit_length() - 1
        if mode == "diluted":
            rec(covered | (1 << v))
        for i in groups[v]:
            if masks[i] & covered:
                continue
            if restriction == "no-wedge" and not wedge_ok(i):
                continue
            chosen.append(i)
            rec(covered | masks[i])
            chosen.pop()

    rec(0)
    return out


def covering_weight(lat: Lattice, covering, weights):
    """Product over trimers of ``weights[trimer.weight_class]``."""
    w = 1.0
    for i in covering:
        w *= weights[lat.trimers[i].weight_class]
    return w


def format_covering(lat: Lattice, covering):
    """One-line text form: space-separated ``center:shape:orientation`` tokens."""
    return " ".join(lat.trimers[i].token() for i in covering)


def parse_covering(lat: Lattice, line):
    lookup = {t.token(): i for i, t in enumerate(lat.trimers)}
    toks = line.split()
    try:
        return tuple(sorted(lookup[t] for t in toks))
    except KeyError as err:
        raise ValueError(f"unknown trimer token {err.args[0]!r} for {lat.name} {lat.extents}") from None


def write_coverings(path, lat: Lattice, coverings):
    with open(path, "w") as fh:
        fh.write(f"# lattice={lat.name} extents={'x'.join(map(str, lat.extents))}\n")
        for c in coverings:
            fh.write(format_covering(lat, c) + "\n")


def read_coverings(path, lat: Lattice):
    out = []
    with open(path) as fh:
        for line in fh:
            if line.startswith("#"):
                continue
            out.append(parse_covering(lat, line))
    return out


# ---------------------------------------------------------------------------
# arrow representation on the square lattice


def arrow_config(lat: Lattice, covering):
    """Map a square-lattice covering to link arrows.

    Returns a dict ``{(vertex, "E"|"N"): value}`` over every link, with value
    +1/-1 for an arrow along/against the link direction and 0 for no arrow.
    """
    Lx, Ly = lat.extents
    arrows = {(v, s): 0 for v in range(lat.n_vertices) for s in ("E", "N")}
    for i in covering:
        t = lat.trimers[i]
        arms = BENT_ARMS[t.orientation] if t.shape == "bent" else STRAIGHT_ARMS[t.orientation]
        x, y = lat.coords[t.center]
        for a in arms:
            if a in ("E", "N"):
                arrows[(t.center, a)] = 1
            else:
                dx, dy = STEP[a]
                arrows[((x + dx) % Lx + Lx * ((y + dy) % Ly), OPPOSITE[a])] = -1
    return arrows


def vertex_outflow(lat: Lattice, arrows, v):
    """Net outgoing arrow flux at ``v`` (not reduced mod 3)."""
    Lx, Ly = lat.extents
    x, y = lat.coords[v]
    west = (x - 1) % Lx + Lx * y
    south = x + Lx * ((y - 1) % Ly)
    return arrows[(v, "E")] + arrows[(v, "N")] - arrows[(west, "E")] - arrows[(south, "N")]


def covering_from_arrows(lat: Lattice, arrows):
    """Inverse of ``arrow_config``: centers are vertices with two outgoing arrows."""
    Lx, Ly = lat.extents
    out = []
    lookup = {(t.center, t.shape, t.orientation): i for i, t in enumerate(lat.trimers)}
    for v in range(lat.n_vertices):
        x, y = lat.coords[v]
        outgoing = set()
        for s in SIDES:
            if s in ("E", "N"):
                val = arrows[(v, s)]
                if val == 1:
                    outgoing.add(s)
            else:
                dx, dy = STEP[s]
                w = (x + dx) % Lx + Lx * ((y + dy) % Ly)
                if arrows[(w, OPPOSITE[s])] == -1:
                    outgoing.add(s)
        if len(outgoing) == 2:
            for o, arms in BENT_ARMS.items():
                if set(arms) == outgoing:
                    out.append(lookup[(v, "bent", o)])
            for o, arms in STRAIGHT_ARMS.items():
                if set(arms) == outgoing:
                    out.append(lookup[(v, "straight", o)])
    return tuple(sorted(out))


# ---------------------------------------------------------------------------
# tripartition search

_SQRT3 = np.sqrt(3.0)

# (primitive vectors, sublattice offsets) in real space, unit bond length
_GEOMETRY = {
    "square": (np.array([[1.0, 0.0], [0.0, 1.0]]), np.array([[0.0, 0.0]])),
    "triangular": (np.array([[1.0, 0.0], [0.5, _SQRT3 / 2]]), np.array([[0.0, 0.0]])),
    "honeycomb": (
        np.array([[_SQRT3, 0.0], [_SQRT3 / 2, 1.5]]),
        np.array([[0.0, 0.0], [0.0, 1.0]]),
    ),
    "kagome": (
        np.array([[2.0, 0.0], [1.0, _SQRT3]]),
        np.array([[0.0, 0.0], [1.0, 0.0], [0.5, _SQRT3 / 2]]),
    ),
}

# trimer type -> angle between the two arms (degrees); "triangle" is a face
TRIMER_ANGLES = {
    "straight": 180.0,
    "bent": None,  # any non-straight angle the lattice offers
    "I": 180.0,
    "II": 60.0,
    "III": 120.0,
}


def _sites(name, m, n):
    vecs, subs = _GEOMETRY[name]
    sites = {}
    for i in range(-2 * m - 2, 3 * m + 3):
        for j in range(-2 * n - 2, 3 * n + 3):
            for s, off in enumerate(subs):
                sites[(i, j, s)] = i * vecs[0] + j * vecs[1] + off
    return sites


def _placements(name, types, m, n):
    """Trimer placements touching the (m x n)-cell patch, as site-key triples."""
    sites = _sites(name, m, n)
    keys = list(sites)
    pos = np.array([sites[k] for k in keys])
    index = {k: i for i, k in enumerate(keys)}
    core = [k for k in keys if 0 <= k[0] < m and 0 <= k[1] < n]
    out = []
    for c in core:
        p = sites[c]
        d = np.linalg.norm(pos - p, axis=1)
        nbrs = [keys[i] for i in np.where(np.abs(d - 1.0) < 1e-6)[0]]
        for t in types:
            if t == "triangle":
                for a, b in itertools.combinations(nbrs, 2):
                    if abs(np.linalg.norm(sites[a] - sites[b]) - 1.0) < 1e-6:
                        out.append((c, a, b))
                continue
            for a, b in itertools.combinations(nbrs, 2):
                va, vb = sites[a] - p, sites[b] - p
                ang = np.degrees(np.arccos(np.clip(va @ vb, -1.0, 1.0)))
                want = TRIMER_ANGLES[t]
                if want is None:
                    if abs(ang - 180.0) > 1e-6:
                        out.append((a, c, b))
                elif abs(ang - want) < 1e-6:
                    out.append((a, c, b))
    del index
    return out


def check_tripartite(lattice, trimer_types, unit_cell_extents=None):
    """Search periodic 3-colorings under which every trimer covers all three colors.

    Parameters
    ----------
    lattice : {"square", "honeycomb", "triangular", "kagome"}
    trimer_types : iterable of str
        Subset of ``straight``, ``bent``, ``triangle``, ``I``, ``II``, ``III``.
    unit_cell_extents : tuple, optional
        Only try this (m, n) supercell; default tries every m, n in 1..3.

    Returns
    -------
    dict or None
        Mapping ``(i mod m, j mod n, sublattice) -> color`` or None.
    """
    if lattice not in _GEOMETRY:
        raise ValueError(f"unknown lattice {lattice!r}")
    types = list(trimer_types)
    for t in types:
        if t != "triangle" and t not in TRIMER_ANGLES:
            raise ValueError(f"unknown trimer type {t!r}")
    cells = [tuple(unit_cell_extents)] if unit_cell_extents else [(m, n) for m in (1, 2, 3) for n in (1, 2, 3)]
    nsub = len(_GEOMETRY[lattice][1])
    for m, n in cells:
        placements = _placements(lattice, types, m, n)
        if not placements:
            continue
        variables = [(i, j, s) for i in range(m) for j in range(n) for s in range(nsub)]

        def cls(k):
            return (k[0] % m, k[1] % n, k[2])

        constraints = [tuple(cls(k) for k in tri) for tri in placements]
        if any(len(set(c)) < 3 for c in constraints):
            continue
        coloring = _solve_coloring(variables, constraints)
        if coloring is not None:
            return coloring
    return None


def _solve_coloring(variables, constraints):
    by_var = {v: [] for v in variables}
    for c in constraints:
        for v in c:
            by_var[v].append(c)
    color = {}

    def consistent(v):
        for c in by_var[v]:
            vals = [color[u] for u in c if u in color]
            if len(vals) != len(set(vals)):
                return False
        return True

    def rec(i):
        if i == len(variables):
            return True
        v = variables[i]
        for col in range(3) if i else (0,):
            color[v] = col
            if consistent(v) and rec(i + 1):
                return True
            del color[v]
        return False

    return dict(color) if rec(0) else None
