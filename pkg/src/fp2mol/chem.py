"""Molecular graphs, a SMILES reader/writer, canonical keys and formulas.

Graphs are hydrogen-suppressed: each atom carries its total hydrogen count.
Aromatic input is kekulized on read; aromaticity is then re-perceived from
the Kekule structure so the per-bond aromatic flag does not depend on how
the input was written.
"""

from __future__ import annotations

import re
import warnings
from collections.abc import Iterable, Iterator, Mapping
from dataclasses import dataclass
from functools import cached_property, lru_cache


class ChemError(ValueError):
    """Base class for chemistry input errors."""


class SmilesSyntaxError(ChemError, SyntaxError):
    """Malformed SMILES; also catchable as the builtin SyntaxError."""

    def __init__(self, message: str):
        super().__init__(message)
        self.msg = message

    def __str__(self) -> str:
        return self.msg


class ValenceError(ChemError):
    pass


class StereoWarning(UserWarning):
    pass


@dataclass(frozen=True)
class Element:
    symbol: str
    atomic_number: int
    allowed_valences: tuple[int, ...]
    default_charge: int = 0


ELEMENTS: dict[str, Element] = {
    e.symbol: e
    for e in (
        Element("H", 1, (1,)),
        Element("B", 5, (3,)),
        Element("C", 6, (4,)),
        Element("N", 7, (3, 5)),
        Element("O", 8, (2,)),
        Element("F", 9, (1,)),
        Element("P", 15, (3, 5)),
        Element("S", 16, (2, 4, 6)),
        Element("Cl", 17, (1,)),
        Element("Br", 35, (1,)),
        Element("I", 53, (1, 3, 5)),
    )
}

# Charged states use the valences of the isoelectronic neutral atom.
_CHARGED_VALENCES: dict[tuple[str, int], tuple[int, ...]] = {
    ("H", 1): (0,), ("H", -1): (0,),
    ("B", 1): (2,), ("B", -1): (4,),
    ("C", 1): (3,), ("C", -1): (3,),
    ("N", 1): (4,), ("N", -1): (2,),
    ("O", 1): (3,), ("O", -1): (1,),
    ("P", 1): (4,), ("P", -1): (2, 4, 6),
    ("S", 1): (3, 5), ("S", -1): (1, 3, 5),
    ("F", -1): (0,), ("Cl", -1): (0,), ("Br", -1): (0,), ("I", -1): (0,),
}

ORGANIC_SUBSET = frozenset({"B", "C", "N", "O", "P", "S", "F", "Cl", "Br", "I"})
_AROMATIC_SYMBOLS = {"b": "B", "c": "C", "n": "N", "o": "O", "p": "P", "s": "S"}
AROMATIC_BOND = 4  # bond code used wherever a bond label is needed


def allowed_valences(symbol: str, charge: int = 0) -> tuple[int, ...]:
    if charge == 0:
        element = ELEMENTS.get(symbol)
        return element.allowed_valences if element else ()
    return _CHARGED_VALENCES.get((symbol, charge), ())


def _complete_valence(symbol: str, charge: int, used: int) -> int | None:
    """Smallest allowed valence >= used, or None."""
    for v in allowed_valences(symbol, charge):
        if v >= used:
            return v
    return None


@dataclass(frozen=True)
class Atom:
    symbol: str
    charge: int = 0
    hydrogens: int = 0
    aromatic: bool = False


@dataclass(frozen=True)
class Bond:
    begin: int
    end: int
    order: int = 1
    aromatic: bool = False

    @property
    def code(self) -> int:
        return AROMATIC_BOND if self.aromatic else self.order

    def other(self, atom: int) -> int:
        return self.end if atom == self.begin else self.begin


@dataclass(frozen=True)
class MolecularGraph:
    atoms: tuple[Atom, ...]
    bonds: tuple[Bond, ...]

    def __post_init__(self) -> None:
        n = len(self.atoms)
        seen = set()
        for b in self.bonds:
            if not (0 <= b.begin < n and 0 <= b.end < n):
                raise ChemError(f"bond endpoint out of range: {b}")
            if b.begin == b.end:
                raise ChemError(f"self-loop on atom {b.begin}")
            pair = (min(b.begin, b.end), max(b.begin, b.end))
            if pair in seen:
                raise ChemError(f"duplicate bond between atoms {pair}")
            seen.add(pair)

    @property
    def num_atoms(self) -> int:
        return len(self.atoms)

    @property
    def num_bonds(self) -> int:
        return len(self.bonds)

    @cached_property
    def neighbors(self) -> tuple[tuple[tuple[int, int], ...], ...]:
        """Per atom: tuple of (neighbor atom, bond index)."""
        adj: list[list[tuple[int, int]]] = [[] for _ in self.atoms]
        for k, b in enumerate(self.bonds):
            adj[b.begin].append((b.end, k))
            adj[b.end].append((b.begin, k))
        return tuple(tuple(a) for a in adj)

    @cached_property
    def ring_bonds(self) -> frozenset[int]:
        return frozenset(_ring_bond_indices(len(self.atoms), self.bonds))

    @cached_property
    def ring_atoms(self) -> frozenset[int]:
        out = set()
        for k in self.ring_bonds:
            out.add(self.bonds[k].begin)
            out.add(self.bonds[k].end)
        return frozenset(out)

    def degree(self, i: int) -> int:
        return len(self.neighbors[i])

    def bond_order_sum(self, i: int) -> int:
        return sum(self.bonds[k].order for _, k in self.neighbors[i])

    def valence(self, i: int) -> int:
        return self.bond_order_sum(i) + self.atoms[i].hydrogens

    def bond_between(self, i: int, j: int) -> Bond | None:
        for n, k in self.neighbors[i]:
            if n == j:
                return self.bonds[k]
        return None

    def components(self) -> list[list[int]]:
        seen = [False] * len(self.atoms)
        comps = []
        for start in range(len(self.atoms)):
            if seen[start]:
                continue
            stack, comp = [start], []
            seen[start] = True
            while stack:
                u = stack.pop()
                comp.append(u)
                for v, _ in self.neighbors[u]:
                    if not seen[v]:
                        seen[v] = True
                        stack.append(v)
            comps.append(sorted(comp))
        return comps

    def is_connected(self) -> bool:
        return len(self.components()) <= 1

    def validate(self) -> None:
        """Raise ValenceError unless every atom sits on an allowed valence."""
        for i, a in enumerate(self.atoms):
            if a.symbol not in ELEMENTS:
                raise ValenceError(f"unsupported element {a.symbol!r}")
            if a.hydrogens < 0:
                raise ValenceError(f"negative hydrogen count on atom {i}")
            if self.valence(i) not in allowed_valences(a.symbol, a.charge):
                raise ValenceError(
                    f"atom {i} ({a.symbol}, charge {a.charge}) has valence "
                    f"{self.valence(i)}; allowed {allowed_valences(a.symbol, a.charge)}"
                )

    def permuted(self, perm: list[int]) -> MolecularGraph:
        """Relabel atoms so that old atom i becomes new atom perm[i]."""
        atoms: list[Atom | None] = [None] * len(self.atoms)
        for old, new in enumerate(perm):
            atoms[new] = self.atoms[old]
        bonds = [
            Bond(perm[b.begin], perm[b.end], b.order, b.aromatic) for b in self.bonds
        ]
        bonds.sort(key=lambda b: (min(b.begin, b.end), max(b.begin, b.end)))
        return MolecularGraph(tuple(atoms), tuple(bonds))  # type: ignore[arg-type]


def _ring_bond_indices(n: int, bonds: tuple[Bond, ...] | list[Bond]) -> set[int]:
    """Indices of bonds that are not bridges (iterative Tarjan)."""
    adj: list[list[tuple[int, int]]] = [[] for _ in range(n)]
    for k, b in enumerate(bonds):
        adj[b.begin].append((b.end, k))
        adj[b.end].append((b.begin, k))
    disc = [-1] * n
    low = [0] * n
    bridges: set[int] = set()
    timer = 0
    for root in range(n):
        if disc[root] != -1:
            continue
        disc[root] = low[root] = timer
        timer += 1
        stack = [(root, -1, iter(adj[root]))]
        while stack:
            u, parent_bond, it = stack[-1]
            advanced = False
            for v, k in it:
                if k == parent_bond:
                    continue
                if disc[v] == -1:
                    disc[v] = low[v] = timer
                    timer += 1
                    stack.append((v, k, iter(adj[v])))
                    advanced = True
                    break
                low[u] = min(low[u], disc[v])
            if advanced:
                continue
            stack.pop()
            if stack:
                p = stack[-1][0]
                low[p] = min(low[p], low[u])
                if low[u] > disc[p]:
                    bridges.add(parent_bond)
    return set(range(len(bonds))) - bridges


# --------------------------------------------------------------------------
# aromaticity perception
# --------------------------------------------------------------------------

_MAX_RING_SIZE = 10
_MAX_RINGS = 4096


def _simple_cycles(n: int, bonds, ring_bonds: set[int]) -> list[tuple[int, ...]]:
    """Simple cycles (as bond-index tuples) up to _MAX_RING_SIZE atoms."""
    adj: list[list[tuple[int, int]]] = [[] for _ in range(n)]
    for k in ring_bonds:
        b = bonds[k]
        adj[b.begin].append((b.end, k))
        adj[b.end].append((b.begin, k))
    found: dict[frozenset[int], tuple[int, ...]] = {}
    for start in range(n):
        if not adj[start]:
            continue
        # only walk atoms with index > start so each cycle is rooted once
        stack = [(start, [start], [])]
        while stack:
            u, path, path_bonds = stack.pop()
            for v, k in adj[u]:
                if v == start and len(path) >= 3:
                    cyc = path_bonds + [k]
                    key = frozenset(cyc)
                    if key not in found:
                        found[key] = tuple(cyc)
                        if len(found) >= _MAX_RINGS:
                            return list(found.values())
                elif v > start and v not in path and len(path) < _MAX_RING_SIZE:
                    stack.append((v, path + [v], path_bonds + [k]))
    return list(found.values())


_ELECTRONEGATIVE = frozenset({"N", "O", "S"})


def _pi_electrons(i, atoms, bonds, nbrs, ring_bonds) -> int | None:
    a = atoms[i]
    doubles = []
    valence = a.hydrogens
    for j, k in nbrs[i]:
        order = bonds[k].order
        valence += order
        if order == 3:
            return None
        if order == 2:
            doubles.append((j, k))
    if len(doubles) > 1:
        return None
    if doubles:
        j, k = doubles[0]
        if k in ring_bonds:
            return 1
        return 0 if atoms[j].symbol in _ELECTRONEGATIVE else None
    sym, q = a.symbol, a.charge
    if q == 0:
        if sym in ("N", "P") and valence == 3:
            return 2
        if sym in ("O", "S") and valence == 2:
            return 2
        if sym == "B" and valence == 3:
            return 0
        return None
    if sym == "C" and q == -1 and valence == 3:
        return 2
    if sym == "C" and q == 1 and valence == 3:
        return 0
    if sym == "N" and q == -1 and valence == 2:
        return 2
    return None


def perceive_aromaticity(atoms, bonds) -> tuple[tuple[Atom, ...], tuple[Bond, ...]]:
    """Return atoms/bonds with aromatic flags recomputed by a Hueckel ring test."""
    n = len(atoms)
    bonds = [Bond(b.begin, b.end, b.order, False) for b in bonds]
    ring = _ring_bond_indices(n, bonds)
    nbrs: list[list[tuple[int, int]]] = [[] for _ in range(n)]
    for k, b in enumerate(bonds):
        nbrs[b.begin].append((b.end, k))
        nbrs[b.end].append((b.begin, k))
    aromatic_bonds: set[int] = set()
    if ring:
        electrons = [_pi_electrons(i, atoms, bonds, nbrs, ring) for i in range(n)]
        for cycle in _simple_cycles(n, bonds, ring):
            members = set()
            for k in cycle:
                members.add(bonds[k].begin)
                members.add(bonds[k].end)
            if any(electrons[i] is None for i in members):
                continue
            if sum(electrons[i] for i in members) % 4 == 2:  # type: ignore[misc]
                aromatic_bonds.update(cycle)
    arom_atoms = set()
    for k in aromatic_bonds:
        arom_atoms.add(bonds[k].begin)
        arom_atoms.add(bonds[k].end)
    new_atoms = tuple(
        Atom(a.symbol, a.charge, a.hydrogens, i in arom_atoms) for i, a in enumerate(atoms)
    )
    new_bonds = tuple(
        Bond(b.begin, b.end, b.order, k in aromatic_bonds) for k, b in enumerate(bonds)
    )
    return new_atoms, new_bonds


def build_graph(atoms, bonds, validate: bool = True) -> MolecularGraph:
    """Assemble a graph from Kekule atoms/bonds and perceive aromaticity."""
    atoms, bonds = perceive_aromaticity(tuple(atoms), tuple(bonds))
    g = MolecularGraph(atoms, bonds)
    if validate:
        g.validate()
    return g


# --------------------------------------------------------------------------
# SMILES reader
# --------------------------------------------------------------------------

_BRACKET_RE = re.compile(
    r"^(?P<iso>\d+)?"
    r"(?P<sym>[A-Z][a-z]?|[a-z][a-z]?)"
    r"(?P<chiral>@+(?:TH[12]|AL[12]|SP[123]|TB\d{1,2}|OH\d{1,2})?)?"
    r"(?P<h>H\d?)?"
    r"(?P<charge>[+-]{1,2}|[+-]\d{1,2})?"
    r"(?::(?P<cls>\d+))?$"
)
_BOND_CHARS = {"-": 1, "=": 2, "#": 3, ":": AROMATIC_BOND, "/": 1, "\\": 1}


@dataclass
class _RawAtom:
    symbol: str
    aromatic: bool
    bracket: bool
    charge: int = 0
    hydrogens: int = 0


def _parse_bracket(text: str, pos: int) -> _RawAtom:
    m = _BRACKET_RE.match(text)
    if not m:
        raise SmilesSyntaxError(f"malformed bracket atom [{text}] at {pos}")
    sym = m.group("sym")
    aromatic = sym[0].islower()
    if aromatic:
        if sym not in _AROMATIC_SYMBOLS:
            raise SmilesSyntaxError(f"unknown aromatic element {sym!r} at {pos}")
        sym = _AROMATIC_SYMBOLS[sym]
    elif sym not in ELEMENTS:
        raise SmilesSyntaxError(f"unknown element {sym!r} at {pos}")
    if m.group("chiral"):
        warnings.warn("stereo marker discarded", StereoWarning, stacklevel=4)
    h = m.group("h")
    hydrogens = 0 if not h else (1 if h == "H" else int(h[1:]))
    charge = 0
    c = m.group("charge")
    if c:
        sign = 1 if c[0] == "+" else -1
        if len(c) == 2 and not c[1].isdigit():
            if c[1] != c[0]:
                raise SmilesSyntaxError(f"malformed charge in [{text}] at {pos}")
            charge = 2 * sign
        elif len(c) > 1:
            charge = sign * int(c[1:])
        else:
            charge = sign
    return _RawAtom(sym, aromatic, True, charge, hydrogens)


def _tokenize_and_link(text: str):
    atoms: list[_RawAtom] = []
    edges: dict[tuple[int, int], str | None] = {}
    prev: int | None = None
    pending: str | None = None
    branch_stack: list[int] = []
    branch_fresh = False  # no atom seen since the last '('
    rings: dict[int, tuple[int, str | None]] = {}
    i, n = 0, len(text)

    def add_edge(a: int, b: int, sym: str | None, pos: int) -> None:
        key = (min(a, b), max(a, b))
        if a == b:
            raise SmilesSyntaxError(f"ring closure to the same atom at {pos}")
        if key in edges:
            raise SmilesSyntaxError(f"duplicate bond between atoms {key} at {pos}")
        edges[key] = sym

    def add_atom(atom: _RawAtom, pos: int) -> None:
        nonlocal prev, pending, branch_fresh
        atoms.append(atom)
        idx = len(atoms) - 1
        if prev is not None:
            add_edge(prev, idx, pending, pos)
        elif pending is not None:
            raise SmilesSyntaxError(f"bond without a preceding atom at {pos}")
        pending = None
        prev = idx
        branch_fresh = False

    while i < n:
        ch = text[i]
        if ch == "(":
            if prev is None or pending is not None:
                raise SmilesSyntaxError(f"misplaced '(' at {i}")
            branch_stack.append(prev)
            branch_fresh = True
            i += 1
        elif ch == ")":
            if not branch_stack or pending is not None or branch_fresh:
                raise SmilesSyntaxError(f"unbalanced or empty branch at {i}")
            prev = branch_stack.pop()
            i += 1
        elif ch == ".":
            if pending is not None or prev is None or branch_stack:
                raise SmilesSyntaxError(f"misplaced '.' at {i}")
            prev = None
            i += 1
        elif ch in _BOND_CHARS or ch == "$":
            if ch == "$":
                raise SmilesSyntaxError(f"quadruple bonds are not supported (at {i})")
            if pending is not None or prev is None:
                raise SmilesSyntaxError(f"misplaced bond symbol {ch!r} at {i}")
            if ch in "/\\":
                warnings.warn("bond stereo discarded", StereoWarning, stacklevel=3)
                pending = "-"
            else:
                pending = ch
            i += 1
        elif ch.isdigit() or ch == "%":
            if prev is None:
                raise SmilesSyntaxError(f"ring closure without an atom at {i}")
            if ch == "%":
                if i + 2 >= n or not text[i + 1 : i + 3].isdigit():
                    raise SmilesSyntaxError(f"malformed %nn ring label at {i}")
                label = int(text[i + 1 : i + 3])
                i += 3
            else:
                label = int(ch)
                i += 1
            if label in rings:
                other, sym = rings.pop(label)
                if sym is not None and pending is not None and sym != pending:
                    raise SmilesSyntaxError(f"conflicting ring bond symbols for {label}")
                add_edge(other, prev, pending if pending is not None else sym, i)
            else:
                rings[label] = (prev, pending)
            pending = None
        elif ch == "[":
            close = text.find("]", i + 1)
            if close == -1:
                raise SmilesSyntaxError(f"unclosed bracket at {i}")
            add_atom(_parse_bracket(text[i + 1 : close], i), i)
            i = close + 1
        else:
            two = text[i : i + 2]
            if two in ("Cl", "Br"):
                add_atom(_RawAtom(two, False, False), i)
                i += 2
            elif ch in ORGANIC_SUBSET:
                add_atom(_RawAtom(ch, False, False), i)
                i += 1
            elif ch in _AROMATIC_SYMBOLS:
                add_atom(_RawAtom(_AROMATIC_SYMBOLS[ch], True, False), i)
                i += 1
            else:
                raise SmilesSyntaxError(f"unexpected character {ch!r} at {i}")
    if pending is not None:
        raise SmilesSyntaxError("dangling bond at end of input")
    if branch_stack:
        raise SmilesSyntaxError("unclosed branch")
    if rings:
        raise SmilesSyntaxError(f"unclosed ring bond(s) {sorted(rings)}")
    if not atoms:
        raise SmilesSyntaxError("no atoms")
    return atoms, edges


def _aromatic_needs_double(raw: _RawAtom, s: int) -> tuple[bool, int] | None:
    """(needs an aromatic double bond, hydrogen count) for an aromatic atom."""
    if raw.bracket:
        h = raw.hydrogens
        allowed = allowed_valences(raw.symbol, raw.charge)
        if s + h in allowed:
            return False, h
        if s + h + 1 in allowed:
            return True, h
        return None
    vals = allowed_valences(raw.symbol, 0)
    v0 = vals[0]
    if s + 1 <= v0:
        return True, v0 - s - 1
    v = _complete_valence(raw.symbol, 0, s)
    return (False, v - s) if v is not None else None


def _kekule_matching(needy: list[int], adj: dict[int, list[int]]) -> dict[int, int] | None:
    """Perfect matching of `needy` atoms over aromatic bonds, by backtracking."""
    match: dict[int, int] = {}
    free = set(needy)

    def solve() -> bool:
        if not free:
            return True
        # most constrained atom first
        best, best_opts = None, None
        for u in sorted(free):
            opts = [v for v in adj.get(u, ()) if v in free]
            if best_opts is None or len(opts) < len(best_opts):
                best, best_opts = u, opts
                if not opts:
                    return False
        assert best is not None and best_opts is not None
        free.discard(best)
        for v in best_opts:
            free.discard(v)
            match[best], match[v] = v, best
            if solve():
                return True
            del match[best], match[v]
            free.add(v)
        free.add(best)
        return False

    return match if solve() else None


def parse_smiles(text: str) -> MolecularGraph:
    """Parse a SMILES string into a valence-checked MolecularGraph."""
    if not isinstance(text, str) or not text:
        raise SmilesSyntaxError("empty SMILES")
    if not text.isascii():
        raise SmilesSyntaxError("SMILES must be ASCII")
    text = text.strip()
    if not text or any(c.isspace() for c in text):
        raise SmilesSyntaxError("whitespace inside SMILES")
    raw_atoms, edges = _tokenize_and_link(text)
    n = len(raw_atoms)

    # resolve bond types; implicit bonds between aromatic atoms are aromatic
    resolved: list[tuple[int, int, int]] = []
    for (a, b), sym in edges.items():
        if sym is None:
            code = AROMATIC_BOND if raw_atoms[a].aromatic and raw_atoms[b].aromatic else 1
        else:
            code = _BOND_CHARS[sym]
        resolved.append((a, b, code))
    # aromatic bonds outside rings are plain single bonds
    tmp = [Bond(a, b, 1) for a, b, _ in resolved]
    ring = _ring_bond_indices(n, tmp)
    resolved = [
        (a, b, 1 if (code == AROMATIC_BOND and k not in ring) else code)
        for k, (a, b, code) in enumerate(resolved)
    ]

    bond_sum = [0] * n
    for a, b, code in resolved:
        w = 1 if code == AROMATIC_BOND else code
        bond_sum[a] += w
        bond_sum[b] += w

    hydrogens = [0] * n
    needy: list[int] = []
    for i, raw in enumerate(raw_atoms):
        s = bond_sum[i]
        if raw.aromatic:
            res = _aromatic_needs_double(raw, s)
            if res is None:
                raise ValenceError(f"aromatic atom {i} ({raw.symbol}) cannot be satisfied")
            need, hydrogens[i] = res
            if need:
                needy.append(i)
        elif raw.bracket:
            hydrogens[i] = raw.hydrogens
        else:
            v = _complete_valence(raw.symbol, 0, s)
            if v is None:
                raise ValenceError(f"atom {i} ({raw.symbol}) exceeds its valence ({s})")
            hydrogens[i] = v - s

    adj: dict[int, list[int]] = {}
    needy_set = set(needy)
    for a, b, code in resolved:
        if code == AROMATIC_BOND and a in needy_set and b in needy_set:
            adj.setdefault(a, []).append(b)
            adj.setdefault(b, []).append(a)
    match = _kekule_matching(needy, adj)
    if match is None:
        raise ValenceError("cannot kekulize aromatic system")

    bonds = []
    for a, b, code in resolved:
        if code == AROMATIC_BOND:
            order = 2 if match.get(a) == b else 1
        else:
            order = code
        bonds.append(Bond(a, b, order))
    atoms = [Atom(r.symbol, r.charge, hydrogens[i]) for i, r in enumerate(raw_atoms)]
    return build_graph(atoms, bonds)


# --------------------------------------------------------------------------
# canonical ranking and SMILES writer
# --------------------------------------------------------------------------

_MAX_TIE_LEAVES = 128


def _dense_rank(keys: list) -> list[int]:
    order = {k: r for r, k in enumerate(sorted(set(keys)))}
    return [order[k] for k in keys]


def _initial_ranks(g: MolecularGraph) -> list[int]:
    ring = g.ring_atoms
    keys = [
        (
            ELEMENTS[a.symbol].atomic_number if a.symbol in ELEMENTS else 0,
            g.degree(i),
            a.charge,
            a.hydrogens,
            a.aromatic,
            i in ring,
        )
        for i, a in enumerate(g.atoms)
    ]
    return _dense_rank(keys)


def _refine(g: MolecularGraph, ranks: list[int]) -> list[int]:
    nbrs = g.neighbors
    bonds = g.bonds
    n_classes = len(set(ranks))
    while True:
        keys = [
            (ranks[i], tuple(sorted((bonds[k].code, ranks[j]) for j, k in nbrs[i])))
            for i in range(len(ranks))
        ]
        new = _dense_rank(keys)
        m = len(set(new))
        if m == n_classes:
            return new
        ranks, n_classes = new, m


@dataclass
class _Plan:
    """DFS layout shared by the SMILES writer and the SELFIES encoder."""

    order: list[int]  # atoms in output order
    roots: list[int]
    children: dict[int, list[tuple[int, int]]]  # atom -> [(child, bond index)]
    # atom -> [(partner, bond index, is_closer)] in digit order
    rings: dict[int, list[tuple[int, int, bool]]]


def _plan(g: MolecularGraph, ranks: list[int]) -> _Plan:
    n = g.num_atoms
    visited = [False] * n
    position: dict[int, int] = {}
    order: list[int] = []
    children: dict[int, list[tuple[int, int]]] = {i: [] for i in range(n)}
    closures: list[tuple[int, int, int]] = []  # (opener, closer, bond)
    seen_bonds: set[int] = set()
    roots = []
    for comp in sorted(g.components(), key=lambda c: min(ranks[i] for i in c)):
        root = min(comp, key=lambda i: ranks[i])
        roots.append(root)
        stack = [(root, -1)]
        # explicit stack DFS emulating recursion with rank-ordered neighbors
        visited[root] = True
        position[root] = len(order)
        order.append(root)
        iters = {root: iter(sorted(g.neighbors[root], key=lambda t: ranks[t[0]]))}
        while stack:
            u, parent_bond = stack[-1]
            advanced = False
            for v, k in iters[u]:
                if k == parent_bond or k in seen_bonds:
                    continue
                seen_bonds.add(k)
                if visited[v]:
                    closures.append((v, u, k))
                    continue
                visited[v] = True
                position[v] = len(order)
                order.append(v)
                children[u].append((v, k))
                iters[v] = iter(sorted(g.neighbors[v], key=lambda t: ranks[t[0]]))
                stack.append((v, k))
                advanced = True
                break
            if not advanced:
                stack.pop()
    rings: dict[int, list[tuple[int, int, bool]]] = {i: [] for i in range(n)}
    for opener, closer, k in closures:
        rings[opener].append((closer, k, False))
        rings[closer].append((opener, k, True))
    for i in range(n):
        # closings first, then openings; each group by partner position
        rings[i].sort(key=lambda t: (not t[2], position[t[0]]))
    return _Plan(order, roots, children, rings)


def _implicit_h_aromatic(symbol: str, s: int) -> tuple[bool, int] | None:
    return _aromatic_needs_double(_RawAtom(symbol, True, False), s)


def _atom_text(g: MolecularGraph, i: int, kekule: bool) -> str | None:
    """Atom token; None if an aromatic atom cannot be written consistently."""
    a = g.atoms[i]
    aromatic = a.aromatic and not kekule
    sym = a.symbol.lower() if aromatic else a.symbol
    if aromatic:
        s = sum(1 if g.bonds[k].aromatic else g.bonds[k].order for _, k in g.neighbors[i])
        has_double = any(
            g.bonds[k].aromatic and g.bonds[k].order == 2 for _, k in g.neighbors[i]
        )
        if a.charge == 0 and a.symbol in _AROMATIC_SYMBOLS.values():
            if _implicit_h_aromatic(a.symbol, s) == (has_double, a.hydrogens):
                return sym
        raw = _RawAtom(a.symbol, True, True, a.charge, a.hydrogens)
        if _aromatic_needs_double(raw, s) != (has_double, a.hydrogens):
            return None
    elif a.charge == 0 and a.symbol in ORGANIC_SUBSET:
        s = g.bond_order_sum(i)
        v = _complete_valence(a.symbol, 0, s)
        if v is not None and v - s == a.hydrogens:
            return sym
    h = a.hydrogens
    htext = "" if h == 0 else ("H" if h == 1 else f"H{h}")
    q = a.charge
    qtext = "" if q == 0 else ("+" if q == 1 else "-" if q == -1 else f"{q:+d}")
    return f"[{sym}{htext}{qtext}]"


def _bond_text(g: MolecularGraph, k: int, kekule: bool) -> str:
    b = g.bonds[k]
    if kekule:
        return {1: "", 2: "=", 3: "#"}[b.order]
    if b.aromatic:
        return ""
    if b.order == 1:
        both = g.atoms[b.begin].aromatic and g.atoms[b.end].aromatic
        return "-" if both else ""
    return {2: "=", 3: "#"}[b.order]


def _write(g: MolecularGraph, plan: _Plan, kekule: bool) -> str | None:
    texts = []
    for i in range(g.num_atoms):
        t = _atom_text(g, i, kekule)
        if t is None:
            return None
        texts.append(t)
    digit_of: dict[int, int] = {}
    free_digits: list[int] = []
    next_digit = 1

    def ring_label(d: int) -> str:
        return str(d) if d < 10 else f"%{d:02d}"

    out: list[str] = []

    def emit_atom(u: int) -> None:
        nonlocal next_digit
        out.append(texts[u])
        released = []
        for partner, k, is_closer in plan.rings[u]:
            if is_closer:
                d = digit_of.pop(k)
                out.append(_bond_text(g, k, kekule) + ring_label(d))
                released.append(d)
            else:
                if free_digits:
                    free_digits.sort()
                    d = free_digits.pop(0)
                else:
                    d = next_digit
                    next_digit += 1
                digit_of[k] = d
                out.append(ring_label(d))
        free_digits.extend(released)

    def emit_chain(u: int) -> None:
        while True:
            emit_atom(u)
            kids = plan.children[u]
            if not kids:
                return
            for v, k in kids[:-1]:
                out.append("(")
                out.append(_bond_text(g, k, kekule))
                emit_chain(v)
                out.append(")")
            v, k = kids[-1]
            out.append(_bond_text(g, k, kekule))
            u = v

    for n_root, root in enumerate(plan.roots):
        if n_root:
            out.append(".")
        emit_chain(root)
    return "".join(out)


def _canonical_search(g: MolecularGraph, kekule: bool) -> tuple[str, list[int]]:
    leaves = 0
    best: tuple[str, list[int]] | None = None

    def visit(ranks: list[int]) -> None:
        nonlocal leaves, best
        ranks = _refine(g, ranks)
        if len(set(ranks)) == len(ranks):
            leaves += 1
            text = _write(g, _plan(g, ranks), kekule)
            if text is None:
                text = _write(g, _plan(g, ranks), True)
            assert text is not None
            if best is None or text < best[0]:
                best = (text, ranks)
            return
        counts: dict[int, int] = {}
        for r in ranks:
            counts[r] = counts.get(r, 0) + 1
        target = min(r for r, c in counts.items() if c > 1)
        for v in [i for i, r in enumerate(ranks) if r == target]:
            if leaves >= _MAX_TIE_LEAVES:
                return
            split = [2 * r for r in ranks]
            split[v] -= 1
            visit(_dense_rank(split))

    visit(_initial_ranks(g))
    assert best is not None
    return best


def canonical_ranks(g: MolecularGraph) -> list[int]:
    """Canonical atom ranks (0..n-1) used to order the canonical SMILES."""
    if g.num_atoms == 0:
        return []
    return _canonical_search(g, kekule=False)[1]


def to_smiles(g: MolecularGraph, canonical: bool = True, kekule: bool = False) -> str:
    """Write SMILES. Canonical output writes aromatic atoms in lowercase."""
    if g.num_atoms == 0:
        return ""
    if canonical:
        return _canonical_search(g, kekule)[0]
    ranks = list(range(g.num_atoms))
    text = _write(g, _plan(g, ranks), kekule)
    return text if text is not None else _write(g, _plan(g, ranks), True)  # type: ignore[return-value]


def canonical_key(g: MolecularGraph) -> str:
    """Stereo-free canonical structure key (a canonical SMILES string)."""
    return to_smiles(g, canonical=True)


@lru_cache(maxsize=65536)
def canonical_smiles(text: str) -> str:
    return canonical_key(parse_smiles(text))


def plan_for(g: MolecularGraph, ranks: list[int]) -> _Plan:
    return _plan(g, ranks)


# --------------------------------------------------------------------------
# formulas
# --------------------------------------------------------------------------


class Formula(Mapping[str, int]):
    """Element counts with Hill-order serialization."""

    __slots__ = ("_counts",)

    def __init__(self, counts: Mapping[str, int] | Iterable[tuple[str, int]] = ()):
        items = counts.items() if isinstance(counts, Mapping) else counts
        merged: dict[str, int] = {}
        for k, v in items:
            if v < 0:
                raise ValueError(f"negative count for {k}")
            if v:
                merged[k] = merged.get(k, 0) + int(v)
        self._counts = merged

    def __getitem__(self, key: str) -> int:
        return self._counts[key]

    def __iter__(self) -> Iterator[str]:
        return iter(self.hill_order())

    def __len__(self) -> int:
        return len(self._counts)

    def __eq__(self, other: object) -> bool:
        if isinstance(other, Mapping):
            return self._counts == {k: v for k, v in other.items() if v}
        return NotImplemented

    def __hash__(self) -> int:
        return hash(frozenset(self._counts.items()))

    def hill_order(self) -> list[str]:
        keys = sorted(self._counts)
        if "C" in self._counts:
            head = ["C"] + (["H"] if "H" in self._counts else [])
            return head + [k for k in keys if k not in ("C", "H")]
        return keys

    def __str__(self) -> str:
        return "".join(
            k + (str(self._counts[k]) if self._counts[k] > 1 else "") for k in self.hill_order()
        )

    def __repr__(self) -> str:
        return f"Formula({str(self)!r})"

    @classmethod
    def parse(cls, text: str) -> Formula:
        if not re.fullmatch(r"(?:[A-Z][a-z]?\d*)*", text):
            raise ValueError(f"malformed formula {text!r}")
        counts: dict[str, int] = {}
        for sym, num in re.findall(r"([A-Z][a-z]?)(\d*)", text):
            counts[sym] = counts.get(sym, 0) + (int(num) if num else 1)
        return cls(counts)

    def to_dict(self) -> dict[str, int]:
        return {k: self._counts[k] for k in self.hill_order()}


def molecular_formula(g: MolecularGraph) -> Formula:
    counts: dict[str, int] = {}
    for a in g.atoms:
        counts[a.symbol] = counts.get(a.symbol, 0) + 1
        if a.hydrogens:
            counts["H"] = counts.get("H", 0) + a.hydrogens
    return Formula(counts)


def formula_distance(f1: Mapping[str, int], f2: Mapping[str, int]) -> int:
    """L1 distance between element-count vectors; absent elements count as 0."""
    return sum(abs(f1.get(k, 0) - f2.get(k, 0)) for k in set(f1) | set(f2))
