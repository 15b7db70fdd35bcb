"""SELFIES encoding and decoding on top of the chem graph model.

The derivation rules follow the published SELFIES grammar (default bonding
constraints): every token string decodes to a valence-valid molecule, because
bond requests are clipped against the remaining bonding capacity.
"""

from __future__ import annotations

import re
from functools import lru_cache

from .chem import (
    ELEMENTS,
    Atom,
    Bond,
    ChemError,
    MolecularGraph,
    _atom_text,
    _canonical_search,
    _plan,
    allowed_valences,
    build_graph,
    canonical_key,
)


class UnsupportedFeature(ChemError):
    pass


class UnknownToken(ValueError):
    pass


# bonding capacity per (element, charge)
CAPACITY: dict[tuple[str, int], int] = {
    ("F", 0): 1, ("Cl", 0): 1, ("Br", 0): 1, ("I", 0): 1,
    ("B", 0): 3, ("B", 1): 2, ("B", -1): 4,
    ("O", 0): 2, ("O", 1): 3, ("O", -1): 1,
    ("N", 0): 3, ("N", 1): 4, ("N", -1): 2,
    ("C", 0): 4, ("C", 1): 3, ("C", -1): 3,
    ("P", 0): 5, ("P", 1): 4, ("P", -1): 6,
    ("S", 0): 6, ("S", 1): 5, ("S", -1): 5,
    ("F", -1): 0, ("Cl", -1): 0, ("Br", -1): 0, ("I", -1): 0,
}

INDEX_ALPHABET = (
    "[C]", "[Ring1]", "[Ring2]", "[Branch1]", "[=Branch1]", "[#Branch1]",
    "[Branch2]", "[=Branch2]", "[#Branch2]", "[O]", "[N]", "[=N]", "[=C]",
    "[#C]", "[S]", "[P]",
)
_INDEX_CODE = {s: i for i, s in enumerate(INDEX_ALPHABET)}
_BOND_PREFIX = {"": 1, "=": 2, "#": 3}
_PREFIX_OF = {1: "", 2: "=", 3: "#"}

_ATOM_RE = re.compile(r"^\[([=#]?)([A-Z][a-z]?)(?:H(\d))?([+-]\d?)?\]$")
_BRANCH_RE = re.compile(r"^\[([=#]?)Branch([123])\]$")
_RING_RE = re.compile(r"^\[([=#]?)Ring([123])\]$")
_TOKEN_SPLIT = re.compile(r"\[[^\[\]]*\]")
NOP = "[nop]"


def index_to_tokens(index: int) -> list[str]:
    if index < 0:
        raise ValueError("index must be non-negative")
    if index == 0:
        return [INDEX_ALPHABET[0]]
    out = []
    base = len(INDEX_ALPHABET)
    while index:
        out.append(INDEX_ALPHABET[index % base])
        index //= base
    return out[::-1]


def tokens_to_index(tokens: list[str | None]) -> int:
    index = 0
    base = len(INDEX_ALPHABET)
    for t in tokens:
        index = index * base + _INDEX_CODE.get(t, 0)  # type: ignore[arg-type]
    return index


def split_selfies(text: str) -> list[str]:
    tokens = _TOKEN_SPLIT.findall(text)
    if "".join(tokens) != text:
        raise UnknownToken(f"malformed SELFIES string {text!r}")
    return tokens


@lru_cache(maxsize=4096)
def _classify(token: str):
    """('atom', order, symbol, hydrogens|None, charge) / ('branch', order, n) / ('ring', order, n)."""
    m = _ATOM_RE.match(token)
    if m:
        prefix, sym, h, q = m.groups()
        if sym not in ELEMENTS or sym == "H":
            raise UnknownToken(f"unknown element in token {token}")
        charge = 0
        if q:
            charge = (1 if q[0] == "+" else -1) * (int(q[1:]) if len(q) > 1 else 1)
        if (sym, charge) not in CAPACITY:
            raise UnknownToken(f"unsupported charge state in token {token}")
        hyd = int(h) if h is not None else None
        if hyd is not None and CAPACITY[(sym, charge)] - hyd < 0:
            raise UnknownToken(f"too many hydrogens in token {token}")
        return ("atom", _BOND_PREFIX[prefix], sym, hyd, charge)
    m = _BRANCH_RE.match(token)
    if m:
        return ("branch", _BOND_PREFIX[m.group(1)], int(m.group(2)))
    m = _RING_RE.match(token)
    if m:
        return ("ring", _BOND_PREFIX[m.group(1)], int(m.group(2)))
    raise UnknownToken(f"unknown SELFIES token {token!r}")


def is_selfies_token(token: str) -> bool:
    try:
        _classify(token)
        return True
    except UnknownToken:
        return False


# ------------------------------------------------------------------ decode


class _Derivation:
    def __init__(self) -> None:
        self.symbols: list[str] = []
        self.charges: list[int] = []
        self.explicit_h: list[int | None] = []
        self.capacity: list[int] = []
        self.bonds: dict[tuple[int, int], int] = {}
        self.used: list[int] = []
        self.rings: list[tuple[int, int, int]] = []

    def add_atom(self, sym: str, hyd: int | None, charge: int) -> int:
        self.symbols.append(sym)
        self.charges.append(charge)
        self.explicit_h.append(hyd)
        self.capacity.append(CAPACITY[(sym, charge)] - (hyd or 0))
        self.used.append(0)
        return len(self.symbols) - 1

    def add_bond(self, a: int, b: int, order: int) -> None:
        self.bonds[(min(a, b), max(a, b))] = order
        self.used[a] += order
        self.used[b] += order

    def derive(self, tokens: list[str], pos: int, limit: float, state: int, prev: int | None) -> int:
        """Consume up to `limit` tokens from `pos`; returns the number consumed."""
        n = 0
        while state is not None and n < limit and pos + n < len(tokens):
            token = tokens[pos + n]
            n += 1
            kind = _classify(token)
            next_state: int | None
            if kind[0] == "branch":
                _, btype, nidx = kind
                if state <= 1:
                    next_state = state
                else:
                    binit = min(state - 1, btype)
                    next_state = state - binit
                    idx_tokens = [tokens[pos + n + i] if pos + n + i < len(tokens) else None for i in range(nidx)]
                    q = tokens_to_index(idx_tokens)
                    n += nidx
                    n += self.derive(tokens, pos + n, q + 1, binit, prev)
            elif kind[0] == "ring":
                _, rtype, nidx = kind
                if state == 0:
                    next_state = state
                else:
                    order = min(rtype, state)
                    left = state - order
                    next_state = left if left else None
                    idx_tokens = [tokens[pos + n + i] if pos + n + i < len(tokens) else None for i in range(nidx)]
                    q = tokens_to_index(idx_tokens)
                    n += nidx
                    assert prev is not None
                    self.rings.append((max(0, prev - (q + 1)), prev, order))
            else:
                _, border, sym, hyd, charge = kind
                cap = CAPACITY[(sym, charge)] - (hyd or 0)
                if state == 0:
                    border = 0
                border = min(border, state, cap)
                left = cap - border
                next_state = left if left else None
                if border == 0:
                    if state == 0:
                        prev = self.add_atom(sym, hyd, charge)
                    # otherwise the atom cannot attach and is dropped
                else:
                    atom = self.add_atom(sym, hyd, charge)
                    assert prev is not None
                    self.add_bond(prev, atom, border)
                    prev = atom
            if next_state is None:
                break
            state = next_state
        # tokens left in this scope are consumed without effect
        while n < limit and pos + n < len(tokens):
            n += 1
        return n

    def close_rings(self) -> None:
        for left, right, order in self.rings:
            if left == right:
                continue
            lfree = self.capacity[left] - self.used[left]
            rfree = self.capacity[right] - self.used[right]
            if lfree <= 0 or rfree <= 0:
                continue
            order = min(order, lfree, rfree)
            key = (min(left, right), max(left, right))
            if key in self.bonds:
                old = self.bonds[key]
                new = min(old + order, 3)
                self.bonds[key] = new
                self.used[left] += new - old
                self.used[right] += new - old
            else:
                self.add_bond(left, right, order)

    def graph(self) -> MolecularGraph:
        atoms = []
        for i, sym in enumerate(self.symbols):
            base = self.used[i] + (self.explicit_h[i] or 0)
            total = base
            for v in allowed_valences(sym, self.charges[i]):
                if v >= base:
                    total = v
                    break
            atoms.append(Atom(sym, self.charges[i], total - self.used[i]))
        bonds = [Bond(a, b, o) for (a, b), o in sorted(self.bonds.items())]
        return build_graph(atoms, bonds)


def decode_selfies(tokens: list[str] | str) -> MolecularGraph:
    """Decode a SELFIES token list (or string) into a molecular graph.

    Raises UnknownToken for tokens outside the alphabet; never a valence error.
    """
    if isinstance(tokens, str):
        tokens = split_selfies(tokens)
    tokens = [t for t in tokens if t != NOP]
    for t in tokens:
        _classify(t)
    d = _Derivation()
    d.derive(tokens, 0, float("inf"), 0, None)
    d.close_rings()
    return d.graph()


@lru_cache(maxsize=65536)
def _selfies_key_cached(tokens: tuple[str, ...]) -> str:
    return canonical_key(decode_selfies(list(tokens)))


def selfies_to_key(tokens: list[str]) -> str:
    """Canonical structure key of a decoded token list (cached)."""
    return _selfies_key_cached(tuple(tokens))


# ------------------------------------------------------------------ encode


def _atom_token(g: MolecularGraph, i: int, bond_order: int | None, text: str) -> str:
    a = g.atoms[i]
    prefix = "" if bond_order is None else _PREFIX_OF[bond_order]
    if not text.startswith("["):
        return f"[{prefix}{a.symbol}]"
    body = a.symbol
    if a.hydrogens:
        body += f"H{a.hydrogens}"
    if a.charge:
        body += f"{a.charge:+d}"
    return f"[{prefix}{body}]"


def encode_selfies(g: MolecularGraph) -> list[str]:
    """Encode a connected molecular graph as canonical SELFIES tokens."""
    if g.num_atoms == 0:
        raise UnsupportedFeature("empty graph")
    if not g.is_connected():
        raise UnsupportedFeature("multi-fragment graphs are not supported")
    _, ranks = _canonical_search(g, kekule=True)
    plan = _plan(g, ranks)
    position = {atom: p for p, atom in enumerate(plan.order)}
    texts = [_atom_text(g, i, True) or "" for i in range(g.num_atoms)]
    for i, a in enumerate(g.atoms):
        cap = CAPACITY.get((a.symbol, a.charge))
        if cap is None:
            raise UnsupportedFeature(f"no token for {a.symbol} with charge {a.charge}")
        # implicit hydrogens do not consume bonding capacity; explicit ones do
        load = g.bond_order_sum(i) + (a.hydrogens if texts[i].startswith("[") else 0)
        if load > cap:
            raise UnsupportedFeature(
                f"atom {i} ({a.symbol}) exceeds the SELFIES bonding capacity {cap}"
            )

    def fragment(u: int, in_order: int | None) -> list[str]:
        out: list[str] = []
        while True:
            out.append(_atom_token(g, u, in_order, texts[u]))
            for partner, k, is_closer in plan.rings[u]:
                if not is_closer:
                    continue
                ring_len = position[u] - position[partner]
                q = index_to_tokens(ring_len - 1)
                out.append(f"[{_PREFIX_OF[g.bonds[k].order]}Ring{len(q)}]")
                out.extend(q)
            kids = plan.children[u]
            if not kids:
                return out
            for v, k in kids[:-1]:
                branch = fragment(v, g.bonds[k].order)
                q = index_to_tokens(len(branch) - 1)
                out.append(f"[{_PREFIX_OF[g.bonds[k].order]}Branch{len(q)}]")
                out.extend(q)
                out.extend(branch)
            v, k = kids[-1]
            u, in_order = v, g.bonds[k].order

    return fragment(plan.roots[0], None)


def selfies_string(tokens: list[str]) -> str:
    return "".join(tokens)
