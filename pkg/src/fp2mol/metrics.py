"""Evaluation metrics: Top-k accuracy, Top-k max Tanimoto, Top-k min MCES."""

from __future__ import annotations

import csv
import json
from collections import Counter
from collections.abc import Sequence
from dataclasses import asdict, dataclass, field
from pathlib import Path

from .chem import MolecularGraph, canonical_key, parse_smiles
from .fingerprint import EVAL_BITS, morgan_fingerprint, tanimoto

DEFAULT_MCES_BUDGET = 200_000
KEY_TYPE = "canonical-smiles (stereo-free, internal)"


class JoinError(KeyError):
    pass


# ------------------------------------------------------------------ MCES


def _edge_labels(g: MolecularGraph) -> list[tuple[str, str, int]]:
    out = []
    for b in g.bonds:
        s1, s2 = sorted((g.atoms[b.begin].symbol, g.atoms[b.end].symbol))
        out.append((s1, s2, b.code))
    return out


def _bfs_order(g: MolecularGraph) -> list[int]:
    seen: set[int] = set()
    order: list[int] = []
    for start in sorted(range(g.num_atoms), key=lambda i: -g.degree(i)):
        if start in seen:
            continue
        seen.add(start)
        queue = [start]
        while queue:
            u = queue.pop(0)
            order.append(u)
            for v, _ in sorted(g.neighbors[u], key=lambda t: -g.degree(t[0])):
                if v not in seen:
                    seen.add(v)
                    queue.append(v)
    return order


class _MCES:
    """Branch and bound over atom correspondences.

    Each G1 atom (in BFS order) is mapped to an unused G2 atom of the same
    element or left unmapped; a G1 bond counts as common when both ends are
    mapped onto a G2 bond with the same label. The bound counts, per label,
    open G1 bonds against G2 bonds that could still receive them.
    """

    def __init__(self, g1: MolecularGraph, g2: MolecularGraph, budget: int):
        self.g1, self.g2, self.budget = g1, g2, budget
        self.order = _bfs_order(g1)
        self.lab1 = _edge_labels(g1)
        self.lab2 = _edge_labels(g2)
        self.adj2: dict[tuple[int, int], int] = {}
        for k, b in enumerate(g2.bonds):
            self.adj2[(b.begin, b.end)] = self.adj2[(b.end, b.begin)] = b.code
        self.nodes = 0
        self.exact = True
        self.best = 0
        self.map: dict[int, int | None] = {}
        self.used2: set[int] = set()

    def gain(self, u: int, v: int) -> int:
        n = 0
        for w, k in self.g1.neighbors[u]:
            img = self.map.get(w)
            if img is not None and self.adj2.get((v, img)) == self.g1.bonds[k].code:
                n += 1
        return n

    def bound(self) -> int:
        # bonds from a mapped atom to an unassigned one can only use free bonds
        # at its image; bonds between unassigned atoms only G2 bonds between
        # unused atoms. The two G2 pools are disjoint.
        per_atom: dict[int, Counter] = {}
        inner1: Counter = Counter()
        for k, b in enumerate(self.g1.bonds):
            a, c = b.begin, b.end
            ma, mc = a in self.map, c in self.map
            if ma and mc:
                continue
            if not ma and not mc:
                inner1[self.lab1[k]] += 1
                continue
            mapped, other = (a, c) if ma else (c, a)
            if self.map[mapped] is None:
                continue
            per_atom.setdefault(mapped, Counter())[(self.g1.atoms[other].symbol, b.code)] += 1
        total = 0
        for u, need in per_atom.items():
            v = self.map[u]
            have: Counter = Counter()
            for w, k in self.g2.neighbors[v]:
                if w not in self.used2:
                    have[(self.g2.atoms[w].symbol, self.g2.bonds[k].code)] += 1
            total += sum(min(n, have[lab]) for lab, n in need.items())
        if inner1:
            inner2: Counter = Counter()
            for k, b in enumerate(self.g2.bonds):
                if b.begin not in self.used2 and b.end not in self.used2:
                    inner2[self.lab2[k]] += 1
            total += sum(min(n, inner2[lab]) for lab, n in inner1.items())
        return total

    def greedy(self) -> int:
        """Best of several greedy completions, one per image of the first atom."""
        first = self.order[0]
        best = 0
        for start in range(self.g2.num_atoms):
            if self.g2.atoms[start].symbol != self.g1.atoms[first].symbol:
                continue
            total = 0
            for u in self.order:
                best_v, best_gain = None, -1
                for v in [start] if u == first else range(self.g2.num_atoms):
                    if v in self.used2 or self.g2.atoms[v].symbol != self.g1.atoms[u].symbol:
                        continue
                    gval = self.gain(u, v)
                    if gval > best_gain:
                        best_v, best_gain = v, gval
                self.map[u] = best_v
                if best_v is not None:
                    self.used2.add(best_v)
                    total += best_gain
            self.map.clear()
            self.used2.clear()
            best = max(best, total)
        return best

    def search(self, depth: int, score: int) -> None:
        if score > self.best:
            self.best = score
        if depth == len(self.order):
            return
        self.nodes += 1
        if self.nodes > self.budget:
            self.exact = False
            return
        if score + self.bound() <= self.best:
            return
        u = self.order[depth]
        sym = self.g1.atoms[u].symbol
        options = [
            (self.gain(u, v), v)
            for v in range(self.g2.num_atoms)
            if v not in self.used2 and self.g2.atoms[v].symbol == sym
        ]
        options.sort(key=lambda t: (-t[0], t[1]))
        for gval, v in options:
            self.map[u] = v
            self.used2.add(v)
            self.search(depth + 1, score + gval)
            self.used2.discard(v)
            del self.map[u]
            if not self.exact:
                return
        self.map[u] = None
        self.search(depth + 1, score)
        del self.map[u]


def max_common_edges(g1: MolecularGraph, g2: MolecularGraph, budget: int = DEFAULT_MCES_BUDGET) -> tuple[int, bool]:
    """Size of the maximum common edge subgraph and whether the search finished."""
    if g1.num_bonds == 0 or g2.num_bonds == 0:
        return 0, True
    # branch on the graph with fewer atoms
    if g1.num_atoms > g2.num_atoms:
        g1, g2 = g2, g1
    solver = _MCES(g1, g2, budget)
    solver.best = solver.greedy()
    solver.search(0, 0)
    return solver.best, solver.exact


def mces_distance(g1: MolecularGraph, g2: MolecularGraph, budget: int = DEFAULT_MCES_BUDGET) -> tuple[int, bool]:
    """|E1| + |E2| - 2|E(MCES)|; exact=False means the distance is an upper bound."""
    if budget <= 0:
        raise ValueError("budget must be positive")
    common, exact = max_common_edges(g1, g2, budget)
    return g1.num_bonds + g2.num_bonds - 2 * common, exact


def mces_lower_bound(g1: MolecularGraph, g2: MolecularGraph) -> int:
    """Cheap lower bound on the MCES distance from edge-label multisets."""
    c1, c2 = Counter(_edge_labels(g1)), Counter(_edge_labels(g2))
    common = sum(min(n, c2[lab]) for lab, n in c1.items())
    return g1.num_bonds + g2.num_bonds - 2 * common


# ------------------------------------------------------------------ top-k metrics


def top_k_accuracy(pred_keys: Sequence[str], gold_key: str, k: int) -> int:
    return int(gold_key in list(pred_keys[:k]))


def top_k_max_tanimoto(preds: Sequence[MolecularGraph], gold: MolecularGraph, k: int) -> float:
    if k < 1:
        raise ValueError("k must be >= 1")
    gold_fp = morgan_fingerprint(gold, 2, EVAL_BITS)
    return max((tanimoto(morgan_fingerprint(p, 2, EVAL_BITS), gold_fp) for p in preds[:k]), default=0.0)


def top_k_min_mces(
    preds: Sequence[MolecularGraph], gold: MolecularGraph, k: int, budget: int = DEFAULT_MCES_BUDGET
) -> tuple[int | None, bool]:
    """Minimum MCES over the first k predictions; None if there are none."""
    best, exact = None, True
    for p in preds[:k]:
        d, ex = mces_distance(p, gold, budget)
        if best is None or d < best:
            best, exact = d, ex
        elif d == best:
            exact = exact and ex
    return best, exact


# ------------------------------------------------------------------ reports


@dataclass
class SpectrumResult:
    id: str
    gold_key: str
    n_candidates: int
    hit: dict[int, int]
    max_tanimoto: dict[int, float]
    min_mces: dict[int, int]
    mces_exact: dict[int, bool]
    empty: bool


@dataclass
class EvalReport:
    key_type: str
    ks: tuple[int, ...]
    records: list[SpectrumResult]
    aggregates: dict[str, float]
    config: dict = field(default_factory=dict)
    n_empty: int = 0
    n_inexact_mces: int = 0

    def to_json(self) -> str:
        doc = {
            "key_type": self.key_type,
            "ks": list(self.ks),
            "aggregates": self.aggregates,
            "n_empty": self.n_empty,
            "n_inexact_mces": self.n_inexact_mces,
            "config": self.config,
            "records": [asdict(r) for r in self.records],
        }
        return json.dumps(doc, indent=1, sort_keys=True)

    def write(self, json_path: str | Path, csv_path: str | Path | None = None) -> None:
        Path(json_path).write_text(self.to_json() + "\n", encoding="utf-8")
        if csv_path is None:
            return
        with open(csv_path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            header = ["id", "gold_key", "n_candidates", "empty"]
            for k in self.ks:
                header += [f"top{k}_hit", f"top{k}_max_tanimoto", f"top{k}_min_mces", f"top{k}_mces_exact"]
            w.writerow(header)
            for r in self.records:
                row: list = [r.id, r.gold_key, r.n_candidates, int(r.empty)]
                for k in self.ks:
                    row += [r.hit[k], f"{r.max_tanimoto[k]:.6f}", r.min_mces[k], int(r.mces_exact[k])]
                w.writerow(row)


def evaluate_candidates(
    ranked: dict[str, list[str]],
    gold: dict[str, str],
    ks: Sequence[int] = (1, 10),
    budget: int = DEFAULT_MCES_BUDGET,
    config: dict | None = None,
    with_mces: bool = True,
) -> EvalReport:
    """Evaluate ranked candidate SMILES per id against gold SMILES per id.

    Empty candidate lists score accuracy 0 and Tanimoto 0; their MCES is the
    sentinel |E_gold| (distance to the empty graph), and they are counted in
    n_empty so aggregates can be read with or without them.
    """
    missing = sorted(set(gold) - set(ranked))
    if missing:
        raise JoinError(f"no predictions for ids: {missing[:5]}{'...' if len(missing) > 5 else ''}")
    extra = sorted(set(ranked) - set(gold))
    if extra:
        raise JoinError(f"predictions for unknown ids: {extra[:5]}")
    ks = tuple(sorted(ks))
    records = []
    for sid in sorted(gold):
        g_gold = parse_smiles(gold[sid])
        gold_key = canonical_key(g_gold)
        preds = [parse_smiles(s) for s in ranked[sid]]
        keys = [canonical_key(p) for p in preds]
        hit, tani, mces, exact = {}, {}, {}, {}
        for k in ks:
            hit[k] = top_k_accuracy(keys, gold_key, k)
            tani[k] = top_k_max_tanimoto(preds, g_gold, k)
            if not with_mces:
                mces[k], exact[k] = -1, True
                continue
            if hit[k]:
                mces[k], exact[k] = 0, True
            else:
                d, ex = top_k_min_mces(preds, g_gold, k, budget)
                mces[k], exact[k] = (g_gold.num_bonds, True) if d is None else (d, ex)
        records.append(SpectrumResult(sid, gold_key, len(preds), hit, tani, mces, exact, not preds))
    agg: dict[str, float] = {}
    n = len(records)
    nonempty = [r for r in records if not r.empty]
    for k in ks:
        agg[f"top{k}_accuracy"] = sum(r.hit[k] for r in records) / n if n else 0.0
        agg[f"top{k}_max_tanimoto"] = sum(r.max_tanimoto[k] for r in records) / n if n else 0.0
        if with_mces:
            agg[f"top{k}_min_mces"] = sum(r.min_mces[k] for r in records) / n if n else 0.0
            agg[f"top{k}_min_mces_nonempty"] = (
                sum(r.min_mces[k] for r in nonempty) / len(nonempty) if nonempty else 0.0
            )
    return EvalReport(
        KEY_TYPE,
        ks,
        records,
        agg,
        dict(config or {}),
        n_empty=n - len(nonempty),
        n_inexact_mces=sum(1 for r in records if not all(r.mces_exact.values())),
    )
