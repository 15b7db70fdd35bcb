"""Corpus records, pretraining examples, leakage filtering and noisy fingerprints."""

from __future__ import annotations

import json
import logging
import math
from collections.abc import Callable, Iterable, Iterator, Sequence
from dataclasses import dataclass, field
from enum import IntEnum
from pathlib import Path

import numpy as np

from .chem import (
    Atom,
    Bond,
    ChemError,
    Formula,
    MolecularGraph,
    build_graph,
    canonical_key,
    molecular_formula,
    parse_smiles,
)
from .fingerprint import (
    EVAL_BITS,
    FP_BITS,
    Fingerprint,
    ProbabilityVector,
    iter_probabilities,
    morgan_fingerprint,
    tanimoto,
    threshold_probabilities,
)
from .metrics import DEFAULT_MCES_BUDGET, mces_distance, mces_lower_bound
from .selfies_codec import UnsupportedFeature, encode_selfies
from .vocab import UnifiedVocab

log = logging.getLogger(__name__)

MAX_LEN_PRETRAIN = 512
MAX_LEN_FINETUNE = 256
MASK_RATE = 0.3


class Task(IntEnum):
    DENOISE = 1  # masked SELFIES -> SELFIES
    TRANSLATE = 2  # fingerprint -> SELFIES
    HYBRID_FP_FIRST = 3  # fingerprint <fps_sep> masked SELFIES -> SELFIES
    HYBRID_S_FIRST = 4  # masked SELFIES <fps_sep> fingerprint -> SELFIES


@dataclass(frozen=True)
class CorpusRecord:
    id: str
    smiles: str  # canonical
    selfies: tuple[str, ...]
    fp4096: Fingerprint
    formula: Formula
    split: str = "train"
    source_id: str | None = None

    @classmethod
    def from_graph(cls, rid: str, g: MolecularGraph, split: str = "train", source_id: str | None = None) -> CorpusRecord:
        return cls(
            rid,
            canonical_key(g),
            tuple(encode_selfies(g)),
            morgan_fingerprint(g, 2, FP_BITS),
            molecular_formula(g),
            split,
            source_id,
        )

    @classmethod
    def from_smiles(cls, rid: str, smiles: str, split: str = "train", source_id: str | None = None) -> CorpusRecord:
        return cls.from_graph(rid, parse_smiles(smiles), split, source_id)

    def graph(self) -> MolecularGraph:
        return parse_smiles(self.smiles)

    def to_json(self) -> dict:
        doc = {
            "id": self.id,
            "smiles": self.smiles,
            "selfies": "".join(self.selfies),
            "fp_bits": self.fp4096.on_bits(),
            "formula": self.formula.to_dict(),
            "split": self.split,
        }
        if self.source_id is not None:
            doc["source_id"] = self.source_id
        return doc

    @classmethod
    def from_json(cls, doc: dict) -> CorpusRecord:
        from .selfies_codec import split_selfies

        return cls(
            str(doc["id"]),
            doc["smiles"],
            tuple(split_selfies(doc["selfies"])),
            Fingerprint.from_indices(FP_BITS, doc["fp_bits"]),
            Formula(doc["formula"]),
            doc.get("split", "train"),
            doc.get("source_id"),
        )


def write_corpus(path: str | Path, records: Iterable[CorpusRecord]) -> int:
    n = 0
    with open(path, "w", encoding="utf-8") as fh:
        for r in records:
            fh.write(json.dumps(r.to_json(), sort_keys=True) + "\n")
            n += 1
    return n


def read_corpus(path: str | Path) -> list[CorpusRecord]:
    with open(path, encoding="utf-8") as fh:
        return [CorpusRecord.from_json(json.loads(line)) for line in fh if line.strip()]


def records_from_smiles(smiles: Iterable[str], split: str = "train", prefix: str = "mol") -> tuple[list[CorpusRecord], int]:
    """Build records, skipping unparsable or unencodable inputs; returns (records, skipped)."""
    out, skipped = [], 0
    for i, s in enumerate(smiles):
        try:
            out.append(CorpusRecord.from_smiles(f"{prefix}{i}", s, split))
        except (ChemError, UnsupportedFeature) as exc:
            log.debug("skipping %r: %s", s, exc)
            skipped += 1
    return out, skipped


# ------------------------------------------------------------------ pretraining examples


def mask_selfies(tokens: Sequence[str], rate: float = MASK_RATE, rng: np.random.Generator | None = None, mask_token: str = "<mask>") -> list[str]:
    """Replace exactly round-half-up(rate * n) tokens by the mask token."""
    if not 0.0 <= rate < 1.0:
        raise ValueError("mask rate must be in [0, 1)")
    n = len(tokens)
    k = math.floor(rate * n + 0.5)
    out = list(tokens)
    if k == 0:
        return out
    rng = rng if rng is not None else np.random.default_rng()
    for i in rng.choice(n, size=k, replace=False):
        out[int(i)] = mask_token
    return out


@dataclass(frozen=True)
class PretrainExample:
    task: Task
    source: tuple[int, ...]
    target: tuple[int, ...]


@dataclass
class OverflowCounter:
    count: int = 0
    by_task: dict[int, int] = field(default_factory=dict)

    def add(self, task: int) -> None:
        self.count += 1
        self.by_task[task] = self.by_task.get(task, 0) + 1


def make_pretrain_example(
    task: Task | int,
    rec: CorpusRecord,
    vocab: UnifiedVocab,
    rng: np.random.Generator,
    max_len: int = MAX_LEN_PRETRAIN,
    overflow: OverflowCounter | None = None,
    mask_rate: float = MASK_RATE,
) -> PretrainExample | None:
    """Source layout per task; target is BOS + SELFIES + EOS.

    Every source ends in EOS so that an all-zero fingerprint still yields a
    non-empty encoder input. Returns None (and counts it) if either side
    exceeds max_len.
    """
    task = Task(task)
    fp = vocab.fp_ids(rec.fp4096)
    target = vocab.target_ids(rec.selfies)
    if task == Task.TRANSLATE:
        source = fp
    else:
        masked = [vocab.token_id(t) for t in mask_selfies(rec.selfies, mask_rate, rng)]
        if task == Task.DENOISE:
            source = masked
        elif task == Task.HYBRID_FP_FIRST:
            source = fp + [vocab.sep_id] + masked
        else:
            source = masked + [vocab.sep_id] + fp
    source = source + [vocab.eos_id]
    if len(source) > max_len or len(target) > max_len:
        if overflow is not None:
            overflow.add(int(task))
        return None
    return PretrainExample(task, tuple(source), tuple(target))


def translation_example(
    fp: Fingerprint, selfies: Sequence[str] | None, vocab: UnifiedVocab, max_len: int = MAX_LEN_FINETUNE
) -> tuple[tuple[int, ...], tuple[int, ...] | None] | None:
    """Fingerprint-only source (task 2 layout) and optional target for fine-tuning/inference."""
    source = vocab.fp_ids(fp) + [vocab.eos_id]
    target = vocab.target_ids(selfies) if selfies is not None else None
    if len(source) > max_len or (target is not None and len(target) > max_len):
        return None
    return tuple(source), (tuple(target) if target is not None else None)


def record_rng(seed: int, epoch: int, index: int) -> np.random.Generator:
    """Independent generator per (seed, epoch, record index): order-independent output."""
    return np.random.default_rng([seed, epoch, index])


def sample_task(rng: np.random.Generator) -> Task:
    """Uniform over the four pretraining tasks."""
    return Task(int(rng.integers(1, 5)))


def pretrain_epoch(
    records: Sequence[CorpusRecord],
    vocab: UnifiedVocab,
    seed: int,
    epoch: int,
    max_len: int = MAX_LEN_PRETRAIN,
    overflow: OverflowCounter | None = None,
) -> list[PretrainExample]:
    """One example per record with a uniformly sampled task."""
    out = []
    for i, rec in enumerate(records):
        rng = record_rng(seed, epoch, i)
        task = sample_task(rng)
        ex = make_pretrain_example(task, rec, vocab, rng, max_len, overflow)
        if ex is not None:
            out.append(ex)
    return out


# ------------------------------------------------------------------ leakage filtering


@dataclass
class LeakageStats:
    kept: int = 0
    removed_exact: int = 0
    removed_similar: int = 0
    removed_inexact: int = 0


def leakage_filter(
    pool: Sequence[MolecularGraph],
    test_refs: Sequence[MolecularGraph],
    mode: str = "tanimoto_gt_0.5",
    mces_budget: int = DEFAULT_MCES_BUDGET,
    threshold: float = 0.5,
    stats: LeakageStats | None = None,
) -> list[int]:
    """Indices of pool molecules kept after removing test-set look-alikes.

    tanimoto mode removes max Tanimoto (radius 2, 2048 bits) > threshold;
    mces mode removes MCES distance < 2 (searches that run out of budget are
    removed too). Exact structure matches are always removed.
    """
    if not test_refs:
        raise ValueError("test_refs must be non-empty")
    if mode not in ("tanimoto_gt_0.5", "mces_lt2"):
        raise ValueError(f"unknown leakage mode {mode!r}")
    stats = stats if stats is not None else LeakageStats()
    ref_keys = {canonical_key(g) for g in test_refs}
    ref_fps = [morgan_fingerprint(g, 2, EVAL_BITS) for g in test_refs] if mode == "tanimoto_gt_0.5" else []
    keep = []
    for idx, g in enumerate(pool):
        if canonical_key(g) in ref_keys:
            stats.removed_exact += 1
            continue
        if mode == "tanimoto_gt_0.5":
            fp = morgan_fingerprint(g, 2, EVAL_BITS)
            if any(tanimoto(fp, r) > threshold for r in ref_fps):
                stats.removed_similar += 1
                continue
        else:
            leaked = False
            for r in test_refs:
                if mces_lower_bound(g, r) >= 2:
                    continue
                d, exact = mces_distance(g, r, mces_budget)
                if d < 2:
                    leaked = True
                    stats.removed_similar += 1
                    break
                if not exact:
                    leaked = True
                    stats.removed_inexact += 1
                    break
            if leaked:
                continue
        keep.append(idx)
    stats.kept = len(keep)
    return keep


# ------------------------------------------------------------------ noisy probabilities


@dataclass(frozen=True)
class NoiseModel:
    """Stand-in for a spectrum-to-fingerprint predictor's calibrated output."""

    p_flip_on_off: float = 0.1
    p_flip_off_on: float = 0.002
    prob_sharpness: float = 30.0
    seed: int = 0

    def __post_init__(self) -> None:
        for name in ("p_flip_on_off", "p_flip_off_on"):
            v = getattr(self, name)
            if not 0.0 <= v < 1.0:
                raise ValueError(f"{name} must be in [0, 1)")
        if not self.prob_sharpness > 0:
            raise ValueError("prob_sharpness must be positive")


def simulate_noisy_probs(fp: Fingerprint, nm: NoiseModel, rng: np.random.Generator, source_id: str = "") -> ProbabilityVector:
    """High regime ~ Beta(s, 1), low regime ~ Beta(1, s); s = inf gives exact 1/0.

    On-bits land in the high regime with probability 1 - p_flip_on_off;
    off-bits land in the high regime with probability p_flip_off_on.
    """
    if fp.nbits != FP_BITS:
        raise ValueError(f"fingerprint must have {FP_BITS} bits")
    on = fp.to_array().astype(bool)
    u = rng.random(FP_BITS)
    high = np.where(on, u >= nm.p_flip_on_off, u < nm.p_flip_off_on)
    s = nm.prob_sharpness
    if math.isinf(s):
        probs = high.astype(np.float64)
    else:
        hi = rng.beta(s, 1.0, FP_BITS)
        lo = rng.beta(1.0, s, FP_BITS)
        probs = np.where(high, hi, lo)
    return ProbabilityVector(np.clip(probs, 0.0, 1.0), source_id)


# ------------------------------------------------------------------ experimental fingerprints


def ingest_experimental(
    path: str | Path, eps: float, keep: Callable[[str], bool] | None = None
) -> tuple[list[tuple[str, Fingerprint]], int]:
    """Threshold every record of a probability file; returns (fingerprints, skipped).

    keep is an optional predicate on the record id (e.g. to drop [M+Na]+
    spectra); rejected records are dropped without counting as malformed.
    """
    out, skipped = [], 0
    for rid, item in iter_probabilities(path):
        if isinstance(item, Exception):
            log.warning("skipping malformed record %s: %s", rid, item)
            skipped += 1
            continue
        if keep is not None and not keep(rid):
            continue
        out.append((rid, threshold_probabilities(item, eps)))  # type: ignore[arg-type]
    return out, skipped


# ------------------------------------------------------------------ toy molecules

_RING_FRAGMENTS = ("c1ccccc1", "c1ccncc1", "c1ccoc1", "c1ccsc1", "c1cc[nH]c1", "C1CCCCC1", "C1CCCC1")
_ATOM_FRAGMENTS = ("C", "C", "C", "C", "N", "O", "S", "F", "Cl", "Br")
# functional groups attach through their first atom
_GROUP_FRAGMENTS = (
    "C#N", "C#C", "[NH+](=O)[O-]", "[SH](=O)(=O)C", "[PH](=O)(O)O", "B(O)O",
    "C(=O)[O-]", "[NH4+]", "C=S", "I", "N=O", "[SH](=O)C", "c1cc[nH+]cc1",
    "C=[N+]=[N-]", "[NH+]#[C-]", "C(=[NH2+])N", "[PH4+]", "[BH4-]", "C=P",
    "[SH+](C)C", "c1cc[n+]([O-])cc1", "C#[N+][O-]", "[CH3-]", "[CH3+]",
    "N=[N+]=[N-]", "[OH+](C)C", "[SH](=O)(=O)[O-]", "[NH2-]", "[SH-]", "C=[O+]C",
)


def _fragment_parts(smiles: str) -> tuple[list[Atom], list[Bond]]:
    g = parse_smiles(smiles)
    return list(g.atoms), list(g.bonds)


class ToyMoleculeGenerator:
    """Grows small drug-like graphs from ring and atom fragments joined by single bonds."""

    def __init__(self, seed: int = 0, min_atoms: int = 3, max_atoms: int = 12):
        self.rng = np.random.default_rng(seed)
        self.min_atoms, self.max_atoms = min_atoms, max_atoms
        self._parts = {
            s: _fragment_parts(s) for s in _RING_FRAGMENTS + tuple(dict.fromkeys(_ATOM_FRAGMENTS)) + _GROUP_FRAGMENTS
        }

    def _one(self) -> MolecularGraph:
        rng = self.rng
        target = int(rng.integers(self.min_atoms, self.max_atoms + 1))
        atoms: list[Atom] = []
        bonds: list[Bond] = []

        def add(frag: str) -> int:
            fa, fb = self._parts[frag]
            base = len(atoms)
            atoms.extend(Atom(a.symbol, a.charge, a.hydrogens) for a in fa)
            bonds.extend(Bond(b.begin + base, b.end + base, b.order) for b in fb)
            return base

        start = _RING_FRAGMENTS[rng.integers(len(_RING_FRAGMENTS))] if rng.random() < 0.6 else "C"
        add(start)
        for _ in range(50):
            if len(atoms) >= target:
                break
            sites = [i for i, a in enumerate(atoms) if a.hydrogens > 0 and a.symbol not in ("F", "Cl", "Br", "I")]
            if not sites:
                break
            site = int(sites[rng.integers(len(sites))])
            room = target - len(atoms)
            r = rng.random()
            if r < 0.2 and room >= 5:
                frag = _RING_FRAGMENTS[rng.integers(len(_RING_FRAGMENTS))]
                if len(self._parts[frag][0]) > room:
                    continue
            elif r < 0.3 and atoms[site].symbol == "C" and atoms[site].hydrogens >= 2 and not self._in_ring(site, bonds):
                # carbonyl or imine
                sym = "O" if rng.random() < 0.7 else "N"
                atoms.append(Atom(sym, 0, 0 if sym == "O" else 1))
                a = atoms[site]
                atoms[site] = Atom(a.symbol, a.charge, a.hydrogens - 2)
                bonds.append(Bond(site, len(atoms) - 1, 2))
                continue
            elif r < 0.38:
                frag = _GROUP_FRAGMENTS[rng.integers(len(_GROUP_FRAGMENTS))]
                if len(self._parts[frag][0]) > room:
                    continue
            else:
                frag = _ATOM_FRAGMENTS[rng.integers(len(_ATOM_FRAGMENTS))]
            base = add(frag)
            if frag in _GROUP_FRAGMENTS:
                cands = [base]
            else:
                cands = [base + i for i, a in enumerate(self._parts[frag][0]) if a.hydrogens > 0]
            if not cands:
                del atoms[base:]
                continue
            other = int(cands[rng.integers(len(cands))])
            for idx in (site, other):
                a = atoms[idx]
                atoms[idx] = Atom(a.symbol, a.charge, a.hydrogens - 1)
            bonds.append(Bond(site, other, 1))
        return build_graph(atoms, bonds)

    @staticmethod
    def _in_ring(i: int, bonds: list[Bond]) -> bool:
        from .chem import _ring_bond_indices

        n = 1 + max([max(b.begin, b.end) for b in bonds] + [i])
        ring = _ring_bond_indices(n, bonds)
        return any(i in (bonds[k].begin, bonds[k].end) for k in ring)

    def molecules(self, n: int) -> list[MolecularGraph]:
        """n distinct (by canonical key) molecules within the size range."""
        out: list[MolecularGraph] = []
        seen: set[str] = set()
        attempts = 0
        while len(out) < n:
            attempts += 1
            if attempts > 50 * n + 1000:
                raise RuntimeError("toy generator could not find enough distinct molecules")
            g = self._one()
            if not self.min_atoms <= g.num_atoms <= self.max_atoms:
                continue
            key = canonical_key(g)
            if key in seen:
                continue
            try:
                encode_selfies(g)
            except UnsupportedFeature:
                continue
            seen.add(key)
            out.append(parse_smiles(key))
        return out


def split_held_out(
    graphs: Sequence[MolecularGraph], n_test: int, max_similarity: float = 0.5, seed: int = 0
) -> tuple[list[int], list[int]]:
    """Pick n_test molecules, then drop train molecules too similar to any of them.

    Returns (train indices, test indices); every kept train molecule has max
    Tanimoto (radius 2, 2048 bits) <= max_similarity to the test set.
    """
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(graphs))
    test = sorted(int(i) for i in order[:n_test])
    rest = [int(i) for i in order[n_test:]]
    keep_local = leakage_filter([graphs[i] for i in rest], [graphs[i] for i in test], "tanimoto_gt_0.5", threshold=max_similarity)
    train = sorted(rest[i] for i in keep_local)
    return train, test


def iter_smiles_file(path: str | Path) -> Iterator[str]:
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line and not line.startswith("#"):
                yield line.split()[0]
