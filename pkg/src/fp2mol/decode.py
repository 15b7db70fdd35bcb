"""Beam-search multinomial sampling and formula re-ranking."""

from __future__ import annotations

import json
import logging
from collections.abc import Mapping, Sequence
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .chem import Formula, MolecularGraph, canonical_key, formula_distance, molecular_formula
from .model import Seq2Seq, pad_batch
from .selfies_codec import decode_selfies
from .vocab import UnifiedVocab

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class DecodeConfig:
    beam_width: int = 20
    num_return: int = 100
    temperature: float = 1.0
    length_penalty: float = 1.0
    max_len: int = 128
    seed: int = 0
    max_passes: int = 5
    batch_size: int = 16

    def __post_init__(self) -> None:
        if self.beam_width < 1 or self.num_return < 1 or self.max_len < 1 or self.max_passes < 1:
            raise ValueError("beam_width, num_return, max_len and max_passes must be positive")
        if not self.temperature > 0:
            raise ValueError("temperature must be positive")


@dataclass
class Candidate:
    key: str
    selfies: tuple[str, ...]
    ids: tuple[int, ...]  # generated ids after BOS, EOS included when produced
    score: float
    graph: MolecularGraph = field(repr=False, compare=False)
    formula_distance: int | None = None

    @property
    def smiles(self) -> str:
        return self.key

    def to_json(self, rank: int) -> dict:
        return {
            "rank": rank,
            "smiles": self.key,
            "selfies": "".join(self.selfies),
            "score": round(self.score, 6),
            "formula_distance": self.formula_distance,
        }


@dataclass
class _Hyp:
    ids: list[int]
    logp: float  # untempered cumulative log-probability


def _gumbel_top_k(logw: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    """Sample k distinct indices with probability proportional to exp(logw), sequentially without replacement."""
    finite = np.isfinite(logw)
    k = min(k, int(finite.sum()))
    keys = np.where(finite, logw + rng.gumbel(size=logw.shape), -np.inf)
    top = np.argpartition(-keys, k - 1)[:k] if k < len(keys) else np.arange(len(keys))
    return top[np.lexsort((top, -keys[top]))]


def _normalized(logp: float, length: int, length_penalty: float) -> float:
    return logp / (length ** length_penalty)


@torch.no_grad()
def beam_sample(
    model: Seq2Seq,
    vocab: UnifiedVocab,
    sources: Sequence[Sequence[int]],
    cfg: DecodeConfig,
    rngs: Sequence[np.random.Generator],
) -> list[list[tuple[tuple[int, ...], float]]]:
    """One pass of beam sampling per source; returns finished (ids, score) lists.

    At each step every input samples 2W (beam, token) expansions without
    replacement with weights exp(cumulative logp + log softmax(logits / T)),
    keeps the best W by untempered score, and finishes hypotheses that emit EOS.
    """
    model.eval()
    width = cfg.beam_width
    src = pad_batch(sources, vocab.pad_id)
    memory, mem_pad = model.encode(src)
    live: list[list[_Hyp]] = [[_Hyp([vocab.bos_id], 0.0)] for _ in sources]
    done: list[list[tuple[tuple[int, ...], float]]] = [[] for _ in sources]
    active = [True] * len(sources)
    for _step in range(cfg.max_len):
        rows, owner = [], []
        for b, hyps in enumerate(live):
            if active[b]:
                for h in hyps:
                    rows.append(h.ids)
                    owner.append(b)
        if not rows:
            break
        idx = torch.tensor(owner)
        tgt = pad_batch(rows, vocab.pad_id)
        logits = model.decode(tgt, memory[idx], mem_pad[idx])
        last = torch.tensor([len(r) - 1 for r in rows])
        step_logits = logits[torch.arange(len(rows)), last].double()
        logp = torch.log_softmax(step_logits, dim=-1).numpy()
        logp_t = torch.log_softmax(step_logits / cfg.temperature, dim=-1).numpy()
        r0 = 0
        for b in range(len(sources)):
            if not active[b]:
                continue
            hyps = live[b]
            n = len(hyps)
            block = logp[r0 : r0 + n]
            prior = np.array([h.logp for h in hyps])[:, None]
            cum = prior + block
            # sampling weights use tempered next-token logits; kept scores stay untempered
            flat = (prior + logp_t[r0 : r0 + n]).ravel()
            r0 += n
            picks = _gumbel_top_k(flat, 2 * width, rngs[b])
            # best untempered score first; ties by flat index
            picks = picks[np.lexsort((picks, -cum.ravel()[picks]))]
            new: list[_Hyp] = []
            for p in picks:
                bi, tok = divmod(int(p), block.shape[1])
                score = float(cum[bi, tok])
                ids = hyps[bi].ids + [tok]
                if tok == vocab.eos_id:
                    if len(done[b]) < width:
                        done[b].append((tuple(ids[1:]), _normalized(score, len(ids) - 1, cfg.length_penalty)))
                elif len(new) < width:
                    new.append(_Hyp(ids, score))
            live[b] = new
            if len(done[b]) >= width or not new:
                active[b] = False
    for b in range(len(sources)):
        if not done[b]:
            # no hypothesis finished within max_len: return the unfinished beams
            done[b] = [
                (tuple(h.ids[1:]), _normalized(h.logp, len(h.ids) - 1, cfg.length_penalty)) for h in live[b]
            ]
    return done


def _to_candidates(vocab: UnifiedVocab, finished: list[tuple[tuple[int, ...], float]]) -> list[Candidate]:
    out = []
    for ids, score in finished:
        tokens = vocab.ids_to_selfies(ids)
        g = decode_selfies(tokens)
        if g.num_atoms == 0:
            continue
        out.append(Candidate(canonical_key(g), tuple(tokens), ids, score, g))
    return out


def generate(
    model: Seq2Seq,
    vocab: UnifiedVocab,
    sources: Sequence[Sequence[int]],
    cfg: DecodeConfig,
    input_ids: Sequence[int] | None = None,
) -> list[list[Candidate]]:
    """Distinct candidates per source, best decoder score first.

    Repeated seeded passes accumulate up to num_return distinct structures,
    stopping after max_passes. Each input's randomness depends only on
    (seed, pass, input index), so batching does not change results.
    """
    input_ids = list(input_ids) if input_ids is not None else list(range(len(sources)))
    results: list[dict[str, Candidate]] = [dict() for _ in sources]
    limit = model.cfg.max_positions
    too_long = {i for i, s in enumerate(sources) if len(s) > limit}
    if too_long:
        log.warning("%d inputs exceed %d source tokens; returning no candidates for them", len(too_long), limit)
    for p in range(cfg.max_passes):
        todo = [i for i in range(len(sources)) if len(results[i]) < cfg.num_return and i not in too_long]
        if not todo:
            break
        for start in range(0, len(todo), cfg.batch_size):
            chunk = todo[start : start + cfg.batch_size]
            rngs = [np.random.default_rng([cfg.seed, p, input_ids[i]]) for i in chunk]
            finished = beam_sample(model, vocab, [sources[i] for i in chunk], cfg, rngs)
            for i, fin in zip(chunk, finished):
                for c in _to_candidates(vocab, fin):
                    old = results[i].get(c.key)
                    if old is None or c.score > old.score:
                        results[i][c.key] = c
    out = []
    for res in results:
        cands = sorted(res.values(), key=lambda c: (-c.score, c.key))
        out.append(cands[: cfg.num_return])
    return out


def rerank_by_formula(cands: Sequence[Candidate], target: Mapping[str, int] | None) -> list[Candidate]:
    """Stable sort by (formula distance ascending, decoder score descending)."""
    if target is None:
        return sorted(cands, key=lambda c: -c.score)
    for c in cands:
        c.formula_distance = formula_distance(molecular_formula(c.graph), target)
    return sorted(cands, key=lambda c: (c.formula_distance, -c.score))


def write_predictions(path: str | Path, ids: Sequence[str], ranked: Sequence[Sequence[Candidate]], manifest: dict | None = None) -> None:
    path = Path(path)
    with open(path, "w", encoding="utf-8") as fh:
        for sid, cands in zip(ids, ranked):
            doc = {"id": sid, "candidates": [c.to_json(r + 1) for r, c in enumerate(cands)]}
            fh.write(json.dumps(doc, sort_keys=True) + "\n")
    if manifest is not None:
        side = path.with_name(path.name + ".manifest.json")
        side.write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n", encoding="utf-8")


def read_predictions(path: str | Path) -> dict[str, list[str]]:
    out: dict[str, list[str]] = {}
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                doc = json.loads(line)
                cands = sorted(doc["candidates"], key=lambda c: c["rank"])
                out[str(doc["id"])] = [c["smiles"] for c in cands]
    return out


def formula_of(record_formula: Formula | Mapping[str, int] | None) -> Formula | None:
    return None if record_formula is None else Formula(record_formula)
