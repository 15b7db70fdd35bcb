"""Training stages: multi-task pretraining, fine-tuning and preference alignment."""

from __future__ import annotations

import copy
import logging
import math
from collections.abc import Sequence
from dataclasses import asdict, dataclass, field

import numpy as np
import torch

from .chem import Formula, canonical_key
from .corpus import (
    MAX_LEN_FINETUNE,
    MAX_LEN_PRETRAIN,
    CorpusRecord,
    OverflowCounter,
    PretrainExample,
    pretrain_epoch,
)
from .decode import Candidate, DecodeConfig, generate, rerank_by_formula
from .fingerprint import EVAL_BITS, Fingerprint, morgan_fingerprint, tanimoto
from .model import (
    Seq2Seq,
    combined_loss,
    forward_ce,
    pad_batch,
    rank_loss,
    sequence_scores,
)
from .selfies_codec import decode_selfies
from .vocab import UnifiedVocab

log = logging.getLogger(__name__)

STAGE_INDEX = {"pretrain": 0, "finetune": 1, "align": 2}


class DataStageMismatch(TypeError):
    pass


@dataclass
class TrainingSchedule:
    lr: float = 6e-4
    min_lr: float = 1e-5
    warmup_ratio: float = 0.1
    epochs: int = 10
    batch_size: int = 32
    weight_decay: float = 0.01
    grad_clip: float = 1.0
    eval_every: int = 0  # steps; 0 disables early stopping
    patience: int = 3
    alpha: float = 5.0
    gamma: float = 0.1
    n_candidates: int = 3
    inject_gold: bool = False  # replace the last candidate by the gold target when it was not sampled
    length_penalty: float = 1.0
    eval_beam: int = 5
    max_len: int = 0  # 0 = stage default
    seed: int = 0

    def __post_init__(self) -> None:
        if self.patience < 1:
            raise ValueError("patience must be >= 1")
        if not 0.0 <= self.warmup_ratio < 1.0:
            raise ValueError("warmup ratio must be in [0, 1)")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be positive")

    @classmethod
    def for_stage(cls, stage: str, **overrides) -> TrainingSchedule:
        defaults = {
            "pretrain": dict(lr=6e-4, min_lr=1e-5, warmup_ratio=0.0),
            "finetune": dict(lr=5e-5, min_lr=0.0, warmup_ratio=0.1, patience=3),
            "align": dict(lr=5e-5, min_lr=0.0, warmup_ratio=0.1, patience=5),
        }[stage]
        defaults.update(overrides)
        return cls(**defaults)


def lr_factor(step: int, total: int, warmup: int, peak: float, floor: float) -> float:
    """Linear warmup to peak, then cosine decay to floor; returned as a multiple of peak."""
    if warmup > 0 and step < warmup:
        return (step + 1) / warmup
    progress = (step - warmup) / max(1, total - warmup)
    progress = min(max(progress, 0.0), 1.0)
    lr = floor + 0.5 * (peak - floor) * (1.0 + math.cos(math.pi * progress))
    return lr / peak


def step_seed(root: int, stage: str, epoch: int, step: int) -> int:
    ss = np.random.SeedSequence([root, STAGE_INDEX[stage], epoch, step])
    return int(ss.generate_state(1, dtype=np.uint32)[0])


@dataclass
class FinetunePair:
    id: str
    fp: Fingerprint  # 4096-bit input fingerprint (thresholded or gold)
    selfies: tuple[str, ...]
    gold_fp2048: Fingerprint
    formula: Formula | None = None

    @classmethod
    def from_record(cls, rec: CorpusRecord, fp: Fingerprint | None = None) -> FinetunePair:
        return cls(rec.id, fp if fp is not None else rec.fp4096, rec.selfies, morgan_fingerprint(rec.graph(), 2, EVAL_BITS), rec.formula)


@dataclass
class TrainResult:
    model: Seq2Seq
    history: list[dict] = field(default_factory=list)
    best_metric: float | None = None
    best_step: int = 0
    steps: int = 0
    overflow: int = 0
    stopped_early: bool = False

    def manifest(self) -> dict:
        return {
            "history": self.history,
            "best_metric": self.best_metric,
            "best_step": self.best_step,
            "steps": self.steps,
            "overflow": self.overflow,
            "stopped_early": self.stopped_early,
        }


def _optimizer(model: Seq2Seq, sched: TrainingSchedule) -> torch.optim.Optimizer:
    params = [p for p in model.parameters() if p.requires_grad]
    return torch.optim.AdamW(params, lr=sched.lr, betas=(0.9, 0.999), weight_decay=sched.weight_decay)


def _batches(n: int, batch_size: int, rng: np.random.Generator) -> list[np.ndarray]:
    order = rng.permutation(n)
    return [order[i : i + batch_size] for i in range(0, n, batch_size)]


def top1_tanimoto(
    model: Seq2Seq, vocab: UnifiedVocab, pairs: Sequence[FinetunePair], beam: int, seed: int = 0, max_len: int = 128
) -> float:
    """Mean Tanimoto of the formula-re-ranked top-1 candidate against the gold molecule."""
    if not pairs:
        return 0.0
    cfg = DecodeConfig(beam_width=beam, num_return=beam, max_passes=1, seed=seed, max_len=max_len)
    sources = [vocab.fp_ids(p.fp) + [vocab.eos_id] for p in pairs]
    cands = generate(model, vocab, sources, cfg)
    total = 0.0
    for p, cs in zip(pairs, cands):
        ranked = rerank_by_formula(cs, p.formula)
        if ranked:
            total += tanimoto(morgan_fingerprint(ranked[0].graph, 2, EVAL_BITS), p.gold_fp2048)
    return total / len(pairs)


class _EarlyStopper:
    def __init__(self, patience: int):
        self.patience = patience
        self.best: float | None = None
        self.best_state: dict | None = None
        self.best_step = 0
        self.bad = 0

    def update(self, metric: float, model: Seq2Seq, step: int) -> bool:
        """Record an evaluation; returns True when training should stop."""
        if self.best is None or metric > self.best:
            self.best, self.best_step, self.bad = metric, step, 0
            self.best_state = copy.deepcopy(model.state_dict())
            return False
        self.bad += 1
        return self.bad >= self.patience


def _run(
    stage: str,
    model: Seq2Seq,
    vocab: UnifiedVocab,
    sched: TrainingSchedule,
    epoch_batches,
    steps_per_epoch: int,
    loss_fn,
    val_pairs: Sequence[FinetunePair] | None,
    result: TrainResult,
) -> TrainResult:
    opt = _optimizer(model, sched)
    total = steps_per_epoch * sched.epochs
    warmup = int(sched.warmup_ratio * total)
    scheduler = torch.optim.lr_scheduler.LambdaLR(
        opt, lambda s: lr_factor(s, total, warmup, sched.lr, sched.min_lr)
    )
    stopper = _EarlyStopper(sched.patience)
    use_es = sched.eval_every > 0 and val_pairs
    step = 0
    stop = False
    for epoch in range(sched.epochs):
        model.train()
        ep_loss, ep_n = 0.0, 0
        for batch in epoch_batches(epoch):
            torch.manual_seed(step_seed(sched.seed, stage, epoch, step))
            model.train()
            loss, parts = loss_fn(batch, epoch, step)
            opt.zero_grad(set_to_none=True)
            loss.backward()
            if sched.grad_clip > 0:
                torch.nn.utils.clip_grad_norm_([p for p in model.parameters() if p.requires_grad], sched.grad_clip)
            opt.step()
            scheduler.step()
            step += 1
            ep_loss += float(loss.detach())
            ep_n += 1
            if use_es and step % sched.eval_every == 0:
                metric = top1_tanimoto(model, vocab, val_pairs, sched.eval_beam, sched.seed)
                result.history.append({"step": step, "epoch": epoch, "val_top1_tanimoto": round(metric, 6)})
                log.info("%s step %d val top-1 Tanimoto %.4f", stage, step, metric)
                if stopper.update(metric, model, step):
                    stop = True
                    break
        result.history.append({"epoch": epoch, "step": step, "train_loss": round(ep_loss / max(ep_n, 1), 6)})
        log.info("%s epoch %d loss %.4f", stage, epoch, ep_loss / max(ep_n, 1))
        if stop:
            result.stopped_early = True
            break
    if use_es:
        metric = top1_tanimoto(model, vocab, val_pairs, sched.eval_beam, sched.seed)
        result.history.append({"step": step, "final": True, "val_top1_tanimoto": round(metric, 6)})
        stopper.update(metric, model, step)
        if stopper.best_state is not None:
            model.load_state_dict(stopper.best_state)
        result.best_metric, result.best_step = stopper.best, stopper.best_step
    result.steps = step
    model.eval()
    return result


def train_pretrain(
    model: Seq2Seq, vocab: UnifiedVocab, records: Sequence[CorpusRecord], sched: TrainingSchedule
) -> TrainResult:
    if not records or not isinstance(records[0], CorpusRecord):
        raise DataStageMismatch("pretraining expects CorpusRecords")
    max_len = sched.max_len or MAX_LEN_PRETRAIN
    result = TrainResult(model)
    overflow = OverflowCounter()
    cache: dict[int, list[PretrainExample]] = {}

    def examples(epoch: int) -> list[PretrainExample]:
        if epoch not in cache:
            cache.clear()
            cache[epoch] = pretrain_epoch(records, vocab, sched.seed, epoch, max_len, overflow)
        return cache[epoch]

    def epoch_batches(epoch: int):
        ex = examples(epoch)
        rng = np.random.default_rng([sched.seed, 0, epoch])
        for idx in _batches(len(ex), sched.batch_size, rng):
            yield [ex[i] for i in idx]

    def loss_fn(batch, epoch, step):
        src = pad_batch([e.source for e in batch], vocab.pad_id)
        tgt = pad_batch([e.target for e in batch], vocab.pad_id)
        _, loss = forward_ce(model, src, tgt)
        return loss, {}

    steps = math.ceil(len(records) / sched.batch_size)
    _run("pretrain", model, vocab, sched, epoch_batches, steps, loss_fn, None, result)
    result.overflow = overflow.count
    return result


def _pair_tensors(vocab: UnifiedVocab, pairs: Sequence[FinetunePair], max_len: int):
    kept = []
    for p in pairs:
        src = vocab.fp_ids(p.fp) + [vocab.eos_id]
        tgt = vocab.target_ids(p.selfies)
        if len(src) <= max_len and len(tgt) <= max_len:
            kept.append((src, tgt))
    return kept


def train_finetune(
    model: Seq2Seq,
    vocab: UnifiedVocab,
    pairs: Sequence[FinetunePair],
    sched: TrainingSchedule,
    val_pairs: Sequence[FinetunePair] | None = None,
) -> TrainResult:
    if not pairs or not isinstance(pairs[0], FinetunePair):
        raise DataStageMismatch("fine-tuning expects fingerprint/SELFIES pairs")
    max_len = sched.max_len or MAX_LEN_FINETUNE
    data = _pair_tensors(vocab, pairs, max_len)
    result = TrainResult(model, overflow=len(pairs) - len(data))

    def epoch_batches(epoch: int):
        rng = np.random.default_rng([sched.seed, 1, epoch])
        for idx in _batches(len(data), sched.batch_size, rng):
            yield [data[i] for i in idx]

    def loss_fn(batch, epoch, step):
        src = pad_batch([b[0] for b in batch], vocab.pad_id)
        tgt = pad_batch([b[1] for b in batch], vocab.pad_id)
        _, loss = forward_ce(model, src, tgt)
        return loss, {}

    steps = math.ceil(len(data) / sched.batch_size)
    return _run("finetune", model, vocab, sched, epoch_batches, steps, loss_fn, val_pairs, result)


@dataclass
class AlignmentBatch:
    source: tuple[int, ...]
    target: tuple[int, ...]
    candidates: list[tuple[int, ...]]  # BOS + ids (EOS included)
    ps: list[float]


def alignment_batches(
    model: Seq2Seq,
    vocab: UnifiedVocab,
    pairs: Sequence[FinetunePair],
    n: int,
    seed: int,
    epoch: int,
    max_len: int = MAX_LEN_FINETUNE,
    length_penalty: float = 1.0,
    inject_gold: bool = False,
) -> list[AlignmentBatch]:
    """Fresh candidates from the current model: beam n*4, deduplicated, top n by score, sorted by Ps."""
    sources = [vocab.fp_ids(p.fp) + [vocab.eos_id] for p in pairs]
    # candidates far longer than any gold target carry no useful preference signal
    gen_len = min(max_len, max(len(p.selfies) for p in pairs) + 16)
    cfg = DecodeConfig(
        beam_width=4 * n, num_return=n, max_passes=1, seed=seed * 1000 + epoch, max_len=gen_len,
        length_penalty=length_penalty,
    )
    model.eval()
    cands = generate(model, vocab, sources, cfg)
    out = []
    for p, src, cs in zip(pairs, sources, cands):
        seqs = [(vocab.bos_id, *c.ids) for c in cs[:n]]
        ps = [tanimoto(morgan_fingerprint(c.graph, 2, EVAL_BITS), p.gold_fp2048) for c in cs[:n]]
        target = tuple(vocab.target_ids(p.selfies))
        if inject_gold and target not in seqs and seqs:
            gold_key = canonical_key(decode_selfies(list(p.selfies)))
            if all(c.key != gold_key for c in cs[:n]):
                seqs[-1], ps[-1] = target, 1.0
        order = sorted(range(len(seqs)), key=lambda i: -ps[i])  # stable: decoder order on ties
        out.append(AlignmentBatch(tuple(src), target, [seqs[i] for i in order], [ps[i] for i in order]))
    return out


def train_align(
    model: Seq2Seq,
    vocab: UnifiedVocab,
    pairs: Sequence[FinetunePair],
    sched: TrainingSchedule,
    val_pairs: Sequence[FinetunePair] | None = None,
) -> TrainResult:
    """CE on the gold target plus alpha * rank loss over sampled candidates; encoder frozen."""
    if not pairs or not isinstance(pairs[0], FinetunePair):
        raise DataStageMismatch("alignment expects fingerprint/SELFIES pairs")
    model.freeze_encoder()
    max_len = sched.max_len or MAX_LEN_FINETUNE
    result = TrainResult(model)
    cache: dict[int, list[AlignmentBatch]] = {}

    def epoch_batches(epoch: int):
        if epoch not in cache:
            cache.clear()
            cache[epoch] = alignment_batches(
                model, vocab, pairs, sched.n_candidates, sched.seed, epoch, max_len, sched.length_penalty,
                sched.inject_gold,
            )
        data = cache[epoch]
        rng = np.random.default_rng([sched.seed, 2, epoch])
        for idx in _batches(len(data), sched.batch_size, rng):
            yield [data[i] for i in idx]

    def loss_fn(batch: list[AlignmentBatch], epoch, step):
        src = pad_batch([b.source for b in batch], vocab.pad_id)
        tgt = pad_batch([b.target for b in batch], vocab.pad_id)
        _, ce = forward_ce(model, src, tgt)
        rows, owners = [], []
        for k, b in enumerate(batch):
            if len(b.candidates) >= 2:
                rows.extend(b.candidates)
                owners.extend([k] * len(b.candidates))
        rank = ce * 0.0
        if rows:
            csrc = src[torch.tensor(owners)]
            scores = sequence_scores(model, csrc, pad_batch(rows, vocab.pad_id), sched.length_penalty)
            r0 = 0
            for b in batch:
                m = len(b.candidates)
                if m >= 2:
                    rank = rank + rank_loss(scores[r0 : r0 + m], b.ps, sched.gamma)
                    r0 += m
            rank = rank / len(batch)
        return combined_loss(ce, rank, sched.alpha), {"rank": float(rank.detach())}

    steps = math.ceil(len(pairs) / sched.batch_size)
    return _run("align", model, vocab, sched, epoch_batches, steps, loss_fn, val_pairs, result)


def preference_agreement(
    model: Seq2Seq,
    vocab: UnifiedVocab,
    batches: Sequence[AlignmentBatch],
    length_penalty: float = 1.0,
) -> float:
    """Fraction of candidate pairs with Ps_i > Ps_j whose model scores also satisfy P_i > P_j."""
    agree = total = 0
    model.eval()
    with torch.no_grad():
        for b in batches:
            if len(b.candidates) < 2:
                continue
            src = pad_batch([b.source] * len(b.candidates), vocab.pad_id)
            scores = sequence_scores(model, src, pad_batch(b.candidates, vocab.pad_id), length_penalty).tolist()
            for i in range(len(b.ps)):
                for j in range(i + 1, len(b.ps)):
                    if b.ps[i] > b.ps[j]:
                        total += 1
                        agree += scores[i] > scores[j]
    return agree / total if total else float("nan")


def schedule_dict(sched: TrainingSchedule) -> dict:
    return asdict(sched)


def candidates_for_eval(cands: Sequence[Candidate]) -> list[str]:
    return [c.key for c in cands]
