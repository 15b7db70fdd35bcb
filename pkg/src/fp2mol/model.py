"""Encoder-decoder transformer, losses and checkpoint I/O."""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import torch
from safetensors.torch import load_file, save_file
from torch import Tensor, nn

from .vocab import UnifiedVocab

# the fused inference path changes numerics between batch layouts; keep the
# reference path so decoder scores and rescoring agree
torch.backends.mha.set_fastpath_enabled(False)

STAGES = ("pretrain", "finetune", "align")


class ShapeError(ValueError):
    pass


class DegenerateBatch(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    enc_layers: int = 2
    dec_layers: int = 2
    hidden_dim: int = 128
    ff_dim: int = 512
    heads: int = 4
    max_positions: int = 512
    dropout: float = 0.1
    vocab_hash: str = ""
    pad_id: int = 0

    def __post_init__(self) -> None:
        if self.hidden_dim % self.heads:
            raise ValueError("hidden_dim must be divisible by heads")
        if min(self.enc_layers, self.dec_layers, self.hidden_dim, self.ff_dim, self.heads) < 1:
            raise ValueError("layer counts and widths must be positive")

    @classmethod
    def bart_base(cls, vocab_size: int, vocab_hash: str = "") -> ModelConfig:
        return cls(vocab_size, 6, 6, 768, 3072, 12, 1024, 0.1, vocab_hash)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=1, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str) -> ModelConfig:
        return cls(**json.loads(text))


class Seq2Seq(nn.Module):
    """Pre-LayerNorm transformer; decoder embedding tied to the output head.

    The encoder has its own token embedding so freezing the encoder leaves
    every decoder-side parameter trainable.
    """

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        d = cfg.hidden_dim
        self.enc_tok = nn.Embedding(cfg.vocab_size, d, padding_idx=cfg.pad_id)
        self.enc_pos = nn.Embedding(cfg.max_positions, d)
        self.dec_tok = nn.Embedding(cfg.vocab_size, d, padding_idx=cfg.pad_id)
        self.dec_pos = nn.Embedding(cfg.max_positions, d)
        self.encoder_layers = nn.ModuleList(
            nn.TransformerEncoderLayer(d, cfg.heads, cfg.ff_dim, cfg.dropout, "gelu", batch_first=True, norm_first=True)
            for _ in range(cfg.enc_layers)
        )
        self.decoder_layers = nn.ModuleList(
            nn.TransformerDecoderLayer(d, cfg.heads, cfg.ff_dim, cfg.dropout, "gelu", batch_first=True, norm_first=True)
            for _ in range(cfg.dec_layers)
        )
        self.enc_norm = nn.LayerNorm(d)
        self.dec_norm = nn.LayerNorm(d)
        self.drop = nn.Dropout(cfg.dropout)
        self.lm_head = nn.Linear(d, cfg.vocab_size, bias=False)
        self.lm_head.weight = self.dec_tok.weight
        self._init_weights()

    def _init_weights(self) -> None:
        for name, p in self.named_parameters():
            if p.dim() > 1:
                nn.init.normal_(p, 0.0, 0.02)
            elif "norm" in name and name.endswith("weight"):
                nn.init.ones_(p)
            else:
                nn.init.zeros_(p)
        with torch.no_grad():
            self.enc_tok.weight[self.cfg.pad_id].zero_()
            self.dec_tok.weight[self.cfg.pad_id].zero_()

    def encoder_parameters(self):
        for mod in (self.enc_tok, self.enc_pos, self.encoder_layers, self.enc_norm):
            yield from mod.parameters()

    def freeze_encoder(self) -> None:
        for p in self.encoder_parameters():
            p.requires_grad_(False)

    def _check_len(self, n: int) -> None:
        if n > self.cfg.max_positions:
            raise ShapeError(f"sequence length {n} exceeds max_positions {self.cfg.max_positions}")

    def encode(self, src: Tensor) -> tuple[Tensor, Tensor]:
        self._check_len(src.shape[1])
        pad = src.eq(self.cfg.pad_id)
        pos = torch.arange(src.shape[1], device=src.device)
        h = self.drop(self.enc_tok(src) + self.enc_pos(pos))
        for layer in self.encoder_layers:
            h = layer(h, src_key_padding_mask=pad)
        return self.enc_norm(h), pad

    def decode(self, tgt_in: Tensor, memory: Tensor, memory_pad: Tensor) -> Tensor:
        self._check_len(tgt_in.shape[1])
        n = tgt_in.shape[1]
        pos = torch.arange(n, device=tgt_in.device)
        h = self.drop(self.dec_tok(tgt_in) + self.dec_pos(pos))
        causal = torch.triu(torch.ones(n, n, dtype=torch.bool, device=tgt_in.device), 1)
        tgt_pad = tgt_in.eq(self.cfg.pad_id)
        for layer in self.decoder_layers:
            h = layer(
                h, memory, tgt_mask=causal, tgt_key_padding_mask=tgt_pad, memory_key_padding_mask=memory_pad
            )
        return self.lm_head(self.dec_norm(h))

    def forward(self, src: Tensor, tgt_in: Tensor) -> Tensor:
        memory, pad = self.encode(src)
        return self.decode(tgt_in, memory, pad)


# ------------------------------------------------------------------ batching


def pad_batch(seqs: Sequence[Sequence[int]], pad_id: int = 0) -> Tensor:
    n = max((len(s) for s in seqs), default=0)
    out = torch.full((len(seqs), max(n, 1)), pad_id, dtype=torch.long)
    for i, s in enumerate(seqs):
        if len(s):
            out[i, : len(s)] = torch.as_tensor(list(s), dtype=torch.long)
    return out


# ------------------------------------------------------------------ losses


def cross_entropy(logits: Tensor, labels: Tensor, pad_id: int = 0) -> Tensor:
    """Mean negative log-likelihood over non-PAD label positions."""
    return nn.functional.cross_entropy(
        logits.reshape(-1, logits.shape[-1]), labels.reshape(-1), ignore_index=pad_id, reduction="mean"
    )


def forward_ce(model: Seq2Seq, src: Tensor, tgt: Tensor) -> tuple[Tensor, Tensor]:
    """Teacher-forced logits and CE; tgt holds BOS ... EOS (PAD-extended)."""
    if tgt.shape[1] < 2:
        raise ShapeError("target must contain at least BOS and one token")
    logits = model(src, tgt[:, :-1])
    return logits, cross_entropy(logits, tgt[:, 1:], model.cfg.pad_id)


def token_logprobs(model: Seq2Seq, src: Tensor, tgt: Tensor) -> tuple[Tensor, Tensor]:
    """Per-position log P(tgt[t] | tgt[<t]) for t >= 1, and the non-PAD mask."""
    logits = model(src, tgt[:, :-1])
    logp = torch.log_softmax(logits, dim=-1)
    labels = tgt[:, 1:]
    picked = logp.gather(-1, labels.unsqueeze(-1)).squeeze(-1)
    mask = labels.ne(model.cfg.pad_id)
    return picked * mask, mask


def length_normalize(total: Tensor, length: Tensor | float, length_penalty: float) -> Tensor:
    return total / torch.as_tensor(length, dtype=total.dtype) ** length_penalty


def sequence_scores(model: Seq2Seq, src: Tensor, tgt: Tensor, length_penalty: float = 1.0) -> Tensor:
    """Length-penalized log-probability of each target row (BOS excluded, EOS included)."""
    picked, mask = token_logprobs(model, src, tgt)
    return length_normalize(picked.sum(-1), mask.sum(-1).to(picked.dtype), length_penalty)


def sequence_logprob(
    model: Seq2Seq, source: Sequence[int], candidate: Sequence[int], length_penalty: float = 1.0, bos_id: int = 1
) -> float:
    """Score one candidate (token ids ending with EOS, without BOS)."""
    src = pad_batch([source], model.cfg.pad_id)
    tgt = pad_batch([[bos_id, *candidate]], model.cfg.pad_id)
    with torch.no_grad():
        return float(sequence_scores(model, src, tgt, length_penalty)[0])


def rank_pairs(ps: Sequence[float]) -> list[tuple[int, int]]:
    """Pairs i < j (in the given order) with strictly larger preference at i."""
    return [(i, j) for i in range(len(ps)) for j in range(i + 1, len(ps)) if ps[i] > ps[j]]


def is_degenerate(ps: Sequence[float]) -> bool:
    return len(set(ps)) <= 1


def rank_loss(scores: Tensor, ps: Sequence[float], gamma: float) -> Tensor:
    """sum over i<j with Ps_i > Ps_j of max(0, P_j - P_i + (j - i) * gamma).

    Candidates must already be sorted by descending preference. All-equal
    preferences give no pairs and a zero loss.
    """
    if scores.dim() != 1 or scores.shape[0] != len(ps):
        raise ShapeError("one score per candidate required")
    if len(ps) < 2:
        raise DegenerateBatch("rank loss needs at least two candidates")
    if gamma <= 0:
        raise ValueError("gamma must be positive")
    if any(ps[i] < ps[i + 1] for i in range(len(ps) - 1)):
        raise ValueError("candidates must be sorted by descending preference")
    pairs = rank_pairs(ps)
    if not pairs:
        return scores.sum() * 0.0
    i = torch.tensor([p[0] for p in pairs])
    j = torch.tensor([p[1] for p in pairs])
    margin = (j - i).to(scores.dtype) * gamma
    return torch.clamp(scores[j] - scores[i] + margin, min=0.0).sum()


def combined_loss(ce: Tensor, rank: Tensor | float, alpha: float) -> Tensor:
    if alpha < 0:
        raise ValueError("alpha must be non-negative")
    return ce + alpha * rank


# ------------------------------------------------------------------ checkpoints


def _sha256_file(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def save_checkpoint(
    path: str | Path,
    model: Seq2Seq,
    vocab: UnifiedVocab,
    stage: str,
    manifest: dict | None = None,
    optimizer: torch.optim.Optimizer | None = None,
) -> Path:
    if stage not in STAGES:
        raise ValueError(f"unknown stage {stage!r}")
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    if model.cfg.vocab_hash and model.cfg.vocab_hash != vocab.hash():
        raise ValueError("model was built for a different vocabulary")
    (path / "config.json").write_text(model.cfg.to_json(), encoding="utf-8")
    vocab.save(path / "vocab.json")
    state = {k: v.detach().contiguous().clone() for k, v in model.state_dict().items() if k != "lm_head.weight"}
    save_file(state, str(path / "weights.safetensors"), metadata={"stage": stage})
    if optimizer is not None:
        torch.save(optimizer.state_dict(), path / "optimizer.pt")
    doc = {
        "stage": stage,
        "vocab_hash": vocab.hash(),
        "weights_sha256": _sha256_file(path / "weights.safetensors"),
        **(manifest or {}),
    }
    (path / "manifest.json").write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    return path


@dataclass
class Checkpoint:
    model: Seq2Seq
    vocab: UnifiedVocab
    stage: str
    manifest: dict


def load_checkpoint(path: str | Path, dtype: torch.dtype = torch.float32) -> Checkpoint:
    path = Path(path)
    cfg = ModelConfig.from_json((path / "config.json").read_text(encoding="utf-8"))
    vocab = UnifiedVocab.load(path / "vocab.json")
    if cfg.vocab_hash and cfg.vocab_hash != vocab.hash():
        raise ValueError("checkpoint vocabulary hash mismatch")
    model = Seq2Seq(cfg)
    state = load_file(str(path / "weights.safetensors"))
    state["lm_head.weight"] = state["dec_tok.weight"]
    model.load_state_dict(state)
    model.to(dtype)
    model.eval()
    manifest = json.loads((path / "manifest.json").read_text(encoding="utf-8"))
    return Checkpoint(model, vocab, manifest["stage"], manifest)


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


def build_model(vocab: UnifiedVocab, **overrides) -> Seq2Seq:
    cfg = ModelConfig(vocab_size=len(vocab), vocab_hash=vocab.hash(), **overrides)
    return Seq2Seq(cfg)


def uniform_ce_reference(vocab_size: int) -> float:
    return math.log(vocab_size)
