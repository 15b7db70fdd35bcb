"""Unified vocabulary over special tokens, fingerprint-bit tokens and SELFIES tokens."""

from __future__ import annotations

import hashlib
import json
from collections.abc import Iterable, Sequence
from dataclasses import dataclass
from pathlib import Path

from .fingerprint import FP_BITS, Fingerprint

PAD, BOS, EOS, MASK, FPS_SEP = "<pad>", "<bos>", "<eos>", "<mask>", "<fps_sep>"
SPECIALS = (PAD, BOS, EOS, MASK, FPS_SEP)
FP_PREFIX = "<fp"
FP_OFFSET = len(SPECIALS)


class EmptyCorpus(ValueError):
    pass


class UnknownToken(KeyError):
    pass


class UnknownId(KeyError):
    pass


class WidthError(ValueError):
    pass


def fp_token(bit: int) -> str:
    return f"{FP_PREFIX}{bit:04d}>"


def fp_to_tokens(fp: Fingerprint) -> list[str]:
    """One token per set bit, ascending."""
    if fp.nbits != FP_BITS:
        raise WidthError(f"fingerprint tokens need {FP_BITS} bits, got {fp.nbits}")
    return [fp_token(i) for i in fp.on_bits()]


@dataclass(frozen=True)
class EncodedSequence:
    ids: tuple[int, ...]
    role: str  # "source" or "target"


class UnifiedVocab:
    """Immutable id <-> token bijection.

    Ids: specials 0..4, fingerprint tokens 5..4100, then SELFIES tokens in
    first-seen corpus order.
    """

    def __init__(self, selfies_tokens: Sequence[str]):
        if len(set(selfies_tokens)) != len(selfies_tokens):
            raise ValueError("duplicate SELFIES tokens")
        self._tokens: list[str] = list(SPECIALS) + [fp_token(i) for i in range(FP_BITS)]
        self.selfies_offset = len(self._tokens)
        for t in selfies_tokens:
            if t in SPECIALS or t.startswith(FP_PREFIX):
                raise ValueError(f"SELFIES token {t!r} collides with a reserved token")
        self._tokens.extend(selfies_tokens)
        self._ids = {t: i for i, t in enumerate(self._tokens)}
        self.pad_id, self.bos_id, self.eos_id, self.mask_id, self.sep_id = range(5)

    def __len__(self) -> int:
        return len(self._tokens)

    def __eq__(self, other: object) -> bool:
        return isinstance(other, UnifiedVocab) and self._tokens == other._tokens

    @property
    def selfies_tokens(self) -> list[str]:
        return self._tokens[self.selfies_offset :]

    def token_id(self, token: str) -> int:
        try:
            return self._ids[token]
        except KeyError:
            raise UnknownToken(token) from None

    def token(self, idx: int) -> str:
        if not 0 <= idx < len(self._tokens):
            raise UnknownId(idx)
        return self._tokens[idx]

    def __contains__(self, token: str) -> bool:
        return token in self._ids

    def is_selfies_id(self, idx: int) -> bool:
        return self.selfies_offset <= idx < len(self._tokens)

    def encode_ids(self, tokens: Iterable[str], role: str = "source") -> EncodedSequence:
        return EncodedSequence(tuple(self.token_id(t) for t in tokens), role)

    def decode_ids(self, seq: EncodedSequence | Sequence[int]) -> list[str]:
        ids = seq.ids if isinstance(seq, EncodedSequence) else seq
        return [self.token(int(i)) for i in ids]

    def fp_ids(self, fp: Fingerprint) -> list[int]:
        if fp.nbits != FP_BITS:
            raise WidthError(f"fingerprint tokens need {FP_BITS} bits, got {fp.nbits}")
        return [FP_OFFSET + i for i in fp.on_bits()]

    def selfies_ids(self, tokens: Sequence[str]) -> list[int]:
        return [self.token_id(t) for t in tokens]

    def target_ids(self, tokens: Sequence[str]) -> list[int]:
        return [self.bos_id] + self.selfies_ids(tokens) + [self.eos_id]

    def ids_to_selfies(self, ids: Sequence[int]) -> list[str]:
        """SELFIES tokens of a generated sequence: cut at EOS, drop specials/fp tokens."""
        out = []
        for i in ids:
            i = int(i)
            if i == self.eos_id:
                break
            if self.is_selfies_id(i):
                out.append(self._tokens[i])
            elif not 0 <= i < len(self._tokens):
                raise UnknownId(i)
        return out

    # serialization
    def to_json(self) -> str:
        doc = {
            "specials": [{"token": t, "id": i} for i, t in enumerate(SPECIALS)],
            "fp_prefix": FP_PREFIX,
            "fp_offset": FP_OFFSET,
            "fp_count": FP_BITS,
            "selfies": [
                {"token": t, "id": self.selfies_offset + k} for k, t in enumerate(self.selfies_tokens)
            ],
        }
        return json.dumps(doc, indent=1, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str) -> UnifiedVocab:
        doc = json.loads(text)
        specials = [d["token"] for d in sorted(doc["specials"], key=lambda d: d["id"])]
        if tuple(specials) != SPECIALS or doc["fp_count"] != FP_BITS or doc["fp_offset"] != FP_OFFSET:
            raise ValueError("vocabulary layout does not match this version")
        entries = sorted(doc["selfies"], key=lambda d: d["id"])
        vocab = cls([d["token"] for d in entries])
        for d in entries:
            if vocab.token_id(d["token"]) != d["id"]:
                raise ValueError("non-contiguous SELFIES ids in vocabulary file")
        return vocab

    def save(self, path: str | Path) -> str:
        text = self.to_json()
        Path(path).write_text(text, encoding="utf-8")
        return self.hash()

    @classmethod
    def load(cls, path: str | Path) -> UnifiedVocab:
        return cls.from_json(Path(path).read_text(encoding="utf-8"))

    def hash(self) -> str:
        return hashlib.sha256(self.to_json().encode("utf-8")).hexdigest()


def build_vocab(corpus: Iterable[Sequence[str]]) -> UnifiedVocab:
    """Vocabulary from SELFIES token lists; SELFIES ids follow first-seen order."""
    seen: dict[str, None] = {}
    n_records = 0
    for tokens in corpus:
        n_records += 1
        for t in tokens:
            seen.setdefault(t, None)
    if n_records == 0 or not seen:
        raise EmptyCorpus("cannot build a vocabulary from an empty corpus")
    return UnifiedVocab(list(seen))
