"""Circular (Morgan-style) fingerprints, probability thresholding and Tanimoto."""

from __future__ import annotations

import json
import math
import struct
from collections.abc import Iterator, Sequence
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .chem import MolecularGraph

FP_BITS = 4096
EVAL_BITS = 2048
_MASK64 = (1 << 64) - 1
FPV1_MAGIC = b"FPV1"


class DimensionError(ValueError):
    pass


class FileFormatError(ValueError):
    pass


def mix64(x: int) -> int:
    """splitmix64 finalizer: a fixed multiply-xor-shift 64-bit mixer."""
    x = (x + 0x9E3779B97F4A7C15) & _MASK64
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & _MASK64
    return x ^ (x >> 31)


def hash_sequence(values: Sequence[int]) -> int:
    h = mix64(len(values))
    for v in values:
        h = mix64(h ^ (v & _MASK64))
    return h


@dataclass(frozen=True)
class Fingerprint:
    """Binary fingerprint stored as a Python int bitmask."""

    nbits: int
    bits: int = 0

    def __post_init__(self) -> None:
        if self.nbits <= 0:
            raise DimensionError("nbits must be positive")
        if self.bits < 0 or self.bits >> self.nbits:
            raise DimensionError(f"bits outside width {self.nbits}")

    @classmethod
    def from_indices(cls, nbits: int, indices) -> Fingerprint:
        bits = 0
        for i in indices:
            i = int(i)
            if not 0 <= i < nbits:
                raise DimensionError(f"bit {i} outside width {nbits}")
            bits |= 1 << i
        return cls(nbits, bits)

    def on_bits(self) -> list[int]:
        out, b, i = [], self.bits, 0
        while b:
            low = b & -b
            i = low.bit_length() - 1
            out.append(i)
            b ^= low
        return out

    def count(self) -> int:
        return self.bits.bit_count()

    def to_array(self) -> np.ndarray:
        arr = np.zeros(self.nbits, dtype=np.uint8)
        arr[self.on_bits()] = 1
        return arr

    def __contains__(self, i: int) -> bool:
        return bool((self.bits >> i) & 1)


def morgan_identifiers(g: MolecularGraph, radius: int) -> list[list[int]]:
    """Per-round atom identifiers; round 0 are the initial invariants."""
    ring = g.ring_atoms
    from .chem import ELEMENTS

    ids = [
        hash_sequence(
            [
                ELEMENTS[a.symbol].atomic_number,
                g.degree(i),
                a.charge,
                a.hydrogens,
                int(i in ring),
            ]
        )
        for i, a in enumerate(g.atoms)
    ]
    rounds = [ids]
    for r in range(1, radius + 1):
        prev = rounds[-1]
        nxt = []
        for i in range(g.num_atoms):
            pairs = sorted((g.bonds[k].code, prev[j]) for j, k in g.neighbors[i])
            flat = [r, prev[i]]
            for code, nid in pairs:
                flat.extend((code, nid))
            nxt.append(hash_sequence(flat))
        rounds.append(nxt)
    return rounds


def morgan_fingerprint(g: MolecularGraph, radius: int = 2, nbits: int = FP_BITS) -> Fingerprint:
    if not 0 <= radius <= 4:
        raise ValueError("radius must be in 0..4")
    if nbits <= 0 or nbits & (nbits - 1):
        raise ValueError("nbits must be a power of two")
    bits = 0
    for ids in morgan_identifiers(g, radius):
        for x in ids:
            bits |= 1 << (x % nbits)
    return Fingerprint(nbits, bits)


def tanimoto(a: Fingerprint, b: Fingerprint) -> float:
    if a.nbits != b.nbits:
        raise DimensionError(f"width mismatch: {a.nbits} vs {b.nbits}")
    union = (a.bits | b.bits).bit_count()
    if union == 0:
        return 1.0
    return (a.bits & b.bits).bit_count() / union


@dataclass(frozen=True)
class ProbabilityVector:
    probs: np.ndarray
    source_id: str = ""

    def __post_init__(self) -> None:
        arr = np.asarray(self.probs, dtype=np.float64)
        if arr.ndim != 1 or arr.shape[0] != FP_BITS:
            raise DimensionError(f"probability vector must have length {FP_BITS}, got {arr.shape}")
        if not np.all(np.isfinite(arr)) or arr.min() < 0.0 or arr.max() > 1.0:
            raise ValueError("probabilities must be finite and within [0, 1]")
        object.__setattr__(self, "probs", arr)


def threshold_probabilities(pv: ProbabilityVector | Sequence[float] | np.ndarray, eps: float) -> Fingerprint:
    """Bit i is set iff p_i >= eps."""
    if not 0.0 < eps < 1.0:
        raise ValueError("threshold must lie strictly between 0 and 1")
    probs = pv.probs if isinstance(pv, ProbabilityVector) else np.asarray(pv, dtype=np.float64)
    if probs.ndim != 1 or probs.shape[0] != FP_BITS:
        raise DimensionError(f"probability vector must have length {FP_BITS}")
    on = probs >= eps
    # little bit order: bit i of the int is element i
    packed = np.packbits(on.astype(np.uint8), bitorder="little")
    return Fingerprint(FP_BITS, int.from_bytes(packed.tobytes(), "little"))


# ---------------------------------------------------------------- file I/O


def write_probabilities_jsonl(path: str | Path, vectors: Sequence[ProbabilityVector]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for pv in vectors:
            probs = [float(x) for x in pv.probs.astype(np.float32)]
            fh.write(json.dumps({"id": pv.source_id, "probs": probs}) + "\n")


def write_probabilities_fpv1(path: str | Path, vectors: Sequence[ProbabilityVector]) -> None:
    with open(path, "wb") as fh:
        fh.write(FPV1_MAGIC + struct.pack("<I", len(vectors)))
        for pv in vectors:
            fh.write(pv.probs.astype("<f4").tobytes())


def iter_probabilities(path: str | Path) -> Iterator[tuple[str, object]]:
    """Yield (id, ProbabilityVector or Exception) for each record.

    Malformed individual records are yielded as exceptions so callers can
    count and skip them; a malformed file header raises FileFormatError.
    """
    path = Path(path)
    with open(path, "rb") as fh:
        head = fh.read(4)
    if head == FPV1_MAGIC:
        data = path.read_bytes()
        if len(data) < 8:
            raise FileFormatError("truncated FPV1 header")
        (count,) = struct.unpack("<I", data[4:8])
        expected = 8 + count * FP_BITS * 4
        if len(data) != expected:
            raise FileFormatError(f"FPV1 size mismatch: expected {expected} bytes, got {len(data)}")
        arr = np.frombuffer(data, dtype="<f4", offset=8).reshape(count, FP_BITS)
        for i in range(count):
            try:
                yield str(i), ProbabilityVector(arr[i].astype(np.float64), str(i))
            except ValueError as exc:
                yield str(i), exc
        return
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                rid = str(rec["id"])
                probs = rec["probs"]
                if not isinstance(probs, list) or any(
                    not isinstance(x, (int, float)) or isinstance(x, bool) for x in probs
                ):
                    raise ValueError("probs must be a list of numbers")
                if any(isinstance(x, float) and math.isnan(x) for x in probs):
                    raise ValueError("NaN probability")
                yield rid, ProbabilityVector(np.asarray(probs, dtype=np.float64), rid)
            except (ValueError, KeyError, TypeError) as exc:
                yield f"line{lineno}", exc
