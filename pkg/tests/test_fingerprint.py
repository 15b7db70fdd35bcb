import random

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fp2mol.chem import parse_smiles
from fp2mol.corpus import ToyMoleculeGenerator
from fp2mol.fingerprint import (
    FP_BITS,
    DimensionError,
    FileFormatError,
    Fingerprint,
    ProbabilityVector,
    iter_probabilities,
    morgan_fingerprint,
    morgan_identifiers,
    tanimoto,
    threshold_probabilities,
    write_probabilities_fpv1,
    write_probabilities_jsonl,
)


@pytest.fixture(scope="module")
def toy_graphs():
    return ToyMoleculeGenerator(seed=5).molecules(150)


def test_methane_bits():
    fp = morgan_fingerprint(parse_smiles("C"), 2, 2048)
    assert 1 <= fp.count() <= 3


def test_isomorphic_inputs_same_bits():
    assert morgan_fingerprint(parse_smiles("CCO")) == morgan_fingerprint(parse_smiles("OCC"))


def test_benzene_vs_pyridine():
    a = morgan_fingerprint(parse_smiles("c1ccccc1"), 2, 2048)
    b = morgan_fingerprint(parse_smiles("c1ccncc1"), 2, 2048)
    assert tanimoto(a, b) < 1.0


def test_rejects_bad_parameters():
    g = parse_smiles("CC")
    with pytest.raises(ValueError):
        morgan_fingerprint(g, 5, 2048)
    with pytest.raises(ValueError):
        morgan_fingerprint(g, 2, 1000)


def test_permutation_invariance(toy_graphs):
    rng = random.Random(0)
    for g in toy_graphs:
        perm = list(range(g.num_atoms))
        rng.shuffle(perm)
        assert morgan_fingerprint(g.permuted(perm)) == morgan_fingerprint(g)


def _reference_partitions(g, radius):
    """Hash-free route: nested tuples of (invariant, sorted (bond code, neighbor tuple))."""
    labels = []
    for i, a in enumerate(g.atoms):
        labels.append((a.symbol, g.degree(i), a.charge, a.hydrogens, i in g.ring_atoms))
    rounds = [labels]
    for r in range(1, radius + 1):
        prev = rounds[-1]
        rounds.append([
            (r, prev[i], tuple(sorted((g.bonds[k].code, prev[n]) for n, k in g.neighbors[i])))
            for i in range(g.num_atoms)
        ])
    return rounds


def _partition(labels):
    groups = {}
    for i, x in enumerate(labels):
        groups.setdefault(x, []).append(i)
    return sorted(groups.values())


def test_identifiers_match_hash_free_refinement(toy_graphs):
    for g in toy_graphs:
        ours = morgan_identifiers(g, 2)
        ref = _reference_partitions(g, 2)
        for r in range(3):
            assert _partition(ours[r]) == _partition(ref[r])


def test_bits_are_identifiers_mod_width(toy_graphs):
    for g in toy_graphs[:40]:
        ids = morgan_identifiers(g, 2)
        for nbits in (2048, 4096):
            expected = {x % nbits for rnd in ids for x in rnd}
            assert set(morgan_fingerprint(g, 2, nbits).on_bits()) == expected


def test_radius_growth_keeps_lower_identifiers(toy_graphs):
    for g in toy_graphs[:40]:
        for r in range(4):
            low = {x for rnd in morgan_identifiers(g, r) for x in rnd}
            high = {x for rnd in morgan_identifiers(g, r + 1) for x in rnd}
            assert low <= high


def test_tanimoto_examples():
    x = Fingerprint.from_indices(64, [1, 5, 9])
    assert tanimoto(x, x) == 1.0
    assert tanimoto(x, Fingerprint.from_indices(64, [2, 3])) == 0.0
    a = Fingerprint.from_indices(64, range(0, 6))
    b = Fingerprint.from_indices(64, list(range(3, 6)) + list(range(10, 16)))
    assert tanimoto(a, b) == 0.25
    assert tanimoto(Fingerprint(64), Fingerprint(64)) == 1.0
    with pytest.raises(DimensionError):
        tanimoto(Fingerprint(64), Fingerprint(128))


bitsets = st.sets(st.integers(0, 255), max_size=40)


@given(bitsets, bitsets)
def test_tanimoto_properties(a, b):
    fa, fb = Fingerprint.from_indices(256, a), Fingerprint.from_indices(256, b)
    t = tanimoto(fa, fb)
    assert t == tanimoto(fb, fa)
    assert 0.0 <= t <= 1.0
    if a or b:
        assert (t == 1.0) == (a == b)
        assert t == pytest.approx(len(a & b) / len(a | b))


def test_threshold_examples():
    assert threshold_probabilities(np.zeros(FP_BITS), 0.2).count() == 0
    probs = np.zeros(FP_BITS)
    probs[:3] = [0.25, 0.1, 0.2]
    assert threshold_probabilities(probs, 0.2).on_bits() == [0, 2]
    with pytest.raises(DimensionError):
        threshold_probabilities(np.zeros(100), 0.2)
    with pytest.raises(ValueError):
        threshold_probabilities(np.zeros(FP_BITS), 0.0)


@settings(max_examples=50)
@given(st.integers(0, 2**32 - 1), st.floats(0.01, 0.99), st.floats(0.01, 0.99))
def test_threshold_antitone(seed, e1, e2):
    e1, e2 = sorted((e1, e2))
    probs = np.random.default_rng(seed).random(FP_BITS)
    lo, hi = threshold_probabilities(probs, e1), threshold_probabilities(probs, e2)
    assert hi.bits & ~lo.bits == 0
    assert set(threshold_probabilities(probs, e1).on_bits()) == set(np.flatnonzero(probs >= e1).tolist())


def test_probability_vector_validation():
    with pytest.raises(DimensionError):
        ProbabilityVector(np.zeros(10))
    bad = np.zeros(FP_BITS)
    bad[0] = 1.5
    with pytest.raises(ValueError):
        ProbabilityVector(bad)


def test_file_formats_roundtrip(tmp_path):
    rng = np.random.default_rng(0)
    vecs = [ProbabilityVector(rng.random(FP_BITS).astype(np.float32).astype(np.float64), f"s{i}") for i in range(3)]
    write_probabilities_jsonl(tmp_path / "p.jsonl", vecs)
    write_probabilities_fpv1(tmp_path / "p.fpv1", vecs)
    got_j = list(iter_probabilities(tmp_path / "p.jsonl"))
    got_b = list(iter_probabilities(tmp_path / "p.fpv1"))
    assert [i for i, _ in got_j] == ["s0", "s1", "s2"]
    assert [i for i, _ in got_b] == ["0", "1", "2"]
    for v, (_, a), (_, b) in zip(vecs, got_j, got_b):
        np.testing.assert_array_equal(a.probs, v.probs)
        np.testing.assert_array_equal(b.probs, v.probs)


def test_malformed_records(tmp_path):
    p = tmp_path / "bad.jsonl"
    p.write_text('{"id": "a", "probs": [0.1]}\nnot json\n{"id": "b", "probs": [' + ",".join(["0.5"] * FP_BITS) + "]}\n")
    items = list(iter_probabilities(p))
    assert sum(isinstance(x, Exception) for _, x in items) == 2
    assert items[-1][0] == "b" and isinstance(items[-1][1], ProbabilityVector)
    trunc = tmp_path / "t.fpv1"
    trunc.write_bytes(b"FPV1" + (2).to_bytes(4, "little") + b"\0" * 100)
    with pytest.raises(FileFormatError):
        list(iter_probabilities(trunc))
