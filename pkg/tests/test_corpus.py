import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fp2mol.chem import canonical_key, parse_smiles
from fp2mol.corpus import (
    CorpusRecord,
    NoiseModel,
    OverflowCounter,
    Task,
    ToyMoleculeGenerator,
    ingest_experimental,
    leakage_filter,
    make_pretrain_example,
    mask_selfies,
    read_corpus,
    record_rng,
    records_from_smiles,
    sample_task,
    simulate_noisy_probs,
    split_held_out,
    write_corpus,
)
from fp2mol.fingerprint import (
    EVAL_BITS,
    FP_BITS,
    FileFormatError,
    Fingerprint,
    ProbabilityVector,
    morgan_fingerprint,
    tanimoto,
    threshold_probabilities,
    write_probabilities_fpv1,
    write_probabilities_jsonl,
)
from fp2mol.metrics import mces_distance
from fp2mol.selfies_codec import encode_selfies
from fp2mol.vocab import build_vocab


@pytest.fixture(scope="module")
def graphs():
    return ToyMoleculeGenerator(seed=21).molecules(120)


@pytest.fixture(scope="module")
def records(graphs):
    return [CorpusRecord.from_graph(f"m{i}", g) for i, g in enumerate(graphs)]


@pytest.fixture(scope="module")
def vocab(records):
    return build_vocab([r.selfies for r in records] + [["[C]"]])


def test_mask_examples():
    toks = [f"[T{i}]" for i in range(10)]
    out = mask_selfies(toks, 0.3, np.random.default_rng(0))
    assert out.count("<mask>") == 3
    assert mask_selfies(toks, 0.0, np.random.default_rng(0)) == toks
    assert mask_selfies(toks, 0.3, np.random.default_rng(5)) == mask_selfies(toks, 0.3, np.random.default_rng(5))
    assert mask_selfies([], 0.3, np.random.default_rng(0)) == []


@settings(max_examples=1000)
@given(st.integers(0, 200), st.floats(0.0, 0.99), st.integers(0, 2**32 - 1))
def test_mask_count_exact(n, rate, seed):
    toks = [f"[T{i}]" for i in range(n)]
    out = mask_selfies(toks, rate, np.random.default_rng(seed))
    assert out.count("<mask>") == math.floor(rate * n + 0.5)
    assert all(o == t for o, t in zip(out, toks) if o != "<mask>")


def test_record_invariants(records):
    for r in records:
        g = parse_smiles(r.smiles)
        assert list(r.selfies) == encode_selfies(g)
        assert r.fp4096 == morgan_fingerprint(g, 2, FP_BITS)
        assert canonical_key(g) == r.smiles


def test_corpus_jsonl_roundtrip(records, tmp_path):
    write_corpus(tmp_path / "c.jsonl", records)
    again = read_corpus(tmp_path / "c.jsonl")
    assert again == records
    write_corpus(tmp_path / "d.jsonl", again)
    assert (tmp_path / "c.jsonl").read_bytes() == (tmp_path / "d.jsonl").read_bytes()


def test_records_from_smiles_skips_bad_input():
    recs, skipped = records_from_smiles(["CCO", "C1CC", "CC.O", "c1ccccc1"])
    assert [r.smiles for r in recs] == [canonical_key(parse_smiles("CCO")), canonical_key(parse_smiles("c1ccccc1"))]
    assert skipped == 2


def test_translation_layout_on_ethane():
    rec = CorpusRecord.from_smiles("e", "CC")
    v = build_vocab([rec.selfies])
    ex = make_pretrain_example(Task.TRANSLATE, rec, v, np.random.default_rng(0))
    assert list(ex.source[:-1]) == v.fp_ids(rec.fp4096)
    assert ex.source[-1] == v.eos_id
    assert v.decode_ids(ex.target) == ["<bos>", "[C]", "[C]", "<eos>"]


def test_layouts(records, vocab):
    for i, rec in enumerate(records[:30]):
        fp = vocab.fp_ids(rec.fp4096)
        for task in Task:
            ex = make_pretrain_example(task, rec, vocab, record_rng(0, 0, i))
            assert ex.target == tuple(vocab.target_ids(rec.selfies))
            body = list(ex.source[:-1])
            if task == Task.HYBRID_FP_FIRST:
                assert body.count(vocab.sep_id) == 1
                cut = body.index(vocab.sep_id)
                assert body[:cut] == fp
                assert all(not (5 <= x < 4101) for x in body[cut + 1 :])
            elif task == Task.HYBRID_S_FIRST:
                assert body.count(vocab.sep_id) == 1
                assert body[body.index(vocab.sep_id) + 1 :] == fp
            elif task == Task.DENOISE:
                assert len(body) == len(rec.selfies)
                assert body.count(vocab.mask_id) == math.floor(0.3 * len(rec.selfies) + 0.5)


def test_overflow_counted(records, vocab):
    counter = OverflowCounter()
    assert make_pretrain_example(Task.TRANSLATE, records[0], vocab, np.random.default_rng(0), max_len=3, overflow=counter) is None
    assert counter.count == 1 and counter.by_task == {2: 1}


def test_task_frequencies_uniform():
    draws = np.array([int(sample_task(record_rng(0, 0, i))) for i in range(100_000)])
    for t in range(1, 5):
        assert abs((draws == t).mean() - 0.25) <= 0.02


# ---- leakage filtering against a brute-force pairwise scan


def test_leakage_filter_matches_brute_force(graphs):
    pool, refs = list(graphs[:50]), list(graphs[50:55])
    pool[3] = refs[1]  # a verbatim test member
    ref_fps = [morgan_fingerprint(g, 2, EVAL_BITS) for g in refs]
    expected_t = [
        i for i, g in enumerate(pool)
        if canonical_key(g) not in {canonical_key(r) for r in refs}
        and max(tanimoto(morgan_fingerprint(g, 2, EVAL_BITS), f) for f in ref_fps) <= 0.5
    ]
    assert leakage_filter(pool, refs, "tanimoto_gt_0.5") == expected_t
    expected_m = [i for i, g in enumerate(pool) if min(mces_distance(g, r)[0] for r in refs) >= 2]
    assert leakage_filter(pool, refs, "mces_lt2") == expected_m
    assert 3 not in expected_t and 3 not in expected_m
    kept = [pool[i] for i in expected_t]
    assert leakage_filter(kept, refs, "tanimoto_gt_0.5") == list(range(len(kept)))


def test_tanimoto_boundary_is_retained():
    a, b = parse_smiles("CCC(C)SN"), parse_smiles("CCC(C)SC")
    assert tanimoto(morgan_fingerprint(a, 2, EVAL_BITS), morgan_fingerprint(b, 2, EVAL_BITS)) == 0.5
    assert leakage_filter([a], [b], "tanimoto_gt_0.5") == [0]
    assert leakage_filter([a], [b], "tanimoto_gt_0.5", threshold=0.49) == []


def test_held_out_split_respects_similarity(graphs):
    train, test = split_held_out(graphs, 20, 0.5, seed=0)
    assert len(test) == 20 and not set(train) & set(test)
    test_fps = [morgan_fingerprint(graphs[i], 2, EVAL_BITS) for i in test]
    for i in train:
        fp = morgan_fingerprint(graphs[i], 2, EVAL_BITS)
        assert max(tanimoto(fp, f) for f in test_fps) <= 0.5


# ---- simulated fingerprint probabilities


def _fp100():
    return Fingerprint.from_indices(FP_BITS, range(0, 4000, 40))


def test_noise_free_limit_recovers_fp():
    fp = _fp100()
    pv = simulate_noisy_probs(fp, NoiseModel(0.0, 0.0, math.inf), np.random.default_rng(0))
    for eps in (0.01, 0.2, 0.5, 0.99):
        assert threshold_probabilities(pv, eps) == fp


def test_noise_is_seeded():
    nm = NoiseModel(0.1, 0.01, 8.0)
    a = simulate_noisy_probs(_fp100(), nm, np.random.default_rng(3)).probs
    b = simulate_noisy_probs(_fp100(), nm, np.random.default_rng(3)).probs
    assert a.tobytes() == b.tobytes()
    assert a.min() >= 0.0 and a.max() <= 1.0


def test_recovery_f1_against_monte_carlo_oracle():
    """Mean F1 over 10k simulated vectors vs the closed-form expectation.

    High regime Beta(s, 1): P(p >= eps) = 1 - eps**s. Low regime Beta(1, s):
    P(p >= eps) = (1 - eps)**s. Expected TP/FP/FN counts follow from the flip
    rates; F1 of the expected counts is within the sampling noise of mean F1.
    """
    s, eps, n_on = 8.0, 0.2, 100
    nm = NoiseModel(0.1, 0.01, s)
    fp = _fp100()
    on = fp.to_array().astype(bool)
    rng = np.random.default_rng(0)
    f1s = np.empty(10_000)
    for t in range(len(f1s)):
        got = simulate_noisy_probs(fp, nm, rng).probs >= eps
        tp = np.count_nonzero(got & on)
        f1s[t] = 2 * tp / (np.count_nonzero(got) + n_on)
    hi, lo = 1 - eps**s, (1 - eps) ** s
    tp = n_on * (0.9 * hi + 0.1 * lo)
    fp_ = (FP_BITS - n_on) * (0.01 * hi + 0.99 * lo)
    expected = 2 * tp / (2 * tp + fp_ + (n_on - tp))
    assert abs(f1s.mean() - expected) <= 0.02


def test_ingest_examples(tmp_path):
    rng = np.random.default_rng(0)
    vecs = [ProbabilityVector(rng.random(FP_BITS).astype(np.float32).astype(np.float64), f"s{i}") for i in range(2)]
    write_probabilities_jsonl(tmp_path / "p.jsonl", vecs)
    with open(tmp_path / "p.jsonl", "a") as fh:
        fh.write('{"id": "bad", "probs": [0.5, 0.5]}\n')
    got, skipped = ingest_experimental(tmp_path / "p.jsonl", 0.2)
    assert len(got) == 2 and skipped == 1
    write_probabilities_fpv1(tmp_path / "p.fpv1", vecs)
    got_b, _ = ingest_experimental(tmp_path / "p.fpv1", 0.2)
    assert [f for _, f in got_b] == [f for _, f in got]
    write_probabilities_fpv1(tmp_path / "empty.fpv1", [])
    assert ingest_experimental(tmp_path / "empty.fpv1", 0.2) == ([], 0)
    (tmp_path / "bad.fpv1").write_bytes(b"FPV1\x05\x00\x00\x00")
    with pytest.raises(FileFormatError):
        ingest_experimental(tmp_path / "bad.fpv1", 0.2)
    kept, _ = ingest_experimental(tmp_path / "p.jsonl", 0.2, keep=lambda rid: rid != "s1")
    assert [rid for rid, _ in kept] == ["s0"]


def test_toy_generator_deterministic():
    a = [canonical_key(g) for g in ToyMoleculeGenerator(seed=4).molecules(50)]
    b = [canonical_key(g) for g in ToyMoleculeGenerator(seed=4).molecules(50)]
    assert a == b and len(set(a)) == 50
