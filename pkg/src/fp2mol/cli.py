"""Command-line entry points: corpus building, training stages, prediction, evaluation, ablations.

Every command reads an INI config (``--config``) with ``--set section.key=value``
overrides, and every artifact it writes carries the resolved config hash and
the sha256 of each input file.

Exit codes: 0 success, 1 usage/config/prerequisite, 2 data error, 3 internal error.
"""

from __future__ import annotations

import argparse
import configparser
import hashlib
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np
import torch

from .chem import ChemError, parse_smiles
from .corpus import (
    CorpusRecord,
    LeakageStats,
    NoiseModel,
    ToyMoleculeGenerator,
    iter_smiles_file,
    leakage_filter,
    read_corpus,
    records_from_smiles,
    simulate_noisy_probs,
    split_held_out,
    write_corpus,
)
from .decode import DecodeConfig, generate, read_predictions, rerank_by_formula, write_predictions
from .fingerprint import EVAL_BITS, FileFormatError, iter_probabilities, morgan_fingerprint, tanimoto, threshold_probabilities
from .metrics import JoinError, evaluate_candidates, mces_distance
from .model import STAGES, build_model, load_checkpoint, save_checkpoint
from .selfies_codec import UnsupportedFeature
from .train import FinetunePair, TrainingSchedule, train_align, train_finetune, train_pretrain
from .vocab import EmptyCorpus, UnifiedVocab, UnknownToken, build_vocab

log = logging.getLogger("fp2mol")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_INTERNAL = 0, 1, 2, 3


class UsageError(Exception):
    """Bad flags, bad config values or a missing stage prerequisite."""


class DataError(Exception):
    """Input data that cannot be processed."""


# ------------------------------------------------------------------ config

DEFAULTS: dict[str, dict[str, object]] = {
    "paths": {
        "smiles": "",  # build-corpus input, one SMILES per line
        "test_refs": "",  # optional SMILES list used for leakage filtering
        "corpus": "work/corpus.jsonl",
        "vocab": "work/vocab.json",
        "checkpoints": "work/checkpoints",
        "probabilities": "",  # optional JSONL/FPV1 fingerprint probabilities for predict/sweep
        "predictions": "work/predictions.jsonl",
        "reports": "work/reports",
    },
    "corpus": {
        "seed": 0,
        "held_out": 0,  # molecules moved to the test split
        "val": 0,  # molecules moved to the val split (after leakage filtering)
        "max_similarity": 0.5,
        "leakage_mode": "tanimoto_gt_0.5",  # or mces_lt2
    },
    "model": {"enc_layers": 2, "dec_layers": 2, "hidden_dim": 128, "ff_dim": 512, "heads": 4, "max_positions": 512, "dropout": 0.1},
    "pretrain": {"lr": 6e-4, "min_lr": 1e-5, "warmup_ratio": 0.0, "epochs": 10, "batch_size": 32, "seed": 0},
    "finetune": {
        "lr": 5e-5, "min_lr": 0.0, "warmup_ratio": 0.1, "epochs": 10, "batch_size": 32,
        "eval_every": 0, "patience": 3, "eval_beam": 5, "seed": 0, "init": "pretrain",
    },
    "align": {
        "lr": 5e-5, "min_lr": 0.0, "warmup_ratio": 0.1, "epochs": 3, "batch_size": 32,
        "eval_every": 0, "patience": 5, "eval_beam": 5, "alpha": 5.0, "gamma": 0.1,
        "n_candidates": 3, "length_penalty": 1.0, "inject_gold": False, "seed": 0,
    },
    "noise": {"enabled": False, "p_flip_on_off": 0.1, "p_flip_off_on": 0.002, "prob_sharpness": 30.0, "seed": 0},
    "decode": {
        "beam_width": 20, "num_return": 100, "temperature": 1.0, "length_penalty": 1.0,
        "max_len": 128, "seed": 0, "max_passes": 5, "batch_size": 16,
    },
    "predict": {"stage": "align", "split": "test", "eps": 0.2, "formula_rerank": True},
    "eval": {"ks": "1,10", "mces_budget": 200_000, "with_mces": True},
    "sweep": {"grid": "0.10,0.11,0.12,0.13,0.14,0.15,0.16,0.17,0.18,0.19,0.20", "split": "val"},
    "ablate": {"temperatures": "0.2,0.4,0.8"},
}


def _coerce(section: str, key: str, raw: str) -> object:
    default = DEFAULTS[section][key]
    try:
        if isinstance(default, bool):
            return configparser.ConfigParser.BOOLEAN_STATES[raw.strip().lower()]
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
    except (KeyError, ValueError) as exc:
        raise UsageError(f"bad value for {section}.{key}: {raw!r}") from exc
    return raw.strip()


def load_config(path: str | None, overrides: list[str]) -> dict[str, dict[str, object]]:
    """Defaults, then the INI file, then --set overrides (flags win)."""
    cfg = {s: dict(v) for s, v in DEFAULTS.items()}
    pairs: list[tuple[str, str, str]] = []
    if path:
        if not Path(path).is_file():
            raise UsageError(f"config file not found: {path}")
        parser = configparser.ConfigParser(interpolation=None)
        try:
            parser.read(path, encoding="utf-8")
        except configparser.Error as exc:
            raise UsageError(f"cannot parse config {path}: {exc}") from exc
        for section in parser.sections():
            for key, raw in parser.items(section):
                pairs.append((section, key, raw))
    for item in overrides:
        name, sep, raw = item.partition("=")
        section, dot, key = name.partition(".")
        if not sep or not dot:
            raise UsageError(f"--set expects section.key=value, got {item!r}")
        pairs.append((section.strip(), key.strip(), raw))
    for section, key, raw in pairs:
        if section not in DEFAULTS or key not in DEFAULTS[section]:
            raise UsageError(f"unknown config key {section}.{key}")
        cfg[section][key] = _coerce(section, key, raw)
    return cfg


def config_hash(cfg: dict) -> str:
    return hashlib.sha256(json.dumps(cfg, sort_keys=True).encode()).hexdigest()


def file_hash(path: str | Path) -> str:
    h = hashlib.sha256()
    path = Path(path)
    files = sorted(p for p in path.rglob("*") if p.is_file()) if path.is_dir() else [path]
    for f in files:
        if path.is_dir():
            h.update(str(f.relative_to(path)).encode() + b"\0")
        h.update(f.read_bytes())
    return h.hexdigest()


def _manifest(cfg: dict, command: str, inputs: dict[str, str | Path], **extra) -> dict:
    return {
        "command": command,
        "config_hash": config_hash(cfg),
        "config": cfg,
        "inputs": {name: {"path": str(p), "sha256": file_hash(p)} for name, p in sorted(inputs.items())},
        **extra,
    }


def _write_json(path: str | Path, doc: dict) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n", encoding="utf-8")


def _require(path: str | Path, what: str) -> Path:
    if not str(path) or not Path(path).exists():
        raise UsageError(f"missing prerequisite: {what} ({path or 'not configured'})")
    return Path(path)


def _floats(text: str, name: str) -> list[float]:
    try:
        vals = [float(x) for x in text.split(",") if x.strip()]
    except ValueError as exc:
        raise UsageError(f"{name} must be a comma-separated list of numbers") from exc
    if not vals:
        raise UsageError(f"{name} is empty")
    return vals


def _schedule(cfg: dict, stage: str) -> TrainingSchedule:
    fields = {k: v for k, v in cfg[stage].items() if k != "init"}
    try:
        return TrainingSchedule.for_stage(stage, **fields)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"bad [{stage}] settings: {exc}") from exc


def _decode_config(cfg: dict, **overrides) -> DecodeConfig:
    try:
        return replace(DecodeConfig(**cfg["decode"]), **overrides)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"bad [decode] settings: {exc}") from exc


def _ckpt_dir(cfg: dict, stage: str) -> Path:
    return Path(str(cfg["paths"]["checkpoints"])) / stage


# ------------------------------------------------------------------ corpus


def cmd_make_toy(cfg: dict, args: argparse.Namespace) -> None:
    graphs = ToyMoleculeGenerator(args.seed).molecules(args.n)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    from .chem import canonical_key

    out.write_text("".join(canonical_key(g) + "\n" for g in graphs), encoding="utf-8")
    print(f"wrote {len(graphs)} molecules to {out}")


def cmd_build_corpus(cfg: dict, args: argparse.Namespace) -> None:
    paths, cc = cfg["paths"], cfg["corpus"]
    src = _require(paths["smiles"], "input SMILES list [paths] smiles")
    inputs: dict[str, str | Path] = {"smiles": src}
    records, skipped = records_from_smiles(iter_smiles_file(src))
    if not records:
        raise DataError(f"no usable molecules in {src} ({skipped} skipped)")
    graphs = [r.graph() for r in records]
    stats = LeakageStats()
    n_test = int(cc["held_out"])
    if n_test:
        if n_test >= len(records):
            raise UsageError("corpus.held_out must be smaller than the corpus")
        train_idx, test_idx = split_held_out(graphs, n_test, float(cc["max_similarity"]), int(cc["seed"]))
        stats.removed_similar = len(records) - n_test - len(train_idx)
    else:
        train_idx, test_idx = list(range(len(records))), []
    if paths["test_refs"]:
        refs_path = _require(paths["test_refs"], "test reference SMILES")
        inputs["test_refs"] = refs_path
        refs = [parse_smiles(s) for s in iter_smiles_file(refs_path)]
        if not refs:
            raise DataError(f"no molecules in {refs_path}")
        mode = str(cc["leakage_mode"])
        if mode not in ("tanimoto_gt_0.5", "mces_lt2"):
            raise UsageError(f"unknown corpus.leakage_mode {mode!r}")
        ref_stats = LeakageStats()
        kept = leakage_filter([graphs[i] for i in train_idx], refs, mode, threshold=float(cc["max_similarity"]), stats=ref_stats)
        stats.removed_exact += ref_stats.removed_exact
        stats.removed_similar += ref_stats.removed_similar
        stats.removed_inexact += ref_stats.removed_inexact
        train_idx = [train_idx[i] for i in kept]
    n_val = int(cc["val"])
    val_idx: list[int] = []
    if n_val:
        if n_val >= len(train_idx):
            raise UsageError("corpus.val must be smaller than the training pool")
        rng = np.random.default_rng([int(cc["seed"]), 1])
        val_idx = sorted(int(train_idx[i]) for i in rng.choice(len(train_idx), n_val, replace=False))
        chosen = set(val_idx)
        train_idx = [i for i in train_idx if i not in chosen]
    split = {**{i: "train" for i in train_idx}, **{i: "val" for i in val_idx}, **{i: "test" for i in test_idx}}
    out = [replace(records[i], split=split[i]) for i in sorted(split)]
    corpus_path, vocab_path = Path(str(paths["corpus"])), Path(str(paths["vocab"]))
    corpus_path.parent.mkdir(parents=True, exist_ok=True)
    vocab_path.parent.mkdir(parents=True, exist_ok=True)
    write_corpus(corpus_path, out)
    vocab = build_vocab(r.selfies for r in out)
    vocab.save(vocab_path)
    counts = {s: sum(r.split == s for r in out) for s in ("train", "val", "test")}
    stats.kept = counts["train"]
    manifest = _manifest(
        cfg, "build-corpus", inputs,
        counts=counts,
        skipped=skipped,
        leakage={k: getattr(stats, k) for k in ("kept", "removed_exact", "removed_similar", "removed_inexact")},
        outputs={"corpus": file_hash(corpus_path), "vocab": file_hash(vocab_path)},
        vocab_hash=vocab.hash(),
        selfies_tokens=len(vocab.selfies_tokens),
    )
    _write_json(corpus_path.with_name(corpus_path.name + ".manifest.json"), manifest)
    print(f"corpus: {counts} skipped={skipped} leakage_removed={stats.removed_exact + stats.removed_similar + stats.removed_inexact}")


def _load_corpus(cfg: dict) -> tuple[list[CorpusRecord], UnifiedVocab]:
    corpus = _require(cfg["paths"]["corpus"], "corpus (run build-corpus)")
    vocab = _require(cfg["paths"]["vocab"], "vocab (run build-corpus)")
    return read_corpus(corpus), UnifiedVocab.load(vocab)


def _split(records: list[CorpusRecord], name: str) -> list[CorpusRecord]:
    return [r for r in records if r.split == name]


def _noisy_pairs(cfg: dict, recs: list[CorpusRecord], eps: float) -> list[FinetunePair]:
    """Gold fingerprints, or thresholded simulated probabilities when [noise] is enabled."""
    nc = cfg["noise"]
    if not nc["enabled"]:
        return [FinetunePair.from_record(r) for r in recs]
    nm = NoiseModel(float(nc["p_flip_on_off"]), float(nc["p_flip_off_on"]), float(nc["prob_sharpness"]), int(nc["seed"]))
    out = []
    for r in recs:
        rng = np.random.default_rng([nm.seed, int(hashlib.sha256(r.id.encode()).hexdigest()[:8], 16)])
        pv = simulate_noisy_probs(r.fp4096, nm, rng, r.id)
        out.append(FinetunePair.from_record(r, threshold_probabilities(pv, eps)))
    return out


# ------------------------------------------------------------------ training


def cmd_train(cfg: dict, args: argparse.Namespace) -> None:
    stage = args.stage
    records, vocab = _load_corpus(cfg)
    inputs: dict[str, str | Path] = {"corpus": cfg["paths"]["corpus"], "vocab": cfg["paths"]["vocab"]}
    train = _split(records, "train")
    if not train:
        raise DataError("corpus has no training records")
    val = _split(records, "val")
    sched = _schedule(cfg, stage)
    eps = float(cfg["predict"]["eps"])
    if stage == "pretrain":
        torch.manual_seed(sched.seed)  # weight initialisation
        try:
            model = build_model(vocab, **cfg["model"])
        except ValueError as exc:
            raise UsageError(f"bad [model] settings: {exc}") from exc
        result = train_pretrain(model, vocab, train, sched)
    else:
        prev = {"finetune": "pretrain", "align": "finetune"}[stage]
        if stage == "finetune" and cfg["finetune"]["init"] == "scratch":
            torch.manual_seed(sched.seed)
            model = build_model(vocab, **cfg["model"])
        else:
            prev_dir = _require(_ckpt_dir(cfg, prev) / "manifest.json", f"{prev} checkpoint").parent
            inputs[f"{prev}_checkpoint"] = prev_dir / "weights.safetensors"
            ck = load_checkpoint(prev_dir)
            if ck.vocab.hash() != vocab.hash():
                raise UsageError(f"{prev} checkpoint was trained with a different vocabulary")
            model = ck.model
        pairs = _noisy_pairs(cfg, train, eps)
        val_pairs = _noisy_pairs(cfg, val, eps) if val else None
        fn = train_finetune if stage == "finetune" else train_align
        result = fn(model, vocab, pairs, sched, val_pairs)
    out = _ckpt_dir(cfg, stage)
    manifest = _manifest(cfg, f"train {stage}", inputs, training=result.manifest())
    save_checkpoint(out, model, vocab, stage, manifest)
    print(f"{stage}: {result.steps} steps, checkpoint at {out}")


# ------------------------------------------------------------------ prediction


def _inputs_for_prediction(cfg: dict, vocab: UnifiedVocab, split: str, eps: float, inputs: dict) -> tuple[list[str], list, list]:
    """(ids, fingerprints, formulas) from a probability file or a corpus split."""
    prob = str(cfg["paths"]["probabilities"])
    if prob:
        path = _require(prob, "fingerprint probability file")
        inputs["probabilities"] = path
        ids, fps = [], []
        try:
            for rid, item in iter_probabilities(path):
                if isinstance(item, Exception):
                    log.warning("skipping record %s: %s", rid, item)
                    continue
                ids.append(rid)
                fps.append(threshold_probabilities(item, eps))
        except FileFormatError as exc:
            raise DataError(str(exc)) from exc
        recs = {r.id: r for r in read_corpus(cfg["paths"]["corpus"])} if Path(str(cfg["paths"]["corpus"])).exists() else {}
        formulas = [recs[i].formula if i in recs else None for i in ids]
        return ids, fps, formulas
    records = _split(read_corpus(_require(cfg["paths"]["corpus"], "corpus")), split)
    if not records:
        raise DataError(f"corpus has no {split!r} records")
    inputs["corpus"] = cfg["paths"]["corpus"]
    pairs = _noisy_pairs(cfg, records, eps)
    return [p.id for p in pairs], [p.fp for p in pairs], [p.formula for p in pairs]


def _predict(model, vocab, ids, fps, formulas, dcfg: DecodeConfig, formula_rerank: bool):
    sources = [vocab.fp_ids(fp) + [vocab.eos_id] for fp in fps]
    cands = generate(model, vocab, sources, dcfg)
    if formula_rerank:
        return [rerank_by_formula(cs, f) for cs, f in zip(cands, formulas)]
    return [sorted(cs, key=lambda c: (-c.score, c.key)) for cs in cands]


def _load_stage(cfg: dict, inputs: dict):
    stage = str(cfg["predict"]["stage"])
    if stage not in STAGES:
        raise UsageError(f"predict.stage must be one of {STAGES}")
    ck_dir = _require(_ckpt_dir(cfg, stage) / "manifest.json", f"{stage} checkpoint").parent
    inputs["checkpoint"] = ck_dir / "weights.safetensors"
    return load_checkpoint(ck_dir)


def cmd_predict(cfg: dict, args: argparse.Namespace) -> None:
    inputs: dict = {}
    ck = _load_stage(cfg, inputs)
    pc = cfg["predict"]
    ids, fps, formulas = _inputs_for_prediction(cfg, ck.vocab, str(pc["split"]), float(pc["eps"]), inputs)
    ranked = _predict(ck.model, ck.vocab, ids, fps, formulas, _decode_config(cfg), bool(pc["formula_rerank"]))
    out = Path(str(cfg["paths"]["predictions"]))
    out.parent.mkdir(parents=True, exist_ok=True)
    write_predictions(out, ids, ranked, _manifest(cfg, "predict", inputs, n_inputs=len(ids)))
    print(f"wrote predictions for {len(ids)} inputs to {out}")


# ------------------------------------------------------------------ evaluation


def _gold(cfg: dict, ids: list[str] | None = None) -> dict[str, str]:
    records = read_corpus(_require(cfg["paths"]["corpus"], "corpus"))
    by_id = {r.id: r.smiles for r in records}
    if ids is not None:
        missing = [i for i in ids if i not in by_id]
        if missing:
            raise JoinError(f"no gold structure for ids: {missing[:5]}")
        return {i: by_id[i] for i in ids}
    split = str(cfg["predict"]["split"])
    return {r.id: r.smiles for r in records if r.split == split}


def _ks(cfg: dict) -> tuple[int, ...]:
    try:
        ks = tuple(sorted({int(k) for k in str(cfg["eval"]["ks"]).split(",") if k.strip()}))
    except ValueError as exc:
        raise UsageError("eval.ks must be a comma-separated list of integers") from exc
    if not ks or ks[0] < 1:
        raise UsageError("eval.ks must list positive integers")
    return ks


def cmd_evaluate(cfg: dict, args: argparse.Namespace) -> None:
    pred_path = _require(cfg["paths"]["predictions"], "predictions (run predict)")
    ranked = read_predictions(pred_path)
    gold = _gold(cfg)
    ec = cfg["eval"]
    report = evaluate_candidates(
        ranked, gold, _ks(cfg), int(ec["mces_budget"]),
        _manifest(cfg, "evaluate", {"predictions": pred_path, "corpus": cfg["paths"]["corpus"]}),
        bool(ec["with_mces"]),
    )
    _check_orderings(report.aggregates, report.ks)
    out = Path(str(cfg["paths"]["reports"]))
    out.mkdir(parents=True, exist_ok=True)
    report.write(out / "eval_report.json", out / "eval_report.csv")
    for k, v in sorted(report.aggregates.items()):
        print(f"{k}\t{v:.4f}")


def _check_orderings(agg: dict[str, float], ks: tuple[int, ...]) -> None:
    """Larger k can only help: accuracy and Tanimoto rise, MCES falls."""
    for a, b in zip(ks, ks[1:]):
        if agg[f"top{a}_accuracy"] > agg[f"top{b}_accuracy"] or agg[f"top{a}_max_tanimoto"] > agg[f"top{b}_max_tanimoto"] + 1e-12:
            raise AssertionError(f"top-{a} metric exceeds top-{b}")
        if f"top{a}_min_mces" in agg and agg[f"top{b}_min_mces"] > agg[f"top{a}_min_mces"]:
            raise AssertionError(f"top-{b} MCES exceeds top-{a}")


def _write_table(path: Path, header: list[str], rows: list[list]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = ["\t".join(header)] + ["\t".join(str(x) for x in row) for row in rows]
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def _probabilities_for_sweep(cfg: dict, split: str, inputs: dict):
    """(ids, probability vectors, formulas): the configured file, or simulated noise on a corpus split."""
    prob = str(cfg["paths"]["probabilities"])
    records = read_corpus(_require(cfg["paths"]["corpus"], "corpus"))
    inputs["corpus"] = cfg["paths"]["corpus"]
    by_id = {r.id: r for r in records}
    if prob:
        inputs["probabilities"] = _require(prob, "fingerprint probability file")
        ids, pvs = [], []
        try:
            for rid, item in iter_probabilities(prob):
                if not isinstance(item, Exception):
                    ids.append(rid)
                    pvs.append(item)
        except FileFormatError as exc:
            raise DataError(str(exc)) from exc
        return ids, pvs, [by_id[i].formula if i in by_id else None for i in ids]
    recs = _split(records, split)
    if not recs:
        raise DataError(f"corpus has no {split!r} records")
    nc = cfg["noise"]
    nm = NoiseModel(float(nc["p_flip_on_off"]), float(nc["p_flip_off_on"]), float(nc["prob_sharpness"]), int(nc["seed"]))
    pvs = []
    for r in recs:
        rng = np.random.default_rng([nm.seed, int(hashlib.sha256(r.id.encode()).hexdigest()[:8], 16)])
        pvs.append(simulate_noisy_probs(r.fp4096, nm, rng, r.id))
    return [r.id for r in recs], pvs, [r.formula for r in recs]


def cmd_sweep_threshold(cfg: dict, args: argparse.Namespace) -> None:
    grid = sorted(_floats(str(cfg["sweep"]["grid"]), "sweep.grid"))
    inputs: dict = {}
    ck = _load_stage(cfg, inputs)
    ids, pvs, formulas = _probabilities_for_sweep(cfg, str(cfg["sweep"]["split"]), inputs)
    gold = _gold(cfg, ids)
    dcfg = _decode_config(cfg)
    rows, prev_fps = [], None
    for eps in grid:
        fps = [threshold_probabilities(pv, eps) for pv in pvs]
        if prev_fps is not None:
            # a higher threshold can only switch bits off
            for lo, hi in zip(prev_fps, fps):
                if hi.bits & ~lo.bits:
                    raise AssertionError(f"threshold antitonicity violated at eps={eps}")
        prev_fps = fps
        ranked = _predict(ck.model, ck.vocab, ids, fps, formulas, dcfg, bool(cfg["predict"]["formula_rerank"]))
        report = evaluate_candidates(dict(zip(ids, [[c.key for c in cs] for cs in ranked])), gold, (1,), with_mces=False)
        rows.append([f"{eps:.2f}", f"{report.aggregates['top1_max_tanimoto']:.6f}", f"{np.mean([fp.count() for fp in fps]):.2f}"])
    best = max(range(len(rows)), key=lambda i: (float(rows[i][1]), -i))
    for i, row in enumerate(rows):
        row.append("*" if i == best else "")
    out = Path(str(cfg["paths"]["reports"]))
    _write_table(out / "threshold_sweep.tsv", ["eps", "top1_tanimoto", "mean_on_bits", "best"], rows)
    _write_json(out / "threshold_sweep.manifest.json", _manifest(cfg, "sweep-threshold", inputs, best_eps=float(rows[best][0])))
    for row in rows:
        print("\t".join(row))


def cmd_ablate_temperature(cfg: dict, args: argparse.Namespace) -> None:
    temps = _floats(str(cfg["ablate"]["temperatures"]), "ablate.temperatures")
    inputs: dict = {}
    ck = _load_stage(cfg, inputs)
    pc = cfg["predict"]
    ids, fps, formulas = _inputs_for_prediction(cfg, ck.vocab, str(pc["split"]), float(pc["eps"]), inputs)
    gold = _gold(cfg, ids)
    ks = _ks(cfg)
    ec = cfg["eval"]
    header = ["temperature"]
    for k in ks:
        header += [f"top{k}_accuracy", f"top{k}_max_tanimoto"] + ([f"top{k}_min_mces"] if ec["with_mces"] else [])
    header.append("top1_same_as_first")
    rows, first_top1 = [], None
    for t in temps:
        ranked = _predict(ck.model, ck.vocab, ids, fps, formulas, _decode_config(cfg, temperature=t), bool(pc["formula_rerank"]))
        top1 = [cs[0].key if cs else "" for cs in ranked]
        first_top1 = first_top1 or top1
        report = evaluate_candidates(
            dict(zip(ids, [[c.key for c in cs] for cs in ranked])), gold, ks, int(ec["mces_budget"]), with_mces=bool(ec["with_mces"])
        )
        row = [f"{t:g}"]
        for name in header[1:-1]:
            row.append(f"{report.aggregates[name]:.6f}")
        row.append(f"{np.mean([a == b for a, b in zip(top1, first_top1)]):.6f}")
        rows.append(row)
    out = Path(str(cfg["paths"]["reports"]))
    _write_table(out / "temperature_ablation.tsv", header, rows)
    _write_json(out / "temperature_ablation.manifest.json", _manifest(cfg, "ablate-temperature", inputs))
    print("\t".join(header))
    for row in rows:
        print("\t".join(row))


# ------------------------------------------------------------------ single-pair utilities


def cmd_fp(cfg: dict, args: argparse.Namespace) -> None:
    fp = morgan_fingerprint(parse_smiles(args.smiles), args.radius, args.nbits)
    print(" ".join(str(b) for b in fp.on_bits()))


def cmd_tanimoto(cfg: dict, args: argparse.Namespace) -> None:
    a = morgan_fingerprint(parse_smiles(args.a), 2, EVAL_BITS)
    b = morgan_fingerprint(parse_smiles(args.b), 2, EVAL_BITS)
    print(f"{tanimoto(a, b):.6f}")


def cmd_mces(cfg: dict, args: argparse.Namespace) -> None:
    d, exact = mces_distance(parse_smiles(args.a), parse_smiles(args.b), args.budget)
    print(f"{d}\t{'exact' if exact else 'upper_bound'}")


# ------------------------------------------------------------------ entry point


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):  # usage errors exit 1, not argparse's 2
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="INI config file")
    common.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE", help="override a config value")
    common.add_argument("--jobs", type=int, default=1, help="maximum worker threads")
    common.add_argument("-v", "--verbose", action="store_true")
    p = _Parser(prog="fp2mol", description="Fingerprint-to-molecule generation toolkit.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    sub.add_parser("build-corpus", parents=[common], help="build corpus JSONL and vocab from a SMILES list").set_defaults(fn=cmd_build_corpus)
    t = sub.add_parser("train", parents=[common], help="run one training stage")
    t.add_argument("stage", choices=STAGES)
    t.set_defaults(fn=cmd_train)
    sub.add_parser("predict", parents=[common], help="generate ranked candidates").set_defaults(fn=cmd_predict)
    sub.add_parser("evaluate", parents=[common], help="score predictions against gold structures").set_defaults(fn=cmd_evaluate)
    sub.add_parser("sweep-threshold", parents=[common], help="top-1 Tanimoto per fingerprint threshold").set_defaults(fn=cmd_sweep_threshold)
    sub.add_parser("ablate-temperature", parents=[common], help="metrics per sampling temperature").set_defaults(fn=cmd_ablate_temperature)
    m = sub.add_parser("make-toy", parents=[common], help="write a synthetic SMILES list")
    m.add_argument("out")
    m.add_argument("--n", type=int, default=2000)
    m.add_argument("--seed", type=int, default=0)
    m.set_defaults(fn=cmd_make_toy)
    f = sub.add_parser("fp", parents=[common], help="Morgan fingerprint on-bits of a SMILES")
    f.add_argument("smiles")
    f.add_argument("--radius", type=int, default=2)
    f.add_argument("--nbits", type=int, default=EVAL_BITS)
    f.set_defaults(fn=cmd_fp)
    for name, fn, text in (("tanimoto", cmd_tanimoto, "Tanimoto similarity of two SMILES"), ("mces", cmd_mces, "MCES distance of two SMILES")):
        q = sub.add_parser(name, parents=[common], help=text)
        q.add_argument("a")
        q.add_argument("b")
        if name == "mces":
            q.add_argument("--budget", type=int, default=200_000)
        q.set_defaults(fn=fn)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.jobs < 1:
            raise UsageError("--jobs must be >= 1")
        torch.set_num_threads(args.jobs)
        cfg = load_config(args.config, args.set)
        args.fn(cfg, args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, ChemError, UnsupportedFeature, FileFormatError, JoinError, EmptyCorpus, UnknownToken) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (OSError, json.JSONDecodeError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except Exception as exc:  # invariant violations and bugs
        log.exception("internal error")
        print(f"internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_INTERNAL
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
