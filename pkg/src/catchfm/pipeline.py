"""End-to-end runs: generate, build the cohort, tokenize, pretrain, finetune, evaluate.

Every random choice derives from one root seed through named sub-seeds, so a run's
report is a pure function of (preset, seed).
"""

from __future__ import annotations

import hashlib
import json
import logging
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Any

import numpy as np

from catchfm import __version__
from catchfm.cohort import SPLITS, CohortDataset, CohortSpec, build_cohort, write_cohort
from catchfm.ehr import PatientRecord, build_vocabulary, write_patients
from catchfm.metrics import MetricError, evaluate, sensitivity_at_specificity
from catchfm.model import (
    Model, ModelConfig, TABLE3, evaluate_lm_loss, export_hidden_eos, named_config, predict_proba,
    save_checkpoint,
)
from catchfm.sae import write_activations
from catchfm.scaling import IsoFlopPoint
from catchfm.synth import TARGET, bayes_oracle, generate, planted_config, summarize, write_truth
from catchfm.tokenizer import BucketTables, TokenSequence, Tokenizer, chunk_for_pretraining, write_shard
from catchfm.train import TrainConfig, estimate_flops, finetune, pretrain

logger = logging.getLogger(__name__)


def derive_seed(root: int, stage: str) -> int:
    """63-bit sub-seed from the root seed and a stage name."""
    digest = hashlib.sha256(f"{root}:{stage}".encode()).digest()
    return int.from_bytes(digest[:8], "little") >> 1


def file_sha256(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def config_hash(config: Any) -> str:
    return hashlib.sha256(json.dumps(config, sort_keys=True, default=str).encode()).hexdigest()


def write_manifest(out_dir: str | Path, command: str, config: Any, seed: int | None,
                   inputs: list[str | Path] = (), outputs: list[str | Path] = (),
                   started: float | None = None) -> Path:
    """One manifest.json per artifact directory: what ran, on which inputs, producing what."""
    out_dir = Path(out_dir)
    manifest = {
        "command": command,
        "config_hash": config_hash(config),
        "config": config,
        "seed": seed,
        "tool_version": __version__,
        "inputs": {str(p): file_sha256(p) for p in inputs if Path(p).is_file()},
        "outputs": [str(p) for p in outputs],
        "started": started if started is not None else time.time(),
        "finished": time.time(),
    }
    path = out_dir / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True, default=str))
    return path


@dataclass(frozen=True)
class ScalePreset:
    name: str
    n_patients: int
    pretrain_fraction: float  # patients reserved for pretraining, disjoint from the cohort
    model: ModelConfig  # vocab_size is replaced by the corpus vocabulary size
    pretrain: TrainConfig
    finetune: TrainConfig
    cohort: CohortSpec
    max_len: int
    generator: dict = field(default_factory=dict)  # overrides for planted_config


def _preset(name: str) -> ScalePreset:
    if name == "ci":
        return ScalePreset(
            name="ci", n_patients=6000, pretrain_fraction=1 / 3,
            model=ModelConfig(n_layers=1, d_model=32, n_heads=2, max_len=128),
            pretrain=TrainConfig(peak_lr=1e-3, batch_size=8, total_steps=20),
            finetune=TrainConfig(peak_lr=1e-3, batch_size=32, epochs=1),
            cohort=CohortSpec(control_ratio=30, matching="random"),
            max_len=128,
        )
    if name == "desk":
        return ScalePreset(
            name="desk", n_patients=50_000, pretrain_fraction=0.3,
            model=ModelConfig(n_layers=2, d_model=64, n_heads=4, max_len=256),
            pretrain=TrainConfig(peak_lr=1e-3, batch_size=32, total_steps=800),
            finetune=TrainConfig(peak_lr=1e-3, batch_size=32, epochs=5),
            cohort=CohortSpec(control_ratio=62, matching="controlled"),
            max_len=256,
        )
    if name.startswith("table3:"):
        size = name.split(":", 1)[1]
        if size not in TABLE3:
            raise ValueError(f"unknown model size {size!r}; choose from {sorted(TABLE3)}")
        base = _preset("desk")
        model = named_config(size)
        return replace(
            base, name=name, model=model, max_len=model.max_len,
            pretrain=TrainConfig.for_model(model, batch_size=64, total_steps=base.pretrain.total_steps),
            finetune=TrainConfig.for_model(model, batch_size=128, epochs=5),
        )
    raise ValueError(f"unknown scale {name!r}; use ci, desk or table3:<size>")


def get_preset(name: str) -> ScalePreset:
    return _preset(name)


def split_patients(records: list[PatientRecord], fraction: float, seed: int) -> tuple[list, list]:
    """(pretraining patients, cohort patients), a seeded disjoint split."""
    order = np.random.default_rng(seed).permutation(len(records))
    n_pre = int(round(fraction * len(records)))
    pre = sorted(order[:n_pre])
    rest = sorted(order[n_pre:])
    return [records[i] for i in pre], [records[i] for i in rest]


def encode_cohort(dataset: CohortDataset, records: dict[str, PatientRecord], tokenizer: Tokenizer,
                  max_len: int) -> dict[str, list[TokenSequence]]:
    out: dict[str, list[TokenSequence]] = {s: [] for s in SPLITS}
    for e in dataset.examples:
        seq = tokenizer.encode(records[e.patient_id], visits=e.history, at_date=e.index_date,
                               max_len=max_len, label=e.label)
        out[e.split].append(seq)
    return out


def pretraining_sequences(records: list[PatientRecord], tokenizer: Tokenizer, max_len: int) -> list[TokenSequence]:
    return [c for r in records if r.visits for c in chunk_for_pretraining(tokenizer.encode(r, max_len=None), max_len)]


def screening_report(valid_scores, valid_labels, test_scores, test_labels, spec_floor: float = 0.99,
                     top_fraction: float = 0.001) -> dict:
    """Test metrics with the threshold chosen on test itself and the one chosen on validation."""
    report = evaluate(test_scores, test_labels, spec_floor, top_fraction, with_rows=False).to_dict(with_rows=False)
    report["sensitivity_at_spec"] = report["at_threshold"]["sensitivity"]
    try:
        thr, sens_valid = sensitivity_at_specificity(valid_scores, valid_labels, spec_floor)
        at_valid = evaluate(test_scores, test_labels, spec_floor, top_fraction, threshold=thr, with_rows=False)
        report["valid_threshold"] = {"threshold": thr, "valid_sensitivity": sens_valid,
                                     "test": asdict(at_valid.at_threshold)}
    except MetricError as exc:
        report["valid_threshold"] = {"error": str(exc)}
    return report


def run_pipeline(out_dir: str | Path, seed: int, preset: ScalePreset) -> dict:
    """Run every stage, writing artifacts under ``out_dir``; returns the report."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    started = time.time()

    # 1. synthetic corpus
    gen_cfg = planted_config(preset.n_patients, seed=derive_seed(seed, "synth"), **preset.generator)
    pairs = list(generate(gen_cfg))
    records = [r for r, _ in pairs]
    synth_dir = out / "synth"
    synth_dir.mkdir(exist_ok=True)
    write_patients(records, synth_dir / "patients.jsonl")
    write_truth((t for _, t in pairs), synth_dir / "truth.jsonl")
    (synth_dir / "gen.json").write_text(json.dumps(gen_cfg.to_dict(), indent=1, sort_keys=True))
    write_manifest(synth_dir, "synth", gen_cfg.to_dict(), gen_cfg.seed,
                   outputs=["patients.jsonl", "truth.jsonl", "gen.json"], started=started)
    oracle = bayes_oracle(gen_cfg, TARGET)
    logger.info("generated %d patients; Bayes oracle AUROC %.3f", len(records), oracle.auroc)

    # 2. cohort on patients disjoint from pretraining
    pre_records, cohort_records = split_patients(records, preset.pretrain_fraction, derive_seed(seed, "split"))
    by_id = {r.patient_id: r for r in cohort_records}
    dataset = build_cohort(cohort_records, preset.cohort, derive_seed(seed, "cohort"))
    cohort_dir = out / "cohort"
    cohort_dir.mkdir(exist_ok=True)
    write_cohort(dataset, cohort_dir / "cohort.jsonl")
    write_manifest(cohort_dir, "cohort", asdict(preset.cohort), derive_seed(seed, "cohort"),
                   inputs=[synth_dir / "patients.jsonl"], outputs=["cohort.jsonl"])

    # 3. tokens
    vocab = build_vocabulary(records, BucketTables())
    tokenizer = Tokenizer(vocab)
    tok_dir = out / "tokens"
    tok_dir.mkdir(exist_ok=True)
    vocab.write_tsv(tok_dir / "vocab.tsv")
    pre_seqs = pretraining_sequences(pre_records, tokenizer, preset.max_len)
    n_valid_lm = max(1, len(pre_seqs) // 50)
    lm_valid, lm_train = pre_seqs[:n_valid_lm], pre_seqs[n_valid_lm:]
    write_shard(lm_train, tok_dir / "pretrain.shard")
    write_shard(lm_valid, tok_dir / "pretrain_valid.shard")
    splits = encode_cohort(dataset, by_id, tokenizer, preset.max_len)
    for name, seqs in splits.items():
        write_shard(seqs, tok_dir / f"{name}.shard")
    write_manifest(tok_dir, "tokenize", {"max_len": preset.max_len}, None,
                   inputs=[synth_dir / "patients.jsonl", cohort_dir / "cohort.jsonl"],
                   outputs=["vocab.tsv", "pretrain.shard", "pretrain_valid.shard"] + [f"{s}.shard" for s in SPLITS])

    # 4. pretraining
    model_cfg = preset.model.replace(vocab_size=len(vocab), max_len=preset.max_len)
    model = Model.init(model_cfg, seed=derive_seed(seed, "init"))
    pre_dir = out / "pretrain"
    pre_dir.mkdir(exist_ok=True)
    pre_cfg = preset.pretrain.replace(seed=derive_seed(seed, "pretrain"))
    init_loss = evaluate_lm_loss(model, lm_valid, vocab.pad)
    pre_stats = pretrain(model, lm_train, pre_cfg, vocab.pad, out_dir=pre_dir)
    final_loss = evaluate_lm_loss(model, lm_valid, vocab.pad)
    write_manifest(pre_dir, "pretrain", {"model": asdict(model_cfg), "train": asdict(pre_cfg)}, pre_cfg.seed,
                   inputs=[tok_dir / "pretrain.shard"], outputs=["last.ckpt", "stats.csv"])

    # 5. finetuning
    ft_dir = out / "finetune"
    ft_dir.mkdir(exist_ok=True)
    ft_cfg = preset.finetune.replace(seed=derive_seed(seed, "finetune"))
    ft_stats = finetune(model, splits["train"], splits["valid"], ft_cfg, vocab.eos, vocab.pad)
    save_checkpoint(model, ft_dir / "model.ckpt", len(ft_stats.rows))
    ft_stats.write_csv(ft_dir / "stats.csv")
    write_manifest(ft_dir, "finetune", asdict(ft_cfg), ft_cfg.seed,
                   inputs=[pre_dir / "last.ckpt", tok_dir / "train.shard", tok_dir / "valid.shard"],
                   outputs=["model.ckpt", "stats.csv"])

    # 6. evaluation
    eval_dir = out / "eval"
    eval_dir.mkdir(exist_ok=True)
    scores = {s: predict_proba(model, splits[s], vocab.eos, vocab.pad) for s in ("valid", "test")}
    labels = {s: np.array([q.label for q in splits[s]]) for s in ("valid", "test")}
    ids = {s: [e.patient_id for e in dataset.split(s)] for s in ("valid", "test")}
    with open(eval_dir / "scores.csv", "w") as fh:
        fh.write("patient_id,score,label,split\n")
        for s in ("valid", "test"):
            for pid, sc, lab in zip(ids[s], scores[s], labels[s]):
                fh.write(f"{pid},{sc!r},{lab},{s}\n")
    test_report = screening_report(scores["valid"], labels["valid"], scores["test"], labels["test"])
    hidden = export_hidden_eos(model, splits["train"], vocab.eos, vocab.pad)
    write_activations(hidden, eval_dir / "h_eos_train.f32")

    summary = summarize(records)
    report = {
        "scale": preset.name,
        "seed": seed,
        "corpus": asdict(summary),
        "oracle": asdict(oracle),
        "cohort": {
            "examples": len(dataset.examples),
            "positives": dataset.n_positive,
            "splits": {s: {"n": len(dataset.split(s)), "positive_rate": dataset.positive_rate(s)} for s in SPLITS},
            "cases_short_of_controls": len(dataset.report.short),
            "cases_without_controls": len(dataset.report.unmatched),
        },
        "pretrain": {
            "steps": len(pre_stats.rows),
            "tokens": pre_stats.tokens,
            "flops": pre_stats.rows[-1].flops if pre_stats.rows else 0.0,
            "valid_loss_initial": init_loss,
            "valid_loss_final": final_loss,
            "ln_vocab": float(np.log(len(vocab))),
        },
        "finetune": {"steps": len(ft_stats.rows), "evals": ft_stats.evals},
        "test": test_report,
    }
    (eval_dir / "report.json").write_text(json.dumps(report["test"], indent=2, sort_keys=True))
    write_manifest(eval_dir, "eval", {"spec_floor": 0.99, "top_fraction": 0.001}, seed,
                   inputs=[ft_dir / "model.ckpt"], outputs=["scores.csv", "report.json", "h_eos_train.f32"])
    (out / "report.json").write_text(json.dumps(report, indent=2, sort_keys=True))
    write_manifest(out, "pipeline", {"scale": preset.name}, seed, outputs=["report.json"], started=started)
    return report



def isoflop_run(train: list[TokenSequence], valid: list[TokenSequence], vocab_size: int, pad_id: int,
                d_model: int, budget: float, n_layers: int = 2, n_heads: int = 2, batch_size: int = 16,
                peak_lr: float = 3e-3, seed: int = 0) -> IsoFlopPoint:
    """Pretrain one width for as many steps as ``budget`` affords and report its validation loss.

    ``train`` must hold sequences of one common length so that tokens per step are exact.
    """
    lengths = {len(s) for s in train}
    if len(lengths) != 1:
        raise ValueError("isoFLOP runs need fixed-length training sequences")
    seq_len = lengths.pop()
    cfg = ModelConfig(n_layers=n_layers, d_model=d_model, n_heads=n_heads, max_len=seq_len, vocab_size=vocab_size)
    n = cfg.n_params()
    steps = max(1, round(budget / (6.0 * n * batch_size * seq_len)))
    model = Model.init(cfg, seed=derive_seed(seed, f"init-{d_model}"))
    train_cfg = TrainConfig(peak_lr=peak_lr, grad_clip=1.0, batch_size=batch_size, total_steps=steps,
                            seed=derive_seed(seed, "isoflop-order"))
    stats = pretrain(model, train, train_cfg, pad_id)
    loss = evaluate_lm_loss(model, valid, pad_id)
    logger.info("isoFLOP width %d: N=%d, %d steps, validation loss %.4f", d_model, n, steps, loss)
    return IsoFlopPoint(estimate_flops(n, stats.tokens), float(n), float(stats.tokens), loss)
