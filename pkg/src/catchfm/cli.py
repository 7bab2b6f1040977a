"""Command-line entry point: ``catchfm <command> [options]``."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict
from pathlib import Path

import numpy as np

from catchfm import codemap, sae
from catchfm.cohort import SPLITS, CohortDataset, CohortSpec, build_cohort, read_cohort, write_cohort
from catchfm.ehr import build_vocabulary, load_patients, Vocabulary, write_patients
from catchfm.metrics import MetricError, evaluate
from catchfm.model import Model, ModelConfig, load_checkpoint, predict_proba, save_checkpoint, export_hidden_eos
from catchfm.pipeline import (
    derive_seed, encode_cohort, get_preset, pretraining_sequences, run_pipeline, screening_report,
    write_manifest,
)
from catchfm.scaling import fit_scaling, plan_budget, PowerLawFit, read_points
from catchfm.synth import GeneratorConfig, generate, planted_config, write_truth
from catchfm.tokenizer import BucketTables, Tokenizer, read_shard, write_shard
from catchfm.train import TrainConfig, finetune, pretrain

logger = logging.getLogger("catchfm")

GLOBAL_DEFAULTS = {"seed": 0, "out_dir": None, "jobs": 1, "scale": "ci", "log_level": "WARNING"}


class CliError(Exception):
    pass


def _add_globals(p: argparse.ArgumentParser, suppress: bool) -> None:
    default = argparse.SUPPRESS if suppress else None
    p.add_argument("--seed", type=int, default=default, help="root random seed (default 0)")
    p.add_argument("--out-dir", default=default, help="directory for artifacts")
    p.add_argument("--jobs", type=int, default=default, help="parallel runs for seeds-sweep (default 1)")
    p.add_argument("--scale", default=default, help="ci, desk or table3:<size> (default ci)")
    p.add_argument("--log-level", default=default, help="logging level (default WARNING)")


def _out_dir(args, fallback: str | Path) -> Path:
    d = Path(args.out_dir) if args.out_dir else Path(fallback)
    d.mkdir(parents=True, exist_ok=True)
    return d


# ---------------------------------------------------------------------------
# Commands


def cmd_synth(args) -> None:
    if args.config:
        cfg = GeneratorConfig.load(args.config)
        cfg.seed, cfg.n_patients = args.seed, args.patients if args.patients is not None else cfg.n_patients
        cfg.validate()
    else:
        cfg = planted_config(args.patients if args.patients is not None else 1000, seed=args.seed)
    started = time.time()
    pairs = list(generate(cfg))
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_patients((r for r, _ in pairs), out)
    outputs = [out.name]
    if args.truth:
        write_truth((t for _, t in pairs), args.truth)
        outputs.append(Path(args.truth).name)
    write_manifest(out.parent, "synth", cfg.to_dict(), cfg.seed, outputs=outputs, started=started)


def cmd_cohort(args) -> None:
    spec = CohortSpec(target=args.target, kind=args.kind, exclusion_months=args.exclusion_months,
                      history_years=args.history_years, control_ratio=args.ratio, matching=args.matching)
    started = time.time()
    records = list(load_patients(args.input))
    dataset = build_cohort(records, spec, args.seed)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_cohort(dataset, out)
    (out.parent / "cohort_spec.json").write_text(json.dumps(asdict(spec), indent=2))
    (out.parent / "match_report.json").write_text(json.dumps(asdict(dataset.report), indent=2))
    write_manifest(out.parent, "cohort", asdict(spec), args.seed, inputs=[args.input],
                   outputs=[out.name, "cohort_spec.json", "match_report.json"], started=started)


def cmd_tokenize(args) -> None:
    started = time.time()
    records = list(load_patients(args.patients))
    out = _out_dir(args, args.out)
    vocab = build_vocabulary(records, BucketTables())
    vocab.write_tsv(out / "vocab.tsv")
    tok = Tokenizer(vocab)
    outputs = ["vocab.tsv"]
    cohort_ids: set[str] = set()
    if args.cohort:
        spec = CohortSpec(exclusion_months=args.exclusion_months, history_years=args.history_years)
        by_id = {r.patient_id: r for r in records}
        examples = read_cohort(args.cohort, by_id, spec)
        cohort_ids = {e.patient_id for e in examples}
        splits = encode_cohort(CohortDataset(spec, examples), by_id, tok, args.max_len)
        for name in SPLITS:
            write_shard(splits[name], out / f"{name}.shard")
            (out / f"{name}.ids").write_text("".join(e.patient_id + "\n" for e in examples if e.split == name))
            outputs += [f"{name}.shard", f"{name}.ids"]
    pre = [r for r in records if r.patient_id not in cohort_ids]
    write_shard(pretraining_sequences(pre, tok, args.max_len), out / "pretrain.shard")
    outputs.append("pretrain.shard")
    write_manifest(out, "tokenize", {"max_len": args.max_len}, None,
                   inputs=[args.patients] + ([args.cohort] if args.cohort else []), outputs=outputs, started=started)


def _shard_dir(path: str) -> tuple[Path, Vocabulary]:
    d = Path(path)
    if not (d / "vocab.tsv").exists():
        raise CliError(f"{d} has no vocab.tsv; run tokenize first")
    return d, Vocabulary.read_tsv(d / "vocab.tsv")


def cmd_pretrain(args) -> None:
    started = time.time()
    shards, vocab = _shard_dir(args.train)
    cfg_dict = json.loads(Path(args.config).read_text()) if args.config else {}
    cfg_dict.setdefault("vocab_size", len(vocab))
    model_cfg = ModelConfig(**cfg_dict)
    seqs = read_shard(shards / "pretrain.shard")
    if not seqs:
        raise CliError("pretraining shard is empty")
    tc = TrainConfig(peak_lr=args.lr, batch_size=args.batch_size, total_steps=args.steps,
                     seed=derive_seed(args.seed, "pretrain"), checkpoint_every=args.checkpoint_every)
    model = Model.init(model_cfg, seed=derive_seed(args.seed, "init"))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    pretrain(model, seqs, tc, vocab.pad, out_dir=out)
    write_manifest(out, "pretrain", {"model": asdict(model_cfg), "train": asdict(tc)}, args.seed,
                   inputs=[shards / "pretrain.shard"], outputs=["last.ckpt", "stats.csv"], started=started)


def cmd_finetune(args) -> None:
    started = time.time()
    shards, vocab = _shard_dir(args.cohort)
    model, _ = load_checkpoint(args.ckpt)
    train = read_shard(shards / "train.shard")
    valid = read_shard(shards / "valid.shard")
    tc = TrainConfig(peak_lr=args.lr, batch_size=args.batch_size, epochs=args.epochs,
                     seed=derive_seed(args.seed, "finetune"))
    stats = finetune(model, train, valid, tc, vocab.eos, vocab.pad, label_budget=args.label_budget)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(model, out / "model.ckpt", len(stats.rows))
    stats.write_csv(out / "stats.csv")
    outputs = ["model.ckpt", "stats.csv", "scores.csv"]
    with open(out / "scores.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["patient_id", "score", "label", "split"])
        for name in ("valid", "test"):
            path = shards / f"{name}.shard"
            if not path.exists():
                continue
            seqs = read_shard(path)
            ids = (shards / f"{name}.ids").read_text().split()
            for pid, s, q in zip(ids, predict_proba(model, seqs, vocab.eos, vocab.pad), seqs):
                w.writerow([pid, repr(float(s)), q.label, name])
    train_h = export_hidden_eos(model, train, vocab.eos, vocab.pad)
    sae.write_activations(train_h, out / "h_eos_train.f32")
    outputs.append("h_eos_train.f32")
    write_manifest(out, "finetune", {"train": asdict(tc), "label_budget": args.label_budget}, args.seed,
                   inputs=[args.ckpt, shards / "train.shard", shards / "valid.shard"], outputs=outputs,
                   started=started)


def _read_scores(path: str) -> dict[str, tuple[np.ndarray, np.ndarray]]:
    rows: dict[str, tuple[list, list]] = {}
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if not {"score", "label"} <= set(reader.fieldnames or ()):
            raise CliError(f"{path}: needs score and label columns")
        for r in reader:
            s, y = rows.setdefault(r.get("split") or "all", ([], []))
            s.append(float(r["score"]))
            y.append(int(r["label"]))
    return {k: (np.array(s), np.array(y)) for k, (s, y) in rows.items()}


def cmd_eval(args) -> None:
    started = time.time()
    groups = _read_scores(args.scores)
    if "valid" in groups and "test" in groups:
        (vs, vy), (ts, ty) = groups["valid"], groups["test"]
        report = screening_report(vs, vy, ts, ty, args.spec_floor, args.top_fraction)
        report["rows"] = [asdict(r) for r in evaluate(ts, ty, args.spec_floor, args.top_fraction).rows]
    else:
        scores = np.concatenate([s for s, _ in groups.values()])
        labels = np.concatenate([y for _, y in groups.values()])
        report = evaluate(scores, labels, args.spec_floor, args.top_fraction).to_dict()
    out = Path(args.report)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(json.dumps(report, indent=2, sort_keys=True))
    write_manifest(out.parent, "eval", {"spec_floor": args.spec_floor, "top_fraction": args.top_fraction}, None,
                   inputs=[args.scores], outputs=[out.name], started=started)


def cmd_scaling_fit(args) -> None:
    started = time.time()
    fit = fit_scaling(read_points(args.points))
    if args.plan_flops is not None and "n_opt" in fit:
        n_fit = PowerLawFit(**{**fit["n_opt"], "c_range": tuple(fit["n_opt"]["c_range"])})
        d_fit = PowerLawFit(**{**fit["d_opt"], "c_range": tuple(fit["d_opt"]["c_range"])})
        fit["plan"] = asdict(plan_budget(args.plan_flops, n_fit, d_fit))
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(json.dumps(fit, indent=2))
    write_manifest(out.parent, "scaling-fit", {"plan_flops": args.plan_flops}, None, inputs=[args.points],
                   outputs=[out.name], started=started)


def cmd_codemap(args) -> None:
    started = time.time()
    table = codemap.MappingTable.read_tsv(args.exact) if args.exact else codemap.MappingTable()
    targets = codemap.EmbeddingIndex.read(args.emb_target) if args.emb_target else codemap.EmbeddingIndex.empty()
    sources = codemap.EmbeddingIndex.read(args.emb) if args.emb else codemap.EmbeddingIndex.empty(targets.dim)
    mapped, report = codemap.map_corpus(codemap.iter_raw_records(args.input), table, sources, targets, args.threshold)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", encoding="utf-8") as fh:
        for rec in mapped:
            fh.write(json.dumps(rec, separators=(",", ":")) + "\n")
    Path(args.report).write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True))
    inputs = [p for p in (args.input, args.exact, args.emb, args.emb_target) if p]
    write_manifest(out.parent, "codemap", {"threshold": args.threshold}, None, inputs=inputs,
                   outputs=[out.name, Path(args.report).name], started=started)


def cmd_sae(args) -> None:
    started = time.time()
    h = sae.read_activations(args.activations)
    result = sae.sae_train(h, m=args.m, k=args.k, epochs=args.epochs, seed=args.seed, lr=args.lr)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    result.params.save(out)
    (out.parent / "sae_mse.json").write_text(json.dumps(result.mse_curve))
    write_manifest(out.parent, "sae", {"m": args.m, "k": args.k, "epochs": args.epochs, "lr": args.lr}, args.seed,
                   inputs=[args.activations], outputs=[out.name, "sae_mse.json"], started=started)


def cmd_sae_features(args) -> None:
    started = time.time()
    params = sae.SaeParameters.load(args.sae)
    h = sae.read_activations(args.activations)
    records = {r.patient_id: r for r in load_patients(args.patients)}
    spec = CohortSpec(exclusion_months=args.exclusion_months, history_years=args.history_years)
    rows = [e for e in read_cohort(args.cohort, records, spec) if e.split == args.split]
    if len(rows) != len(h):
        raise CliError(f"{len(h)} activation rows but {len(rows)} {args.split} examples in the cohort")
    codes = [{c.token for v in e.history for c in v.codes} for e in rows]
    pos = [i for i, e in enumerate(rows) if e.label == 1]
    feats = sae.top_features(params, h[pos], [codes[i] for i in pos], codes,
                             n_features=args.features, per_feature_examples=args.examples)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    sae.features_to_json(feats, out)
    write_manifest(out.parent, "sae-features", {"split": args.split, "features": args.features}, None,
                   inputs=[args.sae, args.activations, args.cohort, args.patients], outputs=[out.name],
                   started=started)


def cmd_pipeline(args) -> None:
    out = _out_dir(args, Path("runs") / f"{args.scale.replace(':', '_')}-seed{args.seed}")
    run_pipeline(out, args.seed, get_preset(args.scale))


def _pipeline_job(job: tuple[str, int, str]) -> dict:
    out, seed, scale = job
    return run_pipeline(out, seed, get_preset(scale))


SWEEP_METRICS = ("auroc", "auprc", "sensitivity_at_spec")


def aggregate_reports(reports: list[dict], metrics=SWEEP_METRICS) -> dict:
    """Mean and sample standard deviation of each test metric across runs."""
    if len(reports) < 2:
        raise CliError("a seed sweep needs at least two runs")
    out = {"n": len(reports)}
    for m in metrics:
        values = []
        for i, r in enumerate(reports):
            v = r.get("test", {}).get(m)
            if not isinstance(v, (int, float)) or not math.isfinite(v):
                raise CliError(f"run {i} is missing metric {m!r}")
            values.append(float(v))
        out[m] = {"mean": float(np.mean(values)), "std": float(np.std(values, ddof=1)), "values": values}
    return out


def cmd_seeds_sweep(args) -> None:
    seeds = args.seeds
    if len(seeds) < 2:
        raise CliError("seeds-sweep needs at least two seeds")
    root = _out_dir(args, Path("runs") / f"sweep-{args.scale.replace(':', '_')}")
    jobs = [(str(root / f"run{i}-seed{s}"), s, args.scale) for i, s in enumerate(seeds)]
    reports: list[dict] = []
    try:
        if args.jobs > 1:
            with ProcessPoolExecutor(max_workers=args.jobs) as pool:
                for report in pool.map(_pipeline_job, jobs):
                    reports.append(report)
        else:
            for job in jobs:
                reports.append(_pipeline_job(job))
        summary = aggregate_reports(reports)
    except Exception:
        # finished runs stay on disk in their own directories; record which ones
        partial = {"completed": [j[0] for j in jobs[: len(reports)]], "seeds": seeds}
        (root / "sweep_partial.json").write_text(json.dumps(partial, indent=2))
        raise
    summary["seeds"] = seeds
    (root / "sweep.json").write_text(json.dumps(summary, indent=2, sort_keys=True))
    write_manifest(root, "seeds-sweep", {"scale": args.scale, "seeds": seeds}, None, outputs=["sweep.json"])


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="catchfm", description="Desk-scale EHR foundation-model pipeline.")
    _add_globals(parser, suppress=False)
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, func, help_text):
        p = sub.add_parser(name, help=help_text, description=help_text)
        _add_globals(p, suppress=True)
        p.set_defaults(func=func)
        return p

    p = add("synth", cmd_synth, "generate a synthetic patient corpus")
    p.add_argument("--patients", type=int)
    p.add_argument("--out", required=True)
    p.add_argument("--truth")
    p.add_argument("--config", help="generator config JSON (default: planted preset)")

    p = add("cohort", cmd_cohort, "build a case-control cohort")
    p.add_argument("--target", default="157")
    p.add_argument("--kind", choices=("first", "subsequent"), default="first")
    p.add_argument("--exclusion-months", type=int, choices=(6, 12), default=12)
    p.add_argument("--history-years", type=float, default=5.0)
    p.add_argument("--ratio", type=int, default=62)
    p.add_argument("--matching", choices=("controlled", "random"), default="controlled")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out", required=True)

    p = add("tokenize", cmd_tokenize, "build the vocabulary and token shards")
    p.add_argument("--patients", required=True)
    p.add_argument("--cohort")
    p.add_argument("--out", default="tokens")
    p.add_argument("--max-len", type=int, default=2048)
    p.add_argument("--exclusion-months", type=int, choices=(6, 12), default=12)
    p.add_argument("--history-years", type=float, default=5.0)

    p = add("pretrain", cmd_pretrain, "next-token pretraining")
    p.add_argument("--config", help="model config JSON (vocab_size defaults to the shard vocabulary)")
    p.add_argument("--train", required=True, help="directory written by tokenize")
    p.add_argument("--steps", type=int, required=True)
    p.add_argument("--lr", type=float, default=1e-5)
    p.add_argument("--batch-size", type=int, default=64)
    p.add_argument("--checkpoint-every", type=int, default=0)
    p.add_argument("--out", required=True)

    p = add("finetune", cmd_finetune, "finetune the EOS classifier on a cohort")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--cohort", required=True, help="directory with train/valid/test shards")
    p.add_argument("--label-budget", type=int)
    p.add_argument("--epochs", type=int, default=5)
    p.add_argument("--lr", type=float, default=1e-5)
    p.add_argument("--batch-size", type=int, default=128)
    p.add_argument("--out", required=True)

    p = add("eval", cmd_eval, "screening metrics from a scores file")
    p.add_argument("--scores", required=True)
    p.add_argument("--report", required=True)
    p.add_argument("--spec-floor", type=float, default=0.99)
    p.add_argument("--top-fraction", type=float, default=0.001)

    p = add("scaling-fit", cmd_scaling_fit, "fit IsoFLOP curves and compute-optimal power laws")
    p.add_argument("--points", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--plan-flops", type=float)

    p = add("codemap", cmd_codemap, "map foreign codes onto the target ontology")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--exact")
    p.add_argument("--emb")
    p.add_argument("--emb-target")
    p.add_argument("--threshold", type=float, default=codemap.DEFAULT_THRESHOLD)
    p.add_argument("--out", required=True)
    p.add_argument("--report", required=True)

    p = add("sae", cmd_sae, "train a TopK sparse autoencoder on EOS activations")
    p.add_argument("--activations", required=True)
    p.add_argument("--m", type=int)
    p.add_argument("--k", type=int, default=16)
    p.add_argument("--epochs", type=int, default=50)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--out", required=True)

    p = add("sae-features", cmd_sae_features, "top SAE features over positive patients")
    p.add_argument("--sae", required=True)
    p.add_argument("--cohort", required=True)
    p.add_argument("--activations", required=True)
    p.add_argument("--patients", required=True)
    p.add_argument("--split", default="train")
    p.add_argument("--features", type=int, default=10)
    p.add_argument("--examples", type=int, default=20)
    p.add_argument("--exclusion-months", type=int, choices=(6, 12), default=12)
    p.add_argument("--history-years", type=float, default=5.0)
    p.add_argument("--out", required=True)

    add("pipeline", cmd_pipeline, "run the full reproduction at the chosen scale")

    p = add("seeds-sweep", cmd_seeds_sweep, "run the pipeline under several seeds and aggregate")
    p.add_argument("--seeds", type=int, nargs="+", required=True)
    return parser


def run(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    for key, value in GLOBAL_DEFAULTS.items():
        if getattr(args, key, None) is None:
            setattr(args, key, value)
    logging.basicConfig(level=getattr(logging, str(args.log_level).upper(), logging.WARNING),
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        args.func(args)
    except (CliError, ValueError, OSError, RuntimeError, KeyError, MetricError) as exc:
        err = {"error": type(exc).__name__, "message": str(exc), "command": args.command}
        print(json.dumps(err), file=sys.stderr)
        return 1
    return 0


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
