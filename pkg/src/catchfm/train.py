"""Pretraining and finetuning loops: AdamW, global-norm clipping, warmup-stable-decay
learning rates, token and FLOP accounting, checkpoints and early stopping."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from catchfm import tensor as T
from catchfm.metrics import MetricError, auprc
from catchfm.model import Model, ModelConfig, collate, is_no_decay, predict_proba, save_checkpoint
from catchfm.tensor import NonFiniteLoss, Tape
from catchfm.tokenizer import TokenSequence

logger = logging.getLogger(__name__)

PRETRAIN_TOKENS_PER_STEP = 64 * 2048


class TrainingError(RuntimeError):
    pass


class TrainingDiverged(TrainingError):
    def __init__(self, step: int, model: Model):
        super().__init__(f"loss became non-finite at step {step}; parameters restored to the last good state")
        self.step = step
        self.model = model


@dataclass(frozen=True)
class TrainConfig:
    peak_lr: float = 1e-5
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.01
    grad_clip: float = 0.1
    warmup: float = 0.1
    stable: float = 0.8
    decay: float = 0.1
    batch_size: int = 64
    epochs: int = 5
    total_steps: int = 1000
    seed: int = 0
    checkpoint_every: int = 0  # 0 disables periodic checkpoints
    patience: int = 2  # finetuning: evaluations without improvement before stopping

    def __post_init__(self):
        if not math.isclose(self.warmup + self.stable + self.decay, 1.0, abs_tol=1e-9):
            raise ValueError("warmup, stable and decay fractions must sum to 1")
        if min(self.warmup, self.stable, self.decay) < 0:
            raise ValueError("schedule fractions must be non-negative")
        if self.peak_lr <= 0 or self.eps <= 0 or self.grad_clip <= 0 or self.weight_decay < 0:
            raise ValueError("peak_lr, eps and grad_clip must be positive; weight_decay non-negative")
        if self.batch_size < 1 or self.total_steps < 1 or self.epochs < 1:
            raise ValueError("batch_size, total_steps and epochs must be at least 1")

    def replace(self, **kw) -> "TrainConfig":
        return replace(self, **kw)

    @classmethod
    def for_model(cls, model_config: ModelConfig, **kw) -> "TrainConfig":
        """Published defaults: 6e-6 peak for billion-parameter models, 1e-5 otherwise."""
        lr = 6e-6 if model_config.n_params() >= 1e9 else 1e-5
        return cls(peak_lr=kw.pop("peak_lr", lr), **kw)


def lr_at(step: int, config: TrainConfig) -> float:
    """Warmup-stable-decay: linear 0 -> peak, flat, then linear peak -> 0."""
    total = config.total_steps
    if not 0 <= step < total:
        raise ValueError(f"step {step} outside [0, {total})")
    warm = config.warmup * total
    decay_start = (config.warmup + config.stable) * total
    if step < warm:
        return config.peak_lr * step / warm
    if step < decay_start:
        return config.peak_lr
    return config.peak_lr * (total - step) / (total - decay_start)


def estimate_flops(n_params: int | ModelConfig, tokens: float) -> float:
    """C = 6 N D with N counting every trainable parameter (embeddings included)."""
    n = n_params.n_params() if isinstance(n_params, ModelConfig) else n_params
    return 6.0 * n * tokens


def steps_for_tokens(tokens: float, batch_size: int = 64, seq_len: int = 2048) -> int:
    # the slack absorbs round-off in token counts that come out of a power-law fit
    return math.ceil(tokens / (batch_size * seq_len) - 1e-9)


# ---------------------------------------------------------------------------
# Optimizer


def global_norm(grads: dict[str, np.ndarray]) -> float:
    return math.sqrt(sum(float(np.vdot(g, g)) for g in grads.values()))


def clip_by_global_norm(grads: dict[str, np.ndarray], max_norm: float) -> float:
    """Scale gradients in place so their global norm is at most ``max_norm``; returns
    the norm before clipping."""
    norm = global_norm(grads)
    if norm > max_norm:
        scale = max_norm / (norm + 1e-12)
        for g in grads.values():
            g *= scale
    return norm


class AdamW:
    """Adaptive moments with decoupled weight decay over a dict of numpy arrays."""

    def __init__(self, params: dict[str, np.ndarray], betas=(0.9, 0.999), eps=1e-8, weight_decay=0.01,
                 no_decay: Callable[[str], bool] = is_no_decay):
        self.params = params
        self.b1, self.b2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.decay = {k: not no_decay(k) for k in params}
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, grads: dict[str, np.ndarray], lr: float) -> None:
        self.t += 1
        c1 = 1 - self.b1**self.t
        c2 = 1 - self.b2**self.t
        for k, p in self.params.items():
            g = grads.get(k)
            if g is None:
                continue
            m, v = self.m[k], self.v[k]
            m *= self.b1
            m += (1 - self.b1) * g
            v *= self.b2
            v += (1 - self.b2) * (g * g)
            if self.decay[k] and self.weight_decay:
                p -= lr * self.weight_decay * p
            p -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


# ---------------------------------------------------------------------------
# Stats


@dataclass
class StepStats:
    step: int
    loss: float
    lr: float
    grad_norm: float
    tokens: int  # cumulative
    flops: float  # cumulative


@dataclass
class TrainStats:
    rows: list[StepStats] = field(default_factory=list)
    evals: list[dict] = field(default_factory=list)

    @property
    def tokens(self) -> int:
        return self.rows[-1].tokens if self.rows else 0

    @property
    def losses(self) -> list[float]:
        return [r.loss for r in self.rows]

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["step", "loss", "lr", "grad_norm", "tokens", "flops"])
            for r in self.rows:
                w.writerow([r.step, repr(r.loss), repr(r.lr), repr(r.grad_norm), r.tokens, repr(r.flops)])


def _grads(model: Model) -> dict[str, np.ndarray]:
    out = {}
    for name, p in model.params.items():
        out[name] = p.grad if p.grad is not None else np.zeros_like(p.data)
        p.grad = None
    return out


def _snapshot(model: Model) -> dict[str, np.ndarray]:
    return {k: p.data.copy() for k, p in model.params.items()}


def _restore(model: Model, snap: dict[str, np.ndarray]) -> None:
    for k, p in model.params.items():
        p.data[...] = snap[k]
        p.grad = None


# ---------------------------------------------------------------------------
# Pretraining


def pretrain(
    model: Model,
    sequences: Sequence[TokenSequence],
    config: TrainConfig,
    pad_id: int,
    out_dir: str | Path | None = None,
    on_step: Callable[[StepStats], None] | None = None,
) -> TrainStats:
    """Next-token training for ``config.total_steps`` steps; updates ``model`` in place.

    Batches are drawn from a seeded permutation of ``sequences`` that is reshuffled
    each pass, padded to the batch's longest sequence. Tokens are counted without pads.
    """
    if not sequences:
        raise TrainingError("no pretraining sequences")
    rng = np.random.default_rng(config.seed)
    arrays = {k: p.data for k, p in model.params.items()}
    opt = AdamW(arrays, config.betas, config.eps, config.weight_decay)
    n_params = model.n_params()
    stats = TrainStats()
    tokens = 0
    order = rng.permutation(len(sequences))
    cursor = 0
    good = _snapshot(model)
    out_dir = Path(out_dir) if out_dir is not None else None
    for step in range(config.total_steps):
        if cursor + config.batch_size > len(order):
            order = np.r_[order[cursor:], rng.permutation(len(sequences))]
            cursor = 0
        idx = order[cursor : cursor + config.batch_size]
        cursor += config.batch_size
        batch = collate([sequences[i] for i in idx], pad_id)
        try:
            with Tape() as tape:
                _, loss = model.forward_lm(batch.tokens, batch.positions, pad_id)
            tape.backward(loss)
        except NonFiniteLoss:
            _restore(model, good)
            raise TrainingDiverged(step, model) from None
        grads = _grads(model)
        norm = clip_by_global_norm(grads, config.grad_clip)
        if not math.isfinite(norm):
            _restore(model, good)
            raise TrainingDiverged(step, model)
        lr = lr_at(step, config)
        opt.step(grads, lr)
        tokens += batch.n_tokens
        row = StepStats(step, float(loss.data), lr, norm, tokens, estimate_flops(n_params, tokens))
        stats.rows.append(row)
        if on_step is not None:
            on_step(row)
        if (step + 1) % max(1, config.total_steps // 10) == 0:
            logger.info("pretrain step %d/%d: loss %.4f", step + 1, config.total_steps, row.loss)
        every = config.checkpoint_every
        if every and (step + 1) % every == 0:
            good = _snapshot(model)
            if out_dir is not None:
                save_checkpoint(model, out_dir / "last.ckpt", step + 1)
    if out_dir is not None:
        save_checkpoint(model, out_dir / "last.ckpt", config.total_steps)
        stats.write_csv(out_dir / "stats.csv")
    return stats


# ---------------------------------------------------------------------------
# Finetuning


def stratified_subsample(seqs: Sequence[TokenSequence], n: int | None, seed: int = 0) -> list[TokenSequence]:
    """Keep ``n`` sequences with the original label mix (all of them when n is None)."""
    if n is None or n >= len(seqs):
        return list(seqs)
    rng = np.random.default_rng(seed)
    pos = [i for i, s in enumerate(seqs) if s.label == 1]
    neg = [i for i, s in enumerate(seqs) if s.label != 1]
    n_pos = round(n * len(pos) / len(seqs))
    keep = list(rng.choice(pos, n_pos, replace=False)) + list(rng.choice(neg, n - n_pos, replace=False))
    return [seqs[i] for i in sorted(keep)]


def finetune(
    model: Model,
    train: Sequence[TokenSequence],
    valid: Sequence[TokenSequence],
    config: TrainConfig,
    eos_id: int,
    pad_id: int,
    label_budget: int | None = None,
    on_step: Callable[[StepStats], None] | None = None,
) -> TrainStats:
    """Cross-entropy on the EOS classifier for ``config.epochs`` epochs.

    Validation AUPRC is measured after each epoch; the best parameters are kept and
    training stops after ``config.patience`` epochs without improvement. The schedule
    length is epochs x batches per epoch (``config.total_steps`` is ignored).
    """
    train = stratified_subsample(train, label_budget, config.seed)
    labels = np.array([s.label for s in train])
    if len(set(labels.tolist())) < 2:
        raise TrainingError("finetuning needs both classes in the training set")
    rng = np.random.default_rng(config.seed)
    per_epoch = math.ceil(len(train) / config.batch_size)
    sched = config.replace(total_steps=per_epoch * config.epochs)
    arrays = {k: p.data for k, p in model.params.items()}
    opt = AdamW(arrays, config.betas, config.eps, config.weight_decay)
    n_params = model.n_params()
    stats = TrainStats()
    tokens, step = 0, 0
    best, best_score, stale = _snapshot(model), -math.inf, 0
    valid_labels = np.array([s.label for s in valid])
    for epoch in range(config.epochs):
        order = rng.permutation(len(train))
        for b in range(per_epoch):
            idx = order[b * config.batch_size : (b + 1) * config.batch_size]
            batch = collate([train[i] for i in idx], pad_id)
            with Tape() as tape:
                logits = model.classifier_logits(batch.tokens, batch.positions, batch.eos_index)
                loss = T.cross_entropy(logits, batch.labels)
            tape.backward(loss)
            grads = _grads(model)
            norm = clip_by_global_norm(grads, config.grad_clip)
            lr = lr_at(step, sched)
            opt.step(grads, lr)
            tokens += batch.n_tokens
            row = StepStats(step, float(loss.data), lr, norm, tokens, estimate_flops(n_params, tokens))
            stats.rows.append(row)
            if on_step is not None:
                on_step(row)
            step += 1
        if len(valid):
            scores = predict_proba(model, valid, eos_id, pad_id)
            try:
                score = auprc(scores, valid_labels)
            except MetricError:
                score = -float(np.mean((scores - valid_labels) ** 2))
            stats.evals.append({"epoch": epoch, "valid_auprc": score})
            logger.info("epoch %d: valid AUPRC %.4f", epoch, score)
            if score > best_score:
                best, best_score, stale = _snapshot(model), score, 0
            else:
                stale += 1
                if stale >= config.patience:
                    break
        else:
            best = _snapshot(model)
    _restore(model, best)
    return stats
