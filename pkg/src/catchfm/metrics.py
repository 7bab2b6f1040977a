"""Screening metrics: AUROC, average precision, threshold tables, sensitivity at a
specificity floor, relative risk and top-fraction operating points."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np


class MetricError(ValueError):
    pass


def _validate(scores, labels) -> tuple[np.ndarray, np.ndarray]:
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.shape != labels.shape or scores.ndim != 1:
        raise MetricError("scores and labels must be 1-D and equally long")
    if not np.all(np.isin(labels, (0, 1))):
        raise MetricError("labels must be 0 or 1")
    if np.isnan(scores).any():
        raise MetricError("scores contain NaN")
    labels = labels.astype(np.int64)
    n_pos = int(labels.sum())
    if n_pos == 0 or n_pos == len(labels):
        raise MetricError("single-class input: need at least one positive and one negative")
    return scores, labels


def auroc(scores, labels) -> float:
    """Probability that a random positive outscores a random negative (ties count 1/2)."""
    scores, labels = _validate(scores, labels)
    # average ranks handle ties exactly
    order = np.argsort(scores, kind="mergesort")
    sorted_scores = scores[order]
    ranks = np.empty(len(scores))
    _, start, counts = np.unique(sorted_scores, return_index=True, return_counts=True)
    avg = start + (counts + 1) / 2.0
    ranks[order] = np.repeat(avg, counts)
    n_pos = labels.sum()
    n_neg = len(labels) - n_pos
    u = ranks[labels == 1].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


@dataclass(frozen=True)
class _Curve:
    thresholds: np.ndarray  # distinct scores, descending
    tp: np.ndarray  # cumulative counts at score >= threshold
    fp: np.ndarray
    n_pos: int
    n_neg: int


def _curve(scores: np.ndarray, labels: np.ndarray) -> _Curve:
    order = np.argsort(-scores, kind="mergesort")
    s, y = scores[order], labels[order]
    last_of_group = np.r_[s[1:] != s[:-1], True]
    tp = np.cumsum(y)[last_of_group]
    fp = np.cumsum(1 - y)[last_of_group]
    return _Curve(s[last_of_group], tp, fp, int(y.sum()), int(len(y) - y.sum()))


def auprc(scores, labels) -> float:
    """Average precision: sum over thresholds of (recall step) x precision."""
    scores, labels = _validate(scores, labels)
    c = _curve(scores, labels)
    precision = c.tp / (c.tp + c.fp)
    recall_step = np.diff(np.r_[0, c.tp]) / c.n_pos
    return float(np.sum(recall_step * precision))


@dataclass(frozen=True)
class ThresholdRow:
    threshold: float
    tp: int
    fp: int
    fn: int
    tn: int
    fpr: float
    sensitivity: float
    specificity: float
    precision: float | None
    relative_risk: float | None


def relative_risk(precision: float | None, prevalence: float) -> float | None:
    """Enrichment of flagged patients over random selection; None when nothing is flagged."""
    if precision is None:
        return None
    if not prevalence > 0:
        raise MetricError("prevalence must be positive")
    return precision / prevalence


def _row(threshold: float, tp: int, fp: int, n_pos: int, n_neg: int) -> ThresholdRow:
    prevalence = n_pos / (n_pos + n_neg)
    precision = tp / (tp + fp) if tp + fp else None
    fpr = fp / n_neg
    return ThresholdRow(
        threshold=float(threshold), tp=int(tp), fp=int(fp), fn=int(n_pos - tp), tn=int(n_neg - fp),
        fpr=fpr, sensitivity=tp / n_pos, specificity=1.0 - fpr,
        precision=precision, relative_risk=relative_risk(precision, prevalence),
    )


def threshold_table(scores, labels) -> list[ThresholdRow]:
    """One row per distinct score (flag score >= threshold), descending threshold."""
    scores, labels = _validate(scores, labels)
    c = _curve(scores, labels)
    return [_row(t, tp, fp, c.n_pos, c.n_neg) for t, tp, fp in zip(c.thresholds, c.tp, c.fp)]


def row_at_threshold(scores, labels, threshold: float) -> ThresholdRow:
    """Confusion counts when flagging every score >= ``threshold``."""
    scores, labels = _validate(scores, labels)
    flagged = scores >= threshold
    n_pos = int(labels.sum())
    return _row(threshold, int((flagged & (labels == 1)).sum()), int((flagged & (labels == 0)).sum()),
                n_pos, len(labels) - n_pos)


def sensitivity_at_specificity(scores, labels, spec_floor: float = 0.99) -> tuple[float, float]:
    """(threshold, sensitivity) at the lowest threshold whose specificity >= spec_floor.

    The allowed false positives are floor((1 - spec_floor) * n_neg), computed with a
    small tolerance so that e.g. 0.99 on 100 negatives allows exactly one.
    """
    scores, labels = _validate(scores, labels)
    if not 0 < spec_floor < 1:
        raise MetricError("spec_floor must be in (0, 1)")
    c = _curve(scores, labels)
    max_fp = math.floor((1 - spec_floor) * c.n_neg + 1e-9)
    if max_fp < 1:
        need = math.ceil(1 / (1 - spec_floor) - 1e-9)
        raise MetricError(
            f"specificity floor {spec_floor} is unreachable with {c.n_neg} negatives: "
            f"need at least {need} so that one false positive is allowed"
        )
    ok = np.nonzero(c.fp <= max_fp)[0]
    if ok.size == 0:
        # even the top score admits too many negatives; flag nothing
        return float(np.nextafter(c.thresholds[0], np.inf)), 0.0
    i = ok[-1]
    return float(c.thresholds[i]), float(c.tp[i] / c.n_pos)


def operational_point(scores, labels, top_fraction: float = 0.001) -> ThresholdRow:
    """Flag exactly ceil(top_fraction * n) patients, highest scores first.

    Ties are broken by position in the input, so the flagged set is deterministic; the
    reported threshold is the lowest flagged score.
    """
    scores, labels = _validate(scores, labels)
    n = len(scores)
    if not 0 < top_fraction <= 1:
        raise MetricError("top_fraction must be in (0, 1]")
    if n * top_fraction < 1 - 1e-9:
        raise MetricError(f"need at least {math.ceil(1 / top_fraction)} patients for top fraction {top_fraction}")
    k = math.ceil(n * top_fraction - 1e-9)
    order = np.lexsort((np.arange(n), -scores))[:k]
    n_pos = int(labels.sum())
    tp = int(labels[order].sum())
    return _row(scores[order[-1]], tp, k - tp, n_pos, n - n_pos)


def bootstrap_ci(metric, scores, labels, n_resamples: int = 1000, alpha: float = 0.05,
                 seed: int = 0) -> tuple[float, float]:
    """Percentile interval of ``metric`` over stratified resamples."""
    scores, labels = _validate(scores, labels)
    rng = np.random.default_rng(seed)
    pos, neg = np.nonzero(labels == 1)[0], np.nonzero(labels == 0)[0]
    values = np.empty(n_resamples)
    for b in range(n_resamples):
        idx = np.r_[rng.choice(pos, len(pos)), rng.choice(neg, len(neg))]
        values[b] = metric(scores[idx], labels[idx])
    return float(np.quantile(values, alpha / 2)), float(np.quantile(values, 1 - alpha / 2))


@dataclass
class MetricReport:
    n: int
    n_pos: int
    prevalence: float
    auroc: float
    auprc: float
    spec_floor: float
    threshold: float  # selected threshold (may come from another cohort)
    at_threshold: ThresholdRow
    top_fraction: float
    operational: ThresholdRow | None
    rows: list[ThresholdRow] = field(default_factory=list)

    def to_dict(self, with_rows: bool = True) -> dict:
        d = asdict(self)
        if not with_rows:
            d.pop("rows")
        return d


def evaluate(scores, labels, spec_floor: float = 0.99, top_fraction: float = 0.001,
             threshold: float | None = None, with_rows: bool = True) -> MetricReport:
    """Full report. ``threshold`` reuses a cut chosen elsewhere (e.g. on validation)."""
    scores, labels = _validate(scores, labels)
    if threshold is None:
        threshold, _ = sensitivity_at_specificity(scores, labels, spec_floor)
    try:
        op = operational_point(scores, labels, top_fraction)
    except MetricError:
        op = None
    n_pos = int(labels.sum())
    return MetricReport(
        n=len(labels), n_pos=n_pos, prevalence=n_pos / len(labels),
        auroc=auroc(scores, labels), auprc=auprc(scores, labels),
        spec_floor=spec_floor, threshold=float(threshold),
        at_threshold=row_at_threshold(scores, labels, threshold),
        top_fraction=top_fraction, operational=op,
        rows=threshold_table(scores, labels) if with_rows else [],
    )
