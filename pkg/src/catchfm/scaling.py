"""IsoFLOP profiling and compute-optimal power-law fits.

All FLOP counts use C = 6 N D (see :func:`catchfm.train.estimate_flops`). Each
fixed-budget curve gets a parabola in ln N; its vertex is that budget's optimal model
size, and power laws N_opt = a C^b, D_opt = a' C^b' are fitted across budgets.
"""

from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from catchfm.train import steps_for_tokens


class ScalingError(ValueError):
    pass


FLOPS_TOLERANCE = 0.01


@dataclass(frozen=True)
class IsoFlopPoint:
    flops: float
    params: float
    tokens: float
    val_loss: float

    def __post_init__(self):
        for name in ("flops", "params", "tokens", "val_loss"):
            v = getattr(self, name)
            if not (math.isfinite(v) and v > 0):
                raise ScalingError(f"{name} must be positive and finite, got {v}")
        implied = 6.0 * self.params * self.tokens
        if abs(implied - self.flops) > FLOPS_TOLERANCE * self.flops:
            raise ScalingError(f"flops {self.flops:.4g} disagree with 6*N*D = {implied:.4g}")


@dataclass(frozen=True)
class IsoFlopFit:
    n_opt: float
    l_min: float
    alpha: float  # curvature of L in ln N
    flops: float | None = None


def fit_isoflop_minimum(params: Sequence[float], losses: Sequence[float], flops: float | None = None) -> IsoFlopFit:
    """Least-squares fit of L = alpha (ln N - ln N_opt)^2 + L_min.

    Raises ScalingError when the parabola opens downward, is flat, or its vertex lies
    outside the sampled range of N.
    """
    n = np.asarray(params, dtype=np.float64)
    y = np.asarray(losses, dtype=np.float64)
    if n.shape != y.shape or n.ndim != 1:
        raise ScalingError("params and losses must be 1-D and equally long")
    if np.any(n <= 0) or not np.all(np.isfinite(y)):
        raise ScalingError("model sizes must be positive and losses finite")
    x = np.log(n)
    if len(np.unique(x)) < 3:
        raise ScalingError("need at least 3 distinct model sizes")
    center = x.mean()
    a, b, c = np.polyfit(x - center, y, 2)
    scale = max(float(np.ptp(y)), 1e-300) / max(float(np.ptp(x)) ** 2, 1e-300)
    if not a > 1e-9 * scale:
        raise ScalingError("no interior minimum: fitted curve does not open upward")
    xv = -b / (2 * a) + center
    if not x.min() <= xv <= x.max():
        raise ScalingError("no interior minimum: vertex lies outside the sampled model sizes")
    return IsoFlopFit(float(math.exp(xv)), float(c - b * b / (4 * a)), float(a), flops)


def fit_isoflop_points(points: Sequence[IsoFlopPoint]) -> IsoFlopFit:
    flops = np.array([p.flops for p in points])
    ref = float(np.median(flops))
    if np.any(np.abs(flops - ref) > FLOPS_TOLERANCE * ref):
        raise ScalingError("isoFLOP points must share one compute budget")
    return fit_isoflop_minimum([p.params for p in points], [p.val_loss for p in points], ref)


@dataclass(frozen=True)
class PowerLawFit:
    coefficient: float
    exponent: float
    rms: float  # residual RMS of ln Y
    c_range: tuple[float, float]

    def __call__(self, c: float) -> float:
        return self.coefficient * c**self.exponent

    def extrapolated(self, c: float, decades: float = 1.0) -> bool:
        lo, hi = self.c_range
        return c < lo / 10**decades or c > hi * 10**decades


def fit_power_law(c: Sequence[float], y: Sequence[float]) -> PowerLawFit:
    """OLS of ln Y on ln C; the exponent is the slope."""
    c = np.asarray(c, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if c.shape != y.shape or c.ndim != 1:
        raise ScalingError("inputs must be 1-D and equally long")
    if np.any(c <= 0) or np.any(y <= 0) or not (np.all(np.isfinite(c)) and np.all(np.isfinite(y))):
        raise ScalingError("power-law fit needs positive finite values")
    lx, ly = np.log(c), np.log(y)
    if len(np.unique(lx)) < 2:
        raise ScalingError("need at least 2 distinct compute budgets")
    xm, ym = lx.mean(), ly.mean()
    dx = lx - xm
    slope = float(np.dot(dx, ly - ym) / np.dot(dx, dx))
    intercept = ym - slope * xm
    resid = ly - (intercept + slope * lx)
    return PowerLawFit(float(math.exp(intercept)), slope, float(np.sqrt(np.mean(resid**2))),
                       (float(c.min()), float(c.max())))


@dataclass(frozen=True)
class BudgetPlan:
    flops: float
    params: float
    tokens: float
    steps: int
    extrapolated: bool


def plan_budget(c: float, fit_n: PowerLawFit, fit_d: PowerLawFit, batch_size: int = 64,
                seq_len: int = 2048) -> BudgetPlan:
    if not c > 0:
        raise ScalingError("compute budget must be positive")
    d = fit_d(c)
    return BudgetPlan(c, fit_n(c), d, steps_for_tokens(d, batch_size, seq_len),
                      fit_n.extrapolated(c) or fit_d.extrapolated(c))


# ---------------------------------------------------------------------------
# Point files and whole-sweep fitting


def read_points(path: str | Path) -> list[IsoFlopPoint]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        missing = {"flops", "params", "tokens", "val_loss"} - set(reader.fieldnames or ())
        if missing:
            raise ScalingError(f"{path}: missing columns {sorted(missing)}")
        return [IsoFlopPoint(float(r["flops"]), float(r["params"]), float(r["tokens"]), float(r["val_loss"]))
                for r in reader]


def write_points(points: Iterable[IsoFlopPoint], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["flops", "params", "tokens", "val_loss"])
        for p in points:
            w.writerow([repr(float(v)) for v in (p.flops, p.params, p.tokens, p.val_loss)])


def group_by_budget(points: Sequence[IsoFlopPoint]) -> list[list[IsoFlopPoint]]:
    groups: list[list[IsoFlopPoint]] = []
    for p in sorted(points, key=lambda p: p.flops):
        if groups and abs(p.flops - groups[-1][0].flops) <= FLOPS_TOLERANCE * groups[-1][0].flops:
            groups[-1].append(p)
        else:
            groups.append([p])
    return groups


def fit_scaling(points: Sequence[IsoFlopPoint]) -> dict:
    """IsoFLOP vertices per budget plus N_opt and D_opt power laws when >= 2 budgets fit."""
    curves: list[IsoFlopFit | dict] = []
    for group in group_by_budget(points):
        try:
            curves.append(fit_isoflop_points(group))
        except ScalingError as exc:
            curves.append({"flops": group[0].flops, "error": str(exc)})
    ok = [c for c in curves if isinstance(c, IsoFlopFit)]
    out: dict = {"curves": [asdict(c) if isinstance(c, IsoFlopFit) else c for c in curves]}
    if len(ok) >= 2:
        cs = [c.flops for c in ok]
        n_fit = fit_power_law(cs, [c.n_opt for c in ok])
        d_fit = fit_power_law(cs, [c.flops / (6 * c.n_opt) for c in ok])
        out["n_opt"] = asdict(n_fit)
        out["d_opt"] = asdict(d_fit)
    return out


def isoflop_sweep(budget: float, sizes: Sequence[int], run: Callable[[int, float], float]) -> list[IsoFlopPoint]:
    """Train one model per size at a fixed budget. ``run(n_params, tokens)`` returns the
    validation loss; tokens are set to budget / (6 N)."""
    points = []
    for n in sizes:
        tokens = budget / (6.0 * n)
        points.append(IsoFlopPoint(budget, float(n), tokens, run(n, tokens)))
    return points
