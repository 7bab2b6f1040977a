"""TopK sparse autoencoder over EOS hidden states, feature extraction, and probing the
frozen classifier head with reconstructions.

    z     = TopK(W_enc (h - b_dec) + b_enc)      keep the k largest values, zero the rest
    h_hat = W_dec z + b_dec

Gradients are written out by hand; decoder columns are rescaled to unit norm after
every optimizer step.
"""

from __future__ import annotations

import json
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.stats import hypergeom

from catchfm.metrics import auroc
from catchfm.train import AdamW, TrainConfig, lr_at

logger = logging.getLogger(__name__)

ACT_MAGIC = b"CFMA"


class SaeError(ValueError):
    pass


@dataclass
class SaeParameters:
    W_enc: np.ndarray  # m x d
    b_enc: np.ndarray  # m
    W_dec: np.ndarray  # d x m
    b_dec: np.ndarray  # d
    k: int

    def __post_init__(self):
        m, d = self.W_enc.shape
        if self.W_dec.shape != (d, m) or self.b_enc.shape != (m,) or self.b_dec.shape != (d,):
            raise SaeError("inconsistent SAE parameter shapes")
        if not 1 <= self.k <= m:
            raise SaeError(f"k={self.k} must be between 1 and m={m}")

    @property
    def m(self) -> int:
        return self.W_enc.shape[0]

    @property
    def d(self) -> int:
        return self.W_enc.shape[1]

    def arrays(self) -> dict[str, np.ndarray]:
        return {"W_enc": self.W_enc, "b_enc": self.b_enc, "W_dec": self.W_dec, "b_dec": self.b_dec}

    def with_k(self, k: int) -> "SaeParameters":
        return SaeParameters(self.W_enc, self.b_enc, self.W_dec, self.b_dec, k)

    def save(self, path: str | Path) -> None:
        with open(path, "wb") as fh:
            np.savez(fh, k=np.array(self.k), **self.arrays())

    @classmethod
    def load(cls, path: str | Path) -> "SaeParameters":
        with np.load(path) as f:
            return cls(f["W_enc"], f["b_enc"], f["W_dec"], f["b_dec"], int(f["k"]))


def init_params(d: int, m: int, k: int, seed: int = 0, b_dec: np.ndarray | None = None) -> SaeParameters:
    """Random unit decoder columns, encoder tied to the decoder's transpose."""
    rng = np.random.default_rng(seed)
    W_dec = rng.normal(size=(d, m))
    W_dec /= np.linalg.norm(W_dec, axis=0, keepdims=True)
    b = np.zeros(d) if b_dec is None else np.asarray(b_dec, dtype=np.float64).copy()
    return SaeParameters(W_dec.T.copy(), np.zeros(m), W_dec, b, k)


def topk_mask(pre: np.ndarray, k: int) -> np.ndarray:
    """Boolean mask of the k largest entries per row; ties go to the lower index."""
    pre = np.atleast_2d(pre)
    if k > pre.shape[1]:
        raise SaeError(f"k={k} exceeds latent width {pre.shape[1]}")
    idx = np.argsort(-pre, axis=1, kind="stable")[:, :k]
    mask = np.zeros(pre.shape, dtype=bool)
    np.put_along_axis(mask, idx, True, axis=1)
    return mask


def _check_d(params: SaeParameters, h: np.ndarray) -> np.ndarray:
    h = np.asarray(h, dtype=np.float64)
    if h.shape[-1] != params.d:
        raise SaeError(f"activation width {h.shape[-1]} does not match SAE input width {params.d}")
    return h


def encode(params: SaeParameters, h: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """(pre-activations, sparse codes) for a batch of rows."""
    h = np.atleast_2d(_check_d(params, h))
    pre = (h - params.b_dec) @ params.W_enc.T + params.b_enc
    return pre, np.where(topk_mask(pre, params.k), pre, 0.0)


def sae_forward(params: SaeParameters, h: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """(z, h_hat); a single vector in gives single vectors out."""
    single = np.ndim(h) == 1
    _, z = encode(params, h)
    h_hat = z @ params.W_dec.T + params.b_dec
    return (z[0], h_hat[0]) if single else (z, h_hat)


def mse(params: SaeParameters, h: np.ndarray) -> float:
    _, h_hat = sae_forward(params, np.atleast_2d(h))
    return float(np.mean((h_hat - np.atleast_2d(h)) ** 2))


def _grads(params: SaeParameters, h: np.ndarray) -> tuple[float, dict[str, np.ndarray]]:
    centered = h - params.b_dec
    pre = centered @ params.W_enc.T + params.b_enc
    mask = topk_mask(pre, params.k)
    z = np.where(mask, pre, 0.0)
    err = z @ params.W_dec.T + params.b_dec - h
    loss = float(np.mean(err**2))
    g_out = 2.0 * err / err.size
    g_pre = (g_out @ params.W_dec) * mask
    grads = {
        "W_dec": g_out.T @ z,
        "b_dec": g_out.sum(axis=0) - (g_pre @ params.W_enc).sum(axis=0),
        "W_enc": g_pre.T @ centered,
        "b_enc": g_pre.sum(axis=0),
    }
    return loss, grads


@dataclass
class SaeTrainResult:
    params: SaeParameters
    mse_curve: list[float] = field(default_factory=list)  # full-data MSE after each epoch


def sae_train(activations: np.ndarray, m: int | None = None, k: int = 16, epochs: int = 50, seed: int = 0,
              lr: float = 1e-3, batch_size: int = 256, init: SaeParameters | None = None) -> SaeTrainResult:
    """Adam on mean squared reconstruction error; m defaults to 4 x d.

    The learning rate is held at ``lr`` and then decays linearly to zero over the final
    fifth of the epochs, which settles the dictionary and makes seeds agree closely.
    """
    h = np.asarray(activations, dtype=np.float64)
    if h.ndim != 2 or len(h) == 0:
        raise SaeError("activations must be a non-empty N x d matrix")
    d = h.shape[1]
    m = 4 * d if m is None else m
    if init is not None:
        if init.d != d:
            raise SaeError(f"initial parameters expect width {init.d}, activations have {d}")
        params = SaeParameters(*(a.copy() for a in init.arrays().values()), init.k)
    else:
        params = init_params(d, m, k, seed, b_dec=h.mean(axis=0))
    if params.k > params.m:
        raise SaeError(f"k={params.k} exceeds m={params.m}")
    if len(h) < params.m:
        logger.info("training an SAE with %d latents on only %d rows", params.m, len(h))
    arrays = params.arrays()
    opt = AdamW(arrays, weight_decay=0.0)
    rng = np.random.default_rng(seed)
    curve = []
    per_epoch = -(-len(h) // batch_size)
    sched = TrainConfig(peak_lr=lr, warmup=0.0, stable=0.8, decay=0.2, total_steps=epochs * per_epoch)
    step = 0
    for _ in range(epochs):
        order = rng.permutation(len(h))
        for start in range(0, len(h), batch_size):
            _, grads = _grads(params, h[order[start : start + batch_size]])
            opt.step(grads, lr_at(step, sched))
            step += 1
            params.W_dec /= np.maximum(np.linalg.norm(params.W_dec, axis=0, keepdims=True), 1e-12)
        curve.append(mse(params, h))
    return SaeTrainResult(params, curve)


# ---------------------------------------------------------------------------
# Features


@dataclass(frozen=True)
class CodeLift:
    code: str
    count: int  # among the feature's top patients
    lift: float
    p_value: float


@dataclass(frozen=True)
class Feature:
    index: int
    mean_activation: float
    top_patients: tuple[int, ...]  # row indices into the positive set
    codes: tuple[CodeLift, ...]


def top_features(
    params: SaeParameters,
    positive_activations: np.ndarray,
    positive_codes: Sequence[set[str]],
    background_codes: Sequence[set[str]],
    n_features: int = 10,
    per_feature_examples: int = 20,
    min_lift: float = 2.0,
    alpha: float = 0.05,
) -> list[Feature]:
    """Features ranked by mean activation over positives, each with the codes that are
    over-represented among its top-activating patients.

    A code is reported when its frequency among the top patients is at least
    ``min_lift`` times its frequency in the background cohort and the hypergeometric
    tail probability of that many hits passes ``alpha`` Bonferroni-corrected over every
    (feature, code) pair examined.
    """
    if len(positive_activations) == 0:
        return []
    if len(positive_codes) != len(positive_activations):
        raise SaeError("need one code set per positive patient")
    _, z = encode(params, positive_activations)
    means = z.mean(axis=0)
    ranked = [int(i) for i in np.argsort(-means, kind="stable")[:n_features] if means[i] > 0]
    n_bg = len(background_codes)
    base = {}
    for codes in background_codes:
        for c in codes:
            base[c] = base.get(c, 0) + 1
    tops, tallies = [], []
    for f in ranked:
        order = [int(i) for i in np.argsort(-z[:, f], kind="stable") if z[i, f] > 0][:per_feature_examples]
        counts: dict[str, int] = {}
        for i in order:
            for c in positive_codes[i]:
                counts[c] = counts.get(c, 0) + 1
        tops.append(order)
        tallies.append(counts)
    tested = max(sum(len(c) for c in tallies), 1)  # Bonferroni over every (feature, code) pair
    out = []
    for f, order, counts in zip(ranked, tops, tallies):
        n_top = len(order)
        lifts = []
        for code, cnt in counts.items():
            if n_bg == 0 or n_top == 0:
                continue
            bg = base.get(code, 0)
            lift = (cnt / n_top) / (max(bg, 1) / n_bg)
            p = float(hypergeom.sf(cnt - 1, max(n_bg, n_top), max(bg, cnt), n_top))
            if lift >= min_lift and p <= alpha / tested:
                lifts.append(CodeLift(code, cnt, lift, p))
        lifts.sort(key=lambda c: (c.p_value, -c.lift, c.code))
        out.append(Feature(f, float(means[f]), tuple(order), tuple(lifts)))
    return out


def head_probability(cls_w: np.ndarray, cls_b: np.ndarray, h: np.ndarray) -> np.ndarray:
    """Positive-class probability of the two-way softmax classifier head."""
    logits = np.asarray(h, dtype=np.float64) @ cls_w + cls_b
    logits = logits - logits.max(axis=1, keepdims=True)
    p = np.exp(logits)
    return p[:, 1] / p.sum(axis=1)


def probe_with_reconstruction(params: SaeParameters, cls_w: np.ndarray, cls_b: np.ndarray,
                              activations: np.ndarray, labels: np.ndarray) -> dict[str, float]:
    """AUROC of the frozen head on original activations and on their reconstructions."""
    _, h_hat = sae_forward(params, np.atleast_2d(activations))
    return {
        "auroc_original": auroc(head_probability(cls_w, cls_b, activations), labels),
        "auroc_reconstructed": auroc(head_probability(cls_w, cls_b, h_hat), labels),
        "mse": float(np.mean((h_hat - activations) ** 2)),
    }


# ---------------------------------------------------------------------------
# Activation files: "CFMA", u32 rows, u32 width, then rows x width little-endian f32.


def write_activations(h: np.ndarray, path: str | Path) -> None:
    h = np.asarray(h)
    with open(path, "wb") as fh:
        fh.write(ACT_MAGIC)
        fh.write(struct.pack("<II", *h.shape))
        fh.write(np.ascontiguousarray(h, dtype="<f4").tobytes())


def read_activations(path: str | Path) -> np.ndarray:
    data = Path(path).read_bytes()
    if data[:4] != ACT_MAGIC:
        raise SaeError(f"{path}: bad magic")
    n, d = struct.unpack_from("<II", data, 4)
    if len(data) != 12 + 4 * n * d:
        raise SaeError(f"{path}: expected {n} x {d} floats")
    return np.frombuffer(data, dtype="<f4", offset=12).reshape(n, d).astype(np.float64)


def features_to_json(features: list[Feature], path: str | Path) -> None:
    rows = [{
        "feature": f.index,
        "mean_activation": f.mean_activation,
        "top_patients": list(f.top_patients),
        "codes": [{"code": c.code, "count": c.count, "lift": c.lift, "p_value": c.p_value} for c in f.codes],
    } for f in features]
    Path(path).write_text(json.dumps(rows, indent=2))

