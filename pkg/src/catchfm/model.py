"""Decoder-only transformer over medical-code tokens with visit-level rotary positions.

Blocks are pre-norm with a parallel residual: ``x + attn(ln1(x)) + mlp(ln2(x))``.
Rotary angles come from the visit positions, while the causal mask follows the
sequence index, so codes that share a visit still only see earlier tokens.
"""

from __future__ import annotations

import json
import math
import os
import struct
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from catchfm import tensor as T
from catchfm.tensor import Tensor
from catchfm.tokenizer import TokenSequence

CKPT_MAGIC = b"CFMC"


class ModelError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    n_layers: int = 2
    d_model: int = 128
    n_heads: int = 4
    max_len: int = 512
    vocab_size: int = 512
    theta_base: float = 10000.0
    mlp_ratio: int = 4

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ModelError(f"d_model {self.d_model} not divisible by n_heads {self.n_heads}")
        if self.head_dim % 2:
            raise ModelError(f"head dim {self.head_dim} must be even for rotary pairs")
        if min(self.n_layers, self.d_model, self.n_heads, self.max_len, self.vocab_size) <= 0:
            raise ModelError("model dimensions must be positive")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads

    @property
    def d_ff(self) -> int:
        return self.mlp_ratio * self.d_model

    def n_params(self) -> int:
        """Trainable parameter count, embeddings and classifier head included."""
        d, v, f = self.d_model, self.vocab_size, self.d_ff
        per_layer = 4 * d * d + 4 * d + 2 * d * f + f + d + 4 * d
        return v * d + self.n_layers * per_layer + 2 * d + d * v + 2 * d + 2

    def n_params_nonembedding(self) -> int:
        return self.n_params() - 2 * self.vocab_size * self.d_model

    def replace(self, **kw) -> "ModelConfig":
        return ModelConfig(**{**asdict(self), **kw})


REFERENCE_VOCAB_SIZE = 185_138

# name: (layers, d_model, heads)
TABLE3 = {
    "70m": (6, 512, 8),
    "120m": (6, 768, 8),
    "160m": (12, 768, 12),
    "260m": (12, 1024, 16),
    "350m": (20, 1024, 16),
    "410m": (24, 1024, 16),
    "560m": (22, 1280, 10),
    "720m": (20, 1536, 12),
    "1b": (16, 2048, 8),
    "1.2b": (20, 2048, 16),
    "1.4b": (24, 2048, 16),
    "2.1b": (24, 2560, 16),
    "2.8b": (32, 2560, 32),
}


def named_config(name: str, vocab_size: int = REFERENCE_VOCAB_SIZE) -> ModelConfig:
    if name == "ci":
        return ModelConfig(2, 128, 4, 512, vocab_size)
    if name not in TABLE3:
        raise ModelError(f"unknown model config {name!r}; choose ci or one of {sorted(TABLE3)}")
    layers, d, heads = TABLE3[name]
    return ModelConfig(layers, d, heads, 2048, vocab_size)


def _layer_names(i: int) -> list[str]:
    p = f"layers.{i}."
    return [p + n for n in ("ln1.g", "ln1.b", "ln2.g", "ln2.b", "wq", "bq", "wk", "bk", "wv", "bv",
                            "wo", "bo", "w1", "b1", "w2", "b2")]


def parameter_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    d, f = cfg.d_model, cfg.d_ff
    shapes: dict[str, tuple[int, ...]] = {"embed": (cfg.vocab_size, d)}
    for i in range(cfg.n_layers):
        p = f"layers.{i}."
        shapes.update({
            p + "ln1.g": (d,), p + "ln1.b": (d,), p + "ln2.g": (d,), p + "ln2.b": (d,),
            p + "wq": (d, d), p + "bq": (d,), p + "wk": (d, d), p + "bk": (d,),
            p + "wv": (d, d), p + "bv": (d,), p + "wo": (d, d), p + "bo": (d,),
            p + "w1": (d, f), p + "b1": (f,), p + "w2": (f, d), p + "b2": (d,),
        })
    shapes.update({"ln_f.g": (d,), "ln_f.b": (d,), "lm_head": (d, cfg.vocab_size),
                   "cls.w": (d, 2), "cls.b": (2,)})
    return shapes


def is_no_decay(name: str) -> bool:
    """Norm gains/biases and all bias vectors are exempt from weight decay."""
    leaf = name.rsplit(".", 1)[-1]
    return leaf == "g" or leaf.startswith("b")


class Model:
    """Parameter container plus the forward passes."""

    def __init__(self, config: ModelConfig, params: dict[str, Tensor]):
        self.config = config
        self.params = params
        expected = parameter_shapes(config)
        if set(params) != set(expected):
            raise ModelError("parameter names do not match the configuration")
        for name, shape in expected.items():
            if params[name].shape != shape:
                raise ModelError(f"{name}: expected shape {shape}, got {params[name].shape}")

    @classmethod
    def init(cls, config: ModelConfig, seed: int = 0, dtype=np.float32) -> "Model":
        rng = np.random.default_rng(seed)
        out_std = 0.02 / math.sqrt(2 * config.n_layers)
        params = {}
        for name, shape in parameter_shapes(config).items():
            leaf = name.rsplit(".", 1)[-1]
            if name.startswith("cls."):
                arr = np.zeros(shape)
            elif leaf == "g":
                arr = np.ones(shape)
            elif len(shape) == 1:
                arr = np.zeros(shape)
            elif leaf in ("wo", "w2"):
                arr = rng.normal(0.0, out_std, shape)
            else:
                arr = rng.normal(0.0, 0.02, shape)
            params[name] = Tensor(arr.astype(dtype), requires_grad=True, name=name)
        return cls(config, params)

    def astype(self, dtype) -> "Model":
        return Model(self.config, {k: Tensor(v.data.astype(dtype), True, k) for k, v in self.params.items()})

    def copy(self) -> "Model":
        return self.astype(self.dtype)

    @property
    def dtype(self):
        return self.params["embed"].dtype

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def n_params(self) -> int:
        return sum(p.data.size for p in self.params.values())

    # ------------------------------------------------------------------
    def _check_inputs(self, tokens, positions) -> tuple[np.ndarray, np.ndarray]:
        tokens = np.atleast_2d(np.asarray(tokens, dtype=np.int64))
        positions = np.atleast_2d(np.asarray(positions, dtype=np.int64))
        if tokens.shape != positions.shape:
            raise ModelError(f"tokens {tokens.shape} and positions {positions.shape} differ")
        if tokens.shape[1] > self.config.max_len:
            raise ModelError(f"sequence length {tokens.shape[1]} exceeds max_len {self.config.max_len}")
        if tokens.size and (tokens.min() < 0 or tokens.max() >= self.config.vocab_size):
            raise ModelError(f"token id outside vocabulary of size {self.config.vocab_size}")
        return tokens, positions

    def _block(self, i: int, x: Tensor, positions: np.ndarray, scores_only: bool = False):
        cfg, P = self.config, self.params
        B, L, _ = x.shape
        H, hd = cfg.n_heads, cfg.head_dim
        p = f"layers.{i}."
        h = T.layer_norm(x, P[p + "ln1.g"], P[p + "ln1.b"])

        def heads(w, b):
            return T.linear(h, P[p + w], P[p + b]).reshape(B, L, H, hd).transpose(0, 2, 1, 3)

        # (B, 1, L) so the same visit positions apply to every head
        q = T.rope_rotate(heads("wq", "bq"), positions[:, None, :], cfg.theta_base)
        k = T.rope_rotate(heads("wk", "bk"), positions[:, None, :], cfg.theta_base)
        mask = np.triu(np.full((L, L), -np.inf, dtype=x.dtype), k=1)
        scores = T.add(T.mul(T.matmul(q, k.transpose(0, 1, 3, 2)), 1.0 / math.sqrt(hd)), mask)
        if scores_only:
            return scores.data
        att = T.matmul(T.softmax(scores, axis=-1), heads("wv", "bv"))
        att = T.linear(att.transpose(0, 2, 1, 3).reshape(B, L, cfg.d_model), P[p + "wo"], P[p + "bo"])
        h2 = T.layer_norm(x, P[p + "ln2.g"], P[p + "ln2.b"])
        mlp = T.linear(T.gelu(T.linear(h2, P[p + "w1"], P[p + "b1"])), P[p + "w2"], P[p + "b2"])
        return x + att + mlp

    def hidden_states(self, tokens: np.ndarray, positions: np.ndarray) -> Tensor:
        """Final-norm hidden states, shape (B, T, d)."""
        tokens, positions = self._check_inputs(tokens, positions)
        x = T.embedding_lookup(self.params["embed"], tokens)
        for i in range(self.config.n_layers):
            x = self._block(i, x, positions)
        return T.layer_norm(x, self.params["ln_f.g"], self.params["ln_f.b"])

    def attention_scores(self, tokens: np.ndarray, positions: np.ndarray, layer: int = 0) -> np.ndarray:
        """Masked pre-softmax attention scores of one layer, shape (B, H, T, T)."""
        if not 0 <= layer < self.config.n_layers:
            raise ModelError("layer index out of range")
        tokens, positions = self._check_inputs(tokens, positions)
        x = T.embedding_lookup(self.params["embed"], tokens)
        for i in range(layer):
            x = self._block(i, x, positions)
        return self._block(layer, x, positions, scores_only=True)

    def lm_logits(self, tokens: np.ndarray, positions: np.ndarray) -> Tensor:
        return T.matmul(self.hidden_states(tokens, positions), self.params["lm_head"])

    def forward_lm(self, tokens, positions, pad_id: int | None = None) -> tuple[Tensor, Tensor]:
        """Next-token logits (B, T, V) and mean loss over predicted positions."""
        tokens = np.atleast_2d(np.asarray(tokens, dtype=np.int64))
        logits = self.lm_logits(tokens, positions)
        B, L = tokens.shape
        ignore = -1
        targets = np.full((B, L), ignore, dtype=np.int64)
        targets[:, :-1] = tokens[:, 1:]
        if pad_id is not None:
            targets[targets == pad_id] = ignore
        flat = logits.reshape(B * L, self.config.vocab_size)
        loss = T.cross_entropy(flat, targets.reshape(-1), ignore_index=ignore)
        return logits, loss

    def classifier_logits(self, tokens, positions, eos_index: np.ndarray) -> Tensor:
        h = T.gather_rows(self.hidden_states(tokens, positions), eos_index)
        return T.linear(h, self.params["cls.w"], self.params["cls.b"])

    def forward_classify(self, tokens, positions, eos_id: int, eos_index: np.ndarray | None = None) -> np.ndarray:
        """Probability of the positive class for each row of the batch."""
        tokens = np.atleast_2d(np.asarray(tokens, dtype=np.int64))
        eos_index = _eos_index(tokens, eos_id, eos_index)
        logits = self.classifier_logits(tokens, positions, eos_index).data.astype(np.float64)
        logits -= logits.max(axis=1, keepdims=True)
        p = np.exp(logits)
        return p[:, 1] / p.sum(axis=1)

    def hidden_eos(self, tokens, positions, eos_id: int, eos_index: np.ndarray | None = None) -> np.ndarray:
        tokens = np.atleast_2d(np.asarray(tokens, dtype=np.int64))
        eos_index = _eos_index(tokens, eos_id, eos_index)
        return T.gather_rows(self.hidden_states(tokens, positions), eos_index).data


def _eos_index(tokens: np.ndarray, eos_id: int, eos_index: np.ndarray | None) -> np.ndarray:
    if eos_index is None:
        eos_index = np.array([_last_index(row, eos_id) for row in tokens])
    eos_index = np.asarray(eos_index, dtype=np.int64)
    if np.any(tokens[np.arange(len(tokens)), eos_index] != eos_id):
        raise ModelError("classification input has no EOS at the given index")
    return eos_index


def _last_index(row: np.ndarray, value: int) -> int:
    hits = np.nonzero(row == value)[0]
    if hits.size == 0:
        raise ModelError("classification input is missing the EOS token")
    return int(hits[-1])


# ---------------------------------------------------------------------------
# Batching


@dataclass
class Batch:
    tokens: np.ndarray
    positions: np.ndarray
    lengths: np.ndarray
    labels: np.ndarray | None

    @property
    def eos_index(self) -> np.ndarray:
        return self.lengths - 1

    @property
    def n_tokens(self) -> int:
        return int(self.lengths.sum())


def collate(seqs: Sequence[TokenSequence], pad_id: int) -> Batch:
    """Right-pad to the longest sequence; pads repeat the last visit position."""
    lengths = np.array([len(s) for s in seqs], dtype=np.int64)
    L = int(lengths.max())
    tokens = np.full((len(seqs), L), pad_id, dtype=np.int64)
    positions = np.zeros((len(seqs), L), dtype=np.int64)
    for i, s in enumerate(seqs):
        n = len(s)
        tokens[i, :n] = s.ids
        positions[i, :n] = s.visit_positions
        positions[i, n:] = s.visit_positions[-1] if n else 0
    labels = None
    if all(s.label is not None for s in seqs):
        labels = np.array([s.label for s in seqs], dtype=np.int64)
    return Batch(tokens, positions, lengths, labels)


def length_sorted_batches(seqs: Sequence[TokenSequence], batch_size: int) -> list[list[int]]:
    """Index groups of similar length, for inference without much padding."""
    order = sorted(range(len(seqs)), key=lambda i: len(seqs[i]))
    return [order[i : i + batch_size] for i in range(0, len(order), batch_size)]


def predict_proba(model: Model, seqs: Sequence[TokenSequence], eos_id: int, pad_id: int,
                  batch_size: int = 64) -> np.ndarray:
    out = np.empty(len(seqs))
    for idx in length_sorted_batches(seqs, batch_size):
        b = collate([seqs[i] for i in idx], pad_id)
        out[idx] = model.forward_classify(b.tokens, b.positions, eos_id, b.eos_index)
    return out


def export_hidden_eos(model: Model, seqs: Sequence[TokenSequence], eos_id: int, pad_id: int,
                      batch_size: int = 64) -> np.ndarray:
    """N x d matrix of final hidden states at each sequence's EOS, in input order."""
    out = np.empty((len(seqs), model.config.d_model), dtype=model.dtype)
    for idx in length_sorted_batches(seqs, batch_size):
        b = collate([seqs[i] for i in idx], pad_id)
        out[idx] = model.hidden_eos(b.tokens, b.positions, eos_id, b.eos_index)
    return out


def evaluate_lm_loss(model: Model, seqs: Sequence[TokenSequence], pad_id: int, batch_size: int = 32) -> float:
    """Token-weighted mean next-token loss over a set of sequences."""
    total, count = 0.0, 0
    for idx in length_sorted_batches(seqs, batch_size):
        b = collate([seqs[i] for i in idx], pad_id)
        _, loss = model.forward_lm(b.tokens, b.positions, pad_id)
        n = int(np.maximum(b.lengths - 1, 0).sum())
        total += float(loss.data) * n
        count += n
    return total / max(count, 1)


# ---------------------------------------------------------------------------
# Checkpoints: magic, u32 header length, JSON header, f32 little-endian blob.


def save_checkpoint(model: Model, path: str | Path, step: int = 0, rng_state: dict | None = None,
                    extra: dict[str, np.ndarray] | None = None) -> None:
    arrays = {name: p.data for name, p in model.params.items()}
    for name, arr in (extra or {}).items():
        arrays[f"extra.{name}"] = arr
    manifest, offset = [], 0
    for name, arr in arrays.items():
        manifest.append({"name": name, "shape": list(arr.shape), "offset": offset})
        offset += arr.size * 4
    header = json.dumps({"config": asdict(model.config), "step": step, "rng_state": rng_state,
                         "manifest": manifest}).encode()
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        for arr in arrays.values():
            fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
        fh.flush()
        os.fsync(fh.fileno())
    os.replace(tmp, path)


def load_checkpoint(path: str | Path) -> tuple[Model, dict]:
    """Returns the model and the header (step, rng_state, and extra arrays under 'extra')."""
    data = Path(path).read_bytes()
    if data[:4] != CKPT_MAGIC:
        raise ModelError(f"{path}: not a checkpoint (bad magic)")
    (hlen,) = struct.unpack_from("<I", data, 4)
    header = json.loads(data[8 : 8 + hlen])
    base = 8 + hlen
    config = ModelConfig(**header["config"])
    params, extra = {}, {}
    for entry in header["manifest"]:
        shape = tuple(entry["shape"])
        n = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(data, dtype="<f4", count=n, offset=base + entry["offset"]).reshape(shape).astype(np.float32)
        if entry["name"].startswith("extra."):
            extra[entry["name"][6:]] = arr
        else:
            params[entry["name"]] = Tensor(arr, requires_grad=True, name=entry["name"])
    header["extra"] = extra
    return Model(config, params), header
