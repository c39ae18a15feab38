"""Encoder-decoder transformer with a switchable decoder attention mask.

One parameter set serves two regimes: causal decoding (each position sees
only earlier decoder positions) and fully parallel decoding (every position
sees all others). The regime is selected purely by the mask passed to
``decode``; parameters, shapes and layer structure are identical in both.

Decoder layers run masked self-attention, then positional attention
(queries and keys from the fixed sinusoidal position table, values from the
hidden states), then encoder-decoder cross-attention, then a feed-forward
block, each wrapped in residual + layer norm.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as tt
from .data import BOS
from .tensor import Tensor

AT = "AT"
NAT = "NAT"


@dataclass
class ModelConfig:
    d_model: int = 64
    d_hidden: int = 64
    n_layers: int = 2
    n_heads: int = 4
    vocab_size: int = 64
    max_len: int = 64
    dropout: float = 0.0

    def __post_init__(self):
        if self.d_model % self.n_heads != 0:
            raise ValueError(f"d_model {self.d_model} not divisible by n_heads {self.n_heads}")
        if not (0.0 <= self.dropout < 1.0):
            raise ValueError(f"dropout must be in [0, 1), got {self.dropout}")

    def to_dict(self) -> dict:
        return {
            "d_model": self.d_model, "d_hidden": self.d_hidden,
            "n_layers": self.n_layers, "n_heads": self.n_heads,
            "vocab_size": self.vocab_size, "max_len": self.max_len,
            "dropout": self.dropout,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


@dataclass(frozen=True)
class AttentionMask:
    """0/1 matrix; entry (i, j) = 1 means position i may attend to position j."""

    kind: str
    matrix: np.ndarray

    @property
    def length(self) -> int:
        return self.matrix.shape[0]


def build_mask(kind: str, t: int) -> AttentionMask:
    if t < 1:
        raise ValueError("mask length must be >= 1")
    if kind == AT:
        return AttentionMask(AT, np.tril(np.ones((t, t))))
    if kind == NAT:
        return AttentionMask(NAT, np.ones((t, t)))
    raise ValueError(f"unknown mask kind: {kind!r}")


@dataclass
class EncoderOutput:
    """Per-position source states plus the validity mask used to build them."""

    states: Tensor          # (B, Tx, d_model)
    valid: np.ndarray       # (B, Tx)

    @property
    def t_x(self) -> int:
        return self.states.shape[-2]


def sinusoidal_encoding(max_len: int, d_model: int) -> np.ndarray:
    pos = np.arange(max_len)[:, None].astype(np.float64)
    dim = np.arange(0, d_model, 2).astype(np.float64)
    angles = pos / np.power(10000.0, dim / d_model)
    pe = np.zeros((max_len, d_model))
    pe[:, 0::2] = np.sin(angles)
    pe[:, 1::2] = np.cos(angles[:, : d_model // 2])
    return pe


def shift_right(target, bos: int = BOS) -> np.ndarray:
    """Teacher-forcing decoder input: [BOS, y_0, ..., y_{T-2}], same length as target."""
    target = np.asarray(target, dtype=np.int64)
    if target.size == 0:
        raise ValueError("shift_right needs a nonempty target")
    return np.concatenate([[bos], target[:-1]])


def hard_copy(src, t_y: int) -> np.ndarray:
    """Uniformly stretch/compress src onto t_y slots: out[t] = src[ceil((t+1)*Tx/Ty) - 1]."""
    src = np.asarray(src, dtype=np.int64)
    if src.size == 0:
        raise ValueError("hard_copy needs a nonempty source")
    if t_y < 1:
        raise ValueError("hard_copy target length must be >= 1")
    t_x = src.size
    pos = np.arange(1, t_y + 1)
    idx = -(-(pos * t_x) // t_y) - 1  # ceil division
    return src[idx]


def _xavier(rng: np.random.Generator, n_in: int, n_out: int) -> np.ndarray:
    limit = math.sqrt(6.0 / (n_in + n_out))
    return rng.uniform(-limit, limit, size=(n_in, n_out))


def init_params(cfg: ModelConfig, rng: np.random.Generator) -> dict[str, Tensor]:
    d, h, v = cfg.d_model, cfg.d_hidden, cfg.vocab_size
    p: dict[str, np.ndarray] = {"embed": rng.normal(0.0, d ** -0.5, size=(v, d))}

    def attn(prefix: str):
        for name in ("wq", "wk", "wv", "wo"):
            p[f"{prefix}.{name}"] = _xavier(rng, d, d)

    def ln(prefix: str):
        p[f"{prefix}.g"] = np.ones(d)
        p[f"{prefix}.b"] = np.zeros(d)

    def ffn(prefix: str):
        p[f"{prefix}.w1"] = _xavier(rng, d, h)
        p[f"{prefix}.b1"] = np.zeros(h)
        p[f"{prefix}.w2"] = _xavier(rng, h, d)
        p[f"{prefix}.b2"] = np.zeros(d)

    for i in range(cfg.n_layers):
        attn(f"enc{i}.self"); ln(f"enc{i}.ln1")
        ffn(f"enc{i}.ffn"); ln(f"enc{i}.ln2")
    for i in range(cfg.n_layers):
        attn(f"dec{i}.self"); ln(f"dec{i}.ln1")
        attn(f"dec{i}.pos"); ln(f"dec{i}.ln2")
        attn(f"dec{i}.cross"); ln(f"dec{i}.ln3")
        ffn(f"dec{i}.ffn"); ln(f"dec{i}.ln4")
    p["out.w"] = _xavier(rng, d, v)
    p["out.b"] = np.zeros(v)
    return {k: Tensor(a, requires_grad=True) for k, a in p.items()}


class Transformer:
    """Encoder-decoder stack over a params dict of named tensors.

    ``encode``/``decode`` take single sequences; ``encode_batch``/
    ``decode_batch`` take padded (B, T) matrices with validity masks.
    ``decoder_forwards`` counts decoder forward passes (one per decode call),
    which is what the latency/complexity checks instrument.
    """

    def __init__(self, config: ModelConfig, rng: np.random.Generator | None = None,
                 params: dict[str, Tensor] | None = None):
        self.config = config
        if params is None:
            if rng is None:
                raise ValueError("need an rng to initialize parameters")
            params = init_params(config, rng)
        self.params = params
        self.pe = sinusoidal_encoding(config.max_len, config.d_model)
        self.encoder_forwards = 0
        self.decoder_forwards = 0
        self._drop_rng: np.random.Generator | None = None

    # -- parameter plumbing ------------------------------------------------

    @property
    def num_params(self) -> int:
        return sum(t.size for t in self.params.values())

    def zero_grad(self) -> None:
        for t in self.params.values():
            t.grad = None

    def clone_params(self) -> dict[str, np.ndarray]:
        return {k: t.data.copy() for k, t in self.params.items()}

    def load_param_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        if set(arrays) != set(self.params):
            missing = set(self.params) ^ set(arrays)
            raise ValueError(f"parameter name mismatch: {sorted(missing)}")
        for k, a in arrays.items():
            if a.shape != self.params[k].shape:
                raise ValueError(f"shape mismatch for {k}: {a.shape} vs {self.params[k].shape}")
            self.params[k].data = a.astype(np.float64).copy()

    def save(self, path, extra_meta: dict | None = None) -> None:
        meta = {"config": self.config.to_dict()}
        meta.update(extra_meta or {})
        tt.save_checkpoint(path, {k: t.data for k, t in self.params.items()}, meta)

    @classmethod
    def load(cls, path) -> "Transformer":
        arrays, meta = tt.load_checkpoint(path)
        cfg = ModelConfig.from_dict(meta["config"])
        params = {k: Tensor(a, requires_grad=True) for k, a in arrays.items()}
        return cls(cfg, params=params)

    def set_train(self, rng: np.random.Generator | None) -> None:
        """Enable dropout (if configured) using the given rng; None disables."""
        self._drop_rng = rng

    # -- building blocks ----------------------------------------------------

    def _dropout(self, x: Tensor) -> Tensor:
        rate = self.config.dropout
        if rate and self._drop_rng is not None:
            keep = (self._drop_rng.random(x.shape) >= rate) / (1.0 - rate)
            return tt.mul(x, keep)
        return x

    def _attention(self, prefix: str, q_in, k_in, v_in, mask: np.ndarray) -> Tensor:
        p = self.params
        n_heads = self.config.n_heads
        dk = self.config.d_model // n_heads
        q = tt.split_heads(tt.matmul(q_in, p[f"{prefix}.wq"]), n_heads)
        k = tt.split_heads(tt.matmul(k_in, p[f"{prefix}.wk"]), n_heads)
        v = tt.split_heads(tt.matmul(v_in, p[f"{prefix}.wv"]), n_heads)
        scores = tt.matmul_nt(q, k, alpha=1.0 / math.sqrt(dk))
        attn = self._dropout(tt.masked_softmax(scores, mask))
        out = tt.concat_heads(tt.matmul(attn, v))
        return tt.matmul(out, p[f"{prefix}.wo"])

    def _ffn(self, prefix: str, x: Tensor) -> Tensor:
        p = self.params
        h = tt.relu(tt.add(tt.matmul(x, p[f"{prefix}.w1"]), p[f"{prefix}.b1"]))
        h = self._dropout(h)
        return tt.add(tt.matmul(h, p[f"{prefix}.w2"]), p[f"{prefix}.b2"])

    def _sublayer(self, x: Tensor, out: Tensor, ln: str) -> Tensor:
        p = self.params
        return tt.layer_norm(tt.add(x, self._dropout(out)), p[f"{ln}.g"], p[f"{ln}.b"])

    def _embed(self, ids: np.ndarray) -> Tensor:
        t = ids.shape[-1]
        x = tt.scale(tt.embedding(self.params["embed"], ids), math.sqrt(self.config.d_model))
        return tt.add(x, self.pe[:t])

    # -- encoder -------------------------------------------------------------

    def encode_batch(self, src: np.ndarray, valid: np.ndarray) -> EncoderOutput:
        src = np.asarray(src, dtype=np.int64)
        if src.ndim != 2:
            raise ValueError(f"encode_batch expects (B, T) ids, got shape {src.shape}")
        if src.shape[1] > self.config.max_len:
            raise ValueError(
                f"source length {src.shape[1]} exceeds max_len {self.config.max_len}"
            )
        self.encoder_forwards += 1
        key_mask = valid[:, None, None, :]  # (B,1,1,Tx): all queries see valid keys
        x = self._embed(src)
        for i in range(self.config.n_layers):
            x = self._sublayer(x, self._attention(f"enc{i}.self", x, x, x, key_mask), f"enc{i}.ln1")
            x = self._sublayer(x, self._ffn(f"enc{i}.ffn", x), f"enc{i}.ln2")
        return EncoderOutput(x, np.asarray(valid, dtype=np.float64))

    def encode(self, src) -> EncoderOutput:
        """Single-sequence encode; states come back as (T_x, d_model)."""
        src = np.asarray(src, dtype=np.int64)
        if src.ndim != 1 or src.size == 0:
            raise ValueError("encode expects a nonempty 1-D token sequence")
        out = self.encode_batch(src[None, :], np.ones((1, src.size)))
        return EncoderOutput(tt.reshape(out.states, out.states.shape[1:]), out.valid[0])

    # -- decoder -------------------------------------------------------------

    def decode_batch(self, dec_input: np.ndarray, mask: AttentionMask,
                     enc: EncoderOutput, tgt_valid: np.ndarray) -> Tensor:
        dec_input = np.asarray(dec_input, dtype=np.int64)
        if dec_input.ndim != 2:
            raise ValueError(f"decode_batch expects (B, T) ids, got shape {dec_input.shape}")
        t = dec_input.shape[1]
        if mask.matrix.shape != (t, t):
            raise ValueError(
                f"mask shape {mask.matrix.shape} does not match decoder input length {t}"
            )
        if t > self.config.max_len:
            raise ValueError(f"decoder length {t} exceeds max_len {self.config.max_len}")
        self.decoder_forwards += 1
        dec_mask = mask.matrix[None, None, :, :] * tgt_valid[:, None, None, :]
        cross_mask = enc.valid[:, None, None, :]
        pe_t = Tensor(self.pe[:t])
        x = self._embed(dec_input)
        for i in range(self.config.n_layers):
            x = self._sublayer(x, self._attention(f"dec{i}.self", x, x, x, dec_mask),
                               f"dec{i}.ln1")
            x = self._sublayer(x, self._attention(f"dec{i}.pos", pe_t, pe_t, x, dec_mask),
                               f"dec{i}.ln2")
            x = self._sublayer(
                x, self._attention(f"dec{i}.cross", x, enc.states, enc.states, cross_mask),
                f"dec{i}.ln3")
            x = self._sublayer(x, self._ffn(f"dec{i}.ffn", x), f"dec{i}.ln4")
        return tt.add(tt.matmul(x, self.params["out.w"]), self.params["out.b"])

    def decode(self, dec_input, mask: AttentionMask, enc: EncoderOutput) -> Tensor:
        """Single-sequence decode; logits come back as (T_y, vocab_size)."""
        dec_input = np.asarray(dec_input, dtype=np.int64)
        if dec_input.ndim != 1 or dec_input.size == 0:
            raise ValueError("decode expects a nonempty 1-D token sequence")
        states = enc.states
        if states.ndim == 2:
            batched = EncoderOutput(tt.reshape(states, (1, *states.shape)),
                                    np.asarray(enc.valid, dtype=np.float64)[None, :])
        else:
            batched = enc
        logits = self.decode_batch(dec_input[None, :], mask, batched,
                                   np.ones((1, dec_input.size)))
        return tt.reshape(logits, logits.shape[1:])
