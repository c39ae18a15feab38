"""Synthetic parallel corpora, vocabulary handling, corpus file I/O, batching.

Corpus files are UTF-8 text, one pair per line, source and target separated
by a single tab, tokens space-separated. The vocabulary sidecar holds one
content token per line (line number = id - 4; ids 0..3 are reserved).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

PAD, BOS, EOS, UNK = 0, 1, 2, 3
RESERVED_TOKENS = ("<pad>", "<bos>", "<eos>", "<unk>")
N_RESERVED = len(RESERVED_TOKENS)


class CorpusFormatError(ValueError):
    """Malformed corpus or vocabulary file."""


class Vocab:
    """Bijection between content tokens and ids 4..3+N; ids 0..3 are reserved."""

    def __init__(self, tokens: list[str]):
        if len(set(tokens)) != len(tokens):
            raise CorpusFormatError("duplicate token in vocabulary")
        self.tokens = list(tokens)
        self._to_id = {t: N_RESERVED + i for i, t in enumerate(self.tokens)}
        for i, t in enumerate(RESERVED_TOKENS):
            self._to_id[t] = i

    @property
    def size(self) -> int:
        """Total id count including the 4 reserved ids."""
        return N_RESERVED + len(self.tokens)

    def id_of(self, token: str) -> int:
        return self._to_id.get(token, UNK)

    def token_of(self, i: int) -> str:
        if i < N_RESERVED:
            return RESERVED_TOKENS[i]
        return self.tokens[i - N_RESERVED]

    def encode(self, tokens: list[str]) -> np.ndarray:
        return np.array([self.id_of(t) for t in tokens], dtype=np.int64)

    def decode(self, ids) -> list[str]:
        return [self.token_of(int(i)) for i in ids]

    def save(self, path) -> None:
        Path(path).write_text("\n".join(self.tokens) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Vocab":
        text = Path(path).read_text(encoding="utf-8")
        tokens = [line for line in text.splitlines() if line]
        if not tokens:
            raise CorpusFormatError(f"empty vocabulary file: {path}")
        return cls(tokens)


@dataclass
class SyntheticTaskSpec:
    """Deterministic source->target rule; the target is a function of the source.

    kinds:
      remap_reverse: target = reversed source, each token through a fixed bijection
      remap_copy:    target = source through the bijection (identity if identity_remap)
      expand:        target length ~ ratio * source length via deterministic
                     per-token duplication/drop rules keyed on the token id
    """

    kind: str = "remap_reverse"
    vocab_size: int = 48
    len_min: int = 4
    len_max: int = 24
    ratio: float = 1.0
    identity_remap: bool = False

    def __post_init__(self):
        if self.kind not in ("remap_reverse", "remap_copy", "expand"):
            raise ValueError(f"unknown task kind: {self.kind!r}")
        if not (1 <= self.len_min <= self.len_max):
            raise ValueError(f"invalid length range [{self.len_min}, {self.len_max}]")
        if self.vocab_size < 1:
            raise ValueError("vocab_size must be >= 1")
        if self.ratio <= 0:
            raise ValueError("ratio must be positive")

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "vocab_size": self.vocab_size,
            "len_min": self.len_min,
            "len_max": self.len_max,
            "ratio": self.ratio,
            "identity_remap": self.identity_remap,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticTaskSpec":
        return cls(**d)


@dataclass
class ParallelCorpus:
    pairs: list[tuple[np.ndarray, np.ndarray]]
    vocab: Vocab

    def __post_init__(self):
        for i, (src, tgt) in enumerate(self.pairs):
            if len(src) == 0 or len(tgt) == 0:
                raise CorpusFormatError(f"empty sequence in pair {i}")

    def __len__(self) -> int:
        return len(self.pairs)

    def mean_length_ratio(self) -> float:
        """Mean (target+EOS)/(source+EOS) length ratio, the decode-length prior."""
        ratios = [(len(t) + 1) / (len(s) + 1) for s, t in self.pairs]
        return float(np.mean(ratios))


def _target_for(src: np.ndarray, spec: SyntheticTaskSpec, perm: np.ndarray) -> np.ndarray:
    mapped = perm[src - N_RESERVED] + N_RESERVED
    if spec.kind == "remap_reverse":
        return mapped[::-1].copy()
    if spec.kind == "remap_copy":
        return mapped
    # expand: duplicate (ratio > 1) or drop (ratio < 1) tokens chosen by a
    # deterministic rule on the content id, so the target is a pure function
    # of the source.
    content = src - N_RESERVED
    frac = abs(spec.ratio - 1.0)
    cutoff = int(round(frac * spec.vocab_size))
    selected = content < cutoff
    out: list[int] = []
    for tok, sel in zip(mapped, selected):
        if spec.ratio >= 1.0:
            out.append(int(tok))
            if sel:
                out.append(int(tok))
        elif not sel:
            out.append(int(tok))
    if not out:  # drop rule removed everything; keep one token
        out.append(int(mapped[0]))
    return np.array(out, dtype=np.int64)


def gen_corpus(spec: SyntheticTaskSpec, n: int, rng: np.random.Generator) -> ParallelCorpus:
    """n pairs drawn from the task spec; targets are deterministic given sources."""
    if n < 1:
        raise ValueError("need at least one pair")
    vocab = Vocab([f"w{i:02d}" for i in range(spec.vocab_size)])
    if spec.identity_remap:
        perm = np.arange(spec.vocab_size, dtype=np.int64)
    else:
        perm = rng.permutation(spec.vocab_size).astype(np.int64)
    pairs = []
    for _ in range(n):
        length = int(rng.integers(spec.len_min, spec.len_max + 1))
        src = rng.integers(N_RESERVED, N_RESERVED + spec.vocab_size, size=length).astype(np.int64)
        pairs.append((src, _target_for(src, spec, perm)))
    return ParallelCorpus(pairs, vocab)


def save_corpus(corpus: ParallelCorpus, path, vocab_path=None) -> None:
    path = Path(path)
    lines = []
    for src, tgt in corpus.pairs:
        s = " ".join(corpus.vocab.decode(src))
        t = " ".join(corpus.vocab.decode(tgt))
        lines.append(f"{s}\t{t}")
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    corpus.vocab.save(vocab_path or path.with_suffix(path.suffix + ".vocab"))


def load_corpus(path, vocab_path=None) -> ParallelCorpus:
    path = Path(path)
    vocab = Vocab.load(vocab_path or path.with_suffix(path.suffix + ".vocab"))
    text = path.read_text(encoding="utf-8")
    lines = text.splitlines()
    if not any(line.strip() for line in lines):
        raise CorpusFormatError(f"empty corpus file: {path}")
    pairs = []
    for lineno, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        if line.count("\t") != 1:
            raise CorpusFormatError(f"{path}:{lineno}: expected exactly one tab separator")
        s, t = line.split("\t")
        src = vocab.encode(s.split())
        tgt = vocab.encode(t.split())
        if len(src) == 0 or len(tgt) == 0:
            raise CorpusFormatError(f"{path}:{lineno}: empty side")
        pairs.append((src, tgt))
    return ParallelCorpus(pairs, vocab)


@dataclass
class Batch:
    """Padded integer matrices plus validity masks.

    src rows are content + EOS, padded with PAD; tgt rows likewise. loss_mask
    is 1.0 exactly at real target positions (content + EOS).
    """

    src: np.ndarray          # (B, Ts) int64
    src_valid: np.ndarray    # (B, Ts) float64, 1 at real positions
    tgt: np.ndarray          # (B, Tt) int64
    loss_mask: np.ndarray    # (B, Tt) float64
    src_lens: np.ndarray     # (B,) lengths including EOS
    tgt_lens: np.ndarray     # (B,) lengths including EOS

    @property
    def size(self) -> int:
        return self.src.shape[0]

    @property
    def n_target_tokens(self) -> int:
        return int(self.loss_mask.sum())


def with_eos(seq: np.ndarray) -> np.ndarray:
    return np.concatenate([np.asarray(seq, dtype=np.int64), [EOS]])


def make_batch(pairs: list[tuple[np.ndarray, np.ndarray]]) -> Batch:
    srcs = [with_eos(s) for s, _ in pairs]
    tgts = [with_eos(t) for _, t in pairs]
    b = len(pairs)
    ts = max(len(s) for s in srcs)
    tt = max(len(t) for t in tgts)
    src = np.full((b, ts), PAD, dtype=np.int64)
    tgt = np.full((b, tt), PAD, dtype=np.int64)
    src_valid = np.zeros((b, ts))
    loss_mask = np.zeros((b, tt))
    for i, (s, t) in enumerate(zip(srcs, tgts)):
        src[i, : len(s)] = s
        src_valid[i, : len(s)] = 1.0
        tgt[i, : len(t)] = t
        loss_mask[i, : len(t)] = 1.0
    return Batch(
        src, src_valid, tgt, loss_mask,
        np.array([len(s) for s in srcs]), np.array([len(t) for t in tgts]),
    )


def batch_iter(corpus: ParallelCorpus, batch_size: int, rng: np.random.Generator | None = None,
               shuffle: bool = True):
    """Yield padded batches covering every pair exactly once per epoch."""
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    order = np.arange(len(corpus))
    if shuffle:
        if rng is None:
            raise ValueError("shuffle=True requires an rng")
        order = rng.permutation(len(corpus))
    for start in range(0, len(corpus), batch_size):
        idx = order[start : start + batch_size]
        yield make_batch([corpus.pairs[i] for i in idx])


def endless_batches(corpus: ParallelCorpus, batch_size: int, rng: np.random.Generator):
    """Infinite stream of epochs, reshuffled each epoch with the same rng."""
    while True:
        yield from batch_iter(corpus, batch_size, rng, shuffle=True)


def strip_special(tokens) -> np.ndarray:
    """Content prefix of a decoded sequence: cut at the first EOS, drop reserved ids."""
    out = []
    for t in np.asarray(tokens, dtype=np.int64):
        if t == EOS:
            break
        if t >= N_RESERVED:
            out.append(int(t))
    return np.array(out, dtype=np.int64)
