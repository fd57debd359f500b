"""Synthetic Markov-chain corpora used for teacher training and calibration."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass

import numpy as np

from moelab.errors import FormatError, InvalidArgumentError
from moelab.model import TokenBatch

PAD_ID = 0


@dataclass(frozen=True)
class CorpusConfig:
    vocab_size: int
    seq_len: int
    n_sequences: int
    markov_order: int = 1
    seed: int = 0
    pad_fraction: float = 0.0
    concentration: float = 0.3

    def __post_init__(self):
        if self.vocab_size < 2:
            raise InvalidArgumentError("vocab_size must be at least 2")
        if self.seq_len < 2:
            raise InvalidArgumentError("seq_len must be at least 2")
        if self.n_sequences < 1:
            raise InvalidArgumentError("n_sequences must be positive")
        if self.markov_order not in (1, 2):
            raise InvalidArgumentError("markov_order must be 1 or 2")
        if not 0.0 <= self.pad_fraction < 0.5:
            raise InvalidArgumentError("pad_fraction must lie in [0, 0.5)")
        if not self.concentration > 0:
            raise InvalidArgumentError("concentration must be positive")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> CorpusConfig:
        return cls(**d)


def transition_matrix(config: CorpusConfig) -> np.ndarray:
    """The planted chain: shape ``(V, V)`` for order 1, ``(V, V, V)`` for order 2.

    Rows are Dirichlet draws; a small concentration makes them peaked, which
    gives the model a learnable next-token structure.
    """
    rng = np.random.default_rng([config.seed, 0])
    v = config.vocab_size
    shape = (v,) * config.markov_order
    rows = rng.dirichlet(np.full(v, config.concentration), size=int(np.prod(shape)))
    return rows.reshape(shape + (v,))


def generate_corpus(config: CorpusConfig) -> TokenBatch:
    P = transition_matrix(config)
    rng = np.random.default_rng([config.seed, 1])
    v, n = config.vocab_size, config.seq_len
    cdf = np.cumsum(P, axis=-1)
    cdf[..., -1] = 1.0
    n_pad = int(math.floor(config.pad_fraction * n))
    seqs, masks = [], []
    for _ in range(config.n_sequences):
        s = np.empty(n, dtype=np.int64)
        s[:config.markov_order] = rng.integers(0, v, size=config.markov_order)
        u = rng.random(n)
        for t in range(config.markov_order, n):
            row = cdf[s[t - 1]] if config.markov_order == 1 else cdf[s[t - 2], s[t - 1]]
            s[t] = min(int(np.searchsorted(row, u[t], side="right")), v - 1)
        m = np.ones(n, dtype=np.int64)
        if n_pad:
            s[n - n_pad:] = PAD_ID
            m[n - n_pad:] = 0
        seqs.append(s)
        masks.append(m)
    return TokenBatch(seqs, masks)


def split_corpus(corpus: TokenBatch, calib_fraction: float,
                 seed: int = 0) -> tuple[TokenBatch, TokenBatch]:
    """Seeded-permutation split into (calibration, held-out); each side keeps corpus order."""
    if not 0.0 < calib_fraction < 1.0:
        raise InvalidArgumentError("calib_fraction must lie strictly between 0 and 1")
    n = len(corpus)
    n_cal = int(round(calib_fraction * n))
    if n_cal == 0 or n_cal == n:
        raise InvalidArgumentError(f"split of {n} sequences at {calib_fraction} leaves a side empty")
    perm = np.random.default_rng(seed).permutation(n)
    return corpus.subset(np.sort(perm[:n_cal])), corpus.subset(np.sort(perm[n_cal:]))


def write_jsonl(corpus: TokenBatch, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for s, m in zip(corpus.sequences, corpus.masks):
            fh.write(json.dumps({"tokens": s.tolist(), "mask": m.tolist()}) + "\n")


def read_jsonl(path) -> TokenBatch:
    seqs, masks = [], []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                seqs.append(rec["tokens"])
                masks.append(rec["mask"])
            except (ValueError, KeyError) as exc:
                raise FormatError(f"{path}:{lineno}: {exc}") from exc
    return TokenBatch(seqs, masks)
