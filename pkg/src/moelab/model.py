"""Toy Mixture-of-Experts language model.

The network is an embedding, a stack of MoE feed-forward blocks with a
residual connection around each block, and an output head.  There is no
attention, so the logits at a position depend only on the token there.

Every block routes each token with ``softmax(router @ h)``, keeps the top-k
gate scores, renormalizes them over the selected set and mixes the selected
experts' outputs with those weights.  The forward pass returns a full
:class:`RoutingTrace`.
"""

from __future__ import annotations

import copy
import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from moelab import tensor_core as tc
from moelab.autodiff import Tensor, scatter_pieces, silu_ffn
from moelab.errors import InvalidArgumentError, InvalidInputError, NumericalError
from moelab.optim import Adam

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    d_model: int
    d_ff: int
    n_layers: int
    n_experts: int
    top_k: int
    seed: int = 0

    def __post_init__(self):
        for name in ("vocab_size", "d_model", "d_ff", "n_layers", "n_experts", "top_k"):
            value = getattr(self, name)
            if not isinstance(value, (int, np.integer)) or value < 1:
                raise InvalidArgumentError(f"{name} must be a positive integer, got {value!r}")
        if not self.top_k < self.n_experts:
            raise InvalidArgumentError(
                f"top_k={self.top_k} must be smaller than n_experts={self.n_experts}"
            )

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> ModelConfig:
        fields = ("vocab_size", "d_model", "d_ff", "n_layers", "n_experts", "top_k", "seed")
        unknown = set(d) - set(fields)
        if unknown:
            raise InvalidArgumentError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**{k: int(v) for k, v in d.items()})


@dataclass
class Expert:
    w_in: np.ndarray   # d_ff x d_model
    w_out: np.ndarray  # d_model x d_ff

    def __call__(self, x: np.ndarray) -> np.ndarray:
        """Apply to one vector or to a stack of row vectors."""
        return expert_apply(self.w_in, self.w_out, x)


@dataclass
class MoELayer:
    router: np.ndarray  # n_experts x d_model
    experts: list[Expert]

    @property
    def n_experts(self) -> int:
        return len(self.experts)


@dataclass
class MoEModel:
    config: ModelConfig
    embedding: np.ndarray    # vocab x d_model
    layers: list[MoELayer]
    output_head: np.ndarray  # vocab x d_model

    def copy(self) -> MoEModel:
        return copy.deepcopy(self)

    @property
    def expert_counts(self) -> list[int]:
        return [layer.n_experts for layer in self.layers]

    def layer_top_k(self, index: int) -> int:
        return min(self.config.top_k, self.layers[index].n_experts)

    def parameters(self) -> dict[str, np.ndarray]:
        """Every parameter array keyed by its checkpoint name (views, not copies)."""
        params = {"embedding": self.embedding}
        for li, layer in enumerate(self.layers):
            params[f"layers.{li}.router"] = layer.router
            for ei, ex in enumerate(layer.experts):
                params[f"layers.{li}.experts.{ei}.w_in"] = ex.w_in
                params[f"layers.{li}.experts.{ei}.w_out"] = ex.w_out
        params["output_head"] = self.output_head
        return params

    def router_names(self) -> list[str]:
        return [f"layers.{li}.router" for li in range(len(self.layers))]


def is_router_param(name: str) -> bool:
    return name.startswith("layers.") and name.endswith(".router")


def expert_apply(w_in: np.ndarray, w_out: np.ndarray, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    pre = x @ w_in.T
    sig = 1.0 / (1.0 + np.exp(-pre))
    return (pre * sig) @ w_out.T


@dataclass
class TokenBatch:
    """A set of token sequences with their 0/1 loss masks."""

    sequences: list[np.ndarray]
    masks: list[np.ndarray] = field(default=None)

    def __post_init__(self):
        self.sequences = [np.asarray(s, dtype=np.int64) for s in self.sequences]
        if self.masks is None:
            self.masks = [np.ones(len(s), dtype=np.int64) for s in self.sequences]
        else:
            self.masks = [np.asarray(m, dtype=np.int64) for m in self.masks]
        if len(self.masks) != len(self.sequences):
            raise InvalidInputError("one mask per sequence is required")
        for s, m in zip(self.sequences, self.masks):
            if s.ndim != 1 or m.shape != s.shape:
                raise InvalidInputError("mask length must equal sequence length")
            if not np.all((m == 0) | (m == 1)):
                raise InvalidInputError("masks must be binary")

    def __len__(self) -> int:
        return len(self.sequences)

    def subset(self, indices) -> TokenBatch:
        return TokenBatch([self.sequences[i] for i in indices], [self.masks[i] for i in indices])

    def truncated(self, max_len: int) -> TokenBatch:
        return TokenBatch([s[:max_len] for s in self.sequences], [m[:max_len] for m in self.masks])

    @property
    def n_tokens(self) -> int:
        return int(sum(len(s) for s in self.sequences))

    def offsets(self) -> np.ndarray:
        return np.concatenate([[0], np.cumsum([len(s) for s in self.sequences])]).astype(np.int64)

    def flat_tokens(self) -> np.ndarray:
        if not self.sequences:
            return np.zeros(0, dtype=np.int64)
        return np.concatenate(self.sequences)

    def next_token_targets(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """``(positions, targets, weights)`` over the flattened batch.

        Position ``t`` of a sequence predicts token ``t+1``, weighted by the
        mask at ``t+1``; the last position of every sequence has no target.
        """
        pos, tgt, wts = [], [], []
        for off, s, m in zip(self.offsets()[:-1], self.sequences, self.masks):
            n = len(s)
            if n < 2:
                continue
            pos.append(off + np.arange(n - 1))
            tgt.append(s[1:])
            wts.append(m[1:].astype(np.float64))
        if not pos:
            return np.zeros(0, np.int64), np.zeros(0, np.int64), np.zeros(0)
        return np.concatenate(pos), np.concatenate(tgt), np.concatenate(wts)


@dataclass
class LayerTrace:
    """Routing record of one layer over ``n`` tokens.

    ``scores`` holds post-softmax gate probabilities (n x experts),
    ``selected`` the ascending top-k indices (n x k) and ``weights`` the
    renormalized gates of the selected experts (n x k).  ``inputs`` and
    ``moe_out`` (the expert mixture before the residual add) are kept when
    the forward pass was asked to record them.
    """

    scores: np.ndarray
    selected: np.ndarray
    weights: np.ndarray
    inputs: np.ndarray | None = None
    moe_out: np.ndarray | None = None

    @property
    def n_tokens(self) -> int:
        return self.scores.shape[0]

    def entry(self, t: int) -> LayerTrace:
        """The single-token slice at position ``t``."""
        return LayerTrace(
            self.scores[t:t + 1], self.selected[t:t + 1], self.weights[t:t + 1],
            None if self.inputs is None else self.inputs[t:t + 1],
            None if self.moe_out is None else self.moe_out[t:t + 1],
        )


@dataclass
class RoutingTrace:
    layers: list[LayerTrace]

    @property
    def n_tokens(self) -> int:
        return self.layers[0].n_tokens if self.layers else 0


@dataclass
class ForwardResult:
    logits: np.ndarray  # total_tokens x vocab
    trace: RoutingTrace
    offsets: np.ndarray

    def sequence_logits(self, i: int) -> np.ndarray:
        return self.logits[self.offsets[i]:self.offsets[i + 1]]


# --------------------------------------------------------------------------
# initialization


def init_model(config: ModelConfig) -> MoEModel:
    if not isinstance(config, ModelConfig):
        raise InvalidArgumentError("init_model expects a ModelConfig")
    rng = np.random.default_rng(config.seed)
    d, f = config.d_model, config.d_ff

    def uniform(shape, fan_in):
        bound = 1.0 / math.sqrt(fan_in)
        return rng.uniform(-bound, bound, size=shape)

    embedding = uniform((config.vocab_size, d), d)
    layers = []
    for _ in range(config.n_layers):
        router = uniform((config.n_experts, d), d)
        experts = [Expert(uniform((f, d), d), uniform((d, f), f)) for _ in range(config.n_experts)]
        layers.append(MoELayer(router, experts))
    head = uniform((config.vocab_size, d), d)
    return MoEModel(config, embedding, layers, head)


# --------------------------------------------------------------------------
# forward


def _route(scores: np.ndarray, k: int) -> tuple[np.ndarray, np.ndarray]:
    selected = tc.top_k(scores, k)
    picked = np.take_along_axis(scores, selected, axis=1)
    return selected, picked / picked.sum(axis=1, keepdims=True)


def _layer_forward_t(h: Tensor, router: Tensor, experts: list[tuple[Tensor, Tensor]], k: int):
    """Differentiable block evaluation; returns (moe_out, scores, selected, weights).

    The top-k selection is computed from the forward values and treated as a
    constant; gradients reach the router only through the renormalized gates
    of the selected experts.
    """
    n = h.shape[0]
    probs = (h @ router.T).softmax()
    selected = tc.top_k(probs.data, k)
    rows = np.arange(n)[:, None]
    picked = probs[rows, selected]
    gates = picked / picked.sum(axis=1, keepdims=True)
    pieces, order = [], []
    for e, (w_in, w_out) in enumerate(experts):
        tok, slot = np.nonzero(selected == e)
        if tok.size == 0:
            continue
        gate = gates.take((tok, slot), unique=True).reshape(-1, 1)
        pieces.append(silu_ffn(h.take(tok, unique=True), w_in, w_out) * gate)
        order.append(tok)
    out = scatter_pieces(n, order, pieces, h.shape[1])
    return out, probs.data, selected, gates.data


def _as_params(model: MoEModel, track: set[str] | None = None) -> dict[str, Tensor]:
    track = track or set()
    return {
        name: Tensor(arr, requires_grad=name in track, name=name)
        for name, arr in model.parameters().items()
    }


def forward_tensors(model: MoEModel, tokens: np.ndarray, params: dict[str, Tensor],
                    record: bool = False) -> tuple[Tensor, RoutingTrace]:
    """Logits (as a graph node) and routing trace for a flat token array."""
    tokens = np.asarray(tokens, dtype=np.int64)
    vocab = model.config.vocab_size
    if tokens.size and (tokens.min() < 0 or tokens.max() >= vocab):
        raise InvalidInputError(f"token id out of range for vocabulary of {vocab}")
    h = params["embedding"][tokens]
    layers = []
    for li, layer in enumerate(model.layers):
        experts = [
            (params[f"layers.{li}.experts.{ei}.w_in"], params[f"layers.{li}.experts.{ei}.w_out"])
            for ei in range(layer.n_experts)
        ]
        moe_out, scores, selected, weights = _layer_forward_t(
            h, params[f"layers.{li}.router"], experts, model.layer_top_k(li)
        )
        layers.append(LayerTrace(
            scores, selected, weights,
            inputs=h.data.copy() if record else None,
            moe_out=moe_out.data.copy() if record else None,
        ))
        h = h + moe_out
    logits = h @ params["output_head"].T
    return logits, RoutingTrace(layers)


def forward(model: MoEModel, batch: TokenBatch, record: bool = False) -> ForwardResult:
    """Inference forward over every position of every sequence in ``batch``."""
    logits, trace = forward_tensors(model, batch.flat_tokens(), _as_params(model), record)
    return ForwardResult(logits.data, trace, batch.offsets())


def layer_forward(layer: MoELayer, x: np.ndarray, top_k: int) -> tuple[np.ndarray, LayerTrace]:
    """Evaluate one block on rows ``x``; returns the pre-residual mixture and its trace."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    if x.shape[1] != layer.router.shape[1]:
        raise InvalidArgumentError(
            f"input width {x.shape[1]} does not match d_model={layer.router.shape[1]}"
        )
    k = min(top_k, layer.n_experts)
    scores = tc.softmax(x @ layer.router.T)
    selected, weights = _route(scores, k)
    out = np.zeros_like(x)
    for e, ex in enumerate(layer.experts):
        tok, slot = np.nonzero(selected == e)
        if tok.size:
            out[tok] += weights[tok, slot][:, None] * ex(x[tok])
    return out, LayerTrace(scores, selected, weights, x.copy(), out.copy())


def moe_layer_forward(layer: MoELayer, x: np.ndarray, top_k: int) -> tuple[np.ndarray, LayerTrace]:
    """Single-token block output ``x + sum_S g~_i E_i(x)`` and its trace entry."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise InvalidArgumentError("moe_layer_forward expects a single vector")
    out, entry = layer_forward(layer, x, top_k)
    return x + out[0], entry


# --------------------------------------------------------------------------
# losses and gradients


def cross_entropy_loss(logits: Tensor, batch: TokenBatch, eps: float = 1e-8) -> Tensor:
    """Masked mean next-token cross-entropy over a flattened batch."""
    pos, tgt, wts = batch.next_token_targets()
    if pos.size == 0:
        return Tensor(0.0)
    logp = logits.log_softmax()
    picked = logp[pos, tgt]
    return -(picked * wts).sum() / (wts.sum() + eps)


def cross_entropy_grad(model: MoEModel, batch: TokenBatch) -> tuple[float, dict[str, np.ndarray]]:
    params = _as_params(model, set(model.parameters()))
    logits, _ = forward_tensors(model, batch.flat_tokens(), params)
    loss = cross_entropy_loss(logits, batch)
    loss.backward()
    grads = {n: (p.grad if p.grad is not None else np.zeros_like(p.data)) for n, p in params.items()}
    return float(loss.data), grads


def train_teacher(model: MoEModel, corpus: TokenBatch, steps: int, lr: float = 1e-2,
                  batch_size: int = 8, seed: int | None = None,
                  history: list | None = None) -> MoEModel:
    """Full-parameter next-token training with Adam; the input model is not modified.

    Minibatches are drawn with a generator seeded from ``seed`` (default: the
    model config seed).  Per-step losses are appended to ``history`` if given.
    """
    if len(corpus) == 0:
        raise InvalidArgumentError("training corpus is empty")
    if steps < 0:
        raise InvalidArgumentError("steps must be non-negative")
    trained = model.copy()
    if steps == 0:
        return trained
    rng = np.random.default_rng(model.config.seed if seed is None else seed)
    params = trained.parameters()
    opt = Adam(list(params), lr)
    bs = min(batch_size, len(corpus))
    for step in range(steps):
        idx = np.sort(rng.choice(len(corpus), size=bs, replace=False))
        loss, grads = cross_entropy_grad(trained, corpus.subset(idx))
        if not math.isfinite(loss):
            raise NumericalError(f"teacher training diverged at step {step} (loss={loss})")
        opt.step(params, grads)
        if history is not None:
            history.append(loss)
        if step % 100 == 0:
            log.debug("teacher step %d loss %.6f", step, loss)
    return trained
