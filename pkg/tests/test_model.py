import math

import numpy as np
import pytest

from moelab import tensor_core as tc
from moelab.autodiff import Tensor
from moelab.data import CorpusConfig, generate_corpus
from moelab.errors import InvalidArgumentError, InvalidInputError
from moelab.model import (
    Expert, ModelConfig, MoELayer, TokenBatch, cross_entropy_loss, forward, forward_tensors,
    _as_params, init_model, layer_forward, moe_layer_forward, train_teacher,
)


def params_equal(a, b):
    pa, pb = a.parameters(), b.parameters()
    return pa.keys() == pb.keys() and all(np.array_equal(pa[k], pb[k]) for k in pa)


def silu(v):
    return v / (1.0 + math.exp(-v))


def straight_line_expert(w_in, w_out, x):
    hidden = [silu(sum(w_in[j][i] * x[i] for i in range(len(x)))) for j in range(len(w_in))]
    return [sum(w_out[o][j] * hidden[j] for j in range(len(hidden))) for o in range(len(w_out))]


def straight_line_logits(model, token):
    """Scalar re-implementation: lists and loops only."""
    h = list(model.embedding[token])
    for layer in model.layers:
        z = [sum(r * v for r, v in zip(row, h)) for row in layer.router.tolist()]
        m = max(z)
        e = [math.exp(v - m) for v in z]
        g = [v / sum(e) for v in e]
        k = min(model.config.top_k, len(g))
        sel = sorted(sorted(range(len(g)), key=lambda i: (-g[i], i))[:k])
        denom = sum(g[i] for i in sel)
        out = [0.0] * len(h)
        for i in sel:
            ex = layer.experts[i]
            y = straight_line_expert(ex.w_in.tolist(), ex.w_out.tolist(), h)
            out = [o + g[i] / denom * v for o, v in zip(out, y)]
        h = [a + b for a, b in zip(h, out)]
    return [sum(w * v for w, v in zip(row, h)) for row in model.output_head.tolist()]


def test_init_deterministic(small_config):
    assert params_equal(init_model(small_config), init_model(small_config))


def test_init_seed_matters(small_config):
    other = ModelConfig(**{**small_config.to_dict(), "seed": small_config.seed + 1})
    assert not params_equal(init_model(small_config), init_model(other))


def test_init_uniform_bounds(small_model, small_config):
    bound = 1 / math.sqrt(small_config.d_model)
    assert np.abs(small_model.layers[0].router).max() <= bound
    assert np.abs(small_model.layers[0].experts[0].w_out).max() <= 1 / math.sqrt(small_config.d_ff)


@pytest.mark.parametrize("k,e", [(2, 2), (3, 2), (0, 4)])
def test_config_rejects_bad_top_k(k, e):
    with pytest.raises(InvalidArgumentError):
        ModelConfig(vocab_size=4, d_model=2, d_ff=2, n_layers=1, n_experts=e, top_k=k)


def test_identical_experts_ignore_gates(rng):
    ex = Expert(rng.normal(size=(5, 4)), rng.normal(size=(4, 5)))
    layer = MoELayer(rng.normal(size=(2, 4)), [ex, Expert(ex.w_in.copy(), ex.w_out.copy())])
    x = rng.normal(size=4)
    y, entry = moe_layer_forward(layer, x, 2)
    np.testing.assert_allclose(y, x + ex(x), atol=1e-14)
    assert entry.selected.tolist() == [[0, 1]]


def test_top1_uses_argmax_expert(rng):
    layer = MoELayer(rng.normal(size=(4, 6)),
                     [Expert(rng.normal(size=(3, 6)), rng.normal(size=(6, 3))) for _ in range(4)])
    x = rng.normal(size=6)
    y, entry = moe_layer_forward(layer, x, 1)
    best = int(np.argmax(layer.router @ x))
    np.testing.assert_allclose(y, x + layer.experts[best](x), atol=1e-14)
    assert entry.weights[0, 0] == 1.0


def dense_masked_layer(layer, X, k):
    """All experts on all tokens, non-selected ones multiplied by zero."""
    outs = np.stack([ex(X) for ex in layer.experts], axis=1)       # n x E x d
    g = tc.softmax(X @ layer.router.T)
    mask = np.zeros_like(g)
    for t in range(len(X)):
        order = sorted(range(g.shape[1]), key=lambda i: (-g[t, i], i))[:k]
        mask[t, order] = 1.0
    gt = g * mask / (g * mask).sum(axis=1, keepdims=True)
    return (gt[:, :, None] * outs).sum(axis=1)


def test_sparse_matches_dense_masked(rng):
    for seed in range(5):
        model = init_model(ModelConfig(vocab_size=5, d_model=6, d_ff=7, n_layers=1,
                                       n_experts=8, top_k=2, seed=seed))
        X = rng.normal(size=(40, 6))
        out, _ = layer_forward(model.layers[0], X, 2)
        np.testing.assert_allclose(out, dense_masked_layer(model.layers[0], X, 2), atol=1e-10)


def test_layer_dimension_mismatch(small_model):
    with pytest.raises(InvalidArgumentError):
        moe_layer_forward(small_model.layers[0], np.zeros(3), 2)


def test_forward_shapes_and_determinism(small_model):
    res = forward(small_model, TokenBatch([[3]]))
    assert res.logits.shape == (1, small_model.config.vocab_size)
    batch = TokenBatch([[1, 2, 3], [4, 5]])
    a, b = forward(small_model, batch, record=True), forward(small_model, batch, record=True)
    assert np.array_equal(a.logits, b.logits)
    for la, lb in zip(a.trace.layers, b.trace.layers):
        assert np.array_equal(la.scores, lb.scores) and np.array_equal(la.selected, lb.selected)
    assert a.sequence_logits(1).shape == (2, small_model.config.vocab_size)


def test_forward_matches_straight_line_oracle():
    model = init_model(ModelConfig(vocab_size=10, d_model=8, d_ff=6, n_layers=2,
                                   n_experts=4, top_k=2, seed=11))
    tokens = [0, 3, 9, 4, 4, 7]
    res = forward(model, TokenBatch([tokens]))
    for t, tok in enumerate(tokens):
        np.testing.assert_allclose(res.logits[t], straight_line_logits(model, tok), atol=1e-12)


def test_forward_rejects_bad_tokens(small_model):
    with pytest.raises(InvalidInputError):
        forward(small_model, TokenBatch([[0, 16]]))
    with pytest.raises(InvalidInputError):
        forward(small_model, TokenBatch([[-1]]))


def test_gate_identity_on_trace(small_model, small_corpus):
    trace = forward(small_model, small_corpus).trace
    for lt in trace.layers:
        assert lt.selected.shape[1] == small_model.config.top_k
        np.testing.assert_allclose(lt.weights.sum(axis=1), 1.0, atol=1e-9)


def test_recorded_moe_out_is_pre_residual(small_model, small_corpus):
    trace = forward(small_model, small_corpus, record=True).trace
    l0, l1 = trace.layers
    np.testing.assert_allclose(l1.inputs, l0.inputs + l0.moe_out, atol=1e-15)


def test_pruned_layer_shapes(small_model, small_corpus):
    m = small_model.copy()
    keep = [0, 2, 5, 7, 3]
    m.layers[1] = MoELayer(m.layers[1].router[keep], [m.layers[1].experts[i] for i in keep])
    trace = forward(m, small_corpus).trace
    assert trace.layers[1].scores.shape[1] == 5
    assert trace.layers[0].scores.shape[1] == 8


def test_cross_entropy_masks_targets():
    model = init_model(ModelConfig(vocab_size=6, d_model=4, d_ff=4, n_layers=1,
                                   n_experts=3, top_k=1, seed=0))
    full = TokenBatch([[1, 2, 3, 4]], [[1, 1, 1, 0]])
    short = TokenBatch([[1, 2, 3]])
    lf, _ = forward_tensors(model, full.flat_tokens(), _as_params(model))
    ls, _ = forward_tensors(model, short.flat_tokens(), _as_params(model))
    a = float(cross_entropy_loss(lf, full).data)
    b = float(cross_entropy_loss(ls, short).data)
    assert a == pytest.approx(b, rel=1e-7)


def test_train_zero_steps_is_identity(small_model, small_corpus):
    assert params_equal(train_teacher(small_model, small_corpus, 0), small_model)


def test_train_is_deterministic_and_leaves_input(small_model, small_corpus):
    before = small_model.copy()
    a = train_teacher(small_model, small_corpus, 5, lr=1e-2, seed=1)
    b = train_teacher(small_model, small_corpus, 5, lr=1e-2, seed=1)
    assert params_equal(a, b)
    assert params_equal(small_model, before)
    assert not params_equal(a, before)


def test_train_beats_uniform_baseline():
    vocab = 16
    corpus = generate_corpus(CorpusConfig(vocab_size=vocab, seq_len=24, n_sequences=200, seed=2))
    model = init_model(ModelConfig(vocab_size=vocab, d_model=16, d_ff=16, n_layers=2,
                                   n_experts=8, top_k=2, seed=2))
    history = []
    trained = train_teacher(model, corpus, 500, lr=1e-2, history=history)
    logits, _ = forward_tensors(trained, corpus.flat_tokens(), _as_params(trained))
    final = float(cross_entropy_loss(logits, corpus).data)
    assert final < math.log(vocab)
    assert np.mean(history[-50:]) < np.mean(history[:50])


def test_train_rejects_empty_corpus(small_model):
    with pytest.raises(InvalidArgumentError):
        train_teacher(small_model, TokenBatch([]), 1)


def test_tensor_and_plain_paths_agree(small_model, small_corpus):
    logits, _ = forward_tensors(small_model, small_corpus.flat_tokens(),
                                _as_params(small_model, {"output_head"}))
    assert isinstance(logits, Tensor) and logits.requires_grad
    np.testing.assert_array_equal(logits.data, forward(small_model, small_corpus).logits)
