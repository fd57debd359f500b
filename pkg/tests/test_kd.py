import math

import mpmath
import numpy as np
import pytest

from moelab.autodiff import Tensor
from moelab.compression import prune_experts
from moelab.data import CorpusConfig, generate_corpus, split_corpus
from moelab.errors import InvalidArgumentError
from moelab.kd import (
    KDConfig, backward, batch_kd_loss, calibrate_router, count_router_fraction, kd_loss,
    router_grad_formula, write_loss_history,
)
from moelab.model import (
    ModelConfig, TokenBatch, forward, init_model, is_router_param, train_teacher,
)


def perturbed(model, scale=0.3, seed=0):
    rng = np.random.default_rng(seed)
    m = model.copy()
    for name, arr in m.parameters().items():
        arr += scale * rng.normal(size=arr.shape) * np.abs(arr).mean()
    return m


# loss ----------------------------------------------------------------------

def test_defaults():
    c = KDConfig()
    assert (c.temperature, c.learning_rate, c.epochs, c.batch_size, c.grad_accum,
            c.max_seq_len, c.max_samples) == (1.0, 5e-5, 1, 2, 4, 512, 3000)


@pytest.mark.parametrize("kwargs", [dict(temperature=0), dict(learning_rate=-1), dict(epochs=0),
                                    dict(grad_accum=0), dict(optimizer="lion")])
def test_config_validation(kwargs):
    with pytest.raises(InvalidArgumentError):
        KDConfig(**kwargs)


def test_identical_logits_give_zero(rng):
    z = rng.normal(size=(5, 7))
    assert kd_loss(z, z, np.ones(5)) == 0.0


def test_zero_mask_gives_zero(rng):
    assert kd_loss(rng.normal(size=(4, 3)), rng.normal(size=(4, 3)), np.zeros(4)) == 0.0


def test_loss_matches_mpmath_oracle():
    zt = np.array([[1.0, -0.5, 2.0, 0.1], [0.0, 0.3, -1.2, 0.7], [2.5, 2.4, -3.0, 0.0]])
    zs = np.array([[0.2, 0.1, 1.1, -0.4], [1.0, -1.0, 0.0, 0.5], [0.0, 0.0, 0.0, 0.0]])
    mask = [1, 1, 0]
    tau, eps = 2.0, 1e-8
    mpmath.mp.dps = 40

    def sm(row):
        e = [mpmath.e ** (mpmath.mpf(v) / tau) for v in row]
        return [v / sum(e) for v in e]

    total = mpmath.mpf(0)
    for t in range(2):
        if mask[t + 1]:
            p, q = sm(zt[t]), sm(zs[t])
            total += sum(pi * mpmath.log(pi / qi) for pi, qi in zip(p, q))
    want = tau ** 2 * total / (sum(mask[1:]) + mpmath.mpf(eps))
    assert kd_loss(zt, zs, mask, tau, eps) == pytest.approx(float(want), rel=1e-12)


def test_batch_loss_is_mean_of_sequence_losses(small_model, small_corpus):
    student = perturbed(small_model)
    batch = small_corpus.subset(range(5))
    zt, zs = forward(small_model, batch), forward(student, batch)
    per_seq = [kd_loss(zt.sequence_logits(i), zs.sequence_logits(i), batch.masks[i], 1.5)
               for i in range(5)]
    assert batch_kd_loss(small_model, student, batch, 1.5) == pytest.approx(np.mean(per_seq), rel=1e-12)


def test_shape_mismatch(rng):
    with pytest.raises(InvalidArgumentError):
        kd_loss(rng.normal(size=(3, 4)), rng.normal(size=(3, 5)), np.ones(3))


# gradients -----------------------------------------------------------------

def test_gradients_match_finite_differences(small_model, small_corpus):
    student = perturbed(small_model)
    batch = small_corpus.subset([0, 3])
    zt = forward(small_model, batch).logits
    _, grads = backward(student, batch, zt, tau=1.3)
    params = student.parameters()
    rng = np.random.default_rng(0)
    h = 1e-5
    for name in ("layers.0.router", "layers.1.router", "layers.1.experts.2.w_in",
                 "layers.0.experts.5.w_out", "embedding", "output_head"):
        for _ in range(3):
            idx = tuple(rng.integers(0, s) for s in params[name].shape)
            old = params[name][idx]
            params[name][idx] = old + h
            up = batch_kd_loss(small_model, student, batch, 1.3)
            params[name][idx] = old - h
            down = batch_kd_loss(small_model, student, batch, 1.3)
            params[name][idx] = old
            fd = (up - down) / (2 * h)
            assert grads[name][idx] == pytest.approx(fd, rel=1e-4, abs=1e-9), name


def test_router_only_gradients(small_model, small_corpus):
    batch = small_corpus.subset([1])
    zt = forward(small_model, batch).logits
    _, grads = backward(perturbed(small_model), batch, zt, params={"layers.0.router"})
    assert set(grads) == {"layers.0.router"}


def test_router_formula_examples():
    grad, outer = router_grad_formula([0.5, 0.5], [0.75, 0.25], [2.0, -1.0], tau=0.5)
    np.testing.assert_allclose(grad, [0.5, -0.5])
    np.testing.assert_allclose(outer, [[1.0, -0.5], [-1.0, 0.5]])
    with pytest.raises(InvalidArgumentError):
        router_grad_formula([1.0], [0.5, 0.5], [1.0])


def test_router_formula_matches_autodiff(rng):
    for tau in (0.5, 1.0, 3.0):
        W = Tensor(rng.normal(size=(6, 4)), requires_grad=True)
        x = rng.normal(size=4)
        p = np.exp(rng.normal(size=6))
        p /= p.sum()
        z = W @ x
        loss = (p * (np.log(p) - (z * (1.0 / tau)).log_softmax())).sum()
        loss.backward()
        g_s = np.exp(z.data / tau) / np.exp(z.data / tau).sum()
        _, outer = router_grad_formula(p, g_s, x, tau)
        np.testing.assert_allclose(W.grad, outer, atol=1e-10)


# calibration ---------------------------------------------------------------

def test_self_calibration_is_stationary(small_model, small_corpus):
    cal, hist = calibrate_router(small_model, small_model, small_corpus, KDConfig(learning_rate=1e-2))
    assert max(h["kd_loss"] for h in hist) < 1e-12
    for name, arr in small_model.parameters().items():
        np.testing.assert_allclose(cal.parameters()[name], arr, atol=1e-12)


def test_only_routers_change(small_model, small_corpus):
    student, _ = prune_experts(small_model, 0.5, small_corpus)
    before = student.copy()
    cal, hist = calibrate_router(small_model, student, small_corpus, KDConfig(learning_rate=1e-2))
    assert len(hist) == math.ceil(math.ceil(24 / 2) / 4)
    changed = False
    for name, arr in cal.parameters().items():
        if is_router_param(name):
            changed |= not np.array_equal(arr, before.parameters()[name])
        else:
            assert arr.tobytes() == before.parameters()[name].tobytes(), name
    assert changed
    assert all(np.array_equal(a, b) for a, b in zip(student.parameters().values(),
                                                     before.parameters().values()))


def test_accumulation_matches_big_batch(small_model, small_corpus):
    student = perturbed(small_model)
    data = small_corpus.subset(range(16))
    common = dict(learning_rate=0.1, optimizer="sgd", shuffle=False)
    a, _ = calibrate_router(small_model, student, data, KDConfig(batch_size=2, grad_accum=4, **common))
    b, _ = calibrate_router(small_model, student, data, KDConfig(batch_size=8, grad_accum=1, **common))
    for name, arr in a.parameters().items():
        np.testing.assert_allclose(arr, b.parameters()[name], atol=1e-9)


def test_calibration_reduces_loss():
    corpus = generate_corpus(CorpusConfig(vocab_size=16, seq_len=16, n_sequences=64, seed=5))
    teacher = train_teacher(init_model(ModelConfig(vocab_size=16, d_model=8, d_ff=12, n_layers=2,
                                                   n_experts=8, top_k=2, seed=3)),
                            corpus, 200, lr=1e-2, seed=0)
    calib, held = split_corpus(corpus, 0.5)
    student, _ = prune_experts(teacher, 0.5, calib)
    before = batch_kd_loss(teacher, student, held)
    cal, _ = calibrate_router(teacher, student, calib, KDConfig(learning_rate=1e-2, epochs=10))
    assert batch_kd_loss(teacher, cal, held) < 0.9 * before


def test_calibration_is_deterministic(small_model, small_corpus, tmp_path):
    student = perturbed(small_model)
    cfg = KDConfig(learning_rate=1e-3, seed=4)
    a, ha = calibrate_router(small_model, student, small_corpus, cfg, log_path=tmp_path / "a.jsonl")
    b, hb = calibrate_router(small_model, student, small_corpus, cfg)
    assert ha == hb
    write_loss_history(hb, tmp_path / "b.jsonl")
    assert (tmp_path / "a.jsonl").read_bytes() == (tmp_path / "b.jsonl").read_bytes()


def test_sample_cap_and_truncation(small_model, small_corpus):
    _, hist = calibrate_router(small_model, small_model, small_corpus,
                               KDConfig(max_samples=6, max_seq_len=4))
    assert len(hist) == 1


def test_vocab_mismatch(small_model, small_corpus):
    other = init_model(ModelConfig(vocab_size=20, d_model=8, d_ff=12, n_layers=2,
                                   n_experts=8, top_k=2))
    with pytest.raises(InvalidArgumentError):
        calibrate_router(small_model, other, small_corpus)


def test_empty_corpus(small_model):
    with pytest.raises(InvalidArgumentError):
        calibrate_router(small_model, small_model, TokenBatch([]))


# router fraction -------------------------------------------------------------

def test_router_fraction_enumeration(small_model, small_config):
    c = small_config
    router = c.n_layers * c.n_experts * c.d_model
    total = (2 * c.vocab_size * c.d_model + router
             + c.n_layers * c.n_experts * 2 * c.d_model * c.d_ff)
    assert count_router_fraction(small_model) == pytest.approx(router / total)


def test_router_fraction_grows_with_experts_per_parameter():
    fr = [count_router_fraction(init_model(ModelConfig(vocab_size=8, d_model=8, d_ff=f, n_layers=1,
                                                       n_experts=4, top_k=1))) for f in (64, 16, 4)]
    assert fr[0] < fr[1] < fr[2] < 1
