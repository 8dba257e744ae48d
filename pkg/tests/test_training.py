import math
from dataclasses import replace

import numpy as np
import pytest

from groupformer import layers
from groupformer.dialogue import CROSS_MODAL_TASKS, make_task, render_dialogue
from groupformer.model import GroupFormer, backward_batch, collate, forward_batch
from groupformer.training import (
    AdamState,
    TrainConfig,
    backward,
    clip_grads,
    cosine_lr,
    evaluate_loss,
    grad_check,
    loss_group,
    loss_llm,
    losses_and_grads,
    train_step,
)

from conftest import quad, tiny_config


@pytest.fixture(scope="module")
def mixed_batch(small_lexicon, vocab):
    q = quad("hi there", "hello you", small_lexicon)
    return collate([render_dialogue([make_task(q, k)], 5, vocab) for k in CROSS_MODAL_TASKS], vocab.pad_id, 5)


@pytest.fixture(scope="module")
def text_batch(small_lexicon, vocab):
    q = quad("where?", "here.", small_lexicon)
    return collate([render_dialogue([make_task(q, "IT->RT")], 5, vocab)], vocab.pad_id, 5)


def gc_model(**kw):
    # larger init keeps every gradient well above finite-difference roundoff
    return GroupFormer(tiny_config(dtype="float64", init_std=0.2, max_len=128, **kw))


def test_loss_llm_uniform_is_log_n():
    N = 81
    tokens = np.arange(6) % N
    mask = np.array([0, 1, 1, 0, 1, 1], bool)
    assert loss_llm(np.zeros((6, N)), tokens, mask) == pytest.approx(math.log(N), rel=1e-12)


@pytest.mark.parametrize("N", [5, 81])
def test_loss_llm_margin_and_empty(N):
    tokens = np.array([3, 1, 4, 1, 0])
    logits = np.zeros((5, N))
    logits[np.arange(4), tokens[1:]] = 20.0
    loss = loss_llm(logits, tokens, np.ones(5, bool))
    assert loss == pytest.approx(math.log1p((N - 1) * math.exp(-20.0)), rel=1e-9)
    if N <= 5:
        assert loss < 1e-8
    assert loss_llm(logits, tokens, np.zeros(5, bool)) == 0.0


def test_loss_group_examples():
    assert loss_group(np.zeros((3, 5, 500)), np.zeros((3, 5), int), np.ones(3, bool)) == pytest.approx(math.log(500))
    logits = np.full((1, 5, 50), -30.0)
    tgt = np.array([[1, 2, 3, 4, 5]])
    logits[0, np.arange(5), tgt[0]] = 30.0
    assert loss_group(logits, tgt, np.ones(1, bool)) < 1e-12
    assert loss_group(np.zeros((0, 5, 50)), np.zeros((0, 5), int), np.zeros(0, bool)) == 0.0


def test_masked_out_targets_do_not_matter(rng):
    N, T = 20, 12
    logits = rng.normal(size=(T, N))
    tokens = rng.integers(0, N, T)
    mask = rng.random(T) < 0.5
    base = loss_llm(logits, tokens, mask)
    t2 = tokens.copy()
    t2[~mask] = (t2[~mask] + 7) % N
    assert loss_llm(logits, t2, mask) == base
    gl = rng.normal(size=(4, 5, 30))
    units = rng.integers(0, 30, (4, 5))
    gm = np.array([True, False, True, False])
    u2 = units.copy()
    u2[~gm] = (u2[~gm] + 3) % 30
    assert loss_group(gl, u2, gm) == loss_group(gl, units, gm)


def test_total_is_sum(tiny_model, mixed_batch):
    lb = evaluate_loss(tiny_model, mixed_batch)
    assert lb.total == lb.loss_llm + lb.loss_group
    assert lb.n_group_slots == mixed_batch.n_slots


def test_unused_parameters_get_zero_gradient(tiny_model, text_batch):
    _, grads = backward(tiny_model, text_batch)
    for name in ("unit_emb", "adaptor.w1", "adaptor.b2", "gm.queries", "unit_head"):
        assert not grads[name].any(), name
    assert grads["text_head"].any()


def test_gradient_is_linear_in_loss_scale(tiny_model, mixed_batch):
    out, cache = forward_batch(tiny_model.astype(np.float64), mixed_batch, keep_cache=True)
    m64 = tiny_model.astype(np.float64)
    _, dt, dg = losses_and_grads(out, mixed_batch)
    g1 = backward_batch(m64, cache, dt, dg)
    g2 = backward_batch(m64, cache, 2 * dt, 2 * dg)
    for k in g1:
        np.testing.assert_allclose(g2[k], 2 * g1[k], rtol=1e-12, atol=0)


@pytest.mark.parametrize("which", ["text", "mixed"])
def test_grad_check_passes(which, mixed_batch, text_batch):
    batch = mixed_batch if which == "mixed" else text_batch
    assert grad_check(gc_model(), batch, eps=1e-5, n_entries=6) < 1e-4


def test_grad_check_requires_float64(tiny_model, text_batch):
    with pytest.raises(TypeError):
        grad_check(tiny_model, text_batch)


def test_grad_check_catches_broken_elu(monkeypatch, mixed_batch):
    m = gc_model()
    monkeypatch.setattr(layers, "elu_backward", lambda dy, x, alpha=1.0: dy)
    err, details = grad_check(m, mixed_batch, n_entries=10, return_details=True)
    assert err > 1e-2
    assert details["adaptor.w1"] > 1e-2


def test_grad_check_zero_loss_batch(mixed_batch):
    b = replace(mixed_batch, target_mask=np.zeros_like(mixed_batch.target_mask),
                group_mask=np.zeros_like(mixed_batch.group_mask))
    m = gc_model()
    lb, grads = backward(m, b)
    assert lb.total == 0.0
    assert all(not g.any() for g in grads.values())
    assert grad_check(m, b, n_entries=2) == 0.0


def test_schedule_endpoints():
    cfg = TrainConfig(peak_lr=1e-3, max_steps=1000)
    assert cfg.warmup == 30
    assert cosine_lr(0, cfg) == 0.0
    assert cosine_lr(30, cfg) == pytest.approx(1e-3)
    assert cosine_lr(1000, cfg) == pytest.approx(0.0, abs=1e-15)
    lrs = [cosine_lr(s, cfg) for s in range(30, 1001)]
    assert all(a >= b for a, b in zip(lrs, lrs[1:]))


def test_clip_grads():
    g = {"a": np.full(4, 3.0), "b": np.full(1, 4.0)}
    norm = clip_grads(g, 1.0)
    assert norm == pytest.approx(math.sqrt(52))
    assert math.sqrt(sum((v**2).sum() for v in g.values())) == pytest.approx(1.0)


def test_descent_on_repeated_batch(mixed_batch):
    m = GroupFormer(tiny_config(seed=0))
    cfg = TrainConfig(peak_lr=3e-3, max_steps=200, batch_size=4)
    state = AdamState()
    first = evaluate_loss(m, mixed_batch).total
    for _ in range(200):
        m, state, lb = train_step(m, mixed_batch, state, cfg)
    assert evaluate_loss(m, mixed_batch).total < 0.5 * first


def test_training_is_deterministic(mixed_batch):
    def run():
        m = GroupFormer(tiny_config(seed=5))
        state = AdamState()
        cfg = TrainConfig(max_steps=20)
        return [train_step(m, mixed_batch, state, cfg)[2].total for _ in range(20)]
    assert run() == run()


def test_non_finite_loss_aborts_before_update(mixed_batch):
    m = GroupFormer(tiny_config(seed=0))
    m.params["text_head"][0, 0] = np.nan
    before = {k: v.copy() for k, v in m.params.items()}
    with pytest.raises(FloatingPointError):
        train_step(m, mixed_batch, AdamState(), TrainConfig(max_steps=10))
    assert all(np.array_equal(before[k], v, equal_nan=True) for k, v in m.params.items())
