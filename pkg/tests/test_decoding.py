import json
import math

import numpy as np
import pytest
from scipy import stats

from groupformer.codec import reduce
from groupformer.decoding import (
    DecodeStep,
    DecodeTrace,
    LatencyModel,
    SamplingParams,
    decode_turn,
    decode_turn_reduce,
    emitted_groups,
    filtered_distribution,
    first_audio_latency,
    sample_token,
)
from groupformer.dialogue import Message, make_task, render_dialogue, render_messages
from groupformer.harness import Sample, decode_context, response_target
from groupformer.layers import softmax
from groupformer.model import GroupFormer, collate
from groupformer.training import AdamState, TrainConfig, train_step

from conftest import quad, tiny_config


def test_temperature_zero_is_argmax_and_skips_rng():
    rng = np.random.default_rng(0)
    before = rng.bit_generator.state
    assert sample_token([0.1, 3.0, 2.9], SamplingParams(temperature=0.0), rng) == 1
    assert rng.bit_generator.state == before


def test_top_k_one_is_argmax():
    rng = np.random.default_rng(0)
    logits = np.array([1.0, 1.5, 1.4, -2.0])
    assert all(sample_token(logits, SamplingParams(temperature=5.0, top_k=1), rng) == 1 for _ in range(50))


def test_dominant_logit():
    logits = np.zeros(81)
    logits[0] = 10.0
    p = filtered_distribution(logits, SamplingParams(0.7, 10, 0.8))
    assert p[0] > 0.999


def test_top_k_and_top_p_truncate():
    logits = np.log(np.array([0.5, 0.2, 0.15, 0.1, 0.05]))
    p = filtered_distribution(logits, SamplingParams(1.0, 2, 1.0))
    np.testing.assert_allclose(p, [5 / 7, 2 / 7, 0, 0, 0])
    p = filtered_distribution(logits, SamplingParams(1.0, 0, 0.8))
    # 0.5 + 0.2 < 0.8, so the third token is still needed
    np.testing.assert_allclose(p, np.array([0.5, 0.2, 0.15, 0, 0]) / 0.85)
    p = filtered_distribution(logits, SamplingParams(1.0, 0, 0.45))
    np.testing.assert_allclose(p, [1, 0, 0, 0, 0])


def test_ties_break_by_index():
    p = filtered_distribution(np.zeros(6), SamplingParams(1.0, 3, 1.0))
    np.testing.assert_allclose(p, [1 / 3] * 3 + [0] * 3)


def test_sampling_rejects_bad_logits():
    with pytest.raises(ValueError):
        sample_token([np.nan, 1.0], SamplingParams())
    with pytest.raises(ValueError):
        sample_token([-np.inf, -np.inf], SamplingParams())
    with pytest.raises(ValueError):
        SamplingParams(top_p=0.0)


def test_plain_temperature_sampling_matches_softmax():
    logits = np.array([1.0, 0.5, 0.0, -0.5, -1.0, 0.25])
    sp = SamplingParams(temperature=0.8, top_k=0, top_p=1.0)
    rng = np.random.default_rng(42)
    n = 100_000
    draws = np.array([sample_token(logits, sp, rng) for _ in range(n)])
    counts = np.bincount(draws, minlength=len(logits))
    expected = softmax(logits / 0.8) * n
    assert stats.chisquare(counts, expected).pvalue > 1e-3


def trace_of(group_sizes, step_ms=0.0):
    steps = [DecodeStep(i, 0, tuple(range(g)) if g else None, step_ms, 0.0) for i, g in enumerate(group_sizes)]
    return DecodeTrace(steps, "end_of_turn", 0.0, max(group_sizes))


def test_n_offset():
    assert LatencyModel(R=11).n_offset == 6
    assert LatencyModel(R=1).n_offset == 1
    with pytest.raises(ValueError):
        LatencyModel(R=0)


@pytest.mark.parametrize("G,steps", [(1, 6), (2, 3), (3, 2), (5, 2), (6, 1), (11, 1)])
def test_steps_to_first_audio(G, steps):
    lm = LatencyModel(R=11, mode="fixed", fixed_step_ms=10.0)
    rep = first_audio_latency(trace_of([G] * 20), lm)
    assert rep.steps_to_first_audio == steps == math.ceil(6 / G)
    assert rep.latency_ms == 10.0 * steps


def test_fixed_cost_ratio_is_three():
    lm = LatencyModel(R=11, mode="fixed", fixed_step_ms=10.0)
    g = first_audio_latency(trace_of([5] * 4), lm)
    u = first_audio_latency(trace_of([1] * 12), lm)
    assert (g.latency_ms, u.latency_ms) == (20.0, 60.0)
    assert u.latency_ms / g.latency_ms == 3.0


def test_latency_counts_text_steps_and_synth():
    lm = LatencyModel(R=11, mode="fixed", fixed_step_ms=10.0, fixed_prefill_ms=5.0, synth_fixed_ms=1.0, synth_ms_per_unit=0.5)
    rep = first_audio_latency(trace_of([0, 0, 5, 5]), lm)
    assert rep.steps_to_first_audio == 4
    assert rep.latency_ms == 5.0 + 40.0 + 1.0 + 3.0


def test_measured_mode_and_no_audio():
    tr = trace_of([5, 5], step_ms=2.5)
    tr.prefill_ms = 4.0
    assert first_audio_latency(tr, LatencyModel()).latency_ms == 4.0 + 5.0
    rep = first_audio_latency(trace_of([0, 0]), LatencyModel())
    assert rep.steps_to_first_audio is None and math.isinf(rep.latency_ms)
    assert rep.to_json()["latency_ms"] is None
    assert set(rep.to_json()) == {"n_offset", "steps_to_first_audio", "latency_ms", "mode"}


def context(vocab, lex, kind="SI->SR", G=5):
    q = quad("where is the cat?", "the cat is in the park.", lex)
    return render_messages([Message("user", make_task(q, kind).instruction)], vocab, G, add_generation_prompt=True)


def test_decode_is_deterministic(vocab, small_lexicon):
    m = GroupFormer(tiny_config(seed=1))
    ctx = context(vocab, small_lexicon)
    sp = SamplingParams(seed=9)
    a = decode_turn(m, ctx, vocab, sp, max_steps=40)
    b = decode_turn(m, ctx, vocab, sp, max_steps=40)
    assert a[0].same_emissions(b[0]) and a[1] == b[1] and a[2] == b[2]


def test_decode_step_limits_and_group_sizes(vocab, small_lexicon):
    m = GroupFormer(tiny_config(seed=1))
    ctx = context(vocab, small_lexicon)
    tr, units, toks = decode_turn(m, ctx, vocab, max_steps=1)
    assert len(tr.steps) == 1 and tr.stop_reason == "max_steps"
    assert toks[0] == vocab.sosp_id
    tr, units, toks = decode_turn(m, ctx, vocab, SamplingParams(temperature=2.0, top_k=0, top_p=1.0), max_steps=60)
    for s in tr.steps:
        assert (s.token == vocab.speech_id) == (s.units is not None)
        if s.units:
            assert len(s.units) == 5
    assert len(units) == 5 * sum(s.token == vocab.speech_id for s in tr.steps)
    assert units.duration_seconds == len(units) / 25.0
    assert vocab.pad_id not in toks


def test_text_response_never_opens_speech(vocab, small_lexicon):
    m = GroupFormer(tiny_config(seed=2))
    ctx = context(vocab, small_lexicon, "IT->RT")
    tr, units, toks = decode_turn(m, ctx, vocab, SamplingParams(temperature=3.0, top_k=0, top_p=1.0), max_steps=60, response="text")
    assert vocab.sosp_id not in toks and vocab.speech_id not in toks and len(units) == 0


def test_context_overflow(vocab, small_lexicon):
    ctx = context(vocab, small_lexicon)
    m = GroupFormer(tiny_config(seed=1, max_len=ctx.L + 4))
    tr, _, _ = decode_turn(m, ctx, vocab, SamplingParams(temperature=3.0, top_k=0, top_p=1.0), max_steps=50)
    assert tr.stop_reason in ("context_overflow", "end_of_turn", "eosp_then_end")
    assert len(tr.steps) <= 4


def test_reduce_decode(vocab, small_lexicon):
    m = GroupFormer(tiny_config(seed=1, G=1))
    ctx = context(vocab, small_lexicon, G=1)
    tr, units, _ = decode_turn_reduce(m, ctx, vocab, SamplingParams(seed=3), max_steps=30)
    emitted = [u for s in tr.steps if s.units for u in s.units]
    assert all(a != b for a, b in zip(emitted, emitted[1:]))
    assert reduce(units).unique_units == tuple(emitted)
    with pytest.raises(ValueError):
        decode_turn_reduce(GroupFormer(tiny_config()), ctx, vocab)


def test_trace_jsonl(tmp_path):
    tr = trace_of([0, 5])
    text = tr.to_jsonl(tmp_path / "t.jsonl")
    rows = [json.loads(l) for l in text.splitlines()]
    assert rows[1]["units"] == [0, 1, 2, 3, 4] and rows[0]["units"] is None
    assert emitted_groups(tr).groups == ((0, 1, 2, 3, 4),)


def test_overfit_single_sample_reproduces(vocab, small_lexicon):
    q = quad("where is the cat?", "the cat is red.", small_lexicon)
    s = Sample("SI->SR", render_dialogue([make_task(q, "SI->SR")], 5, vocab))
    m = GroupFormer(tiny_config(d=32, d_gm=16, seed=0))
    batch = collate([s.rendered], vocab.pad_id, 5)
    cfg = TrainConfig(peak_lr=1e-2, max_steps=300)
    state = AdamState()
    for _ in range(cfg.max_steps):
        m, state, lb = train_step(m, batch, state, cfg)
    tr, units, toks = decode_turn(m, decode_context(s, vocab, 5), vocab, SamplingParams.greedy())
    want_toks, want_units = response_target(s, vocab)
    assert toks == want_toks
    assert list(units.units) == want_units
    assert tr.stop_reason == "eosp_then_end"
