import numpy as np
import pytest

from groupformer.codec import UnitSequence, group
from groupformer.dialogue import (
    SYSTEM_PROMPT,
    Message,
    Payload,
    Quadruple,
    TaskSample,
    dialogues,
    load_corpus,
    make_asr_tts,
    make_task,
    make_tasks,
    render_dialogue,
    render_messages,
    save_corpus,
    validate,
)

from conftest import quad


def speech(n):
    return UnitSequence(tuple(range(1, n + 1)))


def test_vocabulary_round_trip(vocab):
    text = "Where is the cat?\n"
    assert vocab.decode(vocab.encode(text)) == text
    assert len({vocab.pad_id, vocab.im_start_id, vocab.im_end_id, vocab.sosp_id,
                vocab.eosp_id, vocab.speech_id}) == 6
    with pytest.raises(ValueError):
        vocab.encode("é")


def test_make_tasks_shapes(small_lexicon):
    q = quad("hi", "hello", small_lexicon)
    tasks = make_tasks(q)
    assert [t.task_kind for t in tasks] == ["SI->SR", "SI->RT", "IT->SR", "IT->RT"]
    it_rt = tasks[3]
    assert it_rt.instruction == Payload.text("hi") and it_rt.response == Payload.text("hello")
    si_sr = tasks[0]
    assert si_sr.instruction.modality == si_sr.response.modality == "speech"
    assert si_sr.instruction.value == q.si and si_sr.response.value == q.sr
    assert len([t for q in [q] * 100 for t in make_tasks(q)]) == 400


def test_make_asr_tts(small_lexicon):
    q = quad("hi", "hello", small_lexicon)
    asr, tts = make_asr_tts(q)
    assert asr.instruction.value == q.si and asr.response == Payload.text("hi")
    assert tts.instruction == Payload.text("hi") and tts.response.value == q.si
    assert len([t for q in [q] * 100 for t in make_asr_tts(q)]) == 200


def test_quadruple_rejects_empty_fields():
    q = Quadruple(UnitSequence(()), "hi", speech(3), "yo")
    with pytest.raises(ValueError, match="si"):
        make_tasks(q)


def test_task_sample_checks_modalities():
    with pytest.raises(ValueError):
        TaskSample("ASR", Payload.text("a"), Payload.text("b"))


def test_render_speech_to_speech(vocab):
    sample = TaskSample("SI->SR", Payload.speech(speech(10)), Payload.speech(speech(15)))
    r = render_dialogue([sample], 5, vocab)
    assert len(r.speech_slots) == 5
    assert r.group_mask.tolist() == [True] * 5
    assert validate(r, vocab) == []
    toks = r.tokens.tolist()
    a_start = max(i for i, t in enumerate(toks) if t == vocab.im_start_id) + 3
    want = np.zeros(r.L, dtype=bool)
    want[a_start:] = True
    assert np.array_equal(r.llm_mask, want)
    assert toks[a_start] == vocab.sosp_id and toks[-2] == vocab.eosp_id and toks[-1] == vocab.im_end_id
    # slots are at <speech> tokens and carry the right groups
    assert all(toks[p] == vocab.speech_id for p, _, _ in r.speech_slots)
    assert r.slot_units().tolist() == [list(g) for g in group(speech(10), 5).groups + group(speech(15), 5).groups]


def test_render_template_prefix(vocab):
    r = render_dialogue([TaskSample("IT->RT", Payload.text("hi"), Payload.text("yo"))], 5, vocab)
    text = vocab.decode(r.tokens)
    assert text == (
        "<|im_start|>system\n" + SYSTEM_PROMPT + "<|im_end|>"
        "<|im_start|>user\nhi<|im_end|>"
        "<|im_start|>assistant\nyo<|im_end|>"
    )
    assert r.speech_slots == []
    assert vocab.decode(r.tokens[r.llm_mask]) == "yo<|im_end|>"


def test_two_turn_order(small_lexicon, vocab):
    q1 = quad("where is the cat?", "the cat is in the park.", small_lexicon, "d", 0)
    q2 = quad("and what color is it?", "it is red.", small_lexicon, "d", 1)
    r = render_dialogue([q1, q2], 5, vocab, kind="IT->RT")
    text = vocab.decode(r.tokens)
    first_end = text.index("the cat is in the park.<|im_end|>") + len("the cat is in the park.<|im_end|>")
    assert text[first_end:].startswith("<|im_start|>user\nand what color is it?")
    assert validate(r, vocab) == []
    # both assistant bodies are supervised
    assert vocab.decode(r.tokens[r.llm_mask]) == "the cat is in the park.<|im_end|>it is red.<|im_end|>"


def test_all_kinds_render_valid(small_lexicon, vocab):
    q = quad("how big is the dog?", "the dog is small.", small_lexicon)
    for kind in ("SI->SR", "SI->RT", "IT->SR", "IT->RT", "ASR", "TTS"):
        r = render_dialogue([q], 5, vocab, kind=kind)
        assert validate(r, vocab) == [], kind


def test_validate_unmatched_sosp(small_lexicon, vocab):
    r = render_dialogue([make_task(quad("hi", "yo", small_lexicon), "SI->RT")], 5, vocab)
    toks = r.tokens.copy()
    toks[toks == vocab.eosp_id] = vocab.encode("x")[0]
    r.tokens = toks
    bad = [v for v in validate(r, vocab) if v.startswith("bracket")]
    assert len(bad) == 1


def test_validate_mask_on_user_token(small_lexicon, vocab):
    r = render_dialogue([make_task(quad("hi", "yo", small_lexicon), "IT->RT")], 5, vocab)
    user_pos = r.tokens.tolist().index(vocab.role_id("user"))
    r.llm_mask = r.llm_mask.copy()
    r.llm_mask[user_pos + 2] = True  # the "h" of "hi"
    assert len(validate(r, vocab)) == 1
    assert validate(r, vocab)[0].startswith("mask")


def test_generation_prompt_ends_with_assistant_header(vocab):
    r = render_messages([Message("user", Payload.text("hi"))], vocab, 5, add_generation_prompt=True)
    assert r.tokens[-3:].tolist() == [vocab.im_start_id, vocab.role_id("assistant"), vocab.encode("\n")[0]]
    assert not r.llm_mask.any()


def test_render_is_deterministic_and_distinguishes_payloads(small_lexicon, vocab):
    a = render_dialogue([quad("hi", "yo", small_lexicon)], 5, vocab)
    b = render_dialogue([quad("hi", "yo", small_lexicon)], 5, vocab)
    c = render_dialogue([quad("hi", "ya", small_lexicon)], 5, vocab)
    assert np.array_equal(a.tokens, b.tokens) and np.array_equal(a.slot_units(), b.slot_units())
    assert not (np.array_equal(a.tokens, c.tokens) and np.array_equal(a.slot_units(), c.slot_units()))


def test_corpus_io(tmp_path, small_lexicon):
    qs = [quad("hi", "yo", small_lexicon, "a", 0), quad("ok", "no", small_lexicon, "b", 0),
          quad("so?", "yes.", small_lexicon, "a", 1)]
    save_corpus(qs, tmp_path / "c.jsonl")
    back = load_corpus(tmp_path / "c.jsonl")
    assert back == qs
    assert [[q.turn for q in d] for d in dialogues(back)] == [[0, 1], [0]]
