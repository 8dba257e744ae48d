"""Experiment orchestration: configs, sample building, train/eval/chat/compare.

All commands are deterministic given the config (seeds included) and the
checkpoint they read.
"""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .codec import (
    SyntheticLexicon,
    UnitSequence,
    group,
    reduce,
    synth_units,
    tokens_per_second,
)
from .corpus import build_corpus, corpus_statistics
from .decoding import (
    LatencyModel,
    SamplingParams,
    decode_turn,
    decode_turn_reduce,
    emitted_groups,
    first_audio_latency,
)
from .dialogue import (
    CROSS_MODAL_TASKS,
    TASK_KINDS,
    TASK_MODALITIES,
    Message,
    Payload,
    Quadruple,
    RenderedSequence,
    Vocabulary,
    dialogues,
    load_corpus,
    render_dialogue,
    render_messages,
    save_corpus,
    validate,
)
from .layers import softmax
from .model import GroupFormer, ModelConfig, collate, forward_batch
from .training import AdamState, TrainConfig, cosine_lr, evaluate_loss, train_step

log = logging.getLogger(__name__)

REFERENCE_TPS = {"group": 5.0, "reduce": 19.16}
DEFAULT_TASK_WEIGHTS = {"SI->SR": 1.0, "SI->RT": 1.0, "IT->SR": 1.0, "IT->RT": 1.0, "ASR": 0.5, "TTS": 0.5}


@dataclass(frozen=True)
class DataConfig:
    corpus_path: str | None = None
    lexicon_path: str | None = None
    lexicon_seed: int = 0
    corpus_seed: int = 1
    n_dialogues: int = 200
    max_turns: int = 3
    task_weights: dict = field(default_factory=lambda: dict(DEFAULT_TASK_WEIGHTS))
    overfit_samples: int | None = None

    def __post_init__(self):
        w = self.task_weights
        if set(w) - set(TASK_KINDS):
            raise ValueError(f"unknown task kinds in weights: {set(w) - set(TASK_KINDS)}")
        if any(v < 0 for v in w.values()) or not any(v > 0 for v in w.values()):
            raise ValueError("task weights must be non-negative and not all zero")


@dataclass(frozen=True)
class DecodeConfig:
    sampling: SamplingParams = field(default_factory=SamplingParams)
    latency: LatencyModel = field(default_factory=LatencyModel)
    max_steps: int = 512


@dataclass(frozen=True)
class ExperimentConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)
    decode: DecodeConfig = field(default_factory=DecodeConfig)
    strategy: str = "group"
    out_dir: str = "runs/default"
    checkpoint_every: int = 0
    log_every: int = 50

    def __post_init__(self):
        if self.strategy not in ("group", "reduce"):
            raise ValueError(f"strategy must be 'group' or 'reduce', got {self.strategy!r}")

    @property
    def effective_model(self) -> ModelConfig:
        """The reduce baseline models one unit per step."""
        if self.strategy == "reduce" and self.model.G != 1:
            return replace(self.model, G=1)
        return self.model

    def to_json(self) -> dict:
        return {
            "model": self.model.to_json(),
            "train": self.train.to_json(),
            "data": asdict(self.data),
            "decode": {
                "sampling": asdict(self.decode.sampling),
                "latency": asdict(self.decode.latency),
                "max_steps": self.decode.max_steps,
            },
            "strategy": self.strategy,
            "out_dir": self.out_dir,
            "checkpoint_every": self.checkpoint_every,
            "log_every": self.log_every,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "ExperimentConfig":
        dec = obj.get("decode", {})
        return cls(
            model=ModelConfig.from_json(obj.get("model", {})),
            train=TrainConfig.from_json(obj.get("train", {})),
            data=DataConfig(**obj.get("data", {})),
            decode=DecodeConfig(
                sampling=SamplingParams(**dec.get("sampling", {})),
                latency=LatencyModel(**dec.get("latency", {})),
                max_steps=dec.get("max_steps", 512),
            ),
            strategy=obj.get("strategy", "group"),
            out_dir=obj.get("out_dir", "runs/default"),
            checkpoint_every=obj.get("checkpoint_every", 0),
            log_every=obj.get("log_every", 50),
        )

    @classmethod
    def load(cls, path: str | Path) -> "ExperimentConfig":
        return cls.from_json(json.loads(Path(path).read_text()))

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=2))


# ---------------------------------------------------------------- data


def _existing(path: str | None, what: str) -> Path | None:
    if not path:
        return None
    if not Path(path).exists():
        raise FileNotFoundError(f"{what} {path} does not exist")
    return Path(path)


def load_lexicon(cfg: ExperimentConfig) -> SyntheticLexicon:
    """The configured lexicon file, or one generated from ``lexicon_seed``."""
    path = _existing(cfg.data.lexicon_path, "lexicon")
    if path:
        return SyntheticLexicon.load(path)
    return SyntheticLexicon.generate(cfg.data.lexicon_seed, unit_vocab_size=cfg.model.V_u)


def load_quadruples(cfg: ExperimentConfig, lexicon: SyntheticLexicon | None = None) -> list[Quadruple]:
    """The configured corpus file, or a corpus built in memory from the seeds."""
    lexicon = lexicon or load_lexicon(cfg)
    path = _existing(cfg.data.corpus_path, "corpus")
    if path:
        return load_corpus(path, lexicon.frame_rate_hz)
    return build_corpus(cfg.data.corpus_seed, cfg.data.n_dialogues, cfg.data.max_turns, lexicon)


def to_reduced(q: Quadruple) -> Quadruple:
    """Swap both speech sides for their deduplicated unit streams."""
    def r(s: UnitSequence) -> UnitSequence:
        return UnitSequence(reduce(s).unique_units, s.frame_rate_hz)
    return replace(q, si=r(q.si), sr=r(q.sr))


@dataclass
class Sample:
    kind: str
    rendered: RenderedSequence
    dialogue_id: str = ""


def build_samples(
    quads: Sequence[Quadruple],
    vocab: Vocabulary,
    G: int,
    strategy: str = "group",
    kinds: Sequence[str] = TASK_KINDS,
    max_len: int | None = None,
) -> list[Sample]:
    """Render every dialogue once per cross-modal task kind (all turns) and
    every quadruple once per auxiliary task (single turn). Samples longer
    than ``max_len`` are dropped."""
    if strategy == "reduce":
        quads = [to_reduced(q) for q in quads]
    out = []
    for dia in dialogues(quads):
        for kind in kinds:
            if kind in CROSS_MODAL_TASKS:
                out.append(Sample(kind, render_dialogue(dia, G, vocab, kind=kind), dia[0].dialogue_id))
            else:
                for q in dia:
                    out.append(Sample(kind, render_dialogue([q], G, vocab, kind=kind), q.dialogue_id))
    if max_len is not None:
        kept = [s for s in out if s.rendered.L <= max_len]
        if len(kept) < len(out):
            log.info("dropped %d over-length samples", len(out) - len(kept))
        out = kept
    return out


def memorization_set(
    quads: Sequence[Quadruple],
    vocab: Vocabulary,
    G: int,
    n: int = 32,
    strategy: str = "group",
) -> list[Sample]:
    """``n`` single-turn samples with distinct instructions, task kinds
    assigned round-robin over the four cross-modal tasks."""
    if strategy == "reduce":
        quads = [to_reduced(q) for q in quads]
    seen: set[str] = set()
    out = []
    for q in quads:
        if q.turn != 0 or q.it in seen:
            continue
        seen.add(q.it)
        kind = CROSS_MODAL_TASKS[len(out) % len(CROSS_MODAL_TASKS)]
        out.append(Sample(kind, render_dialogue([q], G, vocab, kind=kind), q.dialogue_id))
        if len(out) == n:
            break
    if len(out) < n:
        raise ValueError(f"corpus has only {len(out)} distinct opening instructions, need {n}")
    return out


def batches(samples: Sequence[Sample], cfg: TrainConfig, weights: dict | None = None) -> Iterator[list[Sample]]:
    """Endless deterministic stream of batches.

    Without ``weights`` the samples are shuffled once per epoch; with weights
    each batch element first draws a task kind, then a sample of that kind.
    """
    rng = np.random.default_rng(cfg.seed)
    if not weights:
        order: list[int] = []
        while True:
            if len(order) < cfg.batch_size:
                order.extend(rng.permutation(len(samples)).tolist())
            idx, order = order[: cfg.batch_size], order[cfg.batch_size :]
            yield [samples[i] for i in idx]
    by_kind = {k: [s for s in samples if s.kind == k] for k in TASK_KINDS}
    kinds = [k for k in TASK_KINDS if weights.get(k, 0) > 0 and by_kind[k]]
    if not kinds:
        raise ValueError("no samples for any positively weighted task kind")
    p = np.array([weights[k] for k in kinds], dtype=np.float64)
    p /= p.sum()
    while True:
        picks = rng.choice(len(kinds), size=cfg.batch_size, p=p)
        yield [by_kind[kinds[k]][int(rng.integers(len(by_kind[kinds[k]])))] for k in picks]


def response_target(sample: Sample, vocab: Vocabulary) -> tuple[list[int], list[int]]:
    """Token stream and flat unit stream of the final assistant turn."""
    r = sample.rendered
    toks = r.tokens.tolist()
    start = max(i for i in range(len(toks) - 2) if toks[i] == vocab.im_start_id and toks[i + 1] == vocab.role_id("assistant")) + 3
    target_tokens = toks[start:]
    units: list[int] = []
    if r.segment_roles and r.segment_roles[-1] == "assistant" and r.speech_slots and r.speech_slots[-1][0] >= start:
        units = [u for g in r.groups[-1].groups for u in g]
    return target_tokens, units


def decode_context(sample: Sample, vocab: Vocabulary, G: int) -> RenderedSequence:
    """The sample's prompt: everything before its final assistant body,
    ending in an open assistant header."""
    r = sample.rendered
    toks = r.tokens.tolist()
    start = max(i for i in range(len(toks) - 2) if toks[i] == vocab.im_start_id and toks[i + 1] == vocab.role_id("assistant")) + 3
    slots = [s for s in r.speech_slots if s[0] < start]
    n_seg = max((seg for _, _, seg in slots), default=-1) + 1
    return RenderedSequence(
        tokens=r.tokens[:start].copy(),
        speech_slots=slots,
        groups=r.groups[:n_seg],
        llm_mask=np.zeros(start, dtype=bool),
        group_mask=np.ones(len(slots), dtype=bool),
        segment_roles=r.segment_roles[:n_seg],
    )


# ---------------------------------------------------------------- train


def train(
    model: GroupFormer,
    samples: Sequence[Sample],
    tcfg: TrainConfig,
    vocab: Vocabulary,
    weights: dict | None = None,
    log_path: str | Path | None = None,
    log_every: int = 50,
    checkpoint_every: int = 0,
    checkpoint_dir: str | Path | None = None,
) -> list[dict]:
    """Run ``tcfg.max_steps`` updates; returns the per-step log records."""
    state = AdamState()
    stream = batches(samples, tcfg, weights)
    records = []
    fh = open(log_path, "w") if log_path else None
    try:
        for step in range(tcfg.max_steps):
            t0 = time.perf_counter()
            batch = collate([s.rendered for s in next(stream)], vocab.pad_id, model.config.G)
            lr = cosine_lr(state.step, tcfg)
            try:
                _, state, lb = train_step(model, batch, state, tcfg)
            except FloatingPointError:
                if checkpoint_dir:
                    model.save(Path(checkpoint_dir) / "last_good.npz", {"step": step})
                raise
            rec = {"step": step, "lr": lr, **{k: lb.to_json()[k] for k in ("loss_llm", "loss_group", "total")},
                   "wall_ms": (time.perf_counter() - t0) * 1e3}
            records.append(rec)
            if fh:
                fh.write(json.dumps(rec) + "\n")
            if log_every and step % log_every == 0:
                log.info("step %d lr %.2e llm %.4f group %.4f total %.4f", step, lr, lb.loss_llm, lb.loss_group, lb.total)
            if checkpoint_every and checkpoint_dir and (step + 1) % checkpoint_every == 0:
                model.save(Path(checkpoint_dir) / f"step{step + 1:06d}.npz", {"step": step + 1})
    finally:
        if fh:
            fh.close()
    return records


def training_samples(cfg: ExperimentConfig, vocab: Vocabulary, quads: Sequence[Quadruple]) -> tuple[list[Sample], dict | None]:
    G = cfg.effective_model.G
    if cfg.data.overfit_samples:
        return memorization_set(quads, vocab, G, cfg.data.overfit_samples, cfg.strategy), None
    samples = build_samples(quads, vocab, G, cfg.strategy, max_len=cfg.model.max_len)
    return samples, cfg.data.task_weights


def cmd_build_corpus(cfg: ExperimentConfig, out_path: str | Path, lexicon_out: str | Path | None = None) -> dict:
    """Write a corpus. A configured lexicon path that does not exist yet is
    treated as an output: the seeded lexicon is generated and saved there."""
    lex_path = cfg.data.lexicon_path
    if lex_path and not Path(lex_path).exists():
        lexicon_out = lexicon_out or lex_path
        cfg = replace(cfg, data=replace(cfg.data, lexicon_path=None))
    lexicon = load_lexicon(cfg)
    quads = build_corpus(cfg.data.corpus_seed, cfg.data.n_dialogues, cfg.data.max_turns, lexicon)
    vocab = Vocabulary()
    over = [s for s in build_samples(quads, vocab, cfg.model.G) if s.rendered.L > cfg.model.max_len]
    if over:
        bad = {s.dialogue_id for s in over}
        quads = [q for q in quads if q.dialogue_id not in bad]
        log.info("rejected %d over-length dialogues", len(bad))
    save_corpus(quads, out_path)
    if lexicon_out:
        lexicon.save(lexicon_out)
    return corpus_statistics(quads, cfg.model.G)


def cmd_train(cfg: ExperimentConfig, out_dir: str | Path | None = None) -> tuple[GroupFormer, list[dict]]:
    out = Path(out_dir or cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    vocab = Vocabulary()
    mcfg = replace(cfg.effective_model, N=len(vocab))
    quads = load_quadruples(cfg)
    samples, weights = training_samples(cfg, vocab, quads)
    model = GroupFormer(mcfg)
    records = train(model, samples, cfg.train, vocab, weights, out / "train_log.jsonl",
                    cfg.log_every, cfg.checkpoint_every, out)
    model.save(out / "final.npz", {"step": cfg.train.max_steps, "strategy": cfg.strategy})
    cfg.save(out / "config.json")
    return model, records


# ---------------------------------------------------------------- eval


def teacher_forced_accuracy(model: GroupFormer, samples: Sequence[Sample], vocab: Vocabulary, batch_size: int = 16) -> dict:
    """Per-task argmax accuracy on text and unit targets.

    ``*_expected_accuracy`` is the mean probability put on the correct
    target, i.e. the hit rate of a prediction sampled from the model. At
    init the argmax is almost the same symbol everywhere, so argmax hits are
    strongly correlated; the expected accuracy is the chance-level statistic.
    """
    stats: dict[str, np.ndarray] = {}
    for i in range(0, len(samples), batch_size):
        chunk = samples[i : i + batch_size]
        batch = collate([s.rendered for s in chunk], vocab.pad_id, model.config.G)
        out, _ = forward_batch(model, batch)
        logits = out.text_logits[:, :-1]
        targets = batch.tokens[:, 1:]
        tmask = batch.target_mask[:, 1:]
        hit = (logits.argmax(-1) == targets) & tmask
        tprob = np.take_along_axis(softmax(logits.astype(np.float64)), targets[..., None], -1)[..., 0] * tmask
        if batch.n_slots:
            uhit = out.group_logits.argmax(-1) == batch.slot_units
            uprob = np.take_along_axis(softmax(out.group_logits.astype(np.float64)), batch.slot_units[..., None], -1)[..., 0]
        for b, s in enumerate(chunk):
            st = stats.setdefault(s.kind, np.zeros(6))
            st[0] += hit[b].sum()
            st[1] += tprob[b].sum()
            st[2] += tmask[b].sum()
            if batch.n_slots:
                sel = batch.slot_b == b
                st[3] += uhit[sel].sum()
                st[4] += uprob[sel].sum()
                st[5] += uhit[sel].size
    rate = lambda a, n: float(a / n) if n else None
    return {
        k: {
            "text_accuracy": rate(v[0], v[2]),
            "text_expected_accuracy": rate(v[1], v[2]),
            "text_positions": int(v[2]),
            "unit_accuracy": rate(v[3], v[5]),
            "unit_expected_accuracy": rate(v[4], v[5]),
            "unit_positions": int(v[5]),
        }
        for k, v in stats.items()
    }


def decode_sample(model, sample: Sample, vocab: Vocabulary, dcfg: DecodeConfig, strategy: str, sp: SamplingParams | None = None):
    ctx = decode_context(sample, vocab, model.config.G)
    response = TASK_MODALITIES[sample.kind][1]
    fn = decode_turn_reduce if strategy == "reduce" else decode_turn
    return fn(model, ctx, vocab, sp or dcfg.sampling, dcfg.latency, dcfg.max_steps, response=response)


def exact_match(model, samples: Sequence[Sample], vocab: Vocabulary, dcfg: DecodeConfig, strategy: str = "group") -> dict:
    """Greedy decode of every sample; a match needs identical token and unit
    streams for the final assistant turn."""
    greedy = SamplingParams.greedy()
    hits, reports = 0, []
    for s in samples:
        trace, units, tokens = decode_sample(model, s, vocab, dcfg, strategy, greedy)
        want_tokens, want_units = response_target(s, vocab)
        got_units = [u for st in trace.steps if st.units for u in st.units]
        ok = tokens == want_tokens and got_units == want_units
        hits += ok
        reports.append({"kind": s.kind, "match": ok, "n_steps": len(trace.steps)})
    return {"exact_match_rate": hits / len(samples) if samples else None, "n": len(samples), "samples": reports}


def latency_stats(model, samples: Sequence[Sample], vocab: Vocabulary, dcfg: DecodeConfig, strategy: str = "group") -> dict:
    """First-audio latency over the speech-response samples, measured and
    under the fixed per-step cost model."""
    lm = dcfg.latency
    fixed = replace(lm, mode="fixed")
    measured, simulated, steps = [], [], []
    for s in samples:
        if TASK_MODALITIES[s.kind][1] != "speech":
            continue
        trace, _, _ = decode_sample(model, s, vocab, dcfg, strategy, SamplingParams.greedy())
        rep = first_audio_latency(trace, replace(lm, mode="measured"))
        if rep.steps_to_first_audio is None:
            continue
        measured.append(rep.latency_ms)
        simulated.append(first_audio_latency(trace, fixed).latency_ms)
        steps.append(rep.steps_to_first_audio)
    med = lambda xs: float(np.median(xs)) if xs else None
    return {
        "n_offset": lm.n_offset,
        "n_decodes": len(steps),
        "median_steps_to_first_audio": med(steps),
        "median_latency_ms_measured": med(measured),
        "median_latency_ms_fixed": med(simulated),
        "fixed_step_ms": lm.fixed_step_ms,
    }


def corpus_tps(quads: Sequence[Quadruple], G: int) -> dict:
    seqs = [s for q in quads for s in (q.si, q.sr)]
    dur = sum(s.duration_seconds for s in seqs)
    return {
        "none": tokens_per_second("none", seqs[0]),
        "group": tokens_per_second("group", seqs[0], G),
        "reduce": sum(len(reduce(s)) for s in seqs) / dur,
    }


@dataclass
class EvalReport:
    strategy: str
    accuracy: dict
    exact_match: dict
    tps: dict
    speech_tps: float
    latency: dict
    losses: dict
    checks: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        return asdict(self)

    @property
    def ok(self) -> bool:
        return all(self.checks.values())


def cmd_eval(cfg: ExperimentConfig, checkpoint: str | Path | GroupFormer, n_eval: int | None = None) -> EvalReport:
    model = checkpoint if isinstance(checkpoint, GroupFormer) else GroupFormer.load(checkpoint)
    # seed and init_std only shape the initial draw, not the architecture
    want = replace(cfg.effective_model, N=model.config.N, dtype=model.config.dtype,
                   seed=model.config.seed, init_std=model.config.init_std)
    if model.config != want:
        raise ValueError(f"checkpoint config {model.config} does not match experiment config {want}")
    vocab = Vocabulary()
    quads = load_quadruples(cfg)
    G = model.config.G
    if cfg.data.overfit_samples:
        samples = memorization_set(quads, vocab, G, cfg.data.overfit_samples, cfg.strategy)
    else:
        samples = build_samples(quads, vocab, G, cfg.strategy, max_len=cfg.model.max_len)
        if n_eval:
            samples = samples[:n_eval]
    # exact match and latency are probed on at most 32 distinct openings
    n_open = len({q.it for q in quads if q.turn == 0})
    n_mem = min(cfg.data.overfit_samples or 32, 32, n_open, n_eval or 32)
    mem = memorization_set(quads, vocab, G, n_mem, cfg.strategy)
    acc = teacher_forced_accuracy(model, samples, vocab)
    em = exact_match(model, mem, vocab, cfg.decode, cfg.strategy)
    lat = latency_stats(model, mem, vocab, cfg.decode, cfg.strategy)
    tps = corpus_tps(quads, cfg.model.G)
    batch = collate([s.rendered for s in samples[:64]], vocab.pad_id, G)
    lb = evaluate_loss(model, batch)
    speech_tps = tps["group"] if cfg.strategy == "group" else tps["reduce"]
    rates = [v for a in acc.values() for k, v in a.items() if k.endswith("accuracy") and v is not None]
    checks = {
        "rates_in_unit_interval": all(0.0 <= r <= 1.0 for r in rates + [em["exact_match_rate"]]),
        "tps_positive": all(v > 0 for v in tps.values()),
        "group_tps_is_rate_over_G": math.isclose(tps["group"], quads[0].si.frame_rate_hz / cfg.model.G),
        "n_offset_matches_R": lat["n_offset"] == cfg.decode.latency.R // 2 + 1,
        "renders_valid": all(not validate(s.rendered, vocab) for s in samples),
        "losses_finite": math.isfinite(lb.total),
    }
    return EvalReport(cfg.strategy, acc, em, tps, speech_tps, lat, lb.to_json(), checks)


# ---------------------------------------------------------------- chat


def cmd_chat(cfg: ExperimentConfig, checkpoint: str | Path | GroupFormer, script: Sequence[str] | str | Path) -> dict:
    """Multi-turn speech chat driven by a list of user utterances.

    User text is turned into units with the lexicon; assistant speech is put
    back into the context as the very groups the model emitted.
    """
    model = checkpoint if isinstance(checkpoint, GroupFormer) else GroupFormer.load(checkpoint)
    if isinstance(script, (str, Path)):
        obj = json.loads(Path(script).read_text())
        script = obj["turns"] if isinstance(obj, dict) else obj
    vocab = Vocabulary()
    lexicon = load_lexicon(cfg)
    G = model.config.G
    messages: list[Message] = []
    turns = []
    for text in script:
        units = synth_units(text, lexicon)
        if cfg.strategy == "reduce":
            units = UnitSequence(reduce(units).unique_units, units.frame_rate_hz)
        candidate = messages + [Message("user", Payload.speech(units))]
        ctx = render_messages(candidate, vocab, G, add_generation_prompt=True)
        entry = {"user_text": text, "user_units": list(units.units), "context_length": ctx.L}
        if ctx.L >= model.config.max_len:
            entry["rejected"] = "context overflow"
            turns.append(entry)
            continue
        fn = decode_turn_reduce if cfg.strategy == "reduce" else decode_turn
        trace, out_units, tokens = fn(model, ctx, vocab, cfg.decode.sampling, cfg.decode.latency,
                                      cfg.decode.max_steps, response="speech")
        groups = emitted_groups(trace)
        messages = candidate + [Message("assistant", Payload.speech(groups))]
        entry.update({
            "context_speech_groups": [list(g) for gs in ctx.groups for g in gs.groups],
            "assistant_tokens": tokens,
            "assistant_groups": [list(g) for g in groups.groups],
            "assistant_units": list(out_units.units),
            "stop_reason": trace.stop_reason,
            "latency": first_audio_latency(trace, cfg.decode.latency).to_json(),
        })
        turns.append(entry)
    return {"strategy": cfg.strategy, "turns": turns}


# ---------------------------------------------------------------- compare


def sequence_length_ratio(quads: Sequence[Quadruple], G: int) -> dict:
    seqs = [s for q in quads for s in (q.si, q.sr)]
    grouped = np.array([len(group(s, G)) for s in seqs], dtype=np.float64)
    reduced = np.array([len(reduce(s)) for s in seqs], dtype=np.float64)
    mrl = sum(len(s) for s in seqs) / reduced.sum()
    return {
        "mean_grouped_len": float(grouped.mean()),
        "mean_reduced_len": float(reduced.mean()),
        "mean_ratio": float((grouped / reduced).mean()),
        "mean_run_length": float(mrl),
        "predicted_ratio": float(mrl / G),
    }


def cmd_latency(cfg: ExperimentConfig, checkpoint: str | Path | GroupFormer, n: int = 8) -> dict:
    model = checkpoint if isinstance(checkpoint, GroupFormer) else GroupFormer.load(checkpoint)
    vocab = Vocabulary()
    quads = load_quadruples(cfg)
    mem = memorization_set(quads, vocab, model.config.G, max(n, 4), cfg.strategy)
    st = latency_stats(model, mem, vocab, cfg.decode, cfg.strategy)
    mode = cfg.decode.latency.mode
    return {
        "n_offset": st["n_offset"],
        "steps_to_first_audio": st["median_steps_to_first_audio"],
        "latency_ms": st["median_latency_ms_fixed" if mode == "fixed" else "median_latency_ms_measured"],
        "mode": mode,
    }


def cmd_compare_strategies(
    cfg_group: ExperimentConfig,
    cfg_reduce: ExperimentConfig,
    checkpoints: tuple[str | Path | GroupFormer, str | Path | GroupFormer],
    n: int = 16,
) -> dict:
    out = {}
    for cfg, ckpt in zip((cfg_group, cfg_reduce), checkpoints):
        model = ckpt if isinstance(ckpt, GroupFormer) else GroupFormer.load(ckpt)
        vocab = Vocabulary()
        quads = load_quadruples(cfg)
        mem = memorization_set(quads, vocab, model.config.G, n, cfg.strategy)
        lat = latency_stats(model, mem, vocab, cfg.decode, cfg.strategy)
        tps = corpus_tps(quads, cfg_group.model.G)
        out[cfg.strategy] = {
            "tps": tps[cfg.strategy],
            "steps_to_first_audio": lat["median_steps_to_first_audio"],
            "median_latency_ms_fixed": lat["median_latency_ms_fixed"],
            "median_latency_ms_measured": lat["median_latency_ms_measured"],
            "accuracy": teacher_forced_accuracy(model, mem, vocab),
        }
    g, r = out["group"], out["reduce"]
    quads = load_quadruples(cfg_group)
    out["ratios"] = {
        "steps_to_first_audio_reduce_over_group": _ratio(r["steps_to_first_audio"], g["steps_to_first_audio"]),
        "latency_fixed_reduce_over_group": _ratio(r["median_latency_ms_fixed"], g["median_latency_ms_fixed"]),
        "tps_reduce_over_group": _ratio(r["tps"], g["tps"]),
    }
    out["sequence_length"] = sequence_length_ratio(quads, cfg_group.model.G)
    out["paper_reference"] = {"label": "paper, not reproduced", "group_tps": REFERENCE_TPS["group"], "reduce_tps": REFERENCE_TPS["reduce"]}
    return out


def _ratio(a, b):
    return a / b if a is not None and b else None
