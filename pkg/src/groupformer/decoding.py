"""Sampling, streaming decode, and the first-audio latency model.

During decoding the backbone emits one token per step. A ``<speech>`` token
triggers the group head, which fills in G units at once; those units are
re-embedded through the adaptor and fed back as the next input row, so the
speech the model produced is exactly what it reads on the following turn.

The vocoder is modelled only by its receptive field ``R``: the first audio
chunk can be synthesised once ``floor(R/2) + 1`` units exist.
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import layers
from .codec import GroupedUnitSequence, ReducedSequence, UnitSequence, expand
from .dialogue import RenderedSequence, Vocabulary
from .model import GroupFormer, KVCache, backbone_step, embed_groups, group_model_forward, input_rows


@dataclass(frozen=True)
class SamplingParams:
    temperature: float = 0.7
    top_k: int = 10
    top_p: float = 0.8
    seed: int = 0

    def __post_init__(self):
        if self.temperature < 0:
            raise ValueError("temperature must be >= 0")
        if self.top_k < 0:
            raise ValueError("top_k must be >= 0")
        if not 0 < self.top_p <= 1:
            raise ValueError("top_p must lie in (0, 1]")

    @classmethod
    def greedy(cls, seed: int = 0) -> "SamplingParams":
        return cls(temperature=0.0, top_k=0, top_p=1.0, seed=seed)


def filtered_distribution(logits: np.ndarray, sp: SamplingParams) -> np.ndarray:
    """Probabilities after temperature, top-k and nucleus truncation
    (``temperature`` must be positive)."""
    logits = np.asarray(logits, dtype=np.float64)
    probs = layers.softmax(logits / sp.temperature)
    order = np.argsort(-probs, kind="stable")
    sorted_p = probs[order]
    keep = np.ones(len(order), dtype=bool)
    if sp.top_k:
        keep[sp.top_k :] = False
    if sp.top_p < 1.0:
        renorm = np.where(keep, sorted_p, 0.0)
        renorm /= renorm.sum()
        before = np.cumsum(renorm) - renorm
        keep &= before < sp.top_p
    out = np.zeros_like(probs)
    out[order[keep]] = sorted_p[keep]
    return out / out.sum()


def sample_token(logits: np.ndarray, sp: SamplingParams, rng: np.random.Generator | None = None) -> int:
    logits = np.asarray(logits, dtype=np.float64)
    if np.isnan(logits).any() or not np.isfinite(logits).any() or np.isposinf(logits).any():
        raise ValueError("logits must contain a finite maximum and no NaN")
    if sp.temperature == 0 or sp.top_k == 1:
        return int(np.argmax(logits))
    if rng is None:
        rng = np.random.default_rng(sp.seed)
    probs = filtered_distribution(logits, sp)
    cdf = np.cumsum(probs)
    i = int(np.searchsorted(cdf, rng.random() * cdf[-1], side="right"))
    return min(i, len(probs) - 1)


@dataclass(frozen=True)
class LatencyModel:
    """Vocoder receptive field plus a cost model for the decode loop.

    ``mode="measured"`` uses the wall times recorded in the trace;
    ``mode="fixed"`` charges ``fixed_step_ms`` per step and
    ``fixed_prefill_ms`` for the prompt, independent of the machine.
    """

    R: int = 11
    unit_frame_rate_hz: float = 25.0
    synth_fixed_ms: float = 0.0
    synth_ms_per_unit: float = 0.0
    mode: str = "measured"
    fixed_step_ms: float = 10.0
    fixed_prefill_ms: float = 0.0

    def __post_init__(self):
        if self.R < 1:
            raise ValueError("receptive field R must be >= 1")
        if self.mode not in ("measured", "fixed"):
            raise ValueError(f"unknown latency mode {self.mode!r}")

    @property
    def n_offset(self) -> int:
        return self.R // 2 + 1

    def synth_ms(self, n_units: int) -> float:
        return self.synth_fixed_ms + self.synth_ms_per_unit * n_units


@dataclass
class DecodeStep:
    step_index: int
    token: int
    units: tuple[int, ...] | None = None
    llm_wall_ms: float = 0.0
    gm_wall_ms: float = 0.0

    @property
    def n_units(self) -> int:
        return len(self.units) if self.units else 0


@dataclass
class DecodeTrace:
    steps: list[DecodeStep] = field(default_factory=list)
    stop_reason: str = "max_steps"
    prefill_ms: float = 0.0
    group_size: int = 1

    @property
    def total_units_emitted(self) -> int:
        return sum(s.n_units for s in self.steps)

    @property
    def tokens(self) -> list[int]:
        return [s.token for s in self.steps]

    def to_jsonl(self, path: str | Path | None = None) -> str:
        lines = [json.dumps({
            "step_index": s.step_index,
            "token": s.token,
            "units": list(s.units) if s.units else None,
            "llm_wall_ms": s.llm_wall_ms,
            "gm_wall_ms": s.gm_wall_ms,
        }) for s in self.steps]
        text = "\n".join(lines) + ("\n" if lines else "")
        if path is not None:
            Path(path).write_text(text)
        return text

    def same_emissions(self, other: "DecodeTrace") -> bool:
        """Equal token and unit streams (timings ignored)."""
        ours = [(s.token, s.units) for s in self.steps]
        theirs = [(s.token, s.units) for s in other.steps]
        return ours == theirs and self.stop_reason == other.stop_reason


@dataclass(frozen=True)
class LatencyReport:
    n_offset: int
    steps_to_first_audio: int | None
    latency_ms: float
    mode: str

    def to_json(self) -> dict:
        d = asdict(self)
        if math.isinf(self.latency_ms):
            d["latency_ms"] = None
        return d


def first_audio_latency(trace: DecodeTrace, lm: LatencyModel) -> LatencyReport:
    """Time until the vocoder can emit its first chunk.

    Finds the smallest ``k`` such that the first ``k`` steps emitted at least
    ``n_offset`` units and charges prefill, those ``k`` step costs and the
    first chunk's synthesis. ``latency_ms`` is ``inf`` if the turn never
    produced enough units.
    """
    need = lm.n_offset
    fixed = lm.mode == "fixed"
    cost = lm.fixed_prefill_ms if fixed else trace.prefill_ms
    units = 0
    for k, s in enumerate(trace.steps, start=1):
        cost += lm.fixed_step_ms if fixed else s.llm_wall_ms + s.gm_wall_ms
        units += s.n_units
        if units >= need:
            return LatencyReport(need, k, cost + lm.synth_ms(need), lm.mode)
    return LatencyReport(need, None, math.inf, lm.mode)


def _ms(t0: float) -> float:
    return (time.perf_counter() - t0) * 1e3


def decode_turn(
    model: GroupFormer,
    context: RenderedSequence,
    vocab: Vocabulary,
    sp: SamplingParams | None = None,
    lm: LatencyModel | None = None,
    max_steps: int = 512,
    response: str | None = "speech",
    no_repeat_units: bool = False,
) -> tuple[DecodeTrace, UnitSequence, list[int]]:
    """Generate one assistant turn after ``context``.

    ``context`` must end with an open assistant header. ``response="speech"``
    primes ``<sosp>`` as part of the prompt (it is returned as the first
    token but is not a decode step); ``"text"`` forbids ``<sosp>``; ``None``
    leaves the choice to the model. ``<speech>`` is only allowed inside an
    open ``<sosp>`` segment. Unit positions inside a group are decoded
    greedily. With ``no_repeat_units`` a unit may not equal its predecessor
    (the reduced representation has no adjacent duplicates).
    """
    sp = sp or SamplingParams()
    lm = lm or LatencyModel()
    cfg, p = model.config, model.params
    rng = np.random.default_rng(sp.seed)
    head = p["text_head"]
    rows = input_rows(model, context)
    tokens: list[int] = []
    in_speech = False
    if response == "speech":
        rows = np.concatenate([rows, p["tok_emb"][[vocab.sosp_id]]], axis=0)
        tokens.append(vocab.sosp_id)
        in_speech = True
    cache = KVCache(cfg)
    t0 = time.perf_counter()
    z = backbone_step(model, cache, rows)[-1]
    trace = DecodeTrace(prefill_ms=_ms(t0), group_size=cfg.G)
    units: list[int] = []
    next_row = None
    for step in range(max_steps):
        t0 = time.perf_counter()
        if next_row is not None:
            if cache.length >= cfg.max_len:
                trace.stop_reason = "context_overflow"
                break
            z = backbone_step(model, cache, next_row)[-1]
        logits = z @ head
        logits[vocab.pad_id] = -np.inf
        if not in_speech:
            logits[vocab.speech_id] = -np.inf
        if response == "text":
            logits[vocab.sosp_id] = -np.inf
        y = sample_token(logits, sp, rng)
        llm_ms = _ms(t0)
        group = None
        gm_ms = 0.0
        if y == vocab.speech_id:
            t0 = time.perf_counter()
            glog = group_model_forward(model, z)
            if no_repeat_units and units:
                glog = glog.copy()
                glog[0, units[-1]] = -np.inf
            group = tuple(int(u) for u in np.argmax(glog, axis=-1))
            if no_repeat_units:
                group = _no_repeat(glog, group)
            next_row = embed_groups(model, np.array([group]))
            gm_ms = _ms(t0)
            units.extend(group)
        else:
            next_row = p["tok_emb"][[y]]
        trace.steps.append(DecodeStep(step, y, group, llm_ms, gm_ms))
        prev = tokens[-1] if tokens else None
        tokens.append(y)
        if y == vocab.im_end_id:
            trace.stop_reason = "eosp_then_end" if prev == vocab.eosp_id else "end_of_turn"
            break
        if y == vocab.sosp_id:
            in_speech = True
        elif y == vocab.eosp_id:
            in_speech = False
    return trace, UnitSequence(tuple(units), lm.unit_frame_rate_hz), tokens


def _no_repeat(glog: np.ndarray, group: tuple[int, ...]) -> tuple[int, ...]:
    out = [group[0]]
    for i in range(1, len(group)):
        row = glog[i].copy()
        row[out[-1]] = -np.inf
        out.append(int(np.argmax(row)))
    return tuple(out)


def decode_turn_reduce(
    model: GroupFormer,
    context: RenderedSequence,
    vocab: Vocabulary,
    sp: SamplingParams | None = None,
    lm: LatencyModel | None = None,
    max_steps: int = 512,
    response: str | None = "speech",
) -> tuple[DecodeTrace, UnitSequence, list[int]]:
    """Decode with a model trained on reduced (deduplicated) units, one unit
    per step. Each emitted unit expands to a run of length 1."""
    if model.config.G != 1:
        raise ValueError("the reduce baseline is trained with G=1")
    trace, reduced, tokens = decode_turn(
        model, context, vocab, sp, lm, max_steps, response, no_repeat_units=True
    )
    rs = ReducedSequence(reduced.units, (1,) * len(reduced), reduced.frame_rate_hz)
    return trace, expand(rs), tokens


def emitted_groups(trace: DecodeTrace) -> GroupedUnitSequence:
    """Groups produced by a trace, in order, as a sequence the renderer can
    place back into context without re-encoding."""
    groups = [s.units for s in trace.steps if s.units]
    return GroupedUnitSequence(tuple(groups), trace.group_size)
