"""Quadruple data, cross-modal task construction and prompt rendering.

Rendering follows a ChatML-style layout::

    <|im_start|> system \\n <system prompt> <|im_end|>
    <|im_start|> user \\n [text context \\n] <sosp> <speech>... <eosp> <|im_end|>
    <|im_start|> assistant \\n <sosp> <speech>... <eosp> <|im_end|>
    ...

Each ``<speech>`` position stands for one group of ``G`` units. The text
loss only sees assistant turns (payload plus closing ``<|im_end|>``); the
group loss sees every speech slot, user and assistant alike.
"""

from __future__ import annotations

import json
import string
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .codec import GroupedUnitSequence, UnitSequence, group

SYSTEM_PROMPT = "You are a helpful voice-chat assistant"
TEXT_ALPHABET = string.ascii_letters + string.digits + " .,?!'-:;\n"

PAD = "<pad>"
IM_START = "<|im_start|>"
IM_END = "<|im_end|>"
SOSP = "<sosp>"
EOSP = "<eosp>"
SPEECH = "<speech>"
ROLES = ("system", "user", "assistant")
SPECIAL_TOKENS = (PAD, IM_START, IM_END, *ROLES, SOSP, EOSP, SPEECH)

CROSS_MODAL_TASKS = ("SI->SR", "SI->RT", "IT->SR", "IT->RT")
AUX_TASKS = ("ASR", "TTS")
TASK_KINDS = CROSS_MODAL_TASKS + AUX_TASKS

# (instruction modality, response modality) per task kind
TASK_MODALITIES = {
    "SI->SR": ("speech", "speech"),
    "SI->RT": ("speech", "text"),
    "IT->SR": ("text", "speech"),
    "IT->RT": ("text", "text"),
    "ASR": ("speech", "text"),
    "TTS": ("text", "speech"),
}


class Vocabulary:
    """Character-level text tokens followed by the structural specials."""

    def __init__(self, alphabet: str = TEXT_ALPHABET):
        chars = list(dict.fromkeys(alphabet))
        clash = set(chars) & set(SPECIAL_TOKENS)
        if clash:
            raise ValueError(f"alphabet overlaps special tokens: {clash}")
        self.alphabet = "".join(chars)
        self.tokens: list[str] = chars + list(SPECIAL_TOKENS)
        self._ids = {tok: i for i, tok in enumerate(self.tokens)}
        self.text_vocab_size = len(chars)

    def __len__(self) -> int:
        return len(self.tokens)

    def __getitem__(self, token: str) -> int:
        return self._ids[token]

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocabulary) and self.tokens == other.tokens

    @property
    def pad_id(self) -> int:
        return self._ids[PAD]

    @property
    def im_start_id(self) -> int:
        return self._ids[IM_START]

    @property
    def im_end_id(self) -> int:
        return self._ids[IM_END]

    @property
    def sosp_id(self) -> int:
        return self._ids[SOSP]

    @property
    def eosp_id(self) -> int:
        return self._ids[EOSP]

    @property
    def speech_id(self) -> int:
        return self._ids[SPEECH]

    def role_id(self, role: str) -> int:
        return self._ids[role]

    def encode(self, text: str) -> list[int]:
        ids = []
        for ch in text:
            if ch not in self._ids or self._ids[ch] >= self.text_vocab_size:
                raise ValueError(f"character {ch!r} is not in the text vocabulary")
            ids.append(self._ids[ch])
        return ids

    def decode(self, ids: Iterable[int]) -> str:
        return "".join(self.tokens[i] for i in ids)


@dataclass(frozen=True)
class Quadruple:
    si: UnitSequence
    it: str
    sr: UnitSequence
    rt: str
    dialogue_id: str = "0"
    turn: int = 0

    def check(self) -> None:
        for name in ("si", "it", "sr", "rt"):
            if len(getattr(self, name)) == 0:
                raise ValueError(f"quadruple field {name!r} is empty")

    def to_json(self) -> dict:
        return {
            "it": self.it,
            "rt": self.rt,
            "si": list(self.si.units),
            "sr": list(self.sr.units),
            "dialogue_id": self.dialogue_id,
            "turn": self.turn,
        }

    @classmethod
    def from_json(cls, obj: dict, frame_rate_hz: float = 25.0) -> "Quadruple":
        return cls(
            si=UnitSequence(tuple(obj["si"]), frame_rate_hz),
            it=obj["it"],
            sr=UnitSequence(tuple(obj["sr"]), frame_rate_hz),
            rt=obj["rt"],
            dialogue_id=str(obj.get("dialogue_id", "0")),
            turn=int(obj.get("turn", 0)),
        )


@dataclass(frozen=True)
class Payload:
    """A modality-tagged message body: ``text`` carries a string, ``speech``
    a :class:`UnitSequence` or an already grouped sequence."""

    modality: str
    value: str | UnitSequence | GroupedUnitSequence

    def __post_init__(self):
        if self.modality == "text":
            if not isinstance(self.value, str):
                raise TypeError("text payload must hold a string")
        elif self.modality == "speech":
            if not isinstance(self.value, (UnitSequence, GroupedUnitSequence)):
                raise TypeError("speech payload must hold units")
        else:
            raise ValueError(f"unknown modality {self.modality!r}")

    @classmethod
    def text(cls, s: str) -> "Payload":
        return cls("text", s)

    @classmethod
    def speech(cls, units: UnitSequence | GroupedUnitSequence) -> "Payload":
        return cls("speech", units)


@dataclass(frozen=True)
class TaskSample:
    task_kind: str
    instruction: Payload
    response: Payload
    context: str | None = None

    def __post_init__(self):
        if self.task_kind not in TASK_MODALITIES:
            raise ValueError(f"unknown task kind {self.task_kind!r}")
        want = TASK_MODALITIES[self.task_kind]
        got = (self.instruction.modality, self.response.modality)
        if want != got:
            raise ValueError(f"{self.task_kind} expects modalities {want}, got {got}")


@dataclass(frozen=True)
class Message:
    role: str
    payload: Payload
    context: str | None = None


def make_tasks(q: Quadruple) -> list[TaskSample]:
    q.check()
    si, it = Payload.speech(q.si), Payload.text(q.it)
    sr, rt = Payload.speech(q.sr), Payload.text(q.rt)
    return [
        TaskSample("SI->SR", si, sr),
        TaskSample("SI->RT", si, rt),
        TaskSample("IT->SR", it, sr),
        TaskSample("IT->RT", it, rt),
    ]


def make_asr_tts(q: Quadruple) -> list[TaskSample]:
    q.check()
    si, it = Payload.speech(q.si), Payload.text(q.it)
    return [TaskSample("ASR", si, it), TaskSample("TTS", it, si)]


def make_task(q: Quadruple, kind: str) -> TaskSample:
    q.check()
    source = {
        "SI": Payload.speech(q.si),
        "IT": Payload.text(q.it),
        "SR": Payload.speech(q.sr),
        "RT": Payload.text(q.rt),
    }
    if kind == "ASR":
        return TaskSample(kind, source["SI"], source["IT"])
    if kind == "TTS":
        return TaskSample(kind, source["IT"], source["SI"])
    ins, res = kind.split("->")
    return TaskSample(kind, source[ins], source[res])


@dataclass
class RenderedSequence:
    tokens: np.ndarray
    speech_slots: list[tuple[int, int, int]]
    groups: list[GroupedUnitSequence]
    llm_mask: np.ndarray
    group_mask: np.ndarray
    segment_roles: list[str] = field(default_factory=list)

    @property
    def L(self) -> int:
        return len(self.tokens)

    def __len__(self) -> int:
        return len(self.tokens)

    def slot_units(self) -> np.ndarray:
        """Ground-truth units per slot, shape (n_slots, G)."""
        if not self.speech_slots:
            G = self.groups[0].group_size if self.groups else 1
            return np.zeros((0, G), dtype=np.int64)
        return np.array(
            [self.groups[seg].groups[gi] for _, gi, seg in self.speech_slots],
            dtype=np.int64,
        )

    @property
    def slot_positions(self) -> np.ndarray:
        return np.array([p for p, _, _ in self.speech_slots], dtype=np.int64)


class _Builder:
    def __init__(self, vocab: Vocabulary, G: int):
        self.vocab, self.G = vocab, G
        self.tokens: list[int] = []
        self.mask: list[bool] = []
        self.slots: list[tuple[int, int, int]] = []
        self.groups: list[GroupedUnitSequence] = []
        self.roles: list[str] = []

    def push(self, ids: Sequence[int], supervised: bool) -> None:
        self.tokens.extend(ids)
        self.mask.extend([supervised] * len(ids))

    def header(self, role: str) -> None:
        v = self.vocab
        self.push([v.im_start_id, v.role_id(role), v.encode("\n")[0]], False)

    def payload(self, p: Payload, role: str, supervised: bool) -> None:
        v = self.vocab
        if p.modality == "text":
            self.push(v.encode(p.value), supervised)
            return
        gs = p.value
        if isinstance(gs, UnitSequence):
            gs = group(gs, self.G)
        elif gs.group_size != self.G:
            raise ValueError(f"grouped payload has G={gs.group_size}, expected {self.G}")
        seg = len(self.groups)
        self.groups.append(gs)
        self.roles.append(role)
        self.push([v.sosp_id], supervised)
        for gi in range(len(gs)):
            self.slots.append((len(self.tokens), gi, seg))
            self.push([v.speech_id], supervised)
        self.push([v.eosp_id], supervised)

    def build(self) -> RenderedSequence:
        return RenderedSequence(
            tokens=np.array(self.tokens, dtype=np.int64),
            speech_slots=self.slots,
            groups=self.groups,
            llm_mask=np.array(self.mask, dtype=bool),
            group_mask=np.ones(len(self.slots), dtype=bool),
            segment_roles=self.roles,
        )


def render_messages(
    messages: Sequence[Message],
    vocab: Vocabulary,
    G: int,
    system_prompt: str = SYSTEM_PROMPT,
    add_generation_prompt: bool = False,
) -> RenderedSequence:
    """Render a conversation; with ``add_generation_prompt`` an open
    assistant header is appended for decoding."""
    b = _Builder(vocab, G)
    b.header("system")
    b.push(vocab.encode(system_prompt), False)
    b.push([vocab.im_end_id], False)
    for m in messages:
        if m.role not in ("user", "assistant"):
            raise ValueError(f"unsupported role {m.role!r}")
        assistant = m.role == "assistant"
        b.header(m.role)
        if m.context:
            b.push(vocab.encode(m.context + "\n"), assistant)
        b.payload(m.payload, m.role, assistant)
        b.push([vocab.im_end_id], assistant)
    if add_generation_prompt:
        b.header("assistant")
    return b.build()


def task_messages(sample: TaskSample) -> list[Message]:
    return [
        Message("user", sample.instruction, sample.context),
        Message("assistant", sample.response),
    ]


def render_dialogue(
    turns: Sequence[TaskSample | Quadruple],
    G: int,
    vocab: Vocabulary,
    kind: str = "SI->SR",
    system_prompt: str = SYSTEM_PROMPT,
) -> RenderedSequence:
    """Render one or more turns. Quadruples are converted with ``kind``."""
    if not turns:
        raise ValueError("cannot render an empty dialogue")
    messages: list[Message] = []
    for t in turns:
        sample = make_task(t, kind) if isinstance(t, Quadruple) else t
        messages.extend(task_messages(sample))
    return render_messages(messages, vocab, G, system_prompt)


def expected_llm_mask(tokens: np.ndarray, vocab: Vocabulary) -> np.ndarray:
    """Mask derived from turn structure alone: assistant bodies plus their
    closing end-of-turn."""
    mask = np.zeros(len(tokens), dtype=bool)
    newline = vocab.encode("\n")[0]
    assistant = vocab.role_id("assistant")
    i = 0
    while i < len(tokens):
        if tokens[i] == vocab.im_start_id and i + 2 < len(tokens) and tokens[i + 2] == newline:
            is_assistant = tokens[i + 1] == assistant
            j = i + 3
            while j < len(tokens) and tokens[j] != vocab.im_end_id:
                mask[j] = is_assistant
                j += 1
            if j < len(tokens):
                mask[j] = is_assistant
            i = j + 1
        else:
            i += 1
    return mask


def validate(r: RenderedSequence, vocab: Vocabulary | None = None) -> list[str]:
    """Return human-readable violations of the rendering invariants."""
    vocab = vocab or Vocabulary()
    out: list[str] = []
    toks = np.asarray(r.tokens)

    speech_pos = set(np.flatnonzero(toks == vocab.speech_id).tolist())
    slot_pos = [p for p, _, _ in r.speech_slots]
    if len(set(slot_pos)) != len(slot_pos):
        out.append("duplicate positions in speech_slots")
    for p in sorted(speech_pos - set(slot_pos)):
        out.append(f"slot: <speech> at {p} has no speech_slots entry")
    for p in sorted(set(slot_pos) - speech_pos):
        out.append(f"slot: speech_slots entry at {p} is not a <speech> token")

    open_at = None
    for i, t in enumerate(toks.tolist()):
        if t == vocab.sosp_id:
            if open_at is not None:
                out.append(f"bracket: <sosp> at {open_at} has no matching <eosp>")
            open_at = i
        elif t == vocab.eosp_id:
            if open_at is None:
                out.append(f"bracket: <eosp> at {i} has no matching <sosp>")
            open_at = None
        elif t == vocab.speech_id and open_at is None:
            out.append(f"bracket: <speech> at {i} outside <sosp>/<eosp>")
    if open_at is not None:
        out.append(f"bracket: <sosp> at {open_at} has no matching <eosp>")

    by_seg: dict[int, list[tuple[int, int]]] = defaultdict(list)
    for p, gi, seg in r.speech_slots:
        by_seg[seg].append((p, gi))
    if set(by_seg) - set(range(len(r.groups))):
        out.append("segment: slot refers to a missing segment")
    for seg, gs in enumerate(r.groups):
        entries = sorted(by_seg.get(seg, []))
        if [gi for _, gi in entries] != list(range(len(gs))):
            out.append(f"segment {seg}: slot group indices do not cover its {len(gs)} groups")
        ps = [p for p, _ in entries]
        if ps and ps != list(range(ps[0], ps[0] + len(ps))):
            out.append(f"segment {seg}: slots are not contiguous")

    want = expected_llm_mask(toks, vocab)
    llm_mask = np.asarray(r.llm_mask, dtype=bool)
    if llm_mask.shape != want.shape:
        out.append("mask: llm_mask length differs from token length")
    else:
        for p in np.flatnonzero(llm_mask != want).tolist():
            side = "non-assistant" if llm_mask[p] else "assistant"
            out.append(f"mask: llm_mask wrong on {side} position {p}")
    gm = np.asarray(r.group_mask, dtype=bool)
    if gm.shape != (len(r.speech_slots),):
        out.append("mask: group_mask length differs from slot count")
    elif not gm.all():
        out.append(f"mask: group_mask false on {int((~gm).sum())} slot(s)")
    return out


def load_corpus(path: str | Path, frame_rate_hz: float = 25.0) -> list[Quadruple]:
    with open(path) as fh:
        return [Quadruple.from_json(json.loads(line), frame_rate_hz) for line in fh if line.strip()]


def save_corpus(quads: Iterable[Quadruple], path: str | Path) -> None:
    with open(path, "w") as fh:
        for q in quads:
            fh.write(json.dumps(q.to_json()) + "\n")


def dialogues(quads: Iterable[Quadruple]) -> list[list[Quadruple]]:
    """Group quadruples by ``dialogue_id``, turns in increasing order,
    dialogues in first-appearance order."""
    by_id: dict[str, list[Quadruple]] = {}
    for q in quads:
        by_id.setdefault(q.dialogue_id, []).append(q)
    return [sorted(v, key=lambda q: q.turn) for v in by_id.values()]
