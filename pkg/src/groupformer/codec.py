"""Synthetic speech units and the two length-reduction strategies.

A :class:`SyntheticLexicon` maps every text character to a short run of
discrete unit ids, standing in for a HuBERT tokenizer plus KMeans quantizer.
On top of it sit the two ways of shortening a unit stream before it reaches
the language model:

* grouping: clip ``len % G`` units from the start and cut the rest into
  fixed blocks of ``G`` units, one backbone step per block;
* reducing: collapse adjacent duplicates into one unit and remember the
  run lengths so the original stream can be rebuilt.
"""

from __future__ import annotations

import json
import string
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

DEFAULT_UNIT_VOCAB = 500
DEFAULT_FRAME_RATE = 25.0
DEFAULT_GROUP_SIZE = 5

LEXICON_ALPHABET = string.ascii_lowercase + string.digits + " .,?!'-:;"


@dataclass(frozen=True)
class SyntheticLexicon:
    entries: dict[str, tuple[int, ...]]
    unit_vocab_size: int = DEFAULT_UNIT_VOCAB
    frame_rate_hz: float = DEFAULT_FRAME_RATE
    seed: int | None = None

    def __post_init__(self):
        for ch, units in self.entries.items():
            if len(ch) != 1:
                raise ValueError(f"lexicon keys must be single characters, got {ch!r}")
            if not units:
                raise ValueError(f"character {ch!r} maps to an empty unit sequence")
            for u in units:
                if not 0 <= u < self.unit_vocab_size:
                    raise ValueError(
                        f"unit {u} for {ch!r} outside [0, {self.unit_vocab_size})"
                    )

    @classmethod
    def generate(
        cls,
        seed: int = 0,
        alphabet: str = LEXICON_ALPHABET,
        unit_vocab_size: int = DEFAULT_UNIT_VOCAB,
        frame_rate_hz: float = DEFAULT_FRAME_RATE,
        repeat_fraction: float = 0.3,
    ) -> "SyntheticLexicon":
        """Draw a random lexicon: 1-4 units per character, about
        ``repeat_fraction`` of the characters carrying one internal repeat."""
        rng = np.random.default_rng(seed)
        chars = list(dict.fromkeys(alphabet))
        n_repeat = max(2, int(round(repeat_fraction * len(chars))))
        repeated = set(rng.choice(len(chars), size=n_repeat, replace=False).tolist())
        entries = {}
        for i, ch in enumerate(chars):
            if i in repeated:
                n = int(rng.integers(2, 5))
                units = _distinct_neighbours(rng, n - 1, unit_vocab_size)
                at = int(rng.integers(0, n - 1))
                units.insert(at + 1, units[at])
            else:
                n = int(rng.integers(1, 5))
                units = _distinct_neighbours(rng, n, unit_vocab_size)
            entries[ch] = tuple(units)
        return cls(entries, unit_vocab_size, frame_rate_hz, seed)

    @property
    def alphabet(self) -> str:
        return "".join(self.entries)

    def to_json(self) -> dict:
        out: dict = {ch: list(units) for ch, units in self.entries.items()}
        out["unit_vocab_size"] = self.unit_vocab_size
        out["frame_rate_hz"] = self.frame_rate_hz
        out["seed"] = self.seed
        return out

    @classmethod
    def from_json(cls, obj: dict) -> "SyntheticLexicon":
        obj = dict(obj)
        vocab = int(obj.pop("unit_vocab_size", DEFAULT_UNIT_VOCAB))
        rate = float(obj.pop("frame_rate_hz", DEFAULT_FRAME_RATE))
        seed = obj.pop("seed", None)
        entries = {ch: tuple(int(u) for u in units) for ch, units in obj.items()}
        return cls(entries, vocab, rate, seed)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=1))

    @classmethod
    def load(cls, path: str | Path) -> "SyntheticLexicon":
        return cls.from_json(json.loads(Path(path).read_text()))


def _distinct_neighbours(rng: np.random.Generator, n: int, vocab: int) -> list[int]:
    units: list[int] = []
    while len(units) < n:
        u = int(rng.integers(0, vocab))
        if not units or units[-1] != u:
            units.append(u)
    return units


@dataclass(frozen=True)
class UnitSequence:
    units: tuple[int, ...]
    frame_rate_hz: float = DEFAULT_FRAME_RATE

    def __post_init__(self):
        object.__setattr__(self, "units", tuple(int(u) for u in self.units))

    def __len__(self) -> int:
        return len(self.units)

    @property
    def duration_seconds(self) -> float:
        return len(self.units) / self.frame_rate_hz


@dataclass(frozen=True)
class GroupedUnitSequence:
    """Fixed-size blocks of units.

    ``clipped_prefix_len`` units were dropped from the start to make the
    length a multiple of ``group_size``; ``pad_len`` counts units that were
    prepended (copies of the first unit) when the input was shorter than one
    group.
    """

    groups: tuple[tuple[int, ...], ...]
    group_size: int
    clipped_prefix_len: int = 0
    pad_len: int = 0
    frame_rate_hz: float = DEFAULT_FRAME_RATE

    def __post_init__(self):
        groups = tuple(tuple(int(u) for u in g) for g in self.groups)
        object.__setattr__(self, "groups", groups)
        if self.group_size < 1:
            raise ValueError("group_size must be >= 1")
        for g in groups:
            if len(g) != self.group_size:
                raise ValueError(
                    f"group {g} has {len(g)} units, expected {self.group_size}"
                )
        if not 0 <= self.clipped_prefix_len < self.group_size:
            raise ValueError("clipped_prefix_len must lie in [0, group_size)")
        if self.pad_len < 0:
            raise ValueError("pad_len must be non-negative")

    def __len__(self) -> int:
        return len(self.groups)

    def as_array(self) -> np.ndarray:
        return np.asarray(self.groups, dtype=np.int64).reshape(len(self.groups), self.group_size)


@dataclass(frozen=True)
class ReducedSequence:
    unique_units: tuple[int, ...]
    run_lengths: tuple[int, ...]
    frame_rate_hz: float = DEFAULT_FRAME_RATE

    def __post_init__(self):
        object.__setattr__(self, "unique_units", tuple(int(u) for u in self.unique_units))
        object.__setattr__(self, "run_lengths", tuple(int(r) for r in self.run_lengths))

    def __len__(self) -> int:
        return len(self.unique_units)


def synth_units(text: str, lexicon: SyntheticLexicon) -> UnitSequence:
    units: list[int] = []
    for ch in text:
        try:
            units.extend(lexicon.entries[ch])
        except KeyError:
            raise ValueError(f"character {ch!r} is not in the lexicon") from None
    return UnitSequence(tuple(units), lexicon.frame_rate_hz)


def group(seq: UnitSequence | Sequence[int], G: int = DEFAULT_GROUP_SIZE) -> GroupedUnitSequence:
    """Clip ``len % G`` leading units and split the rest into groups of G.

    Inputs shorter than one group (but non-empty) are left-padded with copies
    of their first unit instead; an empty input yields zero groups.
    """
    if G <= 0:
        raise ValueError(f"group size must be positive, got {G}")
    units, rate = _units_and_rate(seq)
    pad = 0
    if 0 < len(units) < G:
        pad = G - len(units)
        units = (units[0],) * pad + units
    clip = len(units) % G
    body = units[clip:]
    groups = tuple(body[i : i + G] for i in range(0, len(body), G))
    return GroupedUnitSequence(groups, G, clip, pad, rate)


def ungroup(gs: GroupedUnitSequence) -> UnitSequence:
    return UnitSequence(tuple(u for g in gs.groups for u in g), gs.frame_rate_hz)


def reduce(seq: UnitSequence | Sequence[int]) -> ReducedSequence:
    units, rate = _units_and_rate(seq)
    if not units:
        return ReducedSequence((), (), rate)
    arr = np.asarray(units)
    starts = np.flatnonzero(np.r_[True, arr[1:] != arr[:-1]])
    runs = np.diff(np.r_[starts, len(arr)])
    return ReducedSequence(tuple(arr[starts].tolist()), tuple(runs.tolist()), rate)


def expand(rs: ReducedSequence) -> UnitSequence:
    if len(rs.unique_units) != len(rs.run_lengths):
        raise ValueError(
            f"{len(rs.unique_units)} unique units but {len(rs.run_lengths)} run lengths"
        )
    if any(r <= 0 for r in rs.run_lengths):
        raise ValueError("run lengths must be positive")
    units = np.repeat(np.asarray(rs.unique_units, dtype=np.int64), rs.run_lengths)
    return UnitSequence(tuple(units.tolist()), rs.frame_rate_hz)


def tokens_per_second(strategy: str, seq: UnitSequence, G: int = DEFAULT_GROUP_SIZE) -> float:
    """Backbone steps per second of audio under a length-reduction strategy."""
    if len(seq) == 0:
        raise ValueError("TPS is undefined for an empty sequence")
    if strategy == "none":
        return float(seq.frame_rate_hz)
    if strategy == "group":
        if G <= 0:
            raise ValueError(f"group size must be positive, got {G}")
        return seq.frame_rate_hz / G
    if strategy == "reduce":
        return len(reduce(seq)) / seq.duration_seconds
    raise ValueError(f"unknown strategy {strategy!r}")


def mean_run_length(seqs: Sequence[UnitSequence]) -> float:
    total = sum(len(s) for s in seqs)
    runs = sum(len(reduce(s)) for s in seqs)
    return total / runs if runs else float("nan")


def _units_and_rate(seq) -> tuple[tuple[int, ...], float]:
    if isinstance(seq, UnitSequence):
        return seq.units, seq.frame_rate_hz
    return tuple(int(u) for u in seq), DEFAULT_FRAME_RATE
