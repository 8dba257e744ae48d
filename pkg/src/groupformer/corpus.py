"""Synthetic multi-turn QA dialogues over a small fixed world.

Every object in the world has a colour, a place and a size, fixed by the
seed. A dialogue opens with a question naming an object; follow-up turns
refer back to it with "it", so the answer depends on the earlier turn.
"""

from __future__ import annotations

import numpy as np

from .codec import SyntheticLexicon, group, reduce, synth_units
from .dialogue import Quadruple

THINGS = (
    "sky", "sea", "sun", "moon", "grass", "snow", "apple", "lemon",
    "cat", "dog", "car", "boat", "tree", "rose", "coal", "milk",
    "frog", "bird", "lamp", "door", "cup", "kite", "hat", "ball",
)
COLOURS = ("red", "blue", "green", "white", "black", "gold", "pink", "grey")
PLACES = ("park", "house", "city", "field", "shop", "lake", "yard", "room")
SIZES = ("big", "small")

OPENERS = {
    "colour": ("what color is the {t}?", "the {t} is {c}."),
    "place": ("where is the {t}?", "the {t} is in the {p}."),
    "size": ("how big is the {t}?", "the {t} is {s}."),
}
FOLLOW_UPS = {
    "colour": ("and what color is it?", "it is {c}."),
    "place": ("and where is it?", "it is in the {p}."),
    "size": ("is it big?", "{yes}, it is {s}."),
}


def world_facts(seed: int) -> dict[str, dict[str, str]]:
    rng = np.random.default_rng([seed, 7])
    return {
        t: {
            "c": COLOURS[int(rng.integers(len(COLOURS)))],
            "p": PLACES[int(rng.integers(len(PLACES)))],
            "s": SIZES[int(rng.integers(len(SIZES)))],
        }
        for t in THINGS
    }


def build_corpus(
    seed: int,
    n_dialogues: int,
    max_turns: int,
    lexicon: SyntheticLexicon,
) -> list[Quadruple]:
    """Deterministic dialogues of 1..max_turns turns each."""
    if n_dialogues < 1:
        raise ValueError("n_dialogues must be >= 1")
    if max_turns < 1:
        raise ValueError("max_turns must be >= 1")
    facts = world_facts(seed)
    rng = np.random.default_rng(seed)
    aspects = list(OPENERS)
    out = []
    for d in range(n_dialogues):
        thing = THINGS[int(rng.integers(len(THINGS)))]
        f = dict(facts[thing], t=thing, yes="yes" if facts[thing]["s"] == "big" else "no")
        n_turns = int(rng.integers(1, max_turns + 1))
        order = [aspects[i] for i in rng.permutation(len(aspects))]
        for turn in range(n_turns):
            aspect = order[turn % len(order)]
            q, a = (OPENERS if turn == 0 else FOLLOW_UPS)[aspect]
            it, rt = q.format(**f), a.format(**f)
            out.append(Quadruple(
                si=synth_units(it, lexicon),
                it=it,
                sr=synth_units(rt, lexicon),
                rt=rt,
                dialogue_id=f"d{d:05d}",
                turn=turn,
            ))
    return out


def corpus_statistics(quads: list[Quadruple], G: int = 5) -> dict:
    """Length statistics for the two reduction strategies over all speech."""
    seqs = [s for q in quads for s in (q.si, q.sr)]
    units = sum(len(s) for s in seqs)
    runs = [len(reduce(s)) for s in seqs]
    grouped = [len(group(s, G)) for s in seqs]
    ratios = [g / r for g, r in zip(grouped, runs)]
    duration = sum(s.duration_seconds for s in seqs)
    text_chars = sum(len(q.it) + len(q.rt) for q in quads)
    return {
        "n_quadruples": len(quads),
        "n_speech_sequences": len(seqs),
        "total_units": units,
        "mean_run_length": units / sum(runs),
        "reduce_tps": sum(runs) / duration,
        "group_tps": seqs[0].frame_rate_hz / G if seqs else float("nan"),
        "text_tps": text_chars / duration,
        "mean_group_to_reduce_ratio": float(np.mean(ratios)),
        "max_group_to_reduce_ratio": float(np.max(ratios)),
        "grouped_never_longer": all(g <= r for g, r in zip(grouped, runs)),
    }
