import sys

import numpy as np
import pytest

from groupformer.codec import SyntheticLexicon, synth_units
from groupformer.dialogue import Quadruple, Vocabulary
from groupformer.model import GroupFormer, ModelConfig

TINY = dict(d=16, n_layers=2, n_heads=2, d_gm=8, n_layers_gm=1, n_heads_gm=2,
            V_u=50, d_emb_unit=4, max_len=256)


def tiny_config(**kw) -> ModelConfig:
    return ModelConfig(**{**TINY, **kw})


@pytest.fixture(scope="session")
def vocab():
    return Vocabulary()


@pytest.fixture(scope="session")
def lexicon():
    return SyntheticLexicon.generate(0)


@pytest.fixture(scope="session")
def small_lexicon():
    return SyntheticLexicon.generate(0, unit_vocab_size=50)


def quad(instr, resp, lex, dialogue_id="0", turn=0):
    return Quadruple(synth_units(instr, lex), instr, synth_units(resp, lex), resp, dialogue_id, turn)


@pytest.fixture
def tiny_model():
    return GroupFormer(tiny_config(seed=3))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
