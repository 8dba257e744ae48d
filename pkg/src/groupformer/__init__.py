"""Speech-text language model that predicts speech units in fixed-size groups."""

from .codec import (
    GroupedUnitSequence,
    ReducedSequence,
    SyntheticLexicon,
    UnitSequence,
    expand,
    group,
    reduce,
    synth_units,
    tokens_per_second,
    ungroup,
)
from .decoding import LatencyModel, SamplingParams, decode_turn, decode_turn_reduce, first_audio_latency, sample_token
from .dialogue import Message, Quadruple, Vocabulary, render_dialogue, render_messages, validate
from .harness import ExperimentConfig
from .model import GroupFormer, ModelConfig
from .training import TrainConfig, backward, evaluate_loss, grad_check, train_step

__version__ = "0.1.0"

__all__ = [
    "ExperimentConfig",
    "GroupFormer",
    "GroupedUnitSequence",
    "LatencyModel",
    "Message",
    "ModelConfig",
    "Quadruple",
    "ReducedSequence",
    "SamplingParams",
    "SyntheticLexicon",
    "TrainConfig",
    "UnitSequence",
    "Vocabulary",
    "backward",
    "decode_turn",
    "decode_turn_reduce",
    "evaluate_loss",
    "expand",
    "first_audio_latency",
    "grad_check",
    "group",
    "reduce",
    "render_dialogue",
    "render_messages",
    "sample_token",
    "synth_units",
    "tokens_per_second",
    "train_step",
    "ungroup",
    "validate",
]
