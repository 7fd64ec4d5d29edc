"""Dialogue corpus: data model, persistence, examples, synthetic generation."""
from .examples import DialogueGraphs, TrainingExample, build_examples, dialogue_graphs
from .schema import (
    ACTS,
    N_ACTS,
    PRIVACY_PLACEHOLDERS,
    ActLabel,
    CorpusFormatError,
    Dialogue,
    Utterance,
    filter_privacy,
    load_corpus,
    save_corpus,
)
from .synth import PlantedDynamics, SynthConfig, SynthConfigError, generate_synthetic
from .vocab import Vocab, role_tagged

__all__ = [
    "ACTS", "N_ACTS", "PRIVACY_PLACEHOLDERS", "ActLabel", "CorpusFormatError", "Dialogue",
    "DialogueGraphs", "PlantedDynamics", "SynthConfig", "SynthConfigError", "TrainingExample",
    "Utterance", "Vocab", "build_examples", "dialogue_graphs", "filter_privacy",
    "generate_synthetic", "load_corpus", "role_tagged", "save_corpus",
]
