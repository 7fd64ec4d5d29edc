"""scikit-learn style wrappers around the flow module and the generator.

``X`` is always a list of Dialogue objects; labels live inside the
dialogues, so ``y`` is accepted and ignored. Both estimators hold their
knowledge graph as a constructor parameter.
"""
from __future__ import annotations

from typing import Sequence

from sklearn.base import BaseEstimator

from . import dualflow, generator as gen
from .corpus.schema import Dialogue
from .corpus.vocab import Vocab
from .metrics import bleu, flow_report, generation_report
from .pipeline import flow_guidance, predict_flow
from .training import FLOW_TRAIN_DEFAULTS, GEN_TRAIN_DEFAULTS, TrainConfig, train_flow, train_generator


def _holdout(X: Sequence[Dialogue], fraction: float):
    n_valid = max(1, int(round(len(X) * fraction))) if len(X) > 1 else 0
    return list(X[: len(X) - n_valid]), list(X[len(X) - n_valid:])


class FlowEstimator(BaseEstimator):
    """Dual-flow entity and act predictor.

    ``fit`` keeps the tail ``valid_fraction`` of X for checkpoint selection
    and threshold calibration unless ``valid`` is passed.
    """

    def __init__(self, kg=None, flow_config: dualflow.FlowConfig | None = None,
                 train_config: TrainConfig | None = None, valid_fraction: float = 0.1):
        self.kg = kg
        self.flow_config = flow_config
        self.train_config = train_config
        self.valid_fraction = valid_fraction

    def fit(self, X: Sequence[Dialogue], y=None, valid: Sequence[Dialogue] | None = None):
        if self.kg is None:
            raise ValueError("FlowEstimator needs a knowledge graph (kg=...)")
        train, held = (list(X), list(valid)) if valid is not None else _holdout(X, self.valid_fraction)
        cfg = self.flow_config or dualflow.FlowConfig()
        self.model_ = dualflow.FlowModel(cfg, Vocab.build(train, self.kg.entities), self.kg)
        tcfg = self.train_config or TrainConfig(**FLOW_TRAIN_DEFAULTS)
        self.checkpoint_, self.history_ = train_flow(self.model_, train, held, tcfg)
        return self

    def predict(self, X: Sequence[Dialogue], include_open: bool = False) -> list[dualflow.FlowOutput]:
        return predict_flow(self.model_, X, include_open=include_open)

    def score(self, X: Sequence[Dialogue], y=None) -> float:
        """(Weighted-F1 + R@20) / 2 on X, the same number used for model selection."""
        rep = flow_report(self.predict(X))
        return ((rep.weighted_f1 or 0.0) + (rep.recall20 or 0.0)) / 2


class GeneratorEstimator(BaseEstimator):
    """Response generator guided by a fitted FlowEstimator.

    Training uses gold acts with predicted entities; prediction and scoring
    use predicted acts and entities.
    """

    def __init__(self, flow: FlowEstimator | None = None, gen_config: gen.GenConfig | None = None,
                 train_config: TrainConfig | None = None, valid_fraction: float = 0.1, max_valid: int | None = 200):
        self.flow = flow
        self.gen_config = gen_config
        self.train_config = train_config
        self.valid_fraction = valid_fraction
        self.max_valid = max_valid

    def _examples(self, X, gold_acts: bool):
        fm = self.flow.model_
        return gen.make_examples(X, fm.vocab, self.model_.cfg, flow_guidance(predict_flow(fm, X)), gold_acts=gold_acts)

    def fit(self, X: Sequence[Dialogue], y=None, valid: Sequence[Dialogue] | None = None):
        if self.flow is None or not hasattr(self.flow, "model_"):
            raise ValueError("GeneratorEstimator needs a fitted FlowEstimator (flow=...)")
        train, held = (list(X), list(valid)) if valid is not None else _holdout(X, self.valid_fraction)
        self.model_ = gen.GenModel(self.gen_config or gen.GenConfig(), self.flow.model_.vocab)
        self.checkpoint_, self.history_ = train_generator(
            self.model_, self._examples(train, True), self._examples(held, False),
            self.train_config or TrainConfig(**GEN_TRAIN_DEFAULTS), max_valid=self.max_valid)
        return self

    def predict(self, X: Sequence[Dialogue]) -> list[list[str]]:
        return gen.decode(self.model_, self._examples(X, False))

    def report(self, X: Sequence[Dialogue]):
        exs = self._examples(X, False)
        hyps = gen.decode(self.model_, exs)
        return generation_report(hyps, [e.reference for e in exs], [e.gold_entities for e in exs], self.flow.kg)

    def score(self, X: Sequence[Dialogue], y=None) -> float:
        """Corpus BLEU-4 of the decoded responses."""
        exs = self._examples(X, False)
        return bleu(gen.decode(self.model_, exs), [e.reference for e in exs], 4)
