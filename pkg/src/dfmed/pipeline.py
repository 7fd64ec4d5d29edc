"""End-to-end runs: corpus -> flow training -> guidance -> generator training -> EvalReport."""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import dualflow, generator as gen
from .corpus.schema import Dialogue
from .corpus.synth import SynthConfig, generate_synthetic
from .corpus.vocab import Vocab
from .kg import KnowledgeGraph
from .metrics import (EvalReport, flow_report, generation_report, majority_act_baseline,
                      random_recall_baseline)
from .training import TrainConfig, flow_predict_feats, split_corpus, train_flow, train_generator

log = logging.getLogger(__name__)


@dataclass
class RunResult:
    report: EvalReport
    flow: dualflow.FlowModel
    generator: gen.GenModel | None
    flow_outputs: list
    hypotheses: list = field(default_factory=list)
    test_examples: list = field(default_factory=list)
    baselines: dict = field(default_factory=dict)
    history: dict = field(default_factory=dict)


def flow_guidance(outputs: Sequence[dualflow.FlowOutput]) -> dict:
    """(dialogue id, t) -> (predicted acts, top-k entities)."""
    return {(o.dialogue_id, o.t): (o.acts, o.top_entities) for o in outputs}


def predict_flow(model: dualflow.FlowModel, dialogues: Sequence[Dialogue], include_open: bool = False):
    feats = [dualflow.featurize(d, model.kg, model.vocab, model.cfg, include_open=include_open) for d in dialogues]
    return flow_predict_feats(model, feats)[0]


def baselines(train: Sequence[Dialogue], outputs: Sequence[dualflow.FlowOutput]) -> dict:
    labeled = [o for o in outputs if o.gold_acts]
    rnd = random_recall_baseline([len(o.candidates) for o in labeled], [len(o.reachable_gold) for o in labeled])
    train_acts = [u.acts for d in train for u in d.utterances if u.role == "doctor"]
    maj, act = majority_act_baseline(train_acts, [o.gold_acts for o in labeled])
    return {"random_recall20": rnd, "majority_weighted_f1": maj, "majority_act": act.value}


def run_flow(corpus: Sequence[Dialogue], kg: KnowledgeGraph, flow_cfg: dualflow.FlowConfig,
             train_cfg: TrainConfig, vocab: Vocab | None = None):
    """Split, train the flow model, and evaluate it on the test split."""
    train, valid, test = split_corpus(corpus)
    vocab = vocab or Vocab.build(train, kg.entities)
    model = dualflow.FlowModel(flow_cfg, vocab, kg)
    best, history = train_flow(model, train, valid, train_cfg)
    outs = predict_flow(model, test)
    report = flow_report(outs)
    return model, best, history, outs, report, baselines(train, outs)


def run_pipeline(corpus: Sequence[Dialogue], kg: KnowledgeGraph, flow_cfg: dualflow.FlowConfig,
                 flow_train: TrainConfig, gen_cfg: gen.GenConfig, gen_train: TrainConfig,
                 max_valid: int | None = 400, dump: str | Path | None = None) -> RunResult:
    train, valid, test = split_corpus(corpus)
    flow, best, hist_f, test_outs, report, base = run_flow(corpus, kg, flow_cfg, flow_train)
    vocab = flow.vocab

    # guidance: gold acts + predicted entities for training, predictions for valid/test
    train_g = flow_guidance(predict_flow(flow, train))
    valid_g = flow_guidance(predict_flow(flow, valid))
    test_g = flow_guidance(test_outs)
    train_ex = gen.make_examples(train, vocab, gen_cfg, train_g, gold_acts=True)
    valid_ex = gen.make_examples(valid, vocab, gen_cfg, valid_g, gold_acts=False)
    test_ex = gen.make_examples(test, vocab, gen_cfg, test_g, gold_acts=False)

    model = gen.GenModel(gen_cfg, vocab)
    _, hist_g = train_generator(model, train_ex, valid_ex, gen_train, max_valid=max_valid)
    hyps = gen.decode(model, test_ex)
    generation_report(hyps, [e.reference for e in test_ex], [e.gold_entities for e in test_ex], kg, report)
    if dump:
        write_predictions(dump, test_ex, hyps)
    return RunResult(report, flow, model, test_outs, hyps, test_ex, base, {"flow": hist_f, "generator": hist_g})


def write_predictions(path: str | Path, examples: Sequence[gen.GenExample], hypotheses: Sequence[Sequence[str]]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for e, h in zip(examples, hypotheses):
            fh.write(json.dumps({"id": e.dialogue_id, "t": e.t, "acts": [a.value for a in e.acts],
                                 "entities": list(e.entities), "hypothesis": list(h),
                                 "reference": list(e.reference)}, sort_keys=True) + "\n")


def synthetic_run(synth: SynthConfig, flow_cfg: dualflow.FlowConfig, flow_train: TrainConfig,
                  gen_cfg: gen.GenConfig, gen_train: TrainConfig, **kw) -> RunResult:
    kg, corpus, _ = generate_synthetic(synth)
    return run_pipeline(corpus, kg, flow_cfg, flow_train, gen_cfg, gen_train, **kw)
