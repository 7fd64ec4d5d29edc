import pytest
from sklearn.base import clone

from dfmed.dualflow import FlowConfig
from dfmed.estimators import FlowEstimator, GeneratorEstimator
from dfmed.generator import GenConfig
from dfmed.training import TrainConfig


def test_flow_and_generator_estimators(small_world):
    kg, corpus, _, _ = small_world
    flow = FlowEstimator(kg, FlowConfig(d_model=16, gat_heads=2, ctx_layers=1, ctx_heads=2),
                         TrainConfig(lr=1e-2, epochs=2, warmup_steps=5))
    assert flow.fit(corpus[:30]) is flow
    outs = flow.predict(corpus[30:33])
    assert len(outs) == sum(d.n_doctor_turns for d in corpus[30:33])
    assert 0.0 <= flow.score(corpus[30:]) <= 100.0
    fresh = clone(flow)
    assert fresh.get_params()["kg"] == kg and not hasattr(fresh, "model_")

    g = GeneratorEstimator(flow, GenConfig(d_model=16, n_heads=2, enc_layers=1, dec_layers=1, max_len=6),
                           TrainConfig(lr=1e-2, epochs=1, warmup_steps=5), max_valid=4)
    g.fit(corpus[:30])
    hyps = g.predict(corpus[30:32])
    assert len(hyps) == sum(d.n_doctor_turns for d in corpus[30:32])
    assert 0.0 <= g.score(corpus[30:32]) <= 100.0
    assert g.report(corpus[30:32]).bleu1 is not None


def test_estimators_require_their_inputs(small_world):
    with pytest.raises(ValueError, match="knowledge graph"):
        FlowEstimator().fit(small_world[1][:4])
    with pytest.raises(ValueError, match="fitted FlowEstimator"):
        GeneratorEstimator(FlowEstimator(small_world[0])).fit(small_world[1][:4])
