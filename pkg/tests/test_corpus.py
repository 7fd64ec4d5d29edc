import json
from collections import Counter

import pytest

from dfmed.corpus.examples import build_examples
from dfmed.corpus.schema import (ACTS, ActLabel, CorpusFormatError, Dialogue, Utterance, filter_privacy,
                                 load_corpus, save_corpus)
from dfmed.corpus.synth import SynthConfig, SynthConfigError, generate_synthetic
from dfmed.corpus.vocab import SPECIALS, Vocab
from dfmed.kg import one_hop


def test_seven_acts_with_reserved_tokens():
    assert len(ACTS) == 7
    assert len({a.token for a in ACTS}) == 7
    assert ActLabel.INQUIRE.token == "[ACT_INQUIRE]"
    assert all(a.token in SPECIALS for a in ACTS)


def test_empty_corpus_file(tmp_path):
    (tmp_path / "c.jsonl").write_text("")
    assert load_corpus(tmp_path / "c.jsonl") == []


def test_roundtrip_minimal_dialogue(tmp_path, toy):
    d = toy(1)
    save_corpus([d], tmp_path / "c.jsonl")
    line = (tmp_path / "c.jsonl").read_text()
    assert load_corpus(tmp_path / "c.jsonl") == [d]
    assert json.loads(line) == d.to_json()
    save_corpus(load_corpus(tmp_path / "c.jsonl"), tmp_path / "d.jsonl")
    assert (tmp_path / "d.jsonl").read_text() == line


def test_doctor_without_acts_rejected(tmp_path):
    bad = {"id": "x", "utterances": [
        {"role": "patient", "tokens": ["hi"], "entities": [], "acts": []},
        {"role": "doctor", "tokens": ["ok"], "entities": [], "acts": []}]}
    (tmp_path / "c.jsonl").write_text(json.dumps(bad) + "\n")
    with pytest.raises(CorpusFormatError, match=r"x.*acts"):
        load_corpus(tmp_path / "c.jsonl")


@pytest.mark.parametrize("utts,field", [
    ([{"role": "doctor", "tokens": [], "entities": [], "acts": ["Inform"]},
      {"role": "patient", "tokens": [], "entities": [], "acts": []}], "role"),
    ([{"role": "patient", "tokens": [], "entities": []}], "acts"),
    ([{"role": "patient", "tokens": [], "entities": [], "acts": []},
      {"role": "doctor", "tokens": [], "entities": [], "acts": ["Gossip"]}], "acts"),
])
def test_schema_errors_name_the_field(tmp_path, utts, field):
    (tmp_path / "c.jsonl").write_text(json.dumps({"id": "d7", "utterances": utts}) + "\n")
    with pytest.raises(CorpusFormatError, match=field):
        load_corpus(tmp_path / "c.jsonl")


def _with_text(text):
    return Dialogue("p", [Utterance("patient", text.split(), []), Utterance("doctor", ["ok"], [], ["Inform"])])


def test_privacy_filter():
    assert not filter_privacy(_with_text("The image is not available for privacy concerns."))
    assert filter_privacy(_with_text("i have a cough"))
    assert not filter_privacy(_with_text("see above the image is not available for privacy concerns . thanks"))


def test_build_examples_per_doctor_turn(chain_kg, toy):
    exs = build_examples(toy(2), chain_kg)
    assert [e.t for e in exs] == [1, 2]
    assert exs[0].act_history == []
    assert exs[1].act_history == [[ActLabel.INQUIRE, ActLabel.CHITCHAT]]
    for e in exs:
        assert e.history[-1].role == "patient"
        assert set(e.target_entities) <= set(e.candidates)


def test_unreachable_gold_is_flagged(chain_kg):
    d = Dialogue("u", [Utterance("patient", ["a"], ["a"]),
                       Utterance("doctor", ["d", "b"], ["d", "b"], ["Inform"])])
    (ex,) = build_examples(d, chain_kg)
    assert ex.target_entities == ["b"]
    assert ex.gold_entities == ["d", "b"]
    assert ex.unreachable == ["d"]


def test_synthetic_is_deterministic(tmp_path):
    cfg = SynthConfig(n_entities=20, n_dialogues=15, seed=5)
    _, c1, o1 = generate_synthetic(cfg)
    _, c2, o2 = generate_synthetic(SynthConfig(n_entities=20, n_dialogues=15, seed=5))
    save_corpus(c1, tmp_path / "a.jsonl")
    save_corpus(c2, tmp_path / "b.jsonl")
    assert (tmp_path / "a.jsonl").read_bytes() == (tmp_path / "b.jsonl").read_bytes()
    assert o1 == o2


def test_synthetic_dialogues_are_valid(small_world):
    kg, corpus, oracle, _ = small_world
    for d in corpus:
        d.validate()
        assert len(build_examples(d, kg)) == d.n_doctor_turns
        assert d.utterances[-1].role == "doctor"
        assert oracle.state_sequences[d.id][0] == "open"
        assert set(d.utterances[1].acts) == {ActLabel.CHITCHAT, ActLabel.INQUIRE}


def test_synthetic_kg_is_regular(small_world):
    kg = small_world[0]
    assert {kg.degree(e) for e in kg.entities} == {4}


def test_p_hop_one_gives_one_hop_mentions():
    kg, corpus, _ = generate_synthetic(SynthConfig(n_entities=40, n_dialogues=60, p_hop=1.0, seed=11))
    for d in corpus:
        seen = set(d.utterances[0].entities)
        for u in d.utterances[1:]:
            for e in u.entities:
                assert e in one_hop(kg, seen) or e in seen
            seen |= set(u.entities)


def test_act_shares_near_target_profile():
    _, corpus, _ = generate_synthetic(SynthConfig(n_dialogues=1500, seed=7))
    turns = [u for d in corpus for u in d.utterances if u.role == "doctor"]
    assert len(turns) >= 10_000
    counts = Counter(a for u in turns for a in u.acts)
    share = counts[ActLabel.INQUIRE] / sum(counts.values())
    assert abs(share - 0.25) <= 0.03


@pytest.mark.parametrize("kw", [{"p_hop": 1.5}, {"n_entities": 5, "kg_degree": 3},
                                {"grammar": {"open": {"inquire": 0.5}}}])
def test_bad_synth_config(kw):
    with pytest.raises(SynthConfigError):
        generate_synthetic(SynthConfig(**kw))


def test_vocab_roundtrip(small_world):
    _, corpus, _, vocab = small_world
    toks = corpus[0].utterances[0].tokens
    assert vocab.decode(vocab.encode(toks)) == toks
    assert vocab.encode(["never-seen-token"]) == [vocab.unk_id]
    assert Vocab(vocab.itos[len(SPECIALS):]).itos == vocab.itos
