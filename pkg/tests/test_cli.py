import io
import json
from argparse import Namespace

import numpy as np
import pytest

from dfmed import checkpoint as ckpt, cli
from dfmed.kg import load_kg, one_hop

TINY_FLOW = ["--d-model", "16", "--gat-heads", "2", "--ctx-layers", "1", "--ctx-heads", "2",
             "--epochs", "2", "--lr", "0.01", "--warmup-steps", "5"]
TINY_GEN = ["--gen-d-model", "16", "--gen-n-heads", "2", "--gen-enc-layers", "1", "--gen-dec-layers", "1",
            "--gen-epochs", "1", "--gen-max-len", "8", "--gen-lr", "0.01", "--max-valid", "5"]


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    data = root / "data"
    assert cli.run(["gen-corpus", "--out", str(data), "--seed", "5", "--n-dialogues", "40", "--n-entities", "30",
                    "--max-turns", "5", "--p-hop", "1.0"]) == 0
    assert cli.run(["train-flow", "--data", str(data), "--out", str(root / "flow"), *TINY_FLOW]) == 0
    assert cli.run(["train-gen", "--data", str(data), "--flow", str(root / "flow"), "--out", str(root / "gen"),
                    *TINY_GEN]) == 0
    return root


def test_gen_corpus_is_deterministic(tmp_path):
    for name in ("a", "b"):
        assert cli.run(["gen-corpus", "--out", str(tmp_path / name), "--seed", "7", "--n-dialogues", "200"]) == 0
    for f in ("kg.tsv", "corpus.jsonl", "oracle.json"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()
    assert len((tmp_path / "a" / "corpus.jsonl").read_text().splitlines()) == 200


def test_config_file_and_flag_override(tmp_path):
    (tmp_path / "c.json").write_text(json.dumps({"n_dialogues": 12, "n_entities": 20, "seed": 1}))
    assert cli.run(["gen-corpus", "--out", str(tmp_path / "o"), "--config", str(tmp_path / "c.json"),
                    "--n-dialogues", "9"]) == 0
    assert len((tmp_path / "o" / "corpus.jsonl").read_text().splitlines()) == 9
    assert len(load_kg(tmp_path / "o" / "kg.tsv").entities) == 20


def test_checkpoints_written(workspace):
    for name in ("flow", "gen"):
        manifest = json.loads((workspace / name / "manifest.json").read_text())
        assert manifest["format"] == "dfmed-checkpoint"
        assert (workspace / name / "history.json").exists()
    assert len(json.loads((workspace / "flow" / "manifest.json").read_text())["thresholds"]) == 7


def test_eval_from_checkpoints_and_dump(workspace, capsys):
    out, dump = workspace / "report.json", workspace / "pred.jsonl"
    assert cli.run(["eval", "--data", str(workspace / "data"), "--flow", str(workspace / "flow"),
                    "--gen", str(workspace / "gen"), "--out", str(out), "--dump", str(dump)]) == 0
    report = json.loads(out.read_text())
    assert report["schema"] == "dfmed-eval-report/1"
    for key in ("bleu1", "bleu2", "bleu4", "rouge1", "rouge2", "entity_p", "entity_r", "entity_f1",
                "recall20", "weighted_f1"):
        assert 0.0 <= report[key] <= 100.0
    lines = dump.read_text().splitlines()
    assert lines and {"hypothesis", "reference", "acts", "entities"} <= set(json.loads(lines[0]))
    assert "Weighted-F1" in capsys.readouterr().out


def test_eval_end_to_end_ablation(workspace, tmp_path, capsys):
    out = tmp_path / "abl.json"
    assert cli.run(["eval", "--data", str(workspace / "data"), "--ablate", "no-interweave", "--out", str(out),
                    *TINY_FLOW, *TINY_GEN]) == 0
    report = json.loads(out.read_text())
    assert report["ablation"] == "no-interweave"
    header = capsys.readouterr().out.strip().splitlines()[-2].split()
    assert header == ["B-1", "B-2", "B-4", "R-1", "R-2", "E-P", "E-R", "E-F1", "R@20", "Weighted-F1"]
    assert all(report[k] is not None for k in ("bleu4", "entity_f1", "recall20", "weighted_f1"))


def test_eval_is_repeatable(workspace, tmp_path):
    args = ["eval", "--data", str(workspace / "data"), "--flow", str(workspace / "flow"), "--flow-only"]
    assert cli.run(args + ["--out", str(tmp_path / "a.json")]) == 0
    assert cli.run(args + ["--out", str(tmp_path / "b.json")]) == 0
    assert (tmp_path / "a.json").read_text() == (tmp_path / "b.json").read_text()


def test_calibrate_rewrites_thresholds(workspace, tmp_path):
    import shutil
    flow = tmp_path / "flow"
    shutil.copytree(workspace / "flow", flow)
    assert cli.run(["calibrate", "--data", str(workspace / "data"), "--flow", str(flow),
                    "--threshold-grid", "0.3,0.6"]) == 0
    model, _ = ckpt.load_flow(flow)
    assert set(np.round(model.thresholds, 2)) <= {0.3, 0.6, 0.5}


def test_inspect_prints_turns_and_gates(workspace, capsys):
    first = json.loads((workspace / "data" / "corpus.jsonl").read_text().splitlines()[0])["id"]
    assert cli.run(["inspect", "--data", str(workspace / "data"), "--flow", str(workspace / "flow"),
                    "--gen", str(workspace / "gen"), "--dialogue", first]) == 0
    text = capsys.readouterr().out
    assert "turn 1" in text and "act probs" in text and "mean gate" in text


def test_chat_lists_one_hop_neighbor(workspace):
    flow, _ = ckpt.load_flow(workspace / "flow")
    seed = flow.kg.entities[0]
    stdin = io.StringIO(f"i have {seed} since yesterday\n\nand it got worse\n")
    stdout = io.StringIO()
    args = Namespace(flow=str(workspace / "flow"), gen=str(workspace / "gen"))
    assert cli.cmd_chat(args, stdin, stdout) == 0
    lines = stdout.getvalue().splitlines()
    ents = [ln[len("entities: "):].split(", ") for ln in lines if ln.startswith("entities: ")]
    assert len(ents) == 2
    assert set(ents[0]) & one_hop(flow.kg, {seed})
    assert sum(ln.startswith("doctor: ") for ln in lines) == 2


@pytest.mark.parametrize("argv,code", [
    (["train-flow", "--data", "/nonexistent", "--out", "/tmp/x"], 1),
    (["eval", "--data", "{data}", "--no-act-flow", "--no-entity-flow"], 2),
    (["eval", "--data", "{data}", "--flow", "{flow}", "--ablate", "no-e2a"], 2),
    (["eval", "--data", "{data}", "--flow", "{flow}", "--threshold-grid", "0.2,abc", "--flow-only"], 0),
    (["inspect", "--data", "{data}", "--flow", "{flow}", "--dialogue", "missing"], 2),
    (["calibrate", "--data", "{data}", "--flow", "{data}"], 1),
    (["gen-corpus", "--out", "{tmp}/g", "--config", "/nonexistent.json"], 1),
])
def test_exit_codes(workspace, tmp_path, argv, code):
    subst = {"data": str(workspace / "data"), "flow": str(workspace / "flow"), "tmp": str(tmp_path)}
    assert cli.run([a.format(**subst) for a in argv]) == code


def test_missing_required_flag_is_usage_error():
    with pytest.raises(SystemExit) as exc:
        cli.run(["train-flow", "--out", "x"])
    assert exc.value.code == 2


def test_flow_checkpoint_roundtrip(workspace, tmp_path):
    from dfmed.pipeline import predict_flow
    from dfmed.corpus.schema import load_corpus
    model, manifest = ckpt.load_flow(workspace / "flow")
    corpus = load_corpus(workspace / "data" / "corpus.jsonl")[:3]
    ckpt.save_flow(model, tmp_path / "again")
    again, _ = ckpt.load_flow(tmp_path / "again")
    for a, b in zip(predict_flow(model, corpus), predict_flow(again, corpus)):
        np.testing.assert_array_equal(a.scores, b.scores)
        assert a.acts == b.acts
    np.testing.assert_array_equal(model.thresholds, again.thresholds)
    assert (tmp_path / "again" / "params.bin").read_bytes() == (workspace / "flow" / "params.bin").read_bytes()


def test_checkpoint_errors(workspace, tmp_path):
    import shutil
    with pytest.raises(ckpt.CheckpointError, match="expected flow"):
        ckpt.load_flow(workspace / "gen")
    bad = tmp_path / "bad"
    shutil.copytree(workspace / "gen", bad)
    blob = (bad / "params.bin").read_bytes()
    (bad / "params.bin").write_bytes(blob[: len(blob) // 2])
    with pytest.raises(ckpt.CheckpointError, match="truncated"):
        ckpt.load_generator(bad)
    m = json.loads((bad / "manifest.json").read_text())
    m["version"] = 99
    (bad / "manifest.json").write_text(json.dumps(m))
    with pytest.raises(ckpt.CheckpointError, match="version"):
        ckpt.load_generator(bad)
