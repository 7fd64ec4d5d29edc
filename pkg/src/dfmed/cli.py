"""Command line entry point: ``dfmed <command> [flags]``.

Commands: gen-corpus, train-flow, calibrate, train-gen, eval, inspect, chat.
Every config field can come from ``--config file.json`` (flat keys) and be
overridden by its own flag.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import checkpoint as ckpt
from . import dualflow, generator as gen
from .corpus.schema import ROLE_DOCTOR, ROLE_PATIENT, Dialogue, Utterance, load_corpus, save_corpus
from .corpus.synth import SynthConfig, generate_synthetic
from .kg import load_kg, match_entities, save_kg
from .metrics import EvalReport, flow_report, generation_report
from .numerics.tensor import no_grad
from .training import (FLOW_TRAIN_DEFAULTS, GEN_TRAIN_DEFAULTS, THRESHOLD_GRID, TrainConfig,
                       calibrate_act_thresholds, flow_predict_feats, split_corpus, train_flow, train_generator)

log = logging.getLogger("dfmed")

REPORT_SCHEMA = "dfmed-eval-report/1"

ABLATIONS = {
    "none": {},
    "no-act-flow": {"act_flow": False},
    "no-entity-flow": {"entity_flow": False},
    "no-interweave": {"entity_attends_act": False, "act_attends_entity": False},
    "no-e2a": {"entity_attends_act": False},
    "no-a2e": {"act_attends_entity": False},
    "no-flow-modeling": {"flow_modeling": False},
    "no-guidance": {},
}


class UsageError(Exception):
    pass


# -- config plumbing ------------------------------------------------------------

_SKIP = {"grammar", "triggers"}


def _add_fields(parser: argparse.ArgumentParser, cls, prefix: str = "", skip=()) -> None:
    for f in dataclasses.fields(cls):
        if f.name in _SKIP or f.name in skip:
            continue
        flag = "--" + prefix + f.name.replace("_", "-")
        dest = (prefix.replace("-", "_") + f.name)
        typ = f.type if isinstance(f.type, str) else getattr(f.type, "__name__", "str")
        if "bool" in typ:
            parser.add_argument(flag, dest=dest, type=_parse_bool, default=None, metavar="BOOL")
        elif "int" in typ:
            parser.add_argument(flag, dest=dest, type=int, default=None)
        elif "float" in typ:
            parser.add_argument(flag, dest=dest, type=float, default=None)
        else:
            parser.add_argument(flag, dest=dest, default=None)


def _parse_bool(s: str) -> bool:
    if s.lower() in ("1", "true", "yes", "on"):
        return True
    if s.lower() in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected a boolean, got {s!r}")


def _build(cls, file_cfg: dict, args, prefix: str = "", defaults: dict | None = None, **forced):
    kw = dict(defaults or {})
    names = {f.name for f in dataclasses.fields(cls)}
    for k, v in file_cfg.items():
        if prefix and k.startswith(prefix.replace("-", "_")):
            k = k[len(prefix):]
        if k in names:
            kw[k] = v
    for name in names:
        v = getattr(args, prefix.replace("-", "_") + name, None)
        if v is not None:
            kw[name] = v
    kw.update(forced)
    return cls(**kw)


def _load_config(args) -> dict:
    if not getattr(args, "config", None):
        return {}
    path = Path(args.config)
    if not path.exists():
        raise FileNotFoundError(f"config file {path} not found")
    cfg = json.loads(path.read_text())
    if not isinstance(cfg, dict):
        raise UsageError("config file must hold a flat JSON object")
    return cfg


def _flow_overrides(args) -> dict:
    out = {}
    if getattr(args, "topk", None) is not None:
        out["top_k"] = args.topk
    if getattr(args, "no_act_flow", False):
        out["act_flow"] = False
    if getattr(args, "no_entity_flow", False):
        out["entity_flow"] = False
    if getattr(args, "no_interweave", False):
        out.update(entity_attends_act=False, act_attends_entity=False)
    if getattr(args, "no_e2a", False):
        out["entity_attends_act"] = False
    if getattr(args, "no_a2e", False):
        out["act_attends_entity"] = False
    if getattr(args, "no_flow_modeling", False):
        out["flow_modeling"] = False
    ablate = getattr(args, "ablate", None)
    if ablate:
        out.update(ABLATIONS[ablate])
    if not out.get("act_flow", True) and not out.get("entity_flow", True):
        raise UsageError("--no-act-flow and --no-entity-flow cannot be combined")
    return out


def _grid(args):
    if getattr(args, "threshold_grid", None):
        try:
            grid = tuple(float(x) for x in args.threshold_grid.split(","))
        except ValueError:
            raise UsageError(f"--threshold-grid must be comma-separated numbers, got {args.threshold_grid!r}")
        if not grid or any(not 0 <= g <= 1 for g in grid):
            raise UsageError("--threshold-grid values must lie in [0, 1]")
        return grid
    return THRESHOLD_GRID


def _data(args):
    d = Path(args.data)
    for name in ("kg.tsv", "corpus.jsonl"):
        if not (d / name).exists():
            raise FileNotFoundError(f"{d / name} not found (run gen-corpus first)")
    kg = load_kg(d / "kg.tsv")
    return kg, load_corpus(d / "corpus.jsonl")


def _write_json(path, obj) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


# -- commands ---------------------------------------------------------------------

def cmd_gen_corpus(args) -> int:
    cfg = _build(SynthConfig, _load_config(args), args)
    kg, corpus, oracle = generate_synthetic(cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_kg(kg, out / "kg.tsv")
    save_corpus(corpus, out / "corpus.jsonl")
    _write_json(out / "oracle.json", oracle.to_json())
    print(f"wrote {len(corpus)} dialogues, {len(kg.entities)} entities to {out}")
    return 0


def _train_flow_model(args, kg, corpus, file_cfg):
    fcfg = _build(dualflow.FlowConfig, file_cfg, args, **_flow_overrides(args))
    tcfg = _build(TrainConfig, file_cfg, args, defaults=FLOW_TRAIN_DEFAULTS)
    train, valid, _ = split_corpus(corpus)
    from .corpus.vocab import Vocab
    model = dualflow.FlowModel(fcfg, Vocab.build(train, kg.entities), kg)
    best, history = train_flow(model, train, valid, tcfg, on_log=print)
    if getattr(args, "threshold_grid", None):
        feats = [dualflow.featurize(d, kg, model.vocab, fcfg) for d in valid]
        _, probs, labels = flow_predict_feats(model, feats)
        model.thresholds = calibrate_act_thresholds(probs, labels, _grid(args))
    return model, best, history


def cmd_train_flow(args) -> int:
    kg, corpus = _data(args)
    model, best, history = _train_flow_model(args, kg, corpus, _load_config(args))
    out = ckpt.save_flow(model, args.out, best)
    _write_json(out / "history.json", history)
    print(f"best epoch {best.epoch}: " + "  ".join(f"{k} {v:.2f}" for k, v in best.metrics.items()))
    print(f"checkpoint written to {out}")
    return 0


def cmd_calibrate(args) -> int:
    kg, corpus = _data(args)
    model, manifest = ckpt.load_flow(args.flow)
    _, valid, _ = split_corpus(corpus)
    feats = [dualflow.featurize(d, kg, model.vocab, model.cfg) for d in valid]
    _, probs, labels = flow_predict_feats(model, feats)
    tau = calibrate_act_thresholds(probs, labels, _grid(args))
    model.thresholds = tau
    ckpt.save_checkpoint(args.flow, "flow", manifest["config"], model.vocab, model.params.state_dict(),
                         thresholds=tau, metrics=manifest["metrics"], step=manifest["step"],
                         epoch=manifest["epoch"], kg=model.kg)
    print("thresholds: " + " ".join(f"{t:.2f}" for t in tau))
    return 0


def _gen_examples(flow, train, valid, test, gcfg):
    from .pipeline import flow_guidance, predict_flow
    return (gen.make_examples(train, flow.vocab, gcfg, flow_guidance(predict_flow(flow, train)), gold_acts=True),
            gen.make_examples(valid, flow.vocab, gcfg, flow_guidance(predict_flow(flow, valid)), gold_acts=False),
            gen.make_examples(test, flow.vocab, gcfg, flow_guidance(predict_flow(flow, test)), gold_acts=False))


def _train_gen_model(args, flow, corpus, file_cfg):
    forced = {"use_guidance": False} if getattr(args, "no_guidance", False) or getattr(args, "ablate", None) == "no-guidance" else {}
    gcfg = _build(gen.GenConfig, file_cfg, args, prefix="gen-", **forced)
    tcfg = _build(TrainConfig, file_cfg, args, prefix="gen-", defaults=GEN_TRAIN_DEFAULTS)
    train, valid, test = split_corpus(corpus)
    tr, va, te = _gen_examples(flow, train, valid, test, gcfg)
    model = gen.GenModel(gcfg, flow.vocab)
    best, history = train_generator(model, tr, va, tcfg, on_log=print, max_valid=args.max_valid)
    return model, best, history, te


def cmd_train_gen(args) -> int:
    kg, corpus = _data(args)
    flow, _ = ckpt.load_flow(args.flow)
    model, best, history, _ = _train_gen_model(args, flow, corpus, _load_config(args))
    out = ckpt.save_generator(model, args.out, best)
    _write_json(out / "history.json", history)
    print(f"checkpoint written to {out}")
    return 0


def cmd_eval(args) -> int:
    kg, corpus = _data(args)
    file_cfg = _load_config(args)
    train, valid, test = split_corpus(corpus)
    if args.flow:
        if args.ablate or any(_flow_overrides(args).values()):
            raise UsageError("ablation flags apply to end-to-end eval; they cannot modify a trained --flow checkpoint")
        flow, _ = ckpt.load_flow(args.flow)
    else:
        flow, _, _ = _train_flow_model(args, kg, corpus, file_cfg)
    from .pipeline import baselines, predict_flow
    outs = predict_flow(flow, test)
    report = flow_report(outs)
    if args.gen:
        model, _ = ckpt.load_generator(args.gen)
        gcfg = model.cfg
        from .pipeline import flow_guidance
        test_ex = gen.make_examples(test, flow.vocab, gcfg, flow_guidance(outs), gold_acts=False)
    elif args.flow_only:
        model, test_ex = None, []
    else:
        model, _, _, test_ex = _train_gen_model(args, flow, corpus, file_cfg)
    if model is not None:
        hyps = gen.decode(model, test_ex)
        generation_report(hyps, [e.reference for e in test_ex], [e.gold_entities for e in test_ex], kg, report)
        if args.dump:
            from .pipeline import write_predictions
            write_predictions(args.dump, test_ex, hyps)
    report.counts["baselines"] = baselines(train, outs)
    payload = {"schema": REPORT_SCHEMA, "ablation": args.ablate or "none", **report.to_json()}
    if args.out:
        _write_json(args.out, payload)
    print(report.table())
    return 0


def cmd_inspect(args) -> int:
    flow, _ = ckpt.load_flow(args.flow)
    corpus = load_corpus(Path(args.data) / "corpus.jsonl")
    match = [d for d in corpus if d.id == args.dialogue]
    if not match:
        raise UsageError(f"dialogue {args.dialogue!r} not in corpus")
    d = match[0]
    outs = flow_predict_feats(flow, [dualflow.featurize(d, flow.kg, flow.vocab, flow.cfg)])[0]
    for o in outs:
        print(f"turn {o.t}")
        order = np.lexsort((np.arange(len(o.scores)), -o.scores))[: flow.cfg.top_k]
        print("  top entities: " + ", ".join(f"{o.candidates[i]} ({o.scores[i]:.2f})" for i in order))
        print("  gold entities: " + ", ".join(o.gold_entities))
        print("  act probs: " + " ".join(f"{a.value}={p:.2f}" for a, p in zip(dualflow.ACTS, o.act_probs)))
        print("  predicted acts: " + ", ".join(a.value for a in o.acts) + "   gold: " + ", ".join(a.value for a in o.gold_acts))
    if args.gen:
        model, _ = ckpt.load_generator(args.gen)
        from .pipeline import flow_guidance
        exs = gen.make_examples([d], flow.vocab, model.cfg, flow_guidance(outs), gold_acts=False)
        batch = gen.collate(exs, flow.vocab)
        with no_grad():
            H_g, H_c = model.encode_batch(batch)
            _, gates = model.decode_states(batch.inputs, H_g, batch.guidance_mask, H_c, batch.history_mask)
        mask = batch.out_mask[..., None]
        for i, g in enumerate(gates):
            if g is None:
                print(f"decoder layer {i}: no gate (guidance off)")
            else:
                print(f"decoder layer {i}: mean gate {float((g.data * mask).sum() / (mask.sum() * g.shape[-1])):.3f}")
    return 0


def _tokenize(line: str) -> list[str]:
    return line.strip().lower().split()


def cmd_chat(args, stdin=None, stdout=None) -> int:
    stdin = stdin or sys.stdin
    stdout = stdout or sys.stdout
    flow, _ = ckpt.load_flow(args.flow)
    model = ckpt.load_generator(args.gen)[0] if args.gen else None
    dialogue = Dialogue("chat", [])
    stdout.write("patient> ")
    stdout.flush()
    for line in stdin:
        toks = _tokenize(line)
        if not toks:
            stdout.write("patient> ")
            stdout.flush()
            continue
        dialogue.utterances.append(Utterance(ROLE_PATIENT, toks, match_entities(toks, flow.kg)))
        feats = dualflow.featurize(dialogue, flow.kg, flow.vocab, flow.cfg, include_open=True)
        out = flow_predict_feats(flow, [feats])[0][-1]
        stdout.write("acts: " + ", ".join(a.value for a in out.acts) + "\n")
        stdout.write("entities: " + ", ".join(out.top_entities) + "\n")
        reply: list[str] = []
        if model is not None:
            ex = gen.GenExample("chat", out.t, gen.history_ids(dialogue, out.t, flow.vocab, model.cfg.max_history),
                                out.acts, out.top_entities, [])
            reply = gen.decode(model, [ex])[0]
            stdout.write("doctor: " + " ".join(reply) + "\n")
        dialogue.utterances.append(Utterance(ROLE_DOCTOR, reply, match_entities(reply, flow.kg), out.acts))
        stdout.write("patient> ")
        stdout.flush()
    stdout.write("\n")
    return 0


# -- parser --------------------------------------------------------------------------

def _ablation_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--no-act-flow", action="store_true")
    p.add_argument("--no-entity-flow", action="store_true")
    p.add_argument("--no-interweave", action="store_true", help="drop both entity<->act cross-attentions")
    p.add_argument("--no-e2a", action="store_true", help="entity flow does not attend to acts")
    p.add_argument("--no-a2e", action="store_true", help="act flow does not attend to entities")
    p.add_argument("--no-flow-modeling", action="store_true", help="rank and classify from the context state")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="dfmed", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-corpus", help="write a synthetic KG, corpus and oracle record")
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    _add_fields(p, SynthConfig)

    def common(p, flow=True, gen_cfg=False):
        p.add_argument("--data", required=True, help="directory with kg.tsv and corpus.jsonl")
        p.add_argument("--config")
        if flow:
            _add_fields(p, dualflow.FlowConfig, skip={"top_k", "seed"})
            _add_fields(p, TrainConfig, skip={"lambda_e", "lambda_a"})
            p.add_argument("--topk", type=int)
            p.add_argument("--threshold-grid", help="comma-separated thresholds, e.g. 0.1,0.2,0.3")
            _ablation_flags(p)
        if gen_cfg:
            _add_fields(p, gen.GenConfig, prefix="gen-")
            _add_fields(p, TrainConfig, prefix="gen-", skip={"seed", "lambda_e", "lambda_a"})  # --gen-seed seeds both
            p.add_argument("--no-guidance", action="store_true")
            p.add_argument("--max-valid", type=int, default=400, help="validation responses decoded per epoch")

    p = sub.add_parser("train-flow", help="train the dual flow module")
    common(p)
    p.add_argument("--out", required=True)

    p = sub.add_parser("calibrate", help="re-select per-act thresholds on the validation split")
    p.add_argument("--data", required=True)
    p.add_argument("--flow", required=True)
    p.add_argument("--threshold-grid")

    p = sub.add_parser("train-gen", help="train the response generator from a flow checkpoint")
    common(p, flow=False, gen_cfg=True)
    p.add_argument("--flow", required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("eval", help="evaluate checkpoints, or train and evaluate end to end")
    common(p, flow=True, gen_cfg=True)
    p.add_argument("--flow")
    p.add_argument("--gen")
    p.add_argument("--flow-only", action="store_true", help="skip the generator")
    p.add_argument("--ablate", choices=sorted(ABLATIONS))
    p.add_argument("--out", help="EvalReport JSON path")
    p.add_argument("--dump", help="prediction JSONL path")

    p = sub.add_parser("inspect", help="per-turn scores, act probabilities and gate statistics")
    p.add_argument("--data", required=True)
    p.add_argument("--flow", required=True)
    p.add_argument("--gen")
    p.add_argument("--dialogue", required=True)

    p = sub.add_parser("chat", help="interactive patient/doctor loop (EOF to quit)")
    p.add_argument("--flow", required=True)
    p.add_argument("--gen")
    return ap


COMMANDS = {
    "gen-corpus": cmd_gen_corpus, "train-flow": cmd_train_flow, "calibrate": cmd_calibrate,
    "train-gen": cmd_train_gen, "eval": cmd_eval, "inspect": cmd_inspect, "chat": cmd_chat,
}


def run(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"dfmed {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except (FileNotFoundError, ckpt.CheckpointError) as exc:
        print(f"dfmed {args.command}: error: {exc}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
