"""Checkpoint directories: ``manifest.json`` + ``params.bin`` (+ ``kg.tsv`` for flow models).

The manifest lists every parameter as {name, shape, dtype, offset, nbytes}
into a little-endian float32 blob, plus config, vocabulary, thresholds and
the validation metrics recorded at snapshot time.
"""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .corpus.vocab import SPECIALS, Vocab
from .kg import load_kg, save_kg

FORMAT = "dfmed-checkpoint"
VERSION = 1
_BLOB_DTYPE = np.dtype("<f4")


class CheckpointError(ValueError):
    pass


def write_params(state: dict[str, np.ndarray], path: Path) -> list[dict]:
    entries, offset = [], 0
    with open(path, "wb") as fh:
        for name in sorted(state):
            arr = np.ascontiguousarray(state[name], dtype=_BLOB_DTYPE)
            fh.write(arr.tobytes())
            entries.append({"name": name, "shape": list(arr.shape), "dtype": "float32",
                            "offset": offset, "nbytes": arr.nbytes})
            offset += arr.nbytes
    return entries


def read_params(entries: list[dict], path: Path) -> dict[str, np.ndarray]:
    blob = Path(path).read_bytes()
    state = {}
    for e in entries:
        if e.get("dtype") != "float32":
            raise CheckpointError(f"{e['name']}: unsupported dtype {e.get('dtype')!r}")
        end = e["offset"] + e["nbytes"]
        if end > len(blob):
            raise CheckpointError(f"{e['name']}: blob is truncated ({len(blob)} bytes, need {end})")
        arr = np.frombuffer(blob, dtype=_BLOB_DTYPE, count=e["nbytes"] // 4, offset=e["offset"])
        state[e["name"]] = arr.reshape(e["shape"]).copy()
    return state


def save_checkpoint(path: str | Path, kind: str, config: dict, vocab: Vocab, state: dict[str, np.ndarray],
                    thresholds=None, metrics: dict | None = None, step: int = 0, epoch: int = 0,
                    kg=None, extra: dict | None = None) -> Path:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    entries = write_params(state, out / "params.bin")
    manifest = {
        "format": FORMAT, "version": VERSION, "kind": kind, "config": config,
        "vocab": vocab.itos, "params": entries,
        "thresholds": None if thresholds is None else [float(x) for x in thresholds],
        "metrics": metrics or {}, "step": step, "epoch": epoch, "extra": extra or {},
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))
    if kg is not None:
        save_kg(kg, out / "kg.tsv")
    return out


def load_manifest(path: str | Path) -> dict:
    mpath = Path(path) / "manifest.json"
    if not mpath.exists():
        raise CheckpointError(f"{path}: no manifest.json")
    manifest = json.loads(mpath.read_text())
    if manifest.get("format") != FORMAT:
        raise CheckpointError(f"{path}: not a {FORMAT} directory")
    if manifest.get("version") != VERSION:
        raise CheckpointError(f"{path}: version {manifest.get('version')} (this build reads {VERSION})")
    return manifest


def vocab_from_manifest(manifest: dict) -> Vocab:
    itos = manifest["vocab"]
    if itos[: len(SPECIALS)] != SPECIALS:
        raise CheckpointError("vocabulary does not start with the special tokens")
    return Vocab(itos[len(SPECIALS):])


def save_flow(model, path: str | Path, checkpoint=None) -> Path:
    ck = checkpoint
    return save_checkpoint(path, "flow", model.cfg.to_json(), model.vocab, model.params.state_dict(),
                           thresholds=model.thresholds, metrics=ck.metrics if ck else None,
                           step=ck.step if ck else 0, epoch=ck.epoch if ck else 0, kg=model.kg)


def load_flow(path: str | Path):
    from .dualflow import FlowConfig, FlowModel

    manifest = load_manifest(path)
    if manifest["kind"] != "flow":
        raise CheckpointError(f"{path}: holds a {manifest['kind']} model, expected flow")
    model = FlowModel(FlowConfig(**manifest["config"]), vocab_from_manifest(manifest), load_kg(Path(path) / "kg.tsv"))
    model.params.load_state_dict(read_params(manifest["params"], Path(path) / "params.bin"))
    if manifest["thresholds"] is not None:
        model.thresholds = np.array(manifest["thresholds"])
    return model, manifest


def save_generator(model, path: str | Path, checkpoint=None) -> Path:
    ck = checkpoint
    return save_checkpoint(path, "generator", model.cfg.to_json(), model.vocab, model.params.state_dict(),
                           metrics=ck.metrics if ck else None, step=ck.step if ck else 0,
                           epoch=ck.epoch if ck else 0)


def load_generator(path: str | Path):
    from .generator import GenConfig, GenModel

    manifest = load_manifest(path)
    if manifest["kind"] != "generator":
        raise CheckpointError(f"{path}: holds a {manifest['kind']} model, expected generator")
    model = GenModel(GenConfig(**manifest["config"]), vocab_from_manifest(manifest))
    model.params.load_state_dict(read_params(manifest["params"], Path(path) / "params.bin"))
    return model, manifest
