"""Optimizer, learning-rate schedule, threshold calibration, and training loops."""
from __future__ import annotations

import logging
import math
import time
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

from .corpus.schema import N_ACTS, Dialogue
from .numerics.nn import ParamStore
from .numerics.tensor import Tensor

log = logging.getLogger(__name__)

THRESHOLD_GRID = tuple(round(0.05 * i, 2) for i in range(1, 20))


class TrainingDivergedError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    lr: float = 2e-3
    batch_size: int = 16
    warmup_steps: int = 100
    epochs: int = 10
    weight_decay: float = 0.01
    clip_norm: float = 1.0
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    lambda_e: float | None = None
    lambda_a: float | None = None

    def validate(self) -> None:
        if not self.lr > 0:
            raise ValueError("lr must be > 0")
        if self.warmup_steps < 0:
            raise ValueError("warmup_steps must be >= 0")
        if self.batch_size < 1 or self.epochs < 0:
            raise ValueError("batch_size must be >= 1 and epochs >= 0")

    def to_json(self) -> dict:
        return asdict(self)


# per-model starting points for training from scratch; TrainConfig's own defaults are model-agnostic
FLOW_TRAIN_DEFAULTS = {"lr": 1e-2, "warmup_steps": 50}
GEN_TRAIN_DEFAULTS = {"lr": 3e-3, "batch_size": 32}


@dataclass
class AdamState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    skipped: int = 0


def clip_grad_norm(grads: dict[str, np.ndarray], max_norm: float) -> float:
    """Scale grads in place so their global L2 norm is at most ``max_norm``; returns the pre-clip norm."""
    total = math.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads.values()))
    if max_norm > 0 and math.isfinite(total) and total > max_norm:
        scale = max_norm / (total + 1e-12)
        for g in grads.values():
            g *= scale
    return total


def adamw_step(params: dict[str, Tensor], grads: dict[str, np.ndarray], state: AdamState,
               cfg: TrainConfig, lr: float | None = None) -> bool:
    """One AdamW update with decoupled weight decay. Returns False (and skips) on non-finite grads."""
    lr = cfg.lr if lr is None else lr
    norm = clip_grad_norm(grads, cfg.clip_norm)
    if not math.isfinite(norm):
        state.skipped += 1
        log.warning("non-finite gradient norm at step %d; update skipped", state.step)
        return False
    state.step += 1
    t = state.step
    b1, b2 = cfg.beta1, cfg.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        update = (m / c1) / (np.sqrt(v / c2) + cfg.eps)
        p.data -= (lr * (update + cfg.weight_decay * p.data)).astype(p.data.dtype)
    return True


def lr_schedule(step: int, base_lr: float, warmup: int, total: int) -> float:
    """Linear warmup to ``base_lr`` over ``warmup`` steps, then linear decay to 0 at ``total``."""
    if step < 0:
        raise ValueError("step must be >= 0")
    if warmup > 0 and step < warmup:
        return base_lr * step / warmup
    if total <= warmup:
        return base_lr
    return base_lr * max(0.0, (total - step) / (total - warmup))


def calibrate_act_thresholds(probs: np.ndarray, labels: np.ndarray,
                             grid: Sequence[float] = THRESHOLD_GRID) -> np.ndarray:
    """Per-act threshold maximizing that act's F1 on (probs, labels); ties go to the lower value.

    Acts with no positive label keep 0.5.
    """
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels) > 0.5
    if probs.shape != labels.shape or probs.ndim != 2:
        raise ValueError(f"calibrate: probs {probs.shape} vs labels {labels.shape}")
    tau = np.full(probs.shape[1], 0.5)
    for j in range(probs.shape[1]):
        y = labels[:, j]
        if not y.any():
            log.warning("act %d absent from calibration data; threshold stays 0.5", j)
            continue
        best_f, best_t = -1.0, 0.5
        for t in sorted(grid):
            pred = probs[:, j] >= t
            tp = int(np.sum(pred & y))
            denom = int(pred.sum()) + int(y.sum())
            f = 2 * tp / denom if denom else 0.0
            if f > best_f + 1e-12:
                best_f, best_t = f, t
        tau[j] = best_t
    return tau


@dataclass
class Checkpoint:
    state: dict[str, np.ndarray]
    step: int
    epoch: int
    metrics: dict
    thresholds: np.ndarray | None = None


def split_corpus(corpus: Sequence[Dialogue], fractions=(0.8, 0.1, 0.1)) -> tuple[list, list, list]:
    """Contiguous train/valid/test split; the synthetic corpus is already i.i.d. in id order."""
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise ValueError("split fractions must sum to 1")
    n = len(corpus)
    a = int(round(n * fractions[0]))
    b = a + int(round(n * fractions[1]))
    return list(corpus[:a]), list(corpus[a:b]), list(corpus[b:])


def _grads(store: ParamStore) -> dict[str, np.ndarray]:
    return {name: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data)) for name, p in store.items()}


def run_epochs(store: ParamStore, n_items: int, make_loss: Callable[[np.ndarray, np.random.Generator], Tensor],
               validate: Callable[[int], tuple[float, dict, object]], cfg: TrainConfig,
               on_log: Callable[[str], None] | None = None) -> tuple[Checkpoint, list[dict]]:
    """Shared minibatch loop: shuffle, step, validate per epoch, keep the best snapshot.

    ``make_loss(item_indices, rng)`` returns the batch loss; ``validate(epoch)``
    returns (selection score, metrics, extra) where extra is stored as thresholds.
    """
    cfg.validate()
    say = on_log or log.info
    n_batches = max(1, math.ceil(n_items / cfg.batch_size))
    total = n_batches * cfg.epochs
    state = AdamState()
    params = dict(store.items())
    history: list[dict] = []
    best: Checkpoint | None = None
    best_score = -math.inf
    step = 0
    for epoch in range(1, cfg.epochs + 1):
        rng = np.random.default_rng([cfg.seed, epoch])
        order = rng.permutation(n_items)
        losses = []
        t0 = time.time()
        for i in range(n_batches):
            idx = order[i * cfg.batch_size: (i + 1) * cfg.batch_size]
            if len(idx) == 0:
                continue
            store.zero_grad()
            loss = make_loss(idx, rng)
            value = float(loss.data)
            if not math.isfinite(value):
                raise TrainingDivergedError(f"loss is {value} at epoch {epoch} step {step} (batch items {idx[:5].tolist()}...)")
            loss.backward()
            lr = lr_schedule(step, cfg.lr, cfg.warmup_steps, total)
            adamw_step(params, _grads(store), state, cfg, lr)
            losses.append(value)
            step += 1
        score, metrics, extra = validate(epoch)
        rec = {"epoch": epoch, "train_loss": float(np.mean(losses)) if losses else float("nan"),
               "select": score, "seconds": round(time.time() - t0, 1), **metrics}
        history.append(rec)
        say("epoch %d  loss %.4f  select %.2f  %s" % (epoch, rec["train_loss"], score,
                                                       "  ".join(f"{k} {v:.2f}" for k, v in metrics.items()
                                                                 if isinstance(v, float))))
        if score > best_score:
            best_score = score
            best = Checkpoint(store.state_dict(), step, epoch, dict(metrics),
                              None if extra is None else np.array(extra))
    if best is None:  # zero epochs: snapshot the initial parameters
        best = Checkpoint(store.state_dict(), 0, 0, {})
    return best, history


def train_flow(model, train: Sequence[Dialogue], valid: Sequence[Dialogue], cfg: TrainConfig,
               on_log: Callable[[str], None] | None = None):
    """Train a FlowModel; reloads and returns the checkpoint with the best (Weighted-F1 + R@20)/2."""
    from . import dualflow
    from .metrics import flow_report

    if cfg.lambda_e is not None:
        model.cfg.lambda_e = cfg.lambda_e
    if cfg.lambda_a is not None:
        model.cfg.lambda_a = cfg.lambda_a
    feats = [dualflow.featurize(d, model.kg, model.vocab, model.cfg) for d in train]
    valid_feats = [dualflow.featurize(d, model.kg, model.vocab, model.cfg) for d in valid]

    def make_loss(idx, rng):
        batch = dualflow.collate([feats[i] for i in sorted(idx)])
        return dualflow.flow_loss(model, batch, rng=rng)

    def validate(epoch):
        outs, probs, labels = flow_predict_feats(model, valid_feats)
        tau = calibrate_act_thresholds(probs, labels)
        rescored = [dualflow.replace_acts(o, tau) for o in outs]
        rep = flow_report(rescored)
        r20 = rep.recall20 if rep.recall20 is not None else 0.0
        wf1 = rep.weighted_f1 if model.cfg.act_flow else 0.0
        return (wf1 + r20) / 2, {"weighted_f1": wf1, "recall20": r20}, tau

    best, history = run_epochs(model.params, len(feats), make_loss, validate, cfg, on_log)
    model.params.load_state_dict(best.state)
    if best.thresholds is not None:
        model.thresholds = best.thresholds.copy()
    return best, history


def flow_predict_feats(model, feats, batch_size: int = 32):
    """FlowOutputs plus stacked act probabilities and labels for labeled examples."""
    from . import dualflow
    from .numerics.tensor import no_grad

    outs = []
    with no_grad():
        for i in range(0, len(feats), batch_size):
            batch = dualflow.collate(feats[i: i + batch_size])
            outs.extend(model.outputs(batch, model.forward(batch)))
    labeled = [o for o in outs if o.gold_acts]
    probs = np.array([o.act_probs for o in labeled]).reshape(-1, N_ACTS)
    labels = np.zeros_like(probs)
    for r, o in enumerate(labeled):
        for a in o.gold_acts:
            labels[r, a.index] = 1.0
    return outs, probs, labels


def train_generator(model, train_examples, valid_examples, cfg: TrainConfig,
                    on_log: Callable[[str], None] | None = None, max_valid: int | None = None):
    """Teacher-forced training; keeps the epoch with the best validation BLEU-4 (greedy decoding)."""
    from . import generator as gen
    from .metrics import bleu

    if not train_examples:
        raise ValueError("train_generator: no training examples")
    valid = list(valid_examples)[:max_valid] if max_valid else list(valid_examples)
    # group by length so padding stays small; order inside the epoch is still shuffled
    lengths = np.array([len(e.history) for e in train_examples])
    by_len = np.argsort(lengths, kind="stable")

    def make_loss(idx, rng):
        chosen = [train_examples[i] for i in sorted(idx)]
        return gen.generation_loss(model, gen.collate(chosen, model.vocab))

    def validate(epoch):
        if not valid:
            return float(epoch), {}, None   # no validation: keep the latest epoch
        hyps = gen.decode(model, valid)
        b4 = bleu(hyps, [e.reference for e in valid], 4)
        return b4, {"bleu4": b4, "bleu1": bleu(hyps, [e.reference for e in valid], 1)}, None

    # items are contiguous length-sorted blocks; run_epochs shuffles block order
    bs = cfg.batch_size
    blocks = [by_len[i: i + bs] for i in range(0, len(by_len), bs)]
    block_cfg = TrainConfig(**{**cfg.to_json(), "batch_size": 1})

    def make_block_loss(idx, rng):
        return make_loss(np.concatenate([blocks[i] for i in idx]), rng)

    best, history = run_epochs(model.params, len(blocks), make_block_loss, validate, block_cfg, on_log)
    model.params.load_state_dict(best.state)
    return best, history
