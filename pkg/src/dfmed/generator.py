"""Guided response generator.

A shared encoder reads the guidance sequence (act tokens, then entity-name
tokens) and the role-tagged history separately. Each decoder layer runs
causal self-attention, attends to both encodings, and blends them with a
sigmoid gate computed from the history branch.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .corpus.schema import ACTS, ActLabel, Dialogue
from .corpus.vocab import Vocab, role_tagged
from .numerics import functional as F
from .numerics.nn import CrossAttention, FeedForward, LayerNorm, Linear, ParamStore, TransformerLayer, sinusoidal_positions
from .numerics.tensor import Tensor, no_grad


@dataclass
class GenConfig:
    d_model: int = 64
    enc_layers: int = 2
    dec_layers: int = 2
    n_heads: int = 4
    max_len: int = 40
    max_history: int = 256
    decode: str = "greedy"
    beam_width: int = 4
    use_guidance: bool = True
    seed: int = 0

    def validate(self) -> None:
        if self.d_model % self.n_heads:
            raise ValueError("d_model must be divisible by n_heads")
        if self.beam_width < 1:
            raise ValueError("beam_width must be >= 1")
        if self.decode not in ("greedy", "beam"):
            raise ValueError(f"decode must be 'greedy' or 'beam', got {self.decode!r}")
        if self.max_len < 1:
            raise ValueError("max_len must be >= 1")

    def to_json(self) -> dict:
        return asdict(self)


@dataclass
class GenExample:
    dialogue_id: str
    t: int
    history: list[int]
    acts: list[ActLabel]
    entities: list[str]
    target: list[int]
    reference: list[str] = field(default_factory=list)
    gold_entities: list[str] = field(default_factory=list)


def guidance_tokens(acts: Sequence[ActLabel], entities: Sequence[str]) -> list[str]:
    """Act tokens in canonical order followed by entity-name tokens in the given (rank) order.

    The act set is nonempty whenever act prediction is on; with the act flow
    ablated it may be empty, and an empty guidance sequence attends to nothing.
    """
    ordered = sorted(set(acts), key=lambda a: a.index)
    out = [a.token for a in ordered]
    for e in entities:
        out.extend(e.split())
    return out


def history_ids(dialogue: Dialogue, t: int, vocab: Vocab, max_len: int) -> list[int]:
    """Role-tagged ids of the first 2t-1 utterances, keeping the most recent ``max_len``."""
    ids = vocab.encode(role_tagged(dialogue.utterances[: 2 * t - 1]))
    return ids[-max_len:]


def make_examples(dialogues: Sequence[Dialogue], vocab: Vocab, cfg: GenConfig,
                  guidance: dict | None = None, gold_acts: bool = True) -> list[GenExample]:
    """One example per doctor turn.

    ``guidance`` maps (dialogue id, t) to (acts, entities). Without it, or
    when ``gold_acts`` is set, acts come from the annotation; entities
    default to the gold mentions.
    """
    out = []
    for d in dialogues:
        rounds = d.rounds()
        for t in range(1, d.n_doctor_turns + 1):
            doctor = rounds[t - 1][1]
            acts, ents = list(doctor.acts), list(dict.fromkeys(doctor.entities))
            if guidance is not None and (d.id, t) in guidance:
                g_acts, g_ents = guidance[(d.id, t)]
                ents = list(g_ents)
                if not gold_acts:
                    acts = list(g_acts)
            out.append(GenExample(d.id, t, history_ids(d, t, vocab, cfg.max_history), acts, ents,
                                  vocab.encode(doctor.tokens), list(doctor.tokens),
                                  list(dict.fromkeys(doctor.entities))))
    return out


@dataclass
class GenBatch:
    history: np.ndarray
    history_mask: np.ndarray
    guidance: np.ndarray
    guidance_mask: np.ndarray
    inputs: np.ndarray | None = None   # [BOS] + target
    outputs: np.ndarray | None = None  # target + [EOS]
    out_mask: np.ndarray | None = None


def _pad(seqs: Sequence[Sequence[int]], pad: int) -> tuple[np.ndarray, np.ndarray]:
    L = max(1, max(len(s) for s in seqs))
    arr = np.full((len(seqs), L), pad, dtype=np.int64)
    mask = np.zeros((len(seqs), L), dtype=bool)
    for i, s in enumerate(seqs):
        arr[i, : len(s)] = s
        mask[i, : len(s)] = True
    return arr, mask


def collate(examples: Sequence[GenExample], vocab: Vocab, with_targets: bool = True) -> GenBatch:
    hist, hmask = _pad([e.history for e in examples], vocab.pad_id)
    guide, gmask = _pad([vocab.encode(guidance_tokens(e.acts, e.entities)) for e in examples], vocab.pad_id)
    batch = GenBatch(hist, hmask, guide, gmask)
    if with_targets:
        batch.inputs, _ = _pad([[vocab.bos_id] + e.target for e in examples], vocab.pad_id)
        batch.outputs, batch.out_mask = _pad([e.target + [vocab.eos_id] for e in examples], vocab.pad_id)
    return batch


class DecoderLayer:
    def __init__(self, store: ParamStore, name: str, d: int, n_heads: int):
        self.ln_self = LayerNorm(store, f"{name}.ln_self", d)
        self.self_attn = CrossAttention(store, f"{name}.self", d, n_heads, out_proj=True)
        self.ln_cross = LayerNorm(store, f"{name}.ln_cross", d)
        self.attn_guide = CrossAttention(store, f"{name}.guide", d, n_heads, out_proj=True)
        self.attn_hist = CrossAttention(store, f"{name}.hist", d, n_heads, out_proj=True)
        self.gate = Linear(store, f"{name}.gate", d, d)
        self.ln_ffn = LayerNorm(store, f"{name}.ln_ffn", d)
        self.ffn = FeedForward(store, f"{name}.ffn", d)

    def __call__(self, x: Tensor, causal: np.ndarray, H_g: Tensor, g_mask: np.ndarray,
                 H_c: Tensor, c_mask: np.ndarray, use_guidance: bool) -> tuple[Tensor, Tensor | None]:
        h = self.ln_self(x)
        x = x + self.self_attn(h, h, causal)
        q = self.ln_cross(x)
        hc = self.attn_hist(q, H_c, c_mask[:, None, :])
        gate = None
        if use_guidance:
            hg = self.attn_guide(q, H_g, g_mask[:, None, :])
            gate = F.sigmoid(self.gate(hc))
            fused = gate * hc + (1.0 - gate) * hg
        else:
            fused = hc
        x = x + fused
        return x + self.ffn(self.ln_ffn(x)), gate


class GenModel:
    def __init__(self, cfg: GenConfig, vocab: Vocab, seed: int | None = None):
        cfg.validate()
        missing = [a.token for a in ACTS if a.token not in vocab]
        if missing:
            raise ValueError(f"vocabulary lacks act tokens {missing}")
        self.cfg = cfg
        self.vocab = vocab
        d = cfg.d_model
        self.params = ps = ParamStore(np.random.default_rng(cfg.seed if seed is None else seed))
        self.tok_emb = ps.normal("tok_emb", (len(vocab), d))
        self.enc = [TransformerLayer(ps, f"enc.{i}", d, cfg.n_heads) for i in range(cfg.enc_layers)]
        self.enc_ln = LayerNorm(ps, "enc.ln", d)
        self.dec = [DecoderLayer(ps, f"dec.{i}", d, cfg.n_heads) for i in range(cfg.dec_layers)]
        self.dec_ln = LayerNorm(ps, "dec.ln", d)
        self.out = Linear(ps, "out", d, len(vocab))
        self._pe = sinusoidal_positions(max(cfg.max_history, cfg.max_len + 2, 512), d)

    def _embed(self, ids: np.ndarray) -> Tensor:
        L = ids.shape[-1]
        if L > len(self._pe):
            self._pe = sinusoidal_positions(L, self.cfg.d_model)
        return F.take_rows(self.tok_emb, ids) * math.sqrt(self.cfg.d_model) + Tensor(self._pe[:L])

    def encode(self, ids: np.ndarray, mask: np.ndarray) -> Tensor:
        """Shared bidirectional encoder over (B, L) ids with key mask."""
        x = self._embed(ids)
        key_mask = mask[:, None, :]
        for layer in self.enc:
            x = layer(x, key_mask)
        return self.enc_ln(x)

    def encode_guidance(self, acts: Sequence[ActLabel], entities: Sequence[str]) -> Tensor:
        ids = np.array([self.vocab.encode(guidance_tokens(acts, entities))])
        return self.encode(ids, np.ones_like(ids, dtype=bool))[0]

    def encode_history(self, tokens: Sequence[str]) -> Tensor:
        ids = self.vocab.encode(list(tokens))[-self.cfg.max_history:]
        if not ids:
            raise ValueError("history is empty")
        arr = np.array([ids])
        return self.encode(arr, np.ones_like(arr, dtype=bool))[0]

    def decode_states(self, prefix: np.ndarray, H_g: Tensor, g_mask: np.ndarray, H_c: Tensor,
                      c_mask: np.ndarray) -> tuple[Tensor, list]:
        """Logits (B, L, V) for every prefix position, plus per-layer gate tensors."""
        L = prefix.shape[1]
        causal = np.tril(np.ones((L, L), dtype=bool))
        x = self._embed(prefix)
        gates = []
        for layer in self.dec:
            x, g = layer(x, causal, H_g, g_mask, H_c, c_mask, self.cfg.use_guidance)
            gates.append(g)
        return self.out(self.dec_ln(x)), gates

    def decoder_step(self, prefix: Sequence[int], H_g: Tensor, H_c: Tensor) -> np.ndarray:
        """Next-token distribution after ``prefix`` (which starts with [BOS]) for one example."""
        pre = np.array([list(prefix)])
        logits, _ = self.decode_states(pre, F.expand_dims(H_g, 0), np.ones((1, H_g.shape[0]), bool),
                                       F.expand_dims(H_c, 0), np.ones((1, H_c.shape[0]), bool))
        return F.softmax(logits[0, -1], axis=-1).data

    def encode_batch(self, batch: GenBatch) -> tuple[Tensor, Tensor]:
        return self.encode(batch.guidance, batch.guidance_mask), self.encode(batch.history, batch.history_mask)


def generation_loss(model: GenModel, batch: GenBatch) -> Tensor:
    """Mean teacher-forced NLL per target token (targets include the closing [EOS])."""
    if batch.inputs is None:
        raise ValueError("generation_loss needs a batch collated with targets")
    H_g, H_c = model.encode_batch(batch)
    logits, _ = model.decode_states(batch.inputs, H_g, batch.guidance_mask, H_c, batch.history_mask)
    return F.cross_entropy(logits, batch.outputs, batch.out_mask)


def _strip(ids: Sequence[int], eos: int) -> list[int]:
    out = []
    for i in ids:
        if i == eos:
            break
        out.append(int(i))
    return out


def greedy_decode(model: GenModel, batch: GenBatch, max_len: int | None = None) -> list[list[int]]:
    max_len = max_len or model.cfg.max_len
    v = model.vocab
    with no_grad():
        H_g, H_c = model.encode_batch(batch)
        B = batch.history.shape[0]
        prefix = np.full((B, 1), v.bos_id, dtype=np.int64)
        done = np.zeros(B, dtype=bool)
        for _ in range(max_len):
            logits, _ = model.decode_states(prefix, H_g, batch.guidance_mask, H_c, batch.history_mask)
            nxt = np.argmax(logits.data[:, -1], axis=-1)
            nxt = np.where(done, v.pad_id, nxt)
            prefix = np.concatenate([prefix, nxt[:, None]], axis=1)
            done |= nxt == v.eos_id
            if done.all():
                break
    return [_strip([i for i in row[1:] if i != v.pad_id], v.eos_id) for row in prefix]


def beam_decode(model: GenModel, example: GenExample, width: int | None = None,
                max_len: int | None = None) -> list[int]:
    """Beam search; finished hypotheses are ranked by total log-prob divided by their token count."""
    width = width or model.cfg.beam_width
    max_len = max_len or model.cfg.max_len
    v = model.vocab
    batch = collate([example], v, with_targets=False)
    with no_grad():
        H_g, H_c = model.encode_batch(batch)
        beams = [([v.bos_id], 0.0)]
        finished: list[tuple[list[int], float]] = []
        for _ in range(max_len):
            n = len(beams)
            prefix = np.array([b[0] for b in beams])
            logits, _ = model.decode_states(
                prefix, F.broadcast_to(H_g, (n,) + H_g.shape[1:]), np.repeat(batch.guidance_mask, n, 0),
                F.broadcast_to(H_c, (n,) + H_c.shape[1:]), np.repeat(batch.history_mask, n, 0))
            logp = F.log_softmax(logits[:, -1], axis=-1).data.astype(np.float64)
            cand = []
            for bi, (ids, score) in enumerate(beams):
                top = np.argsort(-logp[bi], kind="stable")[:width]
                for tok in top:
                    cand.append((ids + [int(tok)], score + float(logp[bi, tok])))
            cand.sort(key=lambda c: -c[1])
            beams = []
            for ids, score in cand[:width]:
                (finished if ids[-1] == v.eos_id else beams).append((ids, score))
            if not beams or len(finished) >= width:
                break
        pool = finished or beams
        best = max(pool, key=lambda c: c[1] / (len(c[0]) - 1))
    return _strip(best[0][1:], v.eos_id)


def decode(model: GenModel, examples: Sequence[GenExample], batch_size: int = 64) -> list[list[str]]:
    out: list[list[str]] = []
    if model.cfg.decode == "beam" and model.cfg.beam_width > 1:
        for ex in examples:
            out.append(model.vocab.decode(beam_decode(model, ex)))
        return out
    for i in range(0, len(examples), batch_size):
        batch = collate(examples[i: i + batch_size], model.vocab, with_targets=False)
        out.extend(model.vocab.decode(ids) for ids in greedy_decode(model, batch))
    return out
