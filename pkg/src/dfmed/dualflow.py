"""Dual flow modeling: context encoding, entity-graph flow, act flow, and their interweaving.

All examples of a dialogue are computed in one pass. Rounds before the
target turn are shared history (both utterances visible), so the flow GRUs
run once over those rounds and each target turn adds a single extra step
from the previous state with its patient-only graph and the query act.
Batches of dialogues are padded into dense arrays with boolean masks.
"""
from __future__ import annotations

import dataclasses
import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .corpus.examples import dialogue_graphs
from .corpus.schema import ACTS, N_ACTS, ActLabel, Dialogue
from .corpus.vocab import Vocab, role_tagged
from .kg import KnowledgeGraph, TurnGraph
from .numerics import functional as F
from .numerics.nn import (
    GRUCell,
    LayerNorm,
    Linear,
    ParamStore,
    TransformerLayer,
    scaled_dot_attention,
    sinusoidal_positions,
)
from .numerics.tensor import Tensor, get_default_dtype, no_grad

log = logging.getLogger(__name__)


@dataclass
class FlowConfig:
    d_model: int = 64
    gat_heads: int = 4
    ctx_layers: int = 1
    ctx_heads: int = 4
    max_context_len: int = 512
    n_negatives: int = 32
    top_k: int = 20
    lambda_e: float = 1.0
    lambda_a: float = 0.05
    act_flow: bool = True
    entity_flow: bool = True
    entity_attends_act: bool = True
    act_attends_entity: bool = True
    flow_modeling: bool = True
    seed: int = 0

    def validate(self) -> None:
        if self.d_model % self.gat_heads or self.d_model % max(self.ctx_heads, 1):
            raise ValueError("d_model must be divisible by gat_heads and ctx_heads")
        if self.lambda_e < 0 or self.lambda_a < 0:
            raise ValueError("loss weights must be non-negative")
        if self.top_k < 1:
            raise ValueError("top_k must be >= 1")
        if self.n_negatives < 1:
            raise ValueError("n_negatives must be >= 1")

    def to_json(self) -> dict:
        return asdict(self)


# ---------------------------------------------------------------------------
# featurization
# ---------------------------------------------------------------------------

@dataclass
class DialogueFeatures:
    """Index arrays for one dialogue. Turns are 1-based in comments, 0-based in arrays."""

    dialogue_id: str
    n_targets: int
    segments: list[np.ndarray]          # context token windows
    ctx_seg: np.ndarray                 # (R,) segment of U_k
    ctx_end: np.ndarray                 # (R,) last position of U_k in its segment
    graphs: list[tuple[np.ndarray, np.ndarray]]   # (entity ids, adjacency with self loops)
    graph_kind: np.ndarray              # 0 = history round, 1 = target round
    graph_turn: np.ndarray              # 0-based round index
    act_hist: list[list[int]]           # act ids of doctor turns 1..R-1
    candidates: list[np.ndarray]        # per target, entity ids (sorted)
    cand_graph: list[np.ndarray]        # per target, local graph index holding each candidate
    cand_pos: list[np.ndarray]          # per target, node position within that graph
    positives: list[np.ndarray]         # per target, positions into candidates
    act_labels: np.ndarray              # (R, 7) multi-hot; zeros when unlabeled
    gold_entities: list[list[str]]
    has_gold: np.ndarray                # (R,) doctor turn exists


def _graph_arrays(g: TurnGraph, index: dict[str, int]) -> tuple[np.ndarray, np.ndarray]:
    ids = np.array([index[e] for e in g.nodes], dtype=np.int64)
    return ids, g.adjacency(self_loops=True)


def featurize(dialogue: Dialogue, kg: KnowledgeGraph, vocab: Vocab, cfg: FlowConfig,
              include_open: bool = False) -> DialogueFeatures:
    """Index arrays for every doctor turn (plus a trailing patient turn when ``include_open``)."""
    index = kg.entity_index()
    rounds = dialogue.rounds()
    R = dialogue.n_doctor_turns
    if include_open and len(rounds) > R:
        R += 1
    if R == 0:
        raise ValueError(f"dialogue {dialogue.id}: no turn to predict")
    dg = dialogue_graphs(dialogue, kg)

    # context: U_k = P_1 D_1 ... P_k, one causal pass over the longest history when it fits
    ends, tokens = [], []
    for k in range(R):
        tokens.extend(vocab.encode(role_tagged([rounds[k][0]])))
        ends.append(len(tokens) - 1)
        if k + 1 < R:
            tokens.extend(vocab.encode(role_tagged([rounds[k][1]])))
    tokens_arr = np.array(tokens, dtype=np.int64)
    L = cfg.max_context_len
    segments = [tokens_arr[: min(len(tokens_arr), L)]]
    ctx_seg, ctx_end = [], []
    for e in ends:
        if e < L:
            ctx_seg.append(0)
            ctx_end.append(e)
        else:  # left-truncate: keep the most recent L tokens
            segments.append(tokens_arr[e - L + 1: e + 1])
            ctx_seg.append(len(segments) - 1)
            ctx_end.append(L - 1)

    graphs, kind, turn = [], [], []
    for k in range(R - 1):
        graphs.append(_graph_arrays(dg.full[k], index))
        kind.append(0)
        turn.append(k)
    for k in range(R):
        graphs.append(_graph_arrays(dg.target[k], index))
        kind.append(1)
        turn.append(k)
    n_hist = R - 1

    act_hist = [[a.index for a in rounds[k][1].acts] for k in range(R - 1)]

    candidates, cand_graph, cand_pos, positives, gold_names = [], [], [], [], []
    act_labels = np.zeros((R, N_ACTS))
    has_gold = np.zeros(R, dtype=bool)
    for t in range(R):
        # latest graph containing each entity: the target graph, else the newest history graph
        where: dict[int, tuple[int, int]] = {}
        for k in range(t):
            for pos, eid in enumerate(graphs[k][0]):
                where[int(eid)] = (k, pos)
        for pos, eid in enumerate(graphs[n_hist + t][0]):
            where[int(eid)] = (n_hist + t, pos)
        pool = np.array(sorted(index[e] for e in dg.pools[t]), dtype=np.int64)
        candidates.append(pool)
        cand_graph.append(np.array([where[int(e)][0] for e in pool], dtype=np.int64))
        cand_pos.append(np.array([where[int(e)][1] for e in pool], dtype=np.int64))
        doctor = rounds[t][1] if t < len(rounds) else None
        if doctor is not None:
            has_gold[t] = True
            gold = list(dict.fromkeys(doctor.entities))
            gold_names.append(gold)
            gold_ids = {index[e] for e in gold if e in index}
            positives.append(np.array([i for i, e in enumerate(pool) if int(e) in gold_ids], dtype=np.int64))
            for a in doctor.acts:
                act_labels[t, a.index] = 1.0
        else:
            gold_names.append([])
            positives.append(np.zeros(0, dtype=np.int64))

    return DialogueFeatures(
        dialogue_id=dialogue.id, n_targets=R, segments=segments,
        ctx_seg=np.array(ctx_seg), ctx_end=np.array(ctx_end),
        graphs=graphs, graph_kind=np.array(kind, dtype=np.int64), graph_turn=np.array(turn, dtype=np.int64),
        act_hist=act_hist, candidates=candidates, cand_graph=cand_graph, cand_pos=cand_pos,
        positives=positives, act_labels=act_labels, gold_entities=gold_names, has_gold=has_gold,
    )


@dataclass
class FlowBatch:
    feats: list[DialogueFeatures]
    # context
    ctx_tokens: np.ndarray      # (S, L)
    ctx_pool: np.ndarray        # (Q, S*L) averaging weights; row per (dialogue, round)
    ctx_row: np.ndarray         # (B, Rmax) row into ctx_pool
    # graphs: nodes of all graphs are stored flat; row N is an all-zero padding node
    node_ids: np.ndarray        # (N,) entity ids
    node_graph: np.ndarray      # (N,)
    edge_dst: np.ndarray        # (Ed,) attending node
    edge_src: np.ndarray        # (Ed,) attended neighbor (self loops included)
    node_pad: np.ndarray        # (G, n) flat node index per graph slot, N when empty
    node_mask: np.ndarray       # (G, n)
    graph_dialogue: np.ndarray  # (G,)
    graph_turn: np.ndarray      # (G,)
    graph_kind: np.ndarray      # (G,)
    hist_graph: np.ndarray      # (B, Rmax-1) global graph index of history round k (0 if absent)
    # act instances
    act_ids: np.ndarray         # (B, P)
    act_turn: np.ndarray        # (B, P), -1 for padding
    act_hist_multi: np.ndarray  # (B, Rmax-1, 7) mean-pooling weights
    # node instances per dialogue
    inst_idx: np.ndarray        # (B, M) into flat nodes
    inst_kind: np.ndarray       # (B, M), -1 padding
    inst_turn: np.ndarray       # (B, M)
    # examples
    ex_dialogue: np.ndarray     # (E,)
    ex_turn: np.ndarray         # (E,) 0-based
    ex_graph: np.ndarray        # (E,) global target-graph index
    cand_idx: np.ndarray        # (E, C) into flat nodes (N for padding)
    cand_mask: np.ndarray       # (E, C)
    cand_ids: np.ndarray        # (E, C) entity ids
    act_labels: np.ndarray      # (E, 7)
    has_gold: np.ndarray        # (E,)
    positives: list[np.ndarray]

    @property
    def n_examples(self) -> int:
        return len(self.ex_dialogue)


def collate(feats: list[DialogueFeatures]) -> FlowBatch:
    B = len(feats)
    # context segments
    segs = [s for f in feats for s in f.segments]
    L = max(len(s) for s in segs)
    ctx_tokens = np.zeros((len(segs), L), dtype=np.int64)
    for i, s in enumerate(segs):
        ctx_tokens[i, : len(s)] = s
    R_max = max(f.n_targets for f in feats)
    Q = sum(f.n_targets for f in feats)
    ctx_pool = np.zeros((Q, len(segs) * L))
    ctx_row = np.zeros((B, R_max), dtype=np.int64)
    seg_off = row = 0
    for b, f in enumerate(feats):
        for k in range(f.n_targets):
            s = seg_off + int(f.ctx_seg[k])
            e = int(f.ctx_end[k])
            ctx_pool[row, s * L: s * L + e + 1] = 1.0 / (e + 1)
            ctx_row[b, k] = row
            row += 1
        seg_off += len(f.segments)

    # graphs
    all_graphs = [g for f in feats for g in f.graphs]
    G = len(all_graphs)
    n = max(1, max(len(ids) for ids, _ in all_graphs))
    N = sum(len(ids) for ids, _ in all_graphs)
    node_ids = np.zeros(N, dtype=np.int64)
    node_graph = np.zeros(N, dtype=np.int64)
    node_pad = np.full((G, n), N, dtype=np.int64)
    node_mask = np.zeros((G, n), dtype=bool)
    dst, src = [], []
    graph_dialogue = np.zeros(G, dtype=np.int64)
    graph_turn = np.zeros(G, dtype=np.int64)
    graph_kind = np.zeros(G, dtype=np.int64)
    hist_graph = np.zeros((B, max(R_max - 1, 1)), dtype=np.int64)
    g_start = np.zeros(G, dtype=np.int64)  # first flat node of each graph
    g_off = []
    gi = off = 0
    for b, f in enumerate(feats):
        g_off.append(gi)
        for j, (ids, a) in enumerate(f.graphs):
            m = len(ids)
            node_ids[off: off + m] = ids
            node_graph[off: off + m] = gi
            node_pad[gi, :m] = off + np.arange(m)
            node_mask[gi, :m] = True
            ii, jj = np.nonzero(a)
            dst.append(off + ii)
            src.append(off + jj)
            graph_dialogue[gi] = b
            graph_turn[gi] = f.graph_turn[j]
            graph_kind[gi] = f.graph_kind[j]
            if f.graph_kind[j] == 0:
                hist_graph[b, f.graph_turn[j]] = gi
            g_start[gi] = off
            gi += 1
            off += m
    edge_dst = np.concatenate(dst) if dst else np.zeros(0, dtype=np.int64)
    edge_src = np.concatenate(src) if src else np.zeros(0, dtype=np.int64)

    # act instances
    P = max(1, max(sum(len(a) for a in f.act_hist) for f in feats))
    act_ids = np.zeros((B, P), dtype=np.int64)
    act_turn = np.full((B, P), -1, dtype=np.int64)
    act_hist_multi = np.zeros((B, max(R_max - 1, 1), N_ACTS))
    for b, f in enumerate(feats):
        p = 0
        for k, acts in enumerate(f.act_hist):
            for a in acts:
                act_ids[b, p] = a
                act_turn[b, p] = k
                p += 1
            if acts:
                act_hist_multi[b, k, acts] = 1.0 / len(acts)

    # node instances per dialogue
    M = max(1, max(sum(len(ids) for ids, _ in f.graphs) for f in feats))
    inst_idx = np.full((B, M), N, dtype=np.int64)
    inst_kind = np.full((B, M), -1, dtype=np.int64)
    inst_turn = np.full((B, M), -1, dtype=np.int64)
    for b, f in enumerate(feats):
        m = 0
        for j, (ids, _) in enumerate(f.graphs):
            g = g_off[b] + j
            c = len(ids)
            inst_idx[b, m: m + c] = g_start[g] + np.arange(c)
            inst_kind[b, m: m + c] = f.graph_kind[j]
            inst_turn[b, m: m + c] = f.graph_turn[j]
            m += c

    # examples
    E = Q
    C = max(1, max(len(c) for f in feats for c in f.candidates))
    ex_dialogue = np.zeros(E, dtype=np.int64)
    ex_turn = np.zeros(E, dtype=np.int64)
    ex_graph = np.zeros(E, dtype=np.int64)
    cand_idx = np.full((E, C), N, dtype=np.int64)
    cand_mask = np.zeros((E, C), dtype=bool)
    cand_ids = np.full((E, C), -1, dtype=np.int64)
    act_labels = np.zeros((E, N_ACTS))
    has_gold = np.zeros(E, dtype=bool)
    positives = []
    e = 0
    for b, f in enumerate(feats):
        n_hist = f.n_targets - 1
        for t in range(f.n_targets):
            ex_dialogue[e] = b
            ex_turn[e] = t
            ex_graph[e] = g_off[b] + n_hist + t
            c = len(f.candidates[t])
            cand_idx[e, :c] = g_start[g_off[b] + f.cand_graph[t]] + f.cand_pos[t]
            cand_mask[e, :c] = True
            cand_ids[e, :c] = f.candidates[t]
            act_labels[e] = f.act_labels[t]
            has_gold[e] = f.has_gold[t]
            positives.append(f.positives[t])
            e += 1

    return FlowBatch(
        feats=feats, ctx_tokens=ctx_tokens, ctx_pool=ctx_pool, ctx_row=ctx_row,
        node_ids=node_ids, node_graph=node_graph, edge_dst=edge_dst, edge_src=edge_src,
        node_pad=node_pad, node_mask=node_mask, graph_dialogue=graph_dialogue,
        graph_turn=graph_turn, graph_kind=graph_kind, hist_graph=hist_graph,
        act_ids=act_ids, act_turn=act_turn, act_hist_multi=act_hist_multi,
        inst_idx=inst_idx, inst_kind=inst_kind, inst_turn=inst_turn,
        ex_dialogue=ex_dialogue, ex_turn=ex_turn, ex_graph=ex_graph,
        cand_idx=cand_idx, cand_mask=cand_mask, cand_ids=cand_ids,
        act_labels=act_labels, has_gold=has_gold, positives=positives,
    )


# ---------------------------------------------------------------------------
# model
# ---------------------------------------------------------------------------

@dataclass
class FlowForward:
    scores: Tensor | None        # (E, C)
    act_logits: Tensor | None    # (E, 7)
    entity_state: Tensor | None  # (E, d)
    act_state: Tensor | None     # (E, d)
    extras: dict = field(default_factory=dict)


@dataclass
class FlowOutput:
    dialogue_id: str
    t: int
    candidates: list[str]
    scores: np.ndarray
    top_entities: list[str]
    act_probs: np.ndarray
    acts: list[ActLabel]
    gold_entities: list[str] = field(default_factory=list)
    gold_acts: list[ActLabel] = field(default_factory=list)
    reachable_gold: list[str] = field(default_factory=list)


def _attend(query: Tensor, keys_q: Tensor, keys_v: Tensor, mask: np.ndarray, d: int) -> Tensor:
    """softmax(q . k / sqrt(d)) v with precomputed projections; empty rows give zeros."""
    scores = F.matmul(query, F.swapaxes(keys_q, -1, -2)) * (1.0 / math.sqrt(d))
    alpha = F.softmax(scores, axis=-1, mask=mask)
    return alpha @ keys_v


class FlowModel:
    """Parameters and forward computation of the dual flow module."""

    def __init__(self, cfg: FlowConfig, vocab: Vocab, kg: KnowledgeGraph, seed: int | None = None):
        cfg.validate()
        self.cfg = cfg
        self.vocab = vocab
        self.kg = kg
        d = cfg.d_model
        self.params = ps = ParamStore(np.random.default_rng(cfg.seed if seed is None else seed))
        self.tok_emb = ps.normal("tok_emb", (len(vocab), d))
        self.ctx_layers = [TransformerLayer(ps, f"ctx.{i}", d, cfg.ctx_heads) for i in range(cfg.ctx_layers)]
        self.ctx_ln = LayerNorm(ps, "ctx.ln", d) if cfg.ctx_layers else None
        K = cfg.gat_heads
        dh = d // K
        self.gat_W = ps.xavier("gat.W", d, d)                      # K heads of (d -> dh), concatenated
        self.gat_a = ps.xavier("gat.a", dh, 2 * K, shape=(K, 2 * dh))
        self.act_emb = ps.normal("act_emb", (N_ACTS, d))
        self.query_act = ps.normal("query_act", (d,))
        self.iw = {site: (Linear(ps, f"iw.{site}.q", d, d, bias=False),
                          Linear(ps, f"iw.{site}.k", d, d, bias=False),
                          Linear(ps, f"iw.{site}.v", d, d, bias=False))
                   for site in ("ec", "ea", "ac", "ae")}
        self.gru_e = GRUCell(ps, "gru_entity", 3 * d, d)
        self.gru_a = GRUCell(ps, "gru_act", 3 * d, d)
        self.act_head = Linear(ps, "act_head", d, N_ACTS)
        self.thresholds = np.full(N_ACTS, 0.5)
        self._pe = sinusoidal_positions(cfg.max_context_len, d)
        self._name_matrix = self._build_name_matrix()

    # -- raw embeddings ----------------------------------------------------
    def _build_name_matrix(self) -> np.ndarray:
        ents = self.kg.entities
        mat = np.zeros((len(ents), len(self.vocab)))
        for i, e in enumerate(ents):
            ids = [self.vocab.stoi[t] for t in e.split() if t in self.vocab]
            if not ids:
                log.warning("entity %r has no in-vocabulary token; using [UNK]", e)
                ids = [self.vocab.unk_id]
            for j in ids:
                mat[i, j] += 1.0 / len(ids)
        return mat.astype(get_default_dtype())

    def embed_entities(self, entity_ids: np.ndarray) -> Tensor:
        """Mean name-token embedding h^{e0} for each id; any input shape, trailing d added."""
        entity_ids = np.asarray(entity_ids, dtype=np.int64)
        uniq, inv = np.unique(entity_ids, return_inverse=True)
        raw = F.matmul(Tensor(self._name_matrix[uniq]), self.tok_emb)
        return F.take_rows(raw, inv.reshape(entity_ids.shape))

    # -- context encoder -------------------------------------------------
    def encode_tokens(self, tokens: np.ndarray) -> Tensor:
        """Causal self-attention states for (S, L) token ids; identity on embeddings with 0 layers."""
        x = F.take_rows(self.tok_emb, tokens)
        if not self.ctx_layers:
            return x
        L = tokens.shape[1]
        x = x * math.sqrt(self.cfg.d_model) + Tensor(self._pe[:L])
        causal = np.tril(np.ones((L, L), dtype=bool))
        for layer in self.ctx_layers:
            x = layer(x, causal)
        return self.ctx_ln(x)

    def encode_context(self, batch: FlowBatch) -> Tensor:
        """S^c for every (dialogue, round) row of ``batch.ctx_pool``: mean state over U_k."""
        states = self.encode_tokens(batch.ctx_tokens)
        flat = states.reshape(-1, self.cfg.d_model)
        return F.matmul(Tensor(batch.ctx_pool), flat)

    # -- graph attention ---------------------------------------------------
    def gat(self, raw: Tensor, edge_dst: np.ndarray, edge_src: np.ndarray) -> Tensor:
        """Multi-head graph attention over flat nodes (N, d).

        Node i attends to every j with an edge (i <- j); self loops must be
        listed explicitly. Heads are concatenated after an ELU.
        """
        N, d = raw.shape
        K = self.cfg.gat_heads
        dh = d // K
        wh = (raw @ self.gat_W).reshape(N, K, dh)
        s_dst = (wh * self.gat_a[:, :dh]).sum(axis=-1)                         # (N, K)
        s_src = (wh * self.gat_a[:, dh:]).sum(axis=-1)
        logits = F.leaky_relu(F.take_rows(s_dst, edge_dst) + F.take_rows(s_src, edge_src), 0.2)
        alpha = F.segment_softmax(logits, edge_dst, N)                          # (Ed, K)
        msg = F.expand_dims(alpha, -1) * F.take_rows(wh.reshape(N, d), edge_src).reshape(-1, K, dh)
        out = F.elu(F.segment_sum(msg, edge_dst, N))
        return out.reshape(N, d)

    @staticmethod
    def graph_pool(h: Tensor, node_graph: np.ndarray, n_graphs: int) -> Tensor:
        """Mean node state per graph; zero vector for empty graphs."""
        cnt = np.bincount(node_graph, minlength=n_graphs).astype(get_default_dtype())
        w = 1.0 / np.maximum(cnt, 1.0)
        return F.segment_sum(h, node_graph, n_graphs) * Tensor(w[:, None])

    def act_seq_pool(self, weights: np.ndarray) -> Tensor:
        """Mean act embedding given (…, 7) averaging weights."""
        return F.matmul(Tensor(weights), self.act_emb)

    # -- full forward ------------------------------------------------------
    def forward(self, batch: FlowBatch) -> FlowForward:
        cfg = self.cfg
        d = cfg.d_model
        B = len(batch.feats)
        E = batch.n_examples
        R_hist = batch.hist_graph.shape[1]
        zeros_e = Tensor(np.zeros((E, d)))

        Sc_rows = self.encode_context(batch)                                   # (Q, d)
        Sc_target = F.take_rows(Sc_rows, batch.ctx_row[batch.ex_dialogue, batch.ex_turn])
        extras: dict = {"context": Sc_target}

        use_entity = cfg.entity_flow
        use_act = cfg.act_flow
        e_attends_a = cfg.entity_attends_act and use_act
        a_attends_e = cfg.act_attends_entity and use_entity

        G, n = batch.node_pad.shape
        N = len(batch.node_ids)
        pooled = flat_nodes = None
        if use_entity or a_attends_e:
            raw = self.embed_entities(batch.node_ids)
            H_real = self.gat(raw, batch.edge_dst, batch.edge_src)                 # (N, d)
            pooled = self.graph_pool(H_real, batch.node_graph, G)                 # (G, d)
            flat_nodes = F.concat([H_real, Tensor(np.zeros((1, d)))], axis=0)    # row N pads

        # act instance keys
        act_keys = F.take_rows(self.act_emb, batch.act_ids)                    # (B, P, d)

        # ---------------- entity side per graph ----------------
        if use_entity:
            q, k, v = self.iw["ec"]
            Sc_graph = F.take_rows(Sc_rows, batch.ctx_row[batch.graph_dialogue, batch.graph_turn])
            # project the flat nodes once, then lay them out per graph
            keys = F.take_rows(k(flat_nodes), batch.node_pad)                  # (G, n, d)
            vals = F.take_rows(v(flat_nodes), batch.node_pad)
            ec = _attend(F.expand_dims(q(Sc_graph), 1), keys, vals, batch.node_mask[:, None, :], d)
            ec = ec.reshape(G, d)
            if e_attends_a:
                q, k, v = self.iw["ea"]
                kq = F.take_rows(k(act_keys).reshape(B, -1), batch.graph_dialogue).reshape(G, -1, d)
                kv = F.take_rows(v(act_keys).reshape(B, -1), batch.graph_dialogue).reshape(G, -1, d)
                at = batch.act_turn[batch.graph_dialogue]                       # (G, P)
                mask = (at >= 0) & (at < batch.graph_turn[:, None])
                ea = _attend(F.expand_dims(q(pooled), 1), kq, kv, mask[:, None, :], d).reshape(G, d)
            else:
                ea = Tensor(np.zeros((G, d)))
            x_graph = F.concat([pooled, ec, ea], axis=-1)                      # (G, 3d)

        # node instance keys for the act side
        if a_attends_e:
            q_ae, k_ae, v_ae = self.iw["ae"]
            inst_k = F.take_rows(k_ae(flat_nodes), batch.inst_idx)             # (B, M, d)
            inst_v = F.take_rows(v_ae(flat_nodes), batch.inst_idx)

        # ---------------- history rounds ----------------
        S_e_hist = S_a_hist = None
        if cfg.flow_modeling:
            if use_entity:
                x_e = F.take_rows(x_graph, batch.hist_graph)                     # (B, R_hist, 3d)
            if use_act:
                ha = self.act_seq_pool(batch.act_hist_multi)                     # (B, R_hist, d)
                q, k, v = self.iw["ac"]
                Sc_hist = F.take_rows(Sc_rows, batch.ctx_row[:, :R_hist])
                ac = _attend(F.expand_dims(q(Sc_hist), 2),
                             F.expand_dims(k(act_keys), 1), F.expand_dims(v(act_keys), 1),
                             (batch.act_turn[:, None, :] == np.arange(R_hist)[None, :, None])[:, :, None, :], d)
                ac = ac.reshape(B, R_hist, d)
                if a_attends_e:
                    turns = np.arange(R_hist)
                    mask = (batch.inst_kind[:, None, :] == 0) & (batch.inst_turn[:, None, :] <= turns[None, :, None])
                    ae = _attend(q_ae(ha), inst_k, inst_v, mask, d)
                else:
                    ae = Tensor(np.zeros((B, R_hist, d)))
                x_a = F.concat([ha, ac, ae], axis=-1)
            h_e = Tensor(np.zeros((B, d)))
            h_a = Tensor(np.zeros((B, d)))
            e_states, a_states = [h_e], [h_a]
            n_steps = max(f.n_targets for f in batch.feats) - 1
            for step in range(n_steps):
                if use_entity:
                    h_e = self.gru_e(x_e[:, step], h_e)
                    e_states.append(h_e)
                if use_act:
                    h_a = self.gru_a(x_a[:, step], h_a)
                    a_states.append(h_a)
            flat_idx = batch.ex_dialogue * (n_steps + 1) + batch.ex_turn
            if use_entity:
                S_e_hist = F.take_rows(F.stack(e_states, axis=1).reshape(B * (n_steps + 1), d), flat_idx)
            if use_act:
                S_a_hist = F.take_rows(F.stack(a_states, axis=1).reshape(B * (n_steps + 1), d), flat_idx)

        # ---------------- target step ----------------
        scores = act_logits = S_e = S_a = None
        if use_entity:
            if cfg.flow_modeling:
                S_e = self.gru_e(F.take_rows(x_graph, batch.ex_graph), S_e_hist)
            else:
                S_e = Sc_target
            cand = F.take_rows(flat_nodes, batch.cand_idx)                     # (E, C, d)
            scores = (cand @ F.expand_dims(S_e, -1)).reshape(E, -1)
        if use_act:
            if cfg.flow_modeling:
                qa = F.broadcast_to(self.query_act, (E, d))
                q, k, v = self.iw["ac"]
                qa_key = F.expand_dims(self.query_act, 0)                       # single key
                ac_t = scaled_dot_attention(F.expand_dims(q(Sc_target), 1),
                                            F.expand_dims(k(qa_key), 0), F.expand_dims(v(qa_key), 0))
                ac_t = ac_t.reshape(E, d)
                if a_attends_e:
                    # the query act is shared, so score node instances once per dialogue
                    R_all = batch.ctx_row.shape[1]
                    turns = np.arange(R_all)[None, :, None]
                    mask = (((batch.inst_kind[:, None, :] == 0) & (batch.inst_turn[:, None, :] < turns))
                            | ((batch.inst_kind[:, None, :] == 1) & (batch.inst_turn[:, None, :] == turns)))
                    qd = F.broadcast_to(q_ae(F.expand_dims(self.query_act, 0)), (B, 1, d))
                    sc = F.matmul(qd, F.swapaxes(inst_k, -1, -2)) * (1.0 / math.sqrt(d))   # (B, 1, M)
                    alpha = F.softmax(F.broadcast_to(sc, mask.shape), axis=-1, mask=mask)
                    ae_all = (alpha @ inst_v).reshape(B * R_all, d)
                    ae_t = F.take_rows(ae_all, batch.ex_dialogue * R_all + batch.ex_turn)
                else:
                    ae_t = zeros_e
                x_t = F.concat([qa, ac_t, ae_t], axis=-1)
                S_a = self.gru_a(x_t, S_a_hist)
            else:
                S_a = Sc_target
            act_logits = self.act_head(S_a)
        return FlowForward(scores, act_logits, S_e, S_a, extras)

    # -- outputs -------------------------------------------------------------
    def outputs(self, batch: FlowBatch, fwd: FlowForward, thresholds: np.ndarray | None = None,
                top_k: int | None = None) -> list[FlowOutput]:
        thresholds = self.thresholds if thresholds is None else thresholds
        top_k = top_k or self.cfg.top_k
        ents = self.kg.entities
        probs_all = None
        if fwd.act_logits is not None:
            probs_all = 1.0 / (1.0 + np.exp(-np.clip(fwd.act_logits.data.astype(np.float64), -30, 30)))
        outs = []
        for e in range(batch.n_examples):
            f = batch.feats[batch.ex_dialogue[e]]
            t = int(batch.ex_turn[e])
            mask = batch.cand_mask[e]
            ids = batch.cand_ids[e][mask]
            if fwd.scores is not None:
                sc = fwd.scores.data[e][mask].astype(np.float64)
                top = select_topk(sc, ids, top_k)
            else:
                sc = np.zeros(len(ids))
                top = np.zeros(0, dtype=np.int64)
            if probs_all is not None:
                probs = probs_all[e]
                acts = predict_act_set(probs, thresholds)
            else:
                probs = np.zeros(N_ACTS)
                acts = []
            gold_acts = [ACTS[j] for j in np.flatnonzero(batch.act_labels[e])]
            reach = [ents[int(ids[p])] for p in batch.positives[e]]
            outs.append(FlowOutput(
                dialogue_id=f.dialogue_id, t=t + 1,
                candidates=[ents[int(i)] for i in ids], scores=sc,
                top_entities=[ents[int(i)] for i in top], act_probs=probs, acts=acts,
                gold_entities=f.gold_entities[t], gold_acts=gold_acts, reachable_gold=reach,
            ))
        return outs


def select_topk(scores: np.ndarray, ids: np.ndarray, k: int) -> np.ndarray:
    """Top-k ids by descending score; ties go to the smaller entity id."""
    order = np.lexsort((ids, -np.asarray(scores)))
    return np.asarray(ids)[order[:k]]


def score_entities(entity_state: np.ndarray | Tensor, candidate_embeds: np.ndarray | Tensor) -> Tensor:
    """Dot-product relevance of each candidate embedding (C, d) to the entity state (d,)."""
    cand = candidate_embeds if isinstance(candidate_embeds, Tensor) else Tensor(candidate_embeds)
    state = entity_state if isinstance(entity_state, Tensor) else Tensor(entity_state)
    return cand @ state


def predict_act_set(probs: np.ndarray, thresholds: np.ndarray) -> list[ActLabel]:
    """Acts whose probability reaches their threshold; the argmax act when none does."""
    chosen = [ACTS[j] for j in range(N_ACTS) if probs[j] >= thresholds[j]]
    if not chosen:
        chosen = [ACTS[int(np.argmax(probs))]]
    return chosen


def replace_acts(out: FlowOutput, thresholds: np.ndarray) -> FlowOutput:
    """Copy of ``out`` with the act set re-thresholded."""
    return dataclasses.replace(out, acts=predict_act_set(out.act_probs, thresholds))


def flow_loss(model: FlowModel, batch: FlowBatch, fwd: FlowForward | None = None,
              rng: np.random.Generator | None = None) -> Tensor:
    """lambda_e * L_e + lambda_a * L_a averaged over the batch's labeled examples.

    L_e sums, over each reachable gold entity, the softmax NLL of that
    positive against up to ``n_negatives`` candidates sampled from the pool
    minus all positives. L_a is the mean BCE over the 7 act labels.
    """
    cfg = model.cfg
    fwd = fwd or model.forward(batch)
    rng = rng or np.random.default_rng(cfg.seed)
    labeled = np.flatnonzero(batch.has_gold)
    if len(labeled) == 0:
        raise ValueError("flow_loss: batch has no labeled example")
    total = Tensor(np.zeros(()))
    if fwd.scores is not None and cfg.lambda_e > 0:
        C = batch.cand_mask.shape[1]
        rows, row_mask = [], []
        N = cfg.n_negatives
        for e in labeled:
            pos = batch.positives[e]
            if len(pos) == 0:
                continue
            n_c = int(batch.cand_mask[e].sum())
            negs = np.setdiff1d(np.arange(n_c), pos)
            if len(negs) > N:
                negs = np.sort(rng.choice(negs, size=N, replace=False))
            for p in pos:
                idx = np.zeros(N + 1, dtype=np.int64)
                m = np.zeros(N + 1, dtype=bool)
                idx[0] = e * C + p
                m[0] = True
                idx[1: 1 + len(negs)] = e * C + negs
                m[1: 1 + len(negs)] = True
                rows.append(idx)
                row_mask.append(m)
        if rows:
            logits = fwd.scores.reshape(-1)[np.stack(rows)]
            lp = F.log_softmax(logits, axis=-1, mask=np.stack(row_mask))
            l_e = -lp[:, 0].sum()
            total = total + l_e * cfg.lambda_e
    if fwd.act_logits is not None and cfg.lambda_a > 0:
        bce = F.bce_with_logits(fwd.act_logits[labeled], batch.act_labels[labeled])
        total = total + bce.mean(axis=-1).sum() * cfg.lambda_a
    out = total * (1.0 / len(labeled))
    if not np.isfinite(out.data):
        raise FloatingPointError("flow_loss is not finite")
    return out


def predict(model: FlowModel, dialogues: list[Dialogue], batch_size: int = 32,
            include_open: bool = False, thresholds: np.ndarray | None = None) -> list[FlowOutput]:
    outs: list[FlowOutput] = []
    with no_grad():
        for i in range(0, len(dialogues), batch_size):
            feats = [featurize(d, model.kg, model.vocab, model.cfg, include_open=include_open)
                     for d in dialogues[i: i + batch_size]]
            batch = collate(feats)
            outs.extend(model.outputs(batch, model.forward(batch), thresholds))
    return outs
