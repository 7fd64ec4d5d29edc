"""Synthetic knowledge graph and dialogue corpus with known transition dynamics.

Entities hop along KG edges: each mention after the opening one is, with
probability ``p_hop``, a not-yet-mentioned neighbor of the previous
utterance's entities. Doctor act sets follow a Markov chain over named
states; a patient mention of certain entity categories boosts specific
next states, and the categories a doctor mentions follow the acts chosen.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import networkx as nx
import numpy as np

from ..kg import KnowledgeGraph
from .schema import ROLE_DOCTOR, ROLE_PATIENT, ActLabel, Dialogue, Utterance

A = ActLabel

CATEGORIES = ("symptom", "disease", "medicine", "test")
CATEGORY_SHARE = (0.4, 0.2, 0.25, 0.15)
_SUFFIX = {"symptom": "algia", "disease": "itis", "medicine": "zole", "test": "scopy"}
_SYLLABLES = ("ba", "ce", "di", "fo", "gu", "ha", "ki", "lo", "ma", "ne", "pi", "ro", "sa",
              "te", "vu", "xa", "ze", "mo", "ri", "ta")
_MODIFIERS = ("acute", "chronic", "mild")

ACT_STATES: dict[str, tuple[ActLabel, ...]] = {
    "open": (A.CHITCHAT, A.INQUIRE),
    "inquire": (A.INQUIRE,),
    "inform": (A.INFORM,),
    "inquire_inform": (A.INQUIRE, A.INFORM),
    "diagnose": (A.MAKE_DIAGNOSIS, A.INFORM),
    "diagnose_only": (A.MAKE_DIAGNOSIS,),
    "prescribe": (A.PRESCRIBE_MEDICATIONS,),
    "prescribe_inform": (A.PRESCRIBE_MEDICATIONS, A.INFORM),
    "test": (A.STATE_REQUIRED_TEST,),
    "test_inform": (A.STATE_REQUIRED_TEST, A.INFORM),
    "close": (A.PROVIDE_DAILY_PRECAUTIONS, A.CHITCHAT),
}

# Rows sum to 1; "close" is absorbing and ends the dialogue. Tuned so that act
# label shares land near the MedDG proportions (Inquire ~25%, Inform ~30%).
DEFAULT_GRAMMAR: dict[str, dict[str, float]] = {
    "open": {"inquire": 0.45, "inquire_inform": 0.35, "inform": 0.20},
    "inquire": {"inquire": 0.15, "inform": 0.40, "inquire_inform": 0.15, "diagnose": 0.15,
                "diagnose_only": 0.10, "test": 0.05},
    "inform": {"inquire": 0.35, "inquire_inform": 0.15, "inform": 0.15, "diagnose": 0.15,
               "prescribe_inform": 0.10, "close": 0.10},
    "inquire_inform": {"inform": 0.35, "inquire": 0.20, "diagnose": 0.25, "test": 0.10,
                       "prescribe": 0.10},
    "diagnose": {"prescribe": 0.45, "test": 0.20, "prescribe_inform": 0.20, "inform": 0.15},
    "diagnose_only": {"prescribe": 0.40, "test_inform": 0.30, "inform": 0.30},
    "prescribe": {"inform": 0.35, "close": 0.45, "test": 0.10, "prescribe_inform": 0.10},
    "prescribe_inform": {"close": 0.55, "inform": 0.25, "inquire": 0.20},
    "test": {"inform": 0.40, "prescribe": 0.20, "close": 0.40},
    "test_inform": {"close": 0.50, "prescribe": 0.30, "inquire": 0.20},
    "close": {"close": 1.0},
}

# Patient mentioning a category multiplies these next-state probabilities.
DEFAULT_TRIGGERS: dict[str, dict[str, float]] = {
    "disease": {"diagnose": 3.0, "diagnose_only": 3.0},
    "test": {"test": 3.0, "test_inform": 3.0},
    "medicine": {"prescribe": 3.0, "prescribe_inform": 3.0},
}

# Entity categories favored by each act when choosing doctor and patient mentions.
ACT_CATEGORY = {
    A.INQUIRE: ("symptom",),
    A.MAKE_DIAGNOSIS: ("disease",),
    A.PRESCRIBE_MEDICATIONS: ("medicine",),
    A.STATE_REQUIRED_TEST: ("test",),
    A.PROVIDE_DAILY_PRECAUTIONS: ("symptom", "disease"),
    A.INFORM: ("disease", "symptom"),
    A.CHITCHAT: (),
}
PATIENT_REPLY_CATEGORY = {
    A.INQUIRE: ("symptom", "disease"),
    A.MAKE_DIAGNOSIS: ("medicine", "test"),
    A.PRESCRIBE_MEDICATIONS: ("medicine",),
    A.STATE_REQUIRED_TEST: ("test", "disease"),
    A.PROVIDE_DAILY_PRECAUTIONS: ("symptom",),
    A.INFORM: ("disease", "medicine"),
    A.CHITCHAT: ("symptom",),
}

DOCTOR_TEMPLATES = {
    A.INQUIRE: ["do you have {E} ?", "how long have you had {E} ?", "any {E} recently ?"],
    A.MAKE_DIAGNOSIS: ["you may have {E} .", "it looks like {E} ."],
    A.PRESCRIBE_MEDICATIONS: ["please take {E} twice a day .", "you can take {E} after meals ."],
    A.STATE_REQUIRED_TEST: ["you need to do a {E} .", "i suggest a {E} first ."],
    A.PROVIDE_DAILY_PRECAUTIONS: ["drink plenty of water and rest .", "avoid spicy food and stay warm ."],
    A.INFORM: ["{E} is common and usually mild .", "this is related to {E} ."],
    A.CHITCHAT: ["hello !", "you are welcome , get well soon !"],
}
PATIENT_TEMPLATES = ["i have {E} .", "i feel {E} {W} .", "is {E} serious ?", "my {E} got worse {W} .",
                     "what about {E} ?"]


class SynthConfigError(ValueError):
    pass


@dataclass
class SynthConfig:
    n_entities: int = 200
    kg_degree: int = 4
    n_dialogues: int = 2000
    min_turns: int = 3
    max_turns: int = 14
    p_hop: float = 0.9
    vocab_size: int = 60
    seed: int = 7
    grammar: dict = field(default_factory=lambda: {k: dict(v) for k, v in DEFAULT_GRAMMAR.items()})
    triggers: dict = field(default_factory=lambda: {k: dict(v) for k, v in DEFAULT_TRIGGERS.items()})
    category_weight: float = 4.0

    def validate(self) -> None:
        if not 0.0 <= self.p_hop <= 1.0:
            raise SynthConfigError(f"p_hop must lie in [0, 1], got {self.p_hop}")
        if self.n_entities < 2 or self.kg_degree < 1 or self.kg_degree >= self.n_entities:
            raise SynthConfigError("need n_entities >= 2 and 1 <= kg_degree < n_entities")
        if (self.n_entities * self.kg_degree) % 2:
            raise SynthConfigError("n_entities * kg_degree must be even for a regular graph")
        if not 1 <= self.min_turns <= self.max_turns:
            raise SynthConfigError("need 1 <= min_turns <= max_turns")
        if self.n_dialogues < 0 or self.vocab_size < 1:
            raise SynthConfigError("n_dialogues >= 0 and vocab_size >= 1 required")
        for state, row in self.grammar.items():
            if state not in ACT_STATES:
                raise SynthConfigError(f"unknown act state {state!r}")
            if any(p < 0 or p > 1 for p in row.values()):
                raise SynthConfigError(f"grammar row {state!r} has a probability outside [0, 1]")
            if abs(sum(row.values()) - 1.0) > 1e-9:
                raise SynthConfigError(f"grammar row {state!r} sums to {sum(row.values())}, not 1")
            for nxt in row:
                if nxt not in ACT_STATES:
                    raise SynthConfigError(f"grammar row {state!r} targets unknown state {nxt!r}")
        if "open" not in self.grammar:
            raise SynthConfigError("grammar needs an 'open' state")

    def to_json(self) -> dict:
        return asdict(self)


@dataclass
class PlantedDynamics:
    """Ground truth behind a generated corpus, for assertions in tests."""

    config: dict
    categories: dict[str, str]
    act_states: dict[str, list[str]]
    grammar: dict
    triggers: dict
    state_sequences: dict[str, list[str]]
    hop_draws: dict[str, list[bool]]

    def to_json(self) -> dict:
        return asdict(self)


def _make_names(rng: np.random.Generator, n: int) -> tuple[list[str], list[str]]:
    counts = np.floor(np.asarray(CATEGORY_SHARE) * n).astype(int)
    counts[0] += n - counts.sum()
    cats = [c for c, k in zip(CATEGORIES, counts) for _ in range(k)]
    names, used = [], set()
    for cat in cats:
        while True:
            root = "".join(rng.choice(_SYLLABLES, size=2)) + _SUFFIX[cat]
            name = root
            if rng.random() < 0.2:
                name = f"{rng.choice(_MODIFIERS)} {root}"
            if root not in used:
                used.add(root)
                break
        names.append(name)
    return names, cats


def _filler_words(rng: np.random.Generator, n: int) -> list[str]:
    words: list[str] = []
    seen = set()
    while len(words) < n:
        w = "".join(rng.choice(_SYLLABLES, size=int(rng.integers(1, 3))))
        if w not in seen:
            seen.add(w)
            words.append(w)
    return words


class _DialogueWriter:
    def __init__(self, cfg: SynthConfig, kg: KnowledgeGraph, categories: dict[str, str],
                 fillers: list[str], rng: np.random.Generator):
        self.cfg, self.kg, self.cat, self.fillers, self.rng = cfg, kg, categories, fillers, rng
        self.entities = kg.entities
        self.mentioned: list[str] = []
        self.visible: set[str] = set()
        self.hops: list[bool] = []

    def _pick(self, previous: list[str], favored: tuple[str, ...]) -> str:
        rng, kg = self.rng, self.kg
        mentioned = set(self.mentioned)
        visible = self.visible
        hop = rng.random() < self.cfg.p_hop
        self.hops.append(bool(hop))
        if hop:
            # hop from earlier utterances only, never from picks of the utterance being written
            pools = [
                {n for e in previous for n in kg.neighbors(e)} - mentioned,
                {n for e in visible for n in kg.neighbors(e)} - mentioned,
                {n for e in visible for n in kg.neighbors(e)},
            ]
            for pool in pools:
                if pool:
                    break
        else:
            pool = set(self.entities) - mentioned
        if not pool:
            pool = set(self.entities)
        cands = sorted(pool)
        w = np.array([self.cfg.category_weight if self.cat[c] in favored else 1.0 for c in cands])
        choice = cands[int(rng.choice(len(cands), p=w / w.sum()))]
        self.mentioned.append(choice)
        return choice

    def pick_many(self, k: int, previous: list[str], favored: tuple[str, ...]) -> list[str]:
        self.visible = set(self.mentioned)
        out: list[str] = []
        for _ in range(k):
            e = self._pick(previous, favored)
            if e not in out:
                out.append(e)
        return out

    def patient(self, entities: list[str]) -> list[str]:
        rng = self.rng
        toks: list[str] = []
        for e in entities:
            tpl = PATIENT_TEMPLATES[int(rng.integers(len(PATIENT_TEMPLATES)))]
            filler = self.fillers[int(rng.integers(len(self.fillers)))]
            toks.extend(tpl.replace("{E}", e).replace("{W}", filler).split())
        return toks

    def doctor(self, acts: tuple[ActLabel, ...], entities: list[str]) -> list[str]:
        rng = self.rng
        remaining = list(entities)
        toks: list[str] = []
        for act in acts:
            tpl = DOCTOR_TEMPLATES[act][int(rng.integers(len(DOCTOR_TEMPLATES[act])))]
            if act is A.CHITCHAT:  # greet when opening, sign off when closing; the draw above keeps the stream aligned
                tpl = DOCTOR_TEMPLATES[act][1 if A.PROVIDE_DAILY_PRECAUTIONS in acts else 0]
            if "{E}" in tpl:
                if not remaining:
                    continue
                favored = ACT_CATEGORY[act]
                pick = next((e for e in remaining if self.cat[e] in favored), remaining[0])
                remaining.remove(pick)
                tpl = tpl.replace("{E}", pick)
            toks.extend(tpl.split())
        for e in remaining:
            toks.extend(f"also {e} .".split())
        return toks


def _next_state(cfg: SynthConfig, state: str, patient_cats: set[str], rng: np.random.Generator) -> str:
    row = dict(cfg.grammar[state])
    for cat, boosts in cfg.triggers.items():
        if cat in patient_cats:
            for nxt, factor in boosts.items():
                if nxt in row:
                    row[nxt] *= factor
    names = sorted(row)
    p = np.array([row[n] for n in names])
    return names[int(rng.choice(len(names), p=p / p.sum()))]


def build_synthetic_kg(cfg: SynthConfig) -> tuple[KnowledgeGraph, dict[str, str]]:
    rng = np.random.default_rng([cfg.seed, 0])
    names, cats = _make_names(rng, cfg.n_entities)
    g = nx.random_regular_graph(cfg.kg_degree, cfg.n_entities, seed=int(rng.integers(2**31)))
    kg = KnowledgeGraph(entities=names)
    for a, b in sorted(g.edges()):
        kg.add_edge(names[a], names[b])
    return kg, dict(zip(names, cats))


def generate_synthetic(cfg: SynthConfig) -> tuple[KnowledgeGraph, list[Dialogue], PlantedDynamics]:
    """Deterministic under ``cfg.seed``; dialogue i draws from its own RNG stream (seed, i + 1)."""
    cfg.validate()
    kg, categories = build_synthetic_kg(cfg)
    fillers = _filler_words(np.random.default_rng([cfg.seed, 1 << 20]), cfg.vocab_size)
    corpus: list[Dialogue] = []
    states: dict[str, list[str]] = {}
    hops: dict[str, list[bool]] = {}
    for i in range(cfg.n_dialogues):
        rng = np.random.default_rng([cfg.seed, i + 1])
        did = f"syn-{cfg.seed}-{i:05d}"
        w = _DialogueWriter(cfg, kg, categories, fillers, rng)
        seed_entity = w.entities[int(rng.integers(len(w.entities)))]
        w.mentioned.append(seed_entity)
        p_ents = [seed_entity]
        utts: list[Utterance] = [Utterance(ROLE_PATIENT, w.patient(p_ents), p_ents)]
        state = "open"
        seq = [state]
        for turn in range(1, cfg.max_turns + 1):
            acts = ACT_STATES[state]
            favored = tuple(c for a in acts for c in ACT_CATEGORY[a])
            d_ents = w.pick_many(int(rng.integers(1, 4)), p_ents, favored)
            utts.append(Utterance(ROLE_DOCTOR, w.doctor(acts, d_ents), d_ents, list(acts)))
            if state == "close" or turn == cfg.max_turns:
                break
            reply = tuple(c for a in acts for c in PATIENT_REPLY_CATEGORY[a])
            p_ents = w.pick_many(int(rng.integers(1, 4)), d_ents, reply)
            utts.append(Utterance(ROLE_PATIENT, w.patient(p_ents), p_ents))
            if turn + 1 == cfg.max_turns:
                state = "close"
            else:
                state = _next_state(cfg, state, {categories[e] for e in p_ents}, rng)
                if state == "close" and turn + 1 < cfg.min_turns:
                    state = "inform"
            seq.append(state)
        corpus.append(Dialogue(did, utts))
        states[did] = seq
        hops[did] = w.hops
    oracle = PlantedDynamics(
        config=cfg.to_json(),
        categories=categories,
        act_states={k: [a.value for a in v] for k, v in ACT_STATES.items()},
        grammar=cfg.grammar,
        triggers=cfg.triggers,
        state_sequences=states,
        hop_draws=hops,
    )
    return kg, corpus, oracle
