"""Per-turn training examples: history, turn graphs, act history, and targets."""
from __future__ import annotations

from dataclasses import dataclass, field

from ..kg import KnowledgeGraph, TurnGraph, _utterance_entities, make_turn_graph, one_hop
from .schema import ActLabel, Dialogue, Utterance


@dataclass
class TrainingExample:
    dialogue_id: str
    t: int
    history: list[Utterance]
    graphs: list[TurnGraph]
    act_history: list[list[ActLabel]]
    candidates: list[str]
    target_entities: list[str]
    gold_entities: list[str]
    target_acts: list[ActLabel]
    target_tokens: list[str]
    meta: dict = field(default_factory=dict)

    @property
    def unreachable(self) -> list[str]:
        return self.meta.get("unreachable", [])


@dataclass
class DialogueGraphs:
    """All graphs needed for every target turn of one dialogue.

    ``full[k-1]`` is round k with both utterances visible (used as history for
    later targets); ``target[k-1]`` is round k with only the patient side.
    ``pools[k-1]`` is the candidate pool when predicting doctor turn k.
    """

    full: list[TurnGraph]
    target: list[TurnGraph]
    pools: list[list[str]]


def dialogue_graphs(dialogue: Dialogue, kg: KnowledgeGraph) -> DialogueGraphs:
    rounds = dialogue.rounds()
    full, target, pools = [], [], []
    cumulative: list[str] = []
    for k, (patient, doctor) in enumerate(rounds, start=1):
        p_ents = _utterance_entities(patient, kg)
        visible_p = cumulative + p_ents
        target.append(make_turn_graph(k, p_ents, visible_p, kg))
        seen = set(visible_p)
        pools.append(sorted(seen | one_hop(kg, seen)) if seen else [])
        if doctor is None:
            break
        d_ents = _utterance_entities(doctor, kg)
        cumulative = visible_p + d_ents
        full.append(make_turn_graph(k, p_ents + d_ents, cumulative, kg))
    return DialogueGraphs(full, target, pools)


def build_examples(dialogue: Dialogue, kg: KnowledgeGraph,
                   graphs: DialogueGraphs | None = None) -> list[TrainingExample]:
    """One example per doctor turn t = 1..T.

    Gold doctor entities outside the candidate pool cannot be ranked; they are
    kept in ``gold_entities`` and listed under ``meta['unreachable']``.
    """
    graphs = graphs or dialogue_graphs(dialogue, kg)
    rounds = dialogue.rounds()
    examples = []
    for t in range(1, dialogue.n_doctor_turns + 1):
        doctor = rounds[t - 1][1]
        history = dialogue.utterances[: 2 * t - 1]
        pool = graphs.pools[t - 1]
        pool_set = set(pool)
        gold = list(dict.fromkeys(doctor.entities))
        targets = [e for e in gold if e in pool_set]
        unreachable = [e for e in gold if e not in pool_set]
        examples.append(TrainingExample(
            dialogue_id=dialogue.id,
            t=t,
            history=history,
            graphs=graphs.full[: t - 1] + [graphs.target[t - 1]],
            act_history=[list(rounds[k][1].acts) for k in range(t - 1)],
            candidates=pool,
            target_entities=targets,
            gold_entities=gold,
            target_acts=list(doctor.acts),
            target_tokens=list(doctor.tokens),
            meta={"unreachable": unreachable},
        ))
    return examples
