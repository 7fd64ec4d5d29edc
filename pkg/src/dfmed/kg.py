"""Knowledge graph storage, greedy entity span matching, and one-hop expansion."""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence


class KGFormatError(ValueError):
    pass


class KnowledgeGraph:
    """Undirected entity graph. Entities are identified by their space-joined name."""

    def __init__(self, edges: Iterable[tuple[str, str]] = (), entities: Iterable[str] = ()):
        self._adj: dict[str, set[str]] = {}
        for e in entities:
            self.add_entity(e)
        for a, b in edges:
            self.add_edge(a, b)
        self._index = None
        self._tokens = None

    def add_entity(self, name: str) -> None:
        self._adj.setdefault(name, set())
        self._index = self._tokens = None

    def add_edge(self, a: str, b: str) -> None:
        self.add_entity(a)
        self.add_entity(b)
        if a != b:
            self._adj[a].add(b)
            self._adj[b].add(a)

    @property
    def entities(self) -> list[str]:
        return sorted(self._adj)

    def __contains__(self, name: str) -> bool:
        return name in self._adj

    def __len__(self) -> int:
        return len(self._adj)

    def neighbors(self, name: str) -> list[str]:
        return sorted(self._adj[name])

    def has_edge(self, a: str, b: str) -> bool:
        return b in self._adj.get(a, ())

    def degree(self, name: str) -> int:
        return len(self._adj[name])

    def edges(self) -> list[tuple[str, str]]:
        return sorted((a, b) for a, nbrs in self._adj.items() for b in nbrs if a < b)

    def entity_index(self) -> dict[str, int]:
        """Stable entity -> integer id map (sorted by name)."""
        if self._index is None:
            self._index = {e: i for i, e in enumerate(self.entities)}
        return self._index

    def name_tokens(self) -> dict[tuple[str, ...], str]:
        if self._tokens is None:
            self._tokens = {tuple(e.split()): e for e in self._adj}
        return self._tokens

    def __eq__(self, other) -> bool:
        return isinstance(other, KnowledgeGraph) and self._adj == other._adj


def load_kg(path: str | Path) -> KnowledgeGraph:
    """Read a UTF-8 TSV edge list (``entityA<TAB>entityB`` per line)."""
    kg = KnowledgeGraph()
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.rstrip("\n").rstrip("\r")
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) != 2 or not parts[0].strip() or not parts[1].strip():
                raise KGFormatError(f"{path}:{lineno}: expected 'entityA<TAB>entityB', got {line!r}")
            a, b = (" ".join(p.split()) for p in parts)
            if a == b:
                raise KGFormatError(f"{path}:{lineno}: self-loop on {a!r}")
            kg.add_edge(a, b)
    return kg


def save_kg(kg: KnowledgeGraph, path: str | Path) -> None:
    isolated = [e for e in kg.entities if kg.degree(e) == 0]
    if isolated:
        raise KGFormatError(f"edge-list format cannot store isolated entities: {isolated[:3]}")
    with open(path, "w", encoding="utf-8") as fh:
        for a, b in kg.edges():
            fh.write(f"{a}\t{b}\n")


def match_entities(tokens: Sequence[str], kg: KnowledgeGraph) -> list[str]:
    """Left-to-right greedy longest match of entity names over ``tokens``.

    Matches never overlap; repeated entities are reported once, in order of
    first occurrence.
    """
    names = kg.name_tokens()
    if not names:
        return []
    max_len = max(len(k) for k in names)
    tokens = list(tokens)
    found: list[str] = []
    seen = set()
    i = 0
    while i < len(tokens):
        for n in range(min(max_len, len(tokens) - i), 0, -1):
            ent = names.get(tuple(tokens[i:i + n]))
            if ent is not None:
                if ent not in seen:
                    seen.add(ent)
                    found.append(ent)
                i += n
                break
        else:
            i += 1
    return found


def one_hop(kg: KnowledgeGraph, seeds: Iterable[str]) -> set[str]:
    """Neighbors of ``seeds``, excluding the seeds themselves."""
    seeds = set(seeds)
    out: set[str] = set()
    for s in seeds:
        if s not in kg:
            raise KeyError(f"unknown entity {s!r}")
        out.update(kg._adj[s])
    return out - seeds


@dataclass
class TurnGraph:
    """Entity graph of one turn: mentioned nodes, their KG frontier, and the edges among them."""

    turn: int
    mentions: list[str] = field(default_factory=list)
    frontier: list[str] = field(default_factory=list)
    edges: list[tuple[str, str]] = field(default_factory=list)

    @property
    def nodes(self) -> list[str]:
        return self.mentions + self.frontier

    def __len__(self) -> int:
        return len(self.mentions) + len(self.frontier)

    def adjacency(self, self_loops: bool = True):
        """Dense boolean adjacency in ``nodes`` order."""
        import numpy as np

        nodes = self.nodes
        pos = {e: i for i, e in enumerate(nodes)}
        adj = np.zeros((len(nodes), len(nodes)), dtype=bool)
        for a, b in self.edges:
            adj[pos[a], pos[b]] = adj[pos[b], pos[a]] = True
        if self_loops:
            np.fill_diagonal(adj, True)
        return adj


def make_turn_graph(turn: int, mentions: Sequence[str], cumulative: Iterable[str],
                    kg: KnowledgeGraph) -> TurnGraph:
    """Turn graph from this turn's mentions and the mentions accumulated so far.

    The frontier is the one-hop neighborhood of every entity mentioned up to
    and including this turn, minus those mentions.
    """
    mentions = [m for m in dict.fromkeys(mentions) if m in kg]
    if not mentions:
        return TurnGraph(turn)
    cum = set(c for c in cumulative if c in kg) | set(mentions)
    frontier = sorted(one_hop(kg, cum) - set(mentions))
    nodes = mentions + frontier
    node_set = set(nodes)
    edges = sorted({(a, b) if a < b else (b, a)
                    for a in nodes for b in kg._adj[a] if b in node_set})
    return TurnGraph(turn, list(mentions), frontier, edges)


def _utterance_entities(utt, kg: KnowledgeGraph) -> list[str]:
    ents = getattr(utt, "entities", None)
    if ents is None:
        return match_entities(utt.tokens, kg)
    return [e for e in ents if e in kg]


def build_turn_graph(dialogue, k: int, kg: KnowledgeGraph, target_turn: int | None = None) -> TurnGraph:
    """Graph of round ``k`` as seen when predicting doctor turn ``target_turn``.

    Rounds before the target contribute both the patient and doctor
    utterance; the target round contributes only its patient utterance.
    ``target_turn`` defaults to ``k``.
    """
    t = k if target_turn is None else target_turn
    if not 1 <= k <= t:
        raise ValueError(f"turn {k} outside 1..{t}")
    rounds = dialogue.rounds()
    cumulative: list[str] = []
    mentions: list[str] = []
    for j in range(1, k + 1):
        patient, doctor = rounds[j - 1]
        visible = _utterance_entities(patient, kg)
        if j < t and doctor is not None:
            visible = visible + _utterance_entities(doctor, kg)
        cumulative.extend(visible)
        if j == k:
            mentions = visible
    return make_turn_graph(k, mentions, cumulative, kg)
