"""Automatic evaluation: BLEU, ROUGE, entity P/R/F1, R@k, and act Weighted-F1.

All scores are on the percent scale.

Fixtures (checked in the test suite):

    bleu([["a", "b", "c"]], [["a", "b", "d"]], 1)     -> 66.67
    rouge([["a", "b"]], [["a", "c"]], 1)              -> 50.0
    entity_prf pred {B, C}, gold {A, B}               -> (50.0, 50.0, 50.0)
    recall_at_k, 2 gold with one in the top 20        -> 50.0
"""
from __future__ import annotations

import json
import math
from collections import Counter
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .corpus.schema import ACTS, ActLabel
from .kg import KnowledgeGraph, match_entities


def _ngrams(tokens: Sequence[str], n: int) -> Counter:
    return Counter(tuple(tokens[i: i + n]) for i in range(len(tokens) - n + 1))


def _check_aligned(a, b, what: str) -> None:
    if len(a) != len(b):
        raise ValueError(f"{what}: {len(a)} hypotheses vs {len(b)} references")


def bleu(hypotheses: Sequence[Sequence[str]], references: Sequence[Sequence[str]], n: int = 4) -> float:
    """Corpus BLEU-n with uniform weights.

    Zero match counts for orders k >= 2 are smoothed to 1/(total+1); a zero
    unigram count gives 0. Brevity penalty exp(1 - r/c) applies when c < r.
    """
    _check_aligned(hypotheses, references, "bleu")
    if not hypotheses:
        return 0.0
    log_p = 0.0
    for k in range(1, n + 1):
        match = total = 0
        for h, r in zip(hypotheses, references):
            hc, rc = _ngrams(h, k), _ngrams(r, k)
            match += sum(min(c, rc[g]) for g, c in hc.items())
            total += sum(hc.values())
        if match == 0:
            if k == 1:
                return 0.0
            p = 1.0 / (total + 1)
        else:
            p = match / total
        log_p += math.log(p) / n
    c = sum(len(h) for h in hypotheses)
    r = sum(len(x) for x in references)
    if c == 0:
        return 0.0
    bp = 1.0 if c >= r else math.exp(1.0 - r / c)
    return 100.0 * bp * math.exp(log_p)


def rouge_detail(hypotheses, references, n: int = 1) -> tuple[float, int]:
    """(macro ROUGE-n F1, number of pairs skipped for an empty reference)."""
    _check_aligned(hypotheses, references, "rouge")
    scores, skipped = [], 0
    for h, r in zip(hypotheses, references):
        rc = _ngrams(r, n)
        if not rc:
            skipped += 1
            continue
        hc = _ngrams(h, n)
        overlap = sum(min(c, rc[g]) for g, c in hc.items())
        if overlap == 0:
            scores.append(0.0)
            continue
        p = overlap / sum(hc.values())
        rec = overlap / sum(rc.values())
        scores.append(2 * p * rec / (p + rec))
    return (100.0 * float(np.mean(scores)) if scores else 0.0), skipped


def rouge(hypotheses, references, n: int = 1) -> float:
    return rouge_detail(hypotheses, references, n)[0]


@dataclass
class PRF:
    precision: float
    recall: float
    f1: float
    n_pred: int = 0
    n_gold: int = 0
    n_hit: int = 0


def prf_from_counts(hit: int, n_pred: int, n_gold: int) -> PRF:
    p = hit / n_pred if n_pred else 0.0
    r = hit / n_gold if n_gold else 0.0
    f = 2 * p * r / (p + r) if p + r > 0 else 0.0
    return PRF(100 * p, 100 * r, 100 * f, n_pred, n_gold, hit)


def entity_prf(hypotheses: Sequence[Sequence[str]], gold_sets: Sequence[Sequence[str]],
               kg: KnowledgeGraph | None = None) -> PRF:
    """Micro P/R/F1 of entities string-matched in each hypothesis against gold sets.

    With ``kg=None`` the hypotheses are taken to already be entity lists.
    """
    _check_aligned(hypotheses, gold_sets, "entity_prf")
    hit = n_pred = n_gold = 0
    for h, g in zip(hypotheses, gold_sets):
        pred = set(match_entities(list(h), kg)) if kg is not None else set(h)
        gold = set(g)
        hit += len(pred & gold)
        n_pred += len(pred)
        n_gold += len(gold)
    return prf_from_counts(hit, n_pred, n_gold)


def recall_at_k(scores: Sequence[np.ndarray], gold_positions: Sequence[Sequence[int]], k: int = 20) -> float | None:
    """Micro R@k. ``gold_positions`` index into each score vector.

    Candidates are assumed sorted by entity id, so position order breaks ties.
    Returns None when no example has a gold target.
    """
    _check_aligned(scores, gold_positions, "recall_at_k")
    hit = total = 0
    for sc, gold in zip(scores, gold_positions):
        if len(gold) == 0:
            continue
        sc = np.asarray(sc, dtype=np.float64)
        top = np.lexsort((np.arange(len(sc)), -sc))[:k]
        hit += len(set(top.tolist()) & set(int(g) for g in gold))
        total += len(gold)
    return 100.0 * hit / total if total else None


def random_recall_baseline(pool_sizes: Sequence[int], gold_counts: Sequence[int], k: int = 20) -> float | None:
    """Expected micro R@k of a uniformly random ranking: each gold lands in the top k w.p. min(k, n)/n."""
    hit = total = 0.0
    for n, g in zip(pool_sizes, gold_counts):
        if g == 0:
            continue
        hit += g * min(k, n) / n
        total += g
    return 100.0 * hit / total if total else None


def weighted_f1(pred_sets: Sequence[Sequence[ActLabel]], gold_sets: Sequence[Sequence[ActLabel]]
                ) -> tuple[float, dict[str, PRF]]:
    """Support-weighted mean of per-act binary F1; acts with zero support are left out of the mean."""
    _check_aligned(pred_sets, gold_sets, "weighted_f1")
    table: dict[str, PRF] = {}
    num = den = 0.0
    for act in ACTS:
        hit = n_pred = n_gold = 0
        for p, g in zip(pred_sets, gold_sets):
            ip, ig = act in p, act in g
            hit += ip and ig
            n_pred += ip
            n_gold += ig
        prf = prf_from_counts(hit, n_pred, n_gold)
        table[act.value] = prf
        num += prf.f1 * n_gold
        den += n_gold
    return (num / den if den else 0.0), table


def majority_act_baseline(train_gold: Sequence[Sequence[ActLabel]], test_gold: Sequence[Sequence[ActLabel]]
                          ) -> tuple[float, ActLabel]:
    """Weighted-F1 of always predicting the act most frequent in ``train_gold``."""
    counts = Counter(a for s in train_gold for a in s)
    majority = max(ACTS, key=lambda a: (counts[a], -a.index))
    return weighted_f1([[majority]] * len(test_gold), test_gold)[0], majority


@dataclass
class EvalReport:
    bleu1: float | None = None
    bleu2: float | None = None
    bleu4: float | None = None
    rouge1: float | None = None
    rouge2: float | None = None
    entity_p: float | None = None
    entity_r: float | None = None
    entity_f1: float | None = None
    recall20: float | None = None
    weighted_f1: float | None = None
    per_act: dict = field(default_factory=dict)
    counts: dict = field(default_factory=dict)

    COLUMNS = (("B-1", "bleu1"), ("B-2", "bleu2"), ("B-4", "bleu4"), ("R-1", "rouge1"), ("R-2", "rouge2"),
               ("E-P", "entity_p"), ("E-R", "entity_r"), ("E-F1", "entity_f1"),
               ("R@20", "recall20"), ("Weighted-F1", "weighted_f1"))

    def to_json(self) -> dict:
        return asdict(self)

    def dumps(self) -> str:
        return json.dumps(self.to_json(), sort_keys=True, indent=2)

    @classmethod
    def from_json(cls, obj: dict) -> "EvalReport":
        return cls(**obj)

    def table(self) -> str:
        heads = [h for h, _ in self.COLUMNS]
        vals = []
        for _, attr in self.COLUMNS:
            v = getattr(self, attr)
            vals.append("n/a" if v is None else f"{v:.2f}")
        widths = [max(len(h), len(v)) for h, v in zip(heads, vals)]
        line1 = "  ".join(h.rjust(w) for h, w in zip(heads, widths))
        line2 = "  ".join(v.rjust(w) for v, w in zip(vals, widths))
        return line1 + "\n" + line2


def flow_report(outputs, report: EvalReport | None = None) -> EvalReport:
    """Fill R@20, Weighted-F1 and the per-act table from flow outputs."""
    report = report or EvalReport()
    labeled = [o for o in outputs if o.gold_acts]
    scores, gold_pos = [], []
    for o in labeled:
        pos = {c: i for i, c in enumerate(o.candidates)}
        scores.append(o.scores)
        gold_pos.append([pos[e] for e in o.reachable_gold])
    report.recall20 = recall_at_k(scores, gold_pos, 20)
    wf1, table = weighted_f1([o.acts for o in labeled], [o.gold_acts for o in labeled])
    report.weighted_f1 = wf1
    report.per_act = {k: asdict(v) for k, v in table.items()}
    report.counts.update({
        "flow_examples": len(labeled),
        "gold_entities": sum(len(o.gold_entities) for o in labeled),
        "reachable_gold": sum(len(o.reachable_gold) for o in labeled),
    })
    return report


def generation_report(hypotheses, references, gold_entities, kg: KnowledgeGraph,
                      report: EvalReport | None = None) -> EvalReport:
    report = report or EvalReport()
    report.bleu1 = bleu(hypotheses, references, 1)
    report.bleu2 = bleu(hypotheses, references, 2)
    report.bleu4 = bleu(hypotheses, references, 4)
    report.rouge1, skipped = rouge_detail(hypotheses, references, 1)
    report.rouge2, _ = rouge_detail(hypotheses, references, 2)
    prf = entity_prf(hypotheses, gold_entities, kg)
    report.entity_p, report.entity_r, report.entity_f1 = prf.precision, prf.recall, prf.f1
    report.counts.update({
        "responses": len(hypotheses), "rouge_skipped": skipped,
        "entity_pred": prf.n_pred, "entity_gold": prf.n_gold, "entity_hit": prf.n_hit,
    })
    return report
