"""Evaluation of embedding spaces against the label tree.

Covers classification (macro leaf F1, unseen-class LSA accuracies) and
retrieval (RP@5, mean normalised rank over tree levels, tree-relevance
NDCG). Ranked lists order candidates by descending cosine similarity with
ties broken by ascending sample id, and never contain the query itself.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, asdict

import numpy as np

from .datasplit import SplitAssignment, lowest_seen_ancestor
from .losses import unit_rows
from .taxonomy import Taxonomy


class MetricError(ValueError):
    """Metric undefined for the given inputs."""


@dataclass(frozen=True)
class RankedList:
    query: str
    candidates: tuple[str, ...]


@dataclass
class MetricsReport:
    """All evaluation numbers for one fold and one loss combination."""

    leaf_f1: float | None = None
    leaf_rp_at_5: float | None = None
    mnr: float | None = None
    ndcg_sum: float | None = None
    ndcg_max: float | None = None
    acc_blind: float | None = None
    acc_aware: float | None = None
    ratio_blind_aware: float | None = None

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, data: dict) -> "MetricsReport":
        known = {f for f in cls.__dataclass_fields__}
        return cls(**{k: v for k, v in data.items() if k in known})


def build_ranked_lists(
    embeddings: dict[str, np.ndarray], pool_ids: list[str] | None = None
) -> list[RankedList]:
    """One ranked candidate list per query, over the given pool.

    The pool defaults to all embedded ids; each query is ranked against the
    rest of the pool.
    """
    ids = sorted(embeddings) if pool_ids is None else sorted(pool_ids)
    if len(ids) < 2:
        raise MetricError("need at least two samples to rank")
    matrix, _ = unit_rows(np.stack([embeddings[sid] for sid in ids]))
    sims = matrix @ matrix.T
    ranked = []
    for qi, qid in enumerate(ids):
        order = np.argsort(-sims[qi], kind="stable")  # stable: ties fall back to id order
        ranked.append(
            RankedList(query=qid, candidates=tuple(ids[j] for j in order if j != qi))
        )
    return ranked


def leaf_f1(predictions: dict[str, int], truths: dict[str, int], classes: list[int]) -> float:
    """Macro-averaged F1 over the given classes.

    A class absent from both predictions and truths still counts, with F1 0.
    """
    if not truths:
        raise MetricError("empty evaluation set")
    missing = sorted(set(truths) - set(predictions))
    if missing:
        raise MetricError(f"missing predictions for samples: {missing[:5]}")
    scores = []
    for cls in classes:
        tp = sum(1 for sid, t in truths.items() if t == cls and predictions[sid] == cls)
        fp = sum(1 for sid, t in truths.items() if t != cls and predictions[sid] == cls)
        fn = sum(1 for sid, t in truths.items() if t == cls and predictions[sid] != cls)
        denom = 2 * tp + fp + fn
        scores.append(2 * tp / denom if denom else 0.0)
    return float(np.mean(scores))


def rp_at_k(ranked_lists: list[RankedList], leaf_of: dict[str, int], k: int = 5) -> float:
    """Mean fraction of the top-k candidates sharing the query's leaf."""
    if any(len(rl.candidates) < k for rl in ranked_lists):
        raise MetricError(f"every query needs at least {k} candidates")
    precisions = [
        sum(1 for cid in rl.candidates[:k] if leaf_of[cid] == leaf_of[rl.query]) / k
        for rl in ranked_lists
    ]
    return float(np.mean(precisions))


def _level_mean_ranks(
    rl: RankedList,
    taxonomy: Taxonomy,
    leaf_of: dict[str, int],
    levels: list[tuple[int, list[int]]],
) -> dict[int, float | None]:
    """Per retained level, the mean shifted-normalised rank of the candidates
    under the query's ancestor at that level; None when none exist."""
    n = len(rl.candidates)
    if n < 1:
        raise MetricError(f"query {rl.query!r} has no candidates")
    rank_of = {cid: r for r, cid in enumerate(rl.candidates, start=1)}
    result: dict[int, float | None] = {}
    for level, _ in levels:
        node = taxonomy.target_at_level(leaf_of[rl.query], level)
        member_leaves = set(taxonomy.leaves_under(node))
        ranks = [rank_of[cid] for cid in rl.candidates if leaf_of[cid] in member_leaves]
        result[level] = float(np.mean([(r - 1) / n for r in ranks])) if ranks else None
    return result


def mnr(ranked_lists: list[RankedList], taxonomy: Taxonomy, leaf_of: dict[str, int]) -> float:
    """Mean normalised rank of tree-similar candidates, averaged over levels.

    For each query and each retained tree level, the candidates under the
    query's ancestor at that level count as correct; their ranks, shifted by
    one and divided by the candidate count, are averaged over answers, then
    levels, then queries. Deeper levels' members recur at every ancestor
    level, which weights fine-grained neighbours more. A level with no
    correct candidate is skipped for that query (the inner mean is undefined).
    """
    levels = taxonomy.levels_with_multiple_classes()
    if not levels:
        raise MetricError("tree has no level with more than one class")
    query_values = []
    skipped_levels = 0
    skipped_queries = 0
    for rl in ranked_lists:
        per_level = _level_mean_ranks(rl, taxonomy, leaf_of, levels)
        level_values = [v for v in per_level.values() if v is not None]
        skipped_levels += sum(1 for v in per_level.values() if v is None)
        if level_values:
            query_values.append(float(np.mean(level_values)))
        else:
            skipped_queries += 1
    if skipped_levels:
        warnings.warn(f"MNR skipped {skipped_levels} query-level terms with no correct candidate")
    if skipped_queries:
        warnings.warn(f"MNR skipped {skipped_queries} queries with no correct candidate at all")
    if not query_values:
        raise MetricError("MNR undefined: no query had a correct candidate")
    return float(np.mean(query_values))


def relevance(taxonomy: Taxonomy, leaf1: int, leaf2: int, kind: str) -> float:
    """Tree-distance relevance between two leaves, in [0, 1].

    'sum' divides the total leaf-to-LCA edge count by the tree diameter;
    'max' divides the larger of the two by the tree height.
    """
    if kind not in ("sum", "max"):
        raise MetricError(f"unknown relevance kind {kind!r}")
    if leaf1 == leaf2:
        return 1.0
    height, diameter = taxonomy.height_and_diameter()
    if height == 0:
        raise MetricError("degenerate tree: distinct leaves in a height-0 tree")
    anc = taxonomy.lca(leaf1, leaf2)
    d1 = taxonomy.depth(leaf1) - taxonomy.depth(anc)
    d2 = taxonomy.depth(leaf2) - taxonomy.depth(anc)
    if kind == "sum":
        return 1.0 - (d1 + d2) / diameter
    return 1.0 - max(d1, d2) / height


class _RelevanceCache:
    def __init__(self, taxonomy: Taxonomy, kind: str):
        self.taxonomy = taxonomy
        self.kind = kind
        self._cache: dict[tuple[int, int], float] = {}

    def __call__(self, l1: int, l2: int) -> float:
        key = (l1, l2) if l1 <= l2 else (l2, l1)
        if key not in self._cache:
            self._cache[key] = relevance(self.taxonomy, l1, l2, self.kind)
        return self._cache[key]


def _query_ndcg(
    rl: RankedList, leaf_of: dict[str, int], rel: _RelevanceCache
) -> float | None:
    """One query's DCG over the full list divided by its ideal DCG; None when
    every candidate has relevance 0."""
    if not rl.candidates:
        raise MetricError(f"query {rl.query!r} has no candidates")
    rels = np.array([rel(leaf_of[rl.query], leaf_of[cid]) for cid in rl.candidates])
    discounts = 1.0 / np.log2(np.arange(2, len(rels) + 2))
    ideal = np.sort(rels)[::-1]
    idcg = float(ideal @ discounts)
    if idcg == 0.0:
        return None
    return float(rels @ discounts) / idcg


def ndcg(
    ranked_lists: list[RankedList],
    taxonomy: Taxonomy,
    leaf_of: dict[str, int],
    kind: str,
) -> float:
    """Mean NDCG with linear tree-relevance gains over the full list."""
    rel = _RelevanceCache(taxonomy, kind)
    values = []
    skipped = 0
    for rl in ranked_lists:
        value = _query_ndcg(rl, leaf_of, rel)
        if value is None:
            skipped += 1
        else:
            values.append(value)
    if skipped:
        warnings.warn(f"NDCG skipped {skipped} queries whose candidates all have relevance 0")
    if not values:
        raise MetricError("NDCG undefined: every query was skipped")
    return float(np.mean(values))


def per_query_diagnostics(
    ranked_lists: list[RankedList], taxonomy: Taxonomy, leaf_of: dict[str, int]
) -> list[dict]:
    """One row per query: mean normalised rank per retained level plus both
    NDCG values; blank entries where a quantity is undefined."""
    levels = taxonomy.levels_with_multiple_classes()
    rel_sum = _RelevanceCache(taxonomy, "sum")
    rel_max = _RelevanceCache(taxonomy, "max")
    rows = []
    for rl in ranked_lists:
        row: dict = {"query": rl.query}
        for level, value in _level_mean_ranks(rl, taxonomy, leaf_of, levels).items():
            row[f"mnr_level_{level}"] = value
        row["ndcg_sum"] = _query_ndcg(rl, leaf_of, rel_sum)
        row["ndcg_max"] = _query_ndcg(rl, leaf_of, rel_max)
        rows.append(row)
    return rows


def acc_blind(
    predicted_leaf: dict[str, int],
    true_leaf: dict[str, int],
    taxonomy: Taxonomy,
    split: SplitAssignment,
) -> float:
    """Accuracy of leaf predictions lifted to the true lowest seen ancestor.

    The predicted leaf is traced up to the LSA's depth (or kept as is when
    already shallower) and compared against the true LSA.
    """
    if not true_leaf:
        raise MetricError("empty prediction set")
    correct = 0
    for sid, true in true_leaf.items():
        lsa = lowest_seen_ancestor(taxonomy, split, true)
        pred = predicted_leaf[sid]
        lifted = taxonomy.ancestor_at_depth(
            pred, min(taxonomy.depth(lsa), taxonomy.depth(pred))
        )
        correct += lifted == lsa
    return correct / len(true_leaf)


def acc_aware(
    level_predictions: dict[int, dict[str, int]],
    level_classes: dict[int, set[int]],
    true_leaf: dict[str, int],
    taxonomy: Taxonomy,
    split: SplitAssignment,
) -> float | None:
    """Accuracy of the level head sitting at each sample's true LSA depth.

    Samples whose LSA depth has no head fall back to the shallowest deeper
    head that carries the LSA as a class; if none exists the sample cannot
    be evaluated and is skipped with a warning. Returns None when nothing
    is evaluable.
    """
    if not true_leaf:
        raise MetricError("empty prediction set")
    evaluated = 0
    correct = 0
    skipped = 0
    retained = sorted(level_predictions)
    for sid, true in true_leaf.items():
        lsa = lowest_seen_ancestor(taxonomy, split, true)
        depth = taxonomy.depth(lsa)
        use_level = None
        if depth in level_predictions:
            use_level = depth
        else:
            for level in retained:
                if level > depth and lsa in level_classes.get(level, ()):
                    use_level = level
                    break
        if use_level is None:
            skipped += 1
            continue
        evaluated += 1
        correct += level_predictions[use_level][sid] == lsa
    if skipped:
        warnings.warn(f"acc_aware skipped {skipped} samples whose LSA level has no head")
    if not evaluated:
        return None
    return correct / evaluated
