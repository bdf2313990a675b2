"""Seen/unseen leaf folds and train/valid/test/prediction sample partitions."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dataset import LabeledSample
from .taxonomy import Taxonomy, TaxonomyError, parse_taxonomy

SUBSETS = ("train", "valid", "test", "prediction")
UNSEEN_COUNT_THRESHOLD = 10  # leaves with fewer samples are unseen in every fold


class SplitError(ValueError):
    """Invalid split request or inconsistent split data."""


@dataclass(frozen=True)
class SplitAssignment:
    """One fold: leaf-level seen/unseen partition plus per-sample subsets."""

    fold_index: int
    seen_leaves: frozenset[int]
    unseen_leaves: frozenset[int]
    partition: dict[str, str]

    def ids_in(self, subset: str) -> list[str]:
        if subset not in SUBSETS:
            raise SplitError(f"unknown subset {subset!r}")
        return sorted(sid for sid, name in self.partition.items() if name == subset)


def leaf_counts(taxonomy: Taxonomy, dataset: list[LabeledSample]) -> dict[int, int]:
    """Sample count per leaf node id; leaves without samples count 0."""
    counts = {leaf: 0 for leaf in taxonomy.leaf_ids}
    for sample in dataset:
        counts[taxonomy.leaf_id_for(sample)] += 1
    return counts


def split_leaves(
    taxonomy: Taxonomy, counts: dict[int, int], k_folds: int, seed: int
) -> list[tuple[frozenset[int], frozenset[int]]]:
    """Per-fold (seen, unseen) leaf sets.

    Leaves under the sample-count threshold are unseen in every fold. The
    remaining leaves are shuffled once and dealt into k disjoint groups, so
    each eligible leaf is unseen in exactly one fold.
    """
    if k_folds < 2:
        raise SplitError("k_folds must be at least 2")
    missing = taxonomy.leaf_ids - set(counts)
    if missing:
        names = sorted(taxonomy.name(l) for l in missing)
        raise SplitError(f"counts missing for leaves: {names}")
    small = frozenset(l for l in taxonomy.leaf_ids if counts[l] < UNSEEN_COUNT_THRESHOLD)
    eligible = sorted(taxonomy.leaf_ids - small)
    if not eligible:
        raise SplitError("no leaf has enough samples to ever be seen")
    rng = np.random.default_rng(seed)
    shuffled = [eligible[i] for i in rng.permutation(len(eligible))]
    folds = []
    for fold in range(k_folds):
        group = frozenset(shuffled[fold::k_folds])
        unseen = group | small
        folds.append((frozenset(taxonomy.leaf_ids - unseen), unseen))
    return folds


def split_within_leaf(
    sample_ids: list[str],
    ratios: tuple[float, float, float] = (0.8, 0.1, 0.1),
    seed: int | list[int] = 0,
) -> dict[str, str]:
    """Shuffle one seen leaf's samples and cut train/valid/test by the ratios.

    Valid and test sizes round down; the remainder goes to train.
    """
    if len(ratios) != 3 or any(r <= 0 for r in ratios) or abs(sum(ratios) - 1.0) > 1e-9:
        raise SplitError(f"ratios must be three positive values summing to 1, got {ratios}")
    n = len(sample_ids)
    n_valid = int(np.floor(ratios[1] * n))
    n_test = int(np.floor(ratios[2] * n))
    n_train = n - n_valid - n_test
    if min(n_train, n_valid, n_test) < 1:
        raise SplitError(f"{n} samples are too few to fill train/valid/test at {ratios}")
    rng = np.random.default_rng(seed)
    shuffled = [sorted(sample_ids)[i] for i in rng.permutation(n)]
    assignment = {}
    for pos, sid in enumerate(shuffled):
        if pos < n_train:
            assignment[sid] = "train"
        elif pos < n_train + n_valid:
            assignment[sid] = "valid"
        else:
            assignment[sid] = "test"
    return assignment


def make_fold_splits(
    taxonomy: Taxonomy,
    dataset: list[LabeledSample],
    k_folds: int,
    seed: int,
    ratios: tuple[float, float, float] = (0.8, 0.1, 0.1),
) -> list[SplitAssignment]:
    """All fold assignments for a dataset; pure function of its arguments."""
    counts = leaf_counts(taxonomy, dataset)
    by_leaf: dict[int, list[str]] = {leaf: [] for leaf in taxonomy.leaf_ids}
    for sample in dataset:
        by_leaf[taxonomy.leaf_id_for(sample)].append(sample.id)
    splits = []
    for fold, (seen, unseen) in enumerate(split_leaves(taxonomy, counts, k_folds, seed)):
        partition: dict[str, str] = {}
        for leaf in sorted(unseen):
            for sid in by_leaf[leaf]:
                partition[sid] = "prediction"
        for leaf in sorted(seen):
            partition.update(split_within_leaf(by_leaf[leaf], ratios, seed=[seed, fold, leaf]))
        splits.append(
            SplitAssignment(
                fold_index=fold,
                seen_leaves=seen,
                unseen_leaves=unseen,
                partition=partition,
            )
        )
    return splits


def is_seen_node(taxonomy: Taxonomy, split: SplitAssignment, node_id: int) -> bool:
    """True iff the node has at least one seen leaf as descendant-or-self."""
    return any(l in split.seen_leaves for l in taxonomy.leaves_under(node_id))


def lowest_seen_ancestor(taxonomy: Taxonomy, split: SplitAssignment, unseen_leaf: int) -> int:
    """First node above an unseen leaf with training data beneath it.

    Walks the leaf-to-root path; the root terminates the walk regardless.
    """
    if unseen_leaf not in split.unseen_leaves:
        raise SplitError(f"{taxonomy.name(unseen_leaf)!r} is not an unseen leaf of this fold")
    path = taxonomy.path_to_root(unseen_leaf)
    for node in path[1:]:
        if is_seen_node(taxonomy, split, node):
            return node
    return path[-1]


def pruned_seen_taxonomy(taxonomy: Taxonomy, split: SplitAssignment) -> Taxonomy:
    """Copy of the tree without unseen leaves or the branches left empty by them.

    Node names are preserved, so nodes correspond across the two trees by name.
    """
    if not split.seen_leaves:
        raise SplitError("cannot prune: the fold has no seen leaves")

    def keep(node_id: int) -> bool:
        return is_seen_node(taxonomy, split, node_id)

    def build(node_id: int) -> dict:
        doc: dict = {"name": taxonomy.name(node_id)}
        kept = [build(c) for c in taxonomy.children(node_id) if keep(c)]
        if kept:
            doc["children"] = kept
        return doc

    return parse_taxonomy(build(taxonomy.root))


def split_to_json(taxonomy: Taxonomy, split: SplitAssignment) -> dict:
    """JSON-ready form using leaf names, for reproducible reruns."""
    return {
        "fold": split.fold_index,
        "seen": sorted(taxonomy.name(l) for l in split.seen_leaves),
        "unseen": sorted(taxonomy.name(l) for l in split.unseen_leaves),
        "partition": {sid: split.partition[sid] for sid in sorted(split.partition)},
    }


def split_from_json(taxonomy: Taxonomy, data: dict) -> SplitAssignment:
    seen = frozenset(taxonomy.id_of(name) for name in data["seen"])
    unseen = frozenset(taxonomy.id_of(name) for name in data["unseen"])
    if seen & unseen:
        raise SplitError("seen and unseen leaf sets overlap")
    if seen | unseen != taxonomy.leaf_ids:
        raise SplitError("seen/unseen sets do not cover the leaf set")
    partition = {str(k): str(v) for k, v in data["partition"].items()}
    bad = sorted({v for v in partition.values()} - set(SUBSETS))
    if bad:
        raise SplitError(f"unknown partition subsets: {bad}")
    return SplitAssignment(
        fold_index=int(data["fold"]),
        seen_leaves=seen,
        unseen_leaves=unseen,
        partition=partition,
    )


def partition_samples(
    dataset: list[LabeledSample], split: SplitAssignment, subset: str
) -> list[LabeledSample]:
    """Dataset samples assigned to one subset, in dataset order."""
    if subset not in SUBSETS:
        raise SplitError(f"unknown subset {subset!r}")
    try:
        return [s for s in dataset if split.partition[s.id] == subset]
    except KeyError as exc:
        raise SplitError(f"sample {exc.args[0]!r} is missing from the partition") from None
