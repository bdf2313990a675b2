"""Label tree representation and structural queries.

The tree is immutable after construction. Node ids are assigned in
pre-order over the input document, so parsing the same document twice
yields identical trees; every "iterate over nodes" loop below runs in
ascending id order, which is exactly pre-order.
"""
from __future__ import annotations

import json
import numbers
from dataclasses import dataclass
from pathlib import Path

from .dataset import LabeledSample


class TaxonomyError(ValueError):
    """Invalid tree document or invalid structural query."""


@dataclass(frozen=True)
class TaxonomyNode:
    node_id: int
    name: str
    parent: int | None
    children: tuple[int, ...]

    @property
    def is_leaf(self) -> bool:
        return not self.children


class Taxonomy:
    """Rooted tree of labels; leaf names form the fine-grained label set."""

    def __init__(self, names: list[str], parents: list[int | None]):
        if not names:
            raise TaxonomyError("empty taxonomy")
        if len(names) != len(parents):
            raise TaxonomyError("names/parents length mismatch")
        if parents[0] is not None or any(p is None for p in parents[1:]):
            raise TaxonomyError("exactly one root (node 0) is required")
        if len(set(names)) != len(names):
            raise TaxonomyError("node names must be unique")
        children: list[list[int]] = [[] for _ in names]
        depths = [0] * len(names)
        for nid, parent in enumerate(parents):
            if parent is None:
                continue
            if not 0 <= parent < nid:
                # pre-order guarantees parents precede children
                raise TaxonomyError(f"node {nid} has invalid parent {parent}")
            children[parent].append(nid)
            depths[nid] = depths[parent] + 1
        self._names = list(names)
        self._parents = list(parents)
        self._children = [tuple(c) for c in children]
        self._depths = depths
        self._name_to_id = {name: nid for nid, name in enumerate(names)}
        self.root = 0
        self.leaf_ids = frozenset(nid for nid, c in enumerate(self._children) if not c)
        self._leaves_under_cache: dict[int, tuple[int, ...]] = {}
        self._height_diameter_cache: tuple[int, int] | None = None
        self._levels_cache: list[tuple[int, list[int]]] | None = None

    def __len__(self) -> int:
        return len(self._names)

    def __eq__(self, other) -> bool:
        return (
            isinstance(other, Taxonomy)
            and self._names == other._names
            and self._parents == other._parents
        )

    def node(self, node_id: int) -> TaxonomyNode:
        self._check_id(node_id)
        return TaxonomyNode(
            node_id=node_id,
            name=self._names[node_id],
            parent=self._parents[node_id],
            children=self._children[node_id],
        )

    def name(self, node_id: int) -> str:
        self._check_id(node_id)
        return self._names[node_id]

    def id_of(self, name: str) -> int:
        try:
            return self._name_to_id[name]
        except KeyError:
            raise TaxonomyError(f"unknown node name {name!r}") from None

    def has_name(self, name: str) -> bool:
        return name in self._name_to_id

    def parent(self, node_id: int) -> int | None:
        self._check_id(node_id)
        return self._parents[node_id]

    def children(self, node_id: int) -> tuple[int, ...]:
        self._check_id(node_id)
        return self._children[node_id]

    def is_leaf(self, node_id: int) -> bool:
        self._check_id(node_id)
        return not self._children[node_id]

    def depth(self, node_id: int) -> int:
        """Number of edges on the root-to-node path; the root has depth 0."""
        self._check_id(node_id)
        return self._depths[node_id]

    def lca(self, n1: int, n2: int) -> int:
        """Deepest node that is an ancestor-or-self of both arguments."""
        self._check_id(n1)
        self._check_id(n2)
        while self._depths[n1] > self._depths[n2]:
            n1 = self._parents[n1]
        while self._depths[n2] > self._depths[n1]:
            n2 = self._parents[n2]
        while n1 != n2:
            n1 = self._parents[n1]
            n2 = self._parents[n2]
        return n1

    def is_ancestor_or_self(self, ancestor: int, descendant: int) -> bool:
        self._check_id(ancestor)
        self._check_id(descendant)
        while self._depths[descendant] > self._depths[ancestor]:
            descendant = self._parents[descendant]
        return descendant == ancestor

    def node_distance(self, descendant: int, ancestor: int) -> int:
        """Edge count on the path from a descendant up to one of its ancestors."""
        if not self.is_ancestor_or_self(ancestor, descendant):
            raise TaxonomyError(
                f"{self._names[ancestor]!r} is not an ancestor of {self._names[descendant]!r}"
            )
        return self._depths[descendant] - self._depths[ancestor]

    def ancestor_at_depth(self, node_id: int, depth: int) -> int:
        """Ancestor-or-self of the node at the requested depth."""
        self._check_id(node_id)
        if not 0 <= depth <= self._depths[node_id]:
            raise TaxonomyError(f"node {self._names[node_id]!r} has no ancestor at depth {depth}")
        while self._depths[node_id] > depth:
            node_id = self._parents[node_id]
        return node_id

    def path_to_root(self, node_id: int) -> list[int]:
        """Nodes from the argument up to and including the root."""
        self._check_id(node_id)
        path = [node_id]
        while self._parents[path[-1]] is not None:
            path.append(self._parents[path[-1]])
        return path

    def height_and_diameter(self) -> tuple[int, int]:
        """Longest root-to-leaf path and longest leaf-to-leaf path, in edges."""
        if self._height_diameter_cache is None:
            leaves = sorted(self.leaf_ids)
            height = max(self._depths[l] for l in leaves)
            diameter = 0
            for i, l1 in enumerate(leaves):
                for l2 in leaves[i + 1 :]:
                    a = self.lca(l1, l2)
                    diameter = max(
                        diameter, self._depths[l1] + self._depths[l2] - 2 * self._depths[a]
                    )
            self._height_diameter_cache = (height, diameter)
        return self._height_diameter_cache

    def leaves_under(self, node_id: int) -> tuple[int, ...]:
        """Leaf ids in the subtree rooted at the node (ascending id order)."""
        self._check_id(node_id)
        cached = self._leaves_under_cache.get(node_id)
        if cached is not None:
            return cached
        found = []
        stack = [node_id]
        while stack:
            nid = stack.pop()
            if not self._children[nid]:
                found.append(nid)
            else:
                stack.extend(reversed(self._children[nid]))
        result = tuple(sorted(found))
        self._leaves_under_cache[node_id] = result
        return result

    def levels_with_multiple_classes(self) -> list[tuple[int, list[int]]]:
        """Classification levels of the tree.

        For each depth >= 1, the class set holds the nodes at that depth plus
        every leaf that bottoms out above it, so each sample keeps exactly one
        target per level. Levels whose class set has fewer than two entries
        are dropped; the deepest retained level's class set is the leaf set.
        """
        if self._levels_cache is None:
            height, _ = self.height_and_diameter()
            levels = []
            for level in range(1, height + 1):
                class_set = [
                    nid
                    for nid in range(len(self._names))
                    if self._depths[nid] == level
                    or (self._depths[nid] < level and not self._children[nid])
                ]
                if len(class_set) > 1:
                    levels.append((level, class_set))
            self._levels_cache = levels
        return [(level, list(ids)) for level, ids in self._levels_cache]

    def target_at_level(self, leaf: int, level: int) -> int:
        """Class of a leaf at a retained level: its ancestor-or-self there.

        Leaves shallower than the level act as their own class (min-depth rule).
        """
        self._check_id(leaf)
        if not self.is_leaf(leaf):
            raise TaxonomyError(f"{self._names[leaf]!r} is not a leaf")
        retained = {lv for lv, _ in self.levels_with_multiple_classes()}
        if level not in retained:
            raise TaxonomyError(f"level {level} is not a classification level")
        return self.ancestor_at_depth(leaf, min(level, self._depths[leaf]))

    def node_samples(self, dataset: list[LabeledSample], node_id: int) -> set[str]:
        """Ids of samples whose leaf label lies in the node's subtree."""
        self._check_id(node_id)
        wanted = set(self.leaves_under(node_id))
        result = set()
        for sample in dataset:
            leaf_id = self._name_to_id.get(sample.leaf)
            if leaf_id is None or self._children[leaf_id]:
                raise TaxonomyError(f"sample {sample.id!r} has unknown leaf label {sample.leaf!r}")
            if leaf_id in wanted:
                result.add(sample.id)
        return result

    def leaf_id_for(self, sample: LabeledSample) -> int:
        leaf_id = self._name_to_id.get(sample.leaf)
        if leaf_id is None or self._children[leaf_id]:
            raise TaxonomyError(f"sample {sample.id!r} has unknown leaf label {sample.leaf!r}")
        return leaf_id

    def to_document(self) -> dict:
        """Nested name/children form, inverse of parse_taxonomy."""

        def build(nid: int) -> dict:
            doc: dict = {"name": self._names[nid]}
            if self._children[nid]:
                doc["children"] = [build(c) for c in self._children[nid]]
            return doc

        return build(self.root)

    def _check_id(self, node_id: int) -> None:
        if not isinstance(node_id, numbers.Integral) or not 0 <= node_id < len(self._names):
            raise TaxonomyError(f"invalid node id {node_id!r}")


def parse_taxonomy(document: dict) -> Taxonomy:
    """Build a Taxonomy from a nested name/children document.

    Node ids follow a pre-order traversal with children kept in input order.
    """
    if not isinstance(document, dict) or not document.get("name"):
        raise TaxonomyError("document must be a single object with a non-empty 'name'")
    names: list[str] = []
    parents: list[int | None] = []
    seen_objects: set[int] = set()
    stack: list[tuple[dict, int | None]] = [(document, None)]
    while stack:
        node_doc, parent = stack.pop()
        if not isinstance(node_doc, dict) or "name" not in node_doc:
            raise TaxonomyError("every node needs a 'name' field")
        if id(node_doc) in seen_objects:
            raise TaxonomyError("cycle detected: a node object appears twice")
        seen_objects.add(id(node_doc))
        nid = len(names)
        names.append(str(node_doc["name"]))
        parents.append(parent)
        children = node_doc.get("children") or []
        if not isinstance(children, list):
            raise TaxonomyError(f"'children' of {node_doc['name']!r} must be a list")
        for child in reversed(children):
            stack.append((child, nid))
    if len(set(names)) != len(names):
        dupes = sorted({n for n in names if names.count(n) > 1})
        raise TaxonomyError(f"duplicate node names: {dupes}")
    return Taxonomy(names, parents)


def load_taxonomy(path: str | Path) -> Taxonomy:
    """Parse a taxonomy from a JSON file with one top-level object."""
    with open(path, encoding="utf-8") as fh:
        document = json.load(fh)
    return parse_taxonomy(document)


def save_taxonomy(path: str | Path, taxonomy: Taxonomy) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(taxonomy.to_document(), fh, indent=2)
        fh.write("\n")
