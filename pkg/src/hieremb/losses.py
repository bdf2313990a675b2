"""Hierarchy-aware training losses and their analytic gradients.

Four components are supported and combined by plain summation:

  T   hinge triplet loss on cosine distance
  L   weighted softmax cross-entropy over leaf classes
  PL  sum of weighted softmax cross-entropies, one per tree level
  B   mean of weighted binary cross-entropies over all non-root nodes

Cross-entropies are evaluated in log-sum-exp form straight from logits;
probabilities are never materialised near 0 or 1.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

LOSS_NAMES = ("L", "PL", "B", "T")


@dataclass(frozen=True)
class LossConfig:
    active: frozenset[str]
    margin: float = 0.3

    def __post_init__(self):
        unknown = self.active - set(LOSS_NAMES)
        if unknown:
            raise ValueError(f"unknown loss components: {sorted(unknown)}")
        if not self.active:
            raise ValueError("at least one loss component must be active")
        if not self.margin > 0:
            raise ValueError(f"margin must be positive, got {self.margin}")


def combo_name(active: frozenset[str]) -> str:
    """Canonical display name, e.g. {'T', 'PL'} -> 'PL+T'."""
    return "+".join(name for name in LOSS_NAMES if name in active)


def parse_combo(text: str) -> frozenset[str]:
    parts = [p.strip() for p in text.split("+") if p.strip()]
    config = LossConfig(active=frozenset(parts))  # validates names
    if len(parts) != len(config.active):
        raise ValueError(f"repeated component in combination {text!r}")
    return config.active


@dataclass
class LossValue:
    """Uniformly weighted multi-task loss with per-component breakdown."""

    total: float
    per_component: dict[str, float] = field(default_factory=dict)


def combine(components: dict[str, float], active: frozenset[str] | None = None) -> LossValue:
    """Sum the component values; every active component must be present."""
    if active is not None:
        missing = active - set(components)
        if missing:
            raise ValueError(f"missing loss components: {sorted(missing)}")
    return LossValue(total=float(sum(components.values())), per_component=dict(components))


# -- embedding-space losses --------------------------------------------------


def unit_rows(vectors: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Row-normalise; a zero row means a dead embedding and is an error."""
    vectors = np.atleast_2d(np.asarray(vectors, dtype=np.float64))
    norms = np.linalg.norm(vectors, axis=1)
    if np.any(norms == 0):
        raise ValueError("zero embedding vector (dead embedding)")
    return vectors / norms[:, None], norms


def cosine_distance(u: np.ndarray, v: np.ndarray) -> float:
    """Negative cosine similarity, in [-1, 1]."""
    uu, _ = unit_rows(u)
    vv, _ = unit_rows(v)
    if uu.shape != vv.shape:
        raise ValueError("vectors must have equal length")
    return float(-(uu * vv).sum())


def cosine_distance_grad(u: np.ndarray, v: np.ndarray) -> tuple[float, np.ndarray, np.ndarray]:
    """Distance plus its gradients with respect to both inputs."""
    uu, nu = unit_rows(u)
    vv, nv = unit_rows(v)
    sim = (uu * vv).sum()
    grad_u = -(vv - sim * uu) / nu[:, None]
    grad_v = -(uu - sim * vv) / nv[:, None]
    return float(-sim), grad_u[0], grad_v[0]


def triplet_loss_batch(
    emb_anchor: np.ndarray,
    emb_positive: np.ndarray,
    emb_negative: np.ndarray,
    margin: float,
) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Per-triplet hinge values and gradients for (B, E) embedding blocks.

    The hinge subgradient at the kink is 0, so satisfied triplets stay inert.
    """
    ua, na = unit_rows(emb_anchor)
    up, npos = unit_rows(emb_positive)
    un, nn = unit_rows(emb_negative)
    sim_ap = (ua * up).sum(axis=1)
    sim_an = (ua * un).sum(axis=1)
    raw = -sim_ap + sim_an + margin  # d_ap - d_an + margin
    active = raw > 0
    values = np.where(active, raw, 0.0)
    scale = active.astype(np.float64)[:, None]
    grad_a = scale * ((un - up) + (sim_ap - sim_an)[:, None] * ua) / na[:, None]
    grad_p = scale * -(ua - sim_ap[:, None] * up) / npos[:, None]
    grad_n = scale * (ua - sim_an[:, None] * un) / nn[:, None]
    return values, grad_a, grad_p, grad_n


def triplet_loss(
    emb_anchor: np.ndarray,
    emb_positive: np.ndarray,
    emb_negative: np.ndarray,
    margin: float,
) -> tuple[float, tuple[np.ndarray, np.ndarray, np.ndarray]]:
    """max(0, d_ap - d_an + margin) for a single triplet, with gradients."""
    if not margin > 0:
        raise ValueError(f"margin must be positive, got {margin}")
    values, ga, gp, gn = triplet_loss_batch(
        np.atleast_2d(emb_anchor),
        np.atleast_2d(emb_positive),
        np.atleast_2d(emb_negative),
        margin,
    )
    return float(values[0]), (ga[0], gp[0], gn[0])


# -- classification losses ---------------------------------------------------


def log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def sigmoid(x: np.ndarray) -> np.ndarray:
    return np.exp(-np.logaddexp(0.0, -x))


def softmax_cross_entropy_batch(
    logits: np.ndarray, targets: np.ndarray, weights: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Weighted cross-entropy per row of (n, C) logits, plus logit gradients.

    Each row's loss and gradient are scaled by the weight of its true class.
    """
    logits = np.asarray(logits, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.intp)
    weights = np.asarray(weights, dtype=np.float64)
    n, n_classes = logits.shape
    if weights.shape != (n_classes,):
        raise ValueError(f"expected {n_classes} class weights, got {weights.shape}")
    if targets.size and (targets.min() < 0 or targets.max() >= n_classes):
        raise ValueError("target index out of range")
    log_probs = log_softmax(logits)
    rows = np.arange(n)
    w = weights[targets]
    values = -w * log_probs[rows, targets]
    grad = w[:, None] * np.exp(log_probs)
    grad[rows, targets] -= w
    return values, grad


def multiclass_loss(
    logits: np.ndarray, target_index: int, weights: np.ndarray
) -> tuple[float, np.ndarray]:
    """Weighted softmax cross-entropy for one sample."""
    values, grad = softmax_cross_entropy_batch(
        np.atleast_2d(logits), np.array([target_index]), weights
    )
    return float(values[0]), grad[0]


def leaf_loss(
    logits: np.ndarray, target_leaf: int, weights: np.ndarray
) -> tuple[float, np.ndarray]:
    """Multi-class loss over the seen-leaf class set."""
    return multiclass_loss(logits, target_leaf, weights)


def per_level_loss(
    level_heads: list[tuple[np.ndarray, int]], weights: list[np.ndarray]
) -> tuple[float, list[np.ndarray]]:
    """Unnormalised sum of the per-level multi-class losses."""
    if len(level_heads) != len(weights):
        raise ValueError("one weight vector per level head is required")
    total = 0.0
    grads = []
    for (logits, target), level_weights in zip(level_heads, weights):
        value, grad = multiclass_loss(logits, target, level_weights)
        total += value
        grads.append(grad)
    return total, grads


def binary_cross_entropy_nodes_batch(
    logits: np.ndarray, membership: np.ndarray, weights: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Node-averaged weighted binary cross-entropy per row, plus gradients.

    Rows are samples, columns are the non-root tree nodes; the class weight
    multiplies the positive (member) term only.
    """
    logits = np.asarray(logits, dtype=np.float64)
    member = np.asarray(membership, dtype=bool)
    weights = np.asarray(weights, dtype=np.float64)
    if logits.shape != member.shape or logits.shape[-1] != weights.shape[0]:
        raise ValueError("logits, membership, and weights shapes do not line up")
    n_nodes = logits.shape[-1]
    pos = np.logaddexp(0.0, -logits)  # -log sigmoid(z)
    neg = np.logaddexp(0.0, logits)  # -log(1 - sigmoid(z))
    terms = np.where(member, weights * pos, neg)
    values = terms.sum(axis=-1) / n_nodes
    probs = sigmoid(logits)
    grad = np.where(member, weights * (probs - 1.0), probs) / n_nodes
    return values, grad


def binary_node_loss(
    logits: np.ndarray, membership: np.ndarray, weights: np.ndarray
) -> tuple[float, np.ndarray]:
    """Subtree-membership tagging loss over all non-root nodes, one sample."""
    values, grad = binary_cross_entropy_nodes_batch(
        np.atleast_2d(logits), np.atleast_2d(membership), weights
    )
    return float(values[0]), grad[0]


def class_weights(counts: dict) -> dict:
    """Inverse-frequency weights, normalised to mean 1 over the classes."""
    if not counts:
        raise ValueError("no classes to weight")
    bad = sorted(str(k) for k, v in counts.items() if v < 1)
    if bad:
        raise ValueError(f"classes with zero count: {bad}")
    inverse = {key: 1.0 / value for key, value in counts.items()}
    mean = sum(inverse.values()) / len(inverse)
    return {key: value / mean for key, value in inverse.items()}
