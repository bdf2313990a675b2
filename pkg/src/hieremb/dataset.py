"""Dataset records and JSON Lines IO."""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np


@dataclass(frozen=True, eq=False)
class LabeledSample:
    """One data point: unique id, fine-grained leaf label, dense feature vector."""

    id: str
    leaf: str
    features: np.ndarray


def load_dataset(path: str | Path) -> list[LabeledSample]:
    """Read samples from a JSON Lines file (one record per line)."""
    samples = []
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ValueError(f"{path}:{line_no}: malformed JSON record") from exc
            samples.append(
                LabeledSample(
                    id=str(record["id"]),
                    leaf=str(record["leaf"]),
                    features=np.asarray(record["features"], dtype=np.float64),
                )
            )
    ids = [s.id for s in samples]
    if len(set(ids)) != len(ids):
        raise ValueError(f"duplicate sample ids in {path}")
    return samples


def save_dataset(path: str | Path, samples: list[LabeledSample]) -> None:
    """Write samples as JSON Lines; float values round-trip exactly."""
    with open(path, "w", encoding="utf-8") as fh:
        for s in samples:
            record = {"id": s.id, "leaf": s.leaf, "features": [float(x) for x in s.features]}
            fh.write(json.dumps(record) + "\n")


def features_matrix(samples: list[LabeledSample]) -> np.ndarray:
    """Stack sample feature vectors into an (n, D) array, in list order."""
    if not samples:
        return np.zeros((0, 0))
    return np.stack([s.features for s in samples]).astype(np.float64)
