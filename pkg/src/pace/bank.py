"""Bounded memory of archived search-distribution means from past domains.

When the bank overflows its capacity, the entry with the highest mean
pairwise cosine similarity to the rest is discarded (the newcomer included),
keeping the stored vectors maximally diverse.  Retrieval evaluates the
adaptation fitness of every stored vector on the current batch -- plus the
zero vector, so a fresh start is always a candidate -- and returns the
argmin as the warm-start mean.
"""
from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .fitness import FitnessConfig, fitness
from .validation import check_array

BANK_SCHEMA_VERSION = 1


@dataclass
class RetrievalResult:
    vector: np.ndarray
    forward_passes: int
    fitnesses: list[float]
    all_non_finite: bool = False


def mean_pairwise_cosine(vectors: list[np.ndarray]) -> np.ndarray:
    """Mean cosine similarity of each vector to all others.

    Any pair involving a zero vector contributes -1 (cosine is undefined
    there; -1 totalizes the rule without divisions by zero).
    """
    n = len(vectors)
    if n < 2:
        raise ValueError("need at least two vectors")
    stacked = np.stack(vectors)
    norms = np.linalg.norm(stacked, axis=1)
    nonzero = norms > 0
    safe = np.where(nonzero, norms, 1.0)
    unit = stacked / safe[:, None]
    sims = unit @ unit.T
    degenerate = ~(nonzero[:, None] & nonzero[None, :])
    sims = np.where(degenerate, -1.0, sims)
    np.fill_diagonal(sims, 0.0)
    return sims.sum(axis=1) / (n - 1)


class VectorBank:
    """Capacity-bounded store of length-``dim`` vectors in insertion order."""

    def __init__(self, dim: int, capacity: int = 30):
        if dim < 1:
            raise ValueError("dim must be >= 1")
        if capacity < 0:
            raise ValueError("capacity must be >= 0")
        self.dim = int(dim)
        self.capacity = int(capacity)
        self.vectors: list[np.ndarray] = []

    @property
    def count(self) -> int:
        return len(self.vectors)

    def archive(self, m) -> "VectorBank":
        """Append ``m``; evict the most redundant entry if over capacity.

        Ties pick the oldest entry.  Returns the bank for chaining.
        """
        m = check_array(m, "m", ndim=1, length=self.dim).copy()
        self.vectors.append(m)
        if len(self.vectors) > self.capacity:
            if len(self.vectors) == 1:
                self.vectors.pop()
            else:
                drop = int(np.argmax(mean_pairwise_cosine(self.vectors)))
                self.vectors.pop(drop)
        return self

    def retrieve_init(
        self,
        batch,
        model,
        projector,
        source_stats,
        fitness_config: FitnessConfig,
        include_zero: bool = True,
    ) -> RetrievalResult:
        """Warm-start vector: fitness argmin over the bank (and the fresh start).

        Evaluating each candidate costs one forward pass; the count is
        reported for telemetry.  If every candidate evaluates non-finite, the
        zero vector is returned with a warning flag.
        """
        candidates = []
        if include_zero:
            candidates.append(np.zeros(self.dim))
        candidates.extend(self.vectors)
        if not candidates:
            return RetrievalResult(np.zeros(self.dim), 0, [])
        scores = []
        for cand in candidates:
            probs, stats = model.forward(projector.project(cand), batch)
            if not stats.finite:
                scores.append(np.inf)
                continue
            scores.append(fitness(probs, stats, source_stats, fitness_config))
        scores_arr = np.asarray(scores)
        if not np.any(np.isfinite(scores_arr)):
            return RetrievalResult(
                np.zeros(self.dim), len(candidates), scores, all_non_finite=True
            )
        best = int(np.argmin(np.where(np.isfinite(scores_arr), scores_arr, np.inf)))
        return RetrievalResult(candidates[best].copy(), len(candidates), scores)

    # -- persistence ---------------------------------------------------------

    def to_json(self) -> str:
        return json.dumps(
            {
                "schema_version": BANK_SCHEMA_VERSION,
                "d": self.dim,
                "capacity": self.capacity,
                "vectors": [v.tolist() for v in self.vectors],
            }
        )

    @classmethod
    def from_json(cls, text: str) -> "VectorBank":
        record = json.loads(text)
        if record.get("schema_version") != BANK_SCHEMA_VERSION:
            raise ValueError(f"unsupported bank schema: {record.get('schema_version')}")
        bank = cls(dim=record["d"], capacity=record["capacity"])
        for row in record["vectors"]:
            vec = check_array(row, "bank vector", ndim=1, length=bank.dim)
            bank.vectors.append(vec.copy())
        if bank.count > bank.capacity:
            raise ValueError("bank file holds more vectors than its capacity")
        return bank

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(self.to_json() + "\n")

    @classmethod
    def load(cls, path) -> "VectorBank":
        with open(path, "r", encoding="utf-8") as fh:
            return cls.from_json(fh.read())
