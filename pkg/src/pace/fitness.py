"""Unsupervised objective: prediction entropy plus activation-statistics drift."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import ActivationStats, SourceStats


@dataclass(frozen=True)
class FitnessConfig:
    """``lambda_weight`` balances the statistics term against the entropy term."""

    lambda_weight: float = 0.4

    def __post_init__(self):
        if not np.isfinite(self.lambda_weight) or self.lambda_weight < 0:
            raise ValueError(f"lambda_weight must be finite and >= 0, got {self.lambda_weight}")


def entropy_term(probs: np.ndarray) -> float:
    """Mean entropy contribution, normalized by batch size times class count."""
    B, C = probs.shape
    with np.errstate(divide="ignore", invalid="ignore"):
        plogp = np.where(probs > 0, probs * np.log(probs), 0.0)
    return float(-plogp.sum() / (B * C))


def stats_term(stats: ActivationStats, source: SourceStats) -> float:
    """Sum over blocks of L2 distances between batch and source moments."""
    if len(stats.means) != len(source.means):
        raise ValueError(
            f"block count mismatch: batch has {len(stats.means)}, source {len(source.means)}"
        )
    total = 0.0
    for mu, sd, mu_s, sd_s in zip(stats.means, stats.stds, source.means, source.stds):
        if mu.shape != mu_s.shape or sd.shape != sd_s.shape:
            raise ValueError("activation statistics dimensions do not match source")
        total += float(np.linalg.norm(mu - mu_s) + np.linalg.norm(sd - sd_s))
    return total


def fitness(
    probs, stats: ActivationStats, source: SourceStats, config: FitnessConfig
) -> float:
    """Entropy term plus ``lambda_weight`` times the statistics term (both >= 0)."""
    probs = np.asarray(probs, dtype=np.float64)
    if probs.ndim != 2:
        raise ValueError(f"probs must be 2-D, got shape {probs.shape}")
    if np.any(probs < 0):
        raise ValueError("probs contains negative entries")
    return entropy_term(probs) + config.lambda_weight * stats_term(stats, source)
