"""Per-batch adaptation state machine.

While ADAPTING, each test batch is served by the best of ``population_size``
candidate offsets sampled around the current search mean; the distribution is
then updated from the candidates' fitness ranking.  Adaptation freezes once
the relative change of the mean falls below ``epsilon``; a FROZEN batch costs
a single forward pass with the stored offset.  A frozen exponential moving
average of stem-layer statistics is compared against each incoming batch via
a symmetric KL score; when the score exceeds ``gamma`` the current mean is
archived to the vector bank, a warm start is retrieved by fitness, and
adaptation resumes.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import cmaes
from .bank import VectorBank
from .fitness import FitnessConfig, fitness
from .model import AdaptableModel, SourceStats
from .projection import FastfoodProjector
from .validation import check_array

ADAPTING = "adapting"
FROZEN = "frozen"


@dataclass(frozen=True)
class ControllerConfig:
    """Knobs of the adaptation loop; defaults target the desk-scale benchmark."""

    dim: int = 32
    population_size: int = 12
    tau0: float = 0.01
    epsilon: float = 0.045
    gamma: float = 0.03
    beta: float = 0.8
    lambda_weight: float = 0.4
    bank_capacity: int = 30
    stop_enabled: bool = True
    shift_enabled: bool = True
    shift_while_adapting: bool = False
    include_zero_candidate: bool = True
    variance_floor: float = 1e-8
    seed: int = 0

    def __post_init__(self):
        if not self.epsilon >= 0:  # also rejects NaN
            raise ValueError("epsilon must be >= 0")
        if not 0 < self.beta <= 1:
            raise ValueError("beta must lie in (0, 1]")
        if self.gamma <= 0:
            raise ValueError("gamma must be positive")
        if self.tau0 <= 0:
            raise ValueError("tau0 must be positive")


@dataclass
class EmaStats:
    """Per-feature mean/variance pair tracked by the detector."""

    mean: np.ndarray
    var: np.ndarray


def update_ema(ema: EmaStats | None, batch_stats: EmaStats, beta: float) -> EmaStats:
    """Convex blend weighting the latest batch by ``beta``; first call initializes."""
    if ema is None:
        return EmaStats(batch_stats.mean.copy(), batch_stats.var.copy())
    return EmaStats(
        beta * batch_stats.mean + (1 - beta) * ema.mean,
        beta * batch_stats.var + (1 - beta) * ema.var,
    )


def shift_score(a: EmaStats, b: EmaStats, variance_floor: float = 1e-8) -> float:
    """Symmetric KL divergence between per-feature Gaussians, averaged over features.

    Each feature is treated as a univariate Gaussian given its (mean,
    variance) pair; variances are floored to keep degenerate batches from
    producing infinities.  Identical statistics score exactly 0.
    """
    mean_a = check_array(a.mean, "mean")
    mean_b = check_array(b.mean, "mean", length=mean_a.shape[-1])
    var_a = np.asarray(a.var, dtype=np.float64)
    var_b = np.asarray(b.var, dtype=np.float64)
    if np.any(var_a < 0) or np.any(var_b < 0):
        raise ValueError("variances must be non-negative")
    va = np.maximum(var_a, variance_floor)
    vb = np.maximum(var_b, variance_floor)
    delta2 = (mean_a - mean_b) ** 2
    # KL(a||b) + KL(b||a) in closed form; the log terms cancel
    per_feature = (va + delta2) / (2 * vb) + (vb + delta2) / (2 * va) - 1.0
    return float(per_feature.mean())


def should_stop(m_prev, m_curr, epsilon: float) -> bool:
    """True when the relative mean change falls below ``epsilon``.

    Never stops from the origin: the ratio is undefined for ``|m_prev| = 0``.
    """
    m_prev = check_array(m_prev, "m_prev", ndim=1)
    m_curr = check_array(m_curr, "m_curr", ndim=1, length=m_prev.shape[0])
    prev_norm = np.linalg.norm(m_prev)
    if prev_norm == 0:
        return False
    return bool(np.linalg.norm(m_curr - m_prev) / prev_norm < epsilon)


def calibrate_gamma(scores, percentile: float = 99.5, headroom: float = 2.5) -> float:
    """Shift threshold from held-out in-distribution score samples.

    Takes the requested percentile of the stationary score distribution and
    multiplies by ``headroom`` to keep the false-positive rate below the
    percentile's nominal miss rate.
    """
    scores = check_array(scores, "scores", ndim=1)
    if scores.shape[0] == 0:
        raise ValueError("need at least one calibration score")
    if np.any(scores < 0):
        raise ValueError("shift scores must be non-negative")
    return float(np.percentile(scores, percentile) * headroom)


@dataclass
class Telemetry:
    batches: int = 0
    adapted_batches: int = 0
    frozen_batches: int = 0
    forward_passes: int = 0
    retrieval_forwards: int = 0
    rescue_forwards: int = 0
    shifts_detected: int = 0
    stops: int = 0

    def expected_forward_passes(self, population_size: int) -> int:
        return (
            population_size * self.adapted_batches
            + self.frozen_batches
            + self.retrieval_forwards
            + self.rescue_forwards
        )

    def identity_holds(self, population_size: int) -> bool:
        return self.forward_passes == self.expected_forward_passes(population_size)

    def as_dict(self) -> dict:
        return dict(self.__dict__)


@dataclass
class BatchReport:
    batch_index: int
    mode: str
    fitness_best: float
    rel_mean_change: float
    shift_score: float
    shift_detected: bool
    forward_passes: int


class PaceController:
    """Streaming adapter around a frozen model.

    ``process_batch`` consumes unlabeled batches in temporal order and returns
    class probabilities; between batches all state mutation is sequential.
    """

    def __init__(
        self,
        model: AdaptableModel,
        source_stats: SourceStats,
        config: ControllerConfig = ControllerConfig(),
        projector: FastfoodProjector | None = None,
    ):
        self.model = model
        self.source_stats = source_stats
        self.config = config
        self.projector = projector or FastfoodProjector(
            d=config.dim, D=model.offset_dim, seed=config.seed
        )
        if self.projector.d != config.dim or self.projector.D != model.offset_dim:
            raise ValueError("projector dimensions do not match controller/model")
        self.fitness_config = FitnessConfig(lambda_weight=config.lambda_weight)
        self.cmaes_state = cmaes.init(
            config.dim, tau0=config.tau0, population_size=config.population_size
        )
        self.bank = VectorBank(config.dim, config.bank_capacity)
        self.rng = np.random.Generator(
            np.random.Philox(np.random.SeedSequence(config.seed, spawn_key=(7,)))
        )
        self.mode = ADAPTING
        self.frozen_offset: np.ndarray | None = None
        self.ema: EmaStats | None = None
        self.telemetry = Telemetry()
        self._batch_index = 0

    # -- public API ----------------------------------------------------------

    def process_batch(self, batch) -> tuple[np.ndarray, BatchReport]:
        index = self._batch_index
        self._batch_index += 1
        self.telemetry.batches += 1
        if self.mode == ADAPTING:
            probs, report = self._process_adapting(batch, index)
        else:
            probs, report = self._process_frozen(batch, index)
        return probs, report

    def predict_proba(self, X) -> np.ndarray:
        return self.process_batch(X)[0]

    def predict(self, X) -> np.ndarray:
        return np.argmax(self.predict_proba(X), axis=1)

    # -- internals -----------------------------------------------------------

    def _stem_stats(self, stats) -> EmaStats:
        return EmaStats(stats.stem_mean.copy(), stats.stem_var.copy())

    def _score_against_ema(self, batch_stats: EmaStats) -> float:
        if self.ema is None:
            return np.nan
        return shift_score(self.ema, batch_stats, self.config.variance_floor)

    def _reinitialize_from_bank(self, batch, mean_to_archive: np.ndarray):
        """Archive the given mean, retrieve a warm start, reset search and detector EMA."""
        self.bank.archive(mean_to_archive)
        result = self.bank.retrieve_init(
            batch,
            self.model,
            self.projector,
            self.source_stats,
            self.fitness_config,
            include_zero=self.config.include_zero_candidate,
        )
        self.telemetry.retrieval_forwards += result.forward_passes
        self.telemetry.forward_passes += result.forward_passes
        self.cmaes_state = cmaes.reinitialized(self.cmaes_state, result.vector, self.config.tau0)
        self.mode = ADAPTING
        self.frozen_offset = None
        return result

    def _process_adapting(self, batch, index):
        cfg = self.config
        population = cmaes.sample_population(self.cmaes_state, self.rng)
        bad_rows = ~np.all(np.isfinite(population), axis=1)
        if bad_rows.any():
            # a blown-up step size can overflow samples; fall back to the mean
            # so the batch is still served and the forward count stays exact
            population[bad_rows] = self.cmaes_state.mean
        offsets = self.projector.transform(population)
        candidates = []
        scores = np.empty(cfg.population_size)
        all_probs = []
        all_stats = []
        for k in range(cfg.population_size):
            probs_k, stats_k = self.model.forward(offsets[k], batch)
            if stats_k.finite:
                score = fitness(probs_k, stats_k, self.source_stats, self.fitness_config)
            else:
                score = np.inf
            if not np.isfinite(score):
                score = np.inf
            scores[k] = score
            candidates.append(cmaes.RankedCandidate(population[k], float(score)))
            all_probs.append(probs_k)
            all_stats.append(stats_k)
        self.telemetry.adapted_batches += 1
        self.telemetry.forward_passes += cfg.population_size

        if not np.any(np.isfinite(scores)):
            # degenerate batch: serve the unadapted model, keep all state
            probs, _ = self.model.forward(self.model.zero_offset(), batch)
            self.telemetry.rescue_forwards += 1
            self.telemetry.forward_passes += 1
            return probs, BatchReport(
                batch_index=index,
                mode=ADAPTING,
                fitness_best=np.nan,
                rel_mean_change=np.nan,
                shift_score=np.nan,
                shift_detected=False,
                forward_passes=cfg.population_size + 1,
            )

        best = int(np.argmin(scores))
        predictions = all_probs[best]
        batch_stats = self._stem_stats(all_stats[best])
        score_u = self._score_against_ema(batch_stats)
        forward_passes = cfg.population_size

        shift = (
            cfg.shift_enabled
            and cfg.shift_while_adapting
            and self.ema is not None
            and np.isfinite(score_u)
            and score_u > cfg.gamma
        )
        rel_change = np.nan
        if shift:
            self.telemetry.shifts_detected += 1
            result = self._reinitialize_from_bank(batch, self.cmaes_state.mean.copy())
            forward_passes += result.forward_passes
            self.ema = EmaStats(batch_stats.mean.copy(), batch_stats.var.copy())
        else:
            m_prev = self.cmaes_state.mean.copy()
            self.cmaes_state, rel_change = cmaes.update(self.cmaes_state, candidates)
            self.ema = update_ema(self.ema, batch_stats, cfg.beta)
            if cfg.stop_enabled and should_stop(m_prev, self.cmaes_state.mean, cfg.epsilon):
                self.mode = FROZEN
                self.frozen_offset = self.projector.project(self.cmaes_state.mean)
                self.telemetry.stops += 1

        return predictions, BatchReport(
            batch_index=index,
            mode=ADAPTING,
            fitness_best=float(scores[best]),
            rel_mean_change=float(rel_change),
            shift_score=float(score_u),
            shift_detected=bool(shift),
            forward_passes=forward_passes,
        )

    def _process_frozen(self, batch, index):
        cfg = self.config
        probs, stats = self.model.forward(self.frozen_offset, batch)
        self.telemetry.frozen_batches += 1
        self.telemetry.forward_passes += 1
        forward_passes = 1
        if stats.finite:
            best_fitness = fitness(probs, stats, self.source_stats, self.fitness_config)
        else:
            best_fitness = np.nan
        batch_stats = self._stem_stats(stats)
        score_u = self._score_against_ema(batch_stats)
        shift = cfg.shift_enabled and np.isfinite(score_u) and score_u > cfg.gamma
        if shift:
            self.telemetry.shifts_detected += 1
            result = self._reinitialize_from_bank(batch, self.cmaes_state.mean.copy())
            forward_passes += result.forward_passes
            # detector restarts from the shifted batch
            self.ema = EmaStats(batch_stats.mean.copy(), batch_stats.var.copy())
        return probs, BatchReport(
            batch_index=index,
            mode=FROZEN,
            fitness_best=float(best_fitness),
            rel_mean_change=np.nan,
            shift_score=float(score_u),
            shift_detected=bool(shift),
            forward_passes=forward_passes,
        )
