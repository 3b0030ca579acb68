"""Synthetic degeneration data and Monte-Carlo checks of the min/mean estimators."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import InvalidInput
from .formats import BlockFormat
from .laws import ExperimentPoint, LawParams, eval_law
from .search import SearchSpec, TrialRecord, TrialSet


@dataclass(frozen=True)
class DiscreteDelta:
    support: tuple[float, ...]
    probs: tuple[float, ...]

    def __post_init__(self):
        s = np.asarray(self.support, dtype=np.float64)
        p = np.asarray(self.probs, dtype=np.float64)
        if s.ndim != 1 or s.size == 0 or s.shape != p.shape:
            raise InvalidInput("support and probs must be equal-length, non-empty sequences")
        if not np.all(np.isfinite(s)) or np.any(np.diff(s) <= 0):
            raise InvalidInput("support must be finite and strictly increasing")
        if np.any(p < 0) or abs(math.fsum(p) - 1.0) > 1e-12:
            raise InvalidInput("probs must be non-negative and sum to 1")
        object.__setattr__(self, "support", tuple(float(v) for v in s))
        object.__setattr__(self, "probs", tuple(float(v) for v in p))

    @classmethod
    def uniform(cls, support: Sequence[float]) -> "DiscreteDelta":
        n = len(support)
        return cls(tuple(support), tuple([1.0 / n] * n))

    @property
    def mean(self) -> float:
        return math.fsum(s * p for s, p in zip(self.support, self.probs))

    @property
    def sd(self) -> float:
        mu = self.mean
        return math.sqrt(math.fsum(p * (s - mu) ** 2 for s, p in zip(self.support, self.probs)))

    def expected_min(self, n: int) -> float:
        """Exact ``E[min of n draws]`` from the survival function."""
        # P(min >= s_k) = (sum_{j >= k} p_j)**n
        tail = np.cumsum(np.asarray(self.probs)[::-1])[::-1]
        surv = np.append(np.minimum(tail, 1.0) ** n, 0.0)
        weights = surv[:-1] - surv[1:]
        return math.fsum(w * s for w, s in zip(weights, self.support))

    def prob_min_hit(self, n: int) -> float:
        """Exact probability that ``n`` draws include the support minimum."""
        return 1.0 - (1.0 - self.probs[0]) ** n


@dataclass(frozen=True)
class EstimatorReport:
    n_draws: int
    repetitions: int
    mean_of_means: float
    mean_of_mins: float
    prob_min_hit: float


def gen_dataset(p: LawParams, grid: Sequence[ExperimentPoint], noise_sigma: float,
                seed: int) -> list[tuple[ExperimentPoint, float]]:
    """Law values times ``exp(eps)``, ``eps ~ Normal(0, sigma**2)``, one draw per grid point."""
    if noise_sigma < 0:
        raise InvalidInput("noise_sigma must be >= 0")
    rng = np.random.default_rng(seed)
    eps = rng.normal(0.0, noise_sigma, size=len(grid)) if noise_sigma > 0 else np.zeros(len(grid))
    out = []
    for point, e in zip(grid, eps):
        value = eval_law(p, point)
        out.append((point, value * math.exp(e) if noise_sigma > 0 else value))
    return out


def estimator_sim(dist: DiscreteDelta, n_draws: int, repetitions: int, seed: int) -> EstimatorReport:
    """Repeat ``n_draws`` i.i.d. draws and aggregate the sample mean and minimum.

    Draws come from a ``(n_draws, repetitions)`` row-major uniform matrix, so
    for a fixed seed the draws at a smaller ``n_draws`` are a prefix of those at
    a larger one; the mean of minima is then non-increasing in ``n_draws``.
    """
    if not isinstance(dist, DiscreteDelta):
        raise InvalidInput("dist must be a DiscreteDelta")
    if n_draws < 1 or repetitions < 1:
        raise InvalidInput("n_draws and repetitions must be >= 1")
    rng = np.random.default_rng(seed)
    u = rng.random((n_draws, repetitions))
    cdf = np.cumsum(dist.probs)
    cdf[-1] = 1.0
    idx = np.minimum(np.searchsorted(cdf, u, side="right"), len(cdf) - 1)
    draws = np.asarray(dist.support)[idx]
    means = draws.sum(axis=0) / n_draws
    mins = draws.min(axis=0)
    return EstimatorReport(
        n_draws=n_draws,
        repetitions=repetitions,
        mean_of_means=math.fsum(means) / repetitions,
        mean_of_mins=math.fsum(mins) / repetitions,
        prob_min_hit=float(np.count_nonzero(mins == dist.support[0])) / repetitions,
    )


def synthetic_runs(dataset: Sequence[tuple[ExperimentPoint, float]], seed: int,
                   bits: int = 4) -> list[TrialSet]:
    """Wrap a dataset as single-trial runs in the search log schema.

    ``baseline_loss`` is 0 so ``loss == delta``; ``source`` is ``"synthetic"``.
    The method label is ``mxint<bits>:<q_b>``, so grid block sizes must be
    valid block formats.
    """
    runs = []
    for i, (point, delta) in enumerate(dataset):
        spec = SearchSpec(qr_target=point.q_r, qb=point.q_b,
                          method=BlockFormat("mxint", bits, point.q_b), trials=1, seed=seed)
        rec = TrialRecord(trial_index=0, seed=seed, qr_achieved=point.q_r, plan_digest="",
                          loss=delta, delta=delta)
        runs.append(TrialSet(model_id="synthetic", n_effective=point.n_params * 1e9, spec=spec,
                             baseline_loss=0.0, records=[rec], run_id=f"synth-{seed}-{i}",
                             source="synthetic"))
    return runs
