"""Random search over quantization plans at a fixed ratio and block size."""

from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import EmptyRun, InvalidInput, RatioInfeasible, RunFailed
from .formats import BlockFormat
from .model import MATMUL, QuantPlan, SiteId

log = logging.getLogger(__name__)

DEFAULT_TOLERANCE = 0.02
MAX_ATTEMPTS = 64
MAX_FAILURE_FRACTION = 0.10


@dataclass(frozen=True)
class SearchSpec:
    qr_target: float
    qb: int
    granularity: str = MATMUL
    method: BlockFormat = BlockFormat("mxint", 4, 32)
    trials: int = 100
    seed: int = 0
    ratio_tolerance: float = DEFAULT_TOLERANCE
    weight_and_activation: bool = True

    def __post_init__(self):
        if not 0.0 <= self.qr_target <= 1.0:
            raise InvalidInput(f"qr_target must be in [0, 1], got {self.qr_target}")
        if self.trials < 1:
            raise InvalidInput("trials must be >= 1")
        if not 0.0 < self.ratio_tolerance <= 0.1:
            raise InvalidInput("ratio_tolerance must be in (0, 0.1]")
        if self.method.block_size != self.qb:
            raise InvalidInput(f"method block size {self.method.block_size} != qb {self.qb}")

    def to_dict(self) -> dict:
        return {
            "qr_target": self.qr_target,
            "qb": self.qb,
            "granularity": self.granularity,
            "method": str(self.method),
            "trials": self.trials,
            "seed": self.seed,
            "ratio_tolerance": self.ratio_tolerance,
            "weight_and_activation": self.weight_and_activation,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SearchSpec":
        return cls(
            qr_target=d["qr_target"],
            qb=d["qb"],
            granularity=d["granularity"],
            method=BlockFormat.parse(d["method"]),
            trials=d["trials"],
            seed=d["seed"],
            ratio_tolerance=d["ratio_tolerance"],
            weight_and_activation=d.get("weight_and_activation", True),
        )


@dataclass
class TrialRecord:
    trial_index: int
    seed: int
    qr_achieved: float
    plan_digest: str
    loss: Optional[float]
    delta: Optional[float]
    ok: bool = True
    error: Optional[str] = None
    extra: dict = field(default_factory=dict)


@dataclass
class TrialSet:
    model_id: str
    n_effective: int
    spec: SearchSpec
    baseline_loss: float
    records: list[TrialRecord]
    run_id: str = ""
    tokens_digest: str = ""
    source: str = "search"
    extra: dict = field(default_factory=dict)

    @property
    def successful(self) -> list[TrialRecord]:
        return [r for r in self.records if r.ok]

    @property
    def n_failed(self) -> int:
        return sum(not r.ok for r in self.records)


@dataclass(frozen=True)
class Estimates:
    delta_opt: float
    delta_mu: float
    n: int


def trial_seed(seed: int, trial_index: int) -> int:
    """Deterministic per-trial seed derived from ``(seed, trial_index)``."""
    return int(np.random.SeedSequence([seed, trial_index]).generate_state(1, np.uint64)[0])


def sample_plan(
    sites: Sequence[tuple[SiteId, int]],
    qr_target: float,
    rng_seed: int,
    tolerance: float = DEFAULT_TOLERANCE,
    *,
    method: BlockFormat = BlockFormat("mxint", 4, 32),
    weight_and_activation: bool = True,
) -> QuantPlan:
    """Random plan whose parameter ratio is within ``tolerance`` of ``qr_target``.

    Each attempt shuffles the sites, adds them first-fit while the low mass
    stays at or under the target, then applies the single extra site that most
    reduces the ratio error (if any does).
    """
    if not sites:
        raise InvalidInput("no sites to sample from")
    if not 0.0 <= qr_target <= 1.0:
        raise InvalidInput(f"qr_target must be in [0, 1], got {qr_target}")
    counts = dict(sites)
    if len(counts) != len(sites):
        raise InvalidInput("duplicate site ids")
    ids = list(counts)
    sizes = np.array([counts[s] for s in ids], dtype=np.int64)
    total = int(sizes.sum())
    if total <= 0:
        raise InvalidInput("sites carry no parameters")
    target = qr_target * total

    rng = np.random.default_rng(rng_seed)
    best_err, best_set, best_mass = math.inf, None, 0
    for _ in range(MAX_ATTEMPTS):
        order = rng.permutation(len(ids))
        chosen = np.zeros(len(ids), dtype=bool)
        mass = 0
        for i in order:
            if mass + sizes[i] <= target:
                chosen[i] = True
                mass += int(sizes[i])
        err = abs(mass - target)
        rest = order[~chosen[order]]
        if rest.size:
            errs = np.abs(mass + sizes[rest] - target)
            j = int(np.argmin(errs))
            if errs[j] < err:
                chosen[rest[j]] = True
                mass += int(sizes[rest[j]])
                err = float(errs[j])
        if err < best_err:
            best_err, best_set, best_mass = err, chosen, mass
        if err / total <= tolerance:
            break
    if best_err / total > tolerance:
        raise RatioInfeasible(
            f"no plan within {tolerance} of ratio {qr_target} after {MAX_ATTEMPTS} attempts",
            best_mass / total,
        )
    low = {ids[i] for i in np.flatnonzero(best_set)}
    return QuantPlan(method, weight_and_activation, frozenset(low), counts)


def run_search(
    evaluator: Callable[[Optional[QuantPlan]], float],
    sites: Sequence[tuple[SiteId, int]],
    spec: SearchSpec,
    baseline_loss: float,
    *,
    model_id: str = "",
    n_effective: Optional[int] = None,
    tokens_digest: str = "",
    run_id: str = "",
    jobs: int = 1,
) -> TrialSet:
    """Evaluate ``spec.trials`` independent random plans.

    Plans are sampled up front from per-trial seeds, so the result does not
    depend on ``jobs`` or on scheduling. An evaluator exception marks that
    trial failed; more than 10% failures raises ``RunFailed``.
    """
    seeds = [trial_seed(spec.seed, i) for i in range(spec.trials)]
    plans = [
        sample_plan(sites, spec.qr_target, s, spec.ratio_tolerance,
                    method=spec.method, weight_and_activation=spec.weight_and_activation)
        for s in seeds
    ]

    def evaluate(plan: QuantPlan):
        try:
            loss = float(evaluator(plan))
        except Exception as exc:  # evaluator failures are recorded, not raised
            return None, f"{type(exc).__name__}: {exc}"
        if not math.isfinite(loss):
            return None, f"non-finite loss {loss}"
        return loss, None

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            outcomes = list(pool.map(evaluate, plans))
    else:
        outcomes = [evaluate(p) for p in plans]

    records = []
    for i, (seed, plan, (loss, err)) in enumerate(zip(seeds, plans, outcomes)):
        if err is not None:
            log.warning("trial %d failed: %s", i, err)
        records.append(TrialRecord(
            trial_index=i,
            seed=seed,
            qr_achieved=plan.achieved_ratio(),
            plan_digest=plan.digest(),
            loss=loss,
            delta=None if loss is None else loss - baseline_loss,
            ok=err is None,
            error=err,
        ))
    if n_effective is None:
        n_effective = sum(c for _, c in sites)
    result = TrialSet(model_id, n_effective, spec, baseline_loss, records,
                      run_id=run_id, tokens_digest=tokens_digest)
    if result.n_failed > MAX_FAILURE_FRACTION * spec.trials:
        raise RunFailed(f"{result.n_failed} of {spec.trials} trials failed")
    return result


def estimate(trials: TrialSet | Sequence[float]) -> Estimates:
    """Sample-mean and minimum degeneration over successful trials."""
    if isinstance(trials, TrialSet):
        deltas = [r.delta for r in trials.successful]
    else:
        deltas = list(trials)
    if not deltas:
        raise EmptyRun("no successful trials to estimate from")
    return Estimates(delta_opt=min(deltas), delta_mu=math.fsum(deltas) / len(deltas), n=len(deltas))

