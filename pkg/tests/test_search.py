import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from quantlaw.errors import EmptyRun, InvalidInput, RatioInfeasible, RunFailed
from quantlaw.formats import BlockFormat
from quantlaw.model import CLM_MICRO, LAYER, MATMUL, ModelConfig, enumerate_sites
from quantlaw.search import (SearchSpec, TrialSet, estimate, run_search, sample_plan, trial_seed)

SITES = enumerate_sites(CLM_MICRO, MATMUL)
TWO_LAYERS = enumerate_sites(ModelConfig(n_layers=2), LAYER)


def fake_evaluator(plan):
    """Deterministic loss that depends only on the chosen sites."""
    if plan is None:
        return 1.0
    return 1.0 + sum(0.001 * (s.layer_index + 1) for s in plan.low_precision_sites)


def test_trial_seed_frozen():
    assert trial_seed(0, 0) == trial_seed(0, 0)
    assert trial_seed(0, 0) != trial_seed(0, 1) != trial_seed(1, 0)
    assert trial_seed(3, 5) == int(np.random.SeedSequence([3, 5]).generate_state(1, np.uint64)[0])


@given(st.floats(0.0, 1.0), st.integers(0, 2**63))
def test_sample_plan_hits_ratio(qr, seed):
    plan = sample_plan(SITES, qr, seed)
    assert abs(plan.achieved_ratio() - qr) <= 0.02


def test_sample_plan_deterministic():
    a = sample_plan(SITES, 0.7, 123)
    b = sample_plan(SITES, 0.7, 123)
    assert a.digest() == b.digest()
    assert a.digest() != sample_plan(SITES, 0.7, 124).digest()


def test_sample_plan_endpoints():
    assert sample_plan(SITES, 0.0, 1).low_precision_sites == frozenset()
    assert sample_plan(SITES, 1.0, 1).achieved_ratio() == 1.0


def test_infeasible_reports_closest():
    with pytest.raises(RatioInfeasible) as info:
        sample_plan(TWO_LAYERS, 0.25, 0)
    assert info.value.closest in (0.0, 0.5)
    assert info.value.exit_code == 4


def test_sample_plan_rejects():
    with pytest.raises(InvalidInput):
        sample_plan([], 0.5, 0)
    with pytest.raises(InvalidInput):
        sample_plan(SITES, 1.5, 0)


def test_spec_validation():
    with pytest.raises(InvalidInput):
        SearchSpec(qr_target=0.5, qb=64)
    with pytest.raises(InvalidInput):
        SearchSpec(qr_target=0.5, qb=32, trials=0)
    spec = SearchSpec(qr_target=0.5, qb=16, method=BlockFormat.parse("affine4:16"), seed=9)
    assert SearchSpec.from_dict(spec.to_dict()) == spec


def test_run_search_jobs_independent():
    spec = SearchSpec(qr_target=0.6, qb=32, trials=30, seed=4)
    a = run_search(fake_evaluator, SITES, spec, 1.0, jobs=1)
    b = run_search(fake_evaluator, SITES, spec, 1.0, jobs=8)
    assert a.records == b.records
    assert [r.trial_index for r in a.records] == list(range(30))
    assert all(abs(r.qr_achieved - 0.6) <= 0.02 for r in a.records)


def test_failed_trials_recorded():
    calls = {"n": 0}

    def flaky(plan):
        calls["n"] += 1
        if calls["n"] % 20 == 0:
            raise RuntimeError("boom")
        return 2.0

    ts = run_search(flaky, SITES, SearchSpec(qr_target=0.5, qb=32, trials=40), 1.5)
    assert ts.n_failed == 2
    bad = [r for r in ts.records if not r.ok]
    assert all(r.loss is None and r.delta is None and "boom" in r.error for r in bad)
    assert estimate(ts).n == 38


def test_too_many_failures():
    def nan_loss(plan):
        return math.nan

    with pytest.raises(RunFailed):
        run_search(nan_loss, SITES, SearchSpec(qr_target=0.5, qb=32, trials=5), 1.0)


def test_estimate():
    est = estimate([0.3, 0.1, 0.2])
    assert est.delta_opt == 0.1 and est.n == 3
    assert est.delta_mu == pytest.approx(0.2, abs=1e-15)
    with pytest.raises(EmptyRun):
        estimate([])


@given(st.lists(st.floats(-1, 1, allow_nan=False), min_size=1, max_size=50), st.randoms())
def test_estimate_permutation_invariant(deltas, rnd):
    shuffled = list(deltas)
    rnd.shuffle(shuffled)
    a, b = estimate(deltas), estimate(shuffled)
    assert a == b
    assert a.delta_opt <= a.delta_mu + 1e-15
