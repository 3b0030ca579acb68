import math

import pytest
from hypothesis import given, settings, strategies as st

from quantlaw.errors import InvalidInput
from quantlaw.laws import CLM_STRONG, ExperimentPoint, eval_law
from quantlaw.oracle import DiscreteDelta, estimator_sim, gen_dataset, synthetic_runs

U3 = DiscreteDelta.uniform([0.1, 0.2, 0.3])


def test_closed_forms():
    assert U3.mean == pytest.approx(0.2)
    assert U3.sd == pytest.approx(math.sqrt(2 / 300))
    assert U3.prob_min_hit(1) == pytest.approx(1 / 3)
    # E[min of 2] = 0.1*5/9 + 0.2*3/9 + 0.3*1/9
    assert U3.expected_min(2) == pytest.approx(0.1 * 5 / 9 + 0.2 * 3 / 9 + 0.3 / 9)
    assert U3.expected_min(1) == pytest.approx(U3.mean)


def test_validation():
    with pytest.raises(InvalidInput):
        DiscreteDelta((0.2, 0.1), (0.5, 0.5))
    with pytest.raises(InvalidInput):
        DiscreteDelta((0.1, 0.2), (0.5, 0.6))
    with pytest.raises(InvalidInput):
        estimator_sim(U3, 0, 10, 0)
    with pytest.raises(InvalidInput):
        gen_dataset(CLM_STRONG, [ExperimentPoint(1.0, 0.5)], -1.0, 0)


def test_sim_frozen_values():
    rep = estimator_sim(U3, 100, 10_000, 7)
    assert rep.mean_of_means == pytest.approx(0.1999775, abs=1e-12)
    assert rep.mean_of_mins == 0.1 and rep.prob_min_hit == 1.0


def test_sim_matches_closed_form_small_n():
    rep = estimator_sim(U3, 3, 200_000, 1)
    se = math.sqrt(U3.prob_min_hit(3) * (1 - U3.prob_min_hit(3)) / 200_000)
    assert abs(rep.prob_min_hit - U3.prob_min_hit(3)) < 5 * se
    assert rep.mean_of_mins == pytest.approx(U3.expected_min(3), abs=2e-3)


@settings(max_examples=20)
@given(st.integers(0, 2**32), st.integers(1, 50))
def test_min_of_prefix_is_monotone(seed, n):
    a = estimator_sim(U3, n, 200, seed)
    b = estimator_sim(U3, n + 7, 200, seed)
    assert b.mean_of_mins <= a.mean_of_mins
    assert b.prob_min_hit >= a.prob_min_hit


def test_gen_dataset():
    grid = [ExperimentPoint(n, 0.8, 32) for n in (0.1, 1.0)]
    clean = gen_dataset(CLM_STRONG, grid, 0.0, 0)
    assert [d for _, d in clean] == [eval_law(CLM_STRONG, pt) for pt in grid]
    noisy1 = gen_dataset(CLM_STRONG, grid, 0.05, 3)
    assert noisy1 == gen_dataset(CLM_STRONG, grid, 0.05, 3)
    assert noisy1 != gen_dataset(CLM_STRONG, grid, 0.05, 4)


def test_synthetic_runs_schema():
    data = gen_dataset(CLM_STRONG, [ExperimentPoint(0.2, 0.9, 64)], 0.0, 0)
    (ts,) = synthetic_runs(data, seed=5)
    assert ts.source == "synthetic" and ts.spec.qb == 64 and str(ts.spec.method) == "mxint4:64"
    assert ts.records[0].delta == data[0][1] and ts.n_effective == pytest.approx(0.2e9)
