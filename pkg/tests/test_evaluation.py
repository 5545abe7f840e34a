import csv

import numpy as np
import pytest

from magtrack.dataset import SamplerConfig
from magtrack.errors import ContractError
from magtrack.evaluation import (
    BENCH_COLUMNS,
    condition_median,
    eval_dataset,
    evaluate_mlp,
    evaluate_optimizer,
    evaluate_truth,
    perturbation_benchmark,
    summarize_benchmark,
    timing_benchmark,
    write_rows,
)
from magtrack.field_models import DipoleSource
from magtrack.mlp import init_model
from magtrack.opt_tracker import OptConfig
from magtrack.synth import SensorArray

from conftest import SPHERE

SAMPLER = SamplerConfig((-0.1, -0.1, 0.0), (0.1, 0.1, 0.15), seed=5)


@pytest.fixture(scope="module")
def sweep():
    return perturbation_benchmark(SPHERE, SensorArray.grid(), SAMPLER, cases=12, jobs=1)


def test_sweep_shape_and_columns(sweep):
    assert len(sweep) == 12 * 4 * 3
    assert all(list(r) == BENCH_COLUMNS for r in sweep)
    assert [r["case_id"] for r in sweep[::12]] == list(range(12))


def test_sweep_independent_of_jobs(sweep):
    rows = perturbation_benchmark(SPHERE, SensorArray.grid(), SAMPLER, cases=12, jobs=3)
    strip = lambda rs: [{k: v for k, v in r.items() if k != "wall_time_us"} for r in rs]  # noqa: E731
    assert strip(rows) == strip(sweep)


def test_sweep_more_iterations_help(sweep):
    summary = summarize_benchmark(sweep)
    for dth in (10.0, 30.0, 90.0, 180.0):
        meds = [condition_median(summary, 80.0, dth, k) for k in (10, 20, 50)]
        assert meds[0] >= meds[1] >= meds[2]
    assert condition_median(summary, 80.0, 10.0, 50) < 1e-3
    assert all(r["iters_used"] <= r["max_iter"] for r in sweep)


def test_summary_lookup_missing(sweep):
    with pytest.raises(KeyError):
        condition_median(summarize_benchmark(sweep), 1.0, 2.0, 3)


def test_write_rows(tmp_path, sweep):
    path = tmp_path / "rows.csv"
    write_rows(sweep, path, BENCH_COLUMNS)
    with open(path) as fh:
        back = list(csv.DictReader(fh))
    assert len(back) == len(sweep) and float(back[3]["e_p_mm"]) == pytest.approx(sweep[3]["e_p_mm"])


def test_eval_stream_is_fixed():
    a = eval_dataset(SPHERE, SensorArray.grid(), DipoleSource(SPHERE), SAMPLER, 50)
    b = eval_dataset(SPHERE, SensorArray.grid(), DipoleSource(SPHERE), SAMPLER, 50)
    assert a == b


def test_truth_and_optimizer_evaluation():
    data = eval_dataset(SPHERE, SensorArray.grid(), DipoleSource(SPHERE), SAMPLER, 30)
    e_p, e_th, _ = evaluate_truth(data)
    assert not e_p.any() and not e_th.any()
    e_p, e_th, stats = evaluate_optimizer(data, SPHERE, OptConfig(max_iter=200), 5.0, 5.0)
    # readings carry sensor noise, so the fit is close but not exact
    assert stats["e_p_mm"]["median"] < 0.5 and stats["e_theta_deg"]["median"] < 1.0


def test_mlp_evaluation_contract():
    data = eval_dataset(SPHERE, SensorArray.grid().subset(4), DipoleSource(SPHERE), SAMPLER, 20)
    model = init_model([12, 8, 6], np.random.default_rng(0))
    e_p, e_th, stats = evaluate_mlp(model, data)
    assert e_p.shape == (20,) and np.all(np.isfinite(e_th))
    assert np.count_nonzero(e_th == 180.0) >= stats["failed_orientation"]
    with pytest.raises(ContractError):
        evaluate_mlp(init_model([48, 8, 6], np.random.default_rng(0)), data)


def test_timing_report():
    model = init_model([48, 8, 6], np.random.default_rng(0))
    rep = timing_benchmark(model, SPHERE, SensorArray.grid(), SAMPLER, repeats=20, iterations=(5, 10))
    assert set(rep) == {"mlp", "lbfgs_5", "lbfgs_10"}
    for v in rep.values():
        assert v["repeats"] == 20 and v["q1_us"] <= v["median_us"] <= v["q3_us"]
    # the budget, not convergence, ends each solve
    assert rep["lbfgs_10"]["mean_iterations"] > rep["lbfgs_5"]["mean_iterations"]
