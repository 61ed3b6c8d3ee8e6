import numpy as np
import pytest

from rcaux.env import open_grid, tworoom, wall
from rcaux.evaluate import (
    EvalReport,
    PairedOutcome,
    build_groups,
    cost_call_benchmark,
    evaluate_success,
    groups_feasible,
    matched_delta,
    paired_outcomes,
    read_results,
    summarize,
    write_bench,
    write_results,
)
from rcaux.model import ModelConfig, WorldModel
from rcaux.planner import PlannerConfig


def report(method, outcomes, group_size=None):
    group_size = group_size or len(outcomes)
    rows = [{"method": method, "group": i // group_size, "episode": i % group_size, "seed": 100 + i,
             "success": int(s), "steps": 3, "final_base_cost": 0.5, "final_R": 0.25}
            for i, s in enumerate(outcomes)]
    return EvalReport(method, rows)


def test_default_groups_shape_and_determinism():
    spec = tworoom()
    g = build_groups(spec)
    assert len(g) == 5 and all(x.size == 50 for x in g)
    assert g == build_groups(spec)
    assert g != build_groups(spec, seed=1)
    seeds = [e.seed for x in g for e in x.episodes]
    assert len(set(seeds)) == len(seeds)


@pytest.mark.parametrize("make,budget", [(tworoom, 50), (wall, 60), (open_grid, 50)])
def test_groups_oracle_feasible(make, budget):
    spec = make()
    groups = build_groups(spec)
    assert groups_feasible(spec, groups, budget)
    assert all(e.start != e.goal for x in groups for e in x.episodes)


def test_build_groups_rejects_empty():
    with pytest.raises(ValueError):
        build_groups(tworoom(), group_size=0)


def test_summary_arithmetic():
    mean, std = summarize([0.8, 1.0, 0.9, 0.9, 0.9])
    assert mean == pytest.approx(0.9)
    rep = report("x", [1] * 10, group_size=5)
    assert rep.mean == 1.0 and rep.std == 0.0
    assert report("x", [1, 0, 1, 1], group_size=2).per_group == [0.5, 1.0]


def test_paired_fixture():
    a, b = report("a", [1, 0, 1, 0]), report("b", [1, 1, 0, 0])
    po = paired_outcomes(a, b)
    assert po == PairedOutcome(both_fail=1, a_only=1, b_only=1, both_succeed=1)
    assert po.total == 4
    same = paired_outcomes(a, a)
    assert same.a_only == same.b_only == 0
    assert matched_delta(a, b) == 0.0


def test_paired_mismatch_raises():
    with pytest.raises(ValueError):
        paired_outcomes(report("a", [1, 0]), report("b", [1, 0, 1]))
    b = report("b", [1, 0])
    b.rows[0]["seed"] = 7
    with pytest.raises(ValueError):
        paired_outcomes(report("a", [1, 0]), b)


def test_results_csv_round_trip(tmp_path):
    a = report("a", [1, 0, 1], group_size=3)
    a.rows[0]["final_base_cost"] = 0.1 + 0.2  # needs full repr to survive
    write_results([a, report("b", [0, 0, 1])], tmp_path / "r.csv")
    back = read_results(tmp_path / "r.csv")
    assert set(back) == {"a", "b"}
    assert back["a"].rows == a.rows
    header = (tmp_path / "r.csv").read_text().splitlines()[0]
    assert header == "method,group,episode,seed,success,steps,final_base_cost,final_R"


@pytest.fixture(scope="module")
def small_model():
    spec = open_grid(4)
    return spec, WorldModel(ModelConfig(obs_dim=16, d_z=4, hidden=8), seed=0)


def test_evaluate_success_deterministic_and_paired(small_model):
    spec, model = small_model
    groups = build_groups(spec, n_groups=2, group_size=3)
    cfg = PlannerConfig(n_samples=30, top_k=5, n_iters=2, budget=8)
    a = evaluate_success(spec, model, cfg, groups, "a")
    b = evaluate_success(spec, model, cfg, groups, "a")
    assert a.rows == b.rows and len(a.rows) == 6
    for r, ep in zip(a.rows, [e for g in groups for e in g.episodes]):
        assert r["seed"] == ep.seed and 0 <= r["steps"] <= 8
    po = paired_outcomes(a, b)
    assert po.a_only == po.b_only == 0 and po.total == 6


def test_benchmark_shape(small_model, tmp_path):
    spec, model = small_model
    res = cost_call_benchmark(spec, model, PlannerConfig(n_samples=50), n_warmup=1, n_measured=2)
    assert res.n_candidates == 50 and res.n_measured == 2
    assert res.ms_base > 0 and res.ms_gated > 0 and np.isfinite(res.overhead)
    write_bench(res, tmp_path / "b.csv")
    assert len((tmp_path / "b.csv").read_text().splitlines()) == 4
    with pytest.raises(ValueError):
        cost_call_benchmark(spec, model, PlannerConfig(), n_measured=0)
