"""Success-rate evaluation on fixed episode groups, paired outcomes, cost-call timing."""
from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field, replace

import numpy as np

from .env import GridSpec, observe, oracle_reachable, sample_episode_spec
from .model import WorldModel
from .planner import PlannerConfig, Scorer, cost_call, mpc_execute

RESULT_FIELDS = ("method", "group", "episode", "seed", "success", "steps",
                 "final_base_cost", "final_R")


@dataclass(frozen=True)
class Episode:
    start: tuple[int, int]
    goal: tuple[int, int]
    seed: int


@dataclass(frozen=True)
class EpisodeGroup:
    group_id: int
    episodes: tuple[Episode, ...]

    @property
    def size(self) -> int:
        return len(self.episodes)


def build_groups(spec: GridSpec, n_groups: int = 5, group_size: int = 50,
                 seed: int = 0) -> list[EpisodeGroup]:
    """Fixed evaluation groups; every episode gets its own seed, distinct from all others."""
    if group_size < 1 or n_groups < 1:
        raise ValueError("need at least one group of at least one episode")
    rng = np.random.default_rng([seed, 2])
    seeds = rng.choice(2**31 - 1, size=n_groups * group_size, replace=False)
    groups = []
    for g in range(n_groups):
        eps = []
        for s in seeds[g * group_size:(g + 1) * group_size]:
            start, goal = sample_episode_spec(spec, int(s))
            eps.append(Episode(start, goal, int(s)))
        groups.append(EpisodeGroup(g, tuple(eps)))
    return groups


def groups_feasible(spec: GridSpec, groups: list[EpisodeGroup], budget: int) -> bool:
    return all(oracle_reachable(spec, e.start, e.goal, budget) for g in groups for e in g.episodes)


@dataclass
class EvalReport:
    method: str
    rows: list[dict] = field(default_factory=list)

    @property
    def per_group(self) -> list[float]:
        by = {}
        for r in self.rows:
            by.setdefault(r["group"], []).append(r["success"])
        return [float(np.mean(by[g])) for g in sorted(by)]

    @property
    def mean(self) -> float:
        return float(np.mean(self.per_group))

    @property
    def std(self) -> float:
        """Population standard deviation of the group success rates."""
        return float(np.std(self.per_group))

    def outcomes(self) -> dict[tuple[int, int], bool]:
        return {(r["group"], r["episode"]): bool(r["success"]) for r in self.rows}


def evaluate_success(spec: GridSpec, model: WorldModel, cfg: PlannerConfig,
                     groups: list[EpisodeGroup], method: str = "method",
                     progress=None) -> EvalReport:
    """Run every episode of every group with the closed-loop planner."""
    report = EvalReport(method)
    for g in groups:
        for i, ep in enumerate(g.episodes):
            res = mpc_execute(spec, model, cfg, (ep.start, ep.goal), seed=ep.seed)
            report.rows.append({
                "method": method, "group": g.group_id, "episode": i, "seed": ep.seed,
                "success": int(res.success), "steps": res.steps,
                "final_base_cost": res.final_base_cost, "final_R": res.final_R,
            })
            if progress is not None:
                progress(report.rows[-1])
    return report


def summarize(per_group) -> tuple[float, float]:
    rates = np.asarray(per_group, dtype=np.float64)
    return float(rates.mean()), float(rates.std())


def write_results(reports: list[EvalReport], path) -> None:
    """Results CSV; floats written with repr so equal runs give equal bytes."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(RESULT_FIELDS)
        for rep in reports:
            for r in rep.rows:
                w.writerow([r["method"], r["group"], r["episode"], r["seed"], r["success"],
                            r["steps"], repr(float(r["final_base_cost"])),
                            repr(float(r["final_R"]))])


def read_results(path) -> dict[str, EvalReport]:
    out: dict[str, EvalReport] = {}
    with open(path, newline="") as fh:
        for r in csv.DictReader(fh):
            row = {"method": r["method"], "group": int(r["group"]), "episode": int(r["episode"]),
                   "seed": int(r["seed"]), "success": int(r["success"]), "steps": int(r["steps"]),
                   "final_base_cost": float(r["final_base_cost"]), "final_R": float(r["final_R"])}
            out.setdefault(row["method"], EvalReport(row["method"])).rows.append(row)
    return out


@dataclass(frozen=True)
class PairedOutcome:
    both_fail: int
    a_only: int
    b_only: int
    both_succeed: int

    @property
    def total(self) -> int:
        return self.both_fail + self.a_only + self.b_only + self.both_succeed


def paired_outcomes(a, b) -> PairedOutcome:
    """Four-way counts over episodes both methods ran.

    ``a`` and ``b`` are EvalReports or {(group, episode): success} maps and
    must cover exactly the same episodes (same seeds when reports are given).
    """
    if isinstance(a, EvalReport) and isinstance(b, EvalReport):
        sa = {(r["group"], r["episode"]): r["seed"] for r in a.rows}
        sb = {(r["group"], r["episode"]): r["seed"] for r in b.rows}
        if sa != sb:
            raise ValueError("paired outcomes need identical episode groups")
    oa = a.outcomes() if isinstance(a, EvalReport) else dict(a)
    ob = b.outcomes() if isinstance(b, EvalReport) else dict(b)
    if oa.keys() != ob.keys():
        raise ValueError("paired outcomes need identical episode groups")
    both = sum(oa[k] and ob[k] for k in oa)
    a_only = sum(oa[k] and not ob[k] for k in oa)
    b_only = sum(ob[k] and not oa[k] for k in oa)
    return PairedOutcome(len(oa) - both - a_only - b_only, a_only, b_only, both)


def matched_delta(a: EvalReport, b: EvalReport) -> float:
    """Success-rate difference a - b in percentage points."""
    return 100.0 * (a.mean - b.mean)


@dataclass(frozen=True)
class BenchResult:
    ms_base: float
    ms_gated: float
    n_candidates: int
    n_warmup: int
    n_measured: int

    @property
    def overhead(self) -> float:
        """Relative extra time of gated over base scoring."""
        return self.ms_gated / self.ms_base - 1.0


def cost_call_benchmark(spec: GridSpec, model: WorldModel, cfg: PlannerConfig,
                        n_warmup: int = 5, n_measured: int = 20, seed: int = 0,
                        lambda_gated: float | None = None) -> BenchResult:
    """Mean ms per scoring call for base and gated scoring of the same candidate batch.

    Only the scoring pass is timed: no environment stepping, logging or IO.
    The two variants alternate call by call so drift hits both equally.
    """
    if n_measured < 1:
        raise ValueError("need at least one measured call")
    rng = np.random.default_rng(seed)
    cells = spec.free_cells
    s, g = (cells[i] for i in rng.choice(len(cells), size=2, replace=False))
    z = model.encode_np(observe(spec, s)[None].astype(np.float64))
    z_g = model.encode_np(observe(spec, g)[None].astype(np.float64))[0]
    context = [z] * model.cfg.L
    actions = rng.integers(0, model.cfg.n_actions, size=(cfg.n_samples, cfg.H))
    lam = lambda_gated if lambda_gated is not None else (cfg.lambda_plan or 0.35)
    variants = {"base": replace(cfg, lambda_plan=0.0, use_gate=False),
                "gated": replace(cfg, lambda_plan=lam, use_gate=True)}
    scorer = Scorer(model)
    times = {k: [] for k in variants}
    for i in range(n_warmup + n_measured):
        for name, vcfg in variants.items():
            t0 = time.perf_counter()
            out = cost_call(scorer, context, z_g, actions, vcfg)
            dt = time.perf_counter() - t0
            assert len(out.cost) == cfg.n_samples
            if i >= n_warmup:
                times[name].append(dt)
    return BenchResult(1e3 * float(np.mean(times["base"])), 1e3 * float(np.mean(times["gated"])),
                       cfg.n_samples, n_warmup, n_measured)


def write_bench(res: BenchResult, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["variant", "ms_per_call", "n_candidates", "n_warmup", "n_measured"])
        w.writerow(["base", f"{res.ms_base:.6f}", res.n_candidates, res.n_warmup, res.n_measured])
        w.writerow(["gated", f"{res.ms_gated:.6f}", res.n_candidates, res.n_warmup, res.n_measured])
        w.writerow(["overhead", f"{res.overhead:.6f}", "", "", ""])
