"""Categorical CEM over action sequences with reachability-gated latent costs."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace

import numpy as np

from .env import GridSpec, observe, step
from .model import WorldModel

BASE_MODES = ("terminal", "min", "mean")
SMOOTHING = 0.05
DIAG_FIELDS = ("step", "iter", "best_cost", "best_base", "best_R", "selected_action")


@dataclass(frozen=True)
class PlannerConfig:
    H: int = 6
    n_samples: int = 300
    n_iters: int = 10
    top_k: int = 30
    lambda_plan: float = 0.35
    m: float = 0.05
    budget: int = 50
    replan_every: int = 1
    base_cost_mode: str = "terminal"
    use_gate: bool = True  # False scores with the base cost only

    def __post_init__(self):
        if not 1 <= self.top_k <= self.n_samples:
            raise ValueError("need 1 <= top_k <= n_samples")
        if not 0.0 <= self.lambda_plan <= 1.0:
            raise ValueError("lambda_plan must lie in [0, 1]")
        if not 0.0 < self.m < 1.0:
            raise ValueError("gate floor m must lie in (0, 1)")
        if self.H < 1 or self.n_iters < 1 or self.replan_every < 1:
            raise ValueError("H, n_iters and replan_every must be positive")
        if self.base_cost_mode not in BASE_MODES:
            raise ValueError(f"unknown base cost mode {self.base_cost_mode!r}")


# profiles follow the scaled-down task table
PROFILES = {
    "tworoom": PlannerConfig(),
    "open": PlannerConfig(),
    "wall": PlannerConfig(n_samples=600, top_k=60, lambda_plan=0.85, budget=60),
}


def profile(env_name: str, **overrides) -> PlannerConfig:
    return replace(PROFILES.get(env_name, PlannerConfig()), **overrides)


def base_cost(rollout: np.ndarray, z_g: np.ndarray, mode: str = "terminal") -> np.ndarray:
    """Latent goal cost of rollouts shaped (H, N, d) (or (H, d) for one candidate)."""
    rollout = np.asarray(rollout, dtype=np.float64)
    if rollout.shape[0] < 1:
        raise ValueError("empty rollout")
    d2 = ((rollout - z_g) ** 2).sum(axis=-1)  # (H, N)
    if mode == "terminal":
        return d2[-1]
    if mode == "min":
        return d2.min(axis=0)
    if mode == "mean":
        return d2.mean(axis=0)
    raise ValueError(f"unknown base cost mode {mode!r}")


def trajectory_reachability(model: WorldModel, rollout: np.ndarray, z_g: np.ndarray,
                            H: int | None = None) -> np.ndarray:
    """max over 1 <= k < H of R(z_hat_{t+k}, z_g, H - k); 0 when H == 1 (empty max)."""
    rollout = np.asarray(rollout, dtype=np.float64)
    single = rollout.ndim == 2
    if single:
        rollout = rollout[:, None]
    H = rollout.shape[0] if H is None else H
    n = rollout.shape[1]
    if H < 2:
        out = np.zeros(n)
        return out[0] if single else out
    # one batched head call over all (k, candidate) pairs
    src = rollout[:H - 1].reshape(-1, rollout.shape[-1])
    budgets = np.repeat(H - np.arange(1, H), n)
    scores = model.reach_score(src, np.atleast_2d(z_g), budgets).data.reshape(H - 1, n)
    out = scores.max(axis=0)
    return out[0] if single else out


def rc_cost(base, R, lambda_plan: float, m: float):
    """base * max(m, 1 - lambda_plan * R)."""
    return base * np.maximum(m, 1.0 - lambda_plan * np.asarray(R))


@dataclass
class CandidateScores:
    actions: np.ndarray  # (N, H)
    rollout: np.ndarray  # (H, N, d)
    base: np.ndarray
    R: np.ndarray
    cost: np.ndarray


class Scorer:
    """Planner-side forward pass with weights laid out for candidate batches.

    The action and bias terms of the dynamics first layer become a lookup
    table, and the head's goal and budget terms are constants per call, so
    a gated step adds one (U, d) x (d, hidden) matmul and a small matvec,
    U being the number of distinct action prefixes at that step.
    The dynamics path is computed the same way whether or not the gate is
    on, so gated and ungated rollouts agree bit for bit.
    """

    def __init__(self, model: WorldModel):
        cfg = model.cfg
        p = model.params.arrays
        d, L = cfg.d_z, cfg.L
        self.model, self.d, self.L, self.hid = model, d, L, cfg.hidden
        self.dyn_wz = p["dyn.w1"][:L * d]
        self.dyn_wa = p["dyn.w1"][L * d:] + p["dyn.b1"]
        self.dyn_w2, self.dyn_b2 = p["dyn.w2"], p["dyn.b2"]
        self.r_wz, self.r_wg = p["reach.w1"][:d], p["reach.w1"][d:2 * d]
        self.r_wh, self.r_b1 = p["reach.w1"][2 * d:], p["reach.b1"]
        self.r_w2, self.r_b2 = p["reach.w2"][:, 0], float(p["reach.b2"][0])

    def head_bias(self, z_g: np.ndarray, budget: int) -> np.ndarray:
        feat = self.model._budget_features(budget, 1)[0]
        return np.asarray(z_g).reshape(-1) @ self.r_wg + feat @ self.r_wh + self.r_b1

    def score(self, context: list[np.ndarray], z_g: np.ndarray, actions: np.ndarray,
              gate: bool, mode: str = "terminal"):
        """Returns (rollout (H, N, d), base cost, R) for an (N, H) action batch."""
        n, H = actions.shape
        if self.L != 1:
            return self._score_generic(context, z_g, actions, gate, mode)
        # candidates sharing an action prefix share its latents: step each distinct
        # prefix once, then scatter back to the candidates
        A = self.model.cfg.n_actions
        z = np.asarray(context[-1]).reshape(1, self.d)
        parent = np.zeros(n, dtype=np.int64)
        code = np.zeros(n, dtype=np.int64)
        best = np.full(n, -np.inf)
        rollout = np.empty((H, n, self.d))
        for k in range(1, H + 1):
            code = code * A + actions[:, k - 1]
            _, first, inv = np.unique(code, return_index=True, return_inverse=True)
            inv = inv.reshape(-1)
            z_prev = z[parent[first]]
            hdyn = np.tanh(z_prev @ self.dyn_wz + self.dyn_wa[actions[first, k - 1]])
            z = z_prev + hdyn @ self.dyn_w2 + self.dyn_b2
            rollout[k - 1] = z[inv]
            parent = inv
            if gate and k < H:
                hr = np.tanh(z @ self.r_wz + self.head_bias(z_g, H - k))
                np.maximum(best, (hr @ self.r_w2 + self.r_b2)[inv], out=best)
        base = base_cost(rollout, z_g, mode)
        if not gate:
            return rollout, base, np.zeros(n)
        R = np.zeros(n) if H < 2 else 1.0 / (1.0 + np.exp(-best))
        return rollout, base, R

    def _score_generic(self, context, z_g, actions, gate, mode):
        n, H = actions.shape
        ctx = [np.broadcast_to(z, (n, z.shape[-1])) for z in context]
        rollout = np.stack([z.data for z in self.model.rollout(ctx, actions, H)])
        base = base_cost(rollout, z_g, mode)
        R = trajectory_reachability(self.model, rollout, z_g, H) if gate else np.zeros(n)
        return rollout, base, R


def cost_call(model: WorldModel | Scorer, context: list[np.ndarray], z_g: np.ndarray,
              actions: np.ndarray, cfg: PlannerConfig) -> CandidateScores:
    """Score one candidate batch: rollout, base cost and (when gated) reachability.

    With lambda_plan = 0 the gate factor is exactly 1 whatever R is, so the
    head is not evaluated and R is reported as 0.
    """
    scorer = model if isinstance(model, Scorer) else Scorer(model)
    gate = cfg.use_gate and cfg.lambda_plan > 0
    rollout, base, R = scorer.score(context, z_g, actions, gate, cfg.base_cost_mode)
    cost = rc_cost(base, R, cfg.lambda_plan, cfg.m) if gate else base
    return CandidateScores(actions, rollout, base, R, cost)


@dataclass
class PlanResult:
    actions: np.ndarray
    cost: float
    base: float
    R: float
    diagnostics: list[dict] = field(default_factory=list)
    elite_sets: list[np.ndarray] = field(default_factory=list)


class _ScoreCache:
    """Scores of every sequence already evaluated during one ``cem_plan`` call.

    Late CEM iterations resample the same few sequences over and over; each
    row's score depends only on that row, so scoring a sequence once and
    reusing it changes nothing but the work done.
    """

    def __init__(self, scorer: Scorer, context, z_g, cfg: PlannerConfig, n_actions: int):
        self.scorer, self.context, self.z_g, self.cfg = scorer, context, z_g, cfg
        self.radix = n_actions ** np.arange(cfg.H, dtype=np.int64)
        self.codes = np.empty(0, dtype=np.int64)  # sorted
        self.table = np.empty((3, 0))  # base, R, cost rows aligned with codes

    def __call__(self, actions: np.ndarray) -> np.ndarray:
        """(3, N) array of base cost, R and gated cost for each row of ``actions``."""
        codes = actions.astype(np.int64) @ self.radix
        ucodes, first = np.unique(codes, return_index=True)
        missing = ~np.isin(ucodes, self.codes, assume_unique=True)
        if missing.any():
            sc = cost_call(self.scorer, self.context, self.z_g, actions[first[missing]], self.cfg)
            merged = np.concatenate([self.codes, ucodes[missing]])
            order = np.argsort(merged, kind="stable")
            self.codes = merged[order]
            self.table = np.concatenate([self.table, np.stack([sc.base, sc.R, sc.cost])],
                                        axis=1)[:, order]
        return self.table[:, np.searchsorted(self.codes, codes)]


def _sample(probs: np.ndarray, n: int, rng: np.random.Generator) -> np.ndarray:
    cum = np.cumsum(probs, axis=1)
    u = rng.random((n, probs.shape[0]))
    idx = (u[:, :, None] >= cum[None]).sum(axis=-1)
    return np.minimum(idx, probs.shape[1] - 1)


def cem_plan(model: WorldModel, context: list[np.ndarray], z_g: np.ndarray,
             cfg: PlannerConfig, seed, n_actions: int | None = None) -> PlanResult:
    """Cross-entropy search over discrete action sequences.

    After the first iteration the previous elites stay in the pool, so the
    elite mean cost never increases. Ties go to the lower candidate index.
    """
    scorer = model if isinstance(model, Scorer) else Scorer(model)
    A = n_actions or scorer.model.cfg.n_actions
    rng = np.random.default_rng(seed)
    probs = np.full((cfg.H, A), 1.0 / A)
    score = _ScoreCache(scorer, context, z_g, cfg, A)
    elite_actions = elite_scores = None
    best = None
    diags, elite_sets = [], []
    for it in range(cfg.n_iters):
        n_new = cfg.n_samples if elite_actions is None else cfg.n_samples - cfg.top_k
        actions = _sample(probs, n_new, rng)
        scores = score(actions)  # rows: base, R, cost
        if elite_actions is not None:
            actions = np.concatenate([elite_actions, actions])
            scores = np.concatenate([elite_scores, scores], axis=1)
        elites = np.argsort(scores[2], kind="stable")[:cfg.top_k]
        elite_actions, elite_scores = actions[elites], scores[:, elites]
        elite_sets.append(elite_actions.copy())
        base, R, cost = (float(v) for v in elite_scores[:, 0])
        best = (elite_actions[0].copy(), cost, base, R)
        diags.append({"iter": it, "best_cost": cost, "best_base": base, "best_R": R,
                      "elite_mean": float(elite_scores[2].mean())})
        counts = np.stack([np.bincount(elite_actions[:, k], minlength=A) for k in range(cfg.H)])
        probs = (counts / cfg.top_k + SMOOTHING) / (1.0 + SMOOTHING * A)
    return PlanResult(best[0], best[1], best[2], best[3], diags, elite_sets)


@dataclass
class EpisodeResult:
    success: bool
    steps: int
    states: list
    actions: list
    final_base_cost: float
    final_R: float
    diagnostics: list[dict] = field(default_factory=list)


def mpc_execute(spec: GridSpec, model: WorldModel, cfg: PlannerConfig,
                episode: tuple, seed: int) -> EpisodeResult:
    """Closed-loop execution: replan every ``replan_every`` steps until goal or budget."""
    start, goal = (tuple(map(int, c)) for c in episode[:2])
    z_g = model.encode_np(observe(spec, goal)[None].astype(np.float64))[0]
    s = start
    states, actions, diags = [s], [], []
    history = [model.encode_np(observe(spec, s)[None].astype(np.float64))[0]]
    final_base = float(((history[-1] - z_g) ** 2).sum())
    last = None
    scorer = Scorer(model)
    t = 0
    while s != goal and t < cfg.budget:
        ctx = history[-model.cfg.L:]
        ctx = [ctx[0]] * (model.cfg.L - len(ctx)) + ctx
        plan = cem_plan(scorer, [z[None] for z in ctx], z_g, cfg, seed=[seed, t])
        last = (ctx, plan)
        for d in plan.diagnostics:
            diags.append({"step": t, "iter": d["iter"], "best_cost": d["best_cost"],
                          "best_base": d["best_base"], "best_R": d["best_R"],
                          "selected_action": int(plan.actions[0])})
        for a in plan.actions[:cfg.replan_every]:
            if s == goal or t >= cfg.budget:
                break
            s = step(spec, s, int(a))
            t += 1
            states.append(s)
            actions.append(int(a))
            history.append(model.encode_np(observe(spec, s)[None].astype(np.float64))[0])
    final_R = 0.0
    if last is not None:
        # judged on the last selected plan, independent of whether gating was on
        ctx, plan = last
        _, base, R = scorer.score([z[None] for z in ctx], z_g, plan.actions[None], True,
                                  cfg.base_cost_mode)
        final_base, final_R = float(base[0]), float(R[0])
    return EpisodeResult(s == goal, t, states, actions, final_base, final_R, diags)


def write_diagnostics(rows: list[dict], path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=DIAG_FIELDS, extrasaction="ignore")
        writer.writeheader()
        writer.writerows(rows)
