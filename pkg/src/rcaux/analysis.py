"""Empirical checks of the planning-alignment bounds.

Each check measures a quantity, computes the bound it should respect, and
returns a :class:`BoundReport`. Lipschitz constants and error maxima are
estimated over a superset of the points where the bound is then evaluated,
so for a correct implementation the inequalities must hold; a violation
points at a bug rather than at a statistical fluke.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace
from fractions import Fraction

import numpy as np

from .data import Dataset, observed_offset_table
from .env import GridSpec, observe, shortest_hitting_time, step
from .model import ModelConfig, WorldModel
from .planner import rc_cost
from .train import LossWeights, TrainConfig, fit, fit_reach_head

# slack for floating-point rounding in inequalities that hold exactly in reals
SLACK = 1e-9


@dataclass
class BoundReport:
    name: str
    measured: np.ndarray
    bound: np.ndarray
    constants: dict[str, float] = field(default_factory=dict)
    excluded: int = 0  # samples where the bound's hypotheses fail

    def __post_init__(self):
        self.measured = np.asarray(self.measured, dtype=np.float64)
        self.bound = np.asarray(self.bound, dtype=np.float64)

    @property
    def holds(self) -> np.ndarray:
        return self.measured <= self.bound + SLACK * (1.0 + np.abs(self.bound))

    @property
    def violations(self) -> int:
        return int((~self.holds).sum())

    @property
    def worst_ratio(self) -> float:
        """Largest measured / bound over samples with a positive bound."""
        pos = self.bound > 0
        return float((self.measured[pos] / self.bound[pos]).max(initial=0.0))

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["sample", "measured", "bound", "holds"])
            for i, (m, b, ok) in enumerate(zip(self.measured, self.bound, self.holds)):
                w.writerow([i, repr(float(m)), repr(float(b)), int(ok)])
            extras = ";".join(f"{k}={v!r}" for k, v in sorted(self.constants.items()))
            w.writerow(["summary", self.violations, repr(self.worst_ratio),
                        f"excluded={self.excluded};{extras}"])


# --- helpers ------------------------------------------------------------------


def _visited(dataset: Dataset) -> list[tuple[int, int]]:
    states = np.concatenate([tr.states for tr in dataset.trajectories])
    return [tuple(map(int, s)) for s in np.unique(states, axis=0)]


def _encode_cells(model: WorldModel, spec: GridSpec, cells) -> np.ndarray:
    obs = np.stack([observe(spec, c) for c in cells]).astype(np.float64)
    return model.encode_np(obs)


def _step_latent(model: WorldModel, z: np.ndarray, a) -> np.ndarray:
    return model.predict_step([np.atleast_2d(z)], np.atleast_1d(a)).data


def _sample_windows(dataset: Dataset, length: int, n: int, rng) -> list[tuple[int, int]]:
    out = []
    for _ in range(n):
        while True:
            i = int(rng.integers(len(dataset)))
            T = len(dataset[i])
            if T > length:
                out.append((i, int(rng.integers(T - length))))
                break
    return out


def _random_offsets(n: int, d: int, radius: float, rng) -> np.ndarray:
    u = rng.standard_normal((n, d))
    u /= np.linalg.norm(u, axis=1, keepdims=True)
    return u * (radius * rng.uniform(0.0, 1.0, size=(n, 1)) + 1e-12)


# --- compounding ------------------------------------------------------------------


def check_compounding(model: WorldModel, dataset: Dataset, K: int = 6, n_segments: int = 200,
                      n_pairs: int = 10_000, radius: float = 0.1, seed: int = 0) -> BoundReport:
    """K-step open-loop error against eps1 * sum_{i<K} L_f^i.

    eps1 is the largest one-step error over every visited state and action;
    L_f the largest ratio |f(z1,a) - f(z2,a)| / |z1 - z2| over random
    perturbations of visited latents plus the (prediction, truth) pairs the
    rollouts actually pass through.
    """
    if K < 1:
        raise ValueError("K must be >= 1")
    spec = dataset.spec
    rng = np.random.default_rng(seed)
    cells = _visited(dataset)
    index = {c: i for i, c in enumerate(cells)}
    Z = _encode_cells(model, spec, cells)
    A = model.cfg.n_actions

    # one-step error over the whole visited region
    nxt = [step(spec, c, a) for c in cells for a in range(A)]
    Z_next = _encode_cells(model, spec, nxt)
    pred = _step_latent(model, np.repeat(Z, A, axis=0), np.tile(np.arange(A), len(cells)))
    eps1 = float(np.linalg.norm(pred - Z_next, axis=1).max())

    # Lipschitz ratios from random perturbation pairs
    base_idx = rng.integers(len(cells), size=n_pairs)
    acts = rng.integers(A, size=n_pairs)
    z1 = Z[base_idx]
    z2 = z1 + _random_offsets(n_pairs, Z.shape[1], radius, rng)
    num = np.linalg.norm(_step_latent(model, z1, acts) - _step_latent(model, z2, acts), axis=1)
    L_f = float((num / np.linalg.norm(z1 - z2, axis=1)).max())

    # rollouts along recorded segments
    errors = []
    windows = _sample_windows(dataset, K, n_segments, rng)
    for i, t in windows:
        tr = dataset[i]
        truth = Z[[index[tuple(map(int, s))] for s in tr.states[t:t + K + 1]]]
        z_hat = truth[0:1]
        for k in range(K):
            a = tr.actions[t + k]
            z_next = _step_latent(model, z_hat, a)
            gap = np.linalg.norm(z_hat[0] - truth[k])
            if gap > 0:
                ratio = np.linalg.norm(z_next[0] - _step_latent(model, truth[k:k + 1], a)[0]) / gap
                L_f = max(L_f, float(ratio))
            z_hat = z_next
        errors.append(float(np.linalg.norm(z_hat[0] - truth[K])))
    bound = eps1 * sum(L_f ** i for i in range(K))
    return BoundReport("compounding", np.array(errors), np.full(len(errors), bound),
                       {"eps1": eps1, "L_f": L_f, "K": K})


# --- cost distortion ----------------------------------------------------------------


def check_cost_distortion(model: WorldModel, dataset: Dataset, H: int = 6, n_samples: int = 500,
                          B: float | None = None, w=None, seed: int = 0
                          ) -> tuple[BoundReport, BoundReport]:
    """Terminal-cost distortion against 4B|z_hat_H - z*_H| and the multi-horizon bound.

    Returns ``(terminal, mh)`` reports. The second compares the same distortion
    with (L_C / sqrt(w_min)) sqrt(l_mh), L_C = 4B for the terminal cost. With
    ``B=None`` the radius is the largest latent norm seen in the run, so
    nothing is excluded.
    """
    spec = dataset.spec
    rng = np.random.default_rng(seed)
    w = LossWeights(w=w).horizon(H)
    w_min = float(w.min())
    rows = []
    for i, t in _sample_windows(dataset, H, n_samples, rng):
        tr = dataset[i]
        obs = np.stack([observe(spec, tuple(s)) for s in tr.states[t:t + H + 1]]).astype(float)
        z_true = model.encode_np(obs)
        goal_traj = dataset[int(rng.integers(len(dataset)))]
        g = tuple(goal_traj.states[int(rng.integers(len(goal_traj)))])
        z_g = model.encode_np(observe(spec, g)[None].astype(float))[0]
        preds = model.rollout([z_true[0:1]], tr.actions[t:t + H][None], H)
        z_hat = np.stack([p.data[0] for p in preds])
        mh = float(np.sum(w * ((z_hat - z_true[1:]) ** 2).sum(axis=1)))
        rows.append((z_hat[-1], z_true[-1], z_g, mh))
    norms = np.array([max(np.linalg.norm(a), np.linalg.norm(b), np.linalg.norm(c))
                      for a, b, c, _ in rows])
    radius = float(norms.max()) if B is None else float(B)
    keep = norms <= radius
    dist, gap, mh = [], [], []
    for (zh, zt, zg, m), ok in zip(rows, keep):
        if ok:
            dist.append(abs(((zh - zg) ** 2).sum() - ((zt - zg) ** 2).sum()))
            gap.append(np.linalg.norm(zh - zt))
            mh.append(m)
    dist, gap, mh = np.array(dist), np.array(gap), np.array(mh)
    L_C = 4.0 * radius
    excluded = int((~keep).sum())
    consts = {"B": radius, "L_C": L_C, "w_min": w_min, "H": H}
    term = BoundReport("cost_distortion_terminal", dist, L_C * gap, consts, excluded)
    via_mh = BoundReport("cost_distortion_mh", dist, L_C / np.sqrt(w_min) * np.sqrt(mh),
                         consts, excluded)
    return term, via_mh


# --- Bayes-optimal head ------------------------------------------------------------


def bayes_fixture(conflicting: bool = False, n_latents: int = 6, d_z: int = 4, H_max: int = 6,
                  seed: int = 0):
    """Small memorisable set of (source, target, h) inputs with their labels.

    Deterministic labels follow 1[h >= offset]. The conflicting variant lists
    every input twice, once with each label, so the risk minimiser is 0.5.
    """
    rng = np.random.default_rng(seed)
    Z = rng.standard_normal((n_latents, d_z))
    src, tgt, h, y = [], [], [], []
    for i in range(n_latents - 1):
        delta = i % 3 + 1
        for hh in range(max(0, delta - 2), min(H_max, delta + 2) + 1):
            src.append(Z[i]); tgt.append(Z[i + 1]); h.append(hh); y.append(float(hh >= delta))
    src, tgt, h, y = np.array(src), np.array(tgt), np.array(h), np.array(y)
    if conflicting:
        src, tgt, h = (np.concatenate([a, a]) for a in (src, tgt, h))
        y = np.concatenate([np.ones(len(y)), np.zeros(len(y))])
    if len({(tuple(s), tuple(t), k) for s, t, k in zip(src, tgt, h)}) > 64:
        raise ValueError("fixture too large to memorise")
    return src, tgt, h, y


def check_bayes_reach(conflicting: bool = False, steps: int = 3000, lr: float = 1e-2,
                      tolerance: float = 0.05, seed: int = 0) -> BoundReport:
    """Train the head alone on a tabular fixture; compare scores with the risk minimiser.

    The minimiser is the conditional label mean of each distinct input: the
    label itself when labels are deterministic, 0.5 for the conflicting set.
    """
    src, tgt, h, y = bayes_fixture(conflicting, seed=seed)
    model = WorldModel(ModelConfig(obs_dim=1, d_z=src.shape[1], hidden=64, H_max=6), seed=seed)
    trace = fit_reach_head(model, src, tgt, h, y, steps=steps, lr=lr)
    score = model.reach_score_np(src, tgt, h)
    keys = [(s.tobytes(), t.tobytes(), int(k)) for s, t, k in zip(src, tgt, h)]
    sums: dict = {}
    for key, label in zip(keys, y):
        n, tot = sums.get(key, (0, 0.0))
        sums[key] = (n + 1, tot + label)
    target = np.array([sums[k][1] / sums[k][0] for k in keys])
    gap = np.abs(score - target)
    name = "bayes_conflicting" if conflicting else "bayes_deterministic"
    return BoundReport(name, gap, np.full(len(gap), tolerance),
                       {"final_loss": trace[-1], "max_gap": float(gap.max())})


# --- budget identifiability -----------------------------------------------------------


def budget_flip_probes(dataset: Dataset, H_max: int, n: int = 400, seed: int = 0):
    """Same-trajectory pairs whose offset equals the true hitting time, probed at h = offset - 1
    and h = offset. On such pairs the label at each budget is unambiguous."""
    spec = dataset.spec
    rng = np.random.default_rng(seed)
    src, tgt, h, y, delta = [], [], [], [], []
    tries = 0
    while len(delta) < n and tries < 100 * n:
        tries += 1
        i = int(rng.integers(len(dataset)))
        tr = dataset[i]
        t = int(rng.integers(len(tr) - 1))
        off = int(rng.integers(1, min(H_max, len(tr) - 1 - t) + 1))
        s, g = tuple(tr.states[t]), tuple(tr.states[t + off])
        if shortest_hitting_time(spec, s, g) != off:
            continue
        for hh, label in ((off - 1, 0.0), (off, 1.0)):
            src.append(tr.observations[t]); tgt.append(tr.observations[t + off])
            h.append(hh); y.append(label)
        delta.append(off)
    return (np.array(src, dtype=np.float64), np.array(tgt, dtype=np.float64), np.array(h),
            np.array(y))


@dataclass
class IdentifiabilityResult:
    with_hard: BoundReport  # measured = 1 - accuracy on the flip set, bound = 1 - 0.9
    without_hard: BoundReport  # measured = accuracy on h < offset probes, bound = 0.6
    sensitivity: tuple[float, float]  # mean |score(h=offset) - score(h=offset-1)|, with / without


def _flip_scores(model: WorldModel, probes):
    src, tgt, h, _ = probes
    return model.reach_score_np(model.encode_np(src), model.encode_np(tgt), h)


def check_budget_identifiability(train_data: Dataset, probe_data: Dataset,
                                 config: TrainConfig = TrainConfig(),
                                 weights: LossWeights = LossWeights(),
                                 n_probes: int = 400, seed: int = 0,
                                 models: tuple[WorldModel, WorldModel] | None = None
                                 ) -> IdentifiabilityResult:
    """Two matched training runs that differ only in hard-negative inclusion."""
    if models is None:
        models = tuple(fit(train_data, replace(config, hard_negatives=hn), weights).model
                       for hn in (True, False))
    probes = budget_flip_probes(probe_data, config.H_max, n_probes, seed)
    y = probes[3]
    neg = y == 0
    out, sens = [], []
    for m in models:
        score = _flip_scores(m, probes)
        correct = (score > 0.5) == (y > 0.5)
        out.append((correct, score))
        sens.append(float(np.abs(score[~neg] - score[neg]).mean()))
    (c_with, _), (c_without, _) = out
    with_hard = BoundReport("identifiability_with_hard", np.array([1.0 - c_with.mean()]),
                            np.array([0.1]), {"accuracy": float(c_with.mean()),
                                              "n_probes": int(neg.sum())})
    without = BoundReport("identifiability_without_hard", np.array([c_without[neg].mean()]),
                          np.array([0.6]), {"accuracy_h_lt_offset": float(c_without[neg].mean()),
                                            "accuracy": float(c_without.mean())})
    return IdentifiabilityResult(with_hard, without, (sens[0], sens[1]))


# --- data competitiveness --------------------------------------------------------------


def check_data_competitiveness(dataset: Dataset) -> BoundReport:
    """D*(s, g) <= D_D(s, g) on every observed entry; reports c = max D_D / D* over D* >= 1."""
    table = observed_offset_table(dataset)
    d_star, d_data = [], []
    for s, g, dd in table.entries():
        d_star.append(shortest_hitting_time(dataset.spec, s, g))
        d_data.append(dd)
    d_star, d_data = np.array(d_star, dtype=float), np.array(d_data, dtype=float)
    pos = d_star >= 1
    c = float((d_data[pos] / d_star[pos]).max(initial=1.0))
    return BoundReport("data_competitiveness", d_star, d_data, {"c": c, "entries": len(d_star)})


# --- margin robustness -----------------------------------------------------------------


@dataclass
class MarginResult:
    report: BoundReport  # per in-margin pair: measured = sign flip (0/1), bound = 0
    gamma: float  # smallest |logit| over correctly classified encoded pairs
    L_r: float
    delta: float  # largest |z_pred - z| over the substituted sources
    global_condition: bool  # L_r * delta < gamma
    flip_rate: float  # over all correctly classified pairs
    in_margin: int


def check_margin_robustness(model: WorldModel, dataset: Dataset, K: int = 6, H_max: int = 12,
                            n: int = 500, n_pairs: int = 10_000, radius: float = 0.1,
                            seed: int = 0) -> MarginResult:
    """Swap encoded sources for open-loop predictions of the same state and count sign flips.

    A pair is in-margin when L_r * |z_pred - z| < y * logit; for those the
    sign cannot flip. L_r covers random source perturbations of the sampled
    pairs and the substitutions themselves.
    """
    spec = dataset.spec
    rng = np.random.default_rng(seed)
    z_src, z_pred, z_tgt, hs, ys = [], [], [], [], []
    for i, t0 in _sample_windows(dataset, K + 1, n, rng):
        tr = dataset[i]
        k = int(rng.integers(1, K + 1))  # rollout length feeding the source
        t = t0 + k
        off = int(rng.integers(1, min(H_max, len(tr) - 1 - t) + 1)) if t < len(tr) - 1 else 0
        if off == 0:
            continue
        hh = int(rng.integers(0, H_max + 1))
        obs = np.stack([observe(spec, tuple(s)) for s in (tr.states[t0], tr.states[t],
                                                          tr.states[t + off])]).astype(float)
        z0, zt, zg = model.encode_np(obs)
        pred = model.rollout([z0[None]], tr.actions[t0:t][None], k)[-1].data[0]
        z_src.append(zt); z_pred.append(pred); z_tgt.append(zg); hs.append(hh)
        ys.append(1.0 if hh >= off else -1.0)
    z_src, z_pred, z_tgt = np.array(z_src), np.array(z_pred), np.array(z_tgt)
    hs, ys = np.array(hs), np.array(ys)
    logit = model.reach_logit(z_src, z_tgt, hs).data
    logit_pred = model.reach_logit(z_pred, z_tgt, hs).data
    margin = ys * logit
    correct = margin > 0
    gaps = np.linalg.norm(z_pred - z_src, axis=1)
    # Lipschitz ratio in the source argument
    idx = rng.integers(len(z_src), size=n_pairs)
    z2 = z_src[idx] + _random_offsets(n_pairs, z_src.shape[1], radius, rng)
    num = np.abs(model.reach_logit(z2, z_tgt[idx], hs[idx]).data - logit[idx])
    L_r = float((num / np.linalg.norm(z2 - z_src[idx], axis=1)).max())
    moved = gaps > 0
    if moved.any():
        L_r = max(L_r, float((np.abs(logit_pred - logit)[moved] / gaps[moved]).max()))
    flipped = correct & (ys * logit_pred <= 0)
    in_margin = correct & (L_r * gaps < margin)
    gamma = float(margin[correct].min(initial=np.inf))
    delta = float(gaps.max(initial=0.0))
    report = BoundReport("margin_robustness", flipped[in_margin].astype(float),
                         np.zeros(int(in_margin.sum())),
                         {"gamma": gamma, "L_r": L_r, "delta": delta,
                          "flip_rate": float(flipped[correct].mean()) if correct.any() else 0.0})
    return MarginResult(report, gamma, L_r, delta, bool(L_r * delta < gamma),
                        report.constants["flip_rate"], int(in_margin.sum()))


# --- preference inequality ------------------------------------------------------------


def check_preference_inequality(n: int = 10_000, m: float = 0.05, seed: int = 0,
                                lambdas=(0.0, 0.25, 0.5, 0.75, 0.85, 0.95)) -> BoundReport:
    """Planner's pairwise choice vs d_a/d_b < (1 - lam R_b) / (1 - lam R_a).

    The planner side ranks the two gated costs the way CEM does (stable
    argsort, lower index wins ties). The closed form is evaluated in exact
    rational arithmetic. Tuples where the floor binds are resampled.
    measured = 1 on a mismatch, bound = 0.
    """
    rng = np.random.default_rng(seed)
    mismatches = []
    lam_grid = np.asarray(lambdas, dtype=np.float64)
    while len(mismatches) < n:
        lam = float(lam_grid[len(mismatches) % len(lam_grid)]) if len(mismatches) % 2 else \
            float(rng.uniform(0.0, 1.0))
        d_a, d_b = rng.uniform(1e-3, 10.0, size=2)
        R_a, R_b = rng.uniform(0.0, 1.0, size=2)
        if min(1 - lam * R_a, 1 - lam * R_b) <= m:
            continue
        costs = rc_cost(np.array([d_a, d_b]), np.array([R_a, R_b]), lam, m)
        planner_a = int(np.argsort(costs, kind="stable")[0]) == 0
        F = Fraction
        lhs = F(d_a) * (1 - F(lam) * F(R_a))
        rhs = F(d_b) * (1 - F(lam) * F(R_b))
        closed_a = lhs < rhs or lhs == rhs  # equal costs: lower index (a) wins
        mismatches.append(float(planner_a != closed_a))
    return BoundReport("preference_inequality", np.array(mismatches), np.zeros(n),
                       {"m": m, "n": n})
