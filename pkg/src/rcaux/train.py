"""Training objectives and the optimisation loop."""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import autograd as ag
from .autograd import GradientTape, Tensor
from .data import (
    Dataset,
    Origin,
    PairCounts,
    ReachPair,
    Segment,
    SegmentSampler,
    make_predicted_pairs,
    make_reachability_pairs,
)
from .model import ModelConfig, ParameterStore, WorldModel

log = logging.getLogger(__name__)

MODES = ("rc_aux", "one_step_baseline")
BCE_CLIP = 1e-7
METRIC_FIELDS = ("epoch", "loss_total", "loss_mh", "loss_reach_enc", "loss_reach_pred",
                 "loss_reg", "grad_norm")


class TrainingDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class LossWeights:
    w: tuple[float, ...] | None = None  # horizon weights; None means uniform 1/K
    alpha: float = 0.1
    beta: float = 1.0
    omega0: float = 1.0
    omega1: float = 1.0
    rho_pred: float = 0.5

    def horizon(self, K: int) -> np.ndarray:
        w = np.full(K, 1.0 / K) if self.w is None else np.asarray(self.w, dtype=np.float64)
        if len(w) != K:
            raise ValueError(f"need {K} horizon weights, got {len(w)}")
        return w

    def __post_init__(self):
        vals = [self.alpha, self.beta, self.omega0, self.omega1, self.rho_pred, *(self.w or ())]
        if any(v < 0 for v in vals):
            raise ValueError("loss weights must be non-negative")


@dataclass(frozen=True)
class TrainConfig:
    K: int = 6
    L: int = 1
    H_max: int = 12
    batch_size: int = 64
    lr: float = 1e-3
    optimizer: str = "adam"
    epochs: int = 30
    steps_per_epoch: int = 100
    seed: int = 0
    mode: str = "rc_aux"
    hard_negatives: bool = True
    batch_negatives: int = 1  # cross-trajectory negatives per anchor
    pred_pairs_per_row: int = 2
    d_z: int = 16
    hidden: int = 64
    budget_encoding: str = "scalar"
    reg_slices: int = 32  # random projections for the regulariser; 0 = coordinate axes

    def __post_init__(self):
        if self.reg_slices < 0 or self.batch_negatives < 0:
            raise ValueError("reg_slices and batch_negatives must be >= 0")
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.K < 1:
            raise ValueError("K must be >= 1")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")

    def resolved(self) -> "TrainConfig":
        """Baseline mode is the one-step objective: K forced to 1."""
        return replace(self, K=1) if self.mode == "one_step_baseline" else self

    def model_config(self, obs_dim: int) -> ModelConfig:
        return ModelConfig(obs_dim=obs_dim, d_z=self.d_z, hidden=self.hidden, L=self.L,
                           H_max=self.H_max, budget_encoding=self.budget_encoding)


def resolve_weights(cfg: TrainConfig, weights: LossWeights) -> LossWeights:
    if cfg.mode == "one_step_baseline":
        return replace(weights, beta=0.0, w=None)
    return weights


# --- individual losses ----------------------------------------------------


def loss_mh(predicted, targets, w) -> Tensor:
    """Sum_k w_k ||pred_k - target_k||^2, averaged over the batch rows.

    ``predicted``/``targets`` are length-K lists of (B, d) tensors or arrays.
    """
    if len(predicted) != len(targets):
        raise ValueError("prediction and target horizons differ")
    w = np.asarray(w, dtype=np.float64)
    if len(w) != len(predicted):
        raise ValueError("horizon weights do not match K")
    total = None
    for wk, zh, z in zip(w, predicted, targets):
        diff = ag.sub(zh, z)
        per_row = ag.sum(ag.square(diff), axis=-1)
        term = ag.mul(ag.mean(per_row), wk)
        total = term if total is None else total + term
    return total


def weighted_bce(logits, labels, omega0: float = 1.0, omega1: float = 1.0) -> Tensor:
    y = np.asarray(labels, dtype=np.float64)
    wts = np.where(y > 0.5, omega1, omega0)
    return ag.mean(ag.mul(ag.bce_with_logits(logits, y, BCE_CLIP), wts))


def loss_reach(logits_enc, labels_enc, logits_pred=None, labels_pred=None,
               weights: LossWeights = LossWeights()) -> tuple[Tensor, Tensor, Tensor]:
    """Class-weighted BCE over encoded pairs plus rho_pred times the predicted-pair mean.

    Returns ``(total, encoded_term, predicted_term)``.
    """
    if np.size(labels_enc) == 0:
        raise ValueError("encoded pair set is empty")
    enc = weighted_bce(logits_enc, labels_enc, weights.omega0, weights.omega1)
    if labels_pred is None or np.size(labels_pred) == 0:
        pred = Tensor(0.0)
    else:
        pred = weighted_bce(logits_pred, labels_pred, weights.omega0, weights.omega1)
    return enc + ag.mul(pred, weights.rho_pred), enc, pred


def loss_reg(latents, directions: np.ndarray | None = None) -> Tensor:
    """Mean squared per-dimension batch mean plus mean squared (variance - 1).

    Stand-in latent regulariser; the variance is the population variance.
    With ``directions`` (d, M) the moments are taken along those projections
    instead of the coordinate axes. Unit directions drawn afresh each step pull
    the whole covariance toward the identity, which the axis-wise form cannot
    do (16 copies of one feature satisfy it).
    """
    z = ag.as_tensor(latents)
    if z.shape[0] < 2:
        raise ValueError("regulariser needs at least two latents")
    if directions is not None:
        z = ag.matmul(z, directions)
    mu = ag.mean(z, axis=0)
    centered = ag.sub(z, mu)
    var = ag.mean(ag.square(centered), axis=0)
    return ag.mean(ag.square(mu)) + ag.mean(ag.square(ag.sub(var, 1.0)))


# --- batch objective ------------------------------------------------------


@dataclass
class Batch:
    """Everything one objective evaluation needs, fixed ahead of time."""

    segments: list[Segment]
    enc_pairs: list[ReachPair]
    pred_pairs: list[ReachPair]
    pair_target_obs: np.ndarray  # (n_enc_pairs, obs_dim)
    pair_source_rows: np.ndarray  # batch row of each encoded pair's anchor
    reg_directions: np.ndarray | None = None  # (d_z, M) unit columns, or None for axes


def build_batch(dataset: Dataset, segments: list[Segment], cfg: TrainConfig,
                rng: np.random.Generator, with_reach: bool = True) -> Batch:
    enc_pairs, pred_pairs = [], []
    if with_reach:
        counts = PairCounts(batch=cfg.batch_negatives)
        enc_pairs = make_reachability_pairs(segments, dataset, cfg.H_max, counts,
                                            hard_negatives=cfg.hard_negatives, rng=rng)
        shape = (len(segments), cfg.K, 1)
        pred_pairs = make_predicted_pairs(np.empty(shape), np.empty(shape), cfg.K, cfg.H_max,
                                          per_row=cfg.pred_pairs_per_row, rng=rng,
                                          hard_negatives=cfg.hard_negatives)
    row_of = {(s.traj, s.t): b for b, s in enumerate(segments)}
    tgt = (np.stack([dataset[p.target[0]].observations[p.target[1]] for p in enc_pairs])
           if enc_pairs else np.zeros((0, dataset.obs_dim)))
    rows = np.array([row_of[p.source] for p in enc_pairs], dtype=np.int64)
    dirs = None
    if cfg.reg_slices > 0:
        dirs = rng.standard_normal((cfg.d_z, cfg.reg_slices))
        dirs /= np.linalg.norm(dirs, axis=0, keepdims=True)
    return Batch(segments, enc_pairs, pred_pairs, tgt, rows, dirs)


@dataclass
class LossParts:
    total: Tensor
    mh: Tensor
    reach: Tensor
    reach_enc: Tensor
    reach_pred: Tensor
    reg: Tensor

    def values(self) -> dict[str, float]:
        return {"loss_total": float(self.total.data), "loss_mh": float(self.mh.data),
                "loss_reach_enc": float(self.reach_enc.data),
                "loss_reach_pred": float(self.reach_pred.data), "loss_reg": float(self.reg.data)}


def total_loss(model: WorldModel, batch: Batch, weights: LossWeights, p=None,
               K: int | None = None, pred_sources: np.ndarray | None = None) -> LossParts:
    """mh + alpha * reg + beta * reach on one prepared batch.

    Predicted-pair sources are stop-gradient rollout latents. ``pred_sources``
    (B, K, d) pins them to given values, which is what a finite-difference
    check needs to see the same function the analytic gradient differentiates.
    """
    segs = batch.segments
    B = len(segs)
    K = segs[0].K if K is None else K
    L = model.cfg.L
    ctx_obs = np.stack([s.context_obs for s in segs])  # (B, L, D)
    tgt_obs = np.stack([s.target_obs for s in segs])  # (B, K, D)
    context = [model.encode(ctx_obs[:, l], p) for l in range(L)]
    z_tgt = model.encode(tgt_obs.reshape(B * K, -1), p)
    rows = np.arange(B) * K
    targets = [ag.take(z_tgt, rows + k) for k in range(K)]
    actions = np.stack([s.future_actions for s in segs])
    preds = model.rollout(context, actions, K, p)

    mh = loss_mh(preds, targets, weights.horizon(K))
    latents = [*context, z_tgt]

    zero = Tensor(0.0)
    reach = reach_enc = reach_pred = zero
    if weights.beta > 0 and batch.enc_pairs:
        z_pair_tgt = model.encode(batch.pair_target_obs, p)
        latents.append(z_pair_tgt)
        src = ag.take(context[-1], batch.pair_source_rows)
        h = np.array([q.h for q in batch.enc_pairs])
        y = np.array([q.y for q in batch.enc_pairs])
        logits_enc = model.reach_logit(src, z_pair_tgt, h, p)
        logits_pred, y_pred = None, None
        if batch.pred_pairs:
            pred_stack = (np.stack([z.data for z in preds], axis=1)  # (B, K, d), stop-gradient
                          if pred_sources is None else pred_sources)
            prow = np.array([q.source[0] for q in batch.pred_pairs])
            pk = np.array([q.source[1] for q in batch.pred_pairs])
            pl = np.array([q.target[1] for q in batch.pred_pairs])
            psrc = ag.stop_gradient(Tensor(pred_stack[prow, pk - 1]))
            ptgt = ag.take(z_tgt, prow * K + pl - 1)
            ph = np.array([q.h for q in batch.pred_pairs])
            y_pred = np.array([q.y for q in batch.pred_pairs])
            logits_pred = model.reach_logit(psrc, ptgt, ph, p)
        reach, reach_enc, reach_pred = loss_reach(logits_enc, y, logits_pred, y_pred, weights)
    reg = loss_reg(ag.concat(latents, axis=0), batch.reg_directions)
    total = mh + ag.mul(reg, weights.alpha) + ag.mul(reach, weights.beta)
    return LossParts(total, mh, reach, reach_enc, reach_pred, reg)


def loss_and_grad(model: WorldModel, batch: Batch, weights: LossWeights,
                  params: ParameterStore | None = None):
    params = params if params is not None else model.params
    p = params.tensors(trainable=True)
    with GradientTape() as tape:
        parts = total_loss(model, batch, weights, p)
    grads = tape.gradient(parts.total, p)
    return parts, grads


# --- optimiser ------------------------------------------------------------


class Adam:
    def __init__(self, params: ParameterStore, lr: float = 1e-3, b1: float = 0.9,
                 b2: float = 0.999, eps: float = 1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, b1, b2, eps
        self.m = {k: np.zeros_like(v) for k, v in params.arrays.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.arrays.items()}
        self.t = 0

    def step(self, params: ParameterStore, grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for k, g in grads.items():
            self.m[k] = self.b1 * self.m[k] + (1 - self.b1) * g
            self.v[k] = self.b2 * self.v[k] + (1 - self.b2) * g * g
            params.arrays[k] -= self.lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)


class SGD:
    def __init__(self, params: ParameterStore, lr: float = 1e-2):
        self.lr = lr

    def step(self, params: ParameterStore, grads: dict[str, np.ndarray]) -> None:
        for k, g in grads.items():
            params.arrays[k] -= self.lr * g


def make_optimizer(name: str, params: ParameterStore, lr: float):
    return Adam(params, lr) if name == "adam" else SGD(params, lr)


def grad_norm(grads: dict[str, np.ndarray]) -> float:
    return float(np.sqrt(sum(float((g * g).sum()) for g in grads.values())))


# --- loop -----------------------------------------------------------------


@dataclass
class FitResult:
    model: WorldModel
    metrics: list[dict[str, float]] = field(default_factory=list)


def fit(dataset: Dataset, config: TrainConfig, weights: LossWeights = LossWeights(),
        metrics_path=None, model: WorldModel | None = None) -> FitResult:
    """Seeded training run. Returns the model (weights rounded to float32) and per-epoch metrics."""
    cfg = config.resolved()
    weights = resolve_weights(cfg, weights)
    if model is None:
        model = WorldModel(cfg.model_config(dataset.obs_dim), seed=cfg.seed)
    rng = np.random.default_rng([cfg.seed, 1])
    sampler = SegmentSampler(dataset, cfg.L, cfg.K, seed=0)
    sampler.rng = rng
    opt = make_optimizer(cfg.optimizer, model.params, cfg.lr)
    metrics = []
    for epoch in range(cfg.epochs):
        sums: dict[str, float] = {}
        for _ in range(cfg.steps_per_epoch):
            batch = build_batch(dataset, sampler.batch(cfg.batch_size), cfg, rng,
                                with_reach=weights.beta > 0)
            parts, grads = loss_and_grad(model, batch, weights)
            vals = parts.values()
            if not np.isfinite(vals["loss_total"]) or not all(np.isfinite(g).all() for g in grads.values()):
                raise TrainingDiverged(f"non-finite loss at epoch {epoch}: {vals}")
            vals["grad_norm"] = grad_norm(grads)
            opt.step(model.params, grads)
            for k, v in vals.items():
                sums[k] = sums.get(k, 0.0) + v
        row = {"epoch": epoch, **{k: v / cfg.steps_per_epoch for k, v in sums.items()}}
        metrics.append(row)
        log.info("epoch %d total=%.5f mh=%.5f reach=%.5f", epoch, row["loss_total"],
                 row["loss_mh"], row["loss_reach_enc"])
    model.params = model.params.round_to_f32()
    if metrics_path is not None:
        write_metrics(metrics, metrics_path)
    return FitResult(model, metrics)


def write_metrics(metrics: list[dict[str, float]], path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(METRIC_FIELDS)
        for row in metrics:
            writer.writerow([row["epoch"]] + [repr(float(row[k])) for k in METRIC_FIELDS[1:]])


def fit_reach_head(model: WorldModel, src: np.ndarray, tgt: np.ndarray, h: np.ndarray,
                   y: np.ndarray, steps: int = 2000, lr: float = 1e-2) -> list[float]:
    """Train only the reachability head on fixed latent inputs; returns the loss trace."""
    names = model.params.names("reach")
    opt = Adam(model.params, lr)
    trace = []
    for _ in range(steps):
        p = model.params.tensors(trainable=False)
        for k in names:
            p[k].requires_grad = True
        with GradientTape() as tape:
            loss = weighted_bce(model.reach_logit(src, tgt, h, p), y)
        grads = tape.gradient(loss, {k: p[k] for k in names})
        opt.step(model.params, grads)
        trace.append(float(loss.data))
    return trace
