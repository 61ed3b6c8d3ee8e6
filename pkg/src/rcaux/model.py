"""Encoder, latent dynamics and budget-conditioned reachability head."""
from __future__ import annotations

import struct
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Callable, Mapping

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .env import N_ACTIONS

CKPT_MAGIC = b"RCXP"
CKPT_VERSION = 1


class CheckpointFormatError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    obs_dim: int
    d_z: int = 16
    hidden: int = 64
    n_actions: int = N_ACTIONS
    L: int = 1
    H_max: int = 12
    budget_encoding: str = "scalar"  # or "onehot"

    def __post_init__(self):
        if self.budget_encoding not in ("scalar", "onehot"):
            raise ValueError(f"unknown budget encoding {self.budget_encoding!r}")
        if self.L < 1:
            raise ValueError("context length must be >= 1")

    @property
    def budget_dim(self) -> int:
        return 1 if self.budget_encoding == "scalar" else self.H_max + 1


def _layer_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    d, hid = cfg.d_z, cfg.hidden
    dyn_in = cfg.L * d + cfg.n_actions
    head_in = 2 * d + cfg.budget_dim
    return {
        "enc.w1": (cfg.obs_dim, hid), "enc.b1": (hid,),
        "enc.w2": (hid, d), "enc.b2": (d,),
        "dyn.w1": (dyn_in, hid), "dyn.b1": (hid,),
        "dyn.w2": (hid, d), "dyn.b2": (d,),
        "reach.w1": (head_in, hid), "reach.b1": (hid,),
        "reach.w2": (hid, 1), "reach.b2": (1,),
    }


GROUPS = ("enc", "dyn", "reach")


class ParameterStore:
    """Named float64 arrays with a fixed layout and a flat-vector view."""

    def __init__(self, arrays: Mapping[str, np.ndarray]):
        self.arrays = {k: np.array(v, dtype=np.float64) for k, v in arrays.items()}

    @classmethod
    def init(cls, cfg: ModelConfig, seed: int) -> "ParameterStore":
        rng = np.random.default_rng(seed)
        shapes = _layer_shapes(cfg)
        arrays = {}
        for name, shape in shapes.items():
            fan_in = shapes[name.replace(".b", ".w")][0]
            bound = 1.0 / np.sqrt(fan_in)
            arrays[name] = rng.uniform(-bound, bound, size=shape)
        return cls(arrays)

    def __getitem__(self, name: str) -> np.ndarray:
        return self.arrays[name]

    def __iter__(self):
        return iter(self.arrays)

    def names(self, group: str | None = None) -> list[str]:
        return [k for k in self.arrays if group is None or k.startswith(group + ".")]

    @property
    def count(self) -> int:
        return int(sum(v.size for v in self.arrays.values()))

    def flat(self) -> np.ndarray:
        return np.concatenate([v.ravel() for v in self.arrays.values()])

    def with_flat(self, vec: np.ndarray) -> "ParameterStore":
        out, pos = {}, 0
        for k, v in self.arrays.items():
            out[k] = vec[pos:pos + v.size].reshape(v.shape)
            pos += v.size
        return ParameterStore(out)

    def copy(self) -> "ParameterStore":
        return ParameterStore(self.arrays)

    def tensors(self, trainable: bool = False) -> dict[str, Tensor]:
        return {k: Tensor(v, requires_grad=trainable, name=k) for k, v in self.arrays.items()}

    def all_finite(self) -> bool:
        return all(np.isfinite(v).all() for v in self.arrays.values())

    def round_to_f32(self) -> "ParameterStore":
        return ParameterStore({k: v.astype(np.float32).astype(np.float64) for k, v in self.arrays.items()})


def _mlp(p, prefix: str, x) -> Tensor:
    h = ag.tanh(ag.matmul(x, p[prefix + ".w1"]) + p[prefix + ".b1"])
    return ag.matmul(h, p[prefix + ".w2"]) + p[prefix + ".b2"]


class WorldModel:
    """Model weights plus the forward maps.

    Every forward method takes an optional ``p`` mapping of parameter
    tensors; training passes taped tensors there, inference leaves it out.
    """

    def __init__(self, cfg: ModelConfig, params: ParameterStore | None = None, seed: int = 0):
        self.cfg = cfg
        self.params = params if params is not None else ParameterStore.init(cfg, seed)
        shapes = _layer_shapes(cfg)
        for k, shape in shapes.items():
            if self.params[k].shape != shape:
                raise ValueError(f"parameter {k} has shape {self.params[k].shape}, expected {shape}")

    def _p(self, p):
        return p if p is not None else self.params.arrays

    # encoder ---------------------------------------------------------------
    def encode(self, obs, p=None) -> Tensor:
        x = ag.as_tensor(obs)
        if x.shape[-1] != self.cfg.obs_dim:
            raise ValueError(f"observation dim {x.shape[-1]} != model obs_dim {self.cfg.obs_dim}")
        return _mlp(self._p(p), "enc", x)

    # dynamics --------------------------------------------------------------
    def _action_onehot(self, actions) -> np.ndarray:
        a = np.asarray(actions, dtype=np.int64)
        if a.min(initial=0) < 0 or a.max(initial=0) >= self.cfg.n_actions:
            raise ValueError("action out of range")
        return np.eye(self.cfg.n_actions)[a]

    def predict_step(self, context, actions, p=None) -> Tensor:
        """Next latent from the last ``L`` latents (list of (B, d_z)) and an action batch."""
        context = [ag.as_tensor(z) for z in context]
        if len(context) != self.cfg.L:
            raise ValueError(f"context length {len(context)} != L={self.cfg.L}")
        x = ag.concat(context + [Tensor(self._action_onehot(actions))], axis=-1)
        return context[-1] + _mlp(self._p(p), "dyn", x)

    def rollout(self, context, actions, K: int | None = None, p=None) -> list[Tensor]:
        """Open-loop rollout; step k > 1 consumes the model's own predictions.

        ``actions`` is (B, K) or (K,). Returns K latents of shape (B, d_z).
        """
        actions = np.asarray(actions)
        K = actions.shape[-1] if K is None else K
        if K < 1:
            raise ValueError("rollout length must be >= 1")
        window = [ag.as_tensor(z) for z in context]
        out = []
        for k in range(K):
            z = self.predict_step(window[-self.cfg.L:], actions[..., k], p)
            out.append(z)
            window.append(z)
        return out

    # reachability head -----------------------------------------------------
    def _budget_features(self, h, n: int) -> np.ndarray:
        h = np.broadcast_to(np.asarray(h, dtype=np.float64), (n,))
        if (h < 0).any():
            raise ValueError("budget must be non-negative")
        if self.cfg.budget_encoding == "scalar":
            return (h / self.cfg.H_max)[:, None]
        idx = np.minimum(h.astype(np.int64), self.cfg.H_max)
        return np.eye(self.cfg.H_max + 1)[idx]

    def reach_logit(self, z, z_target, h, p=None) -> Tensor:
        """Logits for (B, d_z) sources and targets at budgets ``h`` (scalar or (B,))."""
        z, z_target = ag.as_tensor(z), ag.as_tensor(z_target)
        n = z.shape[0]
        if z_target.shape[0] != n and not z_target.requires_grad:
            z_target = Tensor(np.broadcast_to(z_target.data, (n, z_target.shape[-1])))
        x = ag.concat([z, z_target, Tensor(self._budget_features(h, n))], axis=-1)
        return ag.take(_mlp(self._p(p), "reach", x), (slice(None), 0))

    def reach_score(self, z, z_target, h, p=None) -> Tensor:
        return ag.sigmoid(self.reach_logit(z, z_target, h, p))

    # convenience wrappers returning numpy ---------------------------------
    def encode_np(self, obs) -> np.ndarray:
        return self.encode(obs).data

    def reach_score_np(self, z, z_target, h) -> np.ndarray:
        return self.reach_score(z, z_target, h).data


# spec-level functional entry points


def encode(model: WorldModel, obs) -> np.ndarray:
    return model.encode(np.asarray(obs, dtype=np.float64)).data


def predict_step(model: WorldModel, context, action) -> np.ndarray:
    ctx = [np.atleast_2d(z) for z in context]
    out = model.predict_step(ctx, np.atleast_1d(action)).data
    return out[0] if np.ndim(context[0]) == 1 else out


def rollout_open_loop(model: WorldModel, context, actions, K: int) -> list[np.ndarray]:
    if K < 1:
        raise ValueError("K must be >= 1")
    single = np.ndim(context[0]) == 1
    ctx = [np.atleast_2d(z) for z in context]
    acts = np.asarray(actions)[..., :K]
    if single:
        acts = acts[None]
    outs = model.rollout(ctx, acts, K)
    return [o.data[0] if single else o.data for o in outs]


def reachability_logit(model: WorldModel, z, z_target, h) -> float | np.ndarray:
    single = np.ndim(z) == 1
    out = model.reach_logit(np.atleast_2d(np.asarray(z, float)),
                            np.atleast_2d(np.asarray(z_target, float)), h).data
    return float(out[0]) if single else out


def reachability_score(model: WorldModel, z, z_target, h) -> float | np.ndarray:
    logit = reachability_logit(model, z, z_target, h)
    out = ag._sigmoid(np.atleast_1d(np.asarray(logit, dtype=float)))
    return float(out[0]) if np.ndim(logit) == 0 else out


# checkpoint I/O -----------------------------------------------------------


def save_checkpoint(model: WorldModel, path, extra: Mapping[str, str] | None = None) -> None:
    hyper = {f.name: getattr(model.cfg, f.name) for f in fields(model.cfg)}
    hyper.update(extra or {})
    block = "".join(f"{k}={v}\n" for k, v in hyper.items()).encode()
    buf = bytearray(CKPT_MAGIC)
    buf += struct.pack("<II", CKPT_VERSION, len(block)) + block
    buf += struct.pack("<I", len(model.params.arrays))
    for name, arr in model.params.arrays.items():
        nb = name.encode()
        buf += struct.pack("<H", len(nb)) + nb
        buf += struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
        buf += np.ascontiguousarray(arr, dtype="<f4").tobytes()
    Path(path).write_bytes(bytes(buf))


def load_checkpoint(path) -> tuple[WorldModel, dict[str, str]]:
    raw = Path(path).read_bytes()
    if raw[:4] != CKPT_MAGIC:
        raise CheckpointFormatError("bad magic: not a checkpoint")
    off = 4

    def take(n):
        nonlocal off
        if off + n > len(raw):
            raise CheckpointFormatError("checkpoint truncated")
        chunk = raw[off:off + n]
        off += n
        return chunk

    version, blen = struct.unpack("<II", take(8))
    if version != CKPT_VERSION:
        raise CheckpointFormatError(f"checkpoint version {version} != {CKPT_VERSION}")
    hyper = dict(line.split("=", 1) for line in take(blen).decode().splitlines() if line)
    (n,) = struct.unpack("<I", take(4))
    arrays = {}
    for _ in range(n):
        (ln,) = struct.unpack("<H", take(2))
        name = take(ln).decode()
        (ndim,) = struct.unpack("<B", take(1))
        shape = struct.unpack(f"<{ndim}I", take(4 * ndim))
        size = int(np.prod(shape)) if shape else 1
        arrays[name] = np.frombuffer(take(4 * size), dtype="<f4").reshape(shape).astype(np.float64)
    types = {f.name: f.type for f in fields(ModelConfig)}
    kwargs = {}
    for k, v in hyper.items():
        if k in types:
            kwargs[k] = v if k == "budget_encoding" else int(v)
    cfg = ModelConfig(**kwargs)
    extra = {k: v for k, v in hyper.items() if k not in types}
    return WorldModel(cfg, ParameterStore(arrays)), extra


# finite differences -------------------------------------------------------


@dataclass
class GradCheckReport:
    names: list[str]
    max_rel_error: dict[str, float]
    tolerance: float

    @property
    def worst(self) -> float:
        return max(self.max_rel_error.values(), default=0.0)

    @property
    def passed(self) -> bool:
        return self.worst < self.tolerance


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-3) -> np.ndarray:
    """|a - n| / max(|a|, |n|, floor); the floor keeps near-zero entries from dominating."""
    scale = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / scale


def numeric_gradient(loss_fn: Callable[[ParameterStore], float], params: ParameterStore,
                     step: float = 1e-4) -> dict[str, np.ndarray]:
    """Central differences of ``loss_fn`` for every parameter entry."""
    grads = {}
    for name, arr in params.arrays.items():
        g = np.zeros_like(arr)
        flat = arr.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            fp = loss_fn(params)
            flat[i] = orig - step
            fm = loss_fn(params)
            flat[i] = orig
            gflat[i] = (fp - fm) / (2.0 * step)
        grads[name] = g
    return grads


def finite_difference_check(params: ParameterStore,
                            loss_fn: Callable[[ParameterStore], float],
                            grad_fn: Callable[[ParameterStore], Mapping[str, np.ndarray]],
                            step: float = 1e-4, tolerance: float = 1e-4) -> GradCheckReport:
    """Compare ``grad_fn`` against central differences of ``loss_fn``."""
    analytic = grad_fn(params)
    numeric = numeric_gradient(loss_fn, params, step)
    errs = {k: float(relative_error(analytic[k], numeric[k]).max(initial=0.0)) for k in params.arrays}
    return GradCheckReport(list(params.arrays), errs, tolerance)
