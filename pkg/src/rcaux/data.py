"""Offline trajectories, segment sampling and reachability-pair construction."""
from __future__ import annotations

import enum
import struct
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .env import (
    N_ACTIONS,
    UNREACHABLE,
    GridSpec,
    distance_matrix,
    observe,
    spec_from_text,
    spec_to_text,
    step,
)

MAGIC = b"RCAX"
VERSION = 1
POLICIES = ("random", "waypoint", "shortest")


class Origin(enum.IntEnum):
    POS = 0
    HARD_NEG = 1
    BATCH_NEG = 2
    PRED = 3


class BatchNegativeUnavailable(UserWarning):
    """Raised as a warning when a batch holds a single trajectory."""


class DatasetFormatError(ValueError):
    pass


@dataclass
class Trajectory:
    observations: np.ndarray  # (T, obs_dim) float32
    actions: np.ndarray  # (T-1,) int64
    states: np.ndarray  # (T, 2) int64, oracle side only

    def __post_init__(self):
        if len(self.actions) != len(self.observations) - 1 or len(self.states) != len(self.observations):
            raise ValueError("trajectory lengths inconsistent")

    def __len__(self) -> int:
        return len(self.observations)


@dataclass
class Dataset:
    spec: GridSpec
    trajectories: list[Trajectory]

    def __len__(self) -> int:
        return len(self.trajectories)

    def __getitem__(self, i: int) -> Trajectory:
        return self.trajectories[i]

    @property
    def obs_dim(self) -> int:
        return self.trajectories[0].observations.shape[1]

    def state_index(self, traj: int, t: int) -> int:
        r, c = self.trajectories[traj].states[t]
        return int(r) * self.spec.width + int(c)


@dataclass(frozen=True)
class Segment:
    traj: int
    t: int  # index of the last context observation
    context_obs: np.ndarray  # (L, obs_dim)
    future_actions: np.ndarray  # (K,)
    target_obs: np.ndarray  # (K, obs_dim)

    @property
    def L(self) -> int:
        return len(self.context_obs)

    @property
    def K(self) -> int:
        return len(self.future_actions)


@dataclass(frozen=True)
class ReachPair:
    """One labelled reachability query.

    For encoded origins ``source``/``target`` are ``(trajectory, time)``; for
    PRED they are ``(batch row, rollout step)`` with the source taken from the
    stop-gradient rollout and the target from the encoded future.
    """

    source: tuple[int, int]
    target: tuple[int, int]
    h: int
    y: int
    origin: Origin
    offset: int | None = None
    stop_gradient: bool = False


# --- generation -----------------------------------------------------------


def _greedy_action(spec: GridSpec, dist_to: np.ndarray, pos: dict, cell, rng) -> int:
    best, best_d = [], None
    for a in range(N_ACTIONS - 1):
        d = dist_to[pos[step(spec, cell, a)]]
        if d == UNREACHABLE:
            continue
        if best_d is None or d < best_d:
            best, best_d = [a], d
        elif d == best_d:
            best.append(a)
    return int(best[rng.integers(len(best))])


def generate_trajectories(spec: GridSpec, policy: str, n: int, T: int, seed: int,
                          epsilon: float = 0.3) -> Dataset:
    """Roll out ``n`` trajectories of length ``T`` under a behavior policy.

    ``random`` draws actions uniformly; ``waypoint`` walks shortest paths
    toward random waypoints and takes a uniform action with prob ``epsilon``;
    ``shortest`` walks one shortest path between two cells exactly ``T - 1``
    steps apart, so every observed offset is a true hitting time (the
    data are 1-competitive).
    """
    if n < 1 or T < 1:
        raise ValueError("n and T must be positive")
    if policy not in POLICIES:
        raise ValueError(f"unknown policy {policy!r}")
    rng = np.random.default_rng(seed)
    cells = spec.free_cells
    dist = distance_matrix(spec) if policy != "random" else None
    pos = {c: i for i, c in enumerate(cells)}
    if policy == "shortest":
        ends = np.argwhere(dist == T - 1)  # (start, goal) index pairs
        if len(ends) == 0:
            raise ValueError(f"no two cells of {spec.name} are {T - 1} steps apart")
    trajs = []
    for _ in range(n):
        s = cells[rng.integers(len(cells))]
        states, actions = [s], []
        waypoint = cells[rng.integers(len(cells))]
        if policy == "shortest":
            i, j = ends[rng.integers(len(ends))]
            s, waypoint = cells[i], cells[j]
            states = [s]
        for _ in range(T - 1):
            if policy == "shortest":
                a = _greedy_action(spec, dist[:, pos[waypoint]], pos, s, rng)
            elif policy == "random" or rng.random() < epsilon:
                a = int(rng.integers(N_ACTIONS))
            else:
                while waypoint == s:
                    waypoint = cells[rng.integers(len(cells))]
                a = _greedy_action(spec, dist[:, pos[waypoint]], pos, s, rng)
            s = step(spec, s, a)
            states.append(s)
            actions.append(a)
        obs = np.stack([observe(spec, c) for c in states])
        trajs.append(Trajectory(obs, np.asarray(actions, dtype=np.int64),
                                np.asarray(states, dtype=np.int64).reshape(-1, 2)))
    return Dataset(spec, trajs)


def replay_consistent(spec: GridSpec, traj: Trajectory) -> bool:
    for t, a in enumerate(traj.actions):
        if tuple(traj.states[t + 1]) != step(spec, tuple(traj.states[t]), int(a)):
            return False
    return all(np.array_equal(traj.observations[t], observe(spec, tuple(s)))
               for t, s in enumerate(traj.states))


# --- segments -------------------------------------------------------------


class SegmentSampler:
    """Uniform sampler over all valid (trajectory, t) windows."""

    def __init__(self, dataset: Dataset, L: int, K: int, seed: int):
        if L < 1 or K < 1:
            raise ValueError("L and K must be positive")
        self.dataset, self.L, self.K = dataset, L, K
        counts = np.array([max(len(tr) - L - K + 1, 0) for tr in dataset.trajectories])
        if counts.sum() == 0:
            raise ValueError("segment infeasible: trajectories shorter than L+K")
        self._cum = np.cumsum(counts)
        self.rng = np.random.default_rng(seed)

    @property
    def n_windows(self) -> int:
        return int(self._cum[-1])

    def locate(self, flat: int) -> tuple[int, int]:
        traj = int(np.searchsorted(self._cum, flat, side="right"))
        start = flat - (self._cum[traj - 1] if traj else 0)
        return traj, int(start) + self.L - 1

    def segment(self, traj: int, t: int) -> Segment:
        tr = self.dataset[traj]
        L, K = self.L, self.K
        return Segment(traj, t, tr.observations[t - L + 1:t + 1],
                       tr.actions[t:t + K], tr.observations[t + 1:t + K + 1])

    def sample_index(self, size: int | None = None):
        flat = self.rng.integers(self.n_windows, size=size)
        if size is None:
            return self.locate(int(flat))
        return [self.locate(int(f)) for f in flat]

    def sample(self) -> Segment:
        return self.segment(*self.sample_index())

    def batch(self, size: int) -> list[Segment]:
        return [self.segment(tr, t) for tr, t in self.sample_index(size)]


def sample_segment(dataset: Dataset, L: int, K: int, seed: int) -> Segment:
    return SegmentSampler(dataset, L, K, seed).sample()


# --- reachability pairs ---------------------------------------------------


@dataclass(frozen=True)
class PairCounts:
    mixed: int = 2  # same-trajectory pairs with a free budget draw
    hard: int = 1  # forced h < offset
    batch: int = 1  # cross-trajectory negatives


def make_reachability_pairs(batch: list[Segment], dataset: Dataset, H_max: int,
                            counts: PairCounts = PairCounts(), seed: int = 0,
                            hard_negatives: bool = True,
                            rng: np.random.Generator | None = None) -> list[ReachPair]:
    """Labelled encoded-latent pairs anchored at each segment's last context step.

    Same-trajectory targets lie 1..H_max steps ahead (offset 0 is never drawn).
    With ``hard_negatives=False`` budgets are drawn from [offset, H_max] so no
    same-trajectory pair is ever labelled unreachable.
    """
    if H_max < 1:
        raise ValueError("H_max must be >= 1")
    rng = rng if rng is not None else np.random.default_rng(seed)
    trajs = sorted({seg.traj for seg in batch})
    if len(trajs) < 2 and counts.batch:
        warnings.warn("batch holds one trajectory; no batch negatives", BatchNegativeUnavailable)
    pairs = []
    for seg in batch:
        i = seg.t
        T = len(dataset[seg.traj])
        max_off = min(H_max, T - 1 - i)
        if max_off >= 1:
            for _ in range(counts.mixed):
                off = int(rng.integers(1, max_off + 1))
                if hard_negatives:
                    h = int(rng.integers(0, H_max + 1))
                else:
                    h = int(rng.integers(off, H_max + 1))
                y = int(h >= off)
                pairs.append(ReachPair((seg.traj, i), (seg.traj, i + off), h, y,
                                       Origin.POS if y else Origin.HARD_NEG, off))
            if hard_negatives:
                for _ in range(counts.hard):
                    off = int(rng.integers(1, max_off + 1))
                    h = int(rng.integers(0, off))
                    pairs.append(ReachPair((seg.traj, i), (seg.traj, i + off), h, 0,
                                           Origin.HARD_NEG, off))
        others = [tr for tr in trajs if tr != seg.traj]
        if others:
            for _ in range(counts.batch):
                other = others[int(rng.integers(len(others)))]
                j = int(rng.integers(len(dataset[other])))
                h = int(rng.integers(0, H_max + 1))
                pairs.append(ReachPair((seg.traj, i), (other, j), h, 0, Origin.BATCH_NEG))
    return pairs


def make_predicted_pairs(predicted: np.ndarray, targets: np.ndarray, K: int, H_max: int,
                         seed: int = 0, per_row: int = 2,
                         rng: np.random.Generator | None = None,
                         hard_negatives: bool = True) -> list[ReachPair]:
    """Pairs from a rollout step k to an encoded target step l, 0 < k < l <= K.

    ``predicted`` and ``targets`` are (B, K, d) arrays; only their shapes are
    used here, values are looked up when the loss is built. Budgets are drawn
    from {0..min(K, H_max)} which covers every planner-time remaining budget;
    with ``hard_negatives=False`` only from {offset..min(K, H_max)}.
    """
    if K < 2:
        return []
    if predicted.shape[:2] != targets.shape[:2] or predicted.shape[1] < K:
        raise ValueError("predicted/targets shape mismatch")
    rng = rng if rng is not None else np.random.default_rng(seed)
    h_hi = min(K, H_max)
    pairs = []
    for row in range(predicted.shape[0]):
        for _ in range(per_row):
            k = int(rng.integers(1, K))
            ell = int(rng.integers(k + 1, K + 1))
            off = ell - k
            h = int(rng.integers(0 if hard_negatives else min(off, h_hi), h_hi + 1))
            pairs.append(ReachPair((row, k), (row, ell), h, int(h >= off), Origin.PRED, off,
                                   stop_gradient=True))
    return pairs


def pair_invariant_ok(p: ReachPair) -> bool:
    if p.origin == Origin.POS:
        return p.source[0] == p.target[0] and p.offset is not None and p.h >= p.offset and p.y == 1
    if p.origin == Origin.HARD_NEG:
        return p.source[0] == p.target[0] and p.offset is not None and p.h < p.offset and p.y == 0
    if p.origin == Origin.BATCH_NEG:
        return p.source[0] != p.target[0] and p.y == 0 and p.offset is None
    if p.origin == Origin.PRED:
        k, ell = p.source[1], p.target[1]
        return 0 < k < ell and p.offset == ell - k and p.y == int(p.h >= p.offset)
    return False


# --- observed offsets -----------------------------------------------------


class OffsetTable:
    """Shortest observed offset D_D between ordered ground-truth states."""

    def __init__(self, spec: GridSpec, table: np.ndarray):
        self.spec = spec
        self.table = table  # (n_cells, n_cells), -1 where never observed

    def get(self, s, g) -> int | None:
        v = int(self.table[self.spec.index(s), self.spec.index(g)])
        return None if v < 0 else v

    def __len__(self) -> int:
        return int((self.table >= 0).sum())

    def entries(self):
        src, tgt = np.nonzero(self.table >= 0)
        for a, b in zip(src, tgt):
            yield self.spec.cell(a), self.spec.cell(b), int(self.table[a, b])


def observed_offset_table(dataset: Dataset) -> OffsetTable:
    if not len(dataset):
        raise ValueError("empty dataset")
    spec = dataset.spec
    n = spec.n_cells
    big = np.iinfo(np.int64).max
    best = np.full(n * n, big, dtype=np.int64)
    for tr in dataset.trajectories:
        idx = tr.states[:, 0] * spec.width + tr.states[:, 1]
        i, j = np.triu_indices(len(idx), k=1)
        np.minimum.at(best, idx[i] * n + idx[j], j - i)
    best[best == big] = -1
    return OffsetTable(spec, best.reshape(n, n))


# --- serialization --------------------------------------------------------


def save_dataset(dataset: Dataset, path) -> None:
    buf = bytearray()
    buf += MAGIC
    buf += struct.pack("<II", VERSION, len(dataset))
    for tr in dataset.trajectories:
        T, d = tr.observations.shape
        buf += struct.pack("<II", T, d)
        buf += np.ascontiguousarray(tr.observations, dtype="<f4").tobytes()
        buf += np.asarray(tr.actions, dtype=np.uint8).tobytes()
        buf += np.asarray(tr.states, dtype="<u2").tobytes()
    text = spec_to_text(dataset.spec).encode()
    buf += b"GRID" + struct.pack("<I", len(text)) + text
    Path(path).write_bytes(bytes(buf))


def load_dataset(path) -> Dataset:
    raw = Path(path).read_bytes()
    if raw[:4] != MAGIC:
        raise DatasetFormatError("bad magic: not a dataset file")
    try:
        version, n = struct.unpack_from("<II", raw, 4)
    except struct.error:
        raise DatasetFormatError("truncated header") from None
    if version != VERSION:
        raise DatasetFormatError(f"dataset version {version} != {VERSION}")
    off = 12

    def take(nbytes):
        nonlocal off
        if off + nbytes > len(raw):
            raise DatasetFormatError("dataset length mismatch: file truncated")
        chunk = raw[off:off + nbytes]
        off += nbytes
        return chunk

    trajs = []
    for _ in range(n):
        T, d = struct.unpack("<II", take(8))
        obs = np.frombuffer(take(4 * T * d), dtype="<f4").reshape(T, d).astype(np.float32)
        acts = np.frombuffer(take(T - 1), dtype=np.uint8).astype(np.int64)
        states = np.frombuffer(take(4 * T), dtype="<u2").reshape(T, 2).astype(np.int64)
        trajs.append(Trajectory(obs, acts, states))
    if take(4) != b"GRID":
        raise DatasetFormatError("missing grid trailer")
    (length,) = struct.unpack("<I", take(4))
    spec = spec_from_text(take(length).decode())
    if off != len(raw):
        raise DatasetFormatError("trailing bytes after dataset")
    return Dataset(spec, trajs)
