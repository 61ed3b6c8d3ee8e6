import warnings

import numpy as np
import pytest
from scipy import stats

from rcaux.data import (
    BatchNegativeUnavailable,
    Dataset,
    DatasetFormatError,
    Origin,
    PairCounts,
    ReachPair,
    SegmentSampler,
    Trajectory,
    generate_trajectories,
    load_dataset,
    make_predicted_pairs,
    make_reachability_pairs,
    observed_offset_table,
    pair_invariant_ok,
    replay_consistent,
    sample_segment,
    save_dataset,
)
from rcaux.env import STAY, open_grid, observe, shortest_hitting_time, wall


@pytest.fixture(scope="module")
def wall_data():
    return generate_trajectories(wall(), "waypoint", 60, 40, seed=5)


def test_generation_deterministic(wall_data):
    again = generate_trajectories(wall(), "waypoint", 60, 40, seed=5)
    for a, b in zip(wall_data.trajectories, again.trajectories):
        assert a.observations.tobytes() == b.observations.tobytes()
        assert a.actions.tobytes() == b.actions.tobytes()
        assert a.states.tobytes() == b.states.tobytes()


@pytest.mark.parametrize("policy", ["random", "waypoint", "shortest"])
def test_replay_consistent(policy):
    ds = generate_trajectories(wall(), policy, 10, 16, seed=2)
    assert all(replay_consistent(ds.spec, tr) for tr in ds.trajectories)
    assert all(len(tr) == 16 for tr in ds.trajectories)


def test_shortest_policy_offsets_are_hitting_times():
    spec = wall()
    ds = generate_trajectories(spec, "shortest", 20, 12, seed=4)
    for tr in ds.trajectories:
        cells = [tuple(map(int, s)) for s in tr.states]
        for i in range(len(cells)):
            for j in range(i, len(cells)):
                assert shortest_hitting_time(spec, cells[i], cells[j]) == j - i
    with pytest.raises(ValueError, match="steps apart"):
        generate_trajectories(spec, "shortest", 1, 40, seed=0)


def test_waypoint_policy_crosses_door():
    spec = wall()
    ds = generate_trajectories(spec, "waypoint", 200, 64, seed=0)
    (door,) = spec.doors
    through = sum(any(tuple(s) == door for s in tr.states) for tr in ds.trajectories)
    assert through / len(ds) >= 0.5


def test_segment_unique_when_tight():
    ds = generate_trajectories(open_grid(3), "random", 1, 2, seed=0)
    seg = sample_segment(ds, L=1, K=1, seed=9)
    assert (seg.traj, seg.t) == (0, 0)
    assert np.array_equal(seg.context_obs[0], ds[0].observations[0])
    assert np.array_equal(seg.target_obs[0], ds[0].observations[1])
    assert seg.future_actions[0] == ds[0].actions[0]


def test_segment_bounds(wall_data):
    sampler = SegmentSampler(wall_data, L=2, K=6, seed=1)
    for _ in range(200):
        seg = sampler.sample()
        T = len(wall_data[seg.traj])
        assert seg.t - seg.L + 1 >= 0 and seg.t + seg.K <= T - 1
        assert seg.L == 2 and seg.K == 6


def test_segment_infeasible():
    ds = generate_trajectories(open_grid(3), "random", 2, 4, seed=0)
    with pytest.raises(ValueError, match="segment infeasible"):
        SegmentSampler(ds, L=2, K=3, seed=0)


def test_segment_sampling_uniform():
    ds = generate_trajectories(open_grid(4), "random", 3, 8, seed=0)
    sampler = SegmentSampler(ds, L=1, K=2, seed=11)
    counts = {}
    for traj, t in sampler.sample_index(10_000):
        counts[(traj, t)] = counts.get((traj, t), 0) + 1
    assert len(counts) == sampler.n_windows == 3 * 6
    _, p = stats.chisquare(list(counts.values()))
    assert p > 0.001


def test_segment_sampling_deterministic(wall_data):
    a = SegmentSampler(wall_data, 1, 6, seed=4).sample_index(50)
    b = SegmentSampler(wall_data, 1, 6, seed=4).sample_index(50)
    assert a == b


def test_label_boundaries():
    assert ReachPair((0, 3), (0, 7), 4, int(4 >= 4), Origin.POS, 4).y == 1
    hard = ReachPair((0, 3), (0, 7), 3, int(3 >= 4), Origin.HARD_NEG, 4)
    assert hard.y == 0 and pair_invariant_ok(hard)


def test_pairs_satisfy_invariants(wall_data):
    sampler = SegmentSampler(wall_data, 1, 6, seed=0)
    batch = sampler.batch(32)
    pairs = make_reachability_pairs(batch, wall_data, H_max=12, seed=3)
    assert all(pair_invariant_ok(p) for p in pairs)
    for seg in batch:
        mine = [p for p in pairs if p.source == (seg.traj, seg.t)]
        assert any(p.origin == Origin.HARD_NEG for p in mine)
        assert any(p.origin == Origin.BATCH_NEG for p in mine)


def test_pairs_without_hard_negatives(wall_data):
    batch = SegmentSampler(wall_data, 1, 6, seed=0).batch(32)
    pairs = make_reachability_pairs(batch, wall_data, 12, seed=3, hard_negatives=False)
    same = [p for p in pairs if p.origin != Origin.BATCH_NEG]
    assert same and all(p.y == 1 and p.h >= p.offset for p in same)


def test_single_flip_point_per_pair(wall_data):
    batch = SegmentSampler(wall_data, 1, 6, seed=2).batch(16)
    by_pair = {}
    for seed in range(40):
        for p in make_reachability_pairs(batch, wall_data, 12, seed=seed):
            if p.origin != Origin.BATCH_NEG:
                by_pair.setdefault((p.source, p.target), {})[p.h] = p.y
    for labels in by_pair.values():
        seq = [labels[h] for h in sorted(labels)]
        assert seq == sorted(seq)  # 0...0 1...1, at most one flip


def test_batch_negative_unavailable_signalled():
    ds = generate_trajectories(open_grid(4), "random", 1, 20, seed=0)
    seg = SegmentSampler(ds, 1, 3, seed=0).sample()
    with pytest.warns(BatchNegativeUnavailable):
        pairs = make_reachability_pairs([seg], ds, 6, seed=0)
    assert pairs and not any(p.origin == Origin.BATCH_NEG for p in pairs)


def test_predicted_pairs():
    pred = np.zeros((4, 6, 3))
    pairs = make_predicted_pairs(pred, pred, K=6, H_max=12, seed=1)
    assert pairs
    for p in pairs:
        k, ell = p.source[1], p.target[1]
        assert 0 < k < ell <= 6
        assert p.stop_gradient and p.origin == Origin.PRED
        assert pair_invariant_ok(p)
    assert make_predicted_pairs(np.zeros((4, 1, 3)), np.zeros((4, 1, 3)), K=1, H_max=12) == []


def test_predicted_pairs_without_hard_negatives():
    pred = np.zeros((8, 6, 3))
    pairs = make_predicted_pairs(pred, pred, K=6, H_max=12, seed=1, hard_negatives=False)
    assert pairs and all(p.y == 1 and p.h >= p.offset for p in pairs)


@pytest.mark.parametrize("h,y", [(2, 1), (1, 0)])
def test_predicted_label(h, y):
    p = ReachPair((0, 1), (0, 3), h, int(h >= 2), Origin.PRED, 2, True)
    assert p.y == y and pair_invariant_ok(p)


def test_offset_table_revisit():
    spec = open_grid(3)
    a, b = (1, 1), (1, 2)
    states = np.array([a, b, a])
    obs = np.stack([observe(spec, tuple(s)) for s in states])
    ds = Dataset(spec, [Trajectory(obs, np.array([3, 2]), states)])
    table = observed_offset_table(ds)
    assert table.get(a, b) == 1 and table.get(b, a) == 1
    assert table.get(a, a) == 2
    assert table.get((0, 0), (2, 2)) is None


def test_offset_table_lower_bounded_by_oracle(wall_data):
    table = observed_offset_table(wall_data)
    assert len(table) > 0
    for s, g, dd in table.entries():
        assert shortest_hitting_time(wall_data.spec, s, g) <= dd


def test_dataset_round_trip(tmp_path, wall_data):
    path = tmp_path / "d.rcax"
    save_dataset(wall_data, path)
    back = load_dataset(path)
    assert back.spec == wall_data.spec
    for a, b in zip(wall_data.trajectories, back.trajectories):
        assert a.observations.tobytes() == b.observations.tobytes()
        assert np.array_equal(a.actions, b.actions) and np.array_equal(a.states, b.states)
    s1 = SegmentSampler(back, 1, 6, seed=3).sample_index(20)
    s2 = SegmentSampler(load_dataset(path), 1, 6, seed=3).sample_index(20)
    assert s1 == s2


def test_dataset_truncated_and_bad_version(tmp_path, wall_data):
    path = tmp_path / "d.rcax"
    save_dataset(wall_data, path)
    raw = path.read_bytes()
    (tmp_path / "t.rcax").write_bytes(raw[: len(raw) // 2])
    with pytest.raises(DatasetFormatError, match="truncated"):
        load_dataset(tmp_path / "t.rcax")
    (tmp_path / "v.rcax").write_bytes(raw[:4] + (7).to_bytes(4, "little") + raw[8:])
    with pytest.raises(DatasetFormatError, match="version"):
        load_dataset(tmp_path / "v.rcax")
    (tmp_path / "m.rcax").write_bytes(b"XXXX" + raw[4:])
    with pytest.raises(DatasetFormatError, match="magic"):
        load_dataset(tmp_path / "m.rcax")
