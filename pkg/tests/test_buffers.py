from collections import deque

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from pyrogrid.buffers import Transition, TrajectoryBuffer, TransitionBuffer, check_action_matrix
from pyrogrid.errors import InsufficientData, ShapeError


def fill(buf, n, start_week=0, seq0=0, shape=(1, 2, 2), d_h=2):
    for k in range(n):
        x = np.full(shape, float(seq0 + k))
        buf.push(x, np.full(d_h, float(seq0 + k)), np.full(shape[1:], k % 2), start_week + k, seq0 + k)


def chi_square_ok(counts, expected):
    counts = np.asarray(counts, float)
    stat = np.sum((counts - expected) ** 2 / expected)
    dof = len(counts) - 1
    return stat < dof + 3 * np.sqrt(2 * dof)


# ---------------------------------------------------------------- FIFO
def test_capacity_two_keeps_last_two():
    buf = TransitionBuffer(capacity=2)
    for item in (1, 2, 3):
        buf.push(item)
    assert list(buf) == [2, 3]


def test_singleton_sample():
    buf = TransitionBuffer(capacity=4)
    buf.push("only")
    assert buf.sample_transitions(1, np.random.default_rng(0)) == ["only"]


def test_many_pushes_match_reference_deque():
    buf, ref = TrajectoryBuffer(capacity=100), deque(maxlen=100)
    for k in range(10_000):
        buf.push(np.array([k]), np.array([k]), np.array([0]), k, k)
        ref.append(k)
    assert len(buf) == 100
    assert [int(buf.entry(i)[0][0]) for i in range(100)] == list(ref)


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 12), st.lists(st.integers(0, 1000), max_size=60))
def test_fifo_matches_reference_for_any_sequence(cap, values):
    buf, ref = TransitionBuffer(capacity=cap), deque(maxlen=cap)
    for v in values:
        buf.push(v)
        ref.append(v)
    assert list(buf) == list(ref)


def test_shape_mismatch_rejected():
    buf = TrajectoryBuffer(4)
    fill(buf, 1)
    with pytest.raises(ShapeError):
        buf.push(np.zeros((1, 3, 3)), np.zeros(2), np.zeros((3, 3)), 5, 5)


def test_sequence_must_increase():
    buf = TrajectoryBuffer(4)
    fill(buf, 2)
    with pytest.raises(ValueError):
        buf.push(np.zeros((1, 2, 2)), np.zeros(2), np.zeros((2, 2)), 9, 1)


# ---------------------------------------------------------------- trajectories
def test_exactly_one_valid_start():
    buf = TrajectoryBuffer(64)
    fill(buf, 3 + 4)
    rng = np.random.default_rng(0)
    for _ in range(20):
        b = buf.sample_trajectory(3, 2, 4, rng)
        assert np.all(b.starts == 0)


def test_one_short_is_insufficient():
    buf = TrajectoryBuffer(64)
    fill(buf, 3 + 3)
    with pytest.raises(InsufficientData):
        buf.sample_trajectory(3, 2, 4, np.random.default_rng(0))


def test_window_contents_and_targets():
    buf = TrajectoryBuffer(64)
    fill(buf, 12)
    b = buf.sample_trajectory(3, 5, 4, np.random.default_rng(1))
    assert b.obs.shape == (5, 3, 1, 2, 2) and b.targets.shape == (5, 3, 4, 2, 2)
    for m, s in enumerate(b.starts):
        np.testing.assert_array_equal(b.obs[m, :, 0, 0, 0], [s, s + 1, s + 2])
        assert b.h0[m, 0] == s
        for j in range(3):
            for l in range(1, 5):
                assert b.targets[m, j, l - 1, 0, 0] == (s + j + l) % 2


def test_windows_never_cross_a_restart():
    buf = TrajectoryBuffer(64)
    fill(buf, 6, start_week=0, seq0=0)
    fill(buf, 6, start_week=0, seq0=6)  # second pass over the same weeks
    assert list(buf.valid_starts(5)) == [0, 1, 6, 7]


def test_start_indices_uniform():
    buf = TrajectoryBuffer(64)
    fill(buf, 20)
    b = buf.sample_trajectory(2, 10_000, 4, np.random.default_rng(3))
    counts = np.bincount(b.starts, minlength=15)
    assert len(counts) == 15
    assert chi_square_ok(counts, 10_000 / 15)


def test_sampled_batch_is_a_copy():
    buf = TrajectoryBuffer(64)
    fill(buf, 8)
    b = buf.sample_trajectory(2, 1, 4, np.random.default_rng(0))
    b.obs[...] = -1
    assert buf.entry(0)[0].min() >= 0


# ---------------------------------------------------------------- transitions
def _transition(rng, n=3):
    a = np.full((n, n), 0.1)
    np.fill_diagonal(a, 0.8)
    return Transition(rng.standard_normal(4), a, float(rng.random()), rng.standard_normal(4))


def test_whole_buffer_when_length_equals_batch():
    buf = TransitionBuffer(10)
    for k in range(5):
        buf.push(k)
    assert sorted(buf.sample_transitions(5, np.random.default_rng(0))) == [0, 1, 2, 3, 4]


def test_zero_batch_and_insufficient():
    buf = TransitionBuffer(10)
    buf.push(1)
    assert buf.sample_transitions(0, np.random.default_rng(0)) == []
    with pytest.raises(InsufficientData):
        buf.sample_transitions(2, np.random.default_rng(0))


def test_inclusion_frequencies_uniform():
    buf = TransitionBuffer(50)
    for k in range(20):
        buf.push(k)
    rng = np.random.default_rng(5)
    counts = np.zeros(20)
    for _ in range(10_000):
        batch = buf.sample_transitions(4, rng)
        assert len(set(batch)) == 4
        counts[batch] += 1
    assert chi_square_ok(counts, 10_000 * 4 / 20)


def test_samples_are_pushed_items(rng):
    buf = TransitionBuffer(8, self_weight=0.8)
    pushed = [_transition(rng) for _ in range(8)]
    for t in pushed:
        buf.push(t)
    for t in buf.sample_transitions(5, rng):
        assert any(np.array_equal(t.hbar, p.hbar) and t.reward == p.reward for p in pushed)


def test_invalid_action_rejected_at_push(rng):
    buf = TransitionBuffer(8, self_weight=0.8)
    t = _transition(rng)
    t.action[0, 0] = 0.7
    with pytest.raises(ValueError):
        buf.push(t)
    with pytest.raises(ValueError):
        check_action_matrix(np.full((2, 2), 0.5), 0.8)
