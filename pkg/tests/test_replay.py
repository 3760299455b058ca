import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy.stats import chisquare

from saac.numerics import ConfigurationError, make_rng
from saac.replay import BufferNotReady, ReplayBuffer, Transition


def tr(k, cost=0.0):
    return Transition(np.full(2, k, dtype=float), np.array([k / 10.0]), float(k), cost,
                      np.full(2, k + 1.0), k % 2 == 0)


def test_push_into_empty():
    buf = ReplayBuffer(5, 2, 1)
    buf.push(tr(1))
    assert len(buf) == 1


def test_ring_semantics():
    buf = ReplayBuffer(2, 2, 1)
    for k in (1, 2, 3):
        buf.push(tr(k))
    assert [buf[i].reward for i in range(len(buf))] == [2.0, 3.0]


def test_size_capped():
    buf = ReplayBuffer(10_000, 2, 1)
    for k in range(100_000):
        buf.push(tr(k % 7))
    assert len(buf) == 10_000


def test_single_item_sample():
    buf = ReplayBuffer(4, 2, 1)
    buf.push(tr(3, 1.0))
    b = buf.sample_batch(1, make_rng(0))
    t = tr(3, 1.0)
    assert np.array_equal(b.states[0], t.state) and b.rewards[0] == 3.0
    assert b.costs[0] == 1.0 and b.terminated[0] == 0.0


def test_not_ready():
    buf = ReplayBuffer(4, 2, 1)
    buf.push(tr(1))
    with pytest.raises(BufferNotReady):
        buf.sample_batch(2, make_rng(0))


def test_invalid_cost_rejected():
    with pytest.raises(ConfigurationError):
        ReplayBuffer(4, 2, 1).push(tr(1, 0.5))


def test_uniformity_chi_square():
    buf = ReplayBuffer(10, 2, 1)
    for k in range(10):
        buf.push(tr(k))
    rng = make_rng(2)
    idx = np.concatenate([buf.sample_indices(10, rng) for _ in range(10_000)])
    counts = np.bincount(idx, minlength=10)
    assert chisquare(counts).pvalue > 0.01


def test_equal_seeds_equal_indices():
    buf = ReplayBuffer(10, 2, 1)
    for k in range(10):
        buf.push(tr(k))
    assert np.array_equal(buf.sample_indices(8, make_rng(3)),
                          buf.sample_indices(8, make_rng(3)))


@given(st.integers(1, 30), st.integers(1, 80), st.integers(0, 1000))
def test_sampling_returns_stored_transitions(capacity, pushes, seed):
    buf = ReplayBuffer(capacity, 2, 1)
    for k in range(pushes):
        buf.push(tr(k, float(k % 3 == 0)))
    stored = {buf[i].reward for i in range(len(buf))}
    assert stored == set(float(k) for k in range(max(0, pushes - capacity), pushes))
    b = buf.sample_batch(len(buf), make_rng(seed))
    for s, a, r, c, s2, d in zip(*b):
        t = tr(int(r), float(int(r) % 3 == 0))
        assert r in stored
        assert np.array_equal(s, t.state) and np.array_equal(a, t.action)
        assert np.array_equal(s2, t.next_state) and c == t.constraint_cost
        assert bool(d) == t.terminated
