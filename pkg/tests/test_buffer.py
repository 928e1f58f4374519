import numpy as np
import pytest
from scipy import stats

from clewi.buffer import EmptyBufferError, MemoryBuffer


def test_under_capacity_keeps_everything():
    buf = MemoryBuffer(5, seed=0)
    for i in range(3):
        buf.add(np.array([i], np.float32), i)
    assert len(buf) == 3 and buf.seen_count == 3
    np.testing.assert_array_equal(buf.y, [0, 1, 2])


def test_full_after_capacity_and_seen_count():
    buf = MemoryBuffer(4, seed=1)
    buf.add_batch(np.zeros((10, 2)), np.arange(10))
    assert len(buf) == 4 and buf.seen_count == 10


def test_last_survivor_probability_m1():
    k, trials = 5, 20000
    hits = 0
    for s in range(trials):
        buf = MemoryBuffer(1, seed=s)
        for i in range(k):
            buf.add(np.zeros(1), i)
        hits += buf.y[0] == k - 1
    p = 1 / k
    sigma = np.sqrt(trials * p * (1 - p))
    assert abs(hits - trials * p) < 3 * sigma


def test_marginal_retention_is_m_over_n():
    m, n, trials = 3, 12, 6000
    counts = np.zeros(n)
    for s in range(trials):
        buf = MemoryBuffer(m, seed=s)
        buf.add_batch(np.zeros((n, 1)), np.arange(n))
        counts[buf.y] += 1
    p = m / n
    sigma = np.sqrt(trials * p * (1 - p))
    assert np.all(np.abs(counts - trials * p) < 4 * sigma)


def test_class_occupancy_uniform():
    buf = MemoryBuffer(100, seed=3)
    labels = np.random.default_rng(0).permutation(np.repeat(np.arange(10), 1000))
    buf.add_batch(np.zeros((len(labels), 1)), labels)
    occ = np.bincount(buf.y, minlength=10)
    assert stats.chisquare(occ).pvalue > 0.001


def test_contents_depend_only_on_seed_and_offers():
    def fill(sample_between):
        buf = MemoryBuffer(5, seed=9)
        for i in range(40):
            buf.add(np.full(2, i, np.float32), i)
            if sample_between:
                buf.sample_batch(3)
        return buf.y.copy()

    np.testing.assert_array_equal(fill(False), fill(True))


def test_sample_batch():
    buf = MemoryBuffer(4, seed=0)
    with pytest.raises(EmptyBufferError):
        buf.sample_batch(2)
    buf.add(np.array([7.0]), 2)
    x, y, z = buf.sample_batch(4)
    np.testing.assert_array_equal(y, [2, 2, 2, 2])
    assert z is None
    b1 = MemoryBuffer(10, seed=4)
    b2 = MemoryBuffer(10, seed=4)
    for b in (b1, b2):
        b.add_batch(np.arange(10)[:, None], np.arange(10))
    np.testing.assert_array_equal(b1.sample_batch(6)[1], b2.sample_batch(6)[1])


def test_sample_frequencies_uniform():
    buf = MemoryBuffer(8, seed=0)
    buf.add_batch(np.zeros((8, 1)), np.arange(8))
    _, y, _ = buf.sample_batch(100000)
    assert stats.chisquare(np.bincount(y, minlength=8)).pvalue > 0.001


def test_logits_stored():
    buf = MemoryBuffer(3, seed=0, store_logits=True)
    buf.add_batch(np.zeros((2, 1)), [0, 1], np.array([[1.0, 2.0], [3.0, 4.0]]))
    _, _, z = buf.sample_batch(5)
    assert z.shape == (5, 2)
    with pytest.raises(ValueError):
        buf.add(np.zeros(1), 0)


def test_iterate_all():
    buf = MemoryBuffer(500, seed=0)
    with pytest.raises(EmptyBufferError):
        buf.iterate_all(32)
    buf.add_batch(np.arange(500, dtype=np.float32)[:, None], np.arange(500) % 7)
    sizes = [len(y) for _, y in buf.iterate_all(32)]
    assert sizes == [32] * 15 + [20]
    seen = np.concatenate([x[:, 0] for x, _ in buf.iterate_all(32)])
    np.testing.assert_array_equal(seen, np.arange(500))
