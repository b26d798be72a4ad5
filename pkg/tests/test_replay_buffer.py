import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dmrac.errors import EmptyBuffer, InsufficientData, ZeroFeature
from dmrac.numerics import make_rng
from dmrac.replay_buffer import (
    BufferEntry,
    ReplayBuffer,
    dump_csv,
    evict_svd_max,
    kernel_score,
    min_singular_after_removal,
    sample_minibatch,
    try_insert,
)


def entry(phi, x=(0.0,), y=(0.0,)):
    return BufferEntry(np.array(x, dtype=float), np.array(phi, dtype=float), np.array(y, dtype=float))


def filled(features, capacity=None, zeta=1e-12):
    features = np.asarray(features, dtype=float)
    p, k = features.shape
    buf = ReplayBuffer(capacity or p, zeta, 1, k, 1)
    buf._phis[:p] = features
    buf._xs[:p] = np.arange(p)[:, None]
    buf.size = p
    return buf


def brute_force(features):
    """Direct SVD of every remainder; ties to the lowest index."""
    best, best_i = -1.0, -1
    for i in range(features.shape[0]):
        rest = np.delete(features, i, axis=0)
        s = np.linalg.svd(rest, compute_uv=False)[-1] if rest.size else 0.0
        if s > best + 1e-9 * max(1.0, best):
            best, best_i = s, i
    return best_i


# ------------------------------------------------------------ kernel test


def test_kernel_empty_is_inf():
    assert kernel_score([1.0, 0.0], ReplayBuffer(5, 0.2, 1, 2, 1)) == float("inf")


def test_kernel_coincident_is_zero():
    assert kernel_score([0.3, 0.4], filled([[1.0, 0.0], [0.3, 0.4]])) == 0.0


def test_kernel_hand_value():
    assert kernel_score([1.0, 0.0], filled([[0.0, 1.0]])) == 2.0


def test_kernel_min_over_entries():
    buf = filled([[0.0, 1.0], [1.0, 1.0]])
    # distances^2 / ||phi||: 2 and 1
    assert kernel_score([1.0, 0.0], buf) == 1.0


def test_kernel_zero_feature():
    with pytest.raises(ZeroFeature):
        kernel_score([0.0, 0.0], filled([[1.0, 0.0]]))


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**32 - 1))
def test_kernel_order_invariant(seed):
    rng = make_rng(seed)
    feats = rng.normal(size=(int(rng.integers(1, 15)), 3))
    probe = rng.normal(size=3)
    perm = rng.permutation(len(feats))
    assert kernel_score(probe, filled(feats)) == kernel_score(probe, filled(feats[perm]))


# -------------------------------------------------------------- admission


def test_admit_far_entry():
    buf = ReplayBuffer(5, 0.2, 1, 2, 1)
    try_insert(buf, entry([0.0, 1.0]))
    assert try_insert(buf, entry([1.0, 0.0]))
    assert len(buf) == 2 and buf.log[-1].score == 2.0


def test_reject_duplicate():
    buf = ReplayBuffer(5, 0.2, 1, 2, 1)
    try_insert(buf, entry([0.0, 1.0], x=[7.0]))
    before = buf.features.copy(), buf.xs.copy()
    assert not try_insert(buf, entry([0.0, 1.0], x=[9.0]))
    assert np.array_equal(buf.features, before[0]) and np.array_equal(buf.xs, before[1])
    assert buf.rejected == 1 and not buf.log[-1].admitted


def test_zero_feature_leaves_buffer_untouched():
    buf = ReplayBuffer(5, 0.2, 1, 2, 1)
    with pytest.raises(ZeroFeature):
        try_insert(buf, entry([0.0, 0.0]))
    assert len(buf) == 0 and buf.log == []


def test_full_buffer_evicts_exactly_one():
    buf = ReplayBuffer(3, 0.2, 1, 2, 1)
    for phi in ([1.0, 0.0], [0.0, 1.0], [-1.0, 0.0]):
        try_insert(buf, entry(phi))
    assert try_insert(buf, entry([0.0, -1.0]))
    assert len(buf) == 3 and buf.log[-1].evicted >= 0


def test_threshold_override():
    buf = ReplayBuffer(5, 0.2, 1, 2, 1)
    try_insert(buf, entry([1.0, 0.0]))
    assert not try_insert(buf, entry([1.0, 0.5]), zeta_tol=0.3)
    assert try_insert(buf, entry([1.0, 0.5]), zeta_tol=0.1)


def test_capacity_and_separation_log():
    rng = make_rng(3)
    cap, zeta = 12, 0.1
    buf = ReplayBuffer(cap, zeta, 2, 3, 1)
    replay = []
    for _ in range(2000):
        phi = rng.normal(size=3)
        before = buf.features.copy()
        if try_insert(buf, BufferEntry(rng.normal(size=2), phi, rng.normal(size=1))):
            replay.append((phi, before))
        assert len(buf) <= cap
    admitted = [a for a in buf.log if a.admitted]
    assert len(admitted) == len(replay) == buf.admitted
    for (phi, before), rec in zip(replay, admitted):
        d = np.sum((before - phi) ** 2, axis=1) / np.linalg.norm(phi)
        assert rec.score >= zeta and (d.size == 0 or d.min() == pytest.approx(rec.score, rel=1e-12))


# ---------------------------------------------------------------- eviction


def test_evict_near_duplicate():
    buf = filled([[1.0, 0.0], [0.0, 1.0], [1.0, 0.001]])
    assert evict_svd_max(buf) == 2
    assert np.array_equal(buf.features, [[1.0, 0.0], [0.0, 1.0]])
    assert np.array_equal(buf.xs[:, 0], [0.0, 1.0])


def test_evict_single():
    buf = filled([[1.0, 2.0]])
    assert evict_svd_max(buf) == 0 and len(buf) == 0


def test_evict_empty():
    with pytest.raises(EmptyBuffer):
        evict_svd_max(ReplayBuffer(3, 0.2, 1, 2, 1))


def test_evict_exact_tie_lowest_index():
    buf = filled([[1.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
    assert evict_svd_max(buf) == 0


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 2**32 - 1))
def test_evict_matches_brute_force(seed):
    rng = make_rng(seed)
    p, k = int(rng.integers(1, 21)), int(rng.integers(1, 7))
    feats = rng.normal(size=(p, k))
    assert evict_svd_max(filled(feats)) == brute_force(feats)


def test_gram_path_matches_svd():
    rng = make_rng(5)
    feats = rng.normal(size=(30, 6))
    direct = [np.linalg.svd(np.delete(feats, i, axis=0), compute_uv=False)[-1] for i in range(30)]
    assert np.allclose(min_singular_after_removal(feats), direct, rtol=1e-9, atol=1e-12)


# ---------------------------------------------------------------- sampling


def test_sample_whole_buffer():
    buf = filled(np.eye(4))
    batch = sample_minibatch(buf, 4, make_rng(0))
    assert sorted(batch.xs[:, 0].tolist()) == [0.0, 1.0, 2.0, 3.0]


def test_sample_reproducible():
    buf = filled(np.eye(6))
    a = sample_minibatch(buf, 3, make_rng(9))
    b = sample_minibatch(buf, 3, make_rng(9))
    assert np.array_equal(a.xs, b.xs)


def test_sample_insufficient():
    with pytest.raises(InsufficientData):
        sample_minibatch(filled(np.eye(2)), 3, make_rng(0))


def test_sample_uniform():
    buf = filled(np.eye(10))
    rng = make_rng(1)
    counts = np.bincount([int(sample_minibatch(buf, 1, rng).xs[0, 0]) for _ in range(100_000)], minlength=10)
    sigma = np.sqrt(100_000 * 0.1 * 0.9)
    assert np.all(np.abs(counts - 10_000) <= 3 * sigma)


# -------------------------------------------------------------------- misc


def test_copy_is_independent():
    buf = filled(np.eye(3), capacity=5)
    dup = buf.copy()
    try_insert(dup, entry([5.0, 5.0, 5.0]))
    assert len(buf) == 3 and len(dup) == 4


def test_dump_csv(tmp_path):
    buf = ReplayBuffer(4, 0.2, 2, 2, 1)
    try_insert(buf, BufferEntry(np.array([0.5, -1.0]), np.array([1.0, 0.0]), np.array([0.25])))
    path = tmp_path / "b.csv"
    dump_csv(buf, path)
    assert path.read_text().splitlines() == ["index,x0,x1,phi0,phi1,y0", "0,0.5,-1.0,1.0,0.0,0.25"]
