"""Qualified training memory for the deep feature network.

A record is admitted only if its feature vector is far enough from every
stored one (kernel independence test). When the buffer is over capacity the
entry whose removal leaves the best-conditioned feature matrix (largest
minimum singular value) is evicted.
"""

import csv
from dataclasses import dataclass

import numpy as np

from .deepnet import TrainBatch
from .errors import EmptyBuffer, InsufficientData, ZeroFeature

ZERO_FEATURE_NORM = 1e-12
# relative tolerance for treating two eviction scores as tied
TIE_RTOL = 1e-9


@dataclass(frozen=True)
class BufferEntry:
    x: np.ndarray
    phi: np.ndarray
    y: np.ndarray


@dataclass(frozen=True)
class Admission:
    """Log record for one admission decision."""

    score: float
    admitted: bool
    evicted: int = -1


def kernel_scores(phi_new, features):
    """``||phi_new - phi_p||^2 / ||phi_new||`` for every row p of ``features``."""
    phi_new = np.asarray(phi_new, dtype=float)
    norm = float(np.linalg.norm(phi_new))
    if norm < ZERO_FEATURE_NORM:
        raise ZeroFeature("feature vector has (near) zero norm; kernel test undefined")
    d = features - phi_new
    return np.einsum("ij,ij->i", d, d) / norm


def min_singular_after_removal(features):
    """sigma_min of ``features`` with row i deleted, for every i.

    For tall remainders the Gram update ``G - f_i f_i^T`` is used; otherwise
    each remainder is decomposed directly.
    """
    p, k = features.shape
    if p - 1 >= k:
        G = features.T @ features
        grams = G[None, :, :] - features[:, :, None] * features[:, None, :]
        lam = np.linalg.eigvalsh(grams)[:, 0]
        return np.sqrt(np.clip(lam, 0.0, None))
    out = np.empty(p)
    for i in range(p):
        rest = np.delete(features, i, axis=0)
        out[i] = np.linalg.svd(rest, compute_uv=False)[-1] if rest.size else 0.0
    return out


def best_removal(scores):
    """Index of the largest score; near-ties go to the lowest index."""
    top = float(np.max(scores))
    tol = TIE_RTOL * max(1.0, abs(top))
    return int(np.flatnonzero(scores >= top - tol)[0])


class ReplayBuffer:
    """Capacity-bounded buffer of (x, Phi(x), y) records.

    ``features`` keeps the stored Phi rows as one contiguous array so the
    admission test and eviction are vectorized.
    """

    def __init__(self, capacity, zeta_tol, n, k, m):
        if capacity < 1:
            raise ValueError("capacity must be positive")
        if not zeta_tol > 0:
            raise ValueError("zeta_tol must be positive")
        self.capacity = int(capacity)
        self.zeta_tol = float(zeta_tol)
        self._xs = np.empty((capacity + 1, n))
        self._phis = np.empty((capacity + 1, k))
        self._ys = np.empty((capacity + 1, m))
        self.size = 0
        self.log = []
        self.admitted = 0
        self.rejected = 0

    def __len__(self):
        return self.size

    @property
    def features(self):
        return self._phis[: self.size]

    @property
    def xs(self):
        return self._xs[: self.size]

    @property
    def ys(self):
        return self._ys[: self.size]

    def entries(self):
        return [BufferEntry(self._xs[i].copy(), self._phis[i].copy(), self._ys[i].copy()) for i in range(self.size)]

    def copy(self):
        other = ReplayBuffer.__new__(ReplayBuffer)
        other.__dict__.update(self.__dict__)
        other._xs = self._xs.copy()
        other._phis = self._phis.copy()
        other._ys = self._ys.copy()
        other.log = list(self.log)
        return other

    def _remove(self, i):
        for arr in (self._xs, self._phis, self._ys):
            arr[i : self.size - 1] = arr[i + 1 : self.size]
        self.size -= 1


def kernel_score(phi_new, buffer):
    """Minimum kernel distance of ``phi_new`` to the buffer; inf when empty."""
    scores = kernel_scores(phi_new, buffer.features)
    if scores.size == 0:
        return float("inf")
    return float(np.min(scores))


def evict_svd_max(buffer):
    """Remove the entry whose deletion maximizes sigma_min of the rest."""
    if buffer.size == 0:
        raise EmptyBuffer("cannot evict from an empty buffer")
    if buffer.size == 1:
        idx = 0
    else:
        idx = best_removal(min_singular_after_removal(buffer.features))
    buffer._remove(idx)
    return idx


def try_insert(buffer, entry, zeta_tol=None):
    """Admit ``entry`` if it passes the kernel test. Returns True on admit.

    Raises ZeroFeature (buffer untouched) for a degenerate feature vector.
    """
    zeta_tol = buffer.zeta_tol if zeta_tol is None else zeta_tol
    score = kernel_score(entry.phi, buffer)
    if score < zeta_tol:
        buffer.rejected += 1
        buffer.log.append(Admission(score, False))
        return False
    i = buffer.size
    buffer._xs[i] = entry.x
    buffer._phis[i] = entry.phi
    buffer._ys[i] = entry.y
    buffer.size += 1
    evicted = -1
    if buffer.size > buffer.capacity:
        evicted = evict_svd_max(buffer)
    buffer.admitted += 1
    buffer.log.append(Admission(score, True, evicted))
    return True


def sample_minibatch(buffer, M, rng):
    """M distinct entries drawn uniformly, as a TrainBatch."""
    if M < 1 or buffer.size < M:
        raise InsufficientData(f"need {M} entries, buffer holds {buffer.size}")
    idx = rng.choice(buffer.size, size=M, replace=False)
    return TrainBatch(buffer.xs[idx], buffer.ys[idx])


def dump_csv(buffer, path):
    n, k, m = buffer._xs.shape[1], buffer._phis.shape[1], buffer._ys.shape[1]
    header = ["index"] + [f"x{i}" for i in range(n)] + [f"phi{i}" for i in range(k)] + [f"y{i}" for i in range(m)]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for i in range(buffer.size):
            row = [i] + [repr(float(v)) for v in np.concatenate([buffer._xs[i], buffer._phis[i], buffer._ys[i]])]
            w.writerow(row)
