"""Lloyd's k-means with k-means++ seeding, and frame-to-cluster assignment."""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, FormatError, ShapeError, TruncationError
from .features import FeatureSequence

logger = logging.getLogger(__name__)

MAGIC = b"DSQK"
VERSION = 1
_HEAD = struct.Struct("<4sBII")
_TAIL = struct.Struct("<qdI")

_CHUNK = 2048


@dataclass
class KMeansModel:
    centroids: np.ndarray
    seed: int
    final_inertia: float
    iterations_run: int
    inertia_history: list[float] = field(default_factory=list)

    @property
    def k(self) -> int:
        return self.centroids.shape[0]

    @property
    def dim(self) -> int:
        return self.centroids.shape[1]

    def save(self, path):
        c = np.ascontiguousarray(self.centroids, dtype="<f8")
        with open(path, "wb") as f:
            f.write(_HEAD.pack(MAGIC, VERSION, self.k, self.dim))
            f.write(c.tobytes())
            f.write(_TAIL.pack(self.seed, self.final_inertia, self.iterations_run))

    @classmethod
    def load(cls, path) -> "KMeansModel":
        raw = Path(path).read_bytes()
        if len(raw) < _HEAD.size or raw[:4] != MAGIC:
            raise FormatError(f"{path}: not a k-means model file")
        _, version, k, d = _HEAD.unpack_from(raw)
        if version != VERSION:
            raise FormatError(f"{path}: unsupported version {version}")
        n = k * d * 8
        if len(raw) != _HEAD.size + n + _TAIL.size:
            raise TruncationError(f"{path}: size mismatch for k={k}, D={d}")
        cents = np.frombuffer(raw[_HEAD.size : _HEAD.size + n], dtype="<f8").reshape(k, d).copy()
        seed, inertia, iters = _TAIL.unpack_from(raw, _HEAD.size + n)
        return cls(cents, seed, inertia, iters)


@dataclass
class ClusterSequence:
    utterance_id: str
    ids: list[int]

    def __len__(self):
        return len(self.ids)


def _sq_dists(x: np.ndarray, c: np.ndarray) -> np.ndarray:
    # explicit differences rather than the |x|^2 - 2xc + |c|^2 expansion so that
    # exact hits and exact ties survive rounding
    return ((x[:, None, :] - c[None, :, :]) ** 2).sum(-1)


def nearest(x: np.ndarray, c: np.ndarray):
    """Index of nearest centroid (lowest index on ties) and squared distance."""
    labels = np.empty(len(x), dtype=np.int64)
    d2 = np.empty(len(x), dtype=np.float64)
    for s in range(0, len(x), _CHUNK):
        dist = _sq_dists(x[s : s + _CHUNK], c)
        lab = dist.argmin(1)
        labels[s : s + _CHUNK] = lab
        d2[s : s + _CHUNK] = dist[np.arange(len(lab)), lab]
    return labels, d2


def _kmeanspp(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    """Greedy k-means++: each new centre is the best of a few D^2-sampled candidates."""
    n = len(x)
    trials = 2 + int(np.log(k))
    chosen = [int(rng.integers(n))]
    d2 = _sq_dists(x, x[chosen[0]][None])[:, 0]
    for _ in range(1, k):
        total = d2.sum()
        if total > 0:
            cands = np.unique(rng.choice(n, size=trials, p=d2 / total))
            cand_d2 = np.minimum(d2[:, None], _sq_dists(x, x[cands]))
            best = int(cand_d2.sum(0).argmin())
            idx, d2 = int(cands[best]), cand_d2[:, best]
        else:
            # every point coincides with a chosen centre; take the first unused row
            taken = set(chosen)
            idx = next(i for i in range(n) if i not in taken)
        chosen.append(idx)
    return x[chosen].copy()


def _update(x, labels, d2, k, old):
    sums = np.zeros_like(old)
    np.add.at(sums, labels, x)
    counts = np.bincount(labels, minlength=k)
    cents = old.copy()
    filled = counts > 0
    cents[filled] = sums[filled] / counts[filled, None]
    empty = np.flatnonzero(~filled)
    if len(empty):
        # reseed each empty centroid on the worst-served remaining frame
        order = np.argsort(-d2, kind="stable")
        for j, idx in zip(empty, order):
            cents[j] = x[idx]
        logger.debug("reseeded %d empty clusters", len(empty))
    return cents


def kmeans_train(frames, k: int, max_iters: int = 100, rel_tol: float = 1e-6, seed: int = 0) -> KMeansModel:
    """Fit ``k`` centroids to a pooled ``N x D`` frame matrix.

    Each iteration assigns frames to their nearest centroid and moves centroids
    to the mean of their frames.  Training stops when the relative inertia
    improvement drops below ``rel_tol`` or after ``max_iters`` iterations.
    Should rounding ever make an update increase inertia, the previous
    centroids are kept and training stops, so ``inertia_history`` is
    non-increasing.
    """
    x = np.asarray(frames, dtype=np.float64)
    if x.ndim != 2:
        raise ShapeError(f"frames must be N x D, got {x.shape}")
    if k < 2:
        raise ConfigError(f"k must be >= 2, got {k}")
    if len(x) < k:
        raise ConfigError(f"need at least k={k} frames, got {len(x)}")
    if max_iters < 1:
        raise ConfigError("max_iters must be >= 1")
    rng = np.random.default_rng(seed)
    cents = _kmeanspp(x, k, rng)
    labels, d2 = nearest(x, cents)
    inertia = float(d2.sum())
    history = [inertia]
    it = 0
    while it < max_iters:
        it += 1
        new = _update(x, labels, d2, k, cents)
        new_labels, new_d2 = nearest(x, new)
        new_inertia = float(new_d2.sum())
        if new_inertia > inertia:
            break
        improvement = inertia - new_inertia
        cents, labels, d2, inertia = new, new_labels, new_d2, new_inertia
        history.append(inertia)
        if inertia == 0.0 or improvement <= rel_tol * history[-2]:
            break
    logger.info("k-means k=%d: %d iterations, inertia %.6g", k, it, inertia)
    return KMeansModel(cents, seed, inertia, it, history)


def assign(model: KMeansModel, seq: FeatureSequence) -> ClusterSequence:
    if seq.dim != model.dim:
        raise ShapeError(f"feature dim {seq.dim} != model dim {model.dim}")
    labels, _ = nearest(seq.frames.astype(np.float64), model.centroids)
    return ClusterSequence(seq.utterance_id, labels.tolist())
