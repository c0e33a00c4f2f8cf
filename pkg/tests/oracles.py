"""Brute-force reference implementations used by the tests.

Each oracle enumerates the object it scores (alignments, lattice paths,
segmentations, n-grams) instead of using dynamic programming, so it shares
no code or recursion with the package.
"""

import functools
import itertools
import math
from collections import Counter

import numpy as np


def log_softmax(x):
    x = np.asarray(x, dtype=np.float64)
    x = x - x.max(-1, keepdims=True)
    return x - np.log(np.exp(x).sum(-1, keepdims=True))


def collapse_then_strip(path, blank=0):
    out = [k for k, _ in itertools.groupby(path)]
    return [k for k in out if k != blank]


@functools.lru_cache(maxsize=None)
def _all_paths(T, C):
    paths = np.array(list(itertools.product(range(C), repeat=T)), dtype=np.int64).reshape(-1, T)
    return paths, [tuple(collapse_then_strip(p)) for p in paths.tolist()]


def ctc_alignment_logprobs(logits):
    """Yield (collapsed label tuple, log prob) for every frame-level path."""
    lp = log_softmax(logits)
    T, C = lp.shape
    paths, labels = _all_paths(T, C)
    scores = lp[np.arange(T), paths].sum(1)
    yield from zip(labels, scores.tolist())


def ctc_nll(logits, target):
    terms = [s for lab, s in ctc_alignment_logprobs(logits) if list(lab) == list(target)]
    return -np.logaddexp.reduce(terms) if terms else math.inf


def ctc_prefix_logprob(logits, prefix):
    """log P(collapsed output starts with ``prefix``)."""
    prefix = tuple(prefix)
    terms = [s for lab, s in ctc_alignment_logprobs(logits) if lab[: len(prefix)] == prefix]
    return np.logaddexp.reduce(terms) if terms else -math.inf


def rnnt_nll(logits, target):
    """Sum over every monotonic emit/blank path through the T x (U+1) lattice."""
    lp = log_softmax(logits)
    T, U1, _ = lp.shape
    U = U1 - 1
    terms = []
    # T blanks and U emits in some order, the last move always a blank at (T-1, U)
    for emit_pos in itertools.combinations(range(T + U - 1), U):
        t = u = 0
        s = 0.0
        for step in range(T + U - 1):
            if step in emit_pos:
                s += lp[t, u, target[u]]
                u += 1
            else:
                s += lp[t, u, 0]
                t += 1
        terms.append(s + lp[T - 1, U, 0])
    return -np.logaddexp.reduce(terms)


def segmentations(s, pieces):
    """All ways to cut ``s`` into pieces from the dict ``pieces`` (tuple -> id)."""
    if not s:
        yield ()
        return
    for j in range(1, len(s) + 1):
        pid = pieces.get(tuple(s[:j]))
        if pid is not None:
            for rest in segmentations(s[j:], pieces):
                yield (pid,) + rest


def best_segmentation(s, pieces, log_probs):
    """Maximum score; ties broken by fewer pieces then smaller id sequence."""
    best = None
    for seg in segmentations(s, pieces):
        key = (-math.fsum(log_probs[i] for i in seg), len(seg), seg)
        if best is None or key < best:
            best = key
    return best


def adjusted_rand_index(a, b):
    a, b = np.asarray(a), np.asarray(b)
    table = Counter(zip(a.tolist(), b.tolist()))
    comb = lambda n: n * (n - 1) / 2
    sum_ij = sum(comb(n) for n in table.values())
    sum_a = sum(comb(n) for n in Counter(a.tolist()).values())
    sum_b = sum(comb(n) for n in Counter(b.tolist()).values())
    expected = sum_a * sum_b / comb(len(a))
    top = (sum_a + sum_b) / 2
    return (sum_ij - expected) / (top - expected)


def central_diff(f, x, h=1e-5, order=2):
    """Numerical gradient of scalar ``f`` at float64 tensor ``x``.

    ``order=4`` uses the five-point stencil, whose error is small enough to
    check tiny gradient entries.
    """
    g = np.zeros(x.shape)
    flat = x.reshape(-1)
    for i in range(flat.numel()):
        old = flat[i].item()

        def at(d):
            flat[i] = old + d
            return f(x)

        if order == 2:
            g.reshape(-1)[i] = (at(h) - at(-h)) / (2 * h)
        else:
            g.reshape(-1)[i] = (8 * (at(h) - at(-h)) - (at(2 * h) - at(-2 * h))) / (12 * h)
        flat[i] = old
    return g


def rel_err(a, n, floor=1e-7):
    """Elementwise relative error over entries whose magnitude exceeds ``floor``."""
    a, n = np.asarray(a, dtype=np.float64), np.asarray(n, dtype=np.float64)
    scale = np.maximum(np.abs(a), np.abs(n))
    mask = scale > floor
    if not mask.any():
        return 0.0
    return float((np.abs(a - n)[mask] / scale[mask]).max())
