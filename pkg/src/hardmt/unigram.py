"""Unigram subword model over sequences of atomic symbols.

A "unit string" is a list of atomic symbols.  Discrete speech uses symbols
``u<cluster id>``; text uses single characters with spaces rendered as
``▁``.  A piece is a run of one to eight symbols and is written as the plain
concatenation of its symbols.  Every model keeps all single-symbol pieces,
so any string over the training alphabet has at least one segmentation.
"""

from __future__ import annotations

import logging
import math
import re
from collections import Counter
from pathlib import Path

import numpy as np

from .errors import ConfigError, DecodeError, FormatError
from .vocab import NUM_SPECIALS, SPECIALS, UNK_ID, TokenSequence, Vocabulary

logger = logging.getLogger(__name__)

MAX_PIECE_LEN = 8
SPACE = "▁"
NEG_INF = float("-inf")

_UNIT_RE = re.compile(r"u\d+")


def units_from_ids(ids) -> list[str]:
    return [f"u{i}" for i in ids]


def text_to_units(text: str) -> list[str]:
    return list(text.replace(" ", SPACE))


def units_to_text(units) -> str:
    return "".join(units).replace(SPACE, " ")


def split_piece(piece: str, kind: str) -> tuple[str, ...]:
    if kind == "unit":
        syms = _UNIT_RE.findall(piece)
        if "".join(syms) != piece:
            raise FormatError(f"piece {piece!r} is not a sequence of u<id> symbols")
        return tuple(syms)
    return tuple(piece)


def _logsumexp(xs):
    m = max(xs)
    if m == NEG_INF:
        return NEG_INF
    return m + math.log(sum(math.exp(x - m) for x in xs))


class UnigramModel:
    """Pieces with log-probabilities; ids follow the list order, specials first."""

    def __init__(self, pieces, log_probs, kind: str = "char", name: str = "unigram"):
        pieces = list(pieces)
        log_probs = [float(x) for x in log_probs]
        if tuple(pieces[:NUM_SPECIALS]) != SPECIALS:
            raise FormatError("unigram model must start with the special pieces")
        if len(pieces) != len(log_probs):
            raise FormatError("pieces and log_probs differ in length")
        if not all(math.isfinite(x) for x in log_probs):
            raise FormatError("non-finite piece log-probability")
        if kind not in ("char", "unit"):
            raise ConfigError(f"unknown symbol kind {kind!r}")
        self.name = name
        self.kind = kind
        self.pieces = pieces
        self.log_probs = log_probs
        self.symbols = [(p,) for p in SPECIALS] + [split_piece(p, kind) for p in pieces[NUM_SPECIALS:]]
        self.alphabet = {s[0] for i, s in enumerate(self.symbols) if i >= NUM_SPECIALS and len(s) == 1}
        self._lookup = {s: i for i, s in enumerate(self.symbols) if i >= NUM_SPECIALS}
        if len(self._lookup) != len(pieces) - NUM_SPECIALS:
            raise FormatError("duplicate pieces")
        self.max_len = max((len(s) for s in self.symbols[NUM_SPECIALS:]), default=1)
        regular = log_probs[NUM_SPECIALS:]
        self.unk_log_prob = (min(regular) if regular else 0.0) - 10.0

    def __len__(self):
        return len(self.pieces)

    @property
    def vocabulary(self) -> Vocabulary:
        return Vocabulary(self.name, self.pieces)

    # -- lattice -----------------------------------------------------------

    def _edges(self, s):
        """For each end position j: list of (start, piece id, log prob)."""
        n = len(s)
        ends = [[] for _ in range(n + 1)]
        for i in range(n):
            if s[i] not in self.alphabet:
                ends[i + 1].append((i, UNK_ID, self.unk_log_prob))
                continue
            for j in range(i + 1, min(n, i + self.max_len) + 1):
                pid = self._lookup.get(tuple(s[i:j]))
                if pid is not None:
                    ends[j].append((i, pid, self.log_probs[pid]))
        return ends

    def encode_viterbi(self, s) -> TokenSequence:
        """Most likely segmentation.

        Ties on score prefer fewer pieces, then the lexicographically smallest
        piece-id sequence.  Scores are exactly rounded sums (``math.fsum``), so
        reorderings of the same pieces tie exactly.
        """
        s = list(s)
        n = len(s)
        starts = [[] for _ in range(n + 1)]
        for j, lst in enumerate(self._edges(s)):
            for i, pid, lp in lst:
                starts[i].append((j, pid, lp))
        # best[i]: (score, n_pieces, ids) for the suffix starting at i
        best = [None] * (n + 1)
        best[n] = (0.0, 0, ())
        for i in range(n - 1, -1, -1):
            top = None
            for j, pid, _ in starts[i]:
                if best[j] is None:
                    continue
                ids = (pid,) + best[j][2]
                cand = (self.score(ids), best[j][1] + 1, ids)
                if top is None or _better(cand, top):
                    top = cand
            best[i] = top
        return TokenSequence(self.name, list(best[0][2]))

    def score(self, ids) -> float:
        return math.fsum(self.log_probs[i] if i != UNK_ID else self.unk_log_prob for i in ids)

    def encode_sampled(self, s, alpha: float = 0.5, seed: int = 0, rng=None) -> TokenSequence:
        """Draw a segmentation with probability proportional to p(seg)**alpha.

        Forward filtering over the lattice, then backward sampling.  Large
        ``alpha`` concentrates mass on the Viterbi path.
        """
        if alpha <= 0:
            raise ConfigError("alpha must be positive")
        rng = rng if rng is not None else np.random.default_rng(seed)
        s = list(s)
        n = len(s)
        ends = self._edges(s)
        fwd = [NEG_INF] * (n + 1)
        fwd[0] = 0.0
        for j in range(1, n + 1):
            if ends[j]:
                fwd[j] = _logsumexp([fwd[i] + alpha * lp for i, _, lp in ends[j]])
        out = []
        j = n
        while j > 0:
            cands = ends[j]
            w = np.array([fwd[i] + alpha * lp - fwd[j] for i, _, lp in cands])
            p = np.exp(w)
            k = int(rng.choice(len(cands), p=p / p.sum()))
            i, pid, _ = cands[k]
            out.append(pid)
            j = i
        return TokenSequence(self.name, out[::-1])

    def decode(self, t) -> list[str]:
        ids = t.ids if isinstance(t, TokenSequence) else list(t)
        bad = [k for k, i in enumerate(ids) if i < NUM_SPECIALS or i >= len(self.pieces)]
        if bad:
            raise DecodeError(f"cannot decode special/unknown ids at positions {bad}", bad)
        return [sym for i in ids for sym in self.symbols[i]]

    # -- persistence -------------------------------------------------------

    def save(self, path):
        lines = [f"{p}\t{lp!r}" for p, lp in zip(self.pieces, self.log_probs)]
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path, kind: str | None = None, name: str | None = None):
        path = Path(path)
        pieces, lps = [], []
        for ln, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
            if not line:
                continue
            try:
                piece, lp = line.rsplit("\t", 1)
                lps.append(float(lp))
            except ValueError as e:
                raise FormatError(f"{path}:{ln}: expected piece<TAB>log_prob") from e
            pieces.append(piece)
        if kind is None:
            regular = pieces[NUM_SPECIALS:]
            kind = "unit" if regular and all(re.fullmatch(r"(u\d+)+", p) for p in regular) else "char"
        return cls(pieces, lps, kind, name or path.stem)


def _better(a, b) -> bool:
    if a[0] != b[0]:
        return a[0] > b[0]
    if a[1] != b[1]:
        return a[1] < b[1]
    return a[2] < b[2]


# ---------------------------------------------------------------------------
# training


class _Trainer:
    def __init__(self, corpus):
        counts = Counter(tuple(s) for s in corpus)
        self.alphabet = sorted({sym for s in counts for sym in s})
        index = {sym: i for i, sym in enumerate(self.alphabet)}
        self.sentences = [tuple(index[x] for x in s) for s in counts]
        self.freqs = [counts[s] for s in counts]

    def seed_pieces(self, seed_size):
        sub = Counter()
        for s, f in zip(self.sentences, self.freqs):
            n = len(s)
            for i in range(n):
                for j in range(i + 2, min(n, i + MAX_PIECE_LEN) + 1):
                    sub[s[i:j]] += f
        singles = Counter()
        for s, f in zip(self.sentences, self.freqs):
            for x in s:
                singles[(x,)] += f
        ranked = sorted(sub.items(), key=lambda kv: (-kv[1] * len(kv[0]), kv[0]))
        ranked = ranked[: max(0, seed_size - len(singles))]
        pieces = dict(sorted(singles.items()))
        pieces.update(ranked)
        total = sum(pieces.values())
        return {p: math.log(c / total) for p, c in pieces.items()}

    def lattices(self, logp):
        out = []
        for s in self.sentences:
            n = len(s)
            ends = [[] for _ in range(n + 1)]
            for i in range(n):
                for j in range(i + 1, min(n, i + MAX_PIECE_LEN) + 1):
                    p = s[i:j]
                    if p in logp:
                        ends[j].append((i, p))
            out.append(ends)
        return out

    def e_step(self, logp, lattices):
        """Expected piece counts and total corpus log-likelihood."""
        counts = dict.fromkeys(logp, 0.0)
        loglik = 0.0
        for ends, f in zip(lattices, self.freqs):
            n = len(ends) - 1
            fwd = [NEG_INF] * (n + 1)
            fwd[0] = 0.0
            for j in range(1, n + 1):
                fwd[j] = _logsumexp([fwd[i] + logp[p] for i, p in ends[j]])
            bwd = [NEG_INF] * (n + 1)
            bwd[n] = 0.0
            starts = [[] for _ in range(n + 1)]
            for j in range(n, 0, -1):
                for i, p in ends[j]:
                    starts[i].append((j, p))
            for i in range(n - 1, -1, -1):
                bwd[i] = _logsumexp([logp[p] + bwd[j] for j, p in starts[i]])
            z = fwd[n]
            loglik += f * z
            for j in range(1, n + 1):
                for i, p in ends[j]:
                    counts[p] += f * math.exp(fwd[i] + logp[p] + bwd[j] - z)
        return counts, loglik

    @staticmethod
    def m_step(counts):
        kept = {p: c for p, c in counts.items() if c > 0 or len(p) == 1}
        total = sum(kept.values())
        # single symbols always exist; a zero expected count is floored to stay finite
        return {p: math.log(max(c, 1e-300) / total) for p, c in kept.items()}

    @staticmethod
    def removal_loss(logp, counts):
        """Approximate likelihood lost by deleting each multi-symbol piece."""
        loss = {}
        for p, lp in logp.items():
            if len(p) == 1:
                continue
            # best re-segmentation of p without p itself
            n = len(p)
            best = [NEG_INF] * (n + 1)
            best[0] = 0.0
            for j in range(1, n + 1):
                for i in range(max(0, j - MAX_PIECE_LEN), j):
                    q = p[i:j]
                    if q != p and q in logp and best[i] > NEG_INF:
                        best[j] = max(best[j], best[i] + logp[q])
            loss[p] = counts.get(p, 0.0) * (lp - best[n])
        return loss


def unigram_train(
    corpus,
    target_size: int,
    seed_size: int | None = None,
    em_iters: int = 2,
    prune_keep: float = 0.75,
    kind: str = "char",
    name: str = "unigram",
    history: list | None = None,
) -> UnigramModel:
    """Train a unigram piece model.

    ``target_size`` counts the five special pieces.  Seed pieces are all
    substrings of up to eight symbols ranked by count times length; each
    round runs ``em_iters`` EM iterations and then keeps the ``prune_keep``
    fraction of multi-symbol pieces whose removal would cost the most
    likelihood.  If ``history`` is given, the corpus log-likelihood of every
    EM iteration is appended as ``(round, loglik)``.
    """
    corpus = [list(s) for s in corpus]
    if not corpus or not any(corpus):
        raise ConfigError("empty training corpus")
    if not 0 < prune_keep < 1:
        raise ConfigError("prune_keep must be in (0, 1)")
    tr = _Trainer(corpus)
    n_alpha = len(tr.alphabet)
    target = target_size - NUM_SPECIALS
    if target < n_alpha:
        raise ConfigError(f"target_size {target_size} < alphabet size {n_alpha} + {NUM_SPECIALS} specials")
    seed_size = seed_size or 16 * target_size
    logp = tr.seed_pieces(max(seed_size, target))

    rnd = 0
    while True:
        lattices = tr.lattices(logp)
        for _ in range(em_iters):
            counts, loglik = tr.e_step(logp, lattices)
            if history is not None:
                history.append((rnd, loglik))
            logp = tr.m_step(counts)
            if len(logp) != len(counts):
                lattices = tr.lattices(logp)
        if len(logp) <= target:
            break
        loss = tr.removal_loss(logp, counts)
        keep_n = max(target, int(len(logp) * prune_keep)) - n_alpha
        ranked = sorted(loss, key=lambda p: (-loss[p], p))[:keep_n]
        kept = {p: logp[p] for p in logp if len(p) == 1}
        kept.update((p, logp[p]) for p in ranked)
        logp = kept
        rnd += 1
        logger.debug("unigram round %d: %d pieces", rnd, len(logp))

    order = sorted(logp, key=lambda p: (-logp[p], p))
    pieces = list(SPECIALS) + ["".join(tr.alphabet[i] for i in p) for p in order]
    lps = [0.0] * NUM_SPECIALS + [logp[p] for p in order]
    return UnigramModel(pieces, lps, kind=kind, name=name)
