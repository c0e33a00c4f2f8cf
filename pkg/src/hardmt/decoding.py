"""Inference for the four model families.

The search routines are written against small scoring callables so they can
be checked on hand-built toy distributions as well as on trained networks:

* attention: ``step(prefixes) -> (n, V) log-probs`` over target ids,
* CTC prefix scoring: a ``T x (V + 1)`` log-prob matrix, blank at class 0,
* transducer: ``joint(t, prefix) -> (V + 1,)`` log-probs, blank at class 0.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch

from .errors import ConfigError
from .model.config import ModelType
from .vocab import BLANK_ID, BOS_ID, EOS_ID, NUM_SPECIALS, PAD_ID, UNK_ID

NEG_INF = float("-inf")
DEFAULT_BANNED = (PAD_ID, BOS_ID, UNK_ID, BLANK_ID)


@dataclass
class Hypothesis:
    tokens: tuple
    score: float
    attn_score: float = 0.0
    ctc_score: float = 0.0
    state: object = field(default=None, repr=False, compare=False)

    @property
    def finished(self):
        return bool(self.tokens) and self.tokens[-1] == EOS_ID

    def output(self):
        """Token ids without the closing eos."""
        return list(self.tokens[:-1] if self.finished else self.tokens)


# ---------------------------------------------------------------------------
# CTC


def ctc_greedy(logits) -> list[int]:
    """Frame-wise argmax, merge repeats, drop blanks; returns vocabulary ids."""
    best = torch.as_tensor(logits).argmax(-1).tolist()
    out, prev = [], None
    for c in best:
        if c != prev and c != 0:
            out.append(c - 1)
        prev = c
    return out


class CTCPrefixScorer:
    """Label-prefix probabilities under a CTC posterior.

    For a prefix ``h`` the score is log P(the collapsed output starts with
    ``h``); for a prefix ending in eos it is log P(output == h).
    """

    def __init__(self, log_probs):
        self.lp = np.asarray(log_probs, dtype=np.float64)
        self.T = self.lp.shape[0]

    def initial_state(self):
        r_n = np.full(self.T, NEG_INF)
        r_b = np.cumsum(self.lp[:, 0])
        return (r_n, r_b, None)

    def extend(self, state, token_ids):
        """Scores and states for ``prefix + [tok]`` for each tok in ``token_ids``.

        ``token_ids`` are vocabulary ids; eos is scored as sequence end.
        """
        r_n_g, r_b_g, last = state
        T, lp = self.T, self.lp
        ids = np.asarray(token_ids, dtype=np.int64)
        scores = np.full(len(ids), NEG_INF)
        states = [None] * len(ids)
        is_eos = ids == EOS_ID
        if is_eos.any():
            scores[is_eos] = np.logaddexp(r_n_g[-1], r_b_g[-1])
        sel = np.flatnonzero(~is_eos)
        if len(sel) == 0:
            return scores, states
        cls = ids[sel] + 1
        K = len(cls)
        phi = np.repeat(np.logaddexp(r_n_g, r_b_g)[:, None], K, 1)
        same = cls == last
        if same.any():
            phi[:, same] = r_b_g[:, None]
        r_n = np.full((T, K), NEG_INF)
        r_b = np.full((T, K), NEG_INF)
        if last is None:
            r_n[0] = lp[0, cls]
        for t in range(1, T):
            r_n[t] = np.logaddexp(r_n[t - 1], phi[t - 1]) + lp[t, cls]
            r_b[t] = np.logaddexp(r_b[t - 1], r_n[t - 1]) + lp[t, 0]
        terms = np.vstack([r_n[:1], phi[:-1] + lp[1:, cls]]) if T > 1 else r_n[:1]
        psi = np.logaddexp.reduce(terms, axis=0)
        scores[sel] = psi
        for j, k in enumerate(sel):
            states[k] = (r_n[:, j].copy(), r_b[:, j].copy(), int(cls[j]))
        return scores, states


# ---------------------------------------------------------------------------
# attention beam search


def beam_search(step, beam_size, max_len, vocab_size, banned=DEFAULT_BANNED, ctc=None, ctc_weight=0.0,
                length_penalty=0.0):
    """Length-synchronous beam search.

    Hypothesis score is ``(1 - ctc_weight) * sum(attention log-probs) +
    ctc_weight * CTC prefix score`` (+ ``length_penalty`` per token).  At
    ``max_len`` only eos may follow.  Since both score parts can only fall as
    a prefix grows, the search stops once the best finished hypothesis beats
    every live one (when ``length_penalty <= 0``).
    """
    if beam_size < 1:
        raise ConfigError("beam_size must be >= 1")
    if not 0.0 <= ctc_weight <= 1.0:
        raise ConfigError("ctc_weight must lie in [0, 1]")
    use_ctc = ctc is not None and ctc_weight > 0
    allowed = np.array([k for k in range(vocab_size) if k not in set(banned)])
    eos_only = np.array([EOS_ID])
    live = [Hypothesis((), 0.0, state=ctc.initial_state() if use_ctc else None)]
    done = []
    for length in range(max_len + 1):
        if not live:
            break
        lps = step([h.tokens for h in live])
        lps = torch.as_tensor(lps, dtype=torch.float64).cpu().numpy()
        toks = eos_only if length == max_len else allowed
        cands = []
        for h, lp in zip(live, lps):
            attn = h.attn_score + lp[toks]
            if use_ctc:
                cs, states = ctc.extend(h.state, toks)
                score = (1 - ctc_weight) * attn + ctc_weight * cs
            else:
                cs, states = np.zeros(len(toks)), [None] * len(toks)
                score = attn
            score = score + length_penalty * (len(h.tokens) + 1)
            for j, tok in enumerate(toks):
                if score[j] == NEG_INF:
                    continue
                cands.append(Hypothesis(h.tokens + (int(tok),), float(score[j]), float(attn[j]), float(cs[j]),
                                        states[j]))
        cands.sort(key=lambda c: (-c.score, c.tokens))
        live = []
        for c in cands[:beam_size]:
            (done if c.finished else live).append(c)
        if done and live and length_penalty <= 0:
            if max(d.score for d in done) >= live[0].score:
                break
    pool = done or live
    if not pool:
        return Hypothesis((EOS_ID,), NEG_INF)
    return min(pool, key=lambda c: (-c.score, c.tokens))


def greedy_search(step, max_len, vocab_size, banned=DEFAULT_BANNED):
    """Autoregressive argmax decoding (reference for beam size 1)."""
    allowed = [k for k in range(vocab_size) if k not in set(banned)]
    tokens, score = (), 0.0
    for length in range(max_len + 1):
        lp = torch.as_tensor(step([tokens])[0], dtype=torch.float64).cpu().numpy()
        if length == max_len:
            tok = EOS_ID
        else:
            tok = allowed[int(np.argmax(lp[allowed]))]
        tokens += (tok,)
        score += float(lp[tok])
        if tok == EOS_ID:
            break
    return Hypothesis(tokens, score, score)


# ---------------------------------------------------------------------------
# transducer search


def rnnt_beam_search(joint, T, beam_size, max_sym_per_frame=3, banned_classes=()):
    """Time-synchronous transducer beam search with prefix merging.

    Within a frame, live hypotheses are expanded by blank (moving them to the
    next frame, summing probabilities of identical label sequences) or by a
    label (staying on the frame, at most ``max_sym_per_frame`` times); the
    combined pool is pruned to ``beam_size`` after every expansion.  Without
    pruning the final scores are exact sequence log-probabilities.
    """
    if beam_size < 1:
        raise ConfigError("beam_size must be >= 1")
    banned = set(banned_classes)
    beam = {(): 0.0}
    for t in range(T):
        live, nxt = dict(beam), {}
        for v in range(max_sym_per_frame + 1):
            if not live:
                break
            emits = {}
            for prefix, s in live.items():
                lp = np.asarray(joint(t, prefix), dtype=np.float64)
                nxt[prefix] = np.logaddexp(nxt.get(prefix, NEG_INF), s + lp[0])
                if v < max_sym_per_frame:
                    for c in range(1, len(lp)):
                        if c not in banned and lp[c] > NEG_INF:
                            emits[prefix + (c - 1,)] = s + lp[c]
            pool = [(-s, 0, p) for p, s in nxt.items()] + [(-s, 1, p) for p, s in emits.items()]
            pool.sort()
            pool = pool[:beam_size]
            nxt = {p: -ns for ns, kind, p in pool if kind == 0}
            live = {p: -ns for ns, kind, p in pool if kind == 1}
        beam = nxt
    best = min(beam.items(), key=lambda kv: (-kv[1], kv[0]))
    return Hypothesis(best[0], float(best[1]))


def rnnt_greedy(joint, T, max_sym_per_frame=3, banned_classes=()):
    banned = set(banned_classes)
    prefix, score = (), 0.0
    for t in range(T):
        for _ in range(max_sym_per_frame + 1):
            lp = np.asarray(joint(t, prefix), dtype=np.float64)
            if _ >= max_sym_per_frame:
                c = 0
            else:
                allowed = [c for c in range(len(lp)) if c == 0 or c not in banned]
                c = allowed[int(np.argmax(lp[allowed]))]
            score += float(lp[c])
            if c == 0:
                break
            prefix += (c - 1,)
    return Hypothesis(prefix, score)


# ---------------------------------------------------------------------------
# model wrappers


def _encode_one(model, x_ids):
    x = torch.as_tensor([list(x_ids)], dtype=torch.long)
    with torch.no_grad():
        _, mem, m_lens = model.run_encoder(x, torch.tensor([x.shape[1]]))
    return mem, m_lens


def _attn_step(model, mem, m_lens):
    def step(prefixes):
        n = len(prefixes)
        L = max(len(p) for p in prefixes) + 1
        y = torch.full((n, L), PAD_ID, dtype=torch.long)
        lens = torch.tensor([len(p) + 1 for p in prefixes])
        for i, p in enumerate(prefixes):
            y[i, 0] = BOS_ID
            y[i, 1 : len(p) + 1] = torch.tensor(p, dtype=torch.long)
        with torch.no_grad():
            logits = model.decoder(y, lens, mem.expand(n, -1, -1), m_lens.expand(n))
        return logits[torch.arange(n), lens - 1].double().log_softmax(-1)

    return step


def _max_len(x_ids, ratio):
    return max(1, math.ceil(ratio * len(x_ids)))


def ctc_decode(model, x_ids) -> list[int]:
    """Greedy CTC output with special ids removed."""
    mem, _ = _encode_one(model, x_ids)
    with torch.no_grad():
        return [t for t in ctc_greedy(model.tgt_ctc(mem)[0]) if t >= NUM_SPECIALS]


def attn_beam(model, x_ids, beam_size=10, max_len_ratio=1.0, length_penalty=0.0) -> Hypothesis:
    if beam_size < 1:
        raise ConfigError("beam_size must be >= 1")
    mem, m_lens = _encode_one(model, x_ids)
    return beam_search(_attn_step(model, mem, m_lens), beam_size, _max_len(x_ids, max_len_ratio),
                       model.cfg.tgt_vocab_size, length_penalty=length_penalty)


def joint_ctc_attn_beam(model, x_ids, beam_size=10, ctc_weight=0.3, max_len_ratio=1.0,
                        length_penalty=0.0) -> Hypothesis:
    if model.cfg.model_type is not ModelType.CTC_ATTN:
        raise ConfigError("joint CTC/attention decoding needs a ctc_attn model")
    if not 0.0 <= ctc_weight <= 1.0:
        raise ConfigError("ctc_weight must lie in [0, 1]")
    mem, m_lens = _encode_one(model, x_ids)
    with torch.no_grad():
        ctc_lp = model.tgt_ctc(mem)[0].double().log_softmax(-1)
    return beam_search(_attn_step(model, mem, m_lens), beam_size, _max_len(x_ids, max_len_ratio),
                       model.cfg.tgt_vocab_size, ctc=CTCPrefixScorer(ctc_lp), ctc_weight=ctc_weight,
                       length_penalty=length_penalty)


class _TransducerScorer:
    def __init__(self, model, mem):
        self.model = model
        self.enc = model.joint.enc_proj(mem[0])  # T x dj
        self.cache = {}

    def _pred(self, prefix):
        if prefix not in self.cache:
            if prefix:
                g_prev, state = self._pred(prefix[:-1])
                tok = torch.tensor([[prefix[-1]]])
            else:
                state, tok = None, torch.tensor([[BOS_ID]])
            g, state = self.model.predictor(tok, state)
            self.cache[prefix] = (self.model.joint.pred_proj(g[0, -1]), state)
        return self.cache[prefix]

    def __call__(self, t, prefix):
        with torch.no_grad():
            g, _ = self._pred(prefix)
            return self.model.joint.out(torch.tanh(self.enc[t] + g)).double().log_softmax(-1).numpy()


def rnnt_beam(model, x_ids, beam_size=10, max_sym_per_frame=3) -> Hypothesis:
    if beam_size < 1:
        raise ConfigError("beam_size must be >= 1")
    mem, m_lens = _encode_one(model, x_ids)
    scorer = _TransducerScorer(model, mem)
    banned = [i + 1 for i in range(NUM_SPECIALS)]
    return rnnt_beam_search(scorer, int(m_lens[0]), beam_size, max_sym_per_frame, banned)


def decode(model, x_ids, beam_size=10, ctc_weight=0.3, max_len_ratio=1.0) -> list[int]:
    """Best target id sequence using the decoding rule of the model family."""
    mt = model.cfg.model_type
    was_training = model.training
    model.eval()
    try:
        if mt is ModelType.CTC:
            return ctc_decode(model, x_ids)
        if mt is ModelType.AED:
            return attn_beam(model, x_ids, beam_size, max_len_ratio).output()
        if mt is ModelType.CTC_ATTN:
            return joint_ctc_attn_beam(model, x_ids, beam_size, ctc_weight, max_len_ratio).output()
        return list(rnnt_beam(model, x_ids, beam_size).tokens)
    finally:
        model.train(was_training)
