import itertools
from functools import lru_cache

import numpy as np
import pytest
import torch

import oracles
from toys import TGT_V, toy_model
from hardmt.decoding import (DEFAULT_BANNED, CTCPrefixScorer, attn_beam, beam_search, ctc_greedy, decode,
                             greedy_search, joint_ctc_attn_beam, rnnt_beam, rnnt_beam_search, rnnt_greedy)
from hardmt.errors import ConfigError
from hardmt.vocab import EOS_ID

V = 8
TOKS = (5, 6, 7)


def table_step(rng):
    table = {}

    def step(prefixes):
        out = []
        for p in prefixes:
            if p not in table:
                table[p] = torch.tensor(rng.normal(size=V) * 3).log_softmax(-1)
            out.append(table[p])
        return torch.stack(out)

    return step


def exhaustive_attn(step, max_len):
    best = None
    for L in range(max_len + 1):
        for seq in itertools.product(TOKS, repeat=L):
            s, p = 0.0, ()
            for t in seq:
                s += float(step([p])[0][t])
                p += (t,)
            s += float(step([p])[0][EOS_ID])
            if best is None or s > best[0] + 1e-12:
                best = (s, p)
    return best


def test_ctc_greedy_collapses():
    # classes: 0 blank, 1+i vocab id i
    frames = [6, 6, 0, 6, 7, 0, 0]
    logits = torch.nn.functional.one_hot(torch.tensor(frames), 9).double()
    assert ctc_greedy(logits) == [5, 5, 6]


def test_beam_search_finds_exhaustive_optimum():
    rng = np.random.default_rng(0)
    for _ in range(100):
        step = table_step(rng)
        want = exhaustive_attn(step, 3)
        h = beam_search(step, 100, 3, V)
        assert h.output() == list(want[1]) and h.score == pytest.approx(want[0], abs=1e-9)
        assert h.finished


def test_beam_one_is_greedy_and_wider_beams_do_not_hurt():
    rng = np.random.default_rng(1)
    for _ in range(50):
        step = table_step(rng)
        g, b1 = greedy_search(step, 4, V), beam_search(step, 1, 4, V)
        assert g.tokens == b1.tokens
        assert beam_search(step, 4, 4, V).score >= b1.score - 1e-12


def test_banned_tokens_never_emitted():
    rng = np.random.default_rng(2)
    for _ in range(30):
        h = beam_search(table_step(rng), 5, 4, V)
        assert not set(h.tokens) & set(DEFAULT_BANNED)


def test_max_len_forces_eos():
    # eos is expensive everywhere, yet the search must close every hypothesis at max_len
    step = lambda ps: torch.tensor([[-9.0, -9, -60, -9, -9, 0, -9, -9]] * len(ps)).log_softmax(-1)
    h = beam_search(step, 3, 2, V)
    assert h.finished and len(h.tokens) <= 3
    table = lambda ps: torch.stack([torch.tensor([-9.0, -9, -60 if len(p) < 2 else 0, -9, -9, 0, -9, -9])
                                    for p in ps]).log_softmax(-1)
    assert beam_search(table, 3, 2, V).tokens == (5, 5, EOS_ID)


def test_ctc_greedy_matches_reference():
    rng = np.random.default_rng(9)
    for _ in range(200):
        logits = torch.tensor(rng.normal(size=(int(rng.integers(0, 12)), 5)))
        want = [c - 1 for c in oracles.collapse_then_strip(logits.argmax(-1).tolist(), 0)] if len(logits) else []
        assert ctc_greedy(logits) == want


def brute_ctc_probs(lp, classes):
    probs = {}
    for al in itertools.product(classes, repeat=lp.shape[0]):
        out, prev = [], None
        for c in al:
            if c != prev and c != 0:
                out.append(c - 1)
            prev = c
        probs[tuple(out)] = probs.get(tuple(out), 0.0) + np.exp(sum(lp[t, c] for t, c in enumerate(al)))
    return probs


def test_ctc_prefix_scores_match_enumeration():
    rng = np.random.default_rng(3)
    for _ in range(40):
        T = int(rng.integers(1, 5))
        z = rng.normal(size=(T, 9))
        z[:, 1:6] -= 50  # specials practically impossible, so the enumeration may skip them
        lp = torch.tensor(z).log_softmax(-1).numpy()
        probs = brute_ctc_probs(lp, [0, 6, 7, 8])
        sc = CTCPrefixScorer(lp)
        for L in range(4):
            for h in itertools.product(TOKS, repeat=L):
                st, s = sc.initial_state(), 0.0
                for t in h:
                    (s,), (st,) = sc.extend(st, [t])
                    if st is None:
                        break
                if L:
                    pre = sum(p for k, p in probs.items() if k[:L] == h)
                    if pre > 1e-300:
                        assert s == pytest.approx(np.log(pre), abs=1e-8)
                if st is None:
                    continue
                (e,), _ = sc.extend(st, [EOS_ID])
                full = probs.get(h, 0.0)
                if full > 1e-300:
                    assert e == pytest.approx(np.log(full), abs=1e-8)


def test_pure_ctc_weight_beam_equals_ctc_optimum():
    rng = np.random.default_rng(4)
    flat = lambda ps: torch.zeros(len(ps), V).log_softmax(-1)
    for _ in range(30):
        lp = torch.tensor(rng.normal(size=(int(rng.integers(2, 5)), 9)) * 2).log_softmax(-1).numpy()
        h = beam_search(flat, 1000, 3, V, ctc=CTCPrefixScorer(lp), ctc_weight=1.0)
        best = None
        for L in range(4):
            for seq in itertools.product(TOKS, repeat=L):
                sc = CTCPrefixScorer(lp)
                st = sc.initial_state()
                for t in seq:
                    st = sc.extend(st, [t])[1][0]
                e = sc.extend(st, [EOS_ID])[0][0]
                if best is None or e > best[0]:
                    best = (e, seq)
        assert tuple(h.output()) == best[1]


def brute_rnnt(joint, T, cap, max_u):
    best = None
    for U in range(max_u + 1):
        for y in itertools.product([0, 1], repeat=U):
            @lru_cache(None)
            def f(t, u, e):
                if t == T:
                    return 0.0 if u == U else -np.inf
                lp = joint(t, tuple(y[:u]))
                r = lp[0] + f(t + 1, u, 0)
                if u < U and e < cap:
                    r = np.logaddexp(r, lp[y[u] + 1] + f(t, u + 1, e + 1))
                return r

            s = f(0, 0, 0)
            if best is None or s > best[0] + 1e-12:
                best = (s, y)
    return best


def test_rnnt_beam_exact_with_unbounded_beam():
    rng = np.random.default_rng(5)
    for _ in range(60):
        T, tab = int(rng.integers(1, 4)), {}

        def joint(t, p):
            if (t, p) not in tab:
                tab[(t, p)] = torch.tensor(rng.normal(size=3) * 2).log_softmax(-1).numpy()
            return tab[(t, p)]

        want = brute_rnnt(joint, T, 2, 2 * T)
        h = rnnt_beam_search(joint, T, 10000, 2)
        assert h.tokens == want[1] and h.score == pytest.approx(want[0], abs=1e-9)
        g, b1 = rnnt_greedy(joint, T, 2), rnnt_beam_search(joint, T, 1, 2)
        assert g.tokens == b1.tokens and g.score == pytest.approx(b1.score, abs=1e-9)


def test_rnnt_emit_cap():
    joint = lambda t, p: np.log(np.array([0.01, 0.99]))
    assert len(rnnt_greedy(joint, 3, 2).tokens) == 6
    # the beam sums alignments, so a shorter label sequence may win, but never a longer one
    assert len(rnnt_beam_search(joint, 3, 4, 2).tokens) <= 6


@pytest.mark.parametrize("mt", ["ctc", "rnnt", "aed", "ctc_attn"])
def test_model_decode_outputs_plain_tokens(mt):
    model = toy_model(mt, dtype=torch.float32)
    model.train()
    out = decode(model, [5, 6, 7, 8, 9], beam_size=3)
    assert model.training
    assert all(5 <= t < TGT_V for t in out)


def test_model_wider_beam_scores_at_least_beam_one():
    model = toy_model("aed", dtype=torch.float32).eval()
    x = [5, 6, 7, 8, 9, 10]
    a = attn_beam(model, x, beam_size=1, max_len_ratio=1.0)
    # float32 network: batched and single-prefix scoring differ in the last bits
    assert attn_beam(model, x, beam_size=4).score >= a.score - 1e-5


def test_zero_ctc_weight_equals_attention_beam():
    model = toy_model("ctc_attn", dtype=torch.float32).eval()
    x = [5, 6, 7, 8]
    assert joint_ctc_attn_beam(model, x, 4, ctc_weight=0.0).tokens == attn_beam(model, x, 4).tokens


def test_decode_config_errors():
    with pytest.raises(ConfigError):
        joint_ctc_attn_beam(toy_model("aed", dtype=torch.float32), [5, 6], 2)
    with pytest.raises(ConfigError):
        joint_ctc_attn_beam(toy_model("ctc_attn", dtype=torch.float32), [5, 6], 2, ctc_weight=1.5)
    with pytest.raises(ConfigError):
        attn_beam(toy_model("aed", dtype=torch.float32), [5], beam_size=0)
    with pytest.raises(ConfigError):
        rnnt_beam(toy_model("rnnt", dtype=torch.float32), [5], beam_size=0)
