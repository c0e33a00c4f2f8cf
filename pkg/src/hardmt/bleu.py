"""Corpus BLEU-4 with mteval-13a style tokenisation.

Tokenisation, applied identically to hypotheses and references, case kept:

1. drop ``<skipped>``, join ``-\\n`` line breaks, turn newlines into spaces;
2. unescape ``&quot; &amp; &lt; &gt;``;
3. pad with spaces and apply, in order::

       ([\\{-\\~\\[-\\` -\\&\\(-\\+\\:-\\@\\/])  ->  " \\1 "   (symbols)
       ([^0-9])([\\.,])                      ->  "\\1 \\2 " (period/comma not after a digit)
       ([\\.,])([^0-9])                      ->  " \\1 \\2" (period/comma not before a digit)
       ([0-9])(-)                            ->  "\\1 \\2 " (dash after a digit)

4. split on whitespace.

Scores are not smoothed: any zero n-gram precision gives BLEU 0.  An order
with no hypothesis n-grams at all (every sentence shorter than n) has no
precision; it is reported as ``None`` and left out of the geometric mean, so
BLEU(x, x) = 100 holds for short corpora too.
"""

from __future__ import annotations

import math
import re
from collections import Counter
from dataclasses import dataclass

from .errors import ValidationError

MAX_N = 4

_RULES = [
    (re.compile(r"([\{-\~\[-\` -\&\(-\+\:-\@\/])"), r" \1 "),
    (re.compile(r"([^0-9])([\.,])"), r"\1 \2 "),
    (re.compile(r"([\.,])([^0-9])"), r" \1 \2"),
    (re.compile(r"([0-9])(-)"), r"\1 \2 "),
]


def tokenize_13a(line: str) -> list[str]:
    s = line.replace("<skipped>", "").replace("-\n", "").replace("\n", " ")
    if "&" in s:
        s = s.replace("&quot;", '"').replace("&amp;", "&").replace("&lt;", "<").replace("&gt;", ">")
    s = f" {s} "
    for rx, sub in _RULES:
        s = rx.sub(sub, s)
    return s.split()


def ngrams(tokens, n) -> Counter:
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


@dataclass
class BleuReport:
    bleu: float
    precisions: list  # p1..p4 as fractions, None where the order has no n-grams
    matches: list
    totals: list
    brevity_penalty: float
    hyp_len: int
    ref_len: int

    def to_dict(self):
        return {
            "bleu": self.bleu,
            "precisions": self.precisions,
            "matches": self.matches,
            "totals": self.totals,
            "brevity_penalty": self.brevity_penalty,
            "hyp_len": self.hyp_len,
            "ref_len": self.ref_len,
        }

    def __str__(self):
        p = "/".join("-" if x is None else f"{100 * x:.1f}" for x in self.precisions)
        return (f"BLEU = {self.bleu:.2f} {p} (BP = {self.brevity_penalty:.3f} "
                f"hyp_len = {self.hyp_len} ref_len = {self.ref_len})")


def sentence_stats(hyp: str, ref: str):
    h, r = tokenize_13a(hyp), tokenize_13a(ref)
    matches, totals = [], []
    for n in range(1, MAX_N + 1):
        hn, rn = ngrams(h, n), ngrams(r, n)
        matches.append(sum(min(c, rn[g]) for g, c in hn.items()))
        totals.append(max(len(h) - n + 1, 0))
    return matches, totals, len(h), len(r)


def bleu(hyps, refs) -> BleuReport:
    hyps, refs = list(hyps), list(refs)
    if not hyps:
        raise ValidationError("no hypotheses to score")
    if len(hyps) != len(refs):
        raise ValidationError(f"{len(hyps)} hypotheses but {len(refs)} references")
    matches, totals = [0] * MAX_N, [0] * MAX_N
    c = r = 0
    for h, ref in zip(hyps, refs):
        m, t, hl, rl = sentence_stats(h, ref)
        matches = [a + b for a, b in zip(matches, m)]
        totals = [a + b for a, b in zip(totals, t)]
        c += hl
        r += rl
    precisions = [m / t if t else None for m, t in zip(matches, totals)]
    defined = [p for p in precisions if p is not None]
    if c == 0:
        bp = 1.0 if r == 0 else 0.0
        score = 100.0 * bp
    else:
        bp = 1.0 if c >= r else math.exp(1 - r / c)
        if min(defined) == 0:
            score = 0.0
        else:
            score = 100 * bp * math.exp(sum(math.log(p) for p in defined) / len(defined))
    return BleuReport(score, precisions, matches, totals, bp, c, r)
