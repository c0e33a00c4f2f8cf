"""A synthetic speech-translation task with known structure.

Source "sentences" are strings over a 12-letter alphabet.  Each letter is
pronounced as a fixed run of 2-4 latent acoustic units and translates to one
or two target words, so the mapping is monotonic and learnable by every model
family, and transcripts carry everything needed to translate.

``build_task`` runs the full front end: synthetic features -> k-means ->
repeat collapse -> unigram speech pieces, unigram source pieces, a word-level
target vocabulary, and finally ST and MT triplets over one joint vocabulary.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .data import Origin, make_mt_example, make_st_example, make_text_example, mix_datasets
from .errors import ConfigError
from .features import SynthSpec, synth_utterances
from .kmeans import assign, kmeans_train
from .model.config import ModelConfig
from .unigram import text_to_units, unigram_train, units_from_ids
from .vocab import NUM_SPECIALS, TokenSequence, Vocabulary, build_joint_vocab, collapse_repeats

log = logging.getLogger(__name__)

SYMBOLS = "abcdefghijkl"
WORDS = ("ka", "lo", "mi", "nu", "pe", "ra", "si", "to", "vu", "we", "xo", "ya", "ze", "bo", "di", "fu")


@dataclass
class TaskSpec:
    n_train_st: int = 2000
    n_train_mt_extra: int = 0
    n_valid: int = 60
    n_test: int = 100
    n_latent_clusters: int = 24
    units_per_symbol: tuple = (2, 4)
    words_per_symbol: tuple = (1, 2)
    distinct_units: bool = False  # every symbol gets its own latent ids
    dim: int = 16
    noise_stddev: float = 0.05
    frames_per_unit: tuple = (1, 3)
    symbols_per_utt: tuple = (3, 8)
    speech_vocab_size: int | None = None  # None: one piece per unit, no merges
    src_vocab_size: int | None = None  # None: characters only
    upsample: int = 4
    seed: int = 0

    def __post_init__(self):
        if self.n_train_st < 1 or self.n_test < 1 or self.n_valid < 1:
            raise ConfigError("task splits must be non-empty")
        if self.upsample < 1:
            raise ConfigError("upsample must be >= 1")


def make_grammar(spec: TaskSpec, rng: np.random.Generator):
    """Latent pronunciations and word translations for each symbol."""
    lo, hi = spec.units_per_symbol
    pron, seen = {}, set()
    next_free = 0
    for s in SYMBOLS:
        n = int(rng.integers(lo, hi + 1))
        if spec.distinct_units:
            ids = list(range(next_free, next_free + n))
            next_free += n
            if next_free > spec.n_latent_clusters:
                raise ConfigError("not enough latent clusters for distinct units")
        else:
            while True:
                ids = [int(rng.integers(spec.n_latent_clusters))]
                while len(ids) < n:
                    j = int(rng.integers(spec.n_latent_clusters))
                    if j != ids[-1]:
                        ids.append(j)
                if tuple(ids) not in seen:
                    break
        seen.add(tuple(ids))
        pron[s] = ids
    lo, hi = spec.words_per_symbol
    trans = {s: [WORDS[int(j)] for j in rng.integers(0, len(WORDS), size=int(rng.integers(lo, hi + 1)))]
             for s in SYMBOLS}
    return pron, trans


def random_sources(n, lo, hi, rng):
    return ["".join(SYMBOLS[j] for j in rng.integers(0, len(SYMBOLS), size=int(rng.integers(lo, hi + 1))))
            for _ in range(n)]


@dataclass
class Task:
    spec: TaskSpec
    pron: dict
    trans: dict
    v_tgt: Vocabulary
    v_cross: object
    speech_tok: object
    src_tok: object
    kmeans: object
    train_st: list = field(repr=False)
    train_mt: list = field(repr=False)
    valid: list = field(repr=False)
    test: list = field(repr=False)
    test_refs: list = field(repr=False)
    base_ratio: float = 0.0
    sources: dict = field(default_factory=dict, repr=False)
    features: dict = field(default_factory=dict, repr=False)

    def translate(self, src: str) -> str:
        return " ".join(w for s in src for w in self.trans[s])

    def training_data(self, multi: bool, seed: int = 0):
        """Shuffled ST (+ MT when ``multi``) triplets.  Single-task is the empty-MT case."""
        return mix_datasets(self.train_st, self.train_mt if multi else [], seed)

    def model_config(self, model_type, **overrides) -> ModelConfig:
        return ModelConfig(model_type=model_type, input_vocab_size=len(self.v_cross),
                           src_vocab_size=len(self.src_tok), tgt_vocab_size=len(self.v_tgt), **overrides)

    def detok(self, ids) -> str:
        return " ".join(self.v_tgt.id_to_token[i] for i in ids if NUM_SPECIALS <= i < len(self.v_tgt))

    def vocabs(self):
        return {"tgt": list(self.v_tgt.id_to_token), "cross": list(self.v_cross.id_to_token)}


def _speech_units(kmeans, seqs):
    return [units_from_ids(collapse_repeats(assign(kmeans, s)).ids) for s in seqs]


def build_task(spec: TaskSpec) -> Task:
    rng = np.random.default_rng(spec.seed)
    pron, trans = make_grammar(spec, rng)
    synth = SynthSpec(spec.n_latent_clusters, spec.dim, spec.noise_stddev, spec.frames_per_unit, pron,
                      spec.symbols_per_utt, centroid_seed=spec.seed)
    lo, hi = spec.symbols_per_utt
    srcs = {name: random_sources(n, lo, hi, rng) for name, n in
            (("train", spec.n_train_st), ("valid", spec.n_valid), ("test", spec.n_test),
             ("extra", spec.n_train_mt_extra))}
    feats = {name: synth_utterances(synth, srcs[name], seed=int(rng.integers(2**31)), prefix=f"{name}-")
             for name in ("train", "valid", "test")}

    train_frames = np.concatenate([f.frames for f, _, _ in feats["train"]])
    km = kmeans_train(train_frames, spec.n_latent_clusters, seed=spec.seed)
    units = {name: _speech_units(km, [f for f, _, _ in feats[name]]) for name in feats}

    n_units = len({u for seq in units["train"] for u in seq})
    spe_size = spec.speech_vocab_size or (NUM_SPECIALS + n_units)
    speech_tok = unigram_train(units["train"], spe_size, kind="unit", name="spe")
    src_corpus = [text_to_units(s) for s in srcs["train"]]
    src_size = spec.src_vocab_size or (NUM_SPECIALS + len({c for s in src_corpus for c in s}))
    src_tok = unigram_train(src_corpus, src_size, kind="char", name="src")
    v_tgt = Vocabulary("tgt", WORDS)
    v_cross = build_joint_vocab(speech_tok.vocabulary, src_tok.vocabulary)

    def tgt_ids(src):
        return TokenSequence("tgt", [v_tgt.id(w) for s in src for w in trans[s]])

    def st_split(name):
        out = []
        for (f, _, src), u in zip(feats[name], units[name]):
            x = speech_tok.encode_viterbi(u)
            y_src = src_tok.encode_viterbi(text_to_units(src))
            out.append(make_st_example(x, y_src, tgt_ids(src), v_cross, f.utterance_id))
        return out

    train_st = st_split("train")
    train_mt = [make_mt_example(t, spec.upsample, v_cross) for t in train_st]
    train_mt += [make_text_example(src_tok.encode_viterbi(text_to_units(s)), tgt_ids(s), spec.upsample, v_cross,
                                   f"extra-{i:05d}") for i, s in enumerate(srcs["extra"])]
    task = Task(spec, pron, trans, v_tgt, v_cross, speech_tok, src_tok, km, train_st, train_mt,
                st_split("valid"), st_split("test"), [" ".join(w for s in src for w in trans[s])
                                                       for src in srcs["test"]])
    task.base_ratio = length_ratio(train_st)
    task.sources = srcs
    task.features = {name: [f for f, _, _ in feats[name]] for name in feats}
    return task


def mean_len(triplets):
    return float(np.mean([len(t.x) for t in triplets]))


def length_ratio(st, mt=None):
    """Mean discrete-speech input length over mean text input length.

    With ``mt`` the text side is the (up-sampled) MT inputs; without it, the
    plain source-token sequences of the ST examples.
    """
    text = mean_len(mt) if mt else float(np.mean([len(t.y_src) for t in st]))
    return mean_len(st) / text
