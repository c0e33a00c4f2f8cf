"""Vocabularies, token sequences and the small sequence transforms between them."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

from .errors import ConfigError, HardMTError, ValidationError
from .kmeans import ClusterSequence

PAD, BOS, EOS, UNK, BLANK = "<pad>", "<s>", "</s>", "<unk>", "<blank>"
SPECIALS = (PAD, BOS, EOS, UNK, BLANK)
PAD_ID, BOS_ID, EOS_ID, UNK_ID, BLANK_ID = range(5)
NUM_SPECIALS = len(SPECIALS)

SPEECH_PREFIX = "spe:"
TEXT_PREFIX = "src:"


class Vocabulary:
    """Ordered token list whose first five ids are the special symbols."""

    def __init__(self, name: str, tokens):
        tokens = list(tokens)
        if tuple(tokens[:NUM_SPECIALS]) != SPECIALS:
            tokens = list(SPECIALS) + [t for t in tokens if t not in SPECIALS]
        if len(set(tokens)) != len(tokens):
            raise ValidationError(f"vocabulary {name!r} has duplicate tokens")
        self.name = name
        self.id_to_token = tokens
        self.token_to_id = {t: i for i, t in enumerate(tokens)}

    def __len__(self):
        return len(self.id_to_token)

    def __eq__(self, other):
        return isinstance(other, Vocabulary) and self.id_to_token == other.id_to_token

    def __repr__(self):
        return f"Vocabulary({self.name!r}, size={len(self)})"

    @property
    def regular_tokens(self):
        return self.id_to_token[NUM_SPECIALS:]

    def id(self, token: str) -> int:
        return self.token_to_id.get(token, UNK_ID)

    def save(self, path):
        Path(path).write_text("\n".join(self.id_to_token) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path, name=None):
        path = Path(path)
        tokens = path.read_text(encoding="utf-8").rstrip("\n").split("\n")
        return cls(name or path.stem, tokens)


@dataclass
class TokenSequence:
    vocab_name: str
    ids: list[int]

    def __len__(self):
        return len(self.ids)

    def check(self, vocab: Vocabulary):
        bad = [i for i in self.ids if not 0 <= i < len(vocab)]
        if bad:
            raise ValidationError(f"ids {bad[:5]} out of range for {vocab!r}")


def collapse_repeats(seq: ClusterSequence) -> ClusterSequence:
    if not seq.ids:
        raise ValidationError(f"{seq.utterance_id}: empty cluster sequence")
    out = [seq.ids[0]]
    for i in seq.ids[1:]:
        if i != out[-1]:
            out.append(i)
    return ClusterSequence(seq.utterance_id, out)


def upsample_text(t: TokenSequence, factor: int) -> TokenSequence:
    """Repeat each token ``factor`` times in place: ab -> aaaabbbb for 4."""
    if factor < 1:
        raise ConfigError(f"up-sampling factor must be >= 1, got {factor}")
    return TokenSequence(t.vocab_name, [i for i in t.ids for _ in range(factor)])


class JointVocabulary(Vocabulary):
    """Speech and source-text tokens behind one id space.

    Layout: specials, then speech tokens (``spe:`` prefix) in their original
    order, then text tokens (``src:`` prefix) in their original order.
    """

    def __init__(self, name, tokens, n_speech: int):
        super().__init__(name, tokens)
        self.n_speech = n_speech

    @property
    def n_text(self):
        return len(self) - NUM_SPECIALS - self.n_speech

    def speech_id(self, spe_id: int) -> int:
        # speech tokens directly follow the shared specials, so ids carry over
        return spe_id

    def text_id(self, src_id: int) -> int:
        return src_id if src_id < NUM_SPECIALS else src_id + self.n_speech

    def is_speech(self, cross_id: int) -> bool:
        return NUM_SPECIALS <= cross_id < NUM_SPECIALS + self.n_speech

    def is_text(self, cross_id: int) -> bool:
        return cross_id >= NUM_SPECIALS + self.n_speech

    def map_speech(self, t: TokenSequence) -> TokenSequence:
        return TokenSequence(self.name, [self.speech_id(i) for i in t.ids])

    def map_text(self, t: TokenSequence) -> TokenSequence:
        return TokenSequence(self.name, [self.text_id(i) for i in t.ids])

    @classmethod
    def load(cls, path, name=None):
        v = Vocabulary.load(path, name)
        n_speech = sum(1 for t in v.regular_tokens if t.startswith(SPEECH_PREFIX))
        return cls(v.name, v.id_to_token, n_speech)


def build_joint_vocab(v_spe: Vocabulary, v_src: Vocabulary, name: str = "cross") -> JointVocabulary:
    tokens = list(SPECIALS)
    tokens += [SPEECH_PREFIX + t for t in v_spe.regular_tokens]
    tokens += [TEXT_PREFIX + t for t in v_src.regular_tokens]
    if len(set(tokens)) != len(tokens):
        raise HardMTError("namespaced speech/text tokens collide")
    return JointVocabulary(name, tokens, len(v_spe) - NUM_SPECIALS)
