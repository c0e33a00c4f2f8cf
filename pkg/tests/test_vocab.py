import pytest
from hypothesis import given
from hypothesis import strategies as st

from hardmt.errors import ConfigError, ValidationError
from hardmt.kmeans import ClusterSequence
from hardmt.vocab import (BLANK_ID, EOS_ID, NUM_SPECIALS, PAD_ID, SPECIALS, JointVocabulary, TokenSequence,
                          Vocabulary, build_joint_vocab, collapse_repeats, upsample_text)


def test_specials_come_first():
    v = Vocabulary("v", ["x", "y"])
    assert v.id_to_token[:NUM_SPECIALS] == list(SPECIALS)
    assert (PAD_ID, EOS_ID, BLANK_ID) == (0, 2, 4)
    assert v.id("x") == NUM_SPECIALS and v.id("nope") == 3


def test_duplicate_tokens_rejected():
    with pytest.raises(ValidationError):
        Vocabulary("v", ["x", "x"])


def test_collapse_examples():
    assert collapse_repeats(ClusterSequence("u", [3, 3, 3, 5, 5, 3])).ids == [3, 5, 3]
    with pytest.raises(ValidationError):
        collapse_repeats(ClusterSequence("u", []))


@given(st.lists(st.integers(0, 4), min_size=1, max_size=40))
def test_collapse_properties(ids):
    out = collapse_repeats(ClusterSequence("u", ids)).ids
    assert all(a != b for a, b in zip(out, out[1:]))
    assert collapse_repeats(ClusterSequence("u", out)).ids == out
    assert out[0] == ids[0] and out[-1] == ids[-1]


def test_upsample_example():
    assert upsample_text(TokenSequence("s", [7, 8]), 4).ids == [7, 7, 7, 7, 8, 8, 8, 8]
    with pytest.raises(ConfigError):
        upsample_text(TokenSequence("s", [7]), 0)


@given(st.lists(st.integers(5, 20), max_size=20), st.integers(1, 6))
def test_upsample_length_and_collapse(ids, f):
    up = upsample_text(TokenSequence("s", ids), f)
    assert len(up) == f * len(ids)
    if ids:
        assert collapse_repeats(ClusterSequence("u", up.ids)).ids == collapse_repeats(ClusterSequence("u", ids)).ids


def test_joint_vocab_8000():
    spe = Vocabulary("spe", [f"u{i}" for i in range(4000)])
    src = Vocabulary("src", [f"w{i}" for i in range(4000)])
    cross = build_joint_vocab(spe, src)
    assert len(cross) - NUM_SPECIALS == 8000
    assert cross.n_speech == 4000 and cross.n_text == 4000


def test_joint_vocab_keeps_overlapping_tokens_apart():
    spe = Vocabulary("spe", ["a", "b"])
    src = Vocabulary("src", ["a", "c"])
    cross = build_joint_vocab(spe, src)
    assert len(cross) == NUM_SPECIALS + 4
    sa = cross.speech_id(spe.id("a"))
    ta = cross.text_id(src.id("a"))
    assert sa != ta and cross.is_speech(sa) and cross.is_text(ta)


def test_joint_mapping_and_reload(tmp_path):
    spe = Vocabulary("spe", ["a", "b", "c"])
    src = Vocabulary("src", ["x", "y"])
    cross = build_joint_vocab(spe, src)
    for i in range(NUM_SPECIALS, len(spe)):
        assert cross.id_to_token[cross.speech_id(i)] == "spe:" + spe.id_to_token[i]
    for i in range(NUM_SPECIALS, len(src)):
        assert cross.id_to_token[cross.text_id(i)] == "src:" + src.id_to_token[i]
    cross.save(tmp_path / "cross.vocab")
    back = JointVocabulary.load(tmp_path / "cross.vocab")
    assert back == cross and back.n_speech == 3
