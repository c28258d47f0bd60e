import pytest
from hypothesis import given, strategies as st

from segalign.errors import (
    InvalidPromptError,
    SegmentOverflowError,
    UnknownTokenError,
)
from segalign.segmentation import (
    RawPrompt,
    SegmentationPolicy,
    Vocabulary,
    content_words,
    detokenize,
    segment_prompt,
    split_into_segments,
    tokenize_segment,
)

POLICY = SegmentationPolicy(l_seg=12)

WORDS = ["a", "cat", "dog", "sat", "on", "the", "mat", "hello"]
VOCAB = Vocabulary.from_words(WORDS)


def test_two_terminal_periods_force_two_segments():
    assert split_into_segments(RawPrompt("A cat. A dog."), POLICY) == [
        "A cat.",
        "A dog.",
    ]


def test_no_terminal_punctuation_single_segment():
    assert split_into_segments(RawPrompt("hello"), POLICY) == ["hello"]


def test_overlong_sentence_hard_split_at_cap():
    # 2 * (L_seg - 2) = 20 content words in one sentence.
    words = (WORDS[1:6] * 4)[:20]
    text = " ".join(words) + "."
    segs = split_into_segments(RawPrompt(text), POLICY)
    assert len(segs) == 2
    assert [len(content_words(s)) for s in segs] == [10, 10]


def test_empty_prompt_rejected():
    with pytest.raises(InvalidPromptError):
        RawPrompt("   ")
    with pytest.raises(InvalidPromptError):
        split_into_segments(RawPrompt("..."), POLICY)


def test_tokenize_layout():
    vocab = Vocabulary.from_words(["a", "cat"])
    seg = tokenize_segment("a cat", vocab, 6)
    assert seg.token_ids == (
        vocab.sot,
        vocab.index("a"),
        vocab.index("cat"),
        vocab.eot,
        vocab.pad,
        vocab.pad,
    )
    assert seg.content_len == 2


def test_tokenize_empty_segment():
    seg = tokenize_segment("", VOCAB, 6)
    assert seg.token_ids[0] == VOCAB.sot
    assert seg.token_ids[1] == VOCAB.eot
    assert all(i == VOCAB.pad for i in seg.token_ids[2:])
    assert seg.content_len == 0


def test_out_of_vocabulary_word_named_in_error():
    with pytest.raises(UnknownTokenError, match="zebra"):
        tokenize_segment("a zebra", VOCAB, 6)


def test_overflow_requires_presplit():
    with pytest.raises(SegmentOverflowError):
        tokenize_segment("a cat sat on the mat", VOCAB, 4)


def test_concatenation_reproduces_normalized_text():
    text = "A cat  sat on   the mat. Hello."
    segs = split_into_segments(RawPrompt(text), POLICY)
    assert " ".join(segs) == "A cat sat on the mat. Hello."


@given(
    st.lists(
        st.lists(st.sampled_from(WORDS), min_size=1, max_size=25), min_size=1, max_size=4
    )
)
def test_round_trip_idempotence(sentences):
    text = " ".join(" ".join(s) + "." for s in sentences)
    segs = split_into_segments(RawPrompt(text), POLICY)
    again = split_into_segments(RawPrompt(" ".join(segs)), POLICY)
    assert segs == again


@given(st.lists(st.sampled_from(WORDS), min_size=0, max_size=10))
def test_tokenized_segment_invariants(words):
    seg = tokenize_segment(" ".join(words), VOCAB, 12)
    ids = seg.token_ids
    assert ids.count(VOCAB.sot) == 1 and ids[0] == VOCAB.sot
    assert ids.count(VOCAB.eot) == 1
    eot_pos = ids.index(VOCAB.eot)
    assert eot_pos == seg.content_len + 1
    assert all(i == VOCAB.pad for i in ids[eot_pos + 1 :])


@given(st.lists(st.sampled_from(WORDS), min_size=21, max_size=40))
def test_hard_split_reconstruction(words):
    text = " ".join(words) + "."
    prompt = RawPrompt(text)
    sp = segment_prompt(prompt, VOCAB, POLICY)
    assert sp.K >= 2
    rebuilt = " ".join(detokenize(s, VOCAB) for s in sp.segments)
    assert rebuilt.split() == content_words(text)


def test_vocabulary_save_load_round_trip(tmp_path):
    path = tmp_path / "vocab.txt"
    VOCAB.save(path)
    loaded = Vocabulary.load(path)
    assert loaded == VOCAB


def test_vocabulary_invariants():
    with pytest.raises(ValueError):
        Vocabulary(tokens=("<sot>", "<eot>", "<pad>"), sot=0, eot=0, pad=2)
    with pytest.raises(ValueError):
        Vocabulary(tokens=("<sot>", "<eot>"), sot=0, eot=1, pad=5)
    with pytest.raises(UnknownTokenError):
        VOCAB.index("nope")
