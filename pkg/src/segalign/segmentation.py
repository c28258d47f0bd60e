"""Prompt segmentation and closed-vocabulary tokenization.

Long prompts are split into sentence-level segments, each of which is
tokenized independently into a fixed-length id sequence of the form
``<sot> w1 ... wn <eot> <pad> ...``.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from pathlib import Path

from .errors import InvalidPromptError, SegmentOverflowError, UnknownTokenError

SOT_TOKEN = "<sot>"
EOT_TOKEN = "<eot>"
PAD_TOKEN = "<pad>"

_PUNCT = ".!?,"


@dataclass(frozen=True)
class Vocabulary:
    """Closed token vocabulary with explicit special tokens."""

    tokens: tuple[str, ...]
    sot: int
    eot: int
    pad: int
    _index: dict[str, int] = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if len(set(self.tokens)) != len(self.tokens):
            raise ValueError("vocabulary tokens must be unique")
        for name, idx in (("sot", self.sot), ("eot", self.eot), ("pad", self.pad)):
            if not 0 <= idx < len(self.tokens):
                raise ValueError(f"{name} index {idx} out of range")
        if len({self.sot, self.eot, self.pad}) != 3:
            raise ValueError("special token indices must be distinct")
        object.__setattr__(self, "_index", {t: i for i, t in enumerate(self.tokens)})

    @property
    def size(self) -> int:
        return len(self.tokens)

    def index(self, word: str) -> int:
        try:
            return self._index[word]
        except KeyError:
            raise UnknownTokenError(word) from None

    def __contains__(self, word: str) -> bool:
        return word in self._index

    @classmethod
    def from_words(cls, words) -> "Vocabulary":
        """Build a vocabulary with specials first, then sorted unique words."""
        rest = sorted(set(words) - {SOT_TOKEN, EOT_TOKEN, PAD_TOKEN})
        tokens = (SOT_TOKEN, EOT_TOKEN, PAD_TOKEN, *rest)
        return cls(tokens=tokens, sot=0, eot=1, pad=2)

    def save(self, path) -> None:
        lines = [f"#sot {self.sot}", f"#eot {self.eot}", f"#pad {self.pad}"]
        lines += list(self.tokens)
        Path(path).write_text("\n".join(lines) + "\n")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        lines = Path(path).read_text().splitlines()
        if len(lines) < 4 or not all(lines[i].startswith("#") for i in range(3)):
            raise ValueError(f"malformed vocabulary file: {path}")
        specials = {}
        for line in lines[:3]:
            name, idx = line[1:].split()
            specials[name] = int(idx)
        return cls(tokens=tuple(lines[3:]), **specials)


@dataclass(frozen=True)
class RawPrompt:
    """A prompt as received, optionally paired with its short form."""

    text: str
    short_text: str | None = None

    def __post_init__(self):
        if not self.text.strip():
            raise InvalidPromptError("prompt text is empty")


@dataclass(frozen=True)
class TokenizedSegment:
    token_ids: tuple[int, ...]
    content_len: int
    text: str


@dataclass(frozen=True)
class SegmentedPrompt:
    segments: tuple[TokenizedSegment, ...]

    @property
    def K(self) -> int:
        return len(self.segments)


@dataclass(frozen=True)
class SegmentationPolicy:
    """Sentence-delimited splitting with a hard per-segment token cap."""

    l_seg: int = 12

    @property
    def max_content(self) -> int:
        return self.l_seg - 2


def normalize_text(text: str) -> str:
    return re.sub(r"\s+", " ", text).strip()


def _strip_word(word: str) -> str:
    return word.strip(_PUNCT).lower()


def content_words(text: str) -> list[str]:
    """Lowercased, punctuation-stripped words; empties dropped."""
    return [w for w in (_strip_word(t) for t in text.split()) if w]


def split_into_segments(prompt: RawPrompt, policy: SegmentationPolicy) -> list[str]:
    """Split into sentence segments; hard-split any sentence over the cap."""
    text = normalize_text(prompt.text)
    if not text:
        raise InvalidPromptError("prompt is empty after normalization")

    sentences: list[list[str]] = []
    current: list[str] = []
    for word in text.split():
        current.append(word)
        if word[-1] in ".!?":
            sentences.append(current)
            current = []
    if current:
        sentences.append(current)

    segments: list[str] = []
    for words in sentences:
        countable = [w for w in words if _strip_word(w)]
        if len(countable) <= policy.max_content:
            segments.append(" ".join(words))
            continue
        # Hard split at the cap, counting only tokenizable words.
        chunk: list[str] = []
        n = 0
        for word in words:
            chunk.append(word)
            if _strip_word(word):
                n += 1
            if n == policy.max_content:
                segments.append(" ".join(chunk))
                chunk, n = [], 0
        if chunk:
            segments.append(" ".join(chunk))
    segments = [s for s in segments if content_words(s)]
    if not segments:
        raise InvalidPromptError("prompt has no tokenizable content")
    return segments


def tokenize_segment(text: str, vocab: Vocabulary, l_seg: int) -> TokenizedSegment:
    """Lay out ``<sot> w1 ... wn <eot> <pad> ...`` at fixed length l_seg."""
    words = content_words(text)
    if len(words) > l_seg - 2:
        raise SegmentOverflowError(
            f"{len(words)} content tokens exceed cap {l_seg - 2}; pre-split the text"
        )
    ids = [vocab.sot] + [vocab.index(w) for w in words] + [vocab.eot]
    ids += [vocab.pad] * (l_seg - len(ids))
    return TokenizedSegment(token_ids=tuple(ids), content_len=len(words), text=text)


def segment_prompt(
    prompt: RawPrompt, vocab: Vocabulary, policy: SegmentationPolicy
) -> SegmentedPrompt:
    pieces = split_into_segments(prompt, policy)
    return SegmentedPrompt(
        segments=tuple(tokenize_segment(p, vocab, policy.l_seg) for p in pieces)
    )


def detokenize(seg: TokenizedSegment, vocab: Vocabulary) -> str:
    """Content words of a segment, joined with single spaces."""
    content = seg.token_ids[1 : 1 + seg.content_len]
    return " ".join(vocab.tokens[i] for i in content)
