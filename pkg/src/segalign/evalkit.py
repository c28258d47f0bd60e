"""Retrieval and alignment evaluation on image/prompt corpora."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .decomposition import CommonDirection
from .encoders import encode_image
from .errors import MissingDirectionError
from .preference import PreferenceModel, score_segments, text_embedding
from .segmentation import RawPrompt, split_into_segments


@dataclass(frozen=True)
class RetrievalReport:
    r_at_1: float
    N: int
    mode: str  # "single" | "segment_avg"
    embedding: str  # "full" | "relevant"


@dataclass
class AlignmentReport:
    scores: np.ndarray  # [K, N_images]
    best: list[int]  # argmax per segment, lowest index on ties


def _text_matrix(
    prompts: list[RawPrompt],
    m: PreferenceModel,
    dir: CommonDirection | None,
    mode: str,
    embedding: str,
) -> torch.Tensor:
    with torch.no_grad():
        c_p = torch.stack([text_embedding(p, m, mode) for p in prompts])
    if embedding == "relevant":
        if dir is None:
            raise MissingDirectionError("relevant embedding requires a direction")
        c_p = c_p - (c_p @ dir.V)[:, None] * dir.V
    elif embedding != "full":
        raise ValueError(f"unknown embedding {embedding!r}")
    return c_p


def retrieval_r_at_1(
    pairs: list[tuple[np.ndarray, RawPrompt]],
    m: PreferenceModel,
    dir: CommonDirection | None = None,
    mode: str = "segment_avg",
    embedding: str = "full",
) -> RetrievalReport:
    """Text-to-image R@1 over index-aligned (image, prompt) pairs.

    For each prompt, all N images are ranked by score; a hit means the
    paired image ranks first. Ties break to the lowest image index.
    """
    if len(pairs) < 2:
        raise ValueError("need at least 2 pairs for retrieval")
    images = [img for img, _ in pairs]
    prompts = [p for _, p in pairs]
    c_p = _text_matrix(prompts, m, dir, mode, embedding)
    with torch.no_grad():
        c_x = torch.stack([encode_image(img, m.image) for img in images])
    scores = (c_p @ c_x.T).numpy()
    hits = (np.argmax(scores, axis=1) == np.arange(len(pairs))).sum()
    return RetrievalReport(
        r_at_1=float(hits) / len(pairs), N=len(pairs), mode=mode, embedding=embedding
    )


def segment_alignment_report(
    prompt: RawPrompt, candidates: list[np.ndarray], m: PreferenceModel
) -> AlignmentReport:
    """Per-segment scores against each candidate image, with argmax rows."""
    if not candidates:
        raise ValueError("need at least one candidate image")
    cols = [score_segments(img, prompt, m) for img in candidates]
    scores = np.array(cols).T  # [K, N]
    return AlignmentReport(scores=scores, best=[int(i) for i in np.argmax(scores, axis=1)])


def truncate_to_sentences(p: RawPrompt, cap: int, m: PreferenceModel) -> RawPrompt:
    """First `cap` sentences of the prompt; cut sentences discarded whole."""
    pieces = split_into_segments(p, m.policy)
    return RawPrompt(" ".join(pieces[:cap]), short_text=p.short_text)


def length_sweep(
    pairs: list[tuple[np.ndarray, RawPrompt]],
    m: PreferenceModel,
    dir: CommonDirection | None,
    max_sentences: list[int],
    mode: str = "segment_avg",
    embedding: str = "relevant",
) -> dict[int, RetrievalReport]:
    reports = {}
    for cap in max_sentences:
        capped = [(img, truncate_to_sentences(p, cap, m)) for img, p in pairs]
        reports[cap] = retrieval_r_at_1(capped, m, dir, mode, embedding)
    return reports
