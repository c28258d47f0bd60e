"""Common-direction estimation and orthogonal score decomposition.

Text embeddings cluster around a common direction V (the cone effect).
Splitting an embedding as c_perp + eta*V splits the preference score into
a text-relevant part C_X . c_perp and a text-irrelevant part eta*(C_X . V).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .encoders import encode_image
from .errors import DegenerateCorpusError
from .preference import PreferenceModel, text_embedding
from .segmentation import RawPrompt, normalize_text


@dataclass(frozen=True)
class PromptCorpus:
    prompts: tuple[RawPrompt, ...]
    source: str = ""

    def __post_init__(self):
        if not self.prompts:
            raise ValueError("empty prompt corpus")

    @classmethod
    def from_texts(cls, texts, source: str = "") -> "PromptCorpus":
        seen, prompts = set(), []
        for t in texts:
            key = normalize_text(t).lower()
            if key in seen:
                continue
            seen.add(key)
            prompts.append(RawPrompt(t))
        return cls(prompts=tuple(prompts), source=source)


@dataclass
class CommonDirection:
    V: torch.Tensor  # unit vector, [d_e]
    corpus_size: int
    encoder_version: int

    def __post_init__(self):
        if abs(float(self.V.norm()) - 1.0) > 1e-6:
            raise ValueError("common direction must be unit norm")


@dataclass
class DecomposedEmbedding:
    c_perp: torch.Tensor
    eta: float
    direction: CommonDirection


def corpus_embeddings(
    corpus: PromptCorpus, m: PreferenceModel, mode: str = "segment_avg"
) -> torch.Tensor:
    with torch.no_grad():
        return torch.stack([text_embedding(p, m, mode) for p in corpus.prompts])


def estimate_common_direction(
    corpus: PromptCorpus, m: PreferenceModel, mode: str = "segment_avg"
) -> CommonDirection:
    mean = corpus_embeddings(corpus, m, mode).mean(dim=0)
    norm = float(mean.norm())
    if norm <= 1e-8:
        raise DegenerateCorpusError(f"corpus mean embedding norm {norm:.3e} ~ 0")
    return CommonDirection(
        V=mean / norm,
        corpus_size=len(corpus.prompts),
        encoder_version=m.text.param_version,
    )


def decompose(c_p: torch.Tensor, dir: CommonDirection) -> DecomposedEmbedding:
    eta = float(c_p @ dir.V)
    return DecomposedEmbedding(c_perp=c_p - eta * dir.V, eta=eta, direction=dir)


def decomposed_scores(
    x, p: RawPrompt, m: PreferenceModel, dir: CommonDirection
) -> tuple[float, float, float]:
    """(full, relevant, irrelevant) with full = relevant + irrelevant."""
    with torch.no_grad():
        c_x = encode_image(x, m.image)
        c_p = text_embedding(p, m, "segment_avg")
    dec = decompose(c_p, dir)
    relevant = float(c_x @ dec.c_perp)
    irrelevant = dec.eta * float(c_x @ dir.V)
    return relevant + irrelevant, relevant, irrelevant


def eta_statistics(
    corpus: PromptCorpus,
    m: PreferenceModel,
    dir: CommonDirection,
    bins: int = 20,
    mode: str = "segment_avg",
) -> dict:
    etas = (corpus_embeddings(corpus, m, mode) @ dir.V).numpy()
    hist, edges = np.histogram(etas, bins=bins)
    return {
        "mean": float(etas.mean()),
        "min": float(etas.min()),
        "max": float(etas.max()),
        "histogram": hist.tolist(),
        "bin_edges": edges.tolist(),
    }


@dataclass
class ScoreTable:
    full: np.ndarray  # [N, N], rows = prompts, cols = images
    relevant: np.ndarray
    irrelevant: np.ndarray

    def summary(self) -> dict:
        out = {}
        n = self.full.shape[0]
        for name, mat in (
            ("full", self.full),
            ("relevant", self.relevant),
            ("irrelevant", self.irrelevant),
        ):
            diag = float(np.mean(np.diag(mat)))
            if n > 1:
                off = float(mat[~np.eye(n, dtype=bool)].mean())
            else:
                off = None
            out[name] = {"diagonal_mean": diag, "off_diagonal_mean": off}
        return out


def score_table(
    images: list, prompts: list[RawPrompt], m: PreferenceModel, dir: CommonDirection
) -> ScoreTable:
    if len(images) != len(prompts):
        raise ValueError(f"{len(images)} images vs {len(prompts)} prompts")
    with torch.no_grad():
        c_x = torch.stack([encode_image(x, m.image) for x in images])  # [N, d_e]
        c_p = torch.stack(
            [text_embedding(p, m, "segment_avg") for p in prompts]
        )  # [N, d_e]
    eta = c_p @ dir.V  # [N]
    c_perp = c_p - eta[:, None] * dir.V
    full = (c_p @ c_x.T).numpy()
    relevant = (c_perp @ c_x.T).numpy()
    irrelevant = (eta[:, None] * (c_x @ dir.V)[None, :]).numpy()
    return ScoreTable(full=full, relevant=relevant, irrelevant=irrelevant)


def export_score_table(table: ScoreTable, directory) -> None:
    """Delimited text matrices plus a JSON summary record."""
    import json
    from pathlib import Path

    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for name in ("full", "relevant", "irrelevant"):
        np.savetxt(directory / f"scores_{name}.tsv", getattr(table, name), delimiter="\t")
    (directory / "summary.json").write_text(json.dumps(table.summary(), indent=2))
