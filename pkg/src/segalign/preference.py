"""Segment-level preference scoring and Bradley-Terry training.

The score of an image against a prompt is the dot product of the pooled
image embedding with either the single-pass text embedding (first-segment
capped) or the average of per-segment text embeddings. Training minimizes
the negative log-likelihood -log sigmoid(tau * (S_win - S_lose)) in one of
four variants: SINGLE, SEG, SEG_A (segment NLL + short-text NLL) and SEG_O
(like SEG_A but the segment term scores against the component of each
segment embedding orthogonal to a running common direction).
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F

from . import datakit
from .encoders import (
    DTYPE,
    ImageEncoder,
    TextEncoder,
    encode_image,
    encode_segment,
    encode_tokens_batch,
)
from .errors import (
    DivergenceError,
    InvalidRecordError,
    MissingDirectionError,
    TrainingFailureError,
)
from .segmentation import (
    RawPrompt,
    SegmentationPolicy,
    Vocabulary,
    content_words,
    split_into_segments,
    tokenize_segment,
)


class LossVariant(enum.Enum):
    SINGLE = "single"
    SEG = "seg"
    SEG_A = "seg-a"
    SEG_O = "seg-o"


@dataclass
class PreferenceModel:
    text: TextEncoder
    image: ImageEncoder
    vocab: Vocabulary
    policy: SegmentationPolicy
    tau: float = 10.0

    def __post_init__(self):
        if self.tau <= 0:
            raise ValueError("temperature must be positive")


@dataclass(frozen=True)
class ImagePair:
    """One preference record: prompt plus winning and losing images."""

    prompt: RawPrompt
    image_win: np.ndarray
    image_lose: np.ndarray

    def __post_init__(self):
        if np.array_equal(self.image_win, self.image_lose):
            raise InvalidRecordError("winner and loser images are identical")


def single_capped_segment(p: RawPrompt, m: PreferenceModel):
    """Token-exact first-L_seg-2 capped encoding used by mode='single'."""
    words = content_words(p.text)[: m.policy.max_content]
    return tokenize_segment(" ".join(words), m.vocab, m.policy.l_seg)


def prompt_segments(p: RawPrompt, m: PreferenceModel):
    pieces = split_into_segments(p, m.policy)
    return [tokenize_segment(s, m.vocab, m.policy.l_seg) for s in pieces]


def text_embedding(p: RawPrompt, m: PreferenceModel, mode: str) -> torch.Tensor:
    """Pooled prompt embedding: unit-norm for 'single', segment average
    (norm <= 1) for 'segment_avg'."""
    if mode == "single":
        return encode_segment(single_capped_segment(p, m), m.text).pooled
    if mode == "segment_avg":
        segs = prompt_segments(p, m)
        pooled = [encode_segment(s, m.text).pooled for s in segs]
        return torch.stack(pooled).mean(dim=0)
    raise ValueError(f"unknown mode {mode!r}")


def score(x, p: RawPrompt, m: PreferenceModel, mode: str = "segment_avg") -> float:
    with torch.no_grad():
        c_x = encode_image(x, m.image)
        return float(c_x @ text_embedding(p, m, mode))


def score_segments(x, p: RawPrompt, m: PreferenceModel) -> list[float]:
    with torch.no_grad():
        c_x = encode_image(x, m.image)
        return [
            float(c_x @ encode_segment(s, m.text).pooled)
            for s in prompt_segments(p, m)
        ]


def _nll(s_win: torch.Tensor, s_lose: torch.Tensor, tau: float) -> torch.Tensor:
    return -F.logsigmoid(tau * (s_win - s_lose))


def preference_loss(
    pair: ImagePair,
    m: PreferenceModel,
    variant: LossVariant,
    V: torch.Tensor | None = None,
) -> torch.Tensor:
    c_win = encode_image(pair.image_win, m.image)
    c_lose = encode_image(pair.image_lose, m.image)

    if variant is LossVariant.SINGLE:
        c_p = text_embedding(pair.prompt, m, "single")
        return _nll(c_win @ c_p, c_lose @ c_p, m.tau)

    if variant is LossVariant.SEG:
        c_p = text_embedding(pair.prompt, m, "segment_avg")
        return _nll(c_win @ c_p, c_lose @ c_p, m.tau)

    # SEG_A / SEG_O pair the segment term with a single-pass term on the
    # original short text.
    if pair.prompt.short_text is None:
        raise InvalidRecordError(f"{variant.value} needs short_text on the prompt")
    c_seg = text_embedding(pair.prompt, m, "segment_avg")
    if variant is LossVariant.SEG_O:
        if V is None:
            raise MissingDirectionError("SEG_O requires a common direction V")
        c_seg = c_seg - (c_seg @ V) * V
    elif variant is not LossVariant.SEG_A:
        raise ValueError(f"unknown variant {variant}")
    seg_term = _nll(c_win @ c_seg, c_lose @ c_seg, m.tau)
    c_short = text_embedding(RawPrompt(pair.prompt.short_text), m, "single")
    short_term = _nll(c_win @ c_short, c_lose @ c_short, m.tau)
    return seg_term + short_term


# ---------------------------------------------------------------------------
# Training


@dataclass
class PreferenceTrainConfig:
    seed: int = 0
    steps: int = 500
    batch_size: int = 256
    lr: float = 3e-3
    variant: LossVariant = LossVariant.SEG_O
    tau: float = 10.0
    ema_decay: float = 0.99
    holdout_fraction: float = 0.1
    d: int = 32
    d_e: int = 16
    l_seg: int = 12
    n_layers: int = 1
    image_size: int = 24
    image_width: int = 48


@dataclass
class _PairTensors:
    seg_ids: torch.Tensor  # [S, L]
    seg_lens: torch.Tensor  # [S]
    seg_prompt: torch.Tensor  # [S] prompt index of each segment
    seg_counts: torch.Tensor  # [P] segments per prompt
    short_ids: torch.Tensor  # [P, L]
    short_lens: torch.Tensor  # [P]
    img_win: torch.Tensor  # [P, H, W, C]
    img_lose: torch.Tensor  # [P, H, W, C]

    def __len__(self):
        return self.short_ids.shape[0]


def render_pair(pair: datakit.PreferencePair, image_size: int) -> ImagePair:
    return ImagePair(
        prompt=RawPrompt(pair.prompt, short_text=pair.short_prompt),
        image_win=datakit.render_scene(pair.scene_win, image_size),
        image_lose=datakit.render_scene(pair.scene_lose, image_size),
    )


def build_pair_tensors(
    pairs: list[datakit.PreferencePair],
    vocab: Vocabulary,
    policy: SegmentationPolicy,
    image_size: int,
) -> _PairTensors:
    seg_ids, seg_lens, seg_prompt, seg_counts = [], [], [], []
    short_ids, short_lens, wins, loses = [], [], [], []
    for i, pair in enumerate(pairs):
        prompt = RawPrompt(pair.prompt, short_text=pair.short_prompt)
        pieces = split_into_segments(prompt, policy)
        seg_counts.append(len(pieces))
        for piece in pieces:
            seg = tokenize_segment(piece, vocab, policy.l_seg)
            seg_ids.append(seg.token_ids)
            seg_lens.append(seg.content_len)
            seg_prompt.append(i)
        words = content_words(pair.short_prompt)[: policy.max_content]
        short = tokenize_segment(" ".join(words), vocab, policy.l_seg)
        short_ids.append(short.token_ids)
        short_lens.append(short.content_len)
        wins.append(datakit.render_scene(pair.scene_win, image_size))
        loses.append(datakit.render_scene(pair.scene_lose, image_size))
    return _PairTensors(
        seg_ids=torch.tensor(seg_ids, dtype=torch.long),
        seg_lens=torch.tensor(seg_lens, dtype=torch.long),
        seg_prompt=torch.tensor(seg_prompt, dtype=torch.long),
        seg_counts=torch.tensor(seg_counts, dtype=torch.long),
        short_ids=torch.tensor(short_ids, dtype=torch.long),
        short_lens=torch.tensor(short_lens, dtype=torch.long),
        img_win=torch.tensor(np.stack(wins), dtype=DTYPE),
        img_lose=torch.tensor(np.stack(loses), dtype=DTYPE),
    )


def _segment_avg_embeddings(
    model: PreferenceModel, data: _PairTensors, prompt_idx: torch.Tensor
) -> torch.Tensor:
    """C_P^seg for the selected prompts, [B, d_e]."""
    sel = torch.isin(data.seg_prompt, prompt_idx)
    _, pooled = encode_tokens_batch(model.text, data.seg_ids[sel], data.seg_lens[sel])
    # Map each selected segment's prompt id to its batch row.
    remap = torch.full((len(data),), -1, dtype=torch.long)
    remap[prompt_idx] = torch.arange(len(prompt_idx))
    rows = remap[data.seg_prompt[sel]]
    sums = torch.zeros(len(prompt_idx), pooled.shape[1], dtype=pooled.dtype)
    sums.index_add_(0, rows, pooled)
    return sums / data.seg_counts[prompt_idx].to(pooled.dtype)[:, None]


def batch_loss(
    model: PreferenceModel,
    data: _PairTensors,
    prompt_idx: torch.Tensor,
    variant: LossVariant,
    V: torch.Tensor | None = None,
) -> tuple[torch.Tensor, torch.Tensor]:
    """Mean NLL over the batch plus the batch-mean prompt embedding
    (detached, for the EMA direction update)."""
    c_win = model.image(data.img_win[prompt_idx])
    c_lose = model.image(data.img_lose[prompt_idx])

    if variant is LossVariant.SINGLE:
        _, c_p = encode_tokens_batch(
            model.text, data.short_ids[prompt_idx], data.short_lens[prompt_idx]
        )
        loss = _nll((c_win * c_p).sum(1), (c_lose * c_p).sum(1), model.tau).mean()
        return loss, c_p.detach().mean(dim=0)

    c_seg = _segment_avg_embeddings(model, data, prompt_idx)
    batch_mean = c_seg.detach().mean(dim=0)
    if variant is LossVariant.SEG:
        loss = _nll((c_win * c_seg).sum(1), (c_lose * c_seg).sum(1), model.tau).mean()
        return loss, batch_mean

    c_text = c_seg
    if variant is LossVariant.SEG_O:
        if V is None:
            raise MissingDirectionError("SEG_O requires a common direction V")
        c_text = c_seg - (c_seg @ V)[:, None] * V
    seg_term = _nll((c_win * c_text).sum(1), (c_lose * c_text).sum(1), model.tau)
    _, c_short = encode_tokens_batch(
        model.text, data.short_ids[prompt_idx], data.short_lens[prompt_idx]
    )
    short_term = _nll(
        (c_win * c_short).sum(1), (c_lose * c_short).sum(1), model.tau
    )
    return (seg_term + short_term).mean(), batch_mean


@torch.no_grad()
def evaluate_pairs(
    model: PreferenceModel, data: _PairTensors, idx: torch.Tensor
) -> tuple[float, float]:
    """Held-out (mean SEG NLL, pairwise accuracy) under segment_avg scoring."""
    c_win = model.image(data.img_win[idx])
    c_lose = model.image(data.img_lose[idx])
    c_seg = _segment_avg_embeddings(model, data, idx)
    s_win = (c_win * c_seg).sum(1)
    s_lose = (c_lose * c_seg).sum(1)
    nll = _nll(s_win, s_lose, model.tau).mean()
    acc = (s_win > s_lose).to(DTYPE).mean()
    return float(nll), float(acc)


def new_preference_model(cfg: PreferenceTrainConfig, vocab: Vocabulary) -> PreferenceModel:
    text = TextEncoder(
        vocab.size,
        d=cfg.d,
        d_e=cfg.d_e,
        l_seg=cfg.l_seg,
        n_layers=cfg.n_layers,
        seed=cfg.seed,
    )
    image = ImageEncoder(
        image_size=cfg.image_size,
        width=cfg.image_width,
        d_e=cfg.d_e,
        seed=cfg.seed + 1,
    )
    return PreferenceModel(
        text=text,
        image=image,
        vocab=vocab,
        policy=SegmentationPolicy(l_seg=cfg.l_seg),
        tau=cfg.tau,
    )


@dataclass
class PreferenceTrainResult:
    model: PreferenceModel
    direction: torch.Tensor | None  # final EMA common direction (SEG_O)
    losses: list[float] = field(default_factory=list)
    holdout_nll_init: float = 0.0
    holdout_nll_final: float = 0.0
    holdout_accuracy: float = 0.0


def train_preference_model(
    pairs: list[datakit.PreferencePair],
    cfg: PreferenceTrainConfig,
    vocab: Vocabulary | None = None,
) -> PreferenceTrainResult:
    if not pairs:
        raise ValueError("empty preference dataset")
    vocab = vocab or datakit.build_vocabulary()
    model = new_preference_model(cfg, vocab)
    data = build_pair_tensors(pairs, vocab, model.policy, cfg.image_size)

    gen = torch.Generator().manual_seed(cfg.seed)
    n = len(data)
    perm = torch.randperm(n, generator=gen)
    n_hold = max(1, int(n * cfg.holdout_fraction)) if cfg.holdout_fraction > 0 else 0
    hold_idx, train_idx = perm[:n_hold], perm[n_hold:]
    if len(train_idx) == 0:
        raise ValueError("no training pairs left after holdout split")

    params = list(model.text.parameters()) + list(model.image.parameters())
    opt = torch.optim.Adam(params, lr=cfg.lr)

    V: torch.Tensor | None = None
    nll0, _ = evaluate_pairs(model, data, hold_idx) if n_hold else (float("inf"), 0.0)
    losses = []
    for step in range(cfg.steps):
        idx = train_idx[
            torch.randint(len(train_idx), (cfg.batch_size,), generator=gen)
        ]
        if cfg.variant is LossVariant.SEG_O and V is None:
            with torch.no_grad():
                mean0 = _segment_avg_embeddings(model, data, idx).mean(dim=0)
            V = mean0 / mean0.norm()
        loss, batch_mean = batch_loss(model, data, idx, cfg.variant, V)
        if not torch.isfinite(loss):
            raise DivergenceError(step, float(loss))
        opt.zero_grad()
        loss.backward()
        opt.step()
        model.text.bump_version()
        losses.append(float(loss.detach()))
        if cfg.variant is LossVariant.SEG_O:
            V = cfg.ema_decay * V + (1 - cfg.ema_decay) * batch_mean
            V = V / V.norm()

    nll1, acc = evaluate_pairs(model, data, hold_idx) if n_hold else (0.0, 0.0)
    if cfg.steps > 0 and n_hold and not nll1 < nll0:
        raise TrainingFailureError(
            f"held-out NLL did not improve: {nll0:.4f} -> {nll1:.4f}"
        )
    return PreferenceTrainResult(
        model=model,
        direction=None if V is None else V.detach(),
        losses=losses,
        holdout_nll_init=nll0,
        holdout_nll_final=nll1,
        holdout_accuracy=acc,
    )
