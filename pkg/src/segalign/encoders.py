"""Toy dual encoders and the segment-merge rules.

The text encoder produces per-token embeddings (consumed by the denoiser
via concatenated conditioning) and a pooled unit-norm embedding per
segment (consumed by the preference model). Merging drops every <eot> and
per-segment <pad> embedding, keeps every <sot>, and fills the remainder
with a dedicated pad* embedding computed from an empty segment.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
from torch import nn

from .errors import ConditioningOverflowError, InvalidImageError
from .segmentation import TokenizedSegment, Vocabulary, tokenize_segment

DTYPE = torch.float64

SOT = "SOT"
CONTENT = "CONTENT"
PADSTAR = "PADSTAR"


@dataclass
class SegmentEmbeddings:
    """Per-token and pooled embeddings of one tokenized segment."""

    per_token: torch.Tensor  # [L_seg, d]
    pooled: torch.Tensor  # [d_e], unit norm
    segment: TokenizedSegment


@dataclass
class ConditioningSequence:
    embeddings: torch.Tensor  # [N_cond, d]
    tags: tuple[str, ...]

    def __post_init__(self):
        assert len(self.tags) == self.embeddings.shape[0]


def _unit_guard(v: torch.Tensor, eps: float = 1e-12) -> torch.Tensor:
    """L2-normalize; a (near-)zero vector falls back to the first basis vector."""
    norm = v.norm(dim=-1, keepdim=True)
    fallback = torch.zeros_like(v)
    fallback[..., 0] = 1.0
    return torch.where(norm > eps, v / norm.clamp_min(eps), fallback)


class _Block(nn.Module):
    """Single-head self-attention + MLP with residuals."""

    def __init__(self, d: int):
        super().__init__()
        self.norm1 = nn.LayerNorm(d, dtype=DTYPE)
        self.qkv = nn.Linear(d, 3 * d, dtype=DTYPE)
        self.out = nn.Linear(d, d, dtype=DTYPE)
        self.norm2 = nn.LayerNorm(d, dtype=DTYPE)
        self.mlp = nn.Sequential(
            nn.Linear(d, 2 * d, dtype=DTYPE),
            nn.SiLU(),
            nn.Linear(2 * d, d, dtype=DTYPE),
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h = self.norm1(x)
        q, k, v = self.qkv(h).chunk(3, dim=-1)
        attn = torch.softmax(q @ k.transpose(-2, -1) / math.sqrt(q.shape[-1]), dim=-1)
        x = x + self.out(attn @ v)
        return x + self.mlp(self.norm2(x))


class TextEncoder(nn.Module):
    """Token embeddings -> contextualizer -> per-token outputs of width d.

    Pooled segment embeddings are projections to width d_e, L2-normalized.
    """

    def __init__(
        self,
        vocab_size: int,
        d: int = 32,
        d_e: int = 16,
        l_seg: int = 12,
        n_layers: int = 1,
        seed: int = 0,
    ):
        super().__init__()
        self.d, self.d_e, self.l_seg = d, d_e, l_seg
        torch.manual_seed(seed)
        self.token_embedding = nn.Embedding(vocab_size, d, dtype=DTYPE)
        self.position_embedding = nn.Parameter(torch.randn(l_seg, d, dtype=DTYPE) * 0.02)
        self.blocks = nn.ModuleList(_Block(d) for _ in range(n_layers))
        self.projection = nn.Linear(d, d_e, dtype=DTYPE)
        # Bumped by training loops after each parameter update; keys the
        # pad* cache.
        self.param_version = 0
        self._pad_star_cache: dict[int, torch.Tensor] = {}

    def bump_version(self) -> None:
        self.param_version += 1

    def forward(self, token_ids: torch.Tensor) -> torch.Tensor:
        """token_ids [..., L] -> per-token outputs [..., L, d]."""
        x = self.token_embedding(token_ids) + self.position_embedding[: token_ids.shape[-1]]
        for block in self.blocks:
            x = block(x)
        return x


def encode_tokens_batch(
    enc: TextEncoder, token_ids: torch.Tensor, content_lens: torch.Tensor
) -> tuple[torch.Tensor, torch.Tensor]:
    """Batched per-token + pooled encoding.

    token_ids [B, L], content_lens [B]. Pooling averages content positions
    1..content_len; an empty segment pools from the <sot> output.
    Returns (per_token [B, L, d], pooled [B, d_e]).
    """
    per_token = enc(token_ids)
    L = token_ids.shape[-1]
    pos = torch.arange(L, device=token_ids.device)
    mask = (pos >= 1) & (pos < 1 + content_lens[:, None])  # [B, L]
    empty = content_lens == 0
    mask[empty, 0] = True
    mask_f = mask.to(per_token.dtype)
    mean = (per_token * mask_f[..., None]).sum(dim=1) / mask_f.sum(dim=1, keepdim=True)
    pooled = _unit_guard(enc.projection(mean))
    return per_token, pooled


def encode_segment(seg: TokenizedSegment, enc: TextEncoder) -> SegmentEmbeddings:
    ids = torch.tensor([seg.token_ids], dtype=torch.long)
    lens = torch.tensor([seg.content_len])
    per_token, pooled = encode_tokens_batch(enc, ids, lens)
    return SegmentEmbeddings(per_token=per_token[0], pooled=pooled[0], segment=seg)


def pad_star_embedding(enc: TextEncoder, vocab: Vocabulary) -> torch.Tensor:
    """Mean of the <pad>-position outputs of an empty segment; cached per
    encoder parameter version."""
    cached = enc._pad_star_cache.get(enc.param_version)
    if cached is not None:
        return cached
    if enc.l_seg < 3:
        raise ValueError("l_seg must be >= 3 so an empty segment has pads")
    empty = tokenize_segment("", vocab, enc.l_seg)
    with torch.no_grad():
        per_token = enc(torch.tensor([empty.token_ids], dtype=torch.long))[0]
    pad_star = per_token[2:].mean(dim=0)  # positions after <sot><eot>
    enc._pad_star_cache = {enc.param_version: pad_star}
    return pad_star


def merge_conditioning(
    segments: list[SegmentEmbeddings], pad_star: torch.Tensor, n_cond: int
) -> ConditioningSequence:
    """Concatenate "<sot> Text1 <sot> Text2 ... <pad*>" embeddings."""
    rows, tags = [], []
    for emb in segments:
        n = emb.segment.content_len
        rows.append(emb.per_token[0])
        tags.append(SOT)
        for i in range(1, 1 + n):
            rows.append(emb.per_token[i])
            tags.append(CONTENT)
    if len(rows) > n_cond:
        raise ConditioningOverflowError(required=len(rows), available=n_cond)
    while len(rows) < n_cond:
        rows.append(pad_star)
        tags.append(PADSTAR)
    return ConditioningSequence(embeddings=torch.stack(rows), tags=tuple(tags))


def average_segment_embedding(segments: list[SegmentEmbeddings]) -> torch.Tensor:
    """Mean of pooled segment embeddings; deliberately not re-normalized."""
    if not segments:
        raise ValueError("need at least one segment")
    return torch.stack([s.pooled for s in segments]).mean(dim=0)


def prompt_conditioning(
    text: str,
    enc: TextEncoder,
    vocab: Vocabulary,
    n_cond: int,
) -> ConditioningSequence:
    """Segment a prompt and build its merged conditioning sequence."""
    from .segmentation import RawPrompt, SegmentationPolicy, split_into_segments

    policy = SegmentationPolicy(l_seg=enc.l_seg)
    pieces = split_into_segments(RawPrompt(text), policy)
    with torch.no_grad():
        segments = [
            encode_segment(tokenize_segment(p, vocab, enc.l_seg), enc) for p in pieces
        ]
        pad_star = pad_star_embedding(enc, vocab)
        return merge_conditioning(segments, pad_star, n_cond)


def uncond_conditioning(
    enc: TextEncoder, vocab: Vocabulary, n_cond: int
) -> torch.Tensor:
    """All-pad* conditioning used for the classifier-free guidance branch."""
    pad_star = pad_star_embedding(enc, vocab)
    return pad_star[None, :].expand(n_cond, -1).clone()


class ImageEncoder(nn.Module):
    """Patchify -> positional embeddings -> one token-mixing and one
    channel-mixing MLP -> pooled unit vector of width d_e."""

    def __init__(
        self,
        image_size: int = 24,
        channels: int = 3,
        patch: int = 4,
        width: int = 48,
        d_e: int = 16,
        seed: int = 1,
    ):
        super().__init__()
        if image_size % patch != 0:
            raise ValueError("image size must be divisible by patch size")
        self.image_size, self.channels, self.patch, self.d_e = (
            image_size,
            channels,
            patch,
            d_e,
        )
        n_patches = (image_size // patch) ** 2
        torch.manual_seed(seed)
        self.embed = nn.Linear(patch * patch * channels, width, dtype=DTYPE)
        self.position_embedding = nn.Parameter(
            torch.randn(n_patches, width, dtype=DTYPE) * 0.02
        )
        self.token_mix = nn.Sequential(
            nn.Linear(n_patches, 2 * n_patches, dtype=DTYPE),
            nn.SiLU(),
            nn.Linear(2 * n_patches, n_patches, dtype=DTYPE),
        )
        self.mixer = nn.Sequential(
            nn.Linear(width, 2 * width, dtype=DTYPE),
            nn.SiLU(),
            nn.Linear(2 * width, width, dtype=DTYPE),
        )
        self.head = nn.Sequential(
            nn.Linear(width, width, dtype=DTYPE),
            nn.SiLU(),
            nn.Linear(width, d_e, dtype=DTYPE),
        )

    def _patchify(self, x: torch.Tensor) -> torch.Tensor:
        # x [B, H, W, C] -> [B, n_patches, patch*patch*C]
        B, H, W, C = x.shape
        p = self.patch
        x = x.reshape(B, H // p, p, W // p, p, C).permute(0, 1, 3, 2, 4, 5)
        return x.reshape(B, (H // p) * (W // p), p * p * C)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        """x [B, H, W, C] in [0, 1] -> unit-norm [B, d_e]."""
        h = self.embed(self._patchify(x)) + self.position_embedding
        h = h + self.token_mix(h.transpose(1, 2)).transpose(1, 2)
        h = h + self.mixer(h)
        return _unit_guard(self.head(h.mean(dim=1)))


def encode_image(x, enc: ImageEncoder) -> torch.Tensor:
    """Encode a single H x W x C image (numpy or tensor) to a unit vector."""
    t = torch.as_tensor(x, dtype=DTYPE)
    expected = (enc.image_size, enc.image_size, enc.channels)
    if tuple(t.shape) != expected:
        raise InvalidImageError(f"expected image shape {expected}, got {tuple(t.shape)}")
    return enc(t[None])[0]
