"""Toy pixel-space conditional diffusion.

Forward noising x_t = alpha_t x0 + beta_t eps with alpha^2 + beta^2 = 1,
an epsilon-prediction denoiser with cross-attention over the merged
conditioning sequence, deterministic DDIM sampling (sigma_t = 0), and
supervised fine-tuning with conditioning dropout for classifier-free
guidance.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import torch
from torch import nn

from .encoders import DTYPE
from .errors import DivergenceError, InvalidTimestepError


@dataclass
class DiffusionSchedule:
    """Cosine alpha schedule with alpha clamped away from zero."""

    T: int
    alpha: torch.Tensor  # [T+1]
    beta: torch.Tensor  # [T+1]

    @classmethod
    def cosine(cls, T: int, alpha_min: float = 1e-3) -> "DiffusionSchedule":
        t = torch.arange(T + 1, dtype=DTYPE)
        alpha = torch.cos(0.5 * math.pi * t / T).clamp_min(alpha_min)
        alpha[0] = 1.0
        beta = torch.sqrt(1.0 - alpha**2)
        return cls(T=T, alpha=alpha, beta=beta)

    def check(self, t: int) -> None:
        if not 0 <= t <= self.T:
            raise InvalidTimestepError(f"t={t} outside [0, {self.T}]")


@dataclass
class NoisyState:
    x_t: torch.Tensor
    t: int
    eps: torch.Tensor | None = None


def forward_noise(
    x0: torch.Tensor, t: int, eps: torch.Tensor, sched: DiffusionSchedule
) -> NoisyState:
    sched.check(t)
    if eps.shape != x0.shape:
        raise ValueError(f"noise shape {tuple(eps.shape)} != image {tuple(x0.shape)}")
    x_t = sched.alpha[t] * x0 + sched.beta[t] * eps
    return NoisyState(x_t=x_t, t=t, eps=eps)


def _time_features(t: torch.Tensor, dim: int, T: int) -> torch.Tensor:
    """Sinusoidal features of t/T, [B, dim]."""
    half = dim // 2
    freqs = torch.exp(torch.arange(half, dtype=DTYPE) * (-math.log(200.0) / half))
    ang = (t.to(DTYPE) / T)[:, None] * freqs[None, :] * 200.0
    return torch.cat([torch.sin(ang), torch.cos(ang)], dim=-1)


class _ResBlock(nn.Module):
    def __init__(self, w: int):
        super().__init__()
        self.conv1 = nn.Conv2d(w, w, 3, padding=1, dtype=DTYPE)
        self.conv2 = nn.Conv2d(w, w, 3, padding=1, dtype=DTYPE)
        self.act = nn.SiLU()

    def forward(self, h):
        return h + self.conv2(self.act(self.conv1(self.act(h))))


class _CrossAttention(nn.Module):
    """Image tokens attend over the conditioning sequence."""

    def __init__(self, w: int, d_cond: int):
        super().__init__()
        self.norm = nn.LayerNorm(w, dtype=DTYPE)
        self.q = nn.Linear(w, w, dtype=DTYPE)
        self.k = nn.Linear(d_cond, w, dtype=DTYPE)
        self.v = nn.Linear(d_cond, w, dtype=DTYPE)
        self.out = nn.Linear(w, w, dtype=DTYPE)

    def forward(self, tokens: torch.Tensor, cond: torch.Tensor) -> torch.Tensor:
        q = self.q(self.norm(tokens))
        k, v = self.k(cond), self.v(cond)
        attn = torch.softmax(q @ k.transpose(-2, -1) / math.sqrt(q.shape[-1]), dim=-1)
        return tokens + self.out(attn @ v)


class Denoiser(nn.Module):
    """eps_theta(x_t, t, conditioning) -> predicted noise, image-shaped."""

    def __init__(
        self,
        image_size: int = 24,
        channels: int = 3,
        width: int = 32,
        d_cond: int = 32,
        T: int = 50,
        time_dim: int = 16,
        seed: int = 2,
    ):
        super().__init__()
        self.image_size, self.channels, self.T = image_size, channels, T
        self.time_dim = time_dim
        torch.manual_seed(seed)
        self.conv_in = nn.Conv2d(channels, width, 3, padding=1, dtype=DTYPE)
        self.time_mlp = nn.Sequential(
            nn.Linear(time_dim, width, dtype=DTYPE),
            nn.SiLU(),
            nn.Linear(width, width, dtype=DTYPE),
        )
        self.block1 = _ResBlock(width)
        self.attn = _CrossAttention(width, d_cond)
        self.block2 = _ResBlock(width)
        self.conv_out = nn.Conv2d(width, channels, 3, padding=1, dtype=DTYPE)

    def forward(
        self, x_t: torch.Tensor, t: torch.Tensor, cond: torch.Tensor
    ) -> torch.Tensor:
        """x_t [B, H, W, C], t [B] (long), cond [B, N_cond, d] -> [B, H, W, C]."""
        B, H, W, C = x_t.shape
        h = self.conv_in(x_t.permute(0, 3, 1, 2))
        h = h + self.time_mlp(_time_features(t, self.time_dim, self.T))[:, :, None, None]
        h = self.block1(h)
        tokens = h.flatten(2).transpose(1, 2)  # [B, HW, w]
        tokens = self.attn(tokens, cond)
        h = tokens.transpose(1, 2).reshape(B, -1, H, W)
        h = self.block2(h)
        return self.conv_out(h).permute(0, 2, 3, 1)


def epsilon_loss(
    x0: torch.Tensor,
    cond: torch.Tensor,
    model: Denoiser,
    sched: DiffusionSchedule,
    generator: torch.Generator,
) -> torch.Tensor:
    """Mean over the batch of the summed squared eps-prediction error,
    with t drawn uniformly from [1, T]."""
    B = x0.shape[0]
    t = torch.randint(1, sched.T + 1, (B,), generator=generator)
    eps = torch.randn(x0.shape, dtype=DTYPE, generator=generator)
    x_t = sched.alpha[t][:, None, None, None] * x0 + sched.beta[t][:, None, None, None] * eps
    pred = model(x_t, t, cond)
    loss = ((eps - pred) ** 2).flatten(1).sum(dim=1).mean()
    if not torch.isfinite(loss):
        raise DivergenceError(-1, float(loss))
    return loss


def ddim_step(
    state: NoisyState,
    model: Denoiser,
    cond: torch.Tensor,
    sched: DiffusionSchedule,
    t_next: int | None = None,
    eps_hat: torch.Tensor | None = None,
) -> tuple[torch.Tensor, torch.Tensor]:
    """One deterministic DDIM update from t to t_next (default t-1).

    Returns (x_{t_next}, x0_star). eps_hat overrides the model prediction
    (used by tests and by the guided sampler).
    """
    t = state.t
    if t < 1:
        raise InvalidTimestepError("ddim_step requires t >= 1")
    t_next = t - 1 if t_next is None else t_next
    sched.check(t_next)
    a_t = float(sched.alpha[t])
    if a_t <= 0:
        raise InvalidTimestepError(f"alpha_t = 0 at t={t}; cannot invert")
    if eps_hat is None:
        x = state.x_t if state.x_t.dim() == 4 else state.x_t[None]
        eps_hat = model(x, torch.full((x.shape[0],), t, dtype=torch.long), cond)
        eps_hat = eps_hat.reshape(state.x_t.shape)
    x0_star = (state.x_t - sched.beta[t] * eps_hat) / sched.alpha[t]
    x_next = sched.alpha[t_next] * x0_star + sched.beta[t_next] * eps_hat
    return x_next, x0_star


def sample_timesteps(T: int, steps: int) -> list[int]:
    """Descending timesteps T = t_0 > t_1 > ... > t_steps = 0."""
    if not 1 <= steps <= T:
        raise InvalidTimestepError(f"steps must be in [1, {T}], got {steps}")
    ts = torch.linspace(T, 0, steps + 1).round().long().tolist()
    return sorted(set(ts), reverse=True)


def sample(
    model: Denoiser,
    cond: torch.Tensor,
    sched: DiffusionSchedule,
    steps: int,
    guidance_scale: float = 1.0,
    seed: int = 0,
    uncond: torch.Tensor | None = None,
    x_T: torch.Tensor | None = None,
) -> torch.Tensor:
    """Deterministic DDIM sampling, optionally with classifier-free guidance.

    cond/uncond are [N_cond, d] conditioning matrices; uncond defaults to
    cond (guidance then has no effect). Returns an [H, W, C] image.
    """
    ts = sample_timesteps(sched.T, steps)
    if x_T is None:
        gen = torch.Generator().manual_seed(seed)
        x = torch.randn(
            (model.image_size, model.image_size, model.channels),
            dtype=DTYPE,
            generator=gen,
        )
    else:
        x = x_T
    use_guidance = guidance_scale != 1.0 and uncond is not None
    with torch.no_grad():
        for t, t_next in zip(ts[:-1], ts[1:]):
            tb = torch.tensor([t], dtype=torch.long)
            eps_c = model(x[None], tb, cond[None])[0]
            if use_guidance:
                eps_u = model(x[None], tb, uncond[None])[0]
                eps_hat = eps_u + guidance_scale * (eps_c - eps_u)
            else:
                eps_hat = eps_c
            x, _ = ddim_step(
                NoisyState(x, t), model, cond[None], sched, t_next, eps_hat=eps_hat
            )
    return x


@dataclass
class SFTConfig:
    seed: int = 0
    steps: int = 500
    batch_size: int = 16
    lr: float = 1e-3
    cond_dropout: float = 0.1


@dataclass
class SFTResult:
    model: Denoiser
    losses: list[float] = field(default_factory=list)


def train_sft(
    x0: torch.Tensor,
    cond: torch.Tensor,
    uncond: torch.Tensor,
    model: Denoiser,
    sched: DiffusionSchedule,
    cfg: SFTConfig,
) -> SFTResult:
    """Epsilon-loss training of the denoiser on (image, conditioning) pairs.

    x0 [N, H, W, C]; cond [N, N_cond, d] precomputed from the frozen text
    encoder; uncond [N_cond, d] is the all-pad* sequence substituted with
    probability cond_dropout to enable classifier-free guidance.
    """
    gen = torch.Generator().manual_seed(cfg.seed)
    opt = torch.optim.Adam(model.parameters(), lr=cfg.lr)
    losses = []
    for step in range(cfg.steps):
        idx = torch.randint(x0.shape[0], (cfg.batch_size,), generator=gen)
        c = cond[idx].clone()
        drop = torch.rand(cfg.batch_size, generator=gen) < cfg.cond_dropout
        c[drop] = uncond
        try:
            loss = epsilon_loss(x0[idx], c, model, sched, gen)
        except DivergenceError as e:
            raise DivergenceError(step, float("nan")) from e
        opt.zero_grad()
        loss.backward()
        opt.step()
        losses.append(float(loss.detach()))
    return SFTResult(model=model, losses=losses)
