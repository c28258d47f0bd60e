"""Reward fine-tuning of the denoiser through the DDIM trajectory.

The sampler inputs are stop-gradiented (DRTune) so parameter gradients
arrive only through the denoiser outputs of a uniformly drawn subset of
steps. The reward is 1 - C_X(x0*) . c_tilde where c_tilde reweights the
text embedding's common-direction component by omega; because c_tilde is
constant w.r.t. the denoiser, this substitution realizes the reweighted
gradient exactly.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import torch

from .decomposition import CommonDirection, decompose
from .diffusion import Denoiser, DiffusionSchedule, sample_timesteps
from .encoders import DTYPE, TextEncoder, prompt_conditioning
from .errors import DivergenceError
from .preference import PreferenceModel, text_embedding
from .segmentation import RawPrompt, Vocabulary


@dataclass
class RewardConfig:
    omega: float = 0.3
    sample_steps: int = 8
    steps_subset_size: int = 4
    seed: int = 0
    lr: float = 1e-4
    total_updates: int = 100
    batch_size: int = 4

    def __post_init__(self):
        if not 0.0 <= self.omega <= 1.0:
            raise ValueError(f"omega must be in [0, 1], got {self.omega}")
        if not 1 <= self.steps_subset_size <= self.sample_steps:
            raise ValueError(
                f"steps_subset_size must be in [1, {self.sample_steps}], "
                f"got {self.steps_subset_size}"
            )


@dataclass
class ReweightedTextEmbedding:
    c_tilde: torch.Tensor
    c_perp: torch.Tensor
    eta: float
    omega: float
    direction: CommonDirection


def reweighted_text_embedding(
    p: RawPrompt, m: PreferenceModel, dir: CommonDirection, omega: float
) -> ReweightedTextEmbedding:
    """c_tilde = c_perp + omega * eta * V from the segment-average embedding."""
    with torch.no_grad():
        c_p = text_embedding(p, m, "segment_avg")
    dec = decompose(c_p, dir)
    return ReweightedTextEmbedding(
        c_tilde=dec.c_perp + omega * dec.eta * dir.V,
        c_perp=dec.c_perp,
        eta=dec.eta,
        omega=omega,
        direction=dir,
    )


def reward_loss(
    x0_star: torch.Tensor, c_tilde: ReweightedTextEmbedding | torch.Tensor, m: PreferenceModel
) -> torch.Tensor:
    """1 - C_X(x0*) . c_tilde, differentiable w.r.t. x0*."""
    vec = c_tilde.c_tilde if isinstance(c_tilde, ReweightedTextEmbedding) else c_tilde
    x = x0_star if x0_star.dim() == 4 else x0_star[None]
    c_x = m.image(x)
    return (1.0 - c_x @ vec.detach()).mean()


def draw_step_subset(
    n_steps: int, subset_size: int, generator: torch.Generator
) -> set[int]:
    """Uniform subset of step indices that keep output gradients."""
    perm = torch.randperm(n_steps, generator=generator)
    return set(perm[:subset_size].tolist())


def drtune_trajectory(
    model: Denoiser,
    cond: torch.Tensor,
    sched: DiffusionSchedule,
    cfg: RewardConfig,
    generator: torch.Generator,
    subset: set[int] | None = None,
    x_T: torch.Tensor | None = None,
) -> torch.Tensor:
    """Run the DDIM loop with input detachment; returns x0* carrying the
    gradient graph of the kept steps.

    cond is [B, N_cond, d]; the returned x0* is [B, H, W, C]. Every
    denoiser input is detached; denoiser outputs outside the drawn subset
    are detached too, so the parameter gradient is the telescoping sum
    over the kept steps only.
    """
    ts = sample_timesteps(sched.T, cfg.sample_steps)
    n_steps = len(ts) - 1
    if subset is None:
        subset = draw_step_subset(n_steps, min(cfg.steps_subset_size, n_steps), generator)
    B = cond.shape[0]
    if x_T is None:
        x_T = torch.randn(
            (B, model.image_size, model.image_size, model.channels),
            dtype=DTYPE,
            generator=generator,
        )
    x = x_T
    x0_star = x
    for j, (t, t_next) in enumerate(zip(ts[:-1], ts[1:])):
        tb = torch.full((B,), t, dtype=torch.long)
        eps = model(x.detach(), tb, cond)
        if j not in subset:
            eps = eps.detach()
        # x itself stays in the graph: only the denoiser *input* is detached.
        x0_star = (x - sched.beta[t] * eps) / sched.alpha[t]
        x = sched.alpha[t_next] * x0_star + sched.beta[t_next] * eps
    return x0_star


@dataclass
class RFTResult:
    model: Denoiser
    metrics: list[dict] = field(default_factory=list)


def train_rft(
    model: Denoiser,
    prompts: list[str],
    pref: PreferenceModel,
    direction: CommonDirection,
    sched: DiffusionSchedule,
    cfg: RewardConfig,
    diff_text: TextEncoder,
    vocab: Vocabulary,
    n_cond: int,
) -> RFTResult:
    """Reward fine-tuning against the frozen preference model.

    The diffusion text encoder, preference model and common direction are
    all frozen; only the denoiser is updated.
    """
    with torch.no_grad():
        cond = torch.stack(
            [
                prompt_conditioning(p, diff_text, vocab, n_cond).embeddings
                for p in prompts
            ]
        )
        embs = [
            reweighted_text_embedding(RawPrompt(p), pref, direction, cfg.omega)
            for p in prompts
        ]
        c_tilde = torch.stack([e.c_tilde for e in embs])
        c_perp = torch.stack([e.c_perp for e in embs])
        eta = torch.tensor([e.eta for e in embs], dtype=DTYPE)

    for p in pref.image.parameters():
        p.requires_grad_(False)
    gen = torch.Generator().manual_seed(cfg.seed)
    opt = torch.optim.Adam(model.parameters(), lr=cfg.lr)
    metrics = []
    for step in range(cfg.total_updates):
        idx = torch.randint(len(prompts), (cfg.batch_size,), generator=gen)
        x0_star = drtune_trajectory(model, cond[idx], sched, cfg, gen)
        c_x = pref.image(x0_star)
        loss = (1.0 - (c_x * c_tilde[idx]).sum(dim=1)).mean()
        if not torch.isfinite(loss):
            raise DivergenceError(step, float(loss))
        opt.zero_grad()
        loss.backward()
        opt.step()
        with torch.no_grad():
            relevant = (c_x * c_perp[idx]).sum(dim=1).mean()
            irrelevant = (eta[idx] * (c_x @ direction.V)).mean()
        metrics.append(
            {
                "step": step,
                "reward_loss": float(loss.detach()),
                "mean_relevant": float(relevant),
                "mean_irrelevant": float(irrelevant),
                "omega": cfg.omega,
            }
        )
    for p in pref.image.parameters():
        p.requires_grad_(True)
    return RFTResult(model=model, metrics=metrics)
