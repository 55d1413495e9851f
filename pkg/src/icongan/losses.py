"""Adversarial, patch-similarity and contrastive disentanglement losses.

Conventions: every function returns a scalar tensor to be *minimized* by
the network being trained. Discriminator sides use the non-saturating
logistic form, so "maximize log D(x)" becomes "minimize softplus(-logit)".
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import torch
import torch.nn.functional as F

from .config import LossWeights

NORM_FLOOR = 1e-8

DISC_SIDES = ("discriminator", "generator")
SIM_SIDES = ("disc_real", "disc_fake", "generator")


@dataclass
class CFDGroups:
    """Real-icon features grouped by label. Keys are label ids; values are
    ``(n_k, D)`` stacks of features from distinct icons."""

    align_apps: dict[int, torch.Tensor] = field(default_factory=dict)
    unif_apps: dict[int, torch.Tensor] = field(default_factory=dict)
    align_thms: dict[int, torch.Tensor] = field(default_factory=dict)
    unif_thms: dict[int, torch.Tensor] = field(default_factory=dict)

    def pair_count(self, name: str) -> int:
        return sum(len(g) * (len(g) - 1) // 2 for g in getattr(self, name).values())


def adv_loss_app(real_logits: torch.Tensor | None, fake_logits: torch.Tensor,
                 side: str) -> torch.Tensor:
    if side not in DISC_SIDES:
        raise ValueError(f"side must be one of {DISC_SIDES}")
    if fake_logits.numel() == 0:
        raise ValueError("empty logit vector")
    if side == "generator":
        return F.softplus(-fake_logits).mean()
    if real_logits is None or real_logits.numel() == 0:
        raise ValueError("empty logit vector")
    return F.softplus(-real_logits).mean() + F.softplus(fake_logits).mean()


def normalize(x: torch.Tensor) -> torch.Tensor:
    return x / x.norm(dim=-1, keepdim=True).clamp_min(NORM_FLOOR)


def pair_scores(patches: torch.Tensor, embedding: torch.Tensor) -> torch.Tensor:
    """Score of every unordered patch pair i < j.

    ``patches`` is ``(N, M, D)`` raw patch features, ``embedding`` the
    ``(N, D)`` theme embedding of each image. Returns ``(N, M(M-1)/2)`` with
    ``s_ij = <p_i/|p_i|, p_j/|p_j|> + <p_i, v>``.
    """
    M = patches.shape[1]
    if M < 2:
        raise ValueError("need at least two patches")
    unit = normalize(patches)
    sim = unit @ unit.transpose(1, 2)
    proj = (patches * embedding[:, None, :]).sum(-1)
    i, j = torch.triu_indices(M, M, offset=1, device=patches.device)
    return sim[:, i, j] + proj[:, i]


def sim_adv_loss(patches: torch.Tensor, embedding: torch.Tensor, side: str) -> torch.Tensor:
    if side not in SIM_SIDES:
        raise ValueError(f"side must be one of {SIM_SIDES}")
    s = pair_scores(patches, embedding)
    if side == "disc_fake":
        return F.softplus(s).mean()
    return F.softplus(-s).mean()


def _pair_sqdist(f: torch.Tensor) -> torch.Tensor:
    u = normalize(f)
    i, j = torch.triu_indices(len(f), len(f), offset=1, device=f.device)
    return (u[i] - u[j]).pow(2).sum(-1)


def _nested_mean(groups: dict[int, torch.Tensor], term: Callable[[torch.Tensor], torch.Tensor],
                 like: torch.Tensor | None) -> torch.Tensor:
    per_group = [term(_pair_sqdist(g)).mean() for _, g in sorted(groups.items()) if len(g) >= 2]
    if not per_group:
        return _zero(like)
    return torch.stack(per_group).mean()


def _zero(like: torch.Tensor | None) -> torch.Tensor:
    if like is None:
        return torch.zeros(())
    return like.new_zeros(())


def _any_tensor(groups: CFDGroups) -> torch.Tensor | None:
    for m in (groups.align_apps, groups.align_thms, groups.unif_apps, groups.unif_thms):
        for g in m.values():
            return g
    return None


def align_loss(groups: CFDGroups, eps_app: float, eps_theme: float) -> torch.Tensor:
    """Hinged squared distance between normalized same-label features,
    averaged over pairs within a group, then over pair-bearing groups, and
    summed over the app and theme feature spaces."""
    like = _any_tensor(groups)
    app = _nested_mean(groups.align_apps, lambda d: (d - eps_app).clamp_min(0), like)
    thm = _nested_mean(groups.align_thms, lambda d: (d - eps_theme).clamp_min(0), like)
    return app + thm


def uniform_loss(groups: CFDGroups, t: float) -> torch.Tensor:
    if t <= 0:
        raise ValueError("temperature t must be positive")
    like = _any_tensor(groups)
    app = _nested_mean(groups.unif_apps, lambda d: torch.exp(-t * d), like)
    thm = _nested_mean(groups.unif_thms, lambda d: torch.exp(-t * d), like)
    return app + thm


def penalty_from_scores(scores: torch.Tensor, inputs: torch.Tensor, weight: float) -> torch.Tensor:
    """(weight / 2) * E_x |d score(x) / dx|^2, differentiable w.r.t. the
    parameters that produced ``scores``."""
    if not scores.requires_grad:
        return scores.new_zeros(())
    (grad,) = torch.autograd.grad(scores.sum(), inputs, create_graph=True, allow_unused=True)
    if grad is None:
        return scores.new_zeros(())
    return 0.5 * weight * grad.pow(2).flatten(1).sum(1).mean()


def gradient_penalty(score_fn: Callable[[torch.Tensor], torch.Tensor], images: torch.Tensor,
                     weight: float) -> torch.Tensor:
    """Penalty of ``score_fn`` (batch -> one scalar per image) at ``images``."""
    x = images.detach().requires_grad_(True)
    return penalty_from_scores(score_fn(x), x, weight)


def theme_score(patches: torch.Tensor, embedding: torch.Tensor) -> torch.Tensor:
    """Per-image scalar for the patch discriminator: mean pair score."""
    return pair_scores(patches, embedding).mean(1)


def r1_penalty(app_disc, theme_disc, real_images: torch.Tensor, app_ids: torch.Tensor,
               theme_ids: torch.Tensor, weight: float = 50.0) -> tuple[torch.Tensor, torch.Tensor]:
    """R1 penalty of both discriminators at real samples.

    Returns ``(app_term, theme_term)``; each only depends on its own
    discriminator's parameters. Lazy scaling by the interval is the
    caller's job.
    """
    if app_disc is None and theme_disc is None:
        raise ValueError("no discriminator given")
    terms = []
    if app_disc is not None:
        terms.append(gradient_penalty(lambda x: app_disc(x, app_ids)[0], real_images, weight))
    else:
        terms.append(real_images.new_zeros(()))
    if theme_disc is not None:
        def thm(x):
            grid, v = theme_disc(x, theme_ids)
            return theme_score(grid.flat, v)
        terms.append(gradient_penalty(thm, real_images, weight))
    else:
        terms.append(real_images.new_zeros(()))
    return terms[0], terms[1]


def total_losses(components: dict[str, torch.Tensor | float], weights: LossWeights):
    """Assemble (loss_G, loss_Dapp, loss_Dthm) from the component values.

    Keys: ``adv_d, adv_g, sim_d, sim_g, align, uniform``. The contrastive
    term goes to both discriminators, never to the generator.
    """
    cfd = weights.lambda_align * components["align"] + weights.lambda_uniform * components["uniform"]
    loss_g = components["adv_g"] + components["sim_g"]
    loss_dapp = components["adv_d"] + cfd
    loss_dthm = components["sim_d"] + cfd
    return loss_g, loss_dapp, loss_dthm
