from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import torch
import torch.nn.functional as F


class DegenerateEmbeddingError(ValueError):
    pass


@dataclass
class LossReport:
    l_c: float = 0.0
    l_rec: float = 0.0
    l_adv_g: float = 0.0
    l_adv_d: float = 0.0
    l_total_g: float = 0.0
    l_ce: float = 0.0
    per_modality: dict[str, float] = field(default_factory=dict)

    def as_dict(self) -> dict:
        return asdict(self)


def contrastive_loss(a: torch.Tensor, v: torch.Tensor, temperature: float,
                     source_ids: Sequence[str] | None = None) -> torch.Tensor:
    """Symmetric InfoNCE between token-averaged audio and visual embeddings.

    ``a``/``v`` are ``(N, tokens, d)`` encoder outputs (or ``(N, d)`` already
    pooled). The pooled vectors are L2-normalised; each direction contributes
    its cross-entropy against the diagonal with weight 1/(2N). If
    ``source_ids`` is given, off-diagonal pairs from the same source are
    removed from the negatives.
    """
    a_bar = a.mean(dim=-2) if a.dim() == 3 else a
    v_bar = v.mean(dim=-2) if v.dim() == 3 else v
    norms = torch.cat([a_bar.norm(dim=-1), v_bar.norm(dim=-1)])
    if bool((norms < 1e-12).any()):
        raise DegenerateEmbeddingError("zero-norm mean embedding in contrastive loss")
    logits = F.normalize(a_bar, dim=-1) @ F.normalize(v_bar, dim=-1).T / temperature
    n = logits.shape[0]
    if source_ids is not None:
        ids = list(source_ids)
        same = torch.tensor([[ids[i] == ids[j] and i != j for j in range(n)] for i in range(n)])
        logits = logits.masked_fill(same, float("-inf"))
    target = torch.arange(n)
    return 0.5 * (F.cross_entropy(logits, target) + F.cross_entropy(logits.T, target))


def gather_tokens(tokens: torch.Tensor, positions: torch.Tensor) -> torch.Tensor:
    """``(B, N, p)`` tokens at ``(B, n)`` positions -> ``(B, n, p)``."""
    return torch.gather(tokens, 1, positions[..., None].expand(-1, -1, tokens.shape[-1]))


def reconstruction_loss(x_tokens: torch.Tensor, x_hat: torch.Tensor, masked_positions: torch.Tensor) -> torch.Tensor:
    """Mean squared error over the entries of masked tokens only (one modality)."""
    if masked_positions.numel() == 0:
        raise ValueError("reconstruction loss needs at least one masked token")
    diff = gather_tokens(x_hat, masked_positions) - gather_tokens(x_tokens, masked_positions)
    return diff.pow(2).mean()


Critic = Callable[[torch.Tensor], torch.Tensor]


def adversarial_losses(x_msk: torch.Tensor, x_hat_msk: torch.Tensor,
                       critic: Critic) -> tuple[torch.Tensor, torch.Tensor]:
    """WGAN generator and critic losses for one modality.

    Returns ``(-mean D(x_hat), mean(D(x_hat) - D(x)))`` over samples.
    """
    fake = critic(x_hat_msk)
    real = critic(x_msk)
    return -fake.mean(), (fake - real).mean()


def gradient_penalty(x_msk: torch.Tensor, x_hat_msk: torch.Tensor, critic: Critic,
                     rng: torch.Generator | None = None) -> torch.Tensor:
    eps = torch.rand(x_msk.shape[0], 1, 1, generator=rng, dtype=x_msk.dtype)
    mix = (eps * x_msk + (1 - eps) * x_hat_msk).requires_grad_(True)
    (grad,) = torch.autograd.grad(critic(mix).sum(), mix, create_graph=True)
    return (grad.flatten(1).norm(dim=1) - 1).pow(2).mean()


def combined_generator_loss(l_c, l_rec, l_adv_g, weights: Sequence[float]):
    lam_c, lam_rec, lam_adv = weights
    return lam_c * l_c + lam_rec * l_rec + lam_adv * l_adv_g


def cross_entropy(logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    return F.cross_entropy(logits, labels)
