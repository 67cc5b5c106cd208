"""Ensemble-disagreement uncertainty and the penalized reward."""

import torch


def disagreement(logits: torch.Tensor) -> torch.Tensor:
    """Epistemic uncertainty proxy from ensemble logits.

    logits: (M, D) or (M, B, D) — per-head logits over the D = C*K latent
    dimensions for the same input. Returns the mean over the D dimensions of
    the population standard deviation across the M heads (scalar, or (B,)).
    Zero iff all heads agree; homogeneous of degree 1 in the logits.
    """
    m = logits.shape[0]
    if m < 2:
        raise ValueError(f"disagreement needs at least 2 heads, got {m}")
    if not torch.isfinite(logits).all():
        raise ValueError("disagreement requires finite logits")
    std = logits.std(dim=0, unbiased=False)
    return std.mean(dim=-1)


def penalized_reward(reward: torch.Tensor, u: torch.Tensor, alpha: float) -> torch.Tensor:
    """Conservative reward r - alpha * u. Never exceeds the raw reward for alpha >= 0."""
    if alpha < 0:
        raise ValueError(f"alpha must be >= 0, got {alpha}")
    return reward - alpha * u
