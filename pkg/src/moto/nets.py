"""Network building blocks: MLPs, the 3-layer conv stacks, discrete-latent sampling."""

import torch
import torch.nn as nn
import torch.nn.functional as F


def mlp(in_dim: int, out_dim: int, units: int, layers: int = 2) -> nn.Sequential:
    seq = []
    dim = in_dim
    for _ in range(layers):
        seq += [nn.Linear(dim, units), nn.ELU()]
        dim = units
    seq.append(nn.Linear(dim, out_dim))
    return nn.Sequential(*seq)


class ConvEncoder(nn.Module):
    """Image (B, C, H, W) in [0, 1] -> embedding (B, embed_dim). H, W divisible by 8."""

    def __init__(self, channels: int, image_size: int, depth: int, embed_dim: int):
        super().__init__()
        if image_size % 8 != 0:
            raise ValueError(f"image size must be divisible by 8, got {image_size}")
        self.conv = nn.Sequential(
            nn.Conv2d(channels, depth, 4, stride=2, padding=1), nn.ELU(),
            nn.Conv2d(depth, depth * 2, 4, stride=2, padding=1), nn.ELU(),
            nn.Conv2d(depth * 2, depth * 4, 4, stride=2, padding=1), nn.ELU(),
            nn.Flatten(),
        )
        side = image_size // 8
        self.fc = nn.Linear(depth * 4 * side * side, embed_dim)

    def forward(self, obs: torch.Tensor) -> torch.Tensor:
        return self.fc(self.conv(obs - 0.5))


class ConvDecoder(nn.Module):
    """Latent feature (B, D) -> image mean (B, C, H, W) of a unit-variance Gaussian."""

    def __init__(self, feat_dim: int, channels: int, image_size: int, depth: int):
        super().__init__()
        side = image_size // 8
        self.fc = nn.Linear(feat_dim, depth * 4 * side * side)
        self.deconv = nn.Sequential(
            nn.Unflatten(1, (depth * 4, side, side)),
            nn.ConvTranspose2d(depth * 4, depth * 2, 4, stride=2, padding=1), nn.ELU(),
            nn.ConvTranspose2d(depth * 2, depth, 4, stride=2, padding=1), nn.ELU(),
            nn.ConvTranspose2d(depth, channels, 4, stride=2, padding=1),
        )

    def forward(self, feat: torch.Tensor) -> torch.Tensor:
        return self.deconv(self.fc(feat)) + 0.5


class EnsembleHeads(nn.Module):
    """M parallel one-hidden-layer MLPs evaluated with batched matmuls.

    Heads are independently initialized; forward maps (B, in) -> (M, B, out).
    """

    def __init__(self, m: int, in_dim: int, hidden: int, out_dim: int):
        super().__init__()
        if m < 1:
            raise ValueError(f"need at least one head, got {m}")
        self.m = m
        self.w1 = nn.Parameter(torch.empty(m, in_dim, hidden))
        self.b1 = nn.Parameter(torch.empty(m, 1, hidden))
        self.w2 = nn.Parameter(torch.empty(m, hidden, out_dim))
        self.b2 = nn.Parameter(torch.empty(m, 1, out_dim))
        for w, b in ((self.w1, self.b1), (self.w2, self.b2)):
            bound = 1.0 / w.shape[1] ** 0.5
            nn.init.uniform_(w, -bound, bound)
            nn.init.uniform_(b, -bound, bound)

    def forward(self, h: torch.Tensor) -> torch.Tensor:
        x = torch.baddbmm(self.b1, h.unsqueeze(0).expand(self.m, *h.shape), self.w1)
        x = F.elu(x)
        return torch.baddbmm(self.b2, x, self.w2)

    def head(self, h: torch.Tensor, index: int) -> torch.Tensor:
        """Single head forward, (B, in) -> (B, out); matches forward()[index]."""
        if not 0 <= index < self.m:
            raise ValueError(f"head {index} out of range [0, {self.m})")
        x = F.elu(h @ self.w1[index] + self.b1[index])
        return x @ self.w2[index] + self.b2[index]


def categorical_sample(logits: torch.Tensor, generator: torch.Generator | None = None,
                       mode: str = "sample") -> torch.Tensor:
    """Sample stacked one-hot latents (..., C, K) with a straight-through gradient.

    mode="sample": forward pass is a hard one-hot draw per categorical slot, the
    backward pass sees the probability vector. mode="mean": returns the
    probabilities themselves (smooth; used by finite-difference checks).
    """
    if mode not in ("sample", "mean"):
        raise ValueError(f"unknown sample mode {mode!r}")
    probs = F.softmax(logits, dim=-1)
    if mode == "mean":
        return probs
    k = probs.shape[-1]
    flat = probs.detach().reshape(-1, k)
    idx = torch.multinomial(flat, 1, generator=generator).reshape(probs.shape[:-1])
    hard = F.one_hot(idx, k).to(probs.dtype)
    # parenthesized so the forward value stays exactly one-hot
    return hard + (probs - probs.detach())


def categorical_kl(logits_q: torch.Tensor, logits_p: torch.Tensor) -> torch.Tensor:
    """KL(q || p) for stacked categoricals (..., C, K); summed over C and K."""
    log_q = F.log_softmax(logits_q, dim=-1)
    log_p = F.log_softmax(logits_p, dim=-1)
    return (log_q.exp() * (log_q - log_p)).sum(dim=(-2, -1))
