"""Policy, twin critics, value expansion returns, and the training losses.

Returns follow the K-step / GAE(gamma, lambda) construction: imagined rewards
are mixed with critic bootstraps at every horizon, and the critics are trained
against both imagined rollouts and real transitions.
"""

import math

import torch
import torch.nn as nn

from .config import Config
from .nets import mlp
from .world_model import ImaginedRollout

AC_FORMAT = "moto-ac-v1"

_LOG_STD_MIN = -5.0
_LOG_STD_MAX = 2.0
_ATANH_EPS = 1e-6


class Policy(nn.Module):
    """Tanh-squashed diagonal Gaussian over the action box [-1, 1]^A."""

    def __init__(self, feat_dim: int, action_dim: int, units: int = 128):
        super().__init__()
        self.action_dim = action_dim
        self.net = mlp(feat_dim, 2 * action_dim, units)
        # small final layer keeps initial actions near zero
        final = self.net[-1]
        nn.init.uniform_(final.weight, -1e-3, 1e-3)
        nn.init.zeros_(final.bias)

    def _params(self, feat: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        mean, log_std_raw = self.net(feat).chunk(2, dim=-1)
        log_std = _LOG_STD_MIN + 0.5 * (_LOG_STD_MAX - _LOG_STD_MIN) * (
            torch.tanh(log_std_raw) + 1.0)
        return mean, log_std

    def rsample(self, feat: torch.Tensor, generator: torch.Generator | None = None
                ) -> tuple[torch.Tensor, torch.Tensor]:
        """Reparametrized sample and its log-density; gradients flow into both."""
        mean, log_std = self._params(feat)
        noise = torch.randn(mean.shape, generator=generator, dtype=mean.dtype,
                            device=mean.device)
        pre = mean + log_std.exp() * noise
        action = torch.tanh(pre)
        log_prob = self._log_prob_pre(pre, mean, log_std)
        return action, log_prob

    def log_prob(self, feat: torch.Tensor, action: torch.Tensor) -> torch.Tensor:
        """Log-density of given actions; boundary actions are epsilon-clamped."""
        mean, log_std = self._params(feat)
        clipped = action.clamp(-1.0 + _ATANH_EPS, 1.0 - _ATANH_EPS)
        pre = torch.atanh(clipped)
        return self._log_prob_pre(pre, mean, log_std)

    @staticmethod
    def _log_prob_pre(pre: torch.Tensor, mean: torch.Tensor, log_std: torch.Tensor
                      ) -> torch.Tensor:
        var = (2.0 * log_std).exp()
        base = -0.5 * ((pre - mean) ** 2 / var) - log_std - 0.5 * math.log(2.0 * math.pi)
        # change of variables through tanh
        correction = torch.log(1.0 - torch.tanh(pre) ** 2 + _ATANH_EPS)
        return (base - correction).sum(-1)

    def mode(self, feat: torch.Tensor) -> torch.Tensor:
        mean, _ = self._params(feat)
        return torch.tanh(mean)

    @torch.no_grad()
    def act(self, feat: torch.Tensor, mode: str = "explore",
            generator: torch.Generator | None = None) -> torch.Tensor:
        if mode == "eval":
            return self.mode(feat)
        if mode == "explore":
            return self.rsample(feat, generator=generator)[0]
        raise ValueError(f"unknown act mode {mode!r}")


class CriticBundle(nn.Module):
    """Twin critics plus slowly-updated target copies (never touched by gradients)."""

    def __init__(self, feat_dim: int, action_dim: int, units: int = 128):
        super().__init__()
        self.q1 = mlp(feat_dim + action_dim, 1, units)
        self.q2 = mlp(feat_dim + action_dim, 1, units)
        self.target_q1 = mlp(feat_dim + action_dim, 1, units)
        self.target_q2 = mlp(feat_dim + action_dim, 1, units)
        self.target_q1.load_state_dict(self.q1.state_dict())
        self.target_q2.load_state_dict(self.q2.state_dict())
        for p in self.target_q1.parameters():
            p.requires_grad_(False)
        for p in self.target_q2.parameters():
            p.requires_grad_(False)

    def live_parameters(self):
        return list(self.q1.parameters()) + list(self.q2.parameters())

    def q_values(self, feat: torch.Tensor, action: torch.Tensor, use_targets: bool = False
                 ) -> tuple[torch.Tensor, torch.Tensor]:
        x = torch.cat([feat, action], dim=-1)
        if use_targets:
            return self.target_q1(x).squeeze(-1), self.target_q2(x).squeeze(-1)
        return self.q1(x).squeeze(-1), self.q2(x).squeeze(-1)


def v0(feat: torch.Tensor, action: torch.Tensor, bundle: CriticBundle,
       use_targets: bool = False) -> torch.Tensor:
    """Pessimistic state-action value: min of the two critics."""
    q1, q2 = bundle.q_values(feat, action, use_targets=use_targets)
    return torch.minimum(q1, q2)


def update_targets(bundle: CriticBundle, rho: float) -> None:
    """targets <- (1 - rho) * targets + rho * live. Idempotent at live == targets."""
    if not 0.0 <= rho <= 1.0:
        raise ValueError(f"rho must be in [0, 1], got {rho}")
    with torch.no_grad():
        for live, target in ((bundle.q1, bundle.target_q1), (bundle.q2, bundle.target_q2)):
            for lp, tp in zip(live.parameters(), target.parameters()):
                tp.mul_(1.0 - rho).add_(lp, alpha=rho)


# ------------------------------------------------------------------- returns

def rollout_state_values(rollout: ImaginedRollout, bundle: CriticBundle,
                         use_targets: bool = False) -> torch.Tensor:
    """min-Q at every rollout state with its recorded action, shape (B, H+1)."""
    b, n, s = rollout.states.shape
    flat_v = v0(rollout.states.reshape(b * n, s),
                rollout.actions.reshape(b * n, -1), bundle, use_targets=use_targets)
    return flat_v.reshape(b, n)


def k_step_return(rollout: ImaginedRollout, j: int, t: int, k: int, bundle: CriticBundle,
                  gamma: float, use_targets: bool = False) -> torch.Tensor:
    """V_K at grid point (j, t): discounted rewards for K steps plus a bootstrap."""
    h = rollout.horizon
    if k < 0 or t + k > h:
        raise ValueError(f"K={k} at t={t} exceeds rollout horizon {h}")
    total = rollout.states.new_zeros(())
    for i in range(1, k + 1):
        total = total + gamma ** (i - 1) * rollout.rewards[j, t + i - 1]
    boot = v0(rollout.states[j, t + k][None], rollout.actions[j, t + k][None],
              bundle, use_targets=use_targets)[0]
    return total + gamma ** k * boot


def gae_value(rollout: ImaginedRollout, j: int, t: int, gamma: float, lam: float,
              bundle: CriticBundle, use_targets: bool = False) -> torch.Tensor:
    """Exponentially weighted mixture of K-step returns at grid point (j, t)."""
    h = rollout.horizon
    if t >= h:
        raise ValueError(f"t={t} must be < rollout horizon {h}")
    n = h - t
    value = rollout.states.new_zeros(())
    for k in range(1, n):
        value = value + (1.0 - lam) * lam ** (k - 1) * k_step_return(
            rollout, j, t, k, bundle, gamma, use_targets=use_targets)
    value = value + lam ** (n - 1) * k_step_return(
        rollout, j, t, n, bundle, gamma, use_targets=use_targets)
    return value


def mixed_value(vpi: torch.Tensor, value0: torch.Tensor, lam: float) -> torch.Tensor:
    """Convex combination lam * V_pi + (1 - lam) * V_0."""
    if not 0.0 <= lam <= 1.0:
        raise ValueError(f"lam must be in [0, 1], got {lam}")
    return lam * vpi + (1.0 - lam) * value0


def lambda_values(rewards: torch.Tensor, values: torch.Tensor, gamma: float, lam: float
                  ) -> torch.Tensor:
    """Batched GAE values for all grid points t = 0..H-1.

    rewards (B, H); values (B, H+1) are V_0 at each rollout state. Backward
    recursion V(t) = r_t + gamma * ((1 - lam) * values_{t+1} + lam * V(t+1)),
    with V(H-1) closing on values_H; equal to the explicit K-step mixture.
    """
    h = rewards.shape[1]
    out = []
    nxt = values[:, h]
    for t in reversed(range(h)):
        nxt = rewards[:, t] + gamma * ((1.0 - lam) * values[:, t + 1] + lam * nxt)
        out.append(nxt)
    out.reverse()
    return torch.stack(out, dim=1)


# -------------------------------------------------------------------- losses

def actor_model_loss(rollout: ImaginedRollout, cfg: Config, bundle: CriticBundle
                     ) -> torch.Tensor:
    """Mean mixed value over the imagined grid, negated, plus an entropy bonus."""
    if not rollout.states.requires_grad:
        raise ValueError("rollout is detached; the actor loss needs the gradient path "
                         "through dynamics and critics")
    h = rollout.horizon
    values = rollout_state_values(rollout, bundle, use_targets=False)
    vpi = lambda_values(rollout.rewards, values, cfg.gamma, cfg.lam)
    vhat = mixed_value(vpi, values[:, :h], cfg.lam)
    entropy_term = cfg.entropy_weight * rollout.log_probs[:, :h].mean()
    return -vhat.mean() + entropy_term


def critic_model_loss(rollout: ImaginedRollout, cfg: Config, bundle: CriticBundle
                      ) -> torch.Tensor:
    """Regression of both live critics onto detached target-network GAE values."""
    h = rollout.horizon
    states = rollout.states.detach()
    actions = rollout.actions.detach()
    rewards = rollout.rewards.detach()
    detached = ImaginedRollout(states, actions, rewards,
                               rollout.uncertainty.detach(), rollout.log_probs.detach())
    with torch.no_grad():
        tvalues = rollout_state_values(detached, bundle, use_targets=True)
        target = lambda_values(rewards, tvalues, cfg.gamma, cfg.lam)
    b, _, s = states.shape
    flat_s = states[:, :h].reshape(b * h, s)
    flat_a = actions[:, :h].reshape(b * h, -1)
    q1, q2 = bundle.q_values(flat_s, flat_a, use_targets=False)
    flat_target = target.reshape(b * h)
    return ((flat_target - q1) ** 2).mean() + ((flat_target - q2) ** 2).mean()


def critic_data_loss(latents: torch.Tensor, actions: torch.Tensor, rewards: torch.Tensor,
                     cfg: Config, bundle: CriticBundle, policy: Policy,
                     generator: torch.Generator | None = None) -> torch.Tensor:
    """TD regression on real transitions with ground-truth environment rewards.

    latents (B, T, S) are inferred posterior features, detached from the model;
    entry t of actions/rewards is the action leading into / reward arriving
    with step t, so the TD tuple at j is (s_j, a_{j+1}, r_{j+1}, s_{j+1}).
    """
    t = latents.shape[1]
    if t < 2:
        raise ValueError(f"need sequences of length >= 2, got {t}")
    latents = latents.detach()
    s_now = latents[:, :-1].reshape(-1, latents.shape[-1])
    s_next = latents[:, 1:].reshape(-1, latents.shape[-1])
    a_taken = actions[:, 1:].reshape(-1, actions.shape[-1])
    r = rewards[:, 1:].reshape(-1)
    with torch.no_grad():
        a_next, _ = policy.rsample(s_next, generator=generator)
        boot = v0(s_next, a_next, bundle, use_targets=True)
        target = r + cfg.gamma * boot
    q1, q2 = bundle.q_values(s_now, a_taken, use_targets=False)
    return ((target - q1) ** 2).mean() + ((target - q2) ** 2).mean()


def critic_loss(model_term: torch.Tensor, data_term: torch.Tensor) -> torch.Tensor:
    """Final critic objective: sum of the imagined and real-data terms."""
    return model_term + data_term


def bc_regularizer(latents: torch.Tensor, actions: torch.Tensor,
                   episode_success: torch.Tensor, policy: Policy) -> torch.Tensor:
    """Success-filtered behavior cloning: mean negative log-likelihood of the
    dataset actions under the policy, zeroed for unsuccessful episodes.

    latents (B, T, S) detached; pairs are (s_t, a_{t+1}) per the alignment
    convention; episode_success (B,) bool.
    """
    weights = episode_success.to(latents.dtype)[:, None]
    return weighted_bc(latents, actions, weights, policy)


def weighted_bc(latents: torch.Tensor, actions: torch.Tensor, weights: torch.Tensor,
                policy: Policy) -> torch.Tensor:
    """Per-pair weighted negative log-likelihood; weights (B, 1) or (B, T-1)."""
    t = latents.shape[1]
    if t < 2:
        raise ValueError(f"need sequences of length >= 2, got {t}")
    log_probs = policy.log_prob(latents[:, :-1].detach(), actions[:, 1:])  # (B, T-1)
    weights = weights.expand_as(log_probs)
    return -(weights * log_probs).mean()


def advantage_weights(latents: torch.Tensor, rewards: torch.Tensor, cfg: Config,
                      bundle: CriticBundle, policy: Policy,
                      generator: torch.Generator | None = None) -> torch.Tensor:
    """Indicator weights from the snippet advantage (non-default BC filter).

    For each pair index t, the advantage of following the data for up to
    `horizon` steps versus the current value estimate; weight is 1 where it is
    positive. Returns (B, T-1).
    """
    b, t, s = latents.shape
    with torch.no_grad():
        flat = latents.reshape(b * t, s)
        a_pi, _ = policy.rsample(flat, generator=generator)
        values = v0(flat, a_pi, bundle, use_targets=True).reshape(b, t)
        weights = torch.zeros(b, t - 1, dtype=latents.dtype, device=latents.device)
        for j in range(t - 1):
            end = min(j + cfg.horizon, t - 1)
            disc = torch.ones(b, dtype=latents.dtype, device=latents.device)
            adv = -values[:, j]
            for step, idx in enumerate(range(j + 1, end + 1)):
                disc = disc * cfg.gamma
                adv = adv + disc * rewards[:, idx]
            adv = adv + disc * values[:, end]
            weights[:, j] = (adv > 0).to(latents.dtype)
    return weights


def joint_actor_loss(model_term: torch.Tensor, bc_term: torch.Tensor, beta: float
                     ) -> torch.Tensor:
    """Model-based actor objective plus beta-weighted behavior regularization."""
    if beta < 0:
        raise ValueError(f"beta must be >= 0, got {beta}")
    return model_term + beta * bc_term


# ------------------------------------------------------------------ archives

def save_actor_critic(policy: Policy, bundle: CriticBundle, path: str, cfg: Config,
                      actor_opt=None, critic_opt=None) -> None:
    payload = {
        "format": AC_FORMAT,
        "config": cfg.to_dict(),
        "action_dim": policy.action_dim,
        "policy_state": policy.state_dict(),
        "critic_state": bundle.state_dict(),
    }
    if actor_opt is not None:
        payload["actor_opt_state"] = actor_opt.state_dict()
    if critic_opt is not None:
        payload["critic_opt_state"] = critic_opt.state_dict()
    torch.save(payload, path)


def load_actor_critic(path: str, feat_dim: int) -> tuple[Policy, CriticBundle, dict]:
    from .config import from_dict

    payload = torch.load(path, map_location="cpu", weights_only=False)
    if payload.get("format") != AC_FORMAT:
        raise ValueError(f"{path}: expected a {AC_FORMAT} archive, "
                         f"got {payload.get('format')!r}")
    cfg = from_dict(payload["config"])
    policy = Policy(feat_dim, payload["action_dim"], cfg.mlp_units)
    bundle = CriticBundle(feat_dim, payload["action_dim"], cfg.mlp_units)
    policy.load_state_dict(payload["policy_state"])
    bundle.load_state_dict(payload["critic_state"])
    return policy, bundle, payload
