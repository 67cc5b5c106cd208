"""Recurrent variational world model with discrete latents and a dynamics ensemble.

The latent state is s_t = [h_t, z_t]: h_t a deterministic recurrent vector,
z_t a stack of C categorical variables with K classes each. One shared
deterministic core advances h; M independent heads parameterize the stochastic
prior p^i(z_t | h_t); an encoder parameterizes the posterior q(z_t | h_t, x_t);
decoders emit unit-variance Gaussian means for the observation and reward.
"""

import math
from dataclasses import dataclass

import torch
import torch.nn as nn

from .config import Config
from .errors import NumericalError
from .nets import (ConvDecoder, ConvEncoder, EnsembleHeads, categorical_kl,
                   categorical_sample, mlp)
from .uncertainty import disagreement, penalized_reward

WM_FORMAT = "moto-wm-v1"


@dataclass
class LatentState:
    """Batched latent state: h (B, deter), z (B, C, K) one-hot per slot."""

    h: torch.Tensor
    z: torch.Tensor

    @property
    def feat(self) -> torch.Tensor:
        """Concatenated view s = [h, flat(z)], shape (B, deter + C*K)."""
        return torch.cat([self.h, self.z.flatten(1)], dim=-1)

    def detach(self) -> "LatentState":
        return LatentState(self.h.detach(), self.z.detach())


@dataclass
class ImaginedRollout:
    """Model-generated rollout grid.

    states: (B, H+1, S) latent features, entry 0 is the start state.
    actions: (B, H+1, A) — actions[:, t] was sampled at states[:, t]; the final
    action is the bootstrap action at the last state.
    rewards: (B, H) penalized rewards; rewards[:, t] pairs with the transition
    from states[:, t] under actions[:, t].
    uncertainty: (B, H) raw disagreement values before scaling.
    log_probs: (B, H+1) policy log-densities of the sampled actions.
    """

    states: torch.Tensor
    actions: torch.Tensor
    rewards: torch.Tensor
    uncertainty: torch.Tensor
    log_probs: torch.Tensor

    @property
    def horizon(self) -> int:
        return self.rewards.shape[1]


class WorldModel(nn.Module):
    def __init__(self, cfg: Config, action_dim: int, image_channels: int = 3,
                 image_size: int = 32):
        super().__init__()
        self.cfg = cfg
        self.action_dim = action_dim
        self.image_channels = image_channels
        self.image_size = image_size
        self.deter_dim = cfg.deter_dim
        self.slots = cfg.stoch_slots
        self.classes = cfg.stoch_classes
        self.z_dim = self.slots * self.classes
        self.feat_dim = self.deter_dim + self.z_dim

        units = cfg.mlp_units
        self.encoder = ConvEncoder(image_channels, image_size, cfg.cnn_depth, cfg.embed_dim)
        self.decoder = ConvDecoder(self.feat_dim, image_channels, image_size, cfg.cnn_depth)
        self.reward_head = mlp(self.feat_dim, 1, units)
        self.gru_in = nn.Sequential(nn.Linear(self.z_dim + action_dim, units), nn.ELU())
        self.gru = nn.GRUCell(units, self.deter_dim)
        self.posterior_head = mlp(self.deter_dim + cfg.embed_dim, self.z_dim, units, layers=1)
        self.ensemble = EnsembleHeads(cfg.ensemble_size, self.deter_dim, units, self.z_dim)

    # ------------------------------------------------------------------ core

    def initial_state(self, batch: int, generator: torch.Generator | None = None,
                      sample_mode: str = "sample") -> LatentState:
        """Zero h plus a uniform categorical draw for z."""
        p = next(self.parameters())
        h = torch.zeros(batch, self.deter_dim, dtype=p.dtype, device=p.device)
        logits = torch.zeros(batch, self.slots, self.classes, dtype=p.dtype, device=p.device)
        z = categorical_sample(logits, generator=generator, mode=sample_mode).detach()
        return LatentState(h, z)

    def _advance_deter(self, prev: LatentState, action: torch.Tensor) -> torch.Tensor:
        if action.shape[-1] != self.action_dim:
            raise ValueError(f"action dim {action.shape[-1]}, expected {self.action_dim}")
        x = self.gru_in(torch.cat([prev.z.flatten(1), action], dim=-1))
        return self.gru(x, prev.h)

    def ensemble_logits(self, h: torch.Tensor) -> torch.Tensor:
        """Per-head prior logits, shape (M, B, C, K)."""
        out = self.ensemble(h)
        return out.reshape(self.ensemble.m, -1, self.slots, self.classes)

    def _posterior_from_embed(self, prev: LatentState, action: torch.Tensor,
                              embed: torch.Tensor,
                              generator: torch.Generator | None = None,
                              sample_mode: str = "sample") -> tuple[LatentState, torch.Tensor]:
        h = self._advance_deter(prev, action)
        logits = self.posterior_head(torch.cat([h, embed], dim=-1))
        logits = logits.reshape(-1, self.slots, self.classes)
        if not torch.isfinite(logits).all():
            raise NumericalError("posterior produced non-finite logits")
        z = categorical_sample(logits, generator=generator, mode=sample_mode)
        return LatentState(h, z), logits

    def posterior_step(self, prev: LatentState, action: torch.Tensor, obs: torch.Tensor,
                       generator: torch.Generator | None = None,
                       sample_mode: str = "sample") -> tuple[LatentState, torch.Tensor]:
        """One filtering step; returns the new state and the posterior logits."""
        if obs.dim() != 4 or obs.shape[1] != self.image_channels:
            raise ValueError(f"obs shape {tuple(obs.shape)} does not match "
                             f"(B, {self.image_channels}, {self.image_size}, {self.image_size})")
        return self._posterior_from_embed(prev, action, self.encoder(obs),
                                          generator=generator, sample_mode=sample_mode)

    def prior_step(self, prev: LatentState, action: torch.Tensor, head: int,
                   generator: torch.Generator | None = None,
                   sample_mode: str = "sample") -> tuple[LatentState, torch.Tensor]:
        """One imagination step through a single ensemble head."""
        if not 0 <= head < self.ensemble.m:
            raise ValueError(f"head {head} out of range [0, {self.ensemble.m})")
        h = self._advance_deter(prev, action)
        logits = self.ensemble.head(h, head).reshape(-1, self.slots, self.classes)
        if not torch.isfinite(logits).all():
            raise NumericalError("prior head produced non-finite logits")
        z = categorical_sample(logits, generator=generator, mode=sample_mode)
        return LatentState(h, z), logits

    # ------------------------------------------------------- sequence methods

    def infer_batch(self, obs: torch.Tensor, actions: torch.Tensor,
                    generator: torch.Generator | None = None, sample_mode: str = "sample"
                    ) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        """Filter a batch of sequences.

        obs (B, T, C, H, W) in [0, 1]; actions (B, T, A), entry t being the
        action that led to obs t. Returns (feats (B, T, S), posterior logits
        (B, T, C, K), deterministic states (B, T, deter)); gradients intact.
        """
        b, t = obs.shape[:2]
        embeds = self.encoder(obs.reshape(b * t, *obs.shape[2:])).reshape(b, t, -1)
        state = self.initial_state(b, generator=generator, sample_mode=sample_mode)
        feats, logit_seq, hs = [], [], []
        for i in range(t):
            state, logits = self._posterior_from_embed(
                state, actions[:, i], embeds[:, i], generator=generator,
                sample_mode=sample_mode)
            feats.append(state.feat)
            logit_seq.append(logits)
            hs.append(state.h)
        return torch.stack(feats, 1), torch.stack(logit_seq, 1), torch.stack(hs, 1)

    def infer_sequence(self, traj, generator: torch.Generator | None = None,
                       sample_mode: str = "sample") -> torch.Tensor:
        """Latent features (T, S) for one trajectory (a data.Trajectory)."""
        p = next(self.parameters())
        obs = torch.as_tensor(traj.obs_float(), dtype=p.dtype, device=p.device)[None]
        actions = torch.as_tensor(traj.actions, dtype=p.dtype, device=p.device)[None]
        feats, _, _ = self.infer_batch(obs, actions, generator=generator, sample_mode=sample_mode)
        return feats[0]

    # --------------------------------------------------------------- decoders

    def decode_observation(self, feat: torch.Tensor) -> torch.Tensor:
        """Mean of the unit-variance Gaussian over pixels, shape (B, C, H, W)."""
        out = self.decoder(feat)
        if not torch.isfinite(out).all():
            raise NumericalError("observation decoder produced non-finite values")
        return out

    def decode_reward(self, feat: torch.Tensor) -> torch.Tensor:
        """Mean of the unit-variance Gaussian over the reward, shape (B,)."""
        out = self.reward_head(feat).squeeze(-1)
        if not torch.isfinite(out).all():
            raise NumericalError("reward decoder produced non-finite values")
        return out

    # ------------------------------------------------------------------ loss

    def model_loss(self, obs: torch.Tensor, actions: torch.Tensor, rewards: torch.Tensor,
                   generator: torch.Generator | None = None, sample_mode: str = "sample",
                   kl_mode: str = "balanced") -> tuple[torch.Tensor, dict]:
        """Sequence ELBO: reconstruction + reward likelihood + balanced KL.

        obs (B, T, C, H, W); actions (B, T, A); rewards (B, T). Per step the KL
        is taken against one uniformly drawn ensemble head. Returns the scalar
        loss and diagnostics, including detached posterior features under
        "states" for downstream agent updates.

        kl_mode="plain" drops the stop-gradient balancing split (identical
        value, unshaped gradients); finite-difference checks need it because
        stop-gradients are invisible to the value function.
        """
        if obs.numel() == 0 or obs.shape[0] < 1:
            raise ValueError("model_loss needs a nonempty batch")
        if kl_mode not in ("balanced", "plain"):
            raise ValueError(f"unknown kl_mode {kl_mode!r}")
        b, t = obs.shape[:2]
        if t < 2:
            raise ValueError(f"sequences must have length >= 2, got {t}")

        state = self.initial_state(b, generator=generator, sample_mode=sample_mode)
        head_idx = torch.randint(0, self.ensemble.m, (b, t), generator=generator)
        embeds = self.encoder(obs.reshape(b * t, *obs.shape[2:])).reshape(b, t, -1)
        feats, kls = [], []
        for i in range(t):
            state, q_logits = self._posterior_from_embed(
                state, actions[:, i], embeds[:, i], generator=generator,
                sample_mode=sample_mode)
            p_logits = self.ensemble_logits(state.h)  # (M, B, C, K)
            p_sel = p_logits[head_idx[:, i], torch.arange(b)]
            if kl_mode == "plain":
                kl = categorical_kl(q_logits, p_sel)
            else:
                balance = self.cfg.kl_balance
                kl = (balance * categorical_kl(q_logits.detach(), p_sel)
                      + (1.0 - balance) * categorical_kl(q_logits, p_sel.detach()))
            kls.append(kl)
            feats.append(state.feat)
        feat = torch.stack(feats, 1)  # (B, T, S)

        flat = feat.reshape(b * t, -1)
        obs_mean = self.decode_observation(flat).reshape(b, t, *obs.shape[2:])
        r_mean = self.decode_reward(flat).reshape(b, t)
        d_obs = obs[0, 0].numel()
        half_log_2pi = 0.5 * math.log(2.0 * math.pi)
        recon_nll = 0.5 * (obs_mean - obs).pow(2).sum(dim=(2, 3, 4)) + d_obs * half_log_2pi
        reward_nll = 0.5 * (r_mean - rewards).pow(2) + half_log_2pi
        kl_term = torch.stack(kls, 1)

        recon = recon_nll.mean()
        rew = reward_nll.mean()
        kl = kl_term.mean()
        loss = recon + rew + kl
        if not torch.isfinite(loss):
            raise NumericalError("model loss is not finite")
        diag = {
            "loss": loss.detach(),
            "recon": recon.detach(),
            "reward": rew.detach(),
            "kl": kl.detach(),
            "states": feat.detach(),
            "head_index": head_idx,
        }
        return loss, diag

    # ----------------------------------------------------------- imagination

    def rollout_imagination(self, starts: torch.Tensor, policy, horizon: int, alpha: float,
                            generator: torch.Generator | None = None,
                            sample_mode: str = "sample") -> ImaginedRollout:
        """Roll the policy through the learned dynamics from real starting states.

        starts: (B, S) latent features (detached from the model-training graph;
        detached again here defensively). Transitions sample z from the mean of
        the M heads' probability vectors; the disagreement u is computed from
        the per-head logits of the same step, and rewards are
        r(s_{t+1}) - alpha * u(s_t, a_t). Gradients flow to the policy through
        actions, dynamics, and rewards.
        """
        if horizon < 1:
            raise ValueError(f"horizon must be >= 1, got {horizon}")
        if alpha < 0:
            raise ValueError(f"alpha must be >= 0, got {alpha}")
        b = starts.shape[0]
        starts = starts.detach()
        h = starts[:, :self.deter_dim]
        z = starts[:, self.deter_dim:].reshape(b, self.slots, self.classes)
        state = LatentState(h, z)

        feats = [state.feat]
        actions, log_probs, rewards, us = [], [], [], []
        for _ in range(horizon):
            action, log_prob = policy.rsample(state.feat, generator=generator)
            h_next = self._advance_deter(state, action)
            p_logits = self.ensemble_logits(h_next)  # (M, B, C, K)
            u = disagreement(p_logits.flatten(2))
            mix = p_logits.softmax(-1).mean(0)
            z_next = categorical_sample(
                mix.clamp_min(1e-8).log(), generator=generator, mode=sample_mode)
            state = LatentState(h_next, z_next)
            r = penalized_reward(self.decode_reward(state.feat), u, alpha)
            feats.append(state.feat)
            actions.append(action)
            log_probs.append(log_prob)
            rewards.append(r)
            us.append(u)
        # bootstrap action at the final state
        action, log_prob = policy.rsample(state.feat, generator=generator)
        actions.append(action)
        log_probs.append(log_prob)
        return ImaginedRollout(
            states=torch.stack(feats, 1),
            actions=torch.stack(actions, 1),
            rewards=torch.stack(rewards, 1),
            uncertainty=torch.stack(us, 1),
            log_probs=torch.stack(log_probs, 1),
        )

    def step_uncertainty(self, feat: torch.Tensor, action: torch.Tensor) -> torch.Tensor:
        """u(s, a): disagreement of the head logits at the next deterministic state."""
        b = feat.shape[0]
        state = LatentState(feat[:, :self.deter_dim],
                            feat[:, self.deter_dim:].reshape(b, self.slots, self.classes))
        h_next = self._advance_deter(state, action)
        return disagreement(self.ensemble_logits(h_next).flatten(2))


# ------------------------------------------------------------------ archives

def save_world_model(model: WorldModel, path: str, optimizer=None) -> None:
    payload = {
        "format": WM_FORMAT,
        "config": model.cfg.to_dict(),
        "action_dim": model.action_dim,
        "image_channels": model.image_channels,
        "image_size": model.image_size,
        "model_state": model.state_dict(),
    }
    if optimizer is not None:
        payload["optimizer_state"] = optimizer.state_dict()
    torch.save(payload, path)


def load_world_model(path: str) -> tuple[WorldModel, dict]:
    from .config import from_dict

    payload = torch.load(path, map_location="cpu", weights_only=False)
    if payload.get("format") != WM_FORMAT:
        raise ValueError(f"{path}: expected a {WM_FORMAT} archive, "
                         f"got {payload.get('format')!r}")
    cfg = from_dict(payload["config"])
    model = WorldModel(cfg, payload["action_dim"], payload["image_channels"],
                       payload["image_size"])
    model.load_state_dict(payload["model_state"])
    return model, payload
