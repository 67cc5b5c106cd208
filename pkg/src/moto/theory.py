"""Empirical check that the performance gap is bounded by scaled model uncertainty.

For a sequence of training checkpoints, estimates (a) the gap between the
scripted expert's return and the agent's return in the real environment and
(b) the expected ensemble disagreement along expert trajectories replayed
through the learned dynamics. The report fits one positive scale c by least
squares and flags checkpoints where gap > 1.1 * c * 2 * alpha * eps_hat.
Everything here is read-only over checkpoints.
"""

import json
import os
import warnings
from dataclasses import dataclass, field

import numpy as np
import torch
from scipy import stats

from .actor_critic import load_actor_critic
from .config import load as load_config
from .data import load_dataset
from .envs import make_env_from_info, rollout_episode, scripted_policy
from .errors import ReportError
from .trainer import checkpoint_steps, run_agent_episode
from .world_model import WorldModel, load_world_model

BOUND_SLACK = 1.1


def empirical_epsilon(expert_trajs, model: WorldModel, horizon: int,
                      seed: int = 0) -> float:
    """Mean disagreement along expert action replays through the dynamics.

    For each trajectory: infer posterior states for the first T - horizon
    steps, roll the recorded expert actions `horizon` steps through the
    ensemble-mixture dynamics, and average u over the (T - horizon) x horizon
    grid. Returns the average of per-trajectory means; trajectories with
    T <= horizon are skipped with a warning.
    """
    if horizon < 1:
        raise ValueError(f"horizon must be >= 1, got {horizon}")
    per_traj = []
    with torch.no_grad():
        for traj in expert_trajs:
            # fresh identically-seeded generator per trajectory keeps the
            # estimate invariant to trajectory order
            gen = torch.Generator().manual_seed(seed)
            t_len = len(traj)
            if t_len <= horizon:
                warnings.warn(f"skipping trajectory of length {t_len} <= "
                              f"horizon {horizon}")
                continue
            n = t_len - horizon
            obs = torch.as_tensor(traj.obs_float())[None, :n]
            actions = torch.as_tensor(traj.actions)
            feats, _, _ = model.infer_batch(obs, actions[None, :n], generator=gen)
            state_feat = feats[0]  # (n, S)
            grid = []
            for t in range(horizon):
                # action taken at absolute index j+t is stored at j+t+1
                act = actions[t + 1: t + 1 + n]
                u = model.step_uncertainty(state_feat, act)
                grid.append(u)
                state_feat = _advance_mixture(model, state_feat, act, gen)
            per_traj.append(float(torch.stack(grid).mean()))
    if not per_traj:
        raise ValueError("no expert trajectory longer than the horizon")
    return float(np.mean(per_traj))


def _advance_mixture(model: WorldModel, feat: torch.Tensor, action: torch.Tensor,
                     generator: torch.Generator) -> torch.Tensor:
    from .nets import categorical_sample
    from .world_model import LatentState

    b = feat.shape[0]
    state = LatentState(feat[:, :model.deter_dim],
                        feat[:, model.deter_dim:].reshape(b, model.slots, model.classes))
    h_next = model._advance_deter(state, action)
    mix = model.ensemble_logits(h_next).softmax(-1).mean(0)
    z_next = categorical_sample(mix.clamp_min(1e-8).log(), generator=generator)
    return LatentState(h_next, z_next).feat


def performance_gap(expert, model: WorldModel, policy, env, n_eval: int,
                    action_repeat: int, seed: int = 0) -> dict:
    """Expert-minus-agent mean evaluation return over n_eval episodes each.

    `expert` is either a precomputed mean return (float) or a scripted
    controller called as expert(env).
    """
    agent_returns = []
    for k in range(n_eval):
        traj, _ = run_agent_episode(model, policy, env, action_repeat,
                                    seed=seed * 1000 + k, mode="eval")
        agent_returns.append(traj.episode_return)
    if isinstance(expert, (int, float)):
        expert_returns = [float(expert)]
    else:
        expert_returns = [
            rollout_episode(env, expert, action_repeat, seed=seed * 1000 + k).episode_return
            for k in range(n_eval)]
    gap = float(np.mean(expert_returns) - np.mean(agent_returns))
    return {
        "gap": gap,
        "expert_return": float(np.mean(expert_returns)),
        "agent_return": float(np.mean(agent_returns)),
        "agent_se": float(np.std(agent_returns) / max(1, len(agent_returns)) ** 0.5),
        "expert_se": float(np.std(expert_returns) / max(1, len(expert_returns)) ** 0.5),
    }


@dataclass
class BoundReport:
    alpha: float
    fitted_scale: float
    spearman: float
    bound_holds: bool
    expert_return: float
    records: list = field(default_factory=list)
    header: str = ("gap = expert return - agent return per checkpoint; the scripted "
                   "expert stands in for the optimal policy; eps_hat is the mean "
                   "ensemble disagreement along expert replays through the dynamics")

    def to_dict(self) -> dict:
        return {"header": self.header, "alpha": self.alpha,
                "fitted_scale": self.fitted_scale, "spearman": self.spearman,
                "bound_holds": self.bound_holds, "expert_return": self.expert_return,
                "records": self.records}


def fit_scale(gaps: np.ndarray, scaled_eps: np.ndarray) -> float:
    """Least-squares positive scale c for gap ~ c * (2 alpha eps)."""
    denom = float(np.sum(scaled_eps ** 2))
    if denom == 0.0:
        return 0.0
    return max(0.0, float(np.sum(gaps * scaled_eps) / denom))


def bound_report(run_dir: str, n_eval: int = 20, horizon: int | None = None,
                 seed: int = 0, write: bool = True) -> BoundReport:
    """Evaluate the gap/uncertainty pair at every checkpoint of a run."""
    steps = checkpoint_steps(run_dir)
    if not steps:
        raise ReportError(f"{run_dir}: no checkpoints found")
    cfg = load_config(os.path.join(run_dir, "config.yaml"))
    horizon = horizon or cfg.horizon
    trajectories, env_info = load_dataset(os.path.join(run_dir, "data", "dataset.moto"))
    expert_trajs = [t for t in trajectories if t.episode_success] or trajectories
    env = make_env_from_info(env_info)
    expert = scripted_policy(env)
    expert_returns = [
        rollout_episode(env, expert, cfg.action_repeat, seed=9000 + k).episode_return
        for k in range(n_eval)]
    expert_return = float(np.mean(expert_returns))

    records = []
    for step in steps:
        base = os.path.join(run_dir, "checkpoints", f"step_{step:07d}")
        model, _ = load_world_model(base + "_wm.pt")
        policy, _, _ = load_actor_critic(base + "_ac.pt", model.feat_dim)
        eps = empirical_epsilon(expert_trajs, model, horizon, seed=seed)
        agent_returns = []
        for k in range(n_eval):
            traj, _ = run_agent_episode(model, policy, env, cfg.action_repeat,
                                        seed=seed * 10000 + step + k, mode="eval")
            agent_returns.append(traj.episode_return)
        gap = expert_return - float(np.mean(agent_returns))
        records.append({"epoch": step, "gap": gap, "eps_hat": eps, "alpha": cfg.alpha})

    gaps = np.array([r["gap"] for r in records])
    scaled = np.array([2.0 * cfg.alpha * r["eps_hat"] for r in records])
    c = fit_scale(gaps, scaled)
    for record, x in zip(records, scaled):
        record["eps_scaled"] = float(c * x)
        record["bound_holds"] = bool(record["gap"] <= BOUND_SLACK * c * x + 1e-9)
    if len(records) >= 2 and np.std(gaps) > 0 and np.std(scaled) > 0:
        rho = float(stats.spearmanr(gaps, scaled).statistic)
    else:
        rho = 0.0
    report = BoundReport(
        alpha=cfg.alpha, fitted_scale=c, spearman=rho,
        bound_holds=all(r["bound_holds"] for r in records),
        expert_return=expert_return, records=records)
    if write:
        report_dir = os.path.join(run_dir, "report")
        os.makedirs(report_dir, exist_ok=True)
        with open(os.path.join(report_dir, "bound_report.json"), "w") as f:
            json.dump(report.to_dict(), f, indent=2, sort_keys=True)
        with open(os.path.join(report_dir, "bound_columns.csv"), "w") as f:
            f.write("epoch,gap,eps_scaled\n")
            for r in report.records:
                f.write(f"{r['epoch']},{r['gap']:.6g},{r['eps_scaled']:.6g}\n")
    return report
