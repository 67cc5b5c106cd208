"""Offline pre-training and online fine-tuning loop.

Each gradient step: sample a segment batch, update the world model, imagine
penalized rollouts from the inferred states, update the policy (model value
term + filtered BC), update the critics (imagined + real-data TD), soft-update
targets. After the offline phase, one episode is collected every G steps and
appended to the store. Runs are deterministic given the config seed.
"""

import json
import os
import random
import shutil

import numpy as np
import torch

from . import actor_critic as ac
from .config import Config, save as save_config, load as load_config
from .data import Trajectory, TrajectoryStore, load_dataset, save_dataset
from .envs import ToyEnv, make_env_from_info, step_repeated
from .errors import ConfigError, DataError, EnvFailure
from .world_model import WorldModel, load_world_model, save_world_model

TRAINER_FORMAT = "moto-trainer-v1"


def _round(value):
    if isinstance(value, float):
        return float(f"{value:.6g}")
    return value


def run_agent_episode(model: WorldModel, policy, env: ToyEnv, action_repeat: int,
                      seed: int, mode: str = "eval") -> tuple[Trajectory, int]:
    """One episode driven by the latent-state policy.

    The filter starts from the model's initial state with a zero previous
    action; records are arrival-aligned. All sampling (initial latent,
    posterior draws, exploration noise) runs off a local generator seeded with
    `seed`, so the same (model, policy, seed) reproduces the trajectory
    exactly. Returns the trajectory and the raw env-step count.
    """
    gen = torch.Generator().manual_seed(seed)
    obs = env.reset(seed)
    obs_list, act_list, rew_list, suc_list = [], [], [], []
    raw_steps = 0
    with torch.no_grad():
        state = model.initial_state(1, generator=gen)
        action_t = torch.zeros(1, model.action_dim)
        done = False
        while not done:
            obs_t = torch.as_tensor(obs, dtype=torch.float32)[None]
            if not torch.isfinite(obs_t).all():
                raise EnvFailure("non-finite observation during collection")
            state, _ = model.posterior_step(state, action_t, obs_t, generator=gen)
            action_t = policy.act(state.feat, mode=mode, generator=gen)
            action = action_t.numpy()[0].astype(np.float32)
            obs, reward, success, done, taken = step_repeated(env, action, action_repeat)
            raw_steps += taken
            obs_list.append(np.round(obs * 255.0).astype(np.uint8))
            act_list.append(action)
            rew_list.append(reward)
            suc_list.append(success)
    flags = np.array(suc_list, dtype=bool)
    traj = Trajectory(obs=np.stack(obs_list), actions=np.stack(act_list),
                      rewards=np.array(rew_list, dtype=np.float32), success=flags,
                      episode_success=env.episode_success(flags))
    return traj, raw_steps


class MetricsWriter:
    """Line-delimited JSON records with stable key order and fixed precision."""

    def __init__(self, path: str | None):
        self.path = path
        self.records: list[dict] = []
        self._fh = open(path, "a") if path else None

    def write(self, record: dict) -> None:
        record = {k: _round(v) for k, v in record.items()}
        self.records.append(record)
        if self._fh:
            self._fh.write(json.dumps(record, sort_keys=True) + "\n")
            self._fh.flush()

    def close(self) -> None:
        if self._fh:
            self._fh.close()
            self._fh = None


class Trainer:
    def __init__(self, cfg: Config, env: ToyEnv, store: TrajectoryStore,
                 run_dir: str | None = None):
        if len(store) == 0:
            raise DataError("trajectory store is empty; load an offline dataset first")
        self.cfg = cfg
        self.env = env
        self.store = store
        self.run_dir = run_dir

        self._seed_everything(cfg.seed)
        self.np_rng = np.random.default_rng(cfg.seed + 1)

        sample = store[0]
        action_dim = sample.actions.shape[1]
        channels, image_size = sample.obs.shape[1], sample.obs.shape[2]
        self.model = WorldModel(cfg, action_dim, channels, image_size)
        self.policy = ac.Policy(self.model.feat_dim, action_dim, cfg.mlp_units)
        self.bundle = ac.CriticBundle(self.model.feat_dim, action_dim, cfg.mlp_units)
        self.model_opt = torch.optim.Adam(self.model.parameters(), lr=cfg.model_lr)
        self.actor_opt = torch.optim.Adam(self.policy.parameters(), lr=cfg.actor_lr)
        self.critic_opt = torch.optim.Adam(self.bundle.live_parameters(), lr=cfg.critic_lr)

        self.step = 0
        self.env_steps = 0
        self.eval_env_steps = 0
        self.episodes_collected = 0
        self.episodes_discarded = 0
        self.last_eval_success = 0.0

        metrics_path = os.path.join(run_dir, "metrics.jsonl") if run_dir else None
        if run_dir:
            os.makedirs(os.path.join(run_dir, "checkpoints"), exist_ok=True)
            os.makedirs(os.path.join(run_dir, "collected"), exist_ok=True)
        self.metrics = MetricsWriter(metrics_path)

    @staticmethod
    def _seed_everything(seed: int) -> None:
        random.seed(seed)
        np.random.seed(seed % 2**32)
        torch.manual_seed(seed)

    # --------------------------------------------------------------- updates

    def _batch_tensors(self, batch):
        obs = torch.as_tensor(batch.obs, dtype=torch.float32) / 255.0
        actions = torch.as_tensor(batch.actions, dtype=torch.float32)
        rewards = torch.as_tensor(batch.rewards, dtype=torch.float32)
        success = torch.as_tensor(batch.episode_success, dtype=torch.bool)
        return obs, actions, rewards, success

    def train_step(self) -> dict:
        """One combined model + actor + critic update on a fresh segment batch."""
        cfg = self.cfg
        batch = self.store.sample_segments(cfg.model_batch, cfg.seq_len, self.np_rng)
        obs, actions, rewards, ep_success = self._batch_tensors(batch)

        model_loss, diag = self.model.model_loss(obs, actions, rewards)
        self.model_opt.zero_grad()
        model_loss.backward()
        torch.nn.utils.clip_grad_norm_(self.model.parameters(), cfg.grad_clip)
        self.model_opt.step()

        states = diag["states"]  # (B, L, S), detached
        b, l, s = states.shape
        flat = states.reshape(b * l, s)
        idx = torch.randint(0, b * l, (min(cfg.agent_batch, b * l),))
        starts = flat[idx]

        alpha = 0.0 if cfg.no_uncertainty else cfg.alpha
        beta = 0.0 if cfg.no_bc else cfg.beta

        if cfg.horizon_zero:
            # degenerate value expansion: plain min-Q actor-critic on real states
            action, log_prob = self.policy.rsample(starts)
            value = ac.v0(starts, action, self.bundle)
            actor_value_loss = -value.mean() + cfg.entropy_weight * log_prob.mean()
            u_mean = 0.0
            critic_model = torch.zeros(())
        else:
            rollout = self.model.rollout_imagination(
                starts, self.policy, cfg.horizon, alpha)
            actor_value_loss = ac.actor_model_loss(rollout, cfg, self.bundle)
            u_mean = float(rollout.uncertainty.detach().mean())
            critic_model = ac.critic_model_loss(rollout, cfg, self.bundle)

        if cfg.bc_filter == "advantage":
            weights = ac.advantage_weights(states, rewards, cfg, self.bundle, self.policy)
            bc_loss = ac.weighted_bc(states, actions, weights, self.policy)
        else:
            bc_loss = ac.bc_regularizer(states, actions, ep_success, self.policy)
        actor_loss = ac.joint_actor_loss(actor_value_loss, bc_loss, beta)
        self.actor_opt.zero_grad()
        actor_loss.backward()
        torch.nn.utils.clip_grad_norm_(self.policy.parameters(), cfg.grad_clip)
        self.actor_opt.step()

        critic_data = ac.critic_data_loss(states, actions, rewards, cfg,
                                          self.bundle, self.policy)
        critic_total = ac.critic_loss(critic_model, critic_data)
        self.critic_opt.zero_grad()
        critic_total.backward()
        torch.nn.utils.clip_grad_norm_(self.bundle.live_parameters(), cfg.grad_clip)
        self.critic_opt.step()
        ac.update_targets(self.bundle, cfg.target_rho)

        return {
            "model_loss": float(diag["loss"]),
            "recon": float(diag["recon"]),
            "reward_nll": float(diag["reward"]),
            "kl": float(diag["kl"]),
            "actor_loss": float(actor_loss.detach()),
            "bc_loss": float(bc_loss.detach()),
            "critic_loss": float(critic_total.detach()),
            "critic_model": float(critic_model.detach()),
            "critic_data": float(critic_data.detach()),
            "u_mean": u_mean,
        }

    # ------------------------------------------------------------ collection

    def collect_episode(self, env: ToyEnv, mode: str, seed: int) -> Trajectory:
        """Run one episode with the latent-state policy; arrival-aligned records."""
        traj, raw_steps = run_agent_episode(self.model, self.policy, env,
                                            self.cfg.action_repeat, seed, mode=mode)
        if mode == "explore":
            self.env_steps += raw_steps
        else:
            self.eval_env_steps += raw_steps
        return traj

    def evaluate(self, n_episodes: int, eval_round: int) -> dict:
        successes, returns = [], []
        for k in range(n_episodes):
            seed = self.cfg.seed * 100003 + 50000 + eval_round * 1000 + k
            traj = self.collect_episode(self.env, mode="eval", seed=seed)
            successes.append(traj.episode_success)
            returns.append(traj.episode_return)
        return {"success_rate": float(np.mean(successes)),
                "mean_return": float(np.mean(returns))}

    # -------------------------------------------------------------- training

    def train(self, final_eval: bool | None = None) -> dict:
        """Run the full schedule; returns artifact summary."""
        cfg = self.cfg
        total = cfg.n_offline + cfg.n_online
        eval_round = 0
        stopped_early = False
        while self.step < total:
            self.step += 1
            phase = "offline" if self.step <= cfg.n_offline else "online"
            record = {"step": self.step, "phase": phase, "env_steps": self.env_steps}
            record.update(self.train_step())
            self.metrics.write(record)

            if (cfg.n_online > 0 and self.step > cfg.n_offline
                    and self.step % cfg.updates_per_episode == 0):
                seed = cfg.seed * 100003 + self.episodes_collected
                try:
                    traj = self.collect_episode(self.env, mode="explore", seed=seed)
                except EnvFailure as e:
                    self.episodes_discarded += 1
                    self.metrics.write({"step": self.step, "phase": "error",
                                        "error": str(e)})
                else:
                    self.store.append(traj)
                    self._persist_episode(traj)
                    self.episodes_collected += 1
                    if self.episodes_collected % cfg.eval_every_episodes == 0:
                        eval_round += 1
                        stats = self.evaluate(cfg.eval_episodes, eval_round)
                        self.last_eval_success = stats["success_rate"]
                        self.metrics.write({
                            "step": self.step, "phase": "eval",
                            "episodes_collected": self.episodes_collected,
                            "env_steps": self.env_steps, **stats})
                        if (cfg.stop_on_success > 0
                                and stats["success_rate"] >= cfg.stop_on_success):
                            stopped_early = True

            if self.run_dir and (self.step % cfg.checkpoint_interval == 0
                                 or self.step == total or stopped_early):
                self.save_checkpoint()
            if stopped_early:
                break

        do_final = final_eval if final_eval is not None else cfg.n_online > 0
        final_stats = {}
        if do_final:
            final_stats = self.evaluate(cfg.eval_episodes, eval_round=999)
            self.last_eval_success = final_stats["success_rate"]
            self.metrics.write({"step": self.step, "phase": "final",
                                "env_steps": self.env_steps, **final_stats})
            if self.run_dir:
                self.save_checkpoint()
        self.metrics.close()
        return {
            "steps": self.step,
            "env_steps": self.env_steps,
            "episodes_collected": self.episodes_collected,
            "episodes_discarded": self.episodes_discarded,
            "stopped_early": stopped_early,
            "final": final_stats,
            "last_eval_success": self.last_eval_success,
            "run_dir": self.run_dir,
        }

    # ------------------------------------------------------------ persistence

    def _persist_episode(self, traj: Trajectory) -> None:
        if not self.run_dir:
            return
        path = os.path.join(self.run_dir, "collected",
                            f"ep_{self.episodes_collected:06d}.traj")
        save_dataset([traj], path, env_info={"env_id": self.cfg.env_id},
                     write_manifest=False)

    def save_checkpoint(self) -> str:
        if not self.run_dir:
            raise ValueError("trainer has no run directory")
        base = os.path.join(self.run_dir, "checkpoints", f"step_{self.step:07d}")
        save_world_model(self.model, base + "_wm.pt", optimizer=self.model_opt)
        ac.save_actor_critic(self.policy, self.bundle, base + "_ac.pt", self.cfg,
                             actor_opt=self.actor_opt, critic_opt=self.critic_opt)
        torch.save({
            "format": TRAINER_FORMAT,
            "step": self.step,
            "env_steps": self.env_steps,
            "eval_env_steps": self.eval_env_steps,
            "episodes_collected": self.episodes_collected,
            "episodes_discarded": self.episodes_discarded,
            "last_eval_success": self.last_eval_success,
            "torch_rng": torch.get_rng_state(),
            "np_rng": self.np_rng.bit_generator.state,
            "py_rng": random.getstate(),
        }, base + "_trainer.pt")
        return base

    @classmethod
    def resume(cls, run_dir: str) -> "Trainer":
        """Rebuild a trainer from the latest checkpoint of a run directory."""
        cfg = load_config(os.path.join(run_dir, "config.yaml"))
        step = latest_checkpoint_step(run_dir)
        if step is None:
            raise DataError(f"{run_dir}: no checkpoints to resume from")
        store = load_run_store(run_dir)
        _, env_info = load_dataset(os.path.join(run_dir, "data", "dataset.moto"))
        trainer = cls(cfg, make_env_from_info(env_info), store, run_dir=run_dir)
        base = os.path.join(run_dir, "checkpoints", f"step_{step:07d}")
        model, wm_payload = load_world_model(base + "_wm.pt")
        trainer.model = model
        if "optimizer_state" in wm_payload:
            trainer.model_opt = torch.optim.Adam(model.parameters(), lr=cfg.model_lr)
            trainer.model_opt.load_state_dict(wm_payload["optimizer_state"])
        policy, bundle, ac_payload = ac.load_actor_critic(base + "_ac.pt", model.feat_dim)
        trainer.policy, trainer.bundle = policy, bundle
        trainer.actor_opt = torch.optim.Adam(policy.parameters(), lr=cfg.actor_lr)
        trainer.critic_opt = torch.optim.Adam(bundle.live_parameters(), lr=cfg.critic_lr)
        if "actor_opt_state" in ac_payload:
            trainer.actor_opt.load_state_dict(ac_payload["actor_opt_state"])
        if "critic_opt_state" in ac_payload:
            trainer.critic_opt.load_state_dict(ac_payload["critic_opt_state"])
        tstate = torch.load(base + "_trainer.pt", map_location="cpu", weights_only=False)
        trainer.step = tstate["step"]
        trainer.env_steps = tstate["env_steps"]
        trainer.eval_env_steps = tstate["eval_env_steps"]
        trainer.episodes_collected = tstate["episodes_collected"]
        trainer.episodes_discarded = tstate["episodes_discarded"]
        trainer.last_eval_success = tstate["last_eval_success"]
        torch.set_rng_state(tstate["torch_rng"])
        trainer.np_rng = np.random.default_rng()
        trainer.np_rng.bit_generator.state = tstate["np_rng"]
        random.setstate(tstate["py_rng"])
        return trainer


# ----------------------------------------------------------------- run setup

def latest_checkpoint_step(run_dir: str) -> int | None:
    ckpt_dir = os.path.join(run_dir, "checkpoints")
    if not os.path.isdir(ckpt_dir):
        return None
    steps = [int(name.split("_")[1]) for name in os.listdir(ckpt_dir)
             if name.endswith("_wm.pt")]
    return max(steps) if steps else None


def checkpoint_steps(run_dir: str) -> list[int]:
    ckpt_dir = os.path.join(run_dir, "checkpoints")
    if not os.path.isdir(ckpt_dir):
        return []
    return sorted(int(name.split("_")[1]) for name in os.listdir(ckpt_dir)
                  if name.endswith("_wm.pt"))


def load_run_store(run_dir: str) -> TrajectoryStore:
    """Offline dataset plus any episodes collected by a previous run."""
    data_path = os.path.join(run_dir, "data", "dataset.moto")
    trajectories, _ = load_dataset(data_path)
    store = TrajectoryStore(trajectories)
    collected = os.path.join(run_dir, "collected")
    if os.path.isdir(collected):
        for name in sorted(os.listdir(collected)):
            if name.endswith(".traj"):
                for traj in load_dataset(os.path.join(collected, name))[0]:
                    store.append(traj)
    return store


def prepare_run_dir(cfg: Config, run_dir: str) -> None:
    """Create the self-contained run layout: config copy, dataset copy, report dir."""
    if not cfg.dataset:
        raise ConfigError("config has no dataset path")
    if not os.path.exists(cfg.dataset):
        raise DataError(f"dataset not found: {cfg.dataset}")
    _, env_info = load_dataset(cfg.dataset)
    if env_info.get("env_id") and env_info["env_id"] != cfg.env_id:
        raise ConfigError(f"dataset was generated on {env_info['env_id']!r} "
                          f"but config requests {cfg.env_id!r}")
    if env_info.get("action_repeat") and env_info["action_repeat"] != cfg.action_repeat:
        raise ConfigError(f"dataset action_repeat {env_info['action_repeat']} "
                          f"!= config action_repeat {cfg.action_repeat}")
    os.makedirs(os.path.join(run_dir, "data"), exist_ok=True)
    os.makedirs(os.path.join(run_dir, "report"), exist_ok=True)
    target = os.path.join(run_dir, "data", "dataset.moto")
    if os.path.abspath(cfg.dataset) != os.path.abspath(target):
        shutil.copyfile(cfg.dataset, target)
        manifest = cfg.dataset + ".manifest.txt"
        if os.path.exists(manifest):
            shutil.copyfile(manifest, target + ".manifest.txt")
    local = cfg.replace(dataset=target)
    save_config(local, os.path.join(run_dir, "config.yaml"))


def run_training(cfg: Config, run_dir: str) -> dict:
    """End-to-end entry point: set up the run directory and train to completion."""
    prepare_run_dir(cfg, run_dir)
    cfg = load_config(os.path.join(run_dir, "config.yaml"))
    store = load_run_store(run_dir)
    _, env_info = load_dataset(os.path.join(run_dir, "data", "dataset.moto"))
    trainer = Trainer(cfg, make_env_from_info(env_info), store, run_dir=run_dir)
    return trainer.train()
