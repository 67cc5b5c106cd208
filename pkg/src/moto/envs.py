"""Deterministic pixel environments, scripted controllers, and dataset generation.

Two families: single-task reach/push envs (2-D action, horizon 64) and a
multi-object "desk" env (4-D action, horizon 128) where each of four objects
carries a manipulated degree in [0, 1] and goals are object subsets. Physics
and rendering are pure functions of the state; all randomness comes from the
reset seed.
"""

import functools
from dataclasses import dataclass

import numpy as np

from .data import Trajectory, save_dataset
from .errors import DataError, EnvFailure

WORKSPACE_MARGIN = 0.06


@dataclass
class EnvSpec:
    env_id: str
    image_size: int
    horizon: int
    action_dim: int
    reward_mode: str  # "success" or "per-object"
    goal_subset: tuple = ()
    default_action_repeat: int = 1

    def __post_init__(self):
        if self.horizon < 16:
            raise ValueError(f"horizon must be >= 16, got {self.horizon}")

    def to_dict(self) -> dict:
        return {"env_id": self.env_id, "image_size": self.image_size,
                "horizon": self.horizon, "action_dim": self.action_dim,
                "reward_mode": self.reward_mode, "goal_subset": list(self.goal_subset),
                "default_action_repeat": self.default_action_repeat}


@functools.lru_cache(maxsize=8)
def _pixel_grid(size: int):
    centers = (np.arange(size) + 0.5) / size
    return np.meshgrid(centers, centers, indexing="xy")


def _draw_disc(img: np.ndarray, pos, radius: float, color) -> None:
    """Paint a filled disc (position and radius in workspace units) onto HWC img."""
    xs, ys = _pixel_grid(img.shape[0])
    mask = (xs - pos[0]) ** 2 + (ys - pos[1]) ** 2 <= radius ** 2
    img[mask] = color


def _to_obs(img: np.ndarray) -> np.ndarray:
    """HWC float [0,1] -> CHW float32, quantized to uint8 levels for exact storage."""
    u8 = np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)
    return u8.transpose(2, 0, 1).astype(np.float32) / 255.0


class ToyEnv:
    """Shared plumbing: step counting, action clipping, termination."""

    def __init__(self, spec: EnvSpec):
        self.spec = spec
        self.clip_warnings = 0
        self._step_count = 0
        self._rng = np.random.default_rng(0)

    def reset(self, seed: int | None = None) -> np.ndarray:
        if seed is not None:
            self._rng = np.random.default_rng(seed)
        self._step_count = 0
        self._reset_state(self._rng)
        return self.render()

    def step(self, action) -> tuple[np.ndarray, float, bool, bool]:
        action = np.asarray(action, dtype=np.float64).reshape(-1)
        if action.shape[0] != self.spec.action_dim:
            raise ValueError(f"action dim {action.shape[0]}, "
                             f"expected {self.spec.action_dim}")
        if np.any(np.abs(action) > 1.0 + 1e-9):
            self.clip_warnings += 1
            action = np.clip(action, -1.0, 1.0)
        self._step_count += 1
        self._physics(action)
        reward = self._reward()
        success = self._success()
        done = self._step_count >= self.spec.horizon
        return self.render(), float(reward), bool(success), bool(done)

    def render(self) -> np.ndarray:
        """Observation: CHW float32 in [0, 1]; pure function of the state."""
        return _to_obs(self._render_hwc())

    @staticmethod
    def episode_success(success_flags: np.ndarray) -> bool:
        return bool(np.any(success_flags))

    # subclass hooks
    def _reset_state(self, rng):
        raise NotImplementedError

    def _physics(self, action):
        raise NotImplementedError

    def _reward(self) -> float:
        raise NotImplementedError

    def _success(self) -> bool:
        raise NotImplementedError

    def _render_hwc(self) -> np.ndarray:
        raise NotImplementedError


class ReachPushEnv(ToyEnv):
    """Point agent in [0,1]^2; reach a goal marker, or push a puck onto it.

    Action (vx, vy) in [-1,1]^2, scaled to MAX_STEP per raw env step. Pushing is
    overlap resolution: the puck is displaced out of the agent's contact disc.
    Sparse reward: 1.0 on every step the success predicate holds.
    """

    MAX_STEP = 0.04
    CONTACT = 0.10
    TOL = 0.08
    GOAL = np.array([0.78, 0.50])

    def __init__(self, task: str = "push", image_size: int = 32, horizon: int = 64):
        if task not in ("reach", "push"):
            raise ValueError(f"unknown task {task!r}")
        spec = EnvSpec(env_id=f"{task}-v0", image_size=image_size, horizon=horizon,
                       action_dim=2, reward_mode="success", default_action_repeat=2)
        super().__init__(spec)
        self.task = task
        self.agent = np.zeros(2)
        self.obj = np.zeros(2)

    def _reset_state(self, rng):
        self.agent = np.array([0.18, 0.50]) + rng.uniform(-0.08, 0.08, size=2)
        self.obj = np.array([0.46, 0.50]) + rng.uniform(-0.10, 0.10, size=2)

    def _physics(self, action):
        self.agent = np.clip(self.agent + self.MAX_STEP * action[:2],
                             WORKSPACE_MARGIN, 1.0 - WORKSPACE_MARGIN)
        if self.task == "push":
            delta = self.obj - self.agent
            dist = float(np.linalg.norm(delta))
            if dist < self.CONTACT:
                direction = delta / dist if dist > 1e-9 else np.array([1.0, 0.0])
                self.obj = np.clip(self.obj + (self.CONTACT - dist) * direction,
                                   WORKSPACE_MARGIN, 1.0 - WORKSPACE_MARGIN)

    def _target(self) -> np.ndarray:
        return self.agent if self.task == "reach" else self.obj

    def _success(self) -> bool:
        return bool(np.linalg.norm(self._target() - self.GOAL) < self.TOL)

    def _reward(self) -> float:
        return 1.0 if self._success() else 0.0

    def _render_hwc(self) -> np.ndarray:
        img = np.full((self.spec.image_size, self.spec.image_size, 3), 0.08)
        _draw_disc(img, self.GOAL, 0.07, np.array([0.15, 0.35, 1.0]))
        if self.task == "push":
            _draw_disc(img, self.obj, 0.07, np.array([0.1, 0.9, 0.2]))
        _draw_disc(img, self.agent, 0.055, np.array([1.0, 0.25, 0.2]))
        return img


class DeskEnv(ToyEnv):
    """Four fixed objects, each with a manipulated degree in [0, 1].

    Action (vx, vy, twist, spare): move the agent, and when within reach of an
    object, twist changes that object's degree. An object is "done" at degree
    >= DONE. Reward each raw step is the count of done objects in the goal
    subset; success requires the whole subset done.
    """

    MAX_STEP = 0.05
    REACH = 0.12
    TWIST_RATE = 0.15
    DONE = 0.9
    POSITIONS = np.array([[0.2, 0.2], [0.2, 0.8], [0.8, 0.2], [0.8, 0.8]])
    COLORS = np.array([[1.0, 0.25, 0.2], [0.2, 1.0, 0.3], [0.25, 0.45, 1.0],
                       [1.0, 0.9, 0.15]])

    def __init__(self, goal_subset=(0, 1, 2, 3), image_size: int = 32, horizon: int = 128):
        goal_subset = tuple(sorted(set(int(g) for g in goal_subset)))
        if not goal_subset or any(g not in range(4) for g in goal_subset):
            raise ValueError(f"goal subset must be nonempty within 0..3, got {goal_subset}")
        spec = EnvSpec(env_id="desk-v0", image_size=image_size, horizon=horizon,
                       action_dim=4, reward_mode="per-object", goal_subset=goal_subset,
                       default_action_repeat=1)
        super().__init__(spec)
        self.agent = np.zeros(2)
        self.degrees = np.zeros(4)

    def _reset_state(self, rng):
        self.agent = np.array([0.5, 0.5]) + rng.uniform(-0.06, 0.06, size=2)
        self.degrees = np.zeros(4)

    def _physics(self, action):
        self.agent = np.clip(self.agent + self.MAX_STEP * action[:2],
                             WORKSPACE_MARGIN, 1.0 - WORKSPACE_MARGIN)
        dists = np.linalg.norm(self.POSITIONS - self.agent, axis=1)
        nearest = int(np.argmin(dists))
        if dists[nearest] < self.REACH:
            self.degrees[nearest] = float(np.clip(
                self.degrees[nearest] + self.TWIST_RATE * action[2], 0.0, 1.0))

    def object_done(self) -> np.ndarray:
        return self.degrees >= self.DONE

    def _success(self) -> bool:
        return bool(np.all(self.object_done()[list(self.spec.goal_subset)]))

    def _reward(self) -> float:
        return float(np.sum(self.object_done()[list(self.spec.goal_subset)]))

    def _render_hwc(self) -> np.ndarray:
        img = np.full((self.spec.image_size, self.spec.image_size, 3), 0.08)
        for k in range(4):
            brightness = 0.25 + 0.75 * self.degrees[k]
            _draw_disc(img, self.POSITIONS[k], 0.09, self.COLORS[k] * brightness)
        _draw_disc(img, self.agent, 0.05, np.array([0.95, 0.95, 0.95]))
        return img


# ------------------------------------------------------------------ registry

def make_env(env_id: str, **kwargs) -> ToyEnv:
    if env_id == "reach-v0":
        return ReachPushEnv(task="reach", **kwargs)
    if env_id == "push-v0":
        return ReachPushEnv(task="push", **kwargs)
    if env_id == "desk-v0":
        return DeskEnv(**kwargs)
    raise ValueError(f"unknown env id {env_id!r}; known: reach-v0, push-v0, desk-v0")


def make_env_from_info(info: dict) -> ToyEnv:
    """Rebuild an environment matching a dataset's recorded spec."""
    kwargs = {}
    if "image_size" in info:
        kwargs["image_size"] = int(info["image_size"])
    if "horizon" in info:
        kwargs["horizon"] = int(info["horizon"])
    if info["env_id"] == "desk-v0" and info.get("goal_subset"):
        kwargs["goal_subset"] = tuple(info["goal_subset"])
    return make_env(info["env_id"], **kwargs)


ENV_IDS = ("reach-v0", "push-v0", "desk-v0")


# --------------------------------------------------------- scripted policies

class ScriptedReach:
    def __call__(self, env: ReachPushEnv) -> np.ndarray:
        # full speed toward the goal, easing off inside one step's range
        return np.clip((env.GOAL - env.agent) / env.MAX_STEP, -1.0, 1.0)


class ScriptedPush:
    """Two-phase controller: circle to the far side of the puck, then push."""

    def __call__(self, env: ReachPushEnv) -> np.ndarray:
        to_goal = env.GOAL - env.obj
        dist_goal = float(np.linalg.norm(to_goal))
        if dist_goal < env.TOL * 0.5:
            return np.zeros(2)
        push_dir = to_goal / dist_goal
        staging = env.obj - push_dir * (env.CONTACT + 0.01)
        rel = env.agent - env.obj
        behind = float(np.dot(rel, -push_dir))
        lateral = float(np.linalg.norm(rel - np.dot(rel, -push_dir) * (-push_dir)))
        if behind > 0.5 * env.CONTACT and lateral < 0.55 * env.CONTACT:
            step = push_dir  # aligned: drive the puck toward the goal
        else:
            to_stage = staging - env.agent
            dist_obj = float(np.linalg.norm(rel))
            if dist_obj < env.CONTACT + 0.03 and behind <= 0.5 * env.CONTACT:
                # detour sideways around the puck instead of plowing through it
                tangent = np.array([-rel[1], rel[0]])
                norm = float(np.linalg.norm(tangent))
                tangent = tangent / norm if norm > 1e-9 else np.array([0.0, 1.0])
                if np.dot(tangent, to_stage) < 0:
                    tangent = -tangent
                step = tangent + 0.4 * rel / max(dist_obj, 1e-9)
            else:
                step = to_stage
        norm = float(np.linalg.norm(step))
        if norm < 1e-9:
            return np.zeros(2)
        return np.clip(step / norm * min(1.0, norm / env.MAX_STEP), -1.0, 1.0)


class ScriptedDesk:
    """Visit the configured objects in order; twist each until done."""

    def __init__(self, subset=(0, 1, 2, 3)):
        self.subset = tuple(subset)

    def __call__(self, env: DeskEnv) -> np.ndarray:
        action = np.zeros(4)
        for k in self.subset:
            if env.degrees[k] >= 0.97:
                continue
            to_obj = env.POSITIONS[k] - env.agent
            dist = float(np.linalg.norm(to_obj))
            if dist > 0.7 * env.REACH:
                step = to_obj / dist * min(1.0, dist / env.MAX_STEP)
                action[:2] = np.clip(step, -1.0, 1.0)
            else:
                action[2] = 1.0
            return action
        return action


def scripted_policy(env: ToyEnv, subset=None):
    """Default expert controller for an environment instance."""
    if isinstance(env, DeskEnv):
        return ScriptedDesk(subset if subset is not None else env.spec.goal_subset)
    if isinstance(env, ReachPushEnv):
        return ScriptedReach() if env.task == "reach" else ScriptedPush()
    raise ValueError(f"no scripted policy for {type(env).__name__}")


# -------------------------------------------------------------- episode runs

def step_repeated(env: ToyEnv, action, repeat: int):
    """Apply one action for `repeat` raw steps; sum rewards, OR success flags.

    Returns (obs, reward, success, done, raw_steps_taken).
    """
    total_reward, any_success, done = 0.0, False, False
    obs, taken = None, 0
    for _ in range(repeat):
        obs, reward, success, done = env.step(action)
        taken += 1
        if not np.all(np.isfinite(obs)):
            raise EnvFailure("environment produced a non-finite observation")
        total_reward += reward
        any_success = any_success or success
        if done:
            break
    return obs, total_reward, any_success, done, taken


def rollout_episode(env: ToyEnv, controller, action_repeat: int, seed: int,
                    action_noise: float = 0.0, noise_rng=None) -> Trajectory:
    """Run a controller (a function of the env) for one episode.

    Records arrival-aligned arrays: entry t holds the post-action observation,
    the action taken, and the reward accumulated over the repeated raw steps.
    """
    env.reset(seed)
    obs_list, act_list, rew_list, suc_list = [], [], [], []
    done = False
    while not done:
        action = np.asarray(controller(env), dtype=np.float32)
        if action_noise > 0.0 and noise_rng is not None:
            action = action + noise_rng.normal(0.0, action_noise, size=action.shape)
        action = np.clip(action, -1.0, 1.0).astype(np.float32)
        obs, reward, success, done, _ = step_repeated(env, action, action_repeat)
        obs_list.append(np.round(obs * 255.0).astype(np.uint8))
        act_list.append(action)
        rew_list.append(reward)
        suc_list.append(success)
    success_flags = np.array(suc_list, dtype=bool)
    return Trajectory(
        obs=np.stack(obs_list), actions=np.stack(act_list),
        rewards=np.array(rew_list, dtype=np.float32), success=success_flags,
        episode_success=env.episode_success(success_flags))


# ------------------------------------------------------------------ datasets

def generate_dataset(env: ToyEnv, policy, n_episodes: int, path: str, seed: int = 0,
                     action_repeat: int | None = None, action_noise: float = 0.05) -> dict:
    """Collect scripted episodes and write them to a dataset container."""
    if n_episodes < 1:
        raise DataError(f"n_episodes must be >= 1, got {n_episodes}")
    if action_repeat is None:
        action_repeat = env.spec.default_action_repeat
    noise_rng = np.random.default_rng(seed + 777)
    trajectories = [
        rollout_episode(env, policy, action_repeat, seed=seed + i,
                        action_noise=action_noise, noise_rng=noise_rng)
        for i in range(n_episodes)
    ]
    env_info = env.spec.to_dict()
    env_info["action_repeat"] = action_repeat
    return save_dataset(trajectories, path, env_info=env_info,
                        manifest_extra={"seed": seed, "action_noise": action_noise})


def generate_desk_dataset(variant: str, n_episodes: int, path: str, seed: int = 0,
                          action_noise: float = 0.05) -> dict:
    """Compositional datasets for the 4-object desk task.

    "mixed": half the episodes complete all four objects, half complete a
    3-object subset. "partial": every episode targets a 3-object subset and
    none completes all four; episode_success is recorded against the episode's
    own subset (the BC filter then regularizes toward those completions), while
    rewards always score the canonical 4-object task.
    """
    if variant not in ("mixed", "partial"):
        raise DataError(f"unknown desk dataset variant {variant!r}")
    env = DeskEnv(goal_subset=(0, 1, 2, 3))
    rng = np.random.default_rng(seed)
    noise_rng = np.random.default_rng(seed + 777)
    triples = [(0, 1, 2), (0, 1, 3), (0, 2, 3), (1, 2, 3)]
    trajectories = []
    for i in range(n_episodes):
        full = variant == "mixed" and i % 2 == 0
        subset = (0, 1, 2, 3) if full else triples[rng.integers(0, len(triples))]
        order = list(subset)
        rng.shuffle(order)
        traj = rollout_episode(env, ScriptedDesk(order), action_repeat=1, seed=seed + i,
                               action_noise=action_noise, noise_rng=noise_rng)
        if variant == "partial":
            # success judged against the episode's own attempted subset
            traj.episode_success = bool(np.all(env.object_done()[list(subset)]))
        trajectories.append(traj)
    env_info = env.spec.to_dict()
    env_info["action_repeat"] = 1
    env_info["variant"] = variant
    return save_dataset(trajectories, path, env_info=env_info,
                        manifest_extra={"seed": seed, "action_noise": action_noise,
                                        "variant": variant})
