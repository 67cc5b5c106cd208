import os

import numpy as np
import pytest
import torch

from moto.config import Config
from moto.data import TrajectoryStore, Trajectory, load_dataset
from moto.envs import generate_dataset, make_env, scripted_policy

torch.set_num_threads(max(1, os.cpu_count() or 1))

# scaled-down knobs used by fixtures and training-based tests
SMALL = dict(cnn_depth=8, embed_dim=128, model_batch=8, seq_len=16,
             agent_batch=64, horizon=5)

TINY = dict(deter_dim=8, stoch_slots=4, stoch_classes=4, cnn_depth=4, embed_dim=16,
            mlp_units=16, ensemble_size=3, model_batch=2, seq_len=4, agent_batch=4,
            horizon=3)


def small_config(**overrides) -> Config:
    return Config(**{**SMALL, **overrides})


def tiny_config(**overrides) -> Config:
    return Config(**{**TINY, **overrides})


def random_trajectory(rng: np.random.Generator, t: int = 8, action_dim: int = 2,
                      image_size: int = 16, success: bool = True) -> Trajectory:
    return Trajectory(
        obs=rng.integers(0, 256, size=(t, 3, image_size, image_size), dtype=np.uint8),
        actions=rng.uniform(-1, 1, size=(t, action_dim)).astype(np.float32),
        rewards=rng.normal(size=t).astype(np.float32),
        success=rng.integers(0, 2, size=t).astype(bool),
        episode_success=success,
    )


@pytest.fixture(scope="session")
def push_dataset_path(tmp_path_factory):
    path = tmp_path_factory.mktemp("data") / "push.moto"
    env = make_env("push-v0")
    generate_dataset(env, scripted_policy(env), 10, str(path), seed=0)
    return str(path)


@pytest.fixture(scope="session")
def push_store(push_dataset_path):
    trajectories, _ = load_dataset(push_dataset_path)
    return TrajectoryStore(trajectories)


@pytest.fixture(scope="session")
def trained_push(push_dataset_path):
    """A world model + agent trained briefly on the push demos (shared fixture).

    Long enough that the model reconstructs the scene and the ensemble heads
    agree on-distribution; used by the OOD-separation and decoder tests.
    """
    from moto.trainer import Trainer

    trajectories, _ = load_dataset(push_dataset_path)
    cfg = small_config(env_id="push-v0", dataset=push_dataset_path, seed=3,
                       model_lr=3e-4, n_offline=600, n_online=0)
    trainer = Trainer(cfg, make_env("push-v0"), TrajectoryStore(trajectories))
    trainer.train(final_eval=False)
    return trainer
