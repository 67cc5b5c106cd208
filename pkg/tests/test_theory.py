import copy
import os

import numpy as np
import pytest
import torch

from moto.actor_critic import Policy
from moto.data import load_dataset
from moto.envs import ReachPushEnv, ScriptedPush, generate_dataset
from moto.errors import ReportError
from moto.theory import bound_report, empirical_epsilon, fit_scale, performance_gap
from moto.trainer import run_training
from moto.world_model import WorldModel

from conftest import tiny_config


def mini_env():
    return ReachPushEnv(task="push", image_size=16, horizon=16)


@pytest.fixture(scope="module")
def mini_data(tmp_path_factory):
    path = str(tmp_path_factory.mktemp("theory") / "mini.moto")
    generate_dataset(mini_env(), ScriptedPush(), 6, path, seed=0)
    return path


@pytest.fixture(scope="module")
def mini_model(mini_data):
    torch.manual_seed(0)
    trajs, _ = load_dataset(mini_data)
    cfg = tiny_config()
    model = WorldModel(cfg, action_dim=2, image_channels=3, image_size=16)
    return model, trajs


def zero_heads(model):
    with torch.no_grad():
        for p in (model.ensemble.w1, model.ensemble.b1, model.ensemble.w2,
                  model.ensemble.b2):
            p.zero_()


def test_epsilon_zero_for_identical_heads(mini_model):
    model, trajs = mini_model
    model = copy.deepcopy(model)
    zero_heads(model)
    assert empirical_epsilon(trajs, model, horizon=3) == pytest.approx(0.0, abs=1e-7)


def test_epsilon_h1_is_mean_one_step_disagreement(mini_model):
    model, trajs = mini_model
    got = empirical_epsilon(trajs, model, horizon=1, seed=5)
    manual = []
    with torch.no_grad():
        for traj in trajs:
            gen = torch.Generator().manual_seed(5)
            n = len(traj) - 1
            obs = torch.as_tensor(traj.obs_float())[None, :n]
            actions = torch.as_tensor(traj.actions)
            feats, _, _ = model.infer_batch(obs, actions[None, :n], generator=gen)
            u = model.step_uncertainty(feats[0], actions[1:n + 1])
            manual.append(float(u.mean()))
    assert got == pytest.approx(float(np.mean(manual)), abs=1e-6)


def test_epsilon_invariant_to_trajectory_order(mini_model):
    model, trajs = mini_model
    a = empirical_epsilon(trajs, model, horizon=3, seed=2)
    b = empirical_epsilon(list(reversed(trajs)), model, horizon=3, seed=2)
    assert a == pytest.approx(b, abs=1e-9)


def test_epsilon_scales_with_logits_at_h1(mini_model):
    model, trajs = mini_model
    base = empirical_epsilon(trajs, model, horizon=1, seed=0)
    scaled_model = copy.deepcopy(model)
    with torch.no_grad():
        scaled_model.ensemble.w2.mul_(3.0)
        scaled_model.ensemble.b2.mul_(3.0)
    scaled = empirical_epsilon(trajs, scaled_model, horizon=1, seed=0)
    assert scaled == pytest.approx(3.0 * base, rel=1e-5)


def test_epsilon_skips_short_trajectories(mini_model):
    from moto.data import Trajectory

    model, trajs = mini_model
    short = Trajectory(obs=trajs[0].obs[:3], actions=trajs[0].actions[:3],
                       rewards=trajs[0].rewards[:3], success=trajs[0].success[:3],
                       episode_success=True)
    with pytest.warns(UserWarning):
        mixed = empirical_epsilon([short, trajs[0]], model, horizon=4, seed=0)
    # the short trajectory contributed nothing
    alone = empirical_epsilon([trajs[0]], model, horizon=4, seed=0)
    assert mixed == pytest.approx(alone, abs=1e-9)
    with pytest.raises(ValueError):
        with pytest.warns(UserWarning):
            empirical_epsilon([short], model, horizon=4, seed=0)


def test_epsilon_never_updates_parameters(mini_model):
    model, trajs = mini_model
    before = copy.deepcopy(model.state_dict())
    empirical_epsilon(trajs, model, horizon=2, seed=0)
    after = model.state_dict()
    assert all(torch.equal(before[k], after[k]) for k in before)


def test_performance_gap_untrained_agent_positive(mini_model):
    model, _ = mini_model
    torch.manual_seed(0)
    policy = Policy(model.feat_dim, 2, units=16)
    env = mini_env()
    out = performance_gap(ScriptedPush(), model, policy, env, n_eval=5,
                          action_repeat=2, seed=1)
    assert out["gap"] > 0.0
    assert out["expert_return"] > 0.0


def test_performance_gap_zero_against_own_return(mini_model):
    model, _ = mini_model
    torch.manual_seed(0)
    policy = Policy(model.feat_dim, 2, units=16)
    env = mini_env()
    first = performance_gap(0.0, model, policy, env, n_eval=5, action_repeat=2, seed=2)
    again = performance_gap(first["agent_return"], model, policy, env, n_eval=5,
                            action_repeat=2, seed=2)
    assert again["gap"] == pytest.approx(0.0, abs=1e-9)


def test_fit_scale_least_squares():
    gaps = np.array([2.0, 4.0, 6.0])
    scaled = np.array([1.0, 2.0, 3.0])
    assert fit_scale(gaps, scaled) == pytest.approx(2.0)
    assert fit_scale(np.array([1.0]), np.array([0.0])) == 0.0
    # negative correlation clamps at zero (scale must stay positive)
    assert fit_scale(np.array([-3.0]), np.array([1.0])) == 0.0


def test_bound_report_requires_checkpoints(tmp_path):
    with pytest.raises(ReportError):
        bound_report(str(tmp_path))


def test_bound_report_smoke(tmp_path, mini_data):
    run_dir = str(tmp_path / "run")
    cfg = tiny_config(env_id="push-v0", dataset=mini_data, seed=0, n_offline=4,
                      n_online=0, checkpoint_interval=2, seq_len=4, model_batch=2,
                      agent_batch=8, horizon=2, eval_episodes=1)
    run_training(cfg, run_dir)
    report = bound_report(run_dir, n_eval=2, horizon=2)
    assert len(report.records) == 2  # checkpoints at steps 2 and 4
    for record in report.records:
        assert record["eps_hat"] >= 0.0
        assert set(record) >= {"epoch", "gap", "eps_hat", "alpha", "eps_scaled",
                               "bound_holds"}
    assert os.path.exists(os.path.join(run_dir, "report", "bound_report.json"))
    csv_path = os.path.join(run_dir, "report", "bound_columns.csv")
    with open(csv_path) as f:
        lines = f.read().strip().splitlines()
    assert lines[0] == "epoch,gap,eps_scaled"
    assert len(lines) == 3
