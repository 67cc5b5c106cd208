import pytest

from moto.config import Config, apply_env_overrides, from_dict, load, save
from moto.errors import ConfigError


def test_defaults_carry_stated_values():
    cfg = Config()
    assert cfg.gamma == 0.99
    assert cfg.lam == 0.95
    assert cfg.horizon == 10
    assert cfg.alpha == 10.0
    assert cfg.beta == 10.0
    assert cfg.ensemble_size == 7
    assert cfg.model_lr == 1e-4
    assert cfg.actor_lr == 8e-5
    assert cfg.critic_lr == 8e-5
    assert cfg.model_batch == 16
    assert cfg.agent_batch == 128
    assert cfg.n_offline == 10000
    assert cfg.updates_per_episode == 20
    assert cfg.action_repeat == 2


def test_unknown_key_rejected_by_name(tmp_path):
    path = tmp_path / "bad.yaml"
    path.write_text("gamma: 0.9\nbananas: 3\n")
    with pytest.raises(ConfigError, match="bananas"):
        load(str(path))


def test_round_trip_is_semantically_identical(tmp_path):
    cfg = Config(gamma=0.9, lam=0.8, horizon=4, env_id="desk-v0", no_bc=True)
    path = tmp_path / "cfg.yaml"
    save(cfg, str(path))
    assert load(str(path)) == cfg


def test_lambda_alias_accepted(tmp_path):
    path = tmp_path / "cfg.yaml"
    path.write_text("lambda: 0.5\nH: 3\n")
    cfg = load(str(path))
    assert cfg.lam == 0.5
    assert cfg.horizon == 3


def test_env_overrides():
    cfg = apply_env_overrides(Config(), environ={"MOTO_GAMMA": "0.5",
                                                 "MOTO_NO_BC": "true",
                                                 "MOTO_SEED": "7"})
    assert cfg.gamma == 0.5
    assert cfg.no_bc is True
    assert cfg.seed == 7


def test_env_override_unknown_key():
    with pytest.raises(ConfigError, match="MOTO_WAT"):
        apply_env_overrides(Config(), environ={"MOTO_WAT": "1"})


@pytest.mark.parametrize("bad", [
    {"gamma": 0.0}, {"gamma": 1.5}, {"lam": -0.1}, {"lam": 2}, {"horizon": 0},
    {"alpha": -1}, {"beta": -2}, {"ensemble_size": 1}, {"bc_filter": "magic"},
    {"model_lr": 0}, {"seq_len": 0},
])
def test_invalid_values_rejected(bad):
    with pytest.raises(ConfigError):
        from_dict({**Config().to_dict(), **bad})


def test_type_coercion_from_strings():
    cfg = from_dict({"gamma": "0.9", "horizon": "5", "no_uncertainty": "false"})
    assert cfg.gamma == 0.9
    assert cfg.horizon == 5
    assert cfg.no_uncertainty is False


def test_missing_file():
    with pytest.raises(ConfigError):
        load("/nonexistent/cfg.yaml")
