import json
import os

import pytest
import yaml

from moto.cli import main

TINY_FLAGS = [
    "--deter-dim", "8", "--stoch-slots", "4", "--stoch-classes", "4",
    "--cnn-depth", "4", "--embed-dim", "16", "--mlp-units", "16",
    "--ensemble-size", "3", "--model-batch", "2", "--seq-len", "8",
    "--agent-batch", "8", "--horizon", "2", "--eval-episodes", "1",
    "--eval-every-episodes", "100",
]


@pytest.fixture(scope="module")
def cli_dataset(tmp_path_factory):
    path = str(tmp_path_factory.mktemp("cli") / "push.moto")
    code = main(["gen-data", "--env", "push-v0", "--episodes", "3",
                 "--out", path, "--seed", "0"])
    assert code == 0
    return path


def test_gen_data_writes_dataset_and_manifest(cli_dataset):
    assert os.path.exists(cli_dataset)
    assert os.path.exists(cli_dataset + ".manifest.txt")


def test_gen_data_desk_variant(tmp_path):
    out = str(tmp_path / "desk.moto")
    code = main(["gen-data", "--env", "desk-v0", "--episodes", "4", "--out", out,
                 "--variant", "partial", "--seed", "1"])
    assert code == 0
    assert os.path.exists(out)


def test_train_and_plot_round_trip(tmp_path, cli_dataset):
    run_dir = str(tmp_path / "run")
    code = main(["train", "--run-dir", run_dir, "--dataset", cli_dataset,
                 "--env-id", "push-v0", "--n-offline", "3", "--n-online", "2",
                 "--updates-per-episode", "1", "--checkpoint-interval", "5",
                 "--seed", "0", *TINY_FLAGS])
    assert code == 0
    assert os.path.exists(os.path.join(run_dir, "metrics.jsonl"))
    cfg = yaml.safe_load(open(os.path.join(run_dir, "config.yaml")))
    assert cfg["n_offline"] == 3

    out = str(tmp_path / "figs")
    code = main(["plot", "--runs", run_dir, "--out", out])
    assert code == 0
    assert os.path.exists(os.path.join(out, "success_rate.png"))
    assert os.path.exists(os.path.join(out, "losses.png"))


def test_train_resume(tmp_path, cli_dataset):
    run_dir = str(tmp_path / "run")
    main(["train", "--run-dir", run_dir, "--dataset", cli_dataset,
          "--env-id", "push-v0", "--n-offline", "2", "--n-online", "0",
          "--checkpoint-interval", "2", "--seed", "0", *TINY_FLAGS])
    code = main(["train", "--run-dir", run_dir, "--resume"])
    assert code == 0


def test_invalid_config_key_exits_2(tmp_path, capsys):
    cfg_path = tmp_path / "bad.yaml"
    cfg_path.write_text("gamma: 0.9\nwibble: 1\n")
    code = main(["train", "--config", str(cfg_path), "--run-dir",
                 str(tmp_path / "r")])
    assert code == 2
    assert "wibble" in capsys.readouterr().err


def test_missing_dataset_exits_3(tmp_path):
    code = main(["train", "--run-dir", str(tmp_path / "r"), "--dataset",
                 "/does/not/exist.moto", "--env-id", "push-v0", *TINY_FLAGS])
    assert code == 3


def test_plot_empty_runs_exits_6(tmp_path):
    code = main(["plot", "--runs", str(tmp_path / "nope"), "--out",
                 str(tmp_path / "o")])
    assert code == 6


def test_ablate_produces_four_runs(tmp_path, cli_dataset):
    out_dir = str(tmp_path / "ablate")
    code = main(["ablate", "--out-dir", out_dir, "--dataset", cli_dataset,
                 "--env-id", "push-v0", "--n-offline", "2", "--n-online", "2",
                 "--updates-per-episode", "1", "--checkpoint-interval", "10",
                 "--seed", "0", *TINY_FLAGS])
    assert code == 0
    names = sorted(os.listdir(out_dir))
    assert names == ["full", "no_bc", "no_bc_no_unc", "no_unc"]
    both_off = yaml.safe_load(open(os.path.join(out_dir, "no_bc_no_unc",
                                                "config.yaml")))
    assert both_off["alpha"] == 0.0
    assert both_off["beta"] == 0.0
    assert both_off["no_uncertainty"] is True
    assert both_off["no_bc"] is True
    full = yaml.safe_load(open(os.path.join(out_dir, "full", "config.yaml")))
    assert full["alpha"] == 10.0
    assert full["seed"] == both_off["seed"]


def test_bound_report_cli(tmp_path, cli_dataset):
    run_dir = str(tmp_path / "run")
    main(["train", "--run-dir", run_dir, "--dataset", cli_dataset,
          "--env-id", "push-v0", "--n-offline", "4", "--n-online", "0",
          "--checkpoint-interval", "2", "--seed", "0", *TINY_FLAGS])
    code = main(["bound-report", "--run-dir", run_dir, "--n-eval", "1",
                 "--bound-horizon", "2"])
    assert code == 0
    report = json.load(open(os.path.join(run_dir, "report", "bound_report.json")))
    assert len(report["records"]) == 2
    code = main(["plot", "--runs", run_dir, "--out", str(tmp_path / "figs")])
    assert code == 0
    assert os.path.exists(os.path.join(tmp_path, "figs", "bound.png"))
