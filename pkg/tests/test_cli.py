import json

import pytest

from preflab import cli
from preflab.numcore import NumericError

FAST = ["--set", "offline_size=3000", "--set", "n_iter=1000", "--set", "eval_every=500", "--set", "eval_episodes=5",
        "--set", "pretrain_steps=20", "--set", "heldout_pairs=50", "--set", "N_l=10"]


class TestErrors:
    def test_unknown_flag(self, capsys):
        assert cli.main(["train", "--bogus"]) == 1
        assert "usage" in capsys.readouterr().err

    def test_no_subcommand(self, capsys):
        assert cli.main([]) == 1

    def test_report_without_runs(self, tmp_path, capsys):
        assert cli.main(["report", "--runs", str(tmp_path / "*")]) == 1
        assert "no runs found" in capsys.readouterr().err

    def test_unknown_config_key(self, capsys):
        assert cli.main(["train", "--set", "bogus=1"]) == 1

    def test_numeric_abort_exit_code(self, monkeypatch, tmp_path):
        def boom(*a, **kw):
            raise NumericError("nan")

        monkeypatch.setattr(cli, "run_lease", boom)
        assert cli.main(["train", "--out", str(tmp_path)]) == 2


class TestStages:
    def test_collect_fit_pretrain(self, tmp_path, capsys):
        data = tmp_path / "d.jsonl"
        assert cli.main(["collect", "--env", "chainwalk", "--size", "2000", "--out", str(data)]) == 0
        assert data.exists() and (tmp_path / "d.jsonl.sha256").exists()
        assert cli.main(["fit-dynamics", "--data", str(data), "--out", str(tmp_path / "dyn"), "--epochs", "1",
                         "--members", "3", "--elites", "2"]) == 0
        assert (tmp_path / "dyn" / "dynamics.json").exists()

    def test_train_config_and_seed(self, tmp_path, capsys):
        conf = tmp_path / "lease_chainwalk.toml"
        conf.write_text('[run]\nenv = "chainwalk"\nvariant = "fewer"\n')
        assert cli.main(["train", "--config", str(conf), "--seed", "7", "--out", str(tmp_path), *FAST]) == 0
        run = tmp_path / "chainwalk" / "fewer" / "7"
        assert json.loads((run / "manifest.json").read_text())["config"]["seed"] == 7
        assert cli.main(["pretrain-reward", "--env", "chainwalk", "--pairs", str(run / "prefpairs.jsonl"),
                         "--out", str(tmp_path / "rew"), "--steps", "5"]) == 0
        assert cli.main(["evaluate", "--run", str(run), "--episodes", "3"]) == 0
        capsys.readouterr()
        assert cli.main(["report", "--runs", str(tmp_path / "chainwalk"), "--csv", str(tmp_path / "t.csv")]) == 0
        assert "fewer" in capsys.readouterr().out
        assert (tmp_path / "t.csv").read_text().startswith("env,variant,mean,std,n")

    def test_sweep_one_dir_per_value(self, tmp_path):
        argv = ["sweep", "--param", "N_l", "--values", "10,25,50,100", "--variant", "fewer", "--out", str(tmp_path),
                *FAST, "--set", "n_iter=0"]
        assert cli.main(argv) == 0
        dirs = sorted(p.name for p in tmp_path.iterdir())
        assert dirs == ["sweep-N_l-10", "sweep-N_l-100", "sweep-N_l-25", "sweep-N_l-50"]
        cfg = json.loads((tmp_path / "sweep-N_l-25/chainwalk/fewer/0/manifest.json").read_text())["config"]
        assert cfg["N_l"] == 25

    def test_report_skips_invalid_runs(self, tmp_path, capsys):
        bad = tmp_path / "chainwalk" / "lease" / "0"
        bad.mkdir(parents=True)
        (bad / "result.json").write_text("{}")
        (bad / "stages.jsonl").write_text('{"stage": "run", "status": "invalid"}\n')
        assert cli.main(["report", "--runs", str(tmp_path)]) == 1
