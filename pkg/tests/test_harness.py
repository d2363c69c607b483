import inspect
import json

import numpy as np
import pytest

from preflab import harness
from preflab.datasets import load_pairs, PairBatch
from preflab.diagnostics import MetricsLog
from preflab.envs import make_env
from preflab.harness import (
    RunConfig,
    SeedBook,
    coerce_value,
    derive_seed,
    flatten_config,
    load_config,
    load_policy,
    read_stages,
    run_dir,
    run_is_valid,
    run_lease,
)
from preflab.numcore import ContractError, NumericError
from preflab.reward import RewardEnsemble

TINY = dict(
    offline_size=3000, n_iter=3000, eval_every=1000, eval_episodes=5, final_evals=2, pretrain_steps=30,
    reward_update_steps=5, rollout_every=500, rollout_pairs=128, buffer_capacity=256, dynamics_epochs=2,
    N_T=3, n_elites=2, heldout_pairs=100, N_l=10, hidden=[16, 16],
)


def tiny(**kw) -> RunConfig:
    return load_config(**{**TINY, **kw})


class TestDeriveSeed:
    def test_deterministic(self):
        assert derive_seed(3, "reward", 1) == derive_seed(3, "reward", 1)

    def test_empty_label_differs(self):
        assert derive_seed(0, "", 0) != derive_seed(0, "a", 0)

    def test_no_collisions_over_index_probes(self):
        seeds = {derive_seed(42, "rollout", i) for i in range(100_000)}
        assert len(seeds) == 100_000

    def test_range(self):
        assert all(0 <= derive_seed(m, "x", 0) < 2**64 for m in range(50))

    def test_seedbook_records(self):
        book = SeedBook(5)
        s = book.seed("eval", 2)
        assert book.records == {"eval/2": s}


class TestConfig:
    def test_defaults_file_matches_dataclass(self):
        assert load_config() == RunConfig()

    def test_reference_values(self):
        cfg = RunConfig()
        assert (cfg.N_T, cfg.n_elites, cfg.N_R, cfg.N_l) == (7, 5, 3, 100)
        assert (cfg.reward_lr, cfg.dynamics_lr) == (3e-4, 1e-3)
        assert (cfg.kappa_p, cfg.kappa_tau) == (0.85, 0.05)

    def test_file_layering(self, tmp_path):
        path = tmp_path / "c.toml"
        path.write_text('[run]\nenv = "gridnav"\n[reward]\nkappa_p = 0.9\n')
        cfg = load_config(path, seed=7)
        assert (cfg.env, cfg.kappa_p, cfg.seed, cfg.N_l) == ("gridnav", 0.9, 7, 100)

    def test_unknown_key(self, tmp_path):
        with pytest.raises(ContractError, match="unknown config keys"):
            flatten_config({"reward": {"kapa_p": 0.9}})

    def test_bad_toml(self, tmp_path):
        path = tmp_path / "c.toml"
        path.write_text("env = \n")
        with pytest.raises(ContractError):
            load_config(path)

    @pytest.mark.parametrize("kw", [{"variant": "full"}, {"learner": "sac"}, {"kappa_p": 0.4}, {"N_l": 0}])
    def test_invalid_values(self, kw):
        with pytest.raises(ContractError):
            RunConfig(**kw)

    def test_coerce(self):
        assert coerce_value("N_l", "25") == 25
        assert coerce_value("kappa_tau", "0.1") == 0.1
        assert coerce_value("debug", "false") is False
        assert coerce_value("hidden", "32,32") == [32, 32]
        with pytest.raises(ContractError):
            coerce_value("nope", "1")

    def test_hash_changes_with_config(self):
        assert RunConfig().config_hash() != RunConfig(seed=1).config_hash()
        assert RunConfig().config_hash() == RunConfig().config_hash()

    def test_variant_switches(self):
        assert RunConfig(variant="lease").augment and RunConfig(variant="fresh").augment
        assert not RunConfig(variant="fewer").augment and not RunConfig(variant="fulldata").augment


class TestLayout:
    def test_run_dir(self, tmp_path):
        assert run_dir(RunConfig(env="gridnav", variant="fresh", seed=3), tmp_path) == tmp_path / "gridnav/fresh/3"

    def test_env_var_root(self, tmp_path, monkeypatch):
        monkeypatch.setenv("PREFLAB_OUT", str(tmp_path / "elsewhere"))
        assert run_dir(RunConfig()).parts[-4:] == ("elsewhere", "chainwalk", "lease", "0")


@pytest.fixture(scope="module")
def lease_run(tmp_path_factory):
    root = tmp_path_factory.mktemp("lease")
    return run_lease(tiny(), root=root)


class TestLeaseRun:
    def test_artifacts(self, lease_run):
        d = lease_run.directory
        for name in ("manifest.json", "stages.jsonl", "metrics.csv", "eval.csv", "scatter.csv", "result.json",
                     "transitions.jsonl", "prefpairs.jsonl", "policy.bin", "dynamics/dynamics.json",
                     "reward/reward.json"):
            assert (d / name).exists(), name
        assert run_is_valid(d)

    def test_manifest_contents(self, lease_run):
        m = json.loads((lease_run.directory / "manifest.json").read_text())
        assert m["config"]["seed"] == 0 and m["config_hash"] == tiny().config_hash()
        assert m["seeds"]["offline/0"] == derive_seed(0, "offline", 0)
        assert m["version"]

    def test_updates_recorded_in_stages(self, lease_run):
        policy = [s for s in read_stages(lease_run.directory) if s["stage"] == "policy"][0]
        # buffer fills after two rollouts of 128 pairs, then every rollout triggers an update
        assert policy["reward_update_steps"] == [1000, 1500, 2000, 2500, 3000]
        assert lease_run.reward_updates == 5

    def test_metrics_rows(self, lease_run):
        rows = MetricsLog.parse((lease_run.directory / "metrics.csv").read_text())
        updates = [r for r in rows if r["event"] == "reward_update"]
        assert len(updates) == 5 and all(r["holds"] for r in updates)
        assert all(r["n_total"] == 256 for r in updates)
        assert rows[-1]["event"] == "final"

    def test_checksums_match(self, lease_run):
        import hashlib

        data = [s for s in read_stages(lease_run.directory) if s["stage"] == "data"][0]
        blob = (lease_run.directory / "transitions.jsonl").read_bytes()
        assert data["transitions_sha256"] == hashlib.sha256(blob).hexdigest()

    def test_saved_policy_reloads(self, lease_run):
        env, policy = load_policy(lease_run.directory)
        s = env.reset()
        assert policy.act(s) in range(env.spec.n_actions)


class TestVariants:
    def test_fewer_reward_equals_plain_pretraining(self, tmp_path):
        cfg = tiny(variant="fewer", seed=4)
        result = run_lease(cfg, root=tmp_path)
        labeled = PairBatch.from_pairs(load_pairs(result.directory / "prefpairs.jsonl"))
        env = make_env("chainwalk")
        plain = RewardEnsemble.for_env(env, np.random.default_rng(derive_seed(4, "reward-init")),
                                       n_members=cfg.N_R, hidden=tuple(cfg.hidden), lr=cfg.reward_lr)
        plain.pretrain(labeled, cfg.pretrain_steps, cfg.labeled_batch)
        saved = RewardEnsemble.load(result.directory / "reward")
        for a, b in zip(plain.members, saved.members):
            assert a.get_flat().tobytes() == b.get_flat().tobytes()
        assert result.reward_updates == 0
        assert not (result.directory / "dynamics").exists()

    def test_fresh_keeps_every_pair(self, tmp_path):
        result = run_lease(tiny(variant="fresh"), root=tmp_path)
        rows = MetricsLog.parse((result.directory / "metrics.csv").read_text())
        updates = [r for r in rows if r["event"] == "reward_update"]
        assert updates and all(r["n_selected"] == r["n_total"] for r in updates)

    def test_fulldata_capped_by_windows(self, tmp_path):
        result = run_lease(tiny(variant="fulldata", fulldata_N_l=10**6, n_iter=1000), root=tmp_path)
        data = [s for s in read_stages(result.directory) if s["stage"] == "data"][0]
        assert 10 < data["N_l"] < 10**6

    def test_iql_learner_runs(self, tmp_path):
        assert run_lease(tiny(learner="iql", variant="fewer", n_iter=1000), root=tmp_path).reward_updates == 0


class TestDeterminism:
    def test_identical_metrics(self, tmp_path, lease_run):
        again = run_lease(tiny(), root=tmp_path)
        assert (again.directory / "metrics.csv").read_bytes() == (lease_run.directory / "metrics.csv").read_bytes()

    def test_seed_changes_metrics(self, tmp_path, lease_run):
        other = run_lease(tiny(seed=1, n_iter=1000), root=tmp_path)
        assert (other.directory / "metrics.csv").read_bytes() != (lease_run.directory / "metrics.csv").read_bytes()


class TestAborts:
    def test_stage_abort_marks_run_invalid(self, tmp_path, monkeypatch):
        def boom(*args, **kw):
            raise NumericError("reward member 1 step 3: NaN")

        monkeypatch.setattr(harness, "_pretrain_reward", boom)
        with pytest.raises(NumericError, match="stage pretrain-reward"):
            run_lease(tiny(variant="fewer"), root=tmp_path)
        d = run_dir(tiny(variant="fewer"), tmp_path)
        stages = read_stages(d)
        assert stages[-2]["status"] == "aborted" and stages[-1] == {"stage": "run", "status": "invalid"}
        assert not run_is_valid(d)
        # the manifest was written before training started
        assert json.loads((d / "manifest.json").read_text())["config"]["variant"] == "fewer"

    def test_horizon_shorter_than_segment(self, tmp_path):
        with pytest.raises(ContractError, match="stage policy at step 500"):
            run_lease(tiny(L=5, H=3), root=tmp_path)


class TestRewardIsolation:
    def test_policy_data_path_never_reads_true_reward(self):
        assert "r_true" not in inspect.getsource(harness._PolicyData)
        import preflab.policy

        assert "r_true" not in inspect.getsource(preflab.policy)

    def test_true_reward_only_used_for_reporting(self):
        lines = [ln for ln in inspect.getsource(harness).splitlines() if "r_true" in ln]
        assert len(lines) == 1 and "reward_truth_report" in lines[0]
