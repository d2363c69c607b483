"""Run configuration and the end-to-end training loop.

One run fits the dynamics ensemble, pretrains the reward ensemble on the
labeled pairs, then trains an offline policy against the learned reward.
During policy training, model rollouts periodically refill a FIFO buffer of
unlabeled pairs.  Whenever the buffer is full, its pairs are pseudo-labeled
and screened, and the reward ensemble takes a combined update.  The
ablation variants are switches on this single loop:

* ``lease``: rollouts with screened pseudo-labels
* ``fewer``: no rollouts and no reward updates after pretraining
* ``fresh``: rollouts and pseudo-labels, screening forced to keep every pair
* ``fulldata``: like ``fewer`` but with ``fulldata_N_l`` labeled pairs
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
import subprocess
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .datasets import (
    OfflineDataset,
    PairBatch,
    build_labeled_set,
    collect_offline,
    label_arrays,
    sample_segment_batch,
    save_pairs,
    save_transitions,
    segment_overlap_count,
    valid_window_starts,
)
from .diagnostics import MetricsLog, concentrability, loss_gap_check, pseudo_label_error_rate, reward_truth_report
from .dynamics import DynamicsConfig, DynamicsEnsemble, rollout_pairs
from .envs import Env, TabularEnv, anchors, evaluate_policy, make_env, normalized_score
from .numcore import ContractError, DenseNet, NumericError
from .policy import Batch, GaussianExploration, NetCQL, NetIQL, TabularCQL, TabularIQL
from .reward import RewardEnsemble, ScreenedBatch, SelectionConfig, screen

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

VARIANTS = ("lease", "fewer", "fresh", "fulldata")
LEARNERS = ("cql", "iql")
OUT_ENV = "PREFLAB_OUT"


@dataclass
class RunConfig:
    env: str = "chainwalk"
    variant: str = "lease"
    seed: int = 0
    learner: str = "cql"
    # data
    behavior: str = "medium"
    offline_size: int = 20_000
    N_l: int = 100
    fulldata_N_l: int = 2_000
    label_mode: str = "ground_truth"
    label_beta: float = 1.0
    L: int = 0  # 0 selects the env's default segment length
    H: int = 0  # 0 selects H = L
    heldout_pairs: int = 1_000
    # dynamics
    N_T: int = 7
    n_elites: int = 5
    dynamics_epochs: int = 20
    dynamics_lr: float = 1e-3
    # reward
    N_R: int = 3
    reward_lr: float = 3e-4
    pretrain_steps: int = 1_000
    reward_update_steps: int = 50
    labeled_batch: int = 64
    unlabeled_batch: int = 256
    kappa_p: float = 0.85
    kappa_tau: float = 0.05
    # unlabeled buffer
    buffer_capacity: int = 4_096
    rollout_every: int = 1_000
    rollout_pairs: int = 512
    rollout_epsilon: float = 0.1
    rollout_std: float = 0.1
    # policy
    n_iter: int = 50_000
    policy_batch: int = 256
    cql_alpha: float = 5.0
    cql_temperature: float = 1.0
    iql_expectile: float = 0.7
    iql_temperature: float = 3.0
    tabular_lr: float = 0.1
    hidden: list = field(default_factory=lambda: [64, 64])
    # evaluation
    eval_every: int = 2_500
    eval_episodes: int = 100
    final_evals: int = 5
    conc_samples: int = 0
    debug: bool = True

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ContractError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.learner not in LEARNERS:
            raise ContractError(f"learner must be one of {LEARNERS}, got {self.learner!r}")
        if self.N_l < 1:
            raise ContractError("N_l must be >= 1")
        if self.n_iter < 0 or self.eval_every < 1 or self.rollout_every < 1:
            raise ContractError("n_iter must be >= 0 and cadences >= 1")
        self.hidden = list(self.hidden)
        SelectionConfig(self.kappa_p, self.kappa_tau)

    @property
    def augment(self) -> bool:
        return self.variant in ("lease", "fresh")

    def segment_length(self, env: Env) -> int:
        return self.L or env.spec.segment_length

    def rollout_horizon(self, env: Env) -> int:
        return self.H or self.segment_length(env)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def config_hash(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]

    def replace(self, **kw) -> "RunConfig":
        return dataclasses.replace(self, **kw)


def _field_types() -> dict:
    return {f.name: f for f in dataclasses.fields(RunConfig)}


def coerce_value(key: str, text: str):
    """Parse a command-line override string into the field's type."""
    fields = _field_types()
    if key not in fields:
        raise ContractError(f"unknown config key {key!r}")
    default = getattr(RunConfig(), key)
    if isinstance(default, bool):
        if text.lower() not in ("true", "false", "1", "0"):
            raise ContractError(f"{key} expects true/false, got {text!r}")
        return text.lower() in ("true", "1")
    if isinstance(default, int):
        return int(text)
    if isinstance(default, float):
        return float(text)
    if isinstance(default, list):
        return [int(v) for v in text.split(",") if v]
    return text


def flatten_config(raw: dict) -> dict:
    """Flatten ``[section]`` tables; keys must be RunConfig fields."""
    flat = {}
    for key, value in raw.items():
        if isinstance(value, dict):
            for k, v in value.items():
                flat[k] = v
        else:
            flat[key] = value
    unknown = set(flat) - set(_field_types())
    if unknown:
        raise ContractError(f"unknown config keys: {sorted(unknown)}")
    return flat


def default_config_text() -> str:
    from importlib import resources

    return resources.files("preflab").joinpath("data", "defaults.toml").read_text()


def load_config(path: str | Path | None = None, **overrides) -> RunConfig:
    """Defaults file, then the given TOML file, then keyword overrides."""
    values = flatten_config(tomllib.loads(default_config_text()))
    if path is not None:
        try:
            values.update(flatten_config(tomllib.loads(Path(path).read_text())))
        except tomllib.TOMLDecodeError as exc:
            raise ContractError(f"cannot parse {path}: {exc}") from None
    values.update({k: v for k, v in overrides.items() if v is not None})
    return RunConfig(**values)


# -- seeding -------------------------------------------------------------------


def derive_seed(master: int, label: str, index: int = 0) -> int:
    """u64 child seed from sha256(master | label | index)."""
    digest = hashlib.sha256(f"{int(master)}|{label}|{int(index)}".encode()).digest()
    return int.from_bytes(digest[:8], "little")


class SeedBook:
    """Derives child seeds and remembers every derivation for the manifest."""

    def __init__(self, master: int):
        self.master = master
        self.records: dict[str, int] = {}

    def seed(self, label: str, index: int = 0) -> int:
        s = derive_seed(self.master, label, index)
        self.records[f"{label}/{index}"] = s
        return s

    def rng(self, label: str, index: int = 0) -> np.random.Generator:
        return np.random.default_rng(self.seed(label, index))


# -- directories and manifests -------------------------------------------------


def output_root(explicit: str | Path | None = None) -> Path:
    return Path(explicit or os.environ.get(OUT_ENV) or "out")


def run_dir(config: RunConfig, root: str | Path | None = None) -> Path:
    return output_root(root) / config.env / config.variant / str(config.seed)


def version_string() -> str:
    try:
        out = subprocess.run(["git", "describe", "--always", "--dirty"], capture_output=True, text=True,
                             cwd=Path(__file__).parent, timeout=5)
        described = out.stdout.strip()
    except (OSError, subprocess.SubprocessError):
        described = ""
    return f"{__version__}+{described}" if described else __version__


def file_digest(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


class StageLog:
    """Append-only stage records (status, wall clock, artifact checksums)."""

    def __init__(self, path: Path):
        self.path = path
        self.path.write_text("")

    def record(self, stage: str, status: str, seconds: float | None = None, **extra) -> None:
        entry = {"stage": stage, "status": status}
        if seconds is not None:
            entry["seconds"] = round(seconds, 3)
        entry.update(extra)
        with self.path.open("a") as fh:
            fh.write(json.dumps(entry, sort_keys=True) + "\n")


def read_stages(directory: Path) -> list[dict]:
    path = Path(directory) / "stages.jsonl"
    if not path.exists():
        return []
    return [json.loads(line) for line in path.read_text().splitlines() if line]


def run_is_valid(directory: Path) -> bool:
    stages = read_stages(directory)
    return bool(stages) and stages[-1] == {**stages[-1], "stage": "run", "status": "complete"}


class StageAbort(Exception):
    def __init__(self, stage: str, step: int | None, cause: BaseException):
        where = f" at step {step}" if step is not None else ""
        super().__init__(f"stage {stage}{where} aborted: {cause}")
        self.stage, self.step, self.cause = stage, step, cause


# -- policy learners -----------------------------------------------------------


class _TabularAgent:
    def __init__(self, env: TabularEnv, config: RunConfig):
        self.env = env
        S, A = env.n_states, env.spec.n_actions
        if config.learner == "cql":
            self.learner = TabularCQL(S, A, env.spec.gamma, config.cql_alpha, config.cql_temperature,
                                      config.tabular_lr, debug=config.debug)
        else:
            self.learner = TabularIQL(S, A, env.spec.gamma, config.iql_expectile, config.iql_temperature,
                                      config.tabular_lr)

    def table(self) -> np.ndarray:
        return self.learner.Q if isinstance(self.learner, TabularCQL) else self.learner.logits

    def greedy(self):
        return self.learner.policy(self.env.state_index)

    def explore_fn(self, epsilon: float):
        table, n_actions, index = self.table(), self.env.spec.n_actions, self.env.state_index

        def act(states, rng):
            a = np.argmax(table[index(states)], axis=1)
            flip = rng.random(len(a)) < epsilon
            return np.where(flip, rng.integers(n_actions, size=len(a)), a)

        return act

    def save(self, path: Path) -> None:
        # a Q (or logit) table is a linear layer over one-hot states
        net = DenseNet([self.env.n_states, self.env.spec.n_actions], zero=True)
        net.weights[0][...] = self.table()
        net.save(path, kind=f"tabular-{type(self.learner).__name__}")


class _NetAgent:
    def __init__(self, env: Env, config: RunConfig, rng: np.random.Generator):
        d, da = env.spec.state_dim, env.spec.n_actions
        hidden = tuple(config.hidden)
        if config.learner == "cql":
            self.learner = NetCQL(d, da, rng, env.spec.gamma, config.cql_alpha, config.cql_temperature,
                                  hidden=hidden, debug=config.debug)
        else:
            self.learner = NetIQL(d, da, rng, env.spec.gamma, config.iql_expectile, config.iql_temperature,
                                  hidden=hidden)

    def greedy(self):
        return self.learner.policy()

    def explore_fn(self, std: float):
        actor = self.learner.policy()

        def act(states, rng):
            return GaussianExploration(actor, std).act(states, rng)

        return act

    def save(self, path: Path) -> None:
        self.learner.policy().net.save(path, kind="actor")


def make_agent(env: Env, config: RunConfig, rng: np.random.Generator):
    return _TabularAgent(env, config) if isinstance(env, TabularEnv) else _NetAgent(env, config, rng)


def load_policy(directory: str | Path):
    """Greedy policy from a run directory's checkpoint."""
    directory = Path(directory)
    manifest = json.loads((directory / "manifest.json").read_text())
    env = make_env(manifest["config"]["env"])
    net, head = DenseNet.load(directory / "policy.bin")
    if head.get("kind", "").startswith("tabular"):
        from .policy import GreedyTablePolicy

        return env, GreedyTablePolicy(net.weights[0].copy(), env.state_index)
    from .policy import ActorNet

    actor = ActorNet(env.spec.state_dim, env.spec.n_actions, tuple(net.layer_sizes[1:-1]))
    actor.net = net
    return env, actor


class _PolicyData:
    """Reward-free offline transitions plus the current model rewards."""

    def __init__(self, env: Env, dataset: OfflineDataset):
        view = dataset.learner_view()
        self.view = view
        self.tabular = isinstance(env, TabularEnv)
        if self.tabular:
            self.s = env.state_index(view.s)
            self.s_next = env.state_index(view.s_next)
        else:
            self.s, self.s_next = view.s, view.s_next
        self.a = view.a
        self.terminal = view.terminal
        self.r_hat = np.zeros(len(view))

    def relabel(self, reward: RewardEnsemble) -> None:
        self.r_hat = reward.predict_reward(self.view.s, self.view.a)

    def batch(self, rng: np.random.Generator, size: int) -> Batch:
        i = rng.integers(len(self.a), size=size)
        return Batch(self.s[i], self.a[i], self.r_hat[i], self.s_next[i], self.terminal[i])


# -- the run -------------------------------------------------------------------


@dataclass
class RunResult:
    directory: Path
    score: float
    scores: list
    pearson: float | None
    pretrain_accuracy: float
    reward_updates: int
    all_gaps_hold: bool
    selected_accuracy: list
    all_accuracy: list
    concentrability: float | None
    metrics_csv: str

    def summary(self) -> dict:
        return {
            "score": self.score, "scores": self.scores, "pearson": self.pearson,
            "pretrain_accuracy": self.pretrain_accuracy, "reward_updates": self.reward_updates,
            "all_gaps_hold": self.all_gaps_hold, "selected_accuracy": self.selected_accuracy,
            "all_accuracy": self.all_accuracy, "concentrability": self.concentrability,
        }


def heldout_accuracy(reward: RewardEnsemble, heldout: PairBatch) -> float:
    """Agreement with the ground-truth preference on held-out pairs with unequal returns."""
    from .reward import pseudo_label

    informative = heldout.ret0 != heldout.ret1
    if not informative.any():
        return float("nan")
    sub = heldout.subset(np.flatnonzero(informative))
    return float(np.mean(pseudo_label(reward, sub) == (sub.ret1 > sub.ret0)))


def prepare_data(config: RunConfig, seeds: SeedBook, env: Env):
    """Offline dataset and labeled pairs, plus held-out evaluation data."""
    L = config.segment_length(env)
    data = collect_offline(make_env(config.env), config.behavior, config.offline_size, seeds.seed("offline"))
    n_l = config.fulldata_N_l if config.variant == "fulldata" else config.N_l
    n_windows = len(valid_window_starts(data, L))
    if n_windows == 0:
        raise ContractError(f"no done-free window of length L={L}; longest episode run is {data.max_run_length()}")
    if config.variant == "fulldata":
        n_l = min(n_l, n_windows // 2)
    labeled = build_labeled_set(data, L, n_l, seeds.seed("labels"), config.label_mode, config.label_beta)
    held_data = collect_offline(make_env(config.env), config.behavior, config.offline_size, seeds.seed("heldout"))
    held_pairs = sample_segment_batch(held_data, L, config.heldout_pairs, seeds.rng("heldout-pairs"))
    return data, labeled, held_data, held_pairs, n_l


def _pretrain_reward(config: RunConfig, seeds: SeedBook, env: Env, labeled: PairBatch) -> RewardEnsemble:
    reward = RewardEnsemble.for_env(env, seeds.rng("reward-init"), n_members=config.N_R,
                                    hidden=tuple(config.hidden), lr=config.reward_lr)
    reward.pretrain(labeled, config.pretrain_steps, config.labeled_batch)
    return reward


def run_lease(config: RunConfig, root: str | Path | None = None, directory: str | Path | None = None) -> RunResult:
    """Execute one full run and persist its artifacts under the run directory."""
    env = make_env(config.env)
    out = Path(directory) if directory is not None else run_dir(config, root)
    out.mkdir(parents=True, exist_ok=True)
    seeds = SeedBook(config.seed)
    stages = StageLog(out / "stages.jsonl")
    # every child seed is derived up front so the manifest can list them before training
    for label in ("offline", "labels", "heldout", "heldout-pairs", "dynamics", "reward-init", "policy",
                  "rollout", "pseudo-truth", "eval", "concentrability"):
        seeds.seed(label)
    manifest = {
        "config": config.to_dict(),
        "config_hash": config.config_hash(),
        "version": version_string(),
        "seeds": dict(seeds.records),
        "stages_file": "stages.jsonl",
        "buffer_retained_after_update": True,
        "layout": "out/<env>/<variant>/<seed>",
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    metrics = MetricsLog(f"{config.env}/{config.variant}/{config.seed}", config.seed, config.config_hash(),
                         out / "metrics.csv")
    state = {"stage": "data", "step": None}
    try:
        result = _run(config, env, out, seeds, stages, metrics, state)
    except (ContractError, NumericError) as exc:
        stages.record(state["stage"], "aborted", step=state["step"], error=str(exc))
        stages.record("run", "invalid")
        raise type(exc)(str(StageAbort(state["stage"], state["step"], exc))) from exc
    stages.record("run", "complete")
    return result


def _timed(stages: StageLog, name: str, fn, **extra):
    t0 = time.perf_counter()
    value = fn()
    stages.record(name, "ok", time.perf_counter() - t0, **extra)
    return value


def _run(config, env, out, seeds, stages, metrics, state) -> RunResult:
    L, H = config.segment_length(env), config.rollout_horizon(env)
    J_r, J_e = anchors(config.env)

    t0 = time.perf_counter()
    data, labeled, held_data, held_pairs, n_l = prepare_data(config, seeds, env)
    save_transitions(data, out / "transitions.jsonl")
    save_pairs(labeled, out / "prefpairs.jsonl")
    stages.record("data", "ok", time.perf_counter() - t0, transitions_sha256=file_digest(out / "transitions.jsonl"),
                  prefpairs_sha256=file_digest(out / "prefpairs.jsonl"),
                  dataset=data.manifest_entry(L), N_l=n_l, pair_overlaps=segment_overlap_count(labeled))

    dynamics = None
    if config.augment:
        state["stage"] = "dynamics"
        dyn_cfg = DynamicsConfig(n_members=config.N_T, n_elites=config.n_elites, hidden=tuple(config.hidden),
                                 lr=config.dynamics_lr, epochs=config.dynamics_epochs)
        dynamics = DynamicsEnsemble.for_env(env, seeds.rng("dynamics"), dyn_cfg)
        report = _timed(stages, "dynamics", lambda: dynamics.fit_dataset(data))
        dynamics.save(out / "dynamics")
        (out / "dynamics" / "fit_report.json").write_text(json.dumps(report.to_dict(), sort_keys=True) + "\n")

    state["stage"] = "pretrain-reward"
    reward = _timed(stages, "pretrain-reward", lambda: _pretrain_reward(config, seeds, env, labeled))
    reward.save(out / "reward_pretrain")
    pre_acc = heldout_accuracy(reward, held_pairs)
    metrics.append(0, "pretrain", pretrain_accuracy=pre_acc, L_l=reward.loss_and_grads(labeled)[0])

    state["stage"] = "policy"
    policy_rng = seeds.rng("policy")
    rollout_rng = seeds.rng("rollout")
    truth_rng = seeds.rng("pseudo-truth")
    agent = make_agent(env, config, policy_rng)
    pdata = _PolicyData(env, data)
    pdata.relabel(reward)
    selection = SelectionConfig(config.kappa_p, config.kappa_tau, passthrough=config.variant == "fresh")
    buffer: PairBatch | None = None
    buffer_truth: np.ndarray | None = None
    scores, sel_acc, all_acc, update_steps = [], [], [], []
    all_hold = True
    eval_index = 0
    t_policy = time.perf_counter()
    for step in range(1, config.n_iter + 1):
        state["step"] = step
        agent.learner.update(pdata.batch(policy_rng, config.policy_batch))
        if config.augment and step % config.rollout_every == 0:
            explore = agent.explore_fn(config.rollout_epsilon if env.spec.discrete else config.rollout_std)
            fresh = rollout_pairs(dynamics, env, explore, data.learner_view().s, H, L, config.rollout_pairs,
                                  rollout_rng)
            truth = label_arrays(fresh.ret0, fresh.ret1, "ground_truth", truth_rng)
            buffer = fresh if buffer is None else PairBatch.concat([buffer, fresh])
            buffer_truth = truth if buffer_truth is None else np.concatenate([buffer_truth, truth])
            if len(buffer) > config.buffer_capacity:
                drop = len(buffer) - config.buffer_capacity
                buffer = buffer.subset(np.arange(drop, len(buffer)))
                buffer_truth = buffer_truth[drop:]
            if len(buffer) >= config.buffer_capacity:
                chk, screened, losses = _reward_update(config, reward, labeled, buffer, buffer_truth, selection)
                pdata.relabel(reward)
                all_hold &= chk.holds
                update_steps.append(step)
                sel = screened.index
                sel_a = pseudo_label_error_rate(screened.y_hat[sel], buffer_truth[sel]) if len(sel) else None
                all_a = pseudo_label_error_rate(screened.y_hat, buffer_truth)
                if sel_a is not None:
                    sel_acc.append(1.0 - sel_a)
                all_acc.append(1.0 - all_a)
                metrics.append(step, "reward_update", **chk_fields(chk), **screened_fields(screened),
                               selected_accuracy=None if sel_a is None else 1.0 - sel_a,
                               all_accuracy=1.0 - all_a, L_l=losses["L_l"], L_u=losses["L_u"])
        if step % config.eval_every == 0:
            J = evaluate_policy(make_env(config.env), agent.greedy(), config.eval_episodes,
                                seeds.seed("eval", eval_index)).mean
            eval_index += 1
            score = normalized_score(J, J_r, J_e)
            scores.append(score)
            metrics.append(step, "eval", J=J, J_norm=score)
    stages.record("policy", "ok", time.perf_counter() - t_policy, reward_update_steps=update_steps)

    state["stage"], state["step"] = "report", None
    reward.save(out / "reward")
    agent.save(out / "policy.bin")
    pred = reward.predict_reward(held_data.s, held_data.a)
    truth_report = reward_truth_report(pred, held_data.r_true)
    (out / "scatter.csv").write_text(truth_report.scatter_csv())
    conc_value = None
    if config.conc_samples:
        from .datasets import behavior_policy

        mu = behavior_policy(env, config.behavior)
        conc = concentrability(make_env(config.env), mu, agent.greedy(), reward.predict_reward,
                               config.conc_samples, seeds.seed("concentrability"))
        conc_value = conc.value
    final = float(np.mean(scores[-config.final_evals:])) if scores else float("nan")
    metrics.append(config.n_iter, "final", J_norm=final, pearson_r=truth_report.pearson,
                   pretrain_accuracy=pre_acc, concentrability=conc_value)
    with (out / "eval.csv").open("w") as fh:
        fh.write("step,J,normalized_score,seed\n")
        for row in metrics.rows:
            if row["event"] == "eval":
                fh.write(f"{row['step']},{row['J']!r},{row['J_norm']!r},{config.seed}\n")
    result = RunResult(out, final, scores, truth_report.pearson, pre_acc, len(update_steps), all_hold,
                       sel_acc, all_acc, conc_value, metrics.to_csv())
    (out / "result.json").write_text(json.dumps({"env": config.env, "variant": config.variant,
                                                 "seed": config.seed, **result.summary()},
                                                sort_keys=True, indent=2) + "\n")
    stages.record("report", "ok", metrics_sha256=file_digest(out / "metrics.csv"))
    return result


def _reward_update(config, reward, labeled, buffer, buffer_truth, selection):
    """Screen the buffer, check the loss-gap bound on the kept pairs, then update the reward."""
    screened = screen(reward, buffer, selection)
    keep = screened.index
    probs = reward.member_probs(buffer.subset(keep)) if len(keep) else np.zeros((reward.n_members, 0))
    chk = loss_gap_check(probs, screened.y_hat[keep], buffer_truth[keep])
    losses = reward.semi_supervised_update(labeled, screened, config.reward_update_steps,
                                           config.labeled_batch, config.unlabeled_batch)
    return chk, screened, losses


def chk_fields(chk) -> dict:
    return {"eta": chk.eta, "omega": chk.omega, "eta_omega": chk.eta * chk.omega, "gap": chk.gap,
            "holds": chk.holds}


def screened_fields(sb: ScreenedBatch) -> dict:
    return {"n_selected": sb.n_selected, "n_total": sb.n_total,
            "selected_fraction": sb.n_selected / sb.n_total if sb.n_total else 0.0}
