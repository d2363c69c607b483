"""Measured quantities: pseudo-label error, the pseudo-label loss-gap bound,
reward-error concentrability, reward/truth correlation, ablation tables and
the append-only metrics log."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable

import numpy as np
from scipy import stats

from .envs import Env
from .numcore import ContractError
from .reward import pair_losses

CONC_FLOOR = 1e-6
MISSING = "missing"


def pseudo_label_error_rate(y_hat, y_true) -> float:
    y_hat, y_true = np.asarray(y_hat), np.asarray(y_true)
    if y_hat.size == 0:
        raise ContractError("error rate of an empty batch is undefined")
    if y_hat.shape != y_true.shape:
        raise ContractError("label arrays differ in shape")
    return float(np.count_nonzero(y_hat != y_true) / y_hat.size)


@dataclass(frozen=True)
class GapCheck:
    gap: float
    eta: float
    omega: float
    bound: float
    holds: bool
    n_wrong: int
    n: int


def loss_gap_check(member_p0: np.ndarray, y_hat, y_true) -> GapCheck:
    """|mean loss under pseudo-labels - mean loss under true labels| against eta * Omega.

    Losses use the ensemble-mean probability; Omega is the largest per-pair
    loss in the batch over both labels.  Only mislabeled pairs contribute to
    the difference and each contributes at most Omega, so the check is exact:
    ``math.fsum`` and the monotonicity of rounding keep the computed gap
    below the computed bound ``(k * Omega) / n``.
    """
    y_hat, y_true = np.asarray(y_hat), np.asarray(y_true)
    n = len(y_hat)
    if n == 0:
        return GapCheck(0.0, 0.0, 0.0, 0.0, True, 0, 0)
    loss_hat = pair_losses(member_p0, y_hat)
    loss_true = pair_losses(member_p0, y_true)
    omega = float(max(pair_losses(member_p0, np.zeros(n)).max(), pair_losses(member_p0, np.ones(n)).max()))
    gap = abs(math.fsum((loss_hat - loss_true).tolist())) / n
    k = int(np.count_nonzero(y_hat != y_true))
    bound = (k * omega) / n
    return GapCheck(gap, k / n, omega, bound, gap <= bound, k, n)


@dataclass(frozen=True)
class Concentrability:
    value: float | None
    numerator: float
    denominator: float
    weight_mass_pi: float
    weight_mass_mu: float

    @property
    def defined(self) -> bool:
        return self.value is not None

    def describe(self) -> str:
        if self.value is None:
            return "undefined (reward model matches the truth on the behavior distribution)"
        return f"{self.value:.6g}"


def discounted_error(env: Env, policy, reward_fn: Callable, episodes: int, seed: int) -> tuple[float, float]:
    """Self-normalized discounted-visitation mean of R* - R_hat under ``policy``.

    Step t of every episode carries weight (1 - gamma) gamma^t; the weights
    are renormalized over the steps actually visited.  Returns the estimate
    and the mean visited weight mass per episode (the renormalization constant).
    """
    env_seed, pol_seed = np.random.SeedSequence(seed).generate_state(2)
    env.seed(int(env_seed))
    rng = np.random.default_rng(int(pol_seed))
    gamma = env.spec.gamma
    S, A, W = [], [], []
    for _ in range(episodes):
        s, done, t = env.reset(), False, 0
        while not done:
            a = policy.act(s, rng)
            S.append(s)
            A.append(a)
            W.append((1.0 - gamma) * gamma**t)
            s, _, done = env.step(a)
            t += 1
    S, A, W = np.array(S), np.array(A), np.array(W)
    err = env.true_reward_batch(S, A) - np.asarray(reward_fn(S, A), dtype=np.float64)
    return float(np.sum(W * err) / np.sum(W)), float(np.sum(W) / episodes)


def concentrability(env: Env, mu, pi, reward_fn: Callable, samples: int, seed: int,
                    floor: float = CONC_FLOOR) -> Concentrability:
    """|E_{d^pi}[R* - R_hat]| / |E_{d^mu}[R* - R_hat]| from independent rollouts of each policy."""
    s_pi, s_mu = np.random.SeedSequence([seed, 14]).generate_state(2)
    num, mass_pi = discounted_error(env, pi, reward_fn, samples, int(s_pi))
    den, mass_mu = discounted_error(env, mu, reward_fn, samples, int(s_mu))
    value = None if abs(den) < floor else abs(num) / abs(den)
    return Concentrability(value, abs(num), abs(den), mass_pi, mass_mu)


@dataclass(frozen=True)
class TruthReport:
    pearson: float | None
    scatter: np.ndarray  # (n, 2): min-max normalized (predicted, true)

    def scatter_csv(self) -> str:
        out = io.StringIO()
        w = csv.writer(out, lineterminator="\n")
        w.writerow(["predicted", "true"])
        for p, t in self.scatter:
            w.writerow([repr(float(p)), repr(float(t))])
        return out.getvalue()


def _minmax(x: np.ndarray) -> np.ndarray:
    span = x.max() - x.min()
    return np.zeros_like(x) if span == 0 else (x - x.min()) / span


def reward_truth_report(predicted, true) -> TruthReport:
    """Pearson r on raw values plus a min-max normalized scatter table."""
    predicted, true = np.asarray(predicted, dtype=np.float64), np.asarray(true, dtype=np.float64)
    if predicted.shape != true.shape or predicted.ndim != 1:
        raise ContractError("predicted and true rewards must be equal-length vectors")
    if len(predicted) < 2 or np.ptp(predicted) == 0 or np.ptp(true) == 0:
        r = None
    else:
        r = float(stats.pearsonr(predicted, true).statistic)
    return TruthReport(r, np.stack([_minmax(predicted), _minmax(true)], axis=1))


# -- ablation tables -----------------------------------------------------------


@dataclass(frozen=True)
class AblationCell:
    env: str
    variant: str
    mean: float | None
    std: float | None
    n: int


def ablation_table(runs: Iterable[dict], variants: Iterable[str] | None = None) -> list[AblationCell]:
    """Mean and population std of the normalized score per (env, variant).

    Each run is a mapping holding its ``env`` and ``variant`` keys plus a ``score``.
    When ``variants`` is given, every env gets one cell per variant and
    absent combinations appear as empty cells.
    """
    groups: dict[tuple[str, str], list[float]] = {}
    envs = set()
    for run in runs:
        groups.setdefault((run["env"], run["variant"]), []).append(float(run["score"]))
        envs.add(run["env"])
    keys = set(groups)
    if variants is not None:
        keys |= {(e, v) for e in envs for v in variants}
    cells = []
    for env, variant in sorted(keys):
        vals = groups.get((env, variant))
        if vals:
            cells.append(AblationCell(env, variant, float(np.mean(vals)), float(np.std(vals)), len(vals)))
        else:
            cells.append(AblationCell(env, variant, None, None, 0))
    return cells


def ablation_csv(cells: list[AblationCell]) -> str:
    out = io.StringIO()
    w = csv.writer(out, lineterminator="\n")
    w.writerow(["env", "variant", "mean", "std", "n"])
    for c in cells:
        w.writerow([c.env, c.variant, MISSING if c.mean is None else repr(c.mean),
                    MISSING if c.std is None else repr(c.std), c.n])
    return out.getvalue()


def ablation_text(cells: list[AblationCell]) -> str:
    rows = [("env", "variant", "score", "n")]
    for c in cells:
        score = MISSING if c.mean is None else f"{c.mean:.2f} +/- {c.std:.2f}"
        rows.append((c.env, c.variant, score, str(c.n)))
    widths = [max(len(r[i]) for r in rows) for i in range(4)]
    return "\n".join("  ".join(v.ljust(w) for v, w in zip(r, widths)).rstrip() for r in rows) + "\n"


# -- metrics log ---------------------------------------------------------------

METRIC_FIELDS = (
    "run_id", "seed", "config_hash", "step", "event",
    "L_l", "L_u", "eta", "omega", "eta_omega", "gap", "holds", "n_selected", "n_total", "selected_fraction",
    "selected_accuracy", "all_accuracy", "pretrain_accuracy", "pearson_r", "concentrability", "J", "J_norm",
)
_INT_FIELDS = {"seed", "step", "n_selected", "n_total"}
_STR_FIELDS = {"run_id", "config_hash", "event"}


def _encode(value) -> str:
    if value is None:
        return ""
    if isinstance(value, (bool, np.bool_)):
        return "true" if value else "false"
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    return str(value)


def _decode(name: str, text: str):
    if text == "":
        return None
    if name in _STR_FIELDS:
        return text
    if name == "holds":
        return text == "true"
    if name in _INT_FIELDS:
        return int(text)
    return float(text)


class MetricsLog:
    """Append-only metric rows; every row carries the run identity and the config hash."""

    def __init__(self, run_id: str, seed: int, config_hash: str, path: str | Path | None = None):
        self.run_id, self.seed, self.config_hash = run_id, seed, config_hash
        self.rows: list[dict] = []
        self.path = Path(path) if path is not None else None
        if self.path is not None:
            self.path.write_text(",".join(METRIC_FIELDS) + "\n")

    def append(self, step: int, event: str, **metrics) -> dict:
        unknown = set(metrics) - set(METRIC_FIELDS)
        if unknown:
            raise ContractError(f"unknown metric fields: {sorted(unknown)}")
        row = {f: None for f in METRIC_FIELDS}
        row.update(run_id=self.run_id, seed=self.seed, config_hash=self.config_hash, step=step, event=event)
        row.update(metrics)
        self.rows.append(row)
        if self.path is not None:
            with self.path.open("a") as fh:
                fh.write(_row_line(row))
        return row

    def to_csv(self) -> str:
        return ",".join(METRIC_FIELDS) + "\n" + "".join(_row_line(r) for r in self.rows)

    @staticmethod
    def parse(text: str) -> list[dict]:
        reader = csv.DictReader(io.StringIO(text))
        if tuple(reader.fieldnames or ()) != METRIC_FIELDS:
            raise ContractError("metrics CSV header does not match the schema")
        return [{k: _decode(k, v) for k, v in row.items()} for row in reader]


def _row_line(row: dict) -> str:
    out = io.StringIO()
    csv.writer(out, lineterminator="\n").writerow([_encode(row[f]) for f in METRIC_FIELDS])
    return out.getvalue()
