"""Bradley-Terry reward ensemble with pseudo-labeling and screened updates.

Every member maps an (s, a) input to ``r_max * tanh(net(s, a))``.  A segment's
score is the sum of its per-step rewards, and the preference probability is
``P(seg0 > seg1) = sigmoid(score0 - score1)``.  Losses are binary
cross-entropies on the logit gap ``score1 - score0`` with the label
convention ``y = 1`` when seg1 is preferred.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np

from .datasets import PairBatch
from .numcore import Adam, ContractError, DenseNet, NumericError, bce_terms, sigmoid

log = logging.getLogger(__name__)

N_MEMBERS = 3
REWARD_LR = 3e-4
LABELED_BATCH = 64
UNLABELED_BATCH = 256
KAPPA_P = 0.85
KAPPA_TAU = 0.05


@dataclass(frozen=True)
class SelectionConfig:
    kappa_p: float = KAPPA_P
    kappa_tau: float = KAPPA_TAU
    passthrough: bool = False  # keep every pair (the no-screening ablation)

    def __post_init__(self):
        if not 0.5 < self.kappa_p < 1.0:
            raise ContractError(f"kappa_p must lie in (0.5, 1), got {self.kappa_p}")
        if not self.kappa_tau > 0.0:
            raise ContractError(f"kappa_tau must be positive, got {self.kappa_tau}")


@dataclass
class ScreenedBatch:
    """Pairs that passed screening, with their pseudo-labels and statistics.

    the per-pair statistics cover all ``n_total`` candidate pairs;
    ``index`` lists the kept ones.
    """

    candidates: PairBatch
    y_hat: np.ndarray
    p: np.ndarray
    tau: np.ndarray
    index: np.ndarray

    @property
    def n_total(self) -> int:
        return len(self.y_hat)

    @property
    def n_selected(self) -> int:
        return len(self.index)

    @property
    def pairs(self) -> PairBatch:
        return self.candidates.subset(self.index).with_labels(self.y_hat[self.index], "pseudo")

    @classmethod
    def empty_like(cls, template: PairBatch) -> "ScreenedBatch":
        none = np.zeros(0, dtype=np.int64)
        return cls(template.subset(none), none, np.zeros(0), np.zeros(0), none)


@dataclass
class TrainReport:
    steps: int
    final_loss: float
    train_accuracy: float
    losses: list


class RewardEnsemble:
    def __init__(self, state_dim: int, action_enc_dim: int, r_max: float, rng: np.random.Generator,
                 n_members: int = N_MEMBERS, hidden=(64, 64), encode_actions: Callable | None = None,
                 zero: bool = False, lr: float = REWARD_LR):
        if n_members < 1:
            raise ContractError("need at least one reward member")
        self.state_dim, self.action_enc_dim, self.r_max = state_dim, action_enc_dim, float(r_max)
        self.hidden = tuple(hidden)
        self.encode_actions = encode_actions or (lambda a: np.asarray(a, dtype=np.float64).reshape(len(a), -1))
        sizes = [state_dim + action_enc_dim, *self.hidden, 1]
        # one child stream per member keeps initializations distinct and reproducible
        seeds = rng.integers(2**63, size=n_members)
        self.members = [DenseNet(sizes, "relu", rng=np.random.default_rng(int(s)), zero=zero) for s in seeds]
        self.optimizers = [Adam(lr=lr) for _ in self.members]
        self.rngs = [np.random.default_rng(int(s) ^ 0x5EED) for s in seeds]

    @classmethod
    def for_env(cls, env, rng: np.random.Generator, **kw) -> "RewardEnsemble":
        return cls(env.spec.state_dim, env.spec.action_enc_dim, env.spec.r_max, rng,
                   encode_actions=env.encode_actions, **kw)

    @property
    def n_members(self) -> int:
        return len(self.members)

    def _inputs(self, s, a) -> np.ndarray:
        s = np.asarray(s, dtype=np.float64).reshape(-1, self.state_dim)
        return np.concatenate([s, self.encode_actions(a)], axis=1)

    def _segment_inputs(self, batch: PairBatch) -> tuple[np.ndarray, np.ndarray]:
        n, L = len(batch), batch.L
        flat = lambda s, a: self._inputs(s.reshape(n * L, -1), a.reshape(n * L, *a.shape[2:]))  # noqa: E731
        return flat(batch.s0, batch.a0), flat(batch.s1, batch.a1)

    def member_reward(self, m: int, s, a) -> np.ndarray:
        return self.r_max * np.tanh(self.members[m].forward(self._inputs(s, a))[:, 0])

    def predict_reward(self, s, a) -> np.ndarray:
        """Ensemble-mean bounded reward."""
        return np.mean([self.member_reward(m, s, a) for m in range(self.n_members)], axis=0)

    def step_rewards(self, batch: PairBatch) -> tuple[np.ndarray, np.ndarray]:
        """Per-member per-step rewards, each of shape (members, n, L)."""
        n, L = len(batch), batch.L
        x0, x1 = self._segment_inputs(batch)
        r0 = np.stack([self.r_max * np.tanh(net.forward(x0)[:, 0]).reshape(n, L) for net in self.members])
        r1 = np.stack([self.r_max * np.tanh(net.forward(x1)[:, 0]).reshape(n, L) for net in self.members])
        return r0, r1

    def member_probs(self, batch: PairBatch) -> np.ndarray:
        """P_i(seg0 > seg1) for every member i, shape (members, n)."""
        r0, r1 = self.step_rewards(batch)
        return bt_prob_from_rewards(r0, r1)

    def bt_prob(self, batch: PairBatch) -> np.ndarray:
        """Ensemble-mean P(seg0 > seg1)."""
        return self.member_probs(batch).mean(axis=0)

    # -- training ------------------------------------------------------------

    def _member_loss_grad(self, m: int, parts: list[tuple[PairBatch, np.ndarray]]):
        """Sum over ``parts`` of the mean BCE of each part, and its parameter gradient.

        Each part is (pairs, labels).  Empty parts contribute nothing.
        """
        net = self.members[m]
        blocks, sizes = [], []
        for batch, _ in parts:
            blocks.extend(self._segment_inputs(batch))
            sizes.append((len(batch), batch.L))
        x = np.concatenate(blocks, axis=0)
        z, trace = net.forward_trace(x)
        t = np.tanh(z[:, 0])
        r = self.r_max * t
        d_r = np.zeros_like(r)
        total, off = 0.0, 0
        for (n, L), (_, y) in zip(sizes, parts):
            r0 = r[off:off + n * L].reshape(n, L)
            r1 = r[off + n * L:off + 2 * n * L].reshape(n, L)
            if n:
                loss, d_gap = bce_terms(r1.sum(axis=1) - r0.sum(axis=1), np.asarray(y, dtype=np.float64))
                total += float(loss.mean())
                d_r[off:off + n * L] = np.repeat(-d_gap / n, L)
                d_r[off + n * L:off + 2 * n * L] = np.repeat(d_gap / n, L)
            off += 2 * n * L
        d_z = (d_r * self.r_max * (1.0 - t * t))[:, None]
        return total, net.backprop(d_z, trace)

    def loss_and_grads(self, labeled: PairBatch, screened: PairBatch | None = None, member: int = 0):
        """Combined labeled-plus-pseudo-labeled loss of one member, full batch."""
        if len(labeled) == 0:
            raise ContractError("labeled set must be nonempty")
        parts = [(labeled, labeled.y)]
        if screened is not None and len(screened):
            parts.append((screened, screened.y))
        return self._member_loss_grad(member, parts)

    def _step(self, m: int, parts, step: int) -> float:
        try:
            loss, grads = self._member_loss_grad(m, parts)
        except NumericError as exc:
            raise NumericError(f"reward member {m} step {step}: {exc}") from None
        if not math.isfinite(loss) or not all(np.all(np.isfinite(g)) for g in grads):
            raise NumericError(f"reward member {m} step {step}: non-finite loss {loss}")
        self.optimizers[m].step(self.members[m], grads)
        return loss

    def pretrain(self, labeled: PairBatch, steps: int, batch_size: int = LABELED_BATCH) -> TrainReport:
        """Cross-entropy training of every member on the labeled pairs."""
        if len(labeled) < 1:
            raise ContractError("pretraining needs at least one labeled pair")
        if np.any(labeled.y < 0):
            raise ContractError("pretraining pairs must all be labeled")
        losses = []
        for step in range(steps):
            step_loss = 0.0
            for m in range(self.n_members):
                idx = self.rngs[m].integers(len(labeled), size=min(batch_size, len(labeled)))
                sub = labeled.subset(idx)
                step_loss += self._step(m, [(sub, sub.y)], step)
            losses.append(step_loss / self.n_members)
        return TrainReport(steps, losses[-1] if losses else float("nan"), self.accuracy(labeled), losses)

    def semi_supervised_update(self, labeled: PairBatch, screened: ScreenedBatch, steps: int,
                               labeled_batch: int = LABELED_BATCH, unlabeled_batch: int = UNLABELED_BATCH) -> dict:
        """Equal-weight labeled and pseudo-labeled BCE; reduces to pretraining when nothing is selected."""
        if len(labeled) < 1:
            raise ContractError("labeled set must be nonempty")
        pseudo = screened.pairs
        l_losses, u_losses = [], []
        for step in range(steps):
            for m in range(self.n_members):
                rng = self.rngs[m]
                sub = labeled.subset(rng.integers(len(labeled), size=min(labeled_batch, len(labeled))))
                parts = [(sub, sub.y)]
                if len(pseudo):
                    usub = pseudo.subset(rng.integers(len(pseudo), size=min(unlabeled_batch, len(pseudo))))
                    parts.append((usub, usub.y))
                self._step(m, parts, step)
        for m in range(self.n_members):
            l_losses.append(self.loss_and_grads(labeled, None, m)[0])
            if len(pseudo):
                u_losses.append(self._member_loss_grad(m, [(pseudo, pseudo.y)])[0])
        L_l = float(np.mean(l_losses))
        L_u = float(np.mean(u_losses)) if u_losses else 0.0
        return {"L_l": L_l, "L_u": L_u, "L_R": L_l + L_u}

    def accuracy(self, labeled: PairBatch) -> float:
        if len(labeled) == 0:
            return float("nan")
        return float(np.mean(pseudo_label(self, labeled) == labeled.y))

    # -- persistence -----------------------------------------------------------

    def save(self, directory: str | Path) -> None:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        for i, net in enumerate(self.members):
            net.save(directory / f"reward_{i}.bin", member=i, r_max=self.r_max)
        meta = {"state_dim": self.state_dim, "action_enc_dim": self.action_enc_dim, "r_max": self.r_max,
                "n_members": self.n_members, "hidden": list(self.hidden)}
        (directory / "reward.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, directory: str | Path, encode_actions=None) -> "RewardEnsemble":
        directory = Path(directory)
        meta = json.loads((directory / "reward.json").read_text())
        ens = cls(meta["state_dim"], meta["action_enc_dim"], meta["r_max"], np.random.default_rng(0),
                  meta["n_members"], tuple(meta["hidden"]), encode_actions)
        ens.members = [DenseNet.load(directory / f"reward_{i}.bin")[0] for i in range(meta["n_members"])]
        return ens


def bt_prob_from_rewards(r0: np.ndarray, r1: np.ndarray) -> np.ndarray:
    """sigmoid(sum r0 - sum r1) over the last axis."""
    r0, r1 = np.asarray(r0, dtype=np.float64), np.asarray(r1, dtype=np.float64)
    if r0.shape != r1.shape:
        raise ContractError(f"segment length mismatch: {r0.shape} vs {r1.shape}")
    return sigmoid(r0.sum(axis=-1) - r1.sum(axis=-1))


def bt_prob(ensemble: RewardEnsemble, batch: PairBatch, member: int | None = None) -> np.ndarray:
    probs = ensemble.member_probs(batch)
    return probs.mean(axis=0) if member is None else probs[member]


def pseudo_label_from_probs(member_p0: np.ndarray) -> np.ndarray:
    """1 iff the ensemble-mean P(seg1 > seg0) exceeds one half (exact 0.5 gives 0)."""
    p1_bar = (1.0 - np.asarray(member_p0)).mean(axis=0)
    return (p1_bar > 0.5).astype(np.int64)


def pseudo_label(ensemble: RewardEnsemble, batch: PairBatch) -> np.ndarray:
    return pseudo_label_from_probs(ensemble.member_probs(batch))


def confidence_uncertainty_from_probs(member_p0: np.ndarray, y_hat: np.ndarray):
    """Confidence of the pseudo-label under the mean probability, and the member spread.

    ``member_p0`` has shape (members, n) and holds P_i(seg0 > seg1).
    """
    member_p0 = np.asarray(member_p0, dtype=np.float64)
    p0_bar = member_p0.mean(axis=0)
    p1_bar = (1.0 - member_p0).mean(axis=0)
    p = np.where(np.asarray(y_hat) == 1, p1_bar, p0_bar)
    if member_p0.shape[0] == 1:
        log.warning("single reward member: uncertainty defined as 0")
        return p, np.zeros_like(p)
    # the spread is shift invariant; centering on one member makes equal members give exactly 0
    return p, (member_p0 - member_p0[0]).std(axis=0)


def confidence_uncertainty(ensemble: RewardEnsemble, batch: PairBatch, y_hat: np.ndarray):
    return confidence_uncertainty_from_probs(ensemble.member_probs(batch), y_hat)


def select_mask(p, tau, config: SelectionConfig) -> np.ndarray:
    p, tau = np.asarray(p), np.asarray(tau)
    if config.passthrough:
        return np.ones(p.shape, dtype=bool)
    return (p > config.kappa_p) & (tau < config.kappa_tau)


def select(candidates: PairBatch, y_hat, p, tau, config: SelectionConfig) -> ScreenedBatch:
    keep = np.flatnonzero(select_mask(p, tau, config))
    return ScreenedBatch(candidates, np.asarray(y_hat, dtype=np.int64), np.asarray(p), np.asarray(tau), keep)


def screen(ensemble: RewardEnsemble, candidates: PairBatch, config: SelectionConfig) -> ScreenedBatch:
    """Pseudo-label every candidate and keep the ones passing both thresholds."""
    probs = ensemble.member_probs(candidates)
    y_hat = pseudo_label_from_probs(probs)
    p, tau = confidence_uncertainty_from_probs(probs, y_hat)
    return select(candidates, y_hat, p, tau, config)


def pair_losses(member_p0: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """Per-pair cross-entropy under the ensemble-mean probability."""
    p0_bar = np.asarray(member_p0).mean(axis=0)
    p1_bar = (1.0 - np.asarray(member_p0)).mean(axis=0)
    chosen = np.where(np.asarray(labels) == 1, p1_bar, p0_bar)
    return -np.log(np.maximum(chosen, np.finfo(np.float64).tiny))
