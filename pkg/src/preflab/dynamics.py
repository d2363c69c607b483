"""Gaussian ensemble dynamics model and model-rollout segment generation.

Each member maps a normalized (state, encoded action) input to the mean and
soft-clamped log std of a normalized state delta.  Members train on their own
bootstrap resample; the ones with the lowest validation NLL are elites and
are the only members used for sampling.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .datasets import OfflineDataset, PairBatch
from .envs import Env
from .numcore import (
    Adam,
    ContractError,
    DenseNet,
    NumericError,
    gaussian_nll_terms,
    soft_clamp_log_std,
)

N_MEMBERS = 7
N_ELITES = 5
DYNAMICS_LR = 1e-3


@dataclass
class DynamicsConfig:
    n_members: int = N_MEMBERS
    n_elites: int = N_ELITES
    hidden: tuple = (64, 64)
    activation: str = "relu"
    lr: float = DYNAMICS_LR
    batch_size: int = 256
    epochs: int = 20
    val_fraction: float = 0.1


@dataclass
class Normalizer:
    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, x: np.ndarray) -> "Normalizer":
        mean = x.mean(axis=0)
        std = x.std(axis=0)
        # constant columns keep unit scale so they normalize to exactly zero
        return cls(mean, np.where(std < 1e-8, 1.0, std))

    @classmethod
    def identity(cls, dim: int) -> "Normalizer":
        return cls(np.zeros(dim), np.ones(dim))

    def normalize(self, x):
        return (np.asarray(x) - self.mean) / self.std

    def denormalize(self, z):
        return np.asarray(z) * self.std + self.mean

    def to_dict(self) -> dict:
        return {"mean": self.mean.tolist(), "std": self.std.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "Normalizer":
        return cls(np.array(d["mean"], dtype=np.float64), np.array(d["std"], dtype=np.float64))


@dataclass
class FitReport:
    train_nll: list = field(default_factory=list)  # per member, per epoch
    val_nll: list = field(default_factory=list)
    elites: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"train_nll": self.train_nll, "val_nll": self.val_nll, "elites": self.elites}


class DynamicsEnsemble:
    def __init__(self, state_dim: int, action_enc_dim: int, rng: np.random.Generator,
                 config: DynamicsConfig | None = None, encode_actions: Callable | None = None):
        self.config = config or DynamicsConfig()
        if self.config.n_elites > self.config.n_members:
            raise ContractError("elite count cannot exceed member count")
        self.state_dim, self.action_enc_dim = state_dim, action_enc_dim
        self.encode_actions = encode_actions or (lambda a: np.asarray(a, dtype=np.float64).reshape(len(a), -1))
        sizes = [state_dim + action_enc_dim, *self.config.hidden, 2 * state_dim]
        self.members = [DenseNet(sizes, self.config.activation, rng=rng) for _ in range(self.config.n_members)]
        self.elite_mask = np.zeros(self.config.n_members, dtype=bool)
        self.in_norm: Normalizer | None = None
        self.out_norm: Normalizer | None = None
        self.rng = rng

    @classmethod
    def for_env(cls, env: Env, rng: np.random.Generator, config: DynamicsConfig | None = None):
        return cls(env.spec.state_dim, env.spec.action_enc_dim, rng, config, env.encode_actions)

    @property
    def fitted(self) -> bool:
        return self.in_norm is not None and self.elite_mask.any()

    @property
    def elites(self) -> np.ndarray:
        return np.flatnonzero(self.elite_mask)

    def _inputs(self, s, a) -> np.ndarray:
        s = np.asarray(s, dtype=np.float64).reshape(-1, self.state_dim)
        return np.concatenate([s, self.encode_actions(a)], axis=1)

    def _member_terms(self, net: DenseNet, x_n: np.ndarray, y_n: np.ndarray, trace=False):
        out, tr = net.forward_trace(x_n)
        d = self.state_dim
        log_std, dclamp = soft_clamp_log_std(out[:, d:])
        terms, d_mean, d_log_std = gaussian_nll_terms(out[:, :d], log_std, y_n)
        return terms, np.concatenate([d_mean, d_log_std * dclamp], axis=1), tr

    def fit(self, s, a, s_next, epochs: int | None = None) -> FitReport:
        """Maximum-likelihood fit of every member; the best validation NLLs become elites."""
        cfg = self.config
        x = self._inputs(s, a)
        delta = np.asarray(s_next, dtype=np.float64).reshape(-1, self.state_dim) - x[:, : self.state_dim]
        n = len(x)
        if n < 2:
            raise ContractError("dynamics fit needs at least two transitions")
        if not 0.0 < cfg.val_fraction < 1.0:
            raise ContractError("val_fraction must lie in (0, 1)")
        perm = self.rng.permutation(n)
        n_val = max(1, int(round(cfg.val_fraction * n)))
        val_idx, train_idx = perm[:n_val], perm[n_val:]
        if len(train_idx) == 0:
            train_idx = val_idx
        self.in_norm = Normalizer.fit(x[train_idx])
        self.out_norm = Normalizer.fit(delta[train_idx])
        x_n, y_n = self.in_norm.normalize(x), self.out_norm.normalize(delta)
        report = FitReport()
        epochs = cfg.epochs if epochs is None else epochs
        for m, net in enumerate(self.members):
            boot = train_idx[self.rng.integers(len(train_idx), size=len(train_idx))]
            opt = Adam(lr=cfg.lr)
            train_curve, val_curve = [], []
            step = 0
            for _ in range(epochs):
                order = boot[self.rng.permutation(len(boot))]
                total = 0.0
                for lo in range(0, len(order), cfg.batch_size):
                    idx = order[lo:lo + cfg.batch_size]
                    try:
                        terms, d_out, tr = self._member_terms(net, x_n[idx], y_n[idx])
                    except NumericError as exc:
                        raise NumericError(f"dynamics member {m} step {step}: {exc}") from None
                    loss = float(terms.sum(axis=1).mean())
                    if not np.isfinite(loss):
                        raise NumericError(f"dynamics member {m} step {step}: non-finite NLL")
                    opt.step(net, net.backprop(d_out / len(idx), tr))
                    total += loss * len(idx)
                    step += 1
                train_curve.append(total / len(order))
                val_curve.append(self._nll(net, x_n[val_idx], y_n[val_idx]))
            report.train_nll.append(train_curve)
            report.val_nll.append(val_curve)
        final_val = np.array([c[-1] if c else self._nll(net, x_n[val_idx], y_n[val_idx])
                              for c, net in zip(report.val_nll, self.members)])
        order = np.argsort(final_val, kind="stable")
        self.elite_mask[:] = False
        self.elite_mask[order[: cfg.n_elites]] = True
        report.elites = self.elites.tolist()
        return report

    def fit_dataset(self, dataset: OfflineDataset, epochs: int | None = None) -> FitReport:
        if len(dataset) == 0:
            raise ContractError("dynamics fit needs a nonempty dataset")
        view = dataset.learner_view()
        return self.fit(view.s, view.a, view.s_next, epochs)

    def _nll(self, net: DenseNet, x_n, y_n) -> float:
        terms, _, _ = self._member_terms(net, x_n, y_n)
        return float(terms.sum(axis=1).mean())

    def mean_and_log_std(self, s, a, member: int):
        """Denormalized delta mean and log std of one member."""
        if self.in_norm is None:
            raise ContractError("dynamics ensemble is not fit")
        out = self.members[member].forward(self.in_norm.normalize(self._inputs(s, a)))
        d = self.state_dim
        log_std, _ = soft_clamp_log_std(out[:, d:])
        mean = self.out_norm.denormalize(out[:, :d])
        return mean, log_std + np.log(self.out_norm.std)

    def predict(self, s, a, rng: np.random.Generator, member: int | None = None) -> np.ndarray:
        """Sampled next states; without ``member`` each row uses a uniformly drawn elite."""
        if not self.fitted:
            raise ContractError("dynamics ensemble is not fit")
        s = np.asarray(s, dtype=np.float64).reshape(-1, self.state_dim)
        n = len(s)
        if member is not None:
            chosen = np.full(n, member)
        else:
            chosen = self.elites[rng.integers(len(self.elites), size=n)]
        z = rng.normal(size=(n, self.state_dim))
        out = np.empty_like(s)
        a_arr = np.asarray(a)
        for m in np.unique(chosen):
            rows = np.flatnonzero(chosen == m)
            mean, log_std = self.mean_and_log_std(s[rows], a_arr[rows], int(m))
            out[rows] = s[rows] + mean + np.exp(log_std) * z[rows]
        self.last_members = chosen
        return out

    def disagreement(self, s, a) -> np.ndarray:
        """Std across elite means of the predicted delta, averaged over dimensions."""
        means = np.stack([self.mean_and_log_std(s, a, int(m))[0] for m in self.elites])
        return means.std(axis=0).mean(axis=1)

    # -- persistence -------------------------------------------------------

    def save(self, directory: str | Path) -> None:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        for i, net in enumerate(self.members):
            net.save(directory / f"member_{i}.bin", elite=bool(self.elite_mask[i]), member=i)
        meta = {
            "state_dim": self.state_dim,
            "action_enc_dim": self.action_enc_dim,
            "elite_mask": self.elite_mask.tolist(),
            "in_norm": self.in_norm.to_dict() if self.in_norm else None,
            "out_norm": self.out_norm.to_dict() if self.out_norm else None,
            "config": {k: list(v) if isinstance(v, tuple) else v for k, v in vars(self.config).items()},
        }
        (directory / "dynamics.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, directory: str | Path, rng: np.random.Generator, encode_actions=None) -> "DynamicsEnsemble":
        directory = Path(directory)
        meta = json.loads((directory / "dynamics.json").read_text())
        cfg = meta["config"]
        cfg["hidden"] = tuple(cfg["hidden"])
        ens = cls(meta["state_dim"], meta["action_enc_dim"], rng, DynamicsConfig(**cfg), encode_actions)
        for i in range(len(ens.members)):
            ens.members[i], _ = DenseNet.load(directory / f"member_{i}.bin")
        ens.elite_mask = np.array(meta["elite_mask"], dtype=bool)
        ens.in_norm = Normalizer.from_dict(meta["in_norm"]) if meta["in_norm"] else None
        ens.out_norm = Normalizer.from_dict(meta["out_norm"]) if meta["out_norm"] else None
        return ens


def model_step(ensemble: DynamicsEnsemble, env: Env, s, a, rng) -> tuple[np.ndarray, np.ndarray]:
    """One model transition snapped onto the env's state set, with the known terminal predicate."""
    nxt = env.project(ensemble.predict(s, a, rng))
    return nxt, np.asarray(env.is_terminal(nxt), dtype=bool)


def rollout_pairs(ensemble: DynamicsEnsemble, env: Env, policy_fn: Callable, start_states: np.ndarray,
                  H: int, L: int, count: int, rng: np.random.Generator, max_rounds: int = 50) -> PairBatch:
    """``count`` unlabeled pairs of length-L windows cut from H-step model rollouts.

    ``policy_fn(states, rng)`` returns a batch of (exploratory) actions.  Each
    rollout starts from an independently drawn offline state.  A rollout that
    reaches a terminal state ends there; the window is placed uniformly among
    the L-windows that fit before the end, and rollouts shorter than L are
    discarded and redrawn.  Hidden true returns come from the env's reward
    function and are for diagnostics only.
    """
    if H < L:
        raise ContractError(f"rollout horizon H={H} must be >= segment length L={L}")
    if L < 1 or count < 0:
        raise ContractError("L must be >= 1 and count >= 0")
    start_states = np.asarray(start_states, dtype=np.float64)
    need = 2 * count
    kept_s, kept_a = [], []
    for _ in range(max_rounds):
        if sum(len(k) for k in kept_s) >= need:
            break
        m = max(need - sum(len(k) for k in kept_s), 1)
        s = start_states[rng.integers(len(start_states), size=m)]
        S = np.empty((m, H, ensemble.state_dim))
        A = None
        alive = np.ones(m, dtype=bool)
        length = np.full(m, H)
        for t in range(H):
            a = policy_fn(s, rng)
            if A is None:
                A = np.empty((m, H) + np.shape(a)[1:], dtype=np.asarray(a).dtype)
            S[:, t], A[:, t] = s, a
            nxt, term = model_step(ensemble, env, s, a, rng)
            ended = alive & term
            length[ended] = t + 1
            alive &= ~term
            s = np.where(alive[:, None], nxt, s)
        ok = np.flatnonzero(length >= L)
        if len(ok) == 0:
            continue
        start = rng.integers(length[ok] - L + 1)
        win = start[:, None] + np.arange(L)
        kept_s.append(S[ok[:, None], win])
        kept_a.append(A[ok[:, None], win])
    if need and sum(len(k) for k in kept_s) < need:
        raise ContractError(f"could not generate {count} model pairs with L={L} in {max_rounds} rounds")
    if need == 0:
        z = np.zeros((0, L, ensemble.state_dim))
        return PairBatch(z, np.zeros((0, L)), z, np.zeros((0, L)), np.zeros(0), np.zeros(0),
                         np.zeros(0, np.int64), "none", "model-rollout")
    segs = np.concatenate(kept_s)[:need]
    acts = np.concatenate(kept_a)[:need]
    flat_r = env.true_reward_batch(segs.reshape(-1, ensemble.state_dim), acts.reshape(need * L, *acts.shape[2:]))
    ret = flat_r.reshape(need, L).sum(axis=1)
    return PairBatch(
        s0=segs[0::2], a0=acts[0::2], s1=segs[1::2], a1=acts[1::2],
        ret0=ret[0::2], ret1=ret[1::2], y=np.full(count, -1, dtype=np.int64),
        label_kind="none", origin="model-rollout",
    )


def fit(ensemble: DynamicsEnsemble, dataset: OfflineDataset, epochs: int | None = None) -> FitReport:
    return ensemble.fit_dataset(dataset, epochs)


def predict(ensemble: DynamicsEnsemble, s, a, rng: np.random.Generator, member: int | None = None) -> np.ndarray:
    return ensemble.predict(s, a, rng, member)
