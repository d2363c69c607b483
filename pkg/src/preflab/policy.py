"""Offline policy learners driven by a learned reward.

Discrete environments use exact Q tables (conservative Q-learning and
expectile-regression / advantage-weighted variants); the point mass uses
:class:`~preflab.numcore.DenseNet` critics and a deterministic tanh actor
explored with a fixed Gaussian std.  Learners consume :class:`Batch` objects
whose rewards always come from the reward model; they never see the
environment's reward.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .numcore import Adam, ContractError, DenseNet, NumericError, check_finite

AWR_WEIGHT_CAP = 100.0


@dataclass
class Batch:
    """Transition minibatch with model rewards.

    Tabular learners read ``s``/``s_next`` as state indices, network learners
    as state vectors; ``a`` is an index array or an action matrix.
    """

    s: np.ndarray
    a: np.ndarray
    r: np.ndarray
    s_next: np.ndarray
    terminal: np.ndarray


def _lse(z: np.ndarray) -> np.ndarray:
    m = z.max(axis=1, keepdims=True)
    return (m + np.log(np.exp(z - m).sum(axis=1, keepdims=True)))[:, 0]


def logsumexp_rows(x: np.ndarray, temperature: float = 1.0) -> np.ndarray:
    return temperature * _lse(np.asarray(x, dtype=np.float64) / temperature)


def softmax_rows(x: np.ndarray, temperature: float = 1.0) -> np.ndarray:
    z = x / temperature
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def expectile_weight(u, expectile: float):
    """|tau - 1[u < 0]|: asymmetric weight of the expectile loss."""
    u = np.asarray(u, dtype=np.float64)
    return np.abs(expectile - (u < 0.0))


def expectile_loss(u, expectile: float):
    return expectile_weight(u, expectile) * np.asarray(u) ** 2


def awr_weights(advantage, temperature: float) -> np.ndarray:
    z = temperature * np.asarray(advantage, dtype=np.float64)
    # clipping the exponent avoids overflow; the outer minimum makes the cap exact
    return np.minimum(np.exp(np.minimum(z, np.log(AWR_WEIGHT_CAP))), AWR_WEIGHT_CAP)


# -- tabular -----------------------------------------------------------------


def bellman_target(Q: np.ndarray, r, s_next, gamma: float, terminal=None) -> np.ndarray:
    """r + gamma * max_a' Q(s', a'), with no bootstrap on terminal transitions."""
    r = np.asarray(r, dtype=np.float64)
    boot = Q[np.asarray(s_next, dtype=np.int64)].max(axis=-1)
    if terminal is not None:
        boot = np.where(np.asarray(terminal, dtype=bool), 0.0, boot)
    return r + gamma * boot


def value_iteration_oracle(mdp, R: np.ndarray, gamma: float, tol: float = 1e-10, max_iter: int = 100_000) -> np.ndarray:
    """Optimal Q table of a finite MDP exposing ``P`` (S, A, S) and ``terminal_mask``."""
    P = getattr(mdp, "P", None)
    if P is None:
        raise ContractError(f"{type(mdp).__name__} has no exact transition matrix")
    R = np.asarray(R, dtype=np.float64)
    if R.shape != P.shape[:2]:
        raise ContractError(f"reward table shape {R.shape} != {P.shape[:2]}")
    term = np.asarray(getattr(mdp, "terminal_mask", np.zeros(P.shape[0], bool)))
    R = np.where(term[:, None], 0.0, R)
    Q = np.zeros_like(R)
    for _ in range(max_iter):
        V = np.where(term, 0.0, Q.max(axis=1))
        Q_new = R + gamma * P @ V
        Q_new[term] = 0.0
        if np.max(np.abs(Q_new - Q)) < tol * (1.0 - gamma):
            return Q_new
        Q = Q_new
    raise NumericError("value iteration did not converge")


def q_learning(
    mdp,
    R: np.ndarray,
    gamma: float,
    rng: np.random.Generator,
    iters: int = 3000,
    samples_per_pair: int = 512,
    average_from: float = 0.5,
) -> np.ndarray:
    """Synchronous sampled Q-learning with Polyak-Ruppert averaging.

    Every iteration draws ``samples_per_pair`` next states for each (s, a) from
    the true dynamics and applies the sampled Bellman backup with unit step;
    iterates after ``average_from * iters`` are averaged.
    """
    P = mdp.P
    S, A, _ = P.shape
    term = np.asarray(mdp.terminal_mask)
    R = np.where(term[:, None], 0.0, R)
    cdf = np.cumsum(P, axis=2)
    cdf[..., -1] = 1.0
    flat_cdf = cdf.reshape(S * A, S)
    Q = np.zeros((S, A))
    avg = np.zeros_like(Q)
    n_avg = 0
    start = int(average_from * iters)
    for k in range(iters):
        u = rng.random((S * A, samples_per_pair))
        nxt = np.empty_like(u, dtype=np.int64)
        for i in range(S * A):
            nxt[i] = np.searchsorted(flat_cdf[i], u[i], side="right")
        target = bellman_target(Q, R.reshape(-1, 1), nxt, gamma, term[nxt]).mean(axis=1)
        Q = target.reshape(S, A)
        Q[term] = 0.0
        if k >= start:
            n_avg += 1
            avg += (Q - avg) / n_avg
    return avg


class GreedyTablePolicy:
    def __init__(self, table: np.ndarray, index_fn=None):
        self.table = np.asarray(table)
        self.index_fn = index_fn

    def _row(self, state):
        idx = state if self.index_fn is None else int(self.index_fn(state)[0])
        return self.table[idx]

    def act(self, state, rng=None) -> int:
        return int(np.argmax(self._row(state)))

    def act_batch(self, idx: np.ndarray) -> np.ndarray:
        return np.argmax(self.table[idx], axis=1)


class EpsilonGreedy:
    def __init__(self, base, epsilon: float, n_actions: int):
        if not 0.0 <= epsilon <= 1.0:
            raise ContractError("epsilon must lie in [0, 1]")
        self.base, self.epsilon, self.n_actions = base, epsilon, n_actions

    def act(self, state, rng: np.random.Generator) -> int:
        if rng.random() < self.epsilon:
            return int(rng.integers(self.n_actions))
        return self.base.act(state, rng)


class GaussianExploration:
    """Adds fixed-std noise to a deterministic continuous policy and clips to the box."""

    def __init__(self, base, std: float, low: float = -1.0, high: float = 1.0):
        self.base, self.std, self.low, self.high = base, std, low, high

    def act(self, state, rng: np.random.Generator) -> np.ndarray:
        a = np.asarray(self.base.act(state, rng), dtype=np.float64)
        return np.clip(a + self.std * rng.normal(size=a.shape), self.low, self.high)


def act(policy, s, mode: str = "greedy", rng: np.random.Generator | None = None, epsilon: float = 0.0,
        std: float = 0.0, n_actions: int | None = None):
    """Single action from ``policy`` in greedy or exploration mode."""
    if mode == "greedy":
        return policy.act(s, rng)
    if mode != "explore":
        raise ContractError(f"unknown mode {mode!r}")
    if rng is None:
        raise ContractError("explore mode needs a seeded rng")
    if n_actions is not None:
        return EpsilonGreedy(policy, epsilon, n_actions).act(s, rng)
    return GaussianExploration(policy, std).act(s, rng)


def _scatter_rows(shape, s, a, values) -> np.ndarray:
    out = np.zeros(shape)
    np.add.at(out, (s, a), values)
    return out


@dataclass
class TabularCQL:
    """Q table trained by TD plus the conservative logsumexp penalty."""

    n_states: int
    n_actions: int
    gamma: float = 0.99
    alpha: float = 5.0
    temperature: float = 1.0
    lr: float = 0.5
    debug: bool = False
    Q: np.ndarray = field(init=False)

    def __post_init__(self):
        self.Q = np.zeros((self.n_states, self.n_actions))

    def targets(self, batch: Batch) -> np.ndarray:
        return bellman_target(self.Q, batch.r, batch.s_next, self.gamma, batch.terminal)

    def loss_and_grad(self, Q: np.ndarray, batch: Batch, y: np.ndarray, alpha: float | None = None):
        """Mean loss over the batch and its gradient w.r.t. the table (targets held fixed)."""
        alpha = self.alpha if alpha is None else alpha
        s, a = batch.s, batch.a
        n = len(s)
        q_sa = Q[s, a]
        td = q_sa - y
        rows = Q[s]
        penalty = logsumexp_rows(rows, self.temperature) - q_sa
        loss_td = 0.5 * float(np.mean(td * td))
        loss_pen = float(np.mean(penalty))
        grad = _scatter_rows(Q.shape, s, a, td / n)
        if alpha != 0.0:
            grad += alpha * _row_scatter(Q.shape, s, softmax_rows(rows, self.temperature) / n)
            grad -= alpha * _scatter_rows(Q.shape, s, a, np.full(n, 1.0 / n))
        return loss_td + alpha * loss_pen, loss_td, penalty, grad

    def update(self, batch: Batch) -> dict:
        y = self.targets(batch)
        loss, loss_td, penalty, grad = self.loss_and_grad(self.Q, batch, y)
        if not np.isfinite(loss):
            raise NumericError("CQL loss is not finite")
        if self.debug and np.any(penalty < -1e-12):
            raise NumericError("conservative penalty negative")
        counts = np.bincount(batch.s, minlength=self.n_states).astype(np.float64)
        scale = len(batch.s) / np.maximum(counts, 1.0)
        self.Q -= self.lr * grad * scale[:, None]
        return {"loss": loss, "td_loss": loss_td, "penalty": float(np.mean(penalty))}

    def policy(self, index_fn=None) -> GreedyTablePolicy:
        return GreedyTablePolicy(self.Q, index_fn)


def _row_scatter(shape, s, rows) -> np.ndarray:
    out = np.zeros(shape)
    np.add.at(out, s, rows)
    return out


@dataclass
class TabularIQL:
    """Value and policy-logit tables trained by expectile regression and AWR."""

    n_states: int
    n_actions: int
    gamma: float = 0.99
    expectile: float = 0.7
    temperature: float = 3.0
    lr: float = 0.5
    Q: np.ndarray = field(init=False)
    V: np.ndarray = field(init=False)
    logits: np.ndarray = field(init=False)

    def __post_init__(self):
        if not 0.0 < self.expectile < 1.0:
            raise ContractError("expectile must lie in (0, 1)")
        self.Q = np.zeros((self.n_states, self.n_actions))
        self.V = np.zeros(self.n_states)
        self.logits = np.zeros((self.n_states, self.n_actions))

    def losses_and_grads(self, Q, V, logits, batch: Batch):
        s, a, n = batch.s, batch.a, len(batch.s)
        u = Q[s, a] - V[s]
        w = expectile_weight(u, self.expectile)
        loss_v = float(np.mean(w * u * u))
        gV = np.zeros_like(V)
        np.add.at(gV, s, -2.0 * w * u / n)
        y = batch.r + self.gamma * np.where(batch.terminal, 0.0, V[batch.s_next])
        td = Q[s, a] - y
        loss_q = 0.5 * float(np.mean(td * td))
        gQ = _scatter_rows(Q.shape, s, a, td / n)
        weights = awr_weights(Q[s, a] - V[s], self.temperature)
        probs = softmax_rows(logits[s])
        logp = np.log(probs[np.arange(n), a])
        loss_pi = float(-np.mean(weights * logp))
        onehot = np.zeros_like(probs)
        onehot[np.arange(n), a] = 1.0
        gL = _row_scatter(logits.shape, s, -(weights[:, None] * (onehot - probs)) / n)
        return (loss_v, loss_q, loss_pi), (gV, gQ, gL), weights

    def update(self, batch: Batch) -> dict:
        (lv, lq, lp), (gV, gQ, gL), _ = self.losses_and_grads(self.Q, self.V, self.logits, batch)
        if not np.all(np.isfinite([lv, lq, lp])):
            raise NumericError("IQL loss is not finite")
        counts = np.bincount(batch.s, minlength=self.n_states).astype(np.float64)
        scale = len(batch.s) / np.maximum(counts, 1.0)
        self.V -= self.lr * gV * scale
        self.Q -= self.lr * gQ * scale[:, None]
        self.logits -= self.lr * gL * scale[:, None]
        return {"v_loss": lv, "q_loss": lq, "pi_loss": lp}

    def policy(self, index_fn=None) -> GreedyTablePolicy:
        return GreedyTablePolicy(self.logits, index_fn)


# -- continuous (network) learners ------------------------------------------


class ActorNet:
    """Deterministic actor: a = tanh(net(s))."""

    def __init__(self, state_dim: int, action_dim: int, hidden=(64, 64), rng=None):
        self.net = DenseNet([state_dim, *hidden, action_dim], "relu", rng=rng)

    def forward_trace(self, s):
        z, tr = self.net.forward_trace(s)
        return np.tanh(z), tr

    def act(self, state, rng=None) -> np.ndarray:
        return np.tanh(self.net.forward(state))

    def backprop(self, a: np.ndarray, d_a: np.ndarray, trace):
        return self.net.backprop(d_a * (1.0 - a * a), trace)


def critic_input(s, a) -> np.ndarray:
    return np.concatenate([np.asarray(s, dtype=np.float64), np.asarray(a, dtype=np.float64)], axis=-1)


def cql_critic_loss(critic: DenseNet, batch: Batch, y: np.ndarray, sampled_actions: np.ndarray,
                    alpha: float, temperature: float = 1.0):
    """TD + conservative penalty over {data action} U sampled actions.

    ``sampled_actions`` has shape (n, k, action_dim).  Including the data
    action in the logsumexp set keeps the penalty non-negative.
    """
    n, k, da = sampled_actions.shape
    acts = np.concatenate([batch.a[:, None, :], sampled_actions], axis=1)  # (n, k+1, da)
    s_rep = np.repeat(batch.s, k + 1, axis=0)
    q_all, tr = critic.forward_trace(critic_input(s_rep, acts.reshape(-1, da)))
    q_all = q_all.reshape(n, k + 1)
    q_data = q_all[:, 0]
    td = q_data - y
    penalty = logsumexp_rows(q_all, temperature) - q_data
    loss = 0.5 * float(np.mean(td * td)) + alpha * float(np.mean(penalty))
    d_q = alpha * softmax_rows(q_all, temperature) / n
    d_q[:, 0] += td / n - alpha / n
    grads = critic.backprop(d_q.reshape(-1, 1), tr)
    return loss, grads, penalty


def actor_loss(actor: ActorNet, critic: DenseNet, s: np.ndarray):
    """-mean Q(s, pi(s)); gradient w.r.t. actor parameters through the critic input."""
    a, a_tr = actor.forward_trace(s)
    q, q_tr = critic.forward_trace(critic_input(s, a))
    n = len(s)
    _, d_in = critic.backprop(np.full((n, 1), -1.0 / n), q_tr, input_grad=True)
    d_a = d_in[:, s.shape[1]:]
    return -float(np.mean(q)), actor.backprop(a, d_a, a_tr)


def iql_value_loss(vnet: DenseNet, q_data: np.ndarray, s: np.ndarray, expectile: float):
    v, tr = vnet.forward_trace(s)
    u = q_data - v[:, 0]
    w = expectile_weight(u, expectile)
    n = len(s)
    return float(np.mean(w * u * u)), vnet.backprop((-2.0 * w * u / n)[:, None], tr)


def iql_q_loss(qnet: DenseNet, batch: Batch, y: np.ndarray):
    q, tr = qnet.forward_trace(critic_input(batch.s, batch.a))
    td = q[:, 0] - y
    n = len(y)
    return 0.5 * float(np.mean(td * td)), qnet.backprop((td / n)[:, None], tr)


def awr_actor_loss(actor: ActorNet, s: np.ndarray, a_data: np.ndarray, weights: np.ndarray, std: float):
    """Weighted Gaussian NLL of data actions under N(pi(s), std^2) (constant terms dropped)."""
    mu, tr = actor.forward_trace(s)
    diff = mu - a_data
    n = len(s)
    loss = float(np.mean(weights * 0.5 * (diff * diff).sum(axis=1) / std**2))
    d_mu = weights[:, None] * diff / (std**2 * n)
    return loss, actor.backprop(mu, d_mu, tr)


class NetCQL:
    def __init__(self, state_dim, action_dim, rng: np.random.Generator, gamma=0.99, alpha=5.0,
                 temperature=1.0, hidden=(64, 64), critic_lr=3e-4, actor_lr=1e-4, n_sampled=10,
                 polyak=0.005, debug=False):
        self.critic = DenseNet([state_dim + action_dim, *hidden, 1], "relu", rng=rng)
        self.target = self.critic.copy()
        self.actor = ActorNet(state_dim, action_dim, hidden, rng=rng)
        self.c_opt, self.a_opt = Adam(lr=critic_lr), Adam(lr=actor_lr)
        self.gamma, self.alpha, self.temperature = gamma, alpha, temperature
        self.n_sampled, self.polyak, self.debug = n_sampled, polyak, debug
        self.action_dim = action_dim
        self.rng = rng

    def sample_actions(self, s: np.ndarray) -> np.ndarray:
        n, k = len(s), self.n_sampled
        uni = self.rng.uniform(-1, 1, size=(n, k, self.action_dim))
        mu = self.actor.act(s)
        pol = np.clip(mu[:, None, :] + 0.3 * self.rng.normal(size=(n, k, self.action_dim)), -1, 1)
        return np.concatenate([uni, pol], axis=1)

    def update(self, batch: Batch) -> dict:
        a_next = self.actor.act(batch.s_next)
        q_next = self.target.forward(critic_input(batch.s_next, a_next))[:, 0]
        y = batch.r + self.gamma * np.where(batch.terminal, 0.0, q_next)
        loss, grads, penalty = cql_critic_loss(self.critic, batch, y, self.sample_actions(batch.s),
                                               self.alpha, self.temperature)
        if not np.isfinite(loss):
            raise NumericError("CQL critic loss is not finite")
        if self.debug and np.any(penalty < -1e-12):
            raise NumericError("conservative penalty negative")
        self.c_opt.step(self.critic, grads)
        a_loss, a_grads = actor_loss(self.actor, self.critic, batch.s)
        self.a_opt.step(self.actor.net, a_grads)
        _polyak(self.target, self.critic, self.polyak)
        return {"loss": loss, "penalty": float(np.mean(penalty)), "actor_loss": a_loss}

    def policy(self):
        return self.actor


class NetIQL:
    def __init__(self, state_dim, action_dim, rng: np.random.Generator, gamma=0.99, expectile=0.7,
                 temperature=3.0, hidden=(64, 64), lr=3e-4, actor_std=0.2, polyak=0.005):
        if not 0.0 < expectile < 1.0:
            raise ContractError("expectile must lie in (0, 1)")
        self.qnet = DenseNet([state_dim + action_dim, *hidden, 1], "relu", rng=rng)
        self.q_target = self.qnet.copy()
        self.vnet = DenseNet([state_dim, *hidden, 1], "relu", rng=rng)
        self.actor = ActorNet(state_dim, action_dim, hidden, rng=rng)
        self.q_opt, self.v_opt, self.a_opt = Adam(lr=lr), Adam(lr=lr), Adam(lr=lr)
        self.gamma, self.expectile, self.temperature = gamma, expectile, temperature
        self.actor_std, self.polyak = actor_std, polyak

    def update(self, batch: Batch) -> dict:
        q_data = self.q_target.forward(critic_input(batch.s, batch.a))[:, 0]
        lv, gv = iql_value_loss(self.vnet, q_data, batch.s, self.expectile)
        self.v_opt.step(self.vnet, gv)
        v_next = self.vnet.forward(batch.s_next)[:, 0]
        y = batch.r + self.gamma * np.where(batch.terminal, 0.0, v_next)
        lq, gq = iql_q_loss(self.qnet, batch, y)
        self.q_opt.step(self.qnet, gq)
        adv = q_data - self.vnet.forward(batch.s)[:, 0]
        lp, gp = awr_actor_loss(self.actor, batch.s, batch.a, awr_weights(adv, self.temperature), self.actor_std)
        self.a_opt.step(self.actor.net, gp)
        _polyak(self.q_target, self.qnet, self.polyak)
        if not np.all(np.isfinite([lv, lq, lp])):
            raise NumericError("IQL loss is not finite")
        return {"v_loss": lv, "q_loss": lq, "pi_loss": lp}

    def policy(self):
        return self.actor


def _polyak(target: DenseNet, source: DenseNet, rate: float) -> None:
    target.set_flat((1.0 - rate) * target.get_flat() + rate * source.get_flat())


def cql_update(learner, batch: Batch) -> dict:
    return learner.update(batch)


def iql_update(learner, batch: Batch) -> dict:
    return learner.update(batch)


def check_batch(batch: Batch) -> None:
    check_finite("policy batch reward", batch.r)
