"""Offline transition datasets plus the segments and preference pairs cut from them.

Rewards collected from the environment are kept in :attr:`OfflineDataset.r_true`
for diagnostics and labelers only.  Learners receive a :class:`LearnerView`,
which carries no reward field at all.

On disk every dataset is a JSONL file (a header line, then one record per
line) with a ``<file>.sha256`` sidecar holding the hex digest of the file
bytes.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

from .envs import Env, EnvSpec, RandomPolicy, TabularEnv, expert_policy, make_env
from .numcore import ContractError, sigmoid
from .policy import EpsilonGreedy

FORMAT_VERSION = 1
BEHAVIORS = ("medium", "random", "expert-mix")
LABEL_KINDS = ("ground_truth", "noisy_bt", "pseudo", "none")
MEDIUM_EPSILON = 0.3
DEFAULT_OFFLINE_SIZE = 20_000


class DatasetFormatError(ContractError):
    pass


class VersionMismatchError(DatasetFormatError):
    pass


class TruncatedFileError(DatasetFormatError):
    pass


class ChecksumError(DatasetFormatError):
    pass


@dataclass(frozen=True)
class TransitionRecord:
    s: np.ndarray
    a: object
    r_true: float
    s_next: np.ndarray
    done: bool


@dataclass(frozen=True)
class LearnerView:
    """Reward-free view of an offline dataset, the only form learners see."""

    s: np.ndarray
    a: np.ndarray
    s_next: np.ndarray
    done: np.ndarray
    terminal: np.ndarray

    def __len__(self) -> int:
        return len(self.s)


@dataclass(frozen=True)
class OfflineDataset:
    env_name: str
    behavior: str
    seed: int
    s: np.ndarray
    a: np.ndarray
    r_true: np.ndarray
    s_next: np.ndarray
    done: np.ndarray
    terminal: np.ndarray

    def __post_init__(self):
        for arr in (self.s, self.a, self.r_true, self.s_next, self.done, self.terminal):
            arr.setflags(write=False)

    def __len__(self) -> int:
        return len(self.s)

    @property
    def discrete(self) -> bool:
        return self.a.ndim == 1

    def records(self) -> Iterator[TransitionRecord]:
        for i in range(len(self)):
            a = int(self.a[i]) if self.discrete else self.a[i]
            yield TransitionRecord(self.s[i], a, float(self.r_true[i]), self.s_next[i], bool(self.done[i]))

    def learner_view(self) -> LearnerView:
        return LearnerView(self.s, self.a, self.s_next, self.done, self.terminal)

    def episode_ids(self) -> np.ndarray:
        ends = np.concatenate([[0], np.cumsum(self.done[:-1].astype(np.int64))]) if len(self) else np.zeros(0, np.int64)
        return ends

    def max_run_length(self) -> int:
        if not len(self):
            return 0
        return int(np.bincount(self.episode_ids()).max())

    def manifest_entry(self, L: int | None = None) -> dict:
        entry = {"env": self.env_name, "behavior": self.behavior, "seed": self.seed, "size": len(self)}
        if L is not None:
            entry["L"] = L
        return entry


def collect_offline(env: Env, behavior: str, size: int, seed: int) -> OfflineDataset:
    """Roll the named behavior policy until exactly ``size`` transitions are stored."""
    if behavior not in BEHAVIORS:
        raise ContractError(f"unknown behavior {behavior!r}; choose from {BEHAVIORS}")
    policy = behavior_policy(env, behavior)
    if behavior == "expert-mix":
        expert, random = policy
        pick = lambda rng: expert if rng.random() < 0.5 else random  # noqa: E731
    else:
        pick = lambda rng: policy  # noqa: E731
    return collect_with_policy(env, pick, size, seed, behavior)


def collect_with_policy(env: Env, pick, size: int, seed: int, behavior: str) -> OfflineDataset:
    """Collect ``size`` transitions; ``pick(rng)`` chooses the policy for each new episode."""
    if size < 1:
        raise ContractError(f"size must be >= 1, got {size}")
    env_seed, pol_seed = np.random.SeedSequence(seed).generate_state(2)
    env.seed(int(env_seed))
    rng = np.random.default_rng(int(pol_seed))
    S, A, R, S2, D = [], [], [], [], []
    while len(S) < size:
        pol = pick(rng)
        s, done = env.reset(), False
        while not done and len(S) < size:
            a = pol.act(s, rng)
            s2, r, done = env.step(a)
            S.append(s)
            A.append(a)
            R.append(r)
            S2.append(s2)
            D.append(done)
            s = s2
    s_next = np.array(S2, dtype=np.float64)
    return OfflineDataset(
        env_name=env.spec.name,
        behavior=behavior,
        seed=seed,
        s=np.array(S, dtype=np.float64),
        a=np.array(A, dtype=np.int64 if env.spec.discrete else np.float64),
        r_true=np.array(R, dtype=np.float64),
        s_next=s_next,
        done=np.array(D, dtype=bool),
        terminal=np.asarray(env.is_terminal(s_next), dtype=bool),
    )


def behavior_policy(env: Env, behavior: str):
    random = RandomPolicy(env.spec)
    if behavior == "random":
        return random
    expert = expert_policy(env)
    if behavior == "medium":
        return _EpsilonRandom(expert, random, MEDIUM_EPSILON)
    return (expert, random)


class _EpsilonRandom:
    """With probability ``epsilon`` act uniformly at random, otherwise follow ``base``."""

    def __init__(self, base, random: RandomPolicy, epsilon: float):
        self.base, self.random, self.epsilon = base, random, epsilon

    def act(self, state, rng):
        if rng.random() < self.epsilon:
            return self.random.act(state, rng)
        return self.base.act(state, rng)


# -- segments and pairs ------------------------------------------------------


@dataclass
class Segment:
    states: np.ndarray  # (L, state_dim)
    actions: np.ndarray  # (L,) or (L, action_dim)
    origin: str = "offline"
    hidden_true_return: float | None = None
    start: int | None = None

    def __len__(self) -> int:
        return len(self.states)


@dataclass
class PreferencePair:
    seg0: Segment
    seg1: Segment
    y: int | None = None
    label_kind: str = "none"

    def __post_init__(self):
        if self.label_kind not in LABEL_KINDS:
            raise ContractError(f"label_kind must be one of {LABEL_KINDS}")
        if (self.label_kind == "none") != (self.y is None):
            raise ContractError("label_kind 'none' iff y is absent")
        if self.y is not None and self.y not in (0, 1):
            raise ContractError("y must be 0 or 1")

    def swapped(self) -> "PreferencePair":
        y = None if self.y is None else 1 - self.y
        return PreferencePair(self.seg1, self.seg0, y, self.label_kind)


@dataclass
class PairBatch:
    """Struct-of-arrays form of a list of preference pairs.

    ``y`` holds -1 for unlabeled pairs.  ``true_y`` is the hidden
    ground-truth label (diagnostics only, -1 when unknown).
    """

    s0: np.ndarray
    a0: np.ndarray
    s1: np.ndarray
    a1: np.ndarray
    ret0: np.ndarray
    ret1: np.ndarray
    y: np.ndarray
    label_kind: str = "none"
    origin: str = "offline"
    true_y: np.ndarray | None = None
    start0: np.ndarray | None = None
    start1: np.ndarray | None = None

    def __len__(self) -> int:
        return len(self.y)

    @property
    def L(self) -> int:
        return self.s0.shape[1]

    def subset(self, idx) -> "PairBatch":
        idx = np.asarray(idx)
        pick = lambda x: None if x is None else x[idx]  # noqa: E731
        return PairBatch(
            self.s0[idx], self.a0[idx], self.s1[idx], self.a1[idx], self.ret0[idx], self.ret1[idx],
            self.y[idx], self.label_kind, self.origin, pick(self.true_y), pick(self.start0), pick(self.start1),
        )

    def with_labels(self, y: np.ndarray, kind: str) -> "PairBatch":
        out = self.subset(np.arange(len(self)))
        out.y = np.asarray(y, dtype=np.int64)
        out.label_kind = kind
        return out

    @staticmethod
    def concat(batches: list["PairBatch"]) -> "PairBatch":
        first = batches[0]
        cat = lambda name: np.concatenate([getattr(b, name) for b in batches])  # noqa: E731
        opt = lambda name: None if any(getattr(b, name) is None for b in batches) else cat(name)  # noqa: E731
        return PairBatch(
            cat("s0"), cat("a0"), cat("s1"), cat("a1"), cat("ret0"), cat("ret1"), cat("y"),
            first.label_kind, first.origin, opt("true_y"), opt("start0"), opt("start1"),
        )

    def to_pairs(self) -> list[PreferencePair]:
        out = []
        for i in range(len(self)):
            st0 = None if self.start0 is None else int(self.start0[i])
            st1 = None if self.start1 is None else int(self.start1[i])
            seg0 = Segment(self.s0[i], self.a0[i], self.origin, float(self.ret0[i]), st0)
            seg1 = Segment(self.s1[i], self.a1[i], self.origin, float(self.ret1[i]), st1)
            y = None if self.y[i] < 0 else int(self.y[i])
            out.append(PreferencePair(seg0, seg1, y, self.label_kind if y is not None else "none"))
        return out

    @classmethod
    def from_pairs(cls, pairs: list[PreferencePair]) -> "PairBatch":
        if not pairs:
            raise ContractError("cannot build a batch from zero pairs")
        L = len(pairs[0].seg0)
        for p in pairs:
            if len(p.seg0) != L or len(p.seg1) != L:
                raise ContractError("all segments in a batch must share one length")
        kinds = {p.label_kind for p in pairs}
        ret = lambda seg: np.nan if seg.hidden_true_return is None else seg.hidden_true_return  # noqa: E731
        return cls(
            s0=np.stack([p.seg0.states for p in pairs]),
            a0=np.stack([p.seg0.actions for p in pairs]),
            s1=np.stack([p.seg1.states for p in pairs]),
            a1=np.stack([p.seg1.actions for p in pairs]),
            ret0=np.array([ret(p.seg0) for p in pairs]),
            ret1=np.array([ret(p.seg1) for p in pairs]),
            y=np.array([-1 if p.y is None else p.y for p in pairs], dtype=np.int64),
            label_kind=kinds.pop() if len(kinds) == 1 else "mixed",
            origin=pairs[0].seg0.origin,
        )


def valid_window_starts(dataset: OfflineDataset, L: int) -> np.ndarray:
    """Start indices of length-L windows lying inside a single episode."""
    n = len(dataset)
    if L < 1 or n < L:
        return np.zeros(0, dtype=np.int64)
    ep = dataset.episode_ids()
    starts = np.arange(n - L + 1)
    return starts[ep[starts] == ep[starts + L - 1]]


def sample_segment_batch(dataset: OfflineDataset, L: int, count: int, rng: np.random.Generator) -> PairBatch:
    starts = valid_window_starts(dataset, L)
    if len(starts) == 0:
        raise ContractError(
            f"no done-free window of length L={L}; longest episode run is {dataset.max_run_length()}"
        )
    # one (count, 2) draw keeps pair k identical for every count > k
    draws = starts[rng.integers(len(starts), size=(count, 2))]
    st0, st1 = draws[:, 0], draws[:, 1]
    offs = np.arange(L)
    i0, i1 = st0[:, None] + offs, st1[:, None] + offs
    return PairBatch(
        s0=dataset.s[i0], a0=dataset.a[i0], s1=dataset.s[i1], a1=dataset.a[i1],
        ret0=dataset.r_true[i0].sum(axis=1), ret1=dataset.r_true[i1].sum(axis=1),
        y=np.full(count, -1, dtype=np.int64), label_kind="none", origin="offline",
        start0=st0, start1=st1,
    )


def sample_segment_pairs(dataset: OfflineDataset, L: int, count: int, seed: int) -> list[PreferencePair]:
    if count == 0:
        return []
    return sample_segment_batch(dataset, L, count, np.random.default_rng(seed)).to_pairs()


def label_arrays(ret0, ret1, mode: str, rng: np.random.Generator, beta: float = 1.0) -> np.ndarray:
    ret0, ret1 = np.asarray(ret0, dtype=np.float64), np.asarray(ret1, dtype=np.float64)
    if np.any(np.isnan(ret0)) or np.any(np.isnan(ret1)):
        raise ContractError("both segments must carry hidden_true_return")
    if mode == "ground_truth":
        coin = rng.integers(2, size=ret0.shape)
        return np.where(ret1 > ret0, 1, np.where(ret1 < ret0, 0, coin)).astype(np.int64)
    if mode == "noisy_bt":
        p1 = sigmoid(beta * (ret1 - ret0))
        return (rng.random(ret0.shape) < p1).astype(np.int64)
    raise ContractError(f"unknown labeler mode {mode!r}")


def label_batch(batch: PairBatch, mode: str, rng: np.random.Generator, beta: float = 1.0) -> PairBatch:
    return batch.with_labels(label_arrays(batch.ret0, batch.ret1, mode, rng, beta), mode)


def label_pair(pair: PreferencePair, mode: str, seed: int, beta: float = 1.0) -> PreferencePair:
    r0, r1 = pair.seg0.hidden_true_return, pair.seg1.hidden_true_return
    if r0 is None or r1 is None:
        raise ContractError("both segments must carry hidden_true_return")
    y = int(label_arrays([r0], [r1], mode, np.random.default_rng(seed), beta)[0])
    return PreferencePair(pair.seg0, pair.seg1, y, mode)


def segment_overlap_count(batch: PairBatch) -> int:
    """Pairs whose two offline windows share at least one transition."""
    if batch.start0 is None:
        return 0
    return int(np.sum(np.abs(batch.start0 - batch.start1) < batch.L))


def build_labeled_set(dataset: OfflineDataset, L: int, n_labeled: int, seed: int,
                      mode: str = "ground_truth", beta: float = 1.0) -> PairBatch:
    """D_l: ``n_labeled`` offline pairs labeled by the synthetic labeler.

    Pairs are drawn as a prefix of one seeded stream, so the sets for
    increasing ``n_labeled`` under one seed are nested.
    """
    rng = np.random.default_rng(seed)
    pool = sample_segment_batch(dataset, L, n_labeled, rng)
    labeled = label_batch(pool, mode, np.random.default_rng([seed, 1]), beta)
    labeled.true_y = label_arrays(pool.ret0, pool.ret1, "ground_truth", np.random.default_rng([seed, 1]))
    return labeled


# -- files ---------------------------------------------------------------------


def _digest(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def _write_with_sidecar(path: Path, lines: list[str]) -> None:
    data = ("\n".join(lines) + "\n").encode()
    path.write_bytes(data)
    Path(str(path) + ".sha256").write_text(_digest(data) + "\n")


def _read_verified(path: Path, fmt: str) -> tuple[dict, list[str]]:
    data = path.read_bytes()
    sidecar = Path(str(path) + ".sha256")
    if not sidecar.exists():
        raise ChecksumError(f"missing checksum sidecar for {path}")
    if sidecar.read_text().strip() != _digest(data):
        raise ChecksumError(f"checksum mismatch for {path}")
    lines = data.decode().splitlines()
    if not lines:
        raise TruncatedFileError(f"{path} is empty")
    head = json.loads(lines[0])
    if head.get("format") != fmt:
        raise DatasetFormatError(f"{path} is not a {fmt} file")
    if head.get("version") != FORMAT_VERSION:
        raise VersionMismatchError(f"{path} has version {head.get('version')}, expected {FORMAT_VERSION}")
    body = lines[1:]
    if len(body) != head["count"]:
        raise TruncatedFileError(f"{path} declares {head['count']} records, found {len(body)}")
    return head, body


def _floats(x) -> list[float]:
    return [float(v) for v in np.ravel(x)]


def save_transitions(dataset: OfflineDataset, path: str | Path) -> None:
    head = {
        "format": "preflab.transitions", "version": FORMAT_VERSION, "count": len(dataset),
        "env": dataset.env_name, "behavior": dataset.behavior, "seed": dataset.seed,
        "state_dim": int(dataset.s.shape[1]) if dataset.s.ndim == 2 else 0,
        "action_dim": 0 if dataset.a.ndim == 1 else int(dataset.a.shape[1]),
    }
    lines = [json.dumps(head, sort_keys=True)]
    for rec in dataset.records():
        a = rec.a if isinstance(rec.a, int) else _floats(rec.a)
        lines.append(json.dumps(
            {"s": _floats(rec.s), "a": a, "r_true": rec.r_true, "s_next": _floats(rec.s_next), "done": rec.done},
            sort_keys=True,
        ))
    _write_with_sidecar(Path(path), lines)


def load_transitions(path: str | Path) -> OfflineDataset:
    head, body = _read_verified(Path(path), "preflab.transitions")
    recs = [json.loads(line) for line in body]
    d, da = head["state_dim"], head["action_dim"]
    s = np.array([r["s"] for r in recs], dtype=np.float64).reshape(-1, d)
    s_next = np.array([r["s_next"] for r in recs], dtype=np.float64).reshape(-1, d)
    if da == 0:
        a = np.array([r["a"] for r in recs], dtype=np.int64)
    else:
        a = np.array([r["a"] for r in recs], dtype=np.float64).reshape(-1, da)
    terminal = np.zeros(len(recs), dtype=bool)
    if recs:
        terminal = np.asarray(make_env(head["env"]).is_terminal(s_next), dtype=bool)
    return OfflineDataset(
        head["env"], head["behavior"], head["seed"], s, a,
        np.array([r["r_true"] for r in recs], dtype=np.float64), s_next,
        np.array([r["done"] for r in recs], dtype=bool), terminal,
    )


def _segment_json(states, actions, origin, ret) -> dict:
    acts = [int(x) for x in actions] if np.asarray(actions).ndim == 1 else [_floats(x) for x in actions]
    return {
        "steps": [{"state": _floats(s), "action": a} for s, a in zip(states, acts)],
        "origin": origin,
        "hidden_true_return": None if ret is None or np.isnan(ret) else float(ret),
    }


def save_pairs(batch: PairBatch | list[PreferencePair], path: str | Path) -> None:
    pairs = batch.to_pairs() if isinstance(batch, PairBatch) else list(batch)
    head = {"format": "preflab.prefpairs", "version": FORMAT_VERSION, "count": len(pairs)}
    lines = [json.dumps(head, sort_keys=True)]
    for p in pairs:
        lines.append(json.dumps({
            "seg0": _segment_json(p.seg0.states, p.seg0.actions, p.seg0.origin, p.seg0.hidden_true_return),
            "seg1": _segment_json(p.seg1.states, p.seg1.actions, p.seg1.origin, p.seg1.hidden_true_return),
            "y": p.y,
            "label_kind": p.label_kind,
        }, sort_keys=True))
    _write_with_sidecar(Path(path), lines)


def _segment_from_json(d: dict) -> Segment:
    states = np.array([st["state"] for st in d["steps"]], dtype=np.float64)
    raw = [st["action"] for st in d["steps"]]
    actions = np.array(raw, dtype=np.int64 if raw and isinstance(raw[0], int) else np.float64)
    return Segment(states, actions, d["origin"], d["hidden_true_return"])


def load_pairs(path: str | Path) -> list[PreferencePair]:
    _, body = _read_verified(Path(path), "preflab.prefpairs")
    out = []
    for line in body:
        d = json.loads(line)
        out.append(PreferencePair(_segment_from_json(d["seg0"]), _segment_from_json(d["seg1"]), d["y"], d["label_kind"]))
    return out


def empty_dataset(spec: EnvSpec, behavior: str = "random", seed: int = 0) -> OfflineDataset:
    d = spec.state_dim
    a = np.zeros(0, dtype=np.int64) if spec.discrete else np.zeros((0, spec.n_actions))
    z = np.zeros((0, d))
    return OfflineDataset(spec.name, behavior, seed, z, a, np.zeros(0), z.copy(), np.zeros(0, bool), np.zeros(0, bool))


def state_indices(env: Env, states) -> np.ndarray:
    if not isinstance(env, TabularEnv):
        raise ContractError("state indices exist only for tabular envs")
    return env.state_index(states)


__all__ = [name for name in dir() if not name.startswith("_")]
