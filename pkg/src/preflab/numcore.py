"""Dense feed-forward networks with exact gradients, plus Adam and the two loss kernels.

Every learner in the package (both ensembles plus the continuous critics
and actors) is a :class:`DenseNet`.  Forward passes accept
a single vector or a batch of row vectors; :meth:`DenseNet.forward_trace`
returns an activation trace that :func:`backprop` consumes.  A trace is bound
to the parameter version it was produced with, so a trace taken before an
optimizer step cannot be used afterwards.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

LOG_STD_MIN = -5.0
LOG_STD_MAX = 2.0
LOG_2PI = math.log(2.0 * math.pi)

CHECKPOINT_MAGIC = b"PFLNET01"
CHECKPOINT_VERSION = 1

ACTIVATIONS = ("relu", "tanh")


class ContractError(ValueError):
    """A caller broke an operation's precondition."""


class NumericError(FloatingPointError):
    """A NaN or infinity reached a place where it must never be propagated."""


class StaleTraceError(ContractError):
    """An activation trace no longer matches the network parameters."""


def check_finite(name: str, *arrays) -> None:
    for arr in arrays:
        if not np.all(np.isfinite(arr)):
            raise NumericError(f"non-finite value in {name}")


@dataclass
class Trace:
    inputs: list[np.ndarray]
    preacts: list[np.ndarray]
    version: int
    net_id: int
    squeeze: bool


class DenseNet:
    """Fixed-topology MLP: hidden layers use ``activation``, output is linear.

    Weights are stored as ``(fan_in, fan_out)`` matrices so a batch ``X`` of
    shape ``(n, fan_in)`` maps to ``X @ W + b``.
    """

    def __init__(
        self,
        layer_sizes: Sequence[int],
        activation: str | Sequence[str] = "relu",
        rng: np.random.Generator | None = None,
        zero: bool = False,
    ):
        sizes = [int(s) for s in layer_sizes]
        if len(sizes) < 2 or any(s <= 0 for s in sizes):
            raise ContractError(f"layer_sizes must be >= 2 positive ints, got {sizes}")
        n_hidden = len(sizes) - 2
        if isinstance(activation, str):
            acts = [activation] * n_hidden
        else:
            acts = list(activation)
        if len(acts) != n_hidden or any(a not in ACTIVATIONS for a in acts):
            raise ContractError(f"need {n_hidden} activations from {ACTIVATIONS}, got {acts}")
        self.layer_sizes = sizes
        self.activations = acts
        self.weights: list[np.ndarray] = []
        self.biases: list[np.ndarray] = []
        if rng is None and not zero:
            rng = np.random.default_rng(0)
        for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
            if zero:
                w = np.zeros((fan_in, fan_out))
            else:
                limit = math.sqrt(6.0 / (fan_in + fan_out))
                w = rng.uniform(-limit, limit, size=(fan_in, fan_out))
            self.weights.append(w.astype(np.float64))
            self.biases.append(np.zeros(fan_out, dtype=np.float64))
        self.version = 0

    @property
    def input_dim(self) -> int:
        return self.layer_sizes[0]

    @property
    def output_dim(self) -> int:
        return self.layer_sizes[-1]

    @property
    def num_params(self) -> int:
        return sum(w.size + b.size for w, b in zip(self.weights, self.biases))

    def params(self) -> list[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend([w, b])
        return out

    def get_flat(self) -> np.ndarray:
        return np.concatenate([p.ravel() for p in self.params()])

    def set_flat(self, flat: np.ndarray) -> None:
        flat = np.asarray(flat, dtype=np.float64)
        if flat.size != self.num_params:
            raise ContractError(f"expected {self.num_params} parameters, got {flat.size}")
        i = 0
        for p in self.params():
            p[...] = flat[i:i + p.size].reshape(p.shape)
            i += p.size
        self.version += 1

    def copy(self) -> "DenseNet":
        other = DenseNet(self.layer_sizes, self.activations, zero=True)
        other.set_flat(self.get_flat())
        return other

    def _as_batch(self, x) -> tuple[np.ndarray, bool]:
        x = np.asarray(x, dtype=np.float64)
        squeeze = x.ndim == 1
        if squeeze:
            x = x[None, :]
        if x.ndim != 2 or x.shape[1] != self.input_dim:
            got = x.shape[-1] if x.ndim else 0
            raise ContractError(f"input length mismatch: expected {self.input_dim}, got {got}")
        return x, squeeze

    def forward(self, x) -> np.ndarray:
        return self.forward_trace(x)[0]

    def forward_trace(self, x) -> tuple[np.ndarray, Trace]:
        h, squeeze = self._as_batch(x)
        inputs, preacts = [], []
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            inputs.append(h)
            z = h @ w + b
            preacts.append(z)
            if i < last:
                h = np.maximum(z, 0.0) if self.activations[i] == "relu" else np.tanh(z)
            else:
                h = z
        trace = Trace(inputs, preacts, self.version, id(self), squeeze)
        return (h[0] if squeeze else h), trace

    def backprop(self, grad_out, trace: Trace, input_grad: bool = False):
        """Gradients of a scalar loss given dL/d(output).

        Returns a list ``[dW0, db0, dW1, db1, ...]`` aligned with :meth:`params`;
        with ``input_grad=True`` returns ``(grads, dL/dx)``.
        """
        if trace.net_id != id(self) or trace.version != self.version:
            raise StaleTraceError(
                f"trace from parameter version {trace.version}, network is at {self.version}"
            )
        g = np.asarray(grad_out, dtype=np.float64)
        if g.ndim == 1:
            g = g[None, :]
        if g.shape != trace.preacts[-1].shape:
            raise ContractError(
                f"output gradient shape {g.shape} != output shape {trace.preacts[-1].shape}"
            )
        grads: list[np.ndarray] = [None] * (2 * len(self.weights))  # type: ignore[list-item]
        for i in range(len(self.weights) - 1, -1, -1):
            if i < len(self.weights) - 1:
                z = trace.preacts[i]
                if self.activations[i] == "relu":
                    g = g * (z > 0.0)
                else:
                    t = np.tanh(z)
                    g = g * (1.0 - t * t)
            grads[2 * i] = trace.inputs[i].T @ g
            grads[2 * i + 1] = g.sum(axis=0)
            if i > 0 or input_grad:
                g = g @ self.weights[i].T
        if input_grad:
            return grads, (g[0] if trace.squeeze else g)
        return grads

    # -- checkpoints -------------------------------------------------------

    def header(self, **extra) -> dict:
        return {
            "format": "preflab.densenet",
            "version": CHECKPOINT_VERSION,
            "layer_sizes": self.layer_sizes,
            "activations": self.activations,
            "num_params": self.num_params,
            **extra,
        }

    def to_bytes(self, **extra) -> bytes:
        head = json.dumps(self.header(**extra), sort_keys=True).encode()
        body = self.get_flat().astype("<f8").tobytes()
        return CHECKPOINT_MAGIC + struct.pack("<I", len(head)) + head + body

    @classmethod
    def from_bytes(cls, blob: bytes) -> tuple["DenseNet", dict]:
        if blob[:8] != CHECKPOINT_MAGIC:
            raise ContractError("not a preflab network checkpoint")
        (n,) = struct.unpack("<I", blob[8:12])
        head = json.loads(blob[12:12 + n])
        if head.get("version") != CHECKPOINT_VERSION:
            raise ContractError(f"checkpoint version {head.get('version')} unsupported")
        body = blob[12 + n:]
        if len(body) != 8 * head["num_params"]:
            raise ContractError("checkpoint body truncated")
        net = cls(head["layer_sizes"], head["activations"], zero=True)
        net.set_flat(np.frombuffer(body, dtype="<f8"))
        return net, head

    def save(self, path: str | Path, **extra) -> None:
        Path(path).write_bytes(self.to_bytes(**extra))

    @classmethod
    def load(cls, path: str | Path) -> tuple["DenseNet", dict]:
        return cls.from_bytes(Path(path).read_bytes())


def forward(net: DenseNet, x) -> np.ndarray:
    return net.forward(x)


def backprop(net: DenseNet, loss_grad_at_output, cached_forward: Trace) -> list[np.ndarray]:
    return net.backprop(loss_grad_at_output, cached_forward)


@dataclass
class Adam:
    """Adam optimizer bound to one network's parameter list."""

    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)

    def step(self, net: DenseNet, grads: list[np.ndarray]) -> None:
        params = net.params()
        if len(grads) != len(params):
            raise ContractError("gradient list does not match parameter list")
        if not self.m:
            self.m = [np.zeros_like(p) for p in params]
            self.v = [np.zeros_like(p) for p in params]
        self.step_count += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.step_count
        c2 = 1.0 - b2 ** self.step_count
        for p, g, m, v in zip(params, grads, self.m, self.v):
            if g.shape != p.shape:
                raise ContractError(f"gradient shape {g.shape} != parameter shape {p.shape}")
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
        net.version += 1


# -- loss kernels ------------------------------------------------------------


def soft_clamp_log_std(raw, lo: float = LOG_STD_MIN, hi: float = LOG_STD_MAX):
    """Smoothly squash ``raw`` into ``[lo, hi]``; returns (value, d value / d raw)."""
    s = sigmoid(raw)
    return lo + (hi - lo) * s, (hi - lo) * s * (1.0 - s)


def gaussian_nll_terms(mean, log_std, target):
    """Per-element diagonal Gaussian NLL and its partials w.r.t. mean and log_std."""
    mean = np.asarray(mean, dtype=np.float64)
    log_std = np.asarray(log_std, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if not (mean.shape == log_std.shape == target.shape):
        raise ContractError(
            f"shape mismatch: mean {mean.shape}, log_std {log_std.shape}, target {target.shape}"
        )
    check_finite("gaussian_nll input", mean, log_std, target)
    if np.any(log_std < LOG_STD_MIN) or np.any(log_std > LOG_STD_MAX):
        raise ContractError(f"log_std outside [{LOG_STD_MIN}, {LOG_STD_MAX}]")
    inv_var = np.exp(-2.0 * log_std)
    diff = mean - target
    terms = 0.5 * diff * diff * inv_var + log_std + 0.5 * LOG_2PI
    d_mean = diff * inv_var
    d_log_std = 1.0 - diff * diff * inv_var
    return terms, d_mean, d_log_std


def gaussian_nll(mean, log_std, target) -> float:
    """Negative log density of ``target`` under N(mean, exp(log_std)^2), summed over dims."""
    terms, _, _ = gaussian_nll_terms(mean, log_std, target)
    return float(terms.sum())


def bce_terms(logit_gap, label):
    """Stable BCE of ``sigmoid(logit_gap)`` against ``label``; returns (loss, d loss / d gap)."""
    gap = np.asarray(logit_gap, dtype=np.float64)
    y = np.asarray(label, dtype=np.float64)
    check_finite("logit gap", gap)
    # -y log s(g) - (1-y) log(1-s(g)) = softplus(g) - y g
    loss = np.logaddexp(0.0, gap) - y * gap
    d_gap = 0.5 * (1.0 + np.tanh(0.5 * gap)) - y
    return loss, d_gap


def bce_from_logit_gap(logit_gap: float, label: int) -> float:
    if label not in (0, 1):
        raise ContractError(f"label must be 0 or 1, got {label}")
    loss, _ = bce_terms(logit_gap, label)
    return float(loss)


def sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    return 0.5 * (1.0 + np.tanh(0.5 * x))
