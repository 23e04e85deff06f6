"""Discrete attention windows, action history, and the Q-value network."""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from . import tensor_core as tc

DEFAULT_HISTORY_DECAY = 0.7
POLICIES = ("random", "scanning", "greedy", "epsilon-greedy")


@dataclass(frozen=True)
class Window:
    a: Fraction  # top, relative
    b: Fraction  # left, relative
    h: Fraction
    w: Fraction


@dataclass(frozen=True)
class ActionSpace:
    """Each frame axis is cut into M slices; a window spans N adjacent slices."""

    M: int
    N: int

    def __post_init__(self):
        if self.M < 1 or not 1 <= self.N <= self.M:
            raise tc.RejectedInputError(f"invalid action space M={self.M}, N={self.N}")

    @property
    def per_axis(self) -> int:
        return self.M - self.N + 1

    @property
    def num_actions(self) -> int:
        return self.per_axis ** 2

    @property
    def rel_size(self) -> Fraction:
        return Fraction(self.N, self.M)

    def window(self, action: int) -> Window:
        if not 0 <= action < self.num_actions:
            raise tc.RejectedInputError(f"action {action} outside [0, {self.num_actions})")
        i, j = divmod(action, self.per_axis)
        s = self.rel_size
        return Window(Fraction(i, self.M), Fraction(j, self.M), s, s)

    def is_full_frame(self) -> bool:
        return self.M == self.N


def enumerate_actions(space: ActionSpace) -> list[Window]:
    """All windows in row-major corner order."""
    return [space.window(i) for i in range(space.num_actions)]


@dataclass
class ActionHistory:
    values: np.ndarray
    alpha: float = DEFAULT_HISTORY_DECAY

    @classmethod
    def zeros(cls, num_actions: int, alpha: float = DEFAULT_HISTORY_DECAY):
        if not 0.0 <= alpha < 1.0:
            raise tc.RejectedInputError("history decay must be in [0, 1)")
        return cls(np.zeros(num_actions, tc.DTYPE), alpha)


def update_history(prev: ActionHistory, action: int) -> ActionHistory:
    """F_t = min(alpha * F_{t-1} + onehot(A_t), 1)."""
    n = prev.values.shape[0]
    if not 0 <= action < n:
        raise tc.RejectedInputError(f"action {action} outside [0, {n})")
    values = prev.alpha * prev.values.astype(np.float64)
    values[action] += 1.0
    return ActionHistory(np.minimum(values, 1.0).astype(prev.values.dtype), prev.alpha)


# -- Q network -----------------------------------------------------------------------

class QNet:
    """Two 3x3 stride-2 SAME convs with ReLU, then one dense layer over the
    flattened features concatenated with the action history."""

    PARAMS = ("c1.w", "c1.b", "c2.w", "c2.b", "fc.w", "fc.b")

    def __init__(self, memory_shape, num_actions, widths=(8, 16), seed=0, dtype=tc.DTYPE, params=None,
                 input_scale=1.0):
        self.memory_shape = tuple(memory_shape)
        # fixed (not trained) gain on the memory so conv features land on the
        # same scale as the [0, 1] history entries
        self.input_scale = float(input_scale)
        self.num_actions = num_actions
        self.widths = tuple(widths)
        h, w, c = self.memory_shape
        h1, w1 = -(-h // 2), -(-w // 2)
        h2, w2 = -(-h1 // 2), -(-w1 // 2)
        self.feature_size = h2 * w2 * self.widths[1]
        if params is not None:
            self.params = {k: np.array(params[k], dtype=dtype) for k in self.PARAMS}
            return
        rng = np.random.default_rng(seed)
        c1, c2 = self.widths
        fan_in = self.feature_size + num_actions
        self.params = {
            "c1.w": rng.normal(0, np.sqrt(2 / (9 * c)), (3, 3, c, c1)),
            "c1.b": np.zeros(c1),
            "c2.w": rng.normal(0, np.sqrt(2 / (9 * c1)), (3, 3, c1, c2)),
            "c2.b": np.zeros(c2),
            # small output layer: initial Q-values near zero, on the reward scale
            "fc.w": rng.normal(0, 0.01, (fan_in, num_actions)),
            "fc.b": np.zeros(num_actions),
        }
        self.params = {k: v.astype(dtype) for k, v in self.params.items()}

    def copy(self, dtype=None) -> "QNet":
        dtype = dtype or self.params["fc.w"].dtype
        return QNet(self.memory_shape, self.num_actions, self.widths, dtype=dtype, params=self.params,
                    input_scale=self.input_scale)

    def calibrate_scale(self, memories, target=1.0):
        """Set the input gain so the scaled memory has std ``target``."""
        std = float(np.std(np.asarray(memories, np.float64)))
        # rounded to float32 so a checkpoint round trip reproduces it exactly
        self.input_scale = float(np.float32(target / std)) if std > 0 else 1.0
        return self.input_scale

    def num_parameters(self) -> int:
        return sum(v.size for v in self.params.values())

    def _conv(self, name):
        return tc.ConvWeights(self.params[name + ".w"], self.params[name + ".b"])

    def forward(self, memory, history):
        """Batched forward: memory (B, H, W, C), history (B, A) -> (q, cache)."""
        if memory.shape[1:] != self.memory_shape:
            raise tc.RejectedInputError(f"memory shape {memory.shape[1:]} != {self.memory_shape}")
        if history.shape[1:] != (self.num_actions,):
            raise tc.RejectedInputError("history length mismatch")
        memory = memory * memory.dtype.type(self.input_scale)
        z1 = tc.conv2d_same(memory, self._conv("c1"), 2)
        a1 = np.maximum(z1, 0)
        z2 = tc.conv2d_same(a1, self._conv("c2"), 2)
        a2 = np.maximum(z2, 0)
        feat = np.concatenate([a2.reshape(len(a2), -1), history.astype(a2.dtype)], axis=1)
        q = feat @ self.params["fc.w"] + self.params["fc.b"]
        return q, (memory, z1, a1, z2, feat)

    def backward(self, cache, grad_q) -> dict:
        memory, z1, a1, z2, feat = cache
        grads = {"fc.w": feat.T @ grad_q, "fc.b": grad_q.sum(axis=0)}
        gfeat = grad_q @ self.params["fc.w"].T
        ga2 = gfeat[:, :self.feature_size].reshape(z2.shape)
        gz2 = ga2 * (z2 > 0)
        ga1, grads["c2.w"], grads["c2.b"] = tc.conv2d_same_backward(a1, self._conv("c2"), 2, gz2)
        gz1 = ga1 * (z1 > 0)
        _, grads["c1.w"], grads["c1.b"] = tc.conv2d_same_backward(memory, self._conv("c1"), 2, gz1)
        return {k: grads[k].astype(self.params[k].dtype) for k in self.PARAMS}

    def flops(self) -> int:
        h, w, c = self.memory_shape
        h1, w1 = -(-h // 2), -(-w // 2)
        h2, w2 = -(-h1 // 2), -(-w1 // 2)
        c1, c2 = self.widths
        fan_in = self.feature_size + self.num_actions
        return 2 * (h1 * w1 * c1 * 9 * c + h2 * w2 * c2 * 9 * c1 + self.num_actions * fan_in)


def q_values(tapped_memory, history: ActionHistory, net: QNet) -> np.ndarray:
    q, _ = net.forward(tapped_memory[None], history.values[None])
    return q[0]


@dataclass(frozen=True)
class Policy:
    kind: str
    epsilon: float = 0.0

    def __post_init__(self):
        if self.kind not in POLICIES:
            raise tc.RejectedInputError(f"unknown policy {self.kind!r}")
        if not 0.0 <= self.epsilon <= 1.0:
            raise tc.RejectedInputError("epsilon must be in [0, 1]")

    @property
    def needs_q(self) -> bool:
        return self.kind in ("greedy", "epsilon-greedy")


def greedy(q) -> int:
    # np.argmax returns the first maximum: lowest-index tie-break
    return int(np.argmax(q))


def select_action(policy: Policy, q, t: int, rng: np.random.Generator, num_actions: int) -> int:
    if policy.kind == "scanning":
        return t % num_actions
    if policy.kind == "random":
        return int(rng.integers(num_actions))
    if q is None:
        raise tc.RejectedInputError(f"{policy.kind} policy needs q-values")
    if len(q) != num_actions:
        raise tc.RejectedInputError("q-value length mismatch")
    if policy.kind == "epsilon-greedy" and rng.random() < policy.epsilon:
        return int(rng.integers(num_actions))
    return greedy(q)
