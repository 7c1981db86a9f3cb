"""Small tanh MLPs with hand-written backprop, plus Adam and the checkpoint format."""
from __future__ import annotations

import io
import struct
from typing import Sequence

import numpy as np

N_ACTIONS = 9
N_HIDDEN_LAYERS = 5


def _orthogonal(rng: np.random.Generator, n_in: int, n_out: int, gain: float) -> np.ndarray:
    a = rng.standard_normal((max(n_in, n_out), min(n_in, n_out)))
    q, r = np.linalg.qr(a)
    q = q * np.sign(np.diag(r))
    if n_in < n_out:
        q = q.T
    return gain * q[:n_in, :n_out]


class MLP:
    """Feed-forward net: tanh hidden layers, linear output.

    ``params`` alternates weights ``(n_in, n_out)`` and biases ``(n_out,)``.
    """

    def __init__(self, sizes: Sequence[int], rng: np.random.Generator, out_gain: float = 0.0):
        self.sizes = tuple(int(s) for s in sizes)
        self.params: list[np.ndarray] = []
        n = len(self.sizes) - 1
        for k in range(n):
            gain = np.sqrt(2.0) if k < n - 1 else out_gain
            if gain == 0.0:
                W = np.zeros((self.sizes[k], self.sizes[k + 1]))
            else:
                W = _orthogonal(rng, self.sizes[k], self.sizes[k + 1], gain)
            self.params += [W, np.zeros(self.sizes[k + 1])]

    def forward(self, x: np.ndarray) -> tuple[np.ndarray, list[np.ndarray]]:
        acts = [x]
        h = x
        n = len(self.params) // 2
        for k in range(n):
            h = h @ self.params[2 * k] + self.params[2 * k + 1]
            if k < n - 1:
                h = np.tanh(h)
            acts.append(h)
        return h, acts

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return self.forward(x)[0]

    def backward(self, acts: list[np.ndarray], dout: np.ndarray) -> list[np.ndarray]:
        n = len(self.params) // 2
        grads: list[np.ndarray] = [None] * len(self.params)  # type: ignore[list-item]
        d = dout
        for k in reversed(range(n)):
            if k < n - 1:
                d = d * (1.0 - acts[k + 1] ** 2)
            grads[2 * k] = acts[k].T @ d
            grads[2 * k + 1] = d.sum(axis=0)
            if k > 0:
                d = d @ self.params[2 * k].T
        return grads


class AgentNet:
    """Policy (9 logits) and value approximators for one parameter slot."""

    def __init__(self, obs_dim: int, hidden: int, rng: np.random.Generator):
        self.obs_dim = obs_dim
        self.hidden = hidden
        sizes = [obs_dim] + [hidden] * N_HIDDEN_LAYERS
        self.actor = MLP(sizes + [N_ACTIONS], rng, out_gain=0.0)
        self.critic = MLP(sizes + [1], rng, out_gain=1.0)

    @property
    def params(self) -> list[np.ndarray]:
        return self.actor.params + self.critic.params

    def set_params(self, values: Sequence[np.ndarray]) -> None:
        na = len(self.actor.params)
        for dst, src in zip(self.params, values):
            if dst.shape != src.shape:
                raise ValueError(f"parameter shape {src.shape} does not match {dst.shape}")
        self.actor.params = [np.array(v, dtype=float) for v in values[:na]]
        self.critic.params = [np.array(v, dtype=float) for v in values[na:]]

    def copy_params(self) -> list[np.ndarray]:
        return [p.copy() for p in self.params]

    def check_obs(self, obs: np.ndarray) -> None:
        if obs.shape[-1] != self.obs_dim:
            raise ValueError(f"observation length {obs.shape[-1]} != network input {self.obs_dim}")


def log_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


class Adam:
    def __init__(self, params: Sequence[np.ndarray], lr: float = 3e-4, betas=(0.9, 0.999), eps: float = 1e-8):
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def step(self, params: Sequence[np.ndarray], grads: Sequence[np.ndarray]) -> None:
        self.t += 1
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def state_arrays(self) -> list[np.ndarray]:
        return [np.array([float(self.t)])] + self.m + self.v

    def load_state_arrays(self, arrays: Sequence[np.ndarray]) -> None:
        n = len(self.m)
        self.t = int(arrays[0][0])
        self.m = [np.array(a, dtype=float) for a in arrays[1 : 1 + n]]
        self.v = [np.array(a, dtype=float) for a in arrays[1 + n : 1 + 2 * n]]


def clip_grad_norm(grads: Sequence[np.ndarray], max_norm: float) -> float:
    total = float(np.sqrt(sum(float(np.sum(g * g)) for g in grads)))
    if max_norm > 0 and total > max_norm:
        scale = max_norm / (total + 1e-12)
        for g in grads:
            g *= scale
    return total


# Checkpoint format: magic, u32 version, u32 array count, then per array
# u32 ndim + u32 dims, then every array's values as little-endian float64
# in row-major order.
MAGIC = b"UAVMESH\x00"
VERSION = 1


def dump_arrays(arrays: Sequence[np.ndarray]) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<II", VERSION, len(arrays)))
    for a in arrays:
        buf.write(struct.pack("<I", a.ndim))
        buf.write(struct.pack(f"<{a.ndim}I", *a.shape))
    for a in arrays:
        buf.write(np.ascontiguousarray(a, dtype="<f8").tobytes())
    return buf.getvalue()


def load_arrays(data: bytes) -> list[np.ndarray]:
    if data[: len(MAGIC)] != MAGIC:
        raise ValueError("not a parameter checkpoint (bad magic)")
    off = len(MAGIC)
    version, count = struct.unpack_from("<II", data, off)
    off += 8
    if version != VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    shapes = []
    for _ in range(count):
        (ndim,) = struct.unpack_from("<I", data, off)
        off += 4
        shapes.append(struct.unpack_from(f"<{ndim}I", data, off))
        off += 4 * ndim
    out = []
    for shape in shapes:
        n = int(np.prod(shape)) if shape else 1
        out.append(np.frombuffer(data, dtype="<f8", count=n, offset=off).reshape(shape).astype(float))
        off += 8 * n
    if off != len(data):
        raise ValueError("trailing bytes in checkpoint")
    return out
