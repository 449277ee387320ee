"""Dense layers with hand-written backward passes, and Adam.

Matrices are float64 numpy arrays. Every op has a ``*_forward`` / ``*_backward``
pair; backward functions take whatever the forward returned plus the upstream
gradient.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

BLOB_MAGIC = b"AMW1"


class NonFiniteError(FloatingPointError):
    pass


def check_finite(a: np.ndarray, what: str = "array") -> np.ndarray:
    if not np.all(np.isfinite(a)):
        raise NonFiniteError(f"non-finite values in {what}")
    return a


def glorot_uniform(rng: np.random.Generator, fan_out: int, fan_in: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_out, fan_in))


@dataclass
class LinearLayer:
    weight: np.ndarray  # (out, in)
    bias: np.ndarray  # (out,)
    grad_weight: np.ndarray = field(init=False, repr=False)
    grad_bias: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        self.weight = np.asarray(self.weight, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64).reshape(-1)
        if self.weight.ndim != 2 or self.bias.shape != (self.weight.shape[0],):
            raise ValueError(f"bias shape {self.bias.shape} does not match weight {self.weight.shape}")
        self.zero_grad()

    @classmethod
    def init(cls, in_dim: int, out_dim: int, rng: np.random.Generator) -> "LinearLayer":
        return cls(glorot_uniform(rng, out_dim, in_dim), np.zeros(out_dim))

    @property
    def in_dim(self) -> int:
        return self.weight.shape[1]

    @property
    def out_dim(self) -> int:
        return self.weight.shape[0]

    def zero_grad(self):
        self.grad_weight = np.zeros_like(self.weight)
        self.grad_bias = np.zeros_like(self.bias)

    def params(self) -> list[np.ndarray]:
        return [self.weight, self.bias]

    def grads(self) -> list[np.ndarray]:
        return [self.grad_weight, self.grad_bias]

    def forward(self, x):
        return linear_forward(self, x)

    def backward(self, x, grad_output):
        return linear_backward(self, x, grad_output)


def linear_forward(layer: LinearLayer, x: np.ndarray) -> np.ndarray:
    x = np.atleast_2d(x)
    if x.shape[1] != layer.in_dim:
        raise ValueError(f"input has {x.shape[1]} columns, layer expects {layer.in_dim}")
    return x @ layer.weight.T + layer.bias


def linear_backward(layer: LinearLayer, x: np.ndarray, grad_output: np.ndarray) -> np.ndarray:
    """Accumulate parameter gradients into ``layer``; return d/d input."""
    x = np.atleast_2d(x)
    grad_output = np.atleast_2d(grad_output)
    if grad_output.shape != (x.shape[0], layer.out_dim) or x.shape[1] != layer.in_dim:
        raise ValueError(
            f"backward shapes inconsistent: input {x.shape}, grad {grad_output.shape}, "
            f"layer {layer.weight.shape}"
        )
    layer.grad_weight += grad_output.T @ x
    layer.grad_bias += grad_output.sum(axis=0)
    return grad_output @ layer.weight


def tanh_forward(x):
    return np.tanh(x)


def tanh_backward(y, grad_y):
    return grad_y * (1.0 - y * y)


def sigmoid_forward(x):
    # tanh form never overflows, unlike 1 / (1 + exp(-x))
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(x, dtype=np.float64)))


def sigmoid_backward(y, grad_y):
    return grad_y * y * (1.0 - y)


def relu_forward(x):
    return np.maximum(x, 0.0)


def relu_backward(x, grad_y):
    return grad_y * (x > 0)


def hadamard_forward(a, b):
    if np.shape(a) != np.shape(b):
        raise ValueError(f"hadamard shape mismatch: {np.shape(a)} vs {np.shape(b)}")
    return a * b


def hadamard_backward(a, b, grad_y):
    return grad_y * b, grad_y * a


def softmax_forward(logits):
    """Softmax over all entries of an (M,) or (M, 1) array."""
    logits = np.asarray(logits, dtype=np.float64)
    if logits.size == 0:
        raise ValueError("softmax over an empty bag")
    e = np.exp(logits - logits.max())
    return e / e.sum()


def softmax_backward(weights, grad_weights):
    return weights * (grad_weights - np.sum(weights * grad_weights))


def segment_softmax(logits: np.ndarray, offsets: np.ndarray) -> np.ndarray:
    """Softmax within each segment ``logits[offsets[b]:offsets[b+1]]``."""
    starts = offsets[:-1]
    seg_max = np.maximum.reduceat(logits, starts)
    lengths = np.diff(offsets)
    e = np.exp(logits - np.repeat(seg_max, lengths))
    return e / np.repeat(np.add.reduceat(e, starts), lengths)


def segment_softmax_backward(weights, grad_weights, offsets):
    lengths = np.diff(offsets)
    dot = np.add.reduceat(weights * grad_weights, offsets[:-1])
    return weights * (grad_weights - np.repeat(dot, lengths))


@dataclass
class AdamState:
    learning_rate: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step_count: int = 0
    first_moment: list[np.ndarray] = field(default_factory=list, repr=False)
    second_moment: list[np.ndarray] = field(default_factory=list, repr=False)


def adam_step(state: AdamState, params: list[np.ndarray], grads: list[np.ndarray]) -> None:
    """Bias-corrected Adam update, applied to ``params`` in place."""
    if not state.first_moment:
        state.first_moment = [np.zeros_like(p) for p in params]
        state.second_moment = [np.zeros_like(p) for p in params]
    if len(params) != len(grads) or len(params) != len(state.first_moment):
        raise ValueError("parameter, gradient and moment lists differ in length")
    state.step_count += 1
    t = state.step_count
    b1, b2 = state.beta1, state.beta2
    corr1 = 1.0 - b1 ** t
    corr2 = 1.0 - b2 ** t
    for p, g, m, v in zip(params, grads, state.first_moment, state.second_moment):
        if p.shape != g.shape:
            raise ValueError(f"gradient shape {g.shape} does not match parameter {p.shape}")
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p -= state.learning_rate * (m / corr1) / (np.sqrt(v / corr2) + state.epsilon)


def dump_tensors(tensors: list[np.ndarray]) -> bytes:
    """``AMW1`` then, per tensor, u32 rows, u32 cols, f64 row-major (all little-endian).

    Vectors are written as a single row.
    """
    chunks = [BLOB_MAGIC]
    for t in tensors:
        m = np.atleast_2d(np.asarray(t, dtype="<f8"))
        chunks.append(struct.pack("<II", *m.shape))
        chunks.append(np.ascontiguousarray(m).tobytes())
    return b"".join(chunks)


def load_tensors(blob: bytes) -> list[np.ndarray]:
    if blob[:4] != BLOB_MAGIC:
        raise ValueError("not an AMW1 parameter blob")
    out = []
    pos = 4
    while pos < len(blob):
        if pos + 8 > len(blob):
            raise ValueError("truncated AMW1 blob header")
        rows, cols = struct.unpack_from("<II", blob, pos)
        pos += 8
        nbytes = rows * cols * 8
        if pos + nbytes > len(blob):
            raise ValueError("truncated AMW1 blob payload")
        out.append(np.frombuffer(blob, dtype="<f8", count=rows * cols, offset=pos)
                   .reshape(rows, cols).astype(np.float64))
        pos += nbytes
    return out
