"""Dense float64 matrices, seeded random streams, activations and Adam.

Every 2-D value in the package is a C-contiguous ``np.ndarray`` of dtype
float64 (rows x cols, row-major).  The helpers here validate shapes and keep
the numerics in one place.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ShapeError

LEAKY_SLOPE = 0.2


def tensor2(data, rows=None, cols=None):
    """Coerce ``data`` into a 2-D float64 array, optionally checking its shape."""
    arr = np.ascontiguousarray(data, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr.reshape(1, -1)
    if arr.ndim != 2:
        raise ShapeError(f"expected a 2-D array, got {arr.ndim}-D")
    if rows is not None and arr.shape[0] != rows:
        raise ShapeError(f"expected {rows} rows, got {arr.shape[0]}")
    if cols is not None and arr.shape[1] != cols:
        raise ShapeError(f"expected {cols} cols, got {arr.shape[1]}")
    return arr


def check_same_shape(a, b, what="operands"):
    if a.shape != b.shape:
        raise ShapeError(f"{what} differ in shape: {a.shape} vs {b.shape}")


def matmul(a, b):
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError("matmul expects 2-D operands")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"cannot multiply {a.shape} by {b.shape}")
    return a @ b


def softmax_rows(logits):
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def log_softmax_rows(logits):
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def softplus(x):
    out = np.exp(-np.abs(x))
    if out.ndim:
        np.log1p(out, out=out)
    else:
        out = np.log1p(out)
    return out + np.maximum(x, 0.0)


def inverse_softplus(y):
    """Return ``x`` with ``softplus(x) == y`` for ``y > 0``."""
    y = np.asarray(y, dtype=np.float64)
    return y + np.log(-np.expm1(-y))


def sigmoid(x):
    z = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + z), z / (1.0 + z))


def leaky_relu(x, slope=LEAKY_SLOPE):
    return np.where(x > 0, x, slope * x)


ACTIVATIONS = ("leaky-relu", "identity", "sigmoid", "softmax")


def activate(name, pre):
    if name == "leaky-relu":
        return leaky_relu(pre)
    if name == "identity":
        return pre
    if name == "sigmoid":
        return sigmoid(pre)
    if name == "softmax":
        return softmax_rows(pre)
    raise ValueError(f"unknown activation {name!r}")


def activation_backward(name, pre, out, grad_out):
    """Map dL/d(out) to dL/d(pre) for the named activation."""
    if name == "leaky-relu":
        return np.where(pre > 0, grad_out, LEAKY_SLOPE * grad_out)
    if name == "identity":
        return grad_out
    if name == "sigmoid":
        return grad_out * out * (1.0 - out)
    if name == "softmax":
        return out * (grad_out - (grad_out * out).sum(axis=1, keepdims=True))
    raise ValueError(f"unknown activation {name!r}")


class RngState:
    """Counter-based random stream that can be split into independent children.

    A stream is identified by ``(seed, path)``.  ``split(*keys)`` extends the
    path, so child streams never depend on how much of the parent (or of a
    sibling) has been consumed.  Draws within one stream are sequential.
    """

    def __init__(self, seed, path=()):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self.path = tuple(int(k) for k in path)
        self._gen = None

    def split(self, *keys):
        return RngState(self.seed, self.path + tuple(keys))

    @property
    def generator(self):
        if self._gen is None:
            seq = np.random.SeedSequence(entropy=self.seed, spawn_key=self.path)
            self._gen = np.random.Generator(np.random.Philox(seq))
        return self._gen

    def philox_key(self):
        """The 128-bit Philox key this stream is keyed with."""
        return self.generator.bit_generator.state["state"]["key"].copy()

    def normal(self, rows, cols):
        return self.generator.standard_normal((rows, cols))

    def signs(self, rows, cols):
        return self.generator.integers(0, 2, size=(rows, cols)).astype(np.float64) * 2.0 - 1.0

    def uniform(self, low, high, size):
        return self.generator.uniform(low, high, size)

    def permutation(self, n):
        return self.generator.permutation(n)

    def __repr__(self):
        return f"RngState(seed={self.seed}, path={self.path})"


def sample_std_normal(rng, rows, cols):
    if rows <= 0 or cols <= 0:
        raise ShapeError(f"sample shape must be positive, got ({rows}, {cols})")
    return rng.normal(rows, cols)


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0
    lr: float = 6e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, param, **hyper):
        return cls(np.zeros_like(param), np.zeros_like(param), **hyper)


def adam_step(param, grad, state):
    """Return the updated parameter; advances ``state`` in place."""
    check_same_shape(param, grad, "param and grad")
    check_same_shape(param, state.m, "param and Adam buffer")
    state.step += 1
    state.m *= state.beta1
    state.m += (1.0 - state.beta1) * grad
    state.v *= state.beta2
    state.v += (1.0 - state.beta2) * grad * grad
    m_hat = state.m / (1.0 - state.beta1**state.step)
    v_hat = state.v / (1.0 - state.beta2**state.step)
    return param - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)


@dataclass
class LazyAdam:
    """Adam over a named set of parameter blocks.

    Blocks whose gradient is ``None`` in a step are skipped entirely: their
    moments and step counters stay put, so unused experts do not drift.
    """

    lr: float = 6e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    states: dict = field(default_factory=dict)

    def update(self, params, grads):
        for name, g in grads.items():
            if g is None:
                continue
            p = params[name]
            st = self.states.get(name)
            if st is None:
                st = AdamState.zeros_like(p, lr=self.lr, beta1=self.beta1, beta2=self.beta2, eps=self.eps)
                self.states[name] = st
            p[...] = adam_step(p, g, st)
