"""Mixture-of-variational-experts layer with sparse top-k dispatch.

A deterministic affine gate produces ``p(m|x)``; only the ``k`` most probable
experts are evaluated per example and their outputs are scaled by their raw
gate probability.  The gate is pulled toward a frozen copy of itself (or the
uniform distribution before the first consolidation) through an output-space
KL term.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ShapeError
from .linalg import log_softmax_rows, softmax_rows, tensor2
from .variational import VarDenseLayer, kl_diag_gauss


@dataclass
class GatingParams:
    weights: np.ndarray
    bias: np.ndarray

    def __post_init__(self):
        self.weights = tensor2(self.weights)
        self.bias = tensor2(self.bias, rows=1, cols=self.weights.shape[1])

    @classmethod
    def zeros(cls, in_dim, n_experts):
        return cls(np.zeros((in_dim, n_experts)), np.zeros((1, n_experts)))

    @classmethod
    def init(cls, in_dim, n_experts, rng, scale=None):
        bound = 1.0 / np.sqrt(in_dim) if scale is None else scale
        return cls(rng.uniform(-bound, bound, (in_dim, n_experts)), np.zeros((1, n_experts)))

    def logits(self, x):
        return x @ self.weights + self.bias

    def copy(self):
        return GatingParams(self.weights.copy(), self.bias.copy())

    def to_dict(self):
        return {
            "shape": list(self.weights.shape),
            "weights": self.weights.ravel().tolist(),
            "bias": self.bias.ravel().tolist(),
        }

    @classmethod
    def from_dict(cls, d):
        shape = tuple(d["shape"])
        return cls(
            np.asarray(d["weights"], dtype=np.float64).reshape(shape),
            np.asarray(d["bias"], dtype=np.float64).reshape(1, shape[1]),
        )


def select_topk(probs, k):
    """Indices of the ``k`` largest entries per row (ties go to the lower index)
    and the matching raw probabilities, most probable first."""
    n_experts = probs.shape[1]
    if not 1 <= k <= n_experts:
        raise ValueError(f"k must be in [1, {n_experts}], got {k}")
    # stable sort on -p keeps the lowest index first among equal probabilities
    idx = np.argsort(-probs, axis=1, kind="stable")[:, :k]
    return idx, np.take_along_axis(probs, idx, axis=1)


@dataclass
class MoveCache:
    x: np.ndarray
    logits: np.ndarray
    probs: np.ndarray
    selected: np.ndarray
    expert_rows: dict = field(default_factory=dict)  # m -> (row indices, expert cache, expert output)


@dataclass
class MoveGrads:
    experts: list  # DenseGrads or None for experts that saw no example
    gating_weights: np.ndarray
    gating_bias: np.ndarray
    x: np.ndarray


class MoveLayer:
    def __init__(self, experts, gating, k=1, gating_prior=None):
        if not experts:
            raise ValueError("a MoVE layer needs at least one expert")
        shapes = {e.posterior.shape for e in experts}
        if len(shapes) != 1:
            raise ShapeError(f"experts disagree on shape: {sorted(shapes)}")
        if gating.weights.shape != (experts[0].in_dim, len(experts)):
            raise ShapeError("gating shape must be (in_dim, n_experts)")
        if not 1 <= k <= len(experts):
            raise ValueError(f"k must be in [1, {len(experts)}], got {k}")
        self.experts = list(experts)
        self.gating = gating
        self.gating_prior = gating_prior  # None means the uniform prior
        self.k = k
        self.expert_evaluations = np.zeros(len(experts), dtype=np.int64)

    @classmethod
    def init(cls, in_dim, out_dim, n_experts, rng, activation="identity", k=1, sigma0=0.05):
        experts = [
            VarDenseLayer.init(in_dim, out_dim, rng.split(1, m), activation, sigma0)
            for m in range(n_experts)
        ]
        gating = GatingParams.init(in_dim, n_experts, rng.split(2))
        return cls(experts, gating, k)

    @property
    def n_experts(self):
        return len(self.experts)

    @property
    def in_dim(self):
        return self.experts[0].in_dim

    @property
    def out_dim(self):
        return self.experts[0].out_dim

    def gate(self, x):
        if x.ndim != 2 or x.shape[1] != self.in_dim:
            raise ShapeError(f"gate expects (batch, {self.in_dim}) input, got {x.shape}")
        return softmax_rows(self.gating.logits(x))

    def prior_log_probs(self, x):
        if self.gating_prior is None:
            return np.full((x.shape[0], self.n_experts), -np.log(self.n_experts))
        return log_softmax_rows(self.gating_prior.logits(x))

    def forward(self, x, rng=None, mode="flipout"):
        """Sparse forward pass; ``rng.split(m)`` feeds expert ``m``."""
        if x.ndim != 2 or x.shape[1] != self.in_dim:
            raise ShapeError(f"layer expects (batch, {self.in_dim}) input, got {x.shape}")
        logits = self.gating.logits(x)
        probs = softmax_rows(logits)
        selected, _ = select_topk(probs, self.k)
        y = np.zeros((x.shape[0], self.out_dim))
        cache = MoveCache(x, logits, probs, selected)
        for m, expert in enumerate(self.experts):
            rows = np.flatnonzero((selected == m).any(axis=1))
            if rows.size == 0:
                continue
            self.expert_evaluations[m] += rows.size
            sub_rng = rng.split(m) if rng is not None else None
            out, ecache = expert.forward(x[rows], sub_rng, mode)
            y[rows] += probs[rows, m : m + 1] * out
            cache.expert_rows[m] = (rows, ecache, out)
        return y, cache

    def backward(self, cache, grad_out, grad_logits_extra=None):
        """Gradients for the gate, the experts that were evaluated, and the input.

        ``grad_logits_extra`` carries dLoss/dlogits from regularizers defined
        on the gate output (KL to the prior gate, entropy terms).
        """
        if grad_out.shape != (cache.x.shape[0], self.out_dim):
            raise ShapeError("upstream gradient does not match the cached forward pass")
        probs = cache.probs
        d_probs = np.zeros_like(probs)
        d_x = np.zeros_like(cache.x)
        expert_grads = [None] * self.n_experts
        for m, (rows, ecache, out) in cache.expert_rows.items():
            g_rows = grad_out[rows]
            d_probs[rows, m] = np.einsum("ij,ij->i", g_rows, out)
            eg = self.experts[m].backward(ecache, g_rows * probs[rows, m : m + 1])
            expert_grads[m] = eg
            d_x[rows] += eg.x
        d_logits = probs * (d_probs - (d_probs * probs).sum(axis=1, keepdims=True))
        if grad_logits_extra is not None:
            d_logits = d_logits + grad_logits_extra
        d_x += d_logits @ self.gating.weights.T
        return MoveGrads(
            expert_grads,
            cache.x.T @ d_logits,
            d_logits.sum(axis=0, keepdims=True),
            d_x,
        )

    def consolidate(self):
        for e in self.experts:
            e.prior = e.posterior.frozen_copy()
        self.gating_prior = self.gating.copy()

    def expert_kls(self):
        return [kl_diag_gauss(e.posterior, e.prior) for e in self.experts]

    def copy(self):
        layer = MoveLayer(
            [e.copy() for e in self.experts],
            self.gating.copy(),
            self.k,
            None if self.gating_prior is None else self.gating_prior.copy(),
        )
        return layer

    def to_dict(self):
        return {
            "k": self.k,
            "experts": [e.to_dict() for e in self.experts],
            "gating": self.gating.to_dict(),
            "gating_prior": None if self.gating_prior is None else self.gating_prior.to_dict(),
        }

    @classmethod
    def from_dict(cls, d):
        prior = d.get("gating_prior")
        return cls(
            [VarDenseLayer.from_dict(e) for e in d["experts"]],
            GatingParams.from_dict(d["gating"]),
            d["k"],
            None if prior is None else GatingParams.from_dict(prior),
        )


def gate(layer, x):
    return layer.gate(x)


def layer_forward(layer, x, rng=None, mode="flipout"):
    return layer.forward(x, rng, mode)


def layer_backward(layer, cache, grad_out, grad_logits_extra=None):
    return layer.backward(cache, grad_out, grad_logits_extra)


def gating_kl(layer, x):
    """Batch mean of KL(p_current(m|x) || p_prior(m|x)) in nats."""
    lp = log_softmax_rows(layer.gating.logits(x))
    lq = layer.prior_log_probs(x)
    return float(np.mean(np.sum(np.exp(lp) * (lp - lq), axis=1)))


def gating_kl_grad(layer, x, logits=None):
    """Gradient of ``gating_kl`` w.r.t. the current gate logits and w.r.t. ``x``
    through the frozen prior gate.  Returns ``(value, d_logits, d_x_prior)``."""
    b = x.shape[0]
    if logits is None:
        logits = layer.gating.logits(x)
    lp = log_softmax_rows(logits)
    p = np.exp(lp)
    lq = layer.prior_log_probs(x)
    per_row = np.sum(p * (lp - lq), axis=1, keepdims=True)
    d_logits = p * ((lp - lq) - per_row) / b
    if layer.gating_prior is None:
        d_x_prior = np.zeros_like(x)
    else:
        q = np.exp(lq)
        d_x_prior = ((q - p) / b) @ layer.gating_prior.weights.T
    return float(per_row.mean()), d_logits, d_x_prior
