"""Dense layers with a mean-field Gaussian weight posterior.

Weights are ``W ~ N(mu, softplus(rho)^2)`` elementwise, biases are plain
parameters.  Each layer carries a frozen prior of the same shape that only
changes when priors are consolidated at a task boundary.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .errors import ShapeError
from .linalg import (
    ACTIVATIONS,
    activate,
    activation_backward,
    check_same_shape,
    inverse_softplus,
    sigmoid,
    softplus,
    tensor2,
)

SIGMA_INIT = 0.05
FORWARD_MODES = ("flipout", "reparam", "mean")


@dataclass
class MeanFieldGaussian:
    mu: np.ndarray
    rho: np.ndarray

    def __post_init__(self):
        self.mu = tensor2(self.mu)
        self.rho = tensor2(self.rho)
        check_same_shape(self.mu, self.rho, "mu and rho")
        self._sigma = None

    @property
    def shape(self):
        return self.mu.shape

    @property
    def sigma(self):
        cached = self.__dict__.get("_sigma")
        if cached is not None:
            return cached
        return softplus(self.rho)

    def frozen_copy(self):
        """Read-only copy whose scale is computed once (used for priors)."""
        mu, rho = self.mu.copy(), self.rho.copy()
        mu.flags.writeable = False
        rho.flags.writeable = False
        out = MeanFieldGaussian(mu, rho)
        sig = softplus(rho)
        sig.flags.writeable = False
        out._sigma = sig
        return out

    @classmethod
    def standard(cls, shape):
        """N(0, 1) in every coordinate, frozen."""
        return cls(np.zeros(shape), np.full(shape, inverse_softplus(1.0))).frozen_copy()

    @classmethod
    def from_sigma(cls, mu, sigma):
        return cls(mu, inverse_softplus(np.broadcast_to(sigma, np.shape(mu))))

    def copy(self):
        return MeanFieldGaussian(self.mu.copy(), self.rho.copy())

    def to_dict(self):
        return {
            "shape": list(self.shape),
            "mu": self.mu.ravel().tolist(),
            "rho": self.rho.ravel().tolist(),
        }

    @classmethod
    def from_dict(cls, d):
        shape = tuple(d["shape"])
        mu = np.asarray(d["mu"], dtype=np.float64)
        rho = np.asarray(d["rho"], dtype=np.float64)
        if mu.size != np.prod(shape) or rho.size != np.prod(shape):
            raise ShapeError(f"payload does not match shape header {shape}")
        return cls(mu.reshape(shape), rho.reshape(shape))

    def to_json(self):
        return json.dumps(self.to_dict())

    @classmethod
    def from_json(cls, text):
        return cls.from_dict(json.loads(text))


def kl_diag_gauss(q, p, q_sigma=None):
    """KL(q || p) in nats, summed over all coordinates."""
    check_same_shape(q.mu, p.mu, "posterior and prior")
    sq = q.sigma if q_sigma is None else q_sigma
    sp = p.sigma
    return float(
        np.sum(np.log(sp / sq) + (sq * sq + (q.mu - p.mu) ** 2) / (2.0 * sp * sp) - 0.5)
    )


def kl_diag_gauss_grad(q, p, q_sigma=None, q_dsigma=None):
    """Gradient of ``kl_diag_gauss(q, p)`` with respect to ``(q.mu, q.rho)``."""
    check_same_shape(q.mu, p.mu, "posterior and prior")
    sq = q.sigma if q_sigma is None else q_sigma
    sp = p.sigma
    var_p = sp * sp
    d_mu = (q.mu - p.mu) / var_p
    # written so that q == p gives an exact zero
    d_sigma = (sq * sq - var_p) / (var_p * sq)
    return d_mu, d_sigma * (sigmoid(q.rho) if q_dsigma is None else q_dsigma)


@dataclass
class DenseCache:
    mode: str
    x: np.ndarray
    pre: np.ndarray
    out: np.ndarray
    eps: np.ndarray | None = None
    sign_in: np.ndarray | None = None
    sign_out: np.ndarray | None = None
    sigma: np.ndarray | None = None


@dataclass
class DenseGrads:
    mu: np.ndarray
    rho: np.ndarray
    bias: np.ndarray
    x: np.ndarray


class VarDenseLayer:
    def __init__(self, posterior, bias, prior=None, activation="identity"):
        if activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {activation!r}")
        self.posterior = posterior
        self.bias = tensor2(bias, rows=1, cols=posterior.shape[1])
        self.prior = prior if prior is not None else MeanFieldGaussian.standard(posterior.shape)
        if self.prior.__dict__.get("_sigma") is None:
            self.prior = self.prior.frozen_copy()
        check_same_shape(self.posterior.mu, self.prior.mu, "posterior and prior")
        self.activation = activation

    @classmethod
    def init(cls, in_dim, out_dim, rng, activation="identity", sigma0=SIGMA_INIT):
        """Fan-in scaled uniform means, constant initial scale, N(0, 1) prior."""
        bound = 1.0 / np.sqrt(in_dim)
        mu = rng.uniform(-bound, bound, (in_dim, out_dim))
        post = MeanFieldGaussian.from_sigma(mu, sigma0)
        return cls(post, np.zeros((1, out_dim)), None, activation)

    @property
    def in_dim(self):
        return self.posterior.shape[0]

    @property
    def out_dim(self):
        return self.posterior.shape[1]

    def _check_input(self, x):
        if x.ndim != 2 or x.shape[1] != self.in_dim:
            raise ShapeError(f"layer expects (batch, {self.in_dim}) input, got {x.shape}")

    def forward(self, x, rng=None, mode="flipout"):
        if mode == "flipout":
            return forward_flipout(self, x, rng)
        if mode == "reparam":
            return forward_reparam(self, x, rng)
        if mode == "mean":
            return forward_mean(self, x)
        raise ValueError(f"unknown forward mode {mode!r}")

    def backward(self, cache, grad_out):
        return backward(self, cache, grad_out)

    def copy(self):
        return VarDenseLayer(self.posterior.copy(), self.bias.copy(), self.prior, self.activation)

    def to_dict(self):
        return {
            "activation": self.activation,
            "posterior": self.posterior.to_dict(),
            "prior": self.prior.to_dict(),
            "bias": self.bias.ravel().tolist(),
        }

    @classmethod
    def from_dict(cls, d):
        post = MeanFieldGaussian.from_dict(d["posterior"])
        prior = MeanFieldGaussian.from_dict(d["prior"])
        bias = np.asarray(d["bias"], dtype=np.float64).reshape(1, -1)
        return cls(post, bias, prior, d["activation"])


def forward_mean(layer, x):
    layer._check_input(x)
    pre = x @ layer.posterior.mu + layer.bias
    return activate(layer.activation, pre), DenseCache("mean", x, pre, None)


def forward_reparam(layer, x, rng):
    """One weight sample ``mu + sigma * eps`` shared by the whole batch."""
    layer._check_input(x)
    eps = rng.normal(*layer.posterior.shape)
    sigma = layer.posterior.sigma
    w = layer.posterior.mu + sigma * eps
    pre = x @ w + layer.bias
    out = activate(layer.activation, pre)
    return out, DenseCache("reparam", x, pre, out, eps=eps, sigma=sigma)


def forward_flipout(layer, x, rng):
    """Shared base perturbation decorrelated per example by random sign flips."""
    layer._check_input(x)
    b = x.shape[0]
    eps = rng.normal(*layer.posterior.shape)
    s_in = rng.signs(b, layer.in_dim)
    s_out = rng.signs(b, layer.out_dim)
    sigma = layer.posterior.sigma
    delta = sigma * eps
    pre = x @ layer.posterior.mu + ((x * s_in) @ delta) * s_out + layer.bias
    out = activate(layer.activation, pre)
    return out, DenseCache("flipout", x, pre, out, eps=eps, sign_in=s_in, sign_out=s_out, sigma=sigma)


def backward(layer, cache, grad_out):
    """Pathwise gradients of the sampled forward pass (noise held fixed)."""
    if grad_out.shape != cache.pre.shape or cache.x.shape[1] != layer.in_dim:
        raise ShapeError("cache does not match this layer or upstream gradient")
    out = cache.out if cache.out is not None else activate(layer.activation, cache.pre)
    g = activation_backward(layer.activation, cache.pre, out, grad_out)
    x = cache.x
    post = layer.posterior
    d_bias = g.sum(axis=0, keepdims=True)
    if cache.mode == "mean":
        return DenseGrads(x.T @ g, np.zeros_like(post.rho), d_bias, g @ post.mu.T)
    dsig_drho = sigmoid(post.rho)
    sigma = cache.sigma if cache.sigma is not None else post.sigma
    if cache.mode == "reparam":
        w = post.mu + sigma * cache.eps
        dw = x.T @ g
        return DenseGrads(dw, dw * cache.eps * dsig_drho, d_bias, g @ w.T)
    # flipout
    delta = sigma * cache.eps
    g_flip = g * cache.sign_out
    d_delta = (x * cache.sign_in).T @ g_flip
    d_x = g @ post.mu.T + (g_flip @ delta.T) * cache.sign_in
    return DenseGrads(x.T @ g, d_delta * cache.eps * dsig_drho, d_bias, d_x)
