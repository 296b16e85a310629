"""A stack of MoVE layers with a single shared output head, and the
regularized training objective over it."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .diversity import DiversityConfig, dpp_objective_and_grad, entropy_loss, entropy_terms
from .errors import ShapeError
from .linalg import log_softmax_rows, softmax_rows
from .move import MoveLayer, gating_kl_grad
from .variational import MeanFieldGaussian, kl_diag_gauss, kl_diag_gauss_grad

LN2 = math.log(2.0)
UTILITIES = ("neg-cross-entropy", "neg-bce")


class MoveNetwork:
    """Ordered MoVE layers; the last one is the (single) output head.

    Hidden layers use leaky ReLU and inverted dropout during training.
    There are no task-indexed parameters anywhere in the network.
    """

    def __init__(self, layers, dropout=0.0):
        for a, b in zip(layers, layers[1:]):
            if a.out_dim != b.in_dim:
                raise ShapeError(f"layer widths do not chain: {a.out_dim} -> {b.in_dim}")
        self.layers = list(layers)
        self.dropout = dropout

    @classmethod
    def build(cls, in_dim, hidden, out_dim, n_experts, rng, k=1, dropout=0.0,
              output_activation="identity", sigma0=0.05):
        dims = [in_dim, *hidden, out_dim]
        layers = []
        for l, (a, b) in enumerate(zip(dims, dims[1:])):
            act = "leaky-relu" if l < len(dims) - 2 else output_activation
            layers.append(MoveLayer.init(a, b, n_experts, rng.split(l), act, k, sigma0))
        return cls(layers, dropout)

    @property
    def in_dim(self):
        return self.layers[0].in_dim

    @property
    def out_dim(self):
        return self.layers[-1].out_dim

    def forward(self, x, rng=None, mode="flipout", train=False):
        caches, masks = [], []
        h = x
        last = len(self.layers) - 1
        for l, layer in enumerate(self.layers):
            h, cache = layer.forward(h, None if rng is None else rng.split(l), mode)
            caches.append(cache)
            mask = None
            if train and self.dropout > 0 and l < last:
                keep = 1.0 - self.dropout
                mask = (rng.split(1000 + l).generator.random(h.shape) < keep) / keep
                h = h * mask
            masks.append(mask)
        return h, caches, masks

    def predict(self, x, batch_size=2048):
        """Deterministic output (posterior means, argmax gating, no dropout)."""
        outs = [self.forward(x[i : i + batch_size], mode="mean")[0] for i in range(0, x.shape[0], batch_size)]
        return np.concatenate(outs) if outs else np.zeros((0, self.out_dim))

    def gate_probs(self, x, batch_size=2048):
        """Deterministic per-layer gate probabilities for ``x``."""
        per_layer = [[] for _ in self.layers]
        for i in range(0, x.shape[0], batch_size):
            _, caches, _ = self.forward(x[i : i + batch_size], mode="mean")
            for l, c in enumerate(caches):
                per_layer[l].append(c.probs)
        return [np.concatenate(p) for p in per_layer]

    def consolidate(self):
        for layer in self.layers:
            layer.consolidate()

    def parameters(self):
        """Name -> array for every trainable array (updated in place)."""
        params = {}
        for l, layer in enumerate(self.layers):
            params[f"L{l}.gate.w"] = layer.gating.weights
            params[f"L{l}.gate.b"] = layer.gating.bias
            for m, e in enumerate(layer.experts):
                params[f"L{l}.E{m}.mu"] = e.posterior.mu
                params[f"L{l}.E{m}.rho"] = e.posterior.rho
                params[f"L{l}.E{m}.b"] = e.bias
        return params

    def copy(self):
        return MoveNetwork([l.copy() for l in self.layers], self.dropout)

    def to_dict(self):
        return {"dropout": self.dropout, "layers": [l.to_dict() for l in self.layers]}

    @classmethod
    def from_dict(cls, d):
        return cls([MoveLayer.from_dict(l) for l in d["layers"]], d["dropout"])


@dataclass
class Objective:
    """Weights of every term in the training loss."""

    beta1: float = 0.0
    beta2: float = 0.0
    kl_scale: float = 1.0
    diversity: DiversityConfig = field(default_factory=lambda: DiversityConfig(dpp_weight=0.0, entropy_weight=0.0))
    utility: str = "neg-cross-entropy"
    kl_experts: str = "selected"  # "all": every expert, routed or not


@dataclass
class Diagnostics:
    utility: float
    gating_kl: float  # nats, summed over layers
    expert_kl: float  # nats, summed over layers and experts (unscaled)
    lndet: float  # summed over layers with >= 2 experts
    min_w2: float
    h_cond: float  # nats, averaged over layers
    h_marg: float
    mutual_info: float
    selections: list  # per layer: count of examples routed to each expert

    def bits(self):
        return {
            "utility": self.utility,
            "gating_kl_bits": self.gating_kl / LN2,
            "expert_kl_bits": self.expert_kl / LN2,
            "lndet": self.lndet,
            "min_w2": self.min_w2,
            "h_cond_bits": self.h_cond / LN2,
            "h_marg_bits": self.h_marg / LN2,
            "mi_bits": self.mutual_info / LN2,
        }


@dataclass
class LossResult:
    loss: float
    grads: dict
    diagnostics: Diagnostics
    output: np.ndarray


def utility_and_grad(kind, out, target, weights):
    """Weighted utility ``sum_i w_i U_i`` and dU/d(out)."""
    if kind == "neg-cross-entropy":
        logp = log_softmax_rows(out)
        rows = np.arange(out.shape[0])
        u = float(np.sum(weights * logp[rows, target]))
        d = -softmax_rows(out)
        d[rows, target] += 1.0
        return u, d * weights[:, None]
    if kind == "neg-bce":
        o = np.clip(out, 1e-12, 1.0 - 1e-12)
        ll = target * np.log(o) + (1.0 - target) * np.log1p(-o)
        u = float(np.sum(weights * ll.sum(axis=1)))
        d = target / o - (1.0 - target) / (1.0 - o)
        return u, d * weights[:, None]
    raise ValueError(f"unknown utility {kind!r}")


def regularize(net, caches, obj, grads, d_logits_extra, d_x_extra):
    """Add gating, expert and diversity regularizers; return loss part and diagnostics."""
    div = obj.diversity
    loss = 0.0
    gkl_total = ekl_total = lndet_total = 0.0
    min_w2 = float("inf")
    hc, hm = [], []
    for l, (layer, cache) in enumerate(zip(net.layers, caches)):
        value, d_logits, d_x_prior = gating_kl_grad(layer, cache.x, cache.logits)
        gkl_total += value
        if obj.beta1 > 0:
            loss += obj.beta1 * value
            d_logits_extra[l] = d_logits_extra[l] + obj.beta1 * d_logits
            d_x_extra[l] = d_x_extra[l] + obj.beta1 * d_x_prior
        terms = entropy_terms(logits=cache.logits)
        hc.append(terms.h_cond)
        hm.append(terms.h_marg)
        if div.entropy_weight > 0:
            e_loss, e_grad = entropy_loss(terms, div.entropy_weight, div.entropy_sign)
            loss += e_loss
            d_logits_extra[l] = d_logits_extra[l] + e_grad
        # one scale evaluation per expert per step, shared by every term below
        posts = [_snapshot(e.posterior) for e in layer.experts]
        for m, (e, post) in enumerate(zip(layer.experts, posts)):
            kl = kl_diag_gauss(post, e.prior)
            ekl_total += kl
            w = obj.beta2 * obj.kl_scale
            if obj.kl_experts == "selected" and m not in cache.expert_rows:
                w = 0.0
            if w > 0 and kl > 0:
                loss += w * kl
                g_mu, g_rho = kl_diag_gauss_grad(post, e.prior)
                _accumulate(grads, f"L{l}.E{m}.mu", w * g_mu)
                _accumulate(grads, f"L{l}.E{m}.rho", w * g_rho)
        if layer.n_experts >= 2:
            dpp = dpp_objective_and_grad(posts, div)
            lndet_total += dpp.value
            min_w2 = min(min_w2, dpp.min_pairwise_w2)
            if div.dpp_weight > 0:
                loss -= div.dpp_weight * dpp.value
                for m in range(layer.n_experts):
                    _accumulate(grads, f"L{l}.E{m}.mu", -div.dpp_weight * dpp.grad_mu[m])
                    _accumulate(grads, f"L{l}.E{m}.rho", -div.dpp_weight * dpp.grad_rho[m])
    h_cond = float(np.mean(hc))
    h_marg = float(np.mean(hm))
    mi = float(np.mean(np.asarray(hm) - np.asarray(hc)))
    diag = Diagnostics(0.0, gkl_total, ekl_total, lndet_total,
                       min_w2 if np.isfinite(min_w2) else float("nan"), h_cond, h_marg, mi, [])
    return loss, diag


def _snapshot(post):
    """View of ``post`` sharing its arrays, with the scale computed once."""
    view = MeanFieldGaussian(post.mu, post.rho)
    view._sigma = post.sigma
    return view


def _accumulate(grads, name, g):
    cur = grads.get(name)
    grads[name] = g if cur is None else cur + g


def total_loss(net, x, target, obj, rng=None, mode="flipout", weights=None, train=True):
    """Loss ``-U + regularizers`` on one batch and its exact gradient.

    ``weights`` are per-example utility weights (default: uniform batch
    mean).  Gradients are keyed like ``MoveNetwork.parameters()``; experts
    that neither saw an example nor carry a regularizer gradient are absent.
    """
    b = x.shape[0]
    if b == 0:
        raise ShapeError("empty batch")
    if weights is None:
        weights = np.full(b, 1.0 / b)
    out, caches, masks = net.forward(x, rng, mode, train=train)
    u, d_out = utility_and_grad(obj.utility, out, target, weights)
    grads = {}
    n_layers = len(net.layers)
    d_logits_extra = [0.0] * n_layers
    d_x_extra = [0.0] * n_layers
    reg_loss, diag = regularize(net, caches, obj, grads, d_logits_extra, d_x_extra)
    diag.utility = u
    diag.selections = [np.bincount(c.selected[:, 0], minlength=len(layer.experts)).tolist()
                       for c, layer in zip(caches, net.layers)]

    g = -d_out  # dLoss/d(out) with loss = -U
    for l in range(n_layers - 1, -1, -1):
        layer = net.layers[l]
        if masks[l] is not None:
            g = g * masks[l]
        extra = d_logits_extra[l]
        lg = layer.backward(caches[l], g, None if np.isscalar(extra) else extra)
        _accumulate(grads, f"L{l}.gate.w", lg.gating_weights)
        _accumulate(grads, f"L{l}.gate.b", lg.gating_bias)
        for m, eg in enumerate(lg.experts):
            if eg is None:
                continue
            _accumulate(grads, f"L{l}.E{m}.mu", eg.mu)
            _accumulate(grads, f"L{l}.E{m}.rho", eg.rho)
            _accumulate(grads, f"L{l}.E{m}.b", eg.bias)
        g = lg.x + d_x_extra[l]
    return LossResult(-u + reg_loss, grads, diag, out)
