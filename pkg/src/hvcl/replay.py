"""Generative replay with a variational autoencoder built from MoVE layers.

The VAE learns the input distribution task by task (its layer priors are
consolidated exactly like the classifier's) and produces pseudo-data that is
labeled by the current classifier and mixed half-and-half into later tasks.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .diversity import DiversityConfig
from .errors import ShapeError
from .linalg import LazyAdam, RngState, softmax_rows
from .move import MoveLayer
from .network import Diagnostics, _accumulate, regularize, utility_and_grad
from .trainer import TrainConfig, beta_schedule, objective_for

LN2 = math.log(2.0)

# layer order inside MoveVae.layers
ENC0, ENC1, Z_MEAN, Z_LOGVAR, DEC0, DEC1, DEC_OUT = range(7)


def vae_config(**overrides):
    """Training settings of the replay generator: one expert per layer, small
    gating weight, strong expert weight, no dropout, Bernoulli likelihood."""
    base = TrainConfig(beta1=0.002, beta2=0.75, diversity=DiversityConfig(dpp_weight=0.01, entropy_weight=0.0),
                       n_experts=1, k=1, dropout=0.0, utility="neg-bce")
    return replace(base, **overrides)


class MoveVae:
    def __init__(self, layers):
        if len(layers) != 7:
            raise ValueError("a MoveVae has exactly seven layers")
        if layers[Z_MEAN].in_dim != layers[Z_LOGVAR].in_dim or layers[Z_MEAN].out_dim != layers[Z_LOGVAR].out_dim:
            raise ShapeError("latent mean and log-variance layers must match")
        self.layers = list(layers)

    @classmethod
    def build(cls, in_dim=784, hidden=(256, 256), latent_dim=64, n_experts=1, rng=None, k=1, sigma0=0.05):
        rng = rng if rng is not None else RngState(0)
        h0, h1 = hidden
        shapes = [
            (in_dim, h0, "leaky-relu"),
            (h0, h1, "leaky-relu"),
            (h1, latent_dim, "identity"),
            (h1, latent_dim, "identity"),
            (latent_dim, h1, "leaky-relu"),
            (h1, h0, "leaky-relu"),
            (h0, in_dim, "sigmoid"),
        ]
        layers = [MoveLayer.init(a, b, n_experts, rng.split(l), act, k, sigma0)
                  for l, (a, b, act) in enumerate(shapes)]
        return cls(layers)

    @property
    def in_dim(self):
        return self.layers[ENC0].in_dim

    @property
    def latent_dim(self):
        return self.layers[Z_MEAN].out_dim

    def encode(self, x, rng=None, mode="mean"):
        caches = {}
        h = x
        for l in (ENC0, ENC1):
            h, caches[l] = self.layers[l].forward(h, None if rng is None else rng.split(l), mode)
        z_mean, caches[Z_MEAN] = self.layers[Z_MEAN].forward(h, None if rng is None else rng.split(Z_MEAN), mode)
        z_logvar, caches[Z_LOGVAR] = self.layers[Z_LOGVAR].forward(h, None if rng is None else rng.split(Z_LOGVAR), mode)
        return z_mean, z_logvar, caches

    def decode(self, z, rng=None, mode="mean"):
        caches = {}
        h = z
        for l in (DEC0, DEC1, DEC_OUT):
            h, caches[l] = self.layers[l].forward(h, None if rng is None else rng.split(l), mode)
        return h, caches

    def consolidate(self):
        for layer in self.layers:
            layer.consolidate()

    def parameters(self):
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
        return MoveVae([l.copy() for l in self.layers])

    def to_dict(self):
        return {"layers": [l.to_dict() for l in self.layers]}

    @classmethod
    def from_dict(cls, d):
        return cls([MoveLayer.from_dict(l) for l in d["layers"]])


def latent_kl(z_mean, z_logvar):
    """Per-example KL(N(mean, exp(logvar)) || N(0, I)) in nats."""
    return 0.5 * np.sum(np.exp(z_logvar) + z_mean * z_mean - 1.0 - z_logvar, axis=1)


@dataclass
class VaeLossResult:
    loss: float
    grads: dict
    reconstruction: float  # weighted BCE, nats
    latent_kl: float  # weighted, nats
    diagnostics: Diagnostics


def vae_loss(vae, x, obj, rng=None, mode="flipout", weights=None):
    """Weighted BCE reconstruction + latent KL + MoVE regularizers, and the
    exact gradient for one reparameterized latent sample."""
    b = x.shape[0]
    if b == 0:
        raise ShapeError("empty batch")
    if weights is None:
        weights = np.full(b, 1.0 / b)
    rng = rng if rng is not None else RngState(0)
    z_mean, z_logvar, caches = vae.encode(x, rng, mode)
    eps = rng.split(100).normal(b, vae.latent_dim)
    std = np.exp(0.5 * z_logvar)
    z = z_mean + std * eps
    recon, dcaches = vae.decode(z, rng, mode)
    caches.update(dcaches)
    ll, d_recon = utility_and_grad("neg-bce", recon, x, weights)
    kl_rows = latent_kl(z_mean, z_logvar)
    kl = float(np.sum(weights * kl_rows))

    ordered = [caches[l] for l in range(len(vae.layers))]
    grads = {}
    n_layers = len(vae.layers)
    d_logits_extra = [0.0] * n_layers
    d_x_extra = [0.0] * n_layers
    reg_loss, diag = regularize(vae, ordered, obj, grads, d_logits_extra, d_x_extra)
    diag.utility = ll

    def back(l, g):
        extra = d_logits_extra[l]
        lg = vae.layers[l].backward(caches[l], g, None if np.isscalar(extra) else extra)
        _accumulate(grads, f"L{l}.gate.w", lg.gating_weights)
        _accumulate(grads, f"L{l}.gate.b", lg.gating_bias)
        for m, eg in enumerate(lg.experts):
            if eg is None:
                continue
            _accumulate(grads, f"L{l}.E{m}.mu", eg.mu)
            _accumulate(grads, f"L{l}.E{m}.rho", eg.rho)
            _accumulate(grads, f"L{l}.E{m}.b", eg.bias)
        return lg.x + d_x_extra[l]

    g = -d_recon
    for l in (DEC_OUT, DEC1, DEC0):
        g = back(l, g)
    w = weights[:, None]
    d_mean = g + w * z_mean
    d_logvar = g * eps * 0.5 * std + w * 0.5 * (np.exp(z_logvar) - 1.0)
    g = back(Z_MEAN, d_mean) + back(Z_LOGVAR, d_logvar)
    for l in (ENC1, ENC0):
        g = back(l, g)
    return VaeLossResult(-ll + kl + reg_loss, grads, -ll, kl, diag)


def generate(vae, n, rng):
    """Decode ``n`` draws from the latent prior with posterior-mean weights."""
    if n == 0:
        return np.zeros((0, vae.in_dim))
    z = rng.normal(n, vae.latent_dim)
    out = []
    for i in range(0, n, 2048):
        out.append(vae.decode(z[i : i + 2048], mode="mean")[0])
    return np.concatenate(out)


def mixed_replay_loss(new_losses, gen_losses=None):
    """Half the mean new-task loss plus half the mean generated-data loss.

    Without a generated batch (the first task) the new-task mean is returned.
    """
    new_losses = np.asarray(new_losses, dtype=np.float64)
    if new_losses.size == 0:
        raise ValueError("the new-task batch is empty")
    if gen_losses is None or np.size(gen_losses) == 0:
        return float(new_losses.mean())
    return 0.5 * float(new_losses.mean()) + 0.5 * float(np.mean(gen_losses))


def replay_weights(b_new, b_gen):
    """Per-example weights that realize ``mixed_replay_loss`` as a weighted sum."""
    if b_new == 0:
        raise ValueError("the new-task batch is empty")
    if b_gen == 0:
        return np.full(b_new, 1.0 / b_new)
    return np.concatenate([np.full(b_new, 0.5 / b_new), np.full(b_gen, 0.5 / b_gen)])


def inception_score_from_probs(probs):
    """Mean KL(p(y|x) || p(y)) in bits, with p(y) the mean prediction."""
    p = np.asarray(probs, dtype=np.float64)
    if p.ndim != 2 or p.shape[0] == 0:
        raise ValueError("inception score needs a non-empty (n, classes) array")
    # correctly rounded column means: identical rows give a marginal equal to each row
    marg = np.array([math.fsum(col) for col in p.T]) / p.shape[0]
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, p * (np.log(np.where(p > 0, p, 1.0)) - np.log(np.where(marg > 0, marg, 1.0))), 0.0)
    return max(0.0, float(terms.sum(axis=1).mean() / LN2))


def cl_inception_score(classifier, generated):
    """Inception-style score of generated inputs under the classifier, in bits."""
    if generated.shape[0] == 0:
        raise ValueError("no generated samples to score")
    return inception_score_from_probs(softmax_rows(classifier.predict(generated)))


@dataclass
class ReplayBuffer:
    inputs: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        if self.inputs.shape[0] != self.labels.shape[0]:
            raise ShapeError("inputs and labels differ in length")

    def __len__(self):
        return self.inputs.shape[0]

    @classmethod
    def from_generator(cls, vae, classifier, n, rng):
        """``n`` fresh samples labeled by the classifier's deterministic argmax."""
        x = generate(vae, n, rng)
        y = classifier.predict(x).argmax(axis=1) if n else np.zeros(0, dtype=np.int64)
        return cls(x, y.astype(np.int64))


def train_vae_task(vae, inputs, cfg, rng, replay_inputs=None, optimizer=None):
    """Minibatch Adam on ``vae_loss`` for one task; returns the per-epoch mean
    loss.  ``replay_inputs`` (generated data) is mixed half-and-half."""
    n = inputs.shape[0]
    if n == 0:
        raise ShapeError("cannot train on an empty dataset")
    if cfg.epochs_per_task == 0:
        return []
    opt = optimizer if optimizer is not None else LazyAdam(lr=cfg.lr)
    params = vae.parameters()
    bs = min(cfg.batch_size, n)
    n_batches = math.ceil(n / bs)
    steps_per_task = n_batches * cfg.epochs_per_task
    step = 0
    history = []
    for epoch in range(cfg.epochs_per_task):
        order = rng.split(0, epoch).permutation(n)
        total = 0.0
        for bi in range(n_batches):
            x = inputs[order[bi * bs : (bi + 1) * bs]]
            w = None
            if replay_inputs is not None and replay_inputs.shape[0] > 0:
                pick = rng.split(1, epoch, bi).generator.integers(0, replay_inputs.shape[0], size=x.shape[0])
                w = replay_weights(x.shape[0], pick.size)
                x = np.concatenate([x, replay_inputs[pick]])
            obj = objective_for(cfg, beta_schedule(cfg, step, steps_per_task), 1.0 / n_batches)
            res = vae_loss(vae, x, obj, rng.split(2, epoch, bi), cfg.forward_mode, weights=w)
            opt.update(params, res.grads)
            total += res.loss
            step += 1
        history.append(total / n_batches)
    return history


def write_pgm_grid(path, images, side=28, cols=10):
    """Tile ``images`` (rows of length side*side, values in [0, 1]) into one
    binary PGM file."""
    images = np.asarray(images, dtype=np.float64)
    n = images.shape[0]
    if n == 0:
        raise ValueError("no images to write")
    if images.shape[1] != side * side:
        raise ShapeError(f"images must have {side * side} pixels")
    cols = min(cols, n)
    rows = math.ceil(n / cols)
    grid = np.zeros((rows * side, cols * side), dtype=np.uint8)
    pix = np.clip(np.rint(images * 255.0), 0, 255).astype(np.uint8).reshape(n, side, side)
    for i in range(n):
        r, c = divmod(i, cols)
        grid[r * side : (r + 1) * side, c * side : (c + 1) * side] = pix[i]
    header = f"P5\n{grid.shape[1]} {grid.shape[0]}\n255\n".encode("ascii")
    Path(path).write_bytes(header + grid.tobytes())
