"""Per-task training, evaluation and prior consolidation."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .diversity import DiversityConfig
from .errors import ShapeError
from .linalg import LazyAdam, RngState
from .network import MoveNetwork, Objective, total_loss

log = logging.getLogger(__name__)

SCHEDULES = ("constant", "cyclic")
KL_EXPERTS = ("all", "selected")


@dataclass
class TrainConfig:
    beta1: float = 0.01
    beta2: float = 0.1
    diversity: DiversityConfig = field(default_factory=DiversityConfig)
    k: int = 1
    n_experts: int = 2
    hidden: tuple = (256, 256)
    lr: float = 6e-4
    epochs_per_task: int = 150
    batch_size: int = 256
    schedule: str = "cyclic"
    cycle_count: int = 4
    dropout: float = 0.25
    forward_mode: str = "flipout"
    utility: str = "neg-cross-entropy"
    sigma0: float = 0.05
    kl_experts: str = "selected"
    seed: int = 0

    def __post_init__(self):
        if self.beta1 < 0 or self.beta2 < 0:
            raise ValueError("beta1 and beta2 must be non-negative")
        if not 1 <= self.k <= self.n_experts:
            raise ValueError("k must be in [1, n_experts]")
        if self.schedule not in SCHEDULES:
            raise ValueError(f"schedule must be one of {SCHEDULES}")
        if self.batch_size < 1 or self.epochs_per_task < 0 or self.cycle_count < 1:
            raise ValueError("batch_size, cycle_count must be >= 1 and epochs_per_task >= 0")
        if self.kl_experts not in KL_EXPERTS:
            raise ValueError(f"kl_experts must be one of {KL_EXPERTS}")
        if not 0 <= self.dropout < 1:
            raise ValueError("dropout must be in [0, 1)")
        self.hidden = tuple(int(h) for h in self.hidden)

    def to_dict(self):
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        return d


def build_network(cfg, in_dim, out_dim, rng=None):
    rng = rng if rng is not None else RngState(cfg.seed).split(0)
    return MoveNetwork.build(in_dim, cfg.hidden, out_dim, cfg.n_experts, rng, k=cfg.k,
                             dropout=cfg.dropout, sigma0=cfg.sigma0)


def beta_schedule(cfg, global_step, steps_per_task):
    """(beta1, beta2) at a step.  Cyclic: each task is split into
    ``cycle_count`` equal cycles; within a cycle the weights ramp linearly
    from 0 over the first half and hold over the second half."""
    if steps_per_task <= 0:
        raise ValueError("steps_per_task must be positive")
    if cfg.schedule == "constant":
        return cfg.beta1, cfg.beta2
    cycle = steps_per_task / cfg.cycle_count
    phase = ((global_step % steps_per_task) % cycle) / cycle
    f = min(1.0, 2.0 * phase)
    return cfg.beta1 * f, cfg.beta2 * f


def consolidate_priors(net):
    """Posterior (experts and gate) becomes the prior for the next task."""
    net.consolidate()


@dataclass
class EpochRecord:
    epoch: int
    step: int
    utility: float
    gating_kl_bits: float
    expert_kl_bits: float
    lndet: float
    min_w2: float
    h_cond_bits: float
    h_marg_bits: float
    mi_bits: float
    train_accuracy: float


@dataclass
class TaskReport:
    epochs: list = field(default_factory=list)
    final_utility: float = float("nan")
    final_train_accuracy: float = float("nan")

    def to_dict(self):
        return {
            "final_utility": self.final_utility,
            "final_train_accuracy": self.final_train_accuracy,
            "epochs": [asdict(e) for e in self.epochs],
        }


def objective_for(cfg, betas, kl_scale):
    return Objective(beta1=betas[0], beta2=betas[1], kl_scale=kl_scale,
                     diversity=cfg.diversity, utility=cfg.utility, kl_experts=cfg.kl_experts)


def train_task(net, inputs, targets, cfg, rng, replay=None, on_epoch_end=None, optimizer=None):
    """Shuffled minibatch Adam on the regularized loss for one task.

    ``replay`` is an optional ``(inputs, targets)`` pair of generated data;
    when given every step mixes the new-task batch and an equally sized
    replay batch with weight 1/2 each.  Priors are not consolidated here.
    """
    n = inputs.shape[0]
    if n == 0:
        raise ShapeError("cannot train on an empty dataset")
    report = TaskReport()
    if cfg.epochs_per_task == 0:
        return report
    opt = optimizer if optimizer is not None else LazyAdam(lr=cfg.lr)
    params = net.parameters()
    bs = min(cfg.batch_size, n)
    n_batches = math.ceil(n / bs)
    steps_per_task = n_batches * cfg.epochs_per_task
    step = 0
    for epoch in range(cfg.epochs_per_task):
        order = rng.split(0, epoch).permutation(n)
        acc = _EpochAccumulator()
        for bi in range(n_batches):
            idx = order[bi * bs : (bi + 1) * bs]
            x, y = inputs[idx], targets[idx]
            w = None
            if replay is not None:
                x, y, w = _mix_replay(x, y, replay, rng.split(1, epoch, bi))
            betas = beta_schedule(cfg, step, steps_per_task)
            obj = objective_for(cfg, betas, 1.0 / n_batches)
            res = total_loss(net, x, y, obj, rng.split(2, epoch, bi), cfg.forward_mode, weights=w)
            opt.update(params, res.grads)
            acc.add(res, y, len(idx))
            step += 1
        rec = acc.record(epoch, step)
        report.epochs.append(rec)
        if on_epoch_end is not None:
            on_epoch_end(rec)
    last = report.epochs[-1]
    report.final_utility = last.utility
    report.final_train_accuracy = last.train_accuracy
    return report


def _mix_replay(x, y, replay, rng):
    rx, ry = replay
    pick = rng.generator.integers(0, rx.shape[0], size=x.shape[0])
    b_new, b_gen = x.shape[0], pick.size
    weights = np.concatenate([np.full(b_new, 0.5 / b_new), np.full(b_gen, 0.5 / b_gen)])
    return np.concatenate([x, rx[pick]]), np.concatenate([y, ry[pick]]), weights


class _EpochAccumulator:
    def __init__(self):
        self.rows = []
        self.correct = 0
        self.seen = 0

    def add(self, res, y, n_new):
        d = res.diagnostics
        self.rows.append((d.utility, d.gating_kl, d.expert_kl, d.lndet, d.min_w2, d.h_cond, d.h_marg, d.mutual_info))
        if y.ndim == 1:
            pred = res.output[:n_new].argmax(axis=1)
            self.correct += int(np.sum(pred == y[:n_new]))
            self.seen += n_new

    def record(self, epoch, step):
        a = np.asarray(self.rows, dtype=np.float64).mean(axis=0)
        ln2 = math.log(2.0)
        return EpochRecord(
            epoch=epoch, step=step, utility=float(a[0]),
            gating_kl_bits=float(a[1] / ln2), expert_kl_bits=float(a[2] / ln2),
            lndet=float(a[3]), min_w2=float(a[4]),
            h_cond_bits=float(a[5] / ln2), h_marg_bits=float(a[6] / ln2), mi_bits=float(a[7] / ln2),
            train_accuracy=self.correct / self.seen if self.seen else float("nan"),
        )


def accuracy(net, inputs, labels):
    if inputs.shape[0] == 0:
        return float("nan")
    return float(np.mean(net.predict(inputs).argmax(axis=1) == labels))


def evaluate(net, datasets):
    """Deterministic accuracy on each ``(inputs, labels)`` pair and their mean.

    The mean is ``None`` for an empty list.
    """
    accs = [accuracy(net, x, y) for x, y in datasets]
    return accs, (float(np.mean(accs)) if accs else None)
