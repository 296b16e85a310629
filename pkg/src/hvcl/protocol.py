"""Sequential train / consolidate / evaluate loop over a task stream."""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import StreamError
from .linalg import RngState
from .metrics import layer_averaged_info
from .replay import MoveVae, ReplayBuffer, cl_inception_score, generate, train_vae_task, vae_config
from .trainer import build_network, consolidate_priors, evaluate, train_task

log = logging.getLogger(__name__)

BASE_COLUMNS = ("task", "epoch", "step", "utility", "gating_kl_bits", "expert_kl_bits", "lndet",
                "h_cond_bits", "h_marg_bits")
EXTRA_COLUMNS = ("min_w2", "mi_bits", "train_accuracy", "eval_mi_bits", "eval_h_marg_bits", "is_bits")


def metrics_columns(n_tasks):
    """Fixed column order of the per-epoch metrics CSV."""
    accs = tuple(f"acc_task_{i + 1}" for i in range(n_tasks))
    return BASE_COLUMNS + accs + ("avg_accuracy",) + EXTRA_COLUMNS


def _fmt(v):
    if v is None or (isinstance(v, float) and math.isnan(v)):
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


class MetricsWriter:
    """Appends per-epoch rows to a CSV with the fixed column order."""

    def __init__(self, path, n_tasks):
        self.path = path
        self.columns = metrics_columns(n_tasks)
        self._fh = open(path, "w", newline="")
        self._w = csv.writer(self._fh)
        self._w.writerow(self.columns)

    def write(self, row):
        unknown = set(row) - set(self.columns)
        if unknown:
            raise KeyError(f"unknown metrics columns: {sorted(unknown)}")
        self._w.writerow([_fmt(row.get(c)) for c in self.columns])
        self._fh.flush()

    def close(self):
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


@dataclass
class ReplayConfig:
    """Generative replay settings; ``vae`` holds the generator's TrainConfig."""

    vae: object = field(default_factory=vae_config)
    latent_dim: int = 64
    samples_per_task: int = 10_000
    generator_rehearsal: bool = True  # the VAE also trains on the mixture
    score_samples: int = 1000


@dataclass
class ProtocolReport:
    accuracy_matrix: list = field(default_factory=list)  # row t: accuracies on tasks 0..t after task t
    task_reports: list = field(default_factory=list)
    inception_bits: list = field(default_factory=list)
    eval_mi_bits: list = field(default_factory=list)
    eval_h_marg_bits: list = field(default_factory=list)

    @property
    def final_average(self):
        if not self.accuracy_matrix:
            return None
        return float(np.mean(self.accuracy_matrix[-1]))

    def to_dict(self):
        return {
            "accuracy_matrix": self.accuracy_matrix,
            "final_average": self.final_average,
            "inception_bits": self.inception_bits,
            "eval_mi_bits": self.eval_mi_bits,
            "eval_h_marg_bits": self.eval_h_marg_bits,
            "task_reports": [r.to_dict() for r in self.task_reports],
        }

    def to_json(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=1)

    def matrix_csv(self, path):
        n = len(self.accuracy_matrix)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["after_task"] + [f"task_{i + 1}" for i in range(n)])
            for t, row in enumerate(self.accuracy_matrix):
                w.writerow([t + 1] + [repr(a) for a in row] + [""] * (n - len(row)))


def _test_sets(stream, upto):
    return [(s.test_x, s.test_y) for s in stream.tasks[: upto + 1]]


def run_protocol(stream, cfg, replay=None, rng=None, metrics=None, net=None, eval_each_epoch=True):
    """Train on each task in order, consolidate, and evaluate on every task seen.

    ``replay`` is a ``ReplayConfig`` or None.  ``metrics`` is an optional
    ``MetricsWriter``.  Returns ``(ProtocolReport, net)``.
    """
    if len(stream) == 0:
        raise StreamError("the task stream is empty")
    rng = rng if rng is not None else RngState(cfg.seed)
    if net is None:
        net = build_network(cfg, stream.in_dim, stream.n_classes, rng.split(0))
    vae = None
    if replay is not None:
        vae = MoveVae.build(stream.in_dim, replay.vae.hidden, replay.latent_dim, replay.vae.n_experts,
                            rng.split(1), k=replay.vae.k, sigma0=replay.vae.sigma0)
    report = ProtocolReport()
    step_offset = 0
    for t, task in enumerate(stream):
        buffer = None
        if vae is not None and t > 0:
            buffer = ReplayBuffer.from_generator(vae, net, replay.samples_per_task * t, rng.split(3, t))
        is_bits = None

        def on_epoch_end(rec, t=t):
            if metrics is None:
                return
            row = {
                "task": t + 1, "epoch": rec.epoch + 1, "step": step_offset + rec.step,
                "utility": rec.utility, "gating_kl_bits": rec.gating_kl_bits,
                "expert_kl_bits": rec.expert_kl_bits, "lndet": rec.lndet,
                "h_cond_bits": rec.h_cond_bits, "h_marg_bits": rec.h_marg_bits,
                "min_w2": rec.min_w2, "mi_bits": rec.mi_bits, "train_accuracy": rec.train_accuracy,
            }
            if eval_each_epoch:
                accs, avg = evaluate(net, _test_sets(stream, t))
                row.update({f"acc_task_{i + 1}": a for i, a in enumerate(accs)})
                row["avg_accuracy"] = avg
            metrics.write(row)

        task_report = train_task(net, task.train_x, task.train_y, cfg, rng.split(2, t),
                                 replay=None if buffer is None else (buffer.inputs, buffer.labels),
                                 on_epoch_end=on_epoch_end)
        step_offset += task_report.epochs[-1].step if task_report.epochs else 0
        if vae is not None:
            rehearse = buffer.inputs if (buffer is not None and replay.generator_rehearsal) else None
            train_vae_task(vae, task.train_x, replay.vae, rng.split(4, t), replay_inputs=rehearse)
            consolidate_priors(vae)
        consolidate_priors(net)

        accs, avg = evaluate(net, _test_sets(stream, t))
        report.accuracy_matrix.append(accs)
        report.task_reports.append(task_report)
        seen = np.concatenate([s.test_x for s in stream.tasks[: t + 1]])
        mi, hm = layer_averaged_info(net.gate_probs(seen if seen.shape[0] else task.train_x))
        report.eval_mi_bits.append(mi)
        report.eval_h_marg_bits.append(hm)
        if vae is not None:
            is_bits = cl_inception_score(net, generate(vae, replay.score_samples, rng.split(5, t)))
            report.inception_bits.append(is_bits)
        log.info("task %d: accuracies %s average %.4f", t + 1, np.round(accs, 4).tolist(), avg)
        if metrics is not None:
            # end-of-task row: post-consolidation evaluation
            row = {"task": t + 1, "epoch": 0, "step": step_offset,
                   "eval_mi_bits": mi, "eval_h_marg_bits": hm, "is_bits": is_bits, "avg_accuracy": avg}
            row.update({f"acc_task_{i + 1}": a for i, a in enumerate(accs)})
            metrics.write(row)
    return report, net
