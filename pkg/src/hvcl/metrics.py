"""Information diagnostics of the gate and a retention score for reward logs."""

from __future__ import annotations

import csv
import math
from collections import defaultdict
from dataclasses import dataclass, field

import numpy as np

from .diversity import entropy_bonus
from .errors import FormatError

LN2 = math.log(2.0)

REWARD_COLUMNS = ("eval_task", "policy_after_task", "episode", "reward", "train_avg_reward")


def mutual_info_gating(gating_probs):
    """Plug-in estimate of I(M;X) = H(M) - H(M|X) over a batch, in bits."""
    p = np.asarray(gating_probs, dtype=np.float64)
    if p.ndim != 2 or p.shape[0] == 0:
        raise ValueError("mutual information needs a non-empty (batch, M) array")
    h_cond, h_marg = entropy_bonus(p)
    # H(M) >= H(M|X) by concavity; clip the rounding residue
    return max(0.0, (h_marg - h_cond) / LN2)


def gate_entropy_bits(gating_probs):
    """Batch marginal entropy H(M) in bits."""
    return entropy_bonus(np.asarray(gating_probs, dtype=np.float64))[1] / LN2


def layer_averaged_info(per_layer_probs):
    """``(I(M;X), H(M))`` in bits, each averaged over layers."""
    mi = [mutual_info_gating(p) for p in per_layer_probs]
    hm = [gate_entropy_bits(p) for p in per_layer_probs]
    return float(np.mean(mi)), float(np.mean(hm))


@dataclass
class RewardLog:
    """Episodic rewards of task ``k`` under the policy saved after task ``t``.

    ``rewards[(k, t)]`` is the list of episode rewards and ``train_avg[k]`` the
    average reward reached while training on task ``k``.  Tasks count from 1.
    """

    rewards: dict = field(default_factory=dict)
    train_avg: dict = field(default_factory=dict)

    def add(self, eval_task, policy_after_task, reward, train_avg_reward):
        self.rewards.setdefault((int(eval_task), int(policy_after_task)), []).append(float(reward))
        prev = self.train_avg.get(int(eval_task))
        if prev is not None and prev != float(train_avg_reward):
            raise FormatError(f"task {eval_task} has conflicting training averages {prev} and {train_avg_reward}")
        self.train_avg[int(eval_task)] = float(train_avg_reward)

    @classmethod
    def from_csv(cls, path):
        log = cls()
        with open(path, newline="") as fh:
            reader = csv.DictReader(fh)
            missing = set(REWARD_COLUMNS) - set(reader.fieldnames or ())
            if missing:
                raise FormatError(f"reward log lacks columns: {sorted(missing)}")
            for row in reader:
                log.add(row["eval_task"], row["policy_after_task"], row["reward"], row["train_avg_reward"])
        return log

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(REWARD_COLUMNS)
            for (k, t), rs in sorted(self.rewards.items()):
                for n, r in enumerate(rs):
                    w.writerow([k, t, n, repr(r), repr(self.train_avg[k])])


def crl_score(log, t):
    """Sum over tasks ``k <= t`` of the mean reward of policy ``t`` on task ``k``
    divided by the training-time average reward on ``k``.

    Equals ``t`` under perfect retention and 1 when only the latest task is
    still solved.
    """
    if t < 1:
        raise ValueError("t counts tasks from 1")
    score = 0.0
    for k in range(1, t + 1):
        rs = log.rewards.get((k, t))
        if not rs:
            raise KeyError(f"no episodes of task {k} under the policy after task {t}")
        if k not in log.train_avg:
            raise KeyError(f"no training average for task {k}")
        denom = log.train_avg[k]
        if denom == 0:
            raise ZeroDivisionError(f"training average reward of task {k} is zero")
        score += sum(rs) / (len(rs) * denom)
    return score


def crl_scores(log):
    """``J(t)`` for every ``t`` the log fully covers."""
    by_policy = defaultdict(set)
    for k, t in log.rewards:
        by_policy[t].add(k)
    return {t: crl_score(log, t) for t in sorted(by_policy) if by_policy[t] >= set(range(1, t + 1))}
