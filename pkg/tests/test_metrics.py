import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from hvcl.diversity import entropy_bonus
from hvcl.errors import FormatError
from hvcl.metrics import (
    RewardLog,
    crl_score,
    crl_scores,
    gate_entropy_bits,
    layer_averaged_info,
    mutual_info_gating,
)


def log_from(table, train_avg):
    log = RewardLog()
    for (k, t), rewards in table.items():
        for r in rewards:
            log.add(k, t, r, train_avg[k])
    return log


class TestMutualInfo:
    def test_partition_one_bit(self):
        p = np.zeros((4, 2))
        p[:2, 0] = p[2:, 1] = 1.0
        assert mutual_info_gating(p) == 1.0

    def test_uniform_zero(self):
        assert mutual_info_gating(np.full((5, 4), 0.25)) == 0.0

    def test_collapse_zero(self):
        p = np.zeros((3, 3))
        p[:, 2] = 1.0
        assert mutual_info_gating(p) == 0.0 and gate_entropy_bits(p) == 0.0

    @given(st.integers(0, 2**32 - 1))
    def test_composition_and_bounds(self, seed):
        g = np.random.default_rng(seed)
        n_experts = int(g.integers(2, 6))
        p = g.dirichlet(np.ones(n_experts), size=int(g.integers(1, 20)))
        h_cond, h_marg = entropy_bonus(p)
        mi = mutual_info_gating(p)
        assert mi == pytest.approx(max(0.0, (h_marg - h_cond) / np.log(2)), abs=1e-12)
        assert 0.0 <= mi <= np.log2(n_experts) + 1e-12

    def test_layer_average(self):
        p = np.zeros((4, 2))
        p[:2, 0] = p[2:, 1] = 1.0
        mi, hm = layer_averaged_info([p, np.full((4, 2), 0.5)])
        assert (mi, hm) == (0.5, 1.0)

    def test_empty(self):
        with pytest.raises(ValueError):
            mutual_info_gating(np.zeros((0, 2)))


class TestCrl:
    def test_perfect_retention(self):
        table = {(k, 3): [10.0 * k, 10.0 * k] for k in (1, 2, 3)}
        log = log_from(table, {1: 10.0, 2: 20.0, 3: 30.0})
        assert abs(crl_score(log, 3) - 3.0) <= 1e-12

    def test_total_forgetting(self):
        table = {(1, 2): [0.0], (2, 2): [5.0, 7.0]}
        log = log_from(table, {1: 4.0, 2: 6.0})
        assert abs(crl_score(log, 2) - 1.0) <= 1e-12

    def test_mixed(self):
        table = {(1, 2): [1.0, 3.0], (2, 2): [8.0]}
        log = log_from(table, {1: 4.0, 2: 8.0})
        assert abs(crl_score(log, 2) - 1.5) <= 1e-12

    def test_all_scores(self):
        table = {(1, 1): [2.0], (1, 2): [1.0], (2, 2): [3.0]}
        log = log_from(table, {1: 2.0, 2: 3.0})
        assert crl_scores(log) == {1: 1.0, 2: 1.5}

    def test_missing_entries(self):
        log = log_from({(2, 2): [1.0]}, {2: 1.0})
        with pytest.raises(KeyError):
            crl_score(log, 2)
        assert crl_scores(log) == {}

    def test_zero_denominator(self):
        log = log_from({(1, 1): [1.0]}, {1: 0.0})
        with pytest.raises(ZeroDivisionError):
            crl_score(log, 1)

    def test_bad_t(self):
        with pytest.raises(ValueError):
            crl_score(RewardLog(), 0)

    def test_conflicting_average(self):
        log = RewardLog()
        log.add(1, 1, 1.0, 2.0)
        with pytest.raises(FormatError):
            log.add(1, 2, 1.0, 3.0)

    def test_csv_round_trip(self, tmp_path):
        table = {(1, 2): [1.0, 3.0], (2, 2): [8.0], (1, 1): [4.0]}
        log = log_from(table, {1: 4.0, 2: 8.0})
        path = tmp_path / "rewards.csv"
        log.to_csv(path)
        back = RewardLog.from_csv(path)
        assert back.rewards == log.rewards and back.train_avg == log.train_avg

    def test_csv_missing_columns(self, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text("eval_task,reward\n1,2\n")
        with pytest.raises(FormatError):
            RewardLog.from_csv(path)
