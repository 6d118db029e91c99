import csv

import numpy as np
import pytest

from conftest import small_grid, wire_constant, wire_uniform
from utiltune.core import RewardConfig
from utiltune.errors import ConfigError, SchemaError
from utiltune.evaluation import (
    AblationResult,
    AblationRow,
    SimMetrics,
    ablation_run,
    bucket_report,
    diversity,
    gate,
    oracle_actions,
    policy_quality,
    population_report,
    relative_gain,
    relative_gain_terms,
    simulate_policy,
    verdict,
)
from utiltune.logfile import read_log, write_log
from utiltune.policy import ArchConfig, PolicyInputs, init
from utiltune.simenv import BehaviorPolicy, collect, constant_action_values, simulate_requests
from utiltune.train import TrainConfig, batch_rewards

ARCH = ArchConfig(4, (8,))


@pytest.fixture
def log(tmp_path, sim, grid3):
    path = tmp_path / "log.jsonl"
    write_log(path, collect(sim, grid3, BehaviorPolicy.uniform(), 400), sim.schema(), grid3)
    return read_log(path, sim.schema())


@pytest.fixture
def net(sim, grid3):
    return init(sim.schema(), grid3, ARCH, 0)


class TestDiversity:
    def test_constant(self):
        assert diversity([3, 3, 3, 3]) == 0.0

    def test_mode_share(self):
        assert diversity([1, 1, 2, 3]) == 0.5

    def test_all_distinct(self):
        assert diversity(range(1000)) == 1 - 1 / 1000

    def test_mode_ties(self):
        assert diversity([1, 1, 2, 2]) == 0.5

    def test_empty(self):
        with pytest.raises(ConfigError):
            diversity([])


class TestRelativeGain:
    def test_single_term(self):
        assert relative_gain_terms([2.0], [0.6], [0.001]) == pytest.approx(1.198)

    def test_zero_rewards(self):
        assert relative_gain_terms([0.0, 0.0], [0.9, 0.1], [0.5, 0.5]) == 0.0

    def test_identical_policies(self, log, net):
        wire_uniform(net)
        assert relative_gain(log, net, RewardConfig()) == pytest.approx(0.0, abs=1e-9)

    def test_is_a_sum_over_the_log(self, log, net):
        wire_constant(net, 5)
        r = batch_rewards(log, RewardConfig())
        expect = float(np.sum(r * ((log.action == 5) * 1.0 - log.bp)))
        assert relative_gain(log, net, RewardConfig()) == pytest.approx(expect, rel=1e-6)

    def test_reward_scaling(self, log, net):
        net.params["out.b"][...] = np.linspace(0, 1, net.n_actions)
        a = relative_gain(log, net, RewardConfig.preset("R1"))
        b = relative_gain(log, net, RewardConfig.preset("R1", impression_revenue_scale=10.0))
        assert a == pytest.approx(b)

    def test_schema_mismatch(self, log, schema, grid3, small_arch):
        with pytest.raises(SchemaError):
            relative_gain(log, init(schema, grid3, small_arch, 0), RewardConfig())


class TestGate:
    def test_verdict_rule(self):
        assert verdict(0.1, 1e-9, 0.1) == "pass"
        assert verdict(0.099, 5.0, 0.1) == "fail"
        assert verdict(0.5, 0.0, 0.1) == "fail"

    def test_constant_net_fails(self, log, net):
        wire_constant(net, 7)
        rep = gate(net, log)
        assert rep.diversity == 0.0 and rep.verdict == "fail" and not rep.passed

    def test_summary_line(self, log, net):
        rep = gate(net, log, 0.2)
        assert rep.summary().startswith(f"verdict={rep.verdict} diversity=")
        assert rep.diversity_threshold == 0.2

    def test_deterministic(self, log, net):
        assert gate(net, log) == gate(net, log)


class TestSimulate:
    def test_oracle_wired_matches_oracle(self, one_segment, grid3):
        rc = RewardConfig()
        best = oracle_actions(one_segment, grid3, rc, 3000)[0]
        net = wire_constant(init(one_segment.schema(), grid3, ARCH, 0), best)
        res = simulate_policy(net, one_segment, grid3, 3000, rc)
        assert set(res.actions.tolist()) == {best}
        batch = simulate_requests(one_segment, range(3000), "eval")
        values = constant_action_values(batch, grid3, rc)
        assert res.mean_expected_reward == pytest.approx(values[best], rel=1e-9)
        # best on its own requests is within sampling tolerance of the exhaustive maximum
        assert values[best] >= 0.97 * values.max()

    def test_metrics_are_rates(self, sim, grid3, net):
        m = simulate_policy(net, sim, grid3, 500, RewardConfig()).metrics
        assert 0 <= m.ctr30 <= m.ctr <= 1 and 0 <= m.cvr <= 1 and m.requests == 500

    def test_same_seed_same_metrics(self, sim, grid3, net):
        a = simulate_policy(net, sim, grid3, 300, RewardConfig())
        b = simulate_policy(net, sim, grid3, 300, RewardConfig())
        assert a.metrics == b.metrics

    def test_zero_traffic(self, sim, grid3, net):
        with pytest.raises(ConfigError):
            simulate_policy(net, sim, grid3, 0, RewardConfig())

    def test_quality_of_oracle_policy(self, one_segment, grid3):
        rc = RewardConfig()
        net = init(one_segment.schema(), grid3, ARCH, 0)
        q0 = policy_quality(net, one_segment, grid3, rc, 2000, 2000)
        wire_constant(net, q0.oracle_actions[0])
        q = policy_quality(net, one_segment, grid3, rc, 2000, 2000)
        assert q.oracle_ratio == pytest.approx(1.0)
        assert q.uniform_ratio >= 1.0


class TestAblation:
    def test_single_variant_rejected(self, log, sim, grid3):
        with pytest.raises(ConfigError):
            ablation_run([RewardConfig()], log, sim, grid3, sim.schema(), TrainConfig(arch=ARCH))

    def test_two_variants(self, log, sim, grid3, tmp_path):
        cfg = TrainConfig(step_size=0.5, batch_size=64, epochs=1, arch=ARCH)
        res = ablation_run([RewardConfig(), RewardConfig.preset("R1")], log, sim, grid3, sim.schema(), cfg, 300)
        assert [r.variant for r in res.rows] == ["R0", "R1"]
        (d,) = res.deltas()
        m0, m1 = res.row("R0").metrics, res.row("R1").metrics
        assert d["revenue"] == pytest.approx((m1.revenue - m0.revenue) / m0.revenue)
        path = tmp_path / "ab.csv"
        res.write_csv(path)
        rows = list(csv.reader(path.open()))
        assert rows[0][0] == "variant" and len(rows) == 3

    def test_errors_are_reported_per_variant(self, log, sim, grid3):
        cfg = TrainConfig(step_size=1e300, batch_size=64, epochs=1, arch=ARCH)
        res = ablation_run([RewardConfig(), RewardConfig.preset("R1")], log, sim, grid3, sim.schema(), cfg, 50)
        assert all(r.error and r.error.startswith("NUMERIC/") for r in res.rows)
        assert res.deltas() == []

    def test_deltas_against_named_base(self):
        m = lambda rev: SimMetrics(rev, 10, 0.1, 0.05, 0.01)
        res = AblationResult([AblationRow("R0", m(10.0), 1.0), AblationRow("R1", m(12.0), 1.0)])
        assert res.deltas("R1")[0]["revenue"] == pytest.approx(-1 / 6)


class TestBuckets:
    def test_constant_net(self, sim, grid3, net):
        wire_constant(net, 14)
        rep = population_report(net, sim, grid3, "ctr", 400, 4)
        assert len(set(rep.column("w_click"))) == 1 and len(set(rep.column("reserve"))) == 1
        assert sum(b.count for b in rep.buckets) == 400

    def test_ascending_and_in_range(self, sim, grid3, net):
        rep = population_report(net, sim, grid3, "cpm", 400, 4)
        assert all(a.high <= b.low for a, b in zip(rep.buckets, rep.buckets[1:]))
        assert all(0 <= b.w_click <= 1 and 0 <= b.w_conversion <= 2 and 0 <= b.reserve <= 0.4 for b in rep.buckets)

    def test_one_state_per_bucket(self, sim, grid3, net):
        batch = simulate_requests(sim, range(12), "eval")
        x = PolicyInputs(batch.cat, batch.num, batch.dense)
        rep = bucket_report(net, x, batch.num[:, 0], grid3, "ctr", 12)
        greedy = net.greedy(x)
        order = np.argsort(batch.num[:, 0], kind="stable")
        w, _ = grid3.decode_arrays(greedy[order])
        assert rep.column("w_click") == pytest.approx(w["w_click"].tolist())

    def test_guards(self, sim, grid3, net):
        with pytest.raises(ConfigError):
            population_report(net, sim, grid3, "ctr", 3, 4)
        with pytest.raises(ConfigError):
            population_report(net, sim, grid3, "age", 30, 4)

    def test_files(self, sim, grid3, net, tmp_path):
        rep = population_report(net, sim, grid3, "ctr", 200, 4)
        rep.write_csv(tmp_path / "b.csv")
        rep.write_svg(tmp_path / "b.svg")
        rows = list(csv.reader((tmp_path / "b.csv").open()))
        assert rows[0] == ["bucket", "key_low", "key_high", "mean_w_click", "mean_w_conversion", "mean_reserve", "count"]
        assert (tmp_path / "b.svg").read_text().startswith("<svg")
