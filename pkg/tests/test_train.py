import numpy as np
import pytest

from conftest import ad, small_grid, tiny_inputs, tiny_schema
from utiltune.core import CHANNELS, AdCandidate, CampaignType, RewardConfig, compute_reward
from utiltune.errors import ConfigError, NumericError, SchemaError
from utiltune.logfile import read_log, write_log
from utiltune.policy import ArchConfig, init, load_checkpoint
from utiltune.simenv import BehaviorPolicy, collect
from utiltune.train import TrainConfig, batch_rewards, policy_value, train, train_on_data, train_step


@pytest.fixture
def net(schema, grid3, small_arch):
    return init(schema, grid3, small_arch, seed=5)


@pytest.fixture
def small_log(tmp_path, sim, grid3):
    path = tmp_path / "log.jsonl"
    write_log(path, collect(sim, grid3, BehaviorPolicy.uniform(), 600), sim.schema(), grid3)
    return path


def _winners(data):
    out = []
    for i in range(len(data)):
        if not data.has_winner[i]:
            out.append(None)
            continue
        out.append(AdCandidate("w", CampaignType.from_code(int(data.campaign[i])), float(data.p_click[i]),
                               float(data.p_click30[i]), float(data.p_conversion[i]), float(data.bid[i])))
    return out


class TestConfig:
    def test_defaults(self):
        c = TrainConfig()
        assert c.discount == 0.0 and c.shuffle

    @pytest.mark.parametrize("kw", [{"epochs": 0}, {"batch_size": 1}, {"step_size": 0.0}, {"step_size": -1.0}])
    def test_rejected(self, kw):
        with pytest.raises(ConfigError):
            TrainConfig(**kw)


class TestBatchRewards:
    def test_pass_through_without_normalization(self, small_log, sim):
        data = read_log(small_log, sim.schema())
        rc = RewardConfig()
        r = batch_rewards(data, rc)
        for w, v in zip(_winners(data), r):
            assert v == (0.0 if w is None else pytest.approx(compute_reward(w, rc).value, rel=1e-12))

    def test_gated_get_zero(self, small_log, sim):
        data = read_log(small_log, sim.schema())
        assert not data.has_winner.all()
        assert np.all(batch_rewards(data, RewardConfig())[~data.has_winner] == 0)

    def test_constant_channel_contributes_nothing(self, small_log, sim):
        data = read_log(small_log, sim.schema()).subset(np.arange(50))
        ok = data.has_winner
        data.p_click[ok] = 0.2
        data.p_click30[ok] = 0.1
        data.p_conversion[ok] = 0.01
        r = batch_rewards(data, RewardConfig(normalization=True))
        revenue = batch_rewards(data, RewardConfig.preset("R1"))
        np.testing.assert_allclose(r, revenue)

    def test_normalized_matches_scalar(self, small_log, sim):
        data = read_log(small_log, sim.schema()).subset(np.arange(80))
        rc = RewardConfig(normalization=True)
        ok = data.has_winner
        norm = {}
        for ch in CHANNELS:
            v = getattr(data, ch)[ok]
            norm[ch] = (v - v.min()) / (v.max() - v.min())
        r = batch_rewards(data, rc)
        winners = [w for w in _winners(data) if w is not None]
        expect = [compute_reward(w, rc, {ch: norm[ch][j] for ch in CHANNELS}).value for j, w in enumerate(winners)]
        np.testing.assert_allclose(r[ok], expect, rtol=1e-12)

    def test_r1_ignores_normalization(self, small_log, sim):
        data = read_log(small_log, sim.schema())
        a = batch_rewards(data, RewardConfig.preset("R1"))
        b = batch_rewards(data, RewardConfig.preset("R1", normalization=True))
        np.testing.assert_array_equal(a, b)


class TestStep:
    def test_zero_rewards_fixpoint(self, net, schema):
        x = tiny_inputs(schema, 8)
        before = {k: v.copy() for k, v in net.params.items()}
        rec = train_step(net, x, np.arange(8), np.zeros(8), 0.5)
        assert rec.gradient_norm == 0.0
        assert all(np.array_equal(before[k], net.params[k]) for k in before)

    def test_positive_reward_raises_probability(self, net, schema):
        x = tiny_inputs(schema, 8)
        target = 11
        before = net.forward(x, "train", update_running=False)[:, target]
        train_step(net, x, np.full(8, target), np.ones(8), 1e-3)
        after = net.forward(x, "train", update_running=False)[:, target]
        assert np.all(after > before)

    def test_step_is_descent_on_loss(self, net, schema):
        x = tiny_inputs(schema, 8)
        acts, r = np.arange(8), np.linspace(0.1, 1.0, 8)
        ref = net.astype(np.float64)
        ref.forward(x, "train", update_running=False)
        g = ref.backward(x, acts, r)
        expect = {k: (net.params[k].astype(np.float64) - 0.01 * g[k]).astype(np.float32) for k in g}
        train_step(net, x, acts, r, 0.01)
        for k in expect:
            np.testing.assert_array_equal(net.params[k], expect[k])

    def test_metrics(self, net, schema):
        x = tiny_inputs(schema, 8)
        r = np.linspace(0, 1, 8)
        rec = train_step(net, x, np.arange(8), r, 0.01, step=3)
        assert rec.step == 3 and rec.mean_reward == pytest.approx(r.mean())
        assert rec.logged_reward == pytest.approx(r.mean()) and rec.gradient_norm > 0

    def test_value_estimate_with_uniform_policy(self, net, grid3, schema):
        x = tiny_inputs(schema, 8)
        net.params["out.W"][...] = 0
        net.params["out.b"][...] = 0
        r = np.linspace(0, 1, 8)
        rec = train_step(net, x, np.arange(8), r, 1e-6, behavior_probs=np.full(8, 1 / 27))
        assert rec.mean_reward == pytest.approx(r.mean())

    def test_policy_value(self):
        assert policy_value(np.log([0.5, 0.5]), np.array([1.0, 3.0]), np.array([0.25, 0.75])) == pytest.approx(1.5)

    def test_divergence_names_step(self, net, schema):
        x = tiny_inputs(schema, 4)
        with pytest.raises(NumericError, match="step 17"):
            train_step(net, x, np.arange(4), np.array([1.0, np.inf, 0, 0]), 0.01, step=17)

    def test_misaligned_rewards(self, net, schema):
        with pytest.raises(ConfigError):
            train_step(net, tiny_inputs(schema, 4), np.arange(4), np.ones(3), 0.01)


class TestTrain:
    def cfg(self, **kw):
        base = dict(step_size=0.1, batch_size=64, epochs=2, arch=ArchConfig(4, (8,)))
        base.update(kw)
        return TrainConfig(**base)

    def test_identical_checkpoints(self, tmp_path, small_log, sim, grid3):
        for name in ("a", "b"):
            train(small_log, grid3, sim.schema(), self.cfg(), tmp_path / f"{name}.ckpt", tmp_path / f"{name}.jsonl")
        assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()
        steps = [(tmp_path / f"{n}.jsonl").read_text().splitlines()[:-1] for n in "ab"]
        assert steps[0] == steps[1]

    def test_step_count_and_metadata(self, tmp_path, small_log, sim, grid3):
        data = read_log(small_log, sim.schema())
        net, rep = train(small_log, grid3, sim.schema(), self.cfg(), tmp_path / "n.ckpt")
        per_epoch = len(data) // 64 + (1 if len(data) % 64 >= 2 else 0)
        assert rep.n_steps == 2 * per_epoch
        assert [s.step for s in rep.steps] == list(range(rep.n_steps))
        ck = load_checkpoint(tmp_path / "n.ckpt", sim.schema())
        assert ck.metadata["steps"] == rep.n_steps and ck.metadata["reward_variant"] == "R0"

    def test_short_final_batch_dropped(self, sim, grid3, small_log):
        data = read_log(small_log, sim.schema()).subset(np.arange(65))
        _, rep = train_on_data(data, grid3, sim.schema(), self.cfg(epochs=1))
        assert rep.n_steps == 1

    def test_seed_changes_result(self, sim, grid3, small_log):
        data = read_log(small_log, sim.schema())
        a, _ = train_on_data(data, grid3, sim.schema(), self.cfg(seed=1))
        b, _ = train_on_data(data, grid3, sim.schema(), self.cfg(seed=2))
        assert a.params["out.W"].tobytes() != b.params["out.W"].tobytes()

    def test_empty_log(self, tmp_path, sim, grid3):
        path = tmp_path / "empty.jsonl"
        write_log(path, [], sim.schema(), grid3)
        with pytest.raises(SchemaError):
            train(path, grid3, sim.schema(), self.cfg())

    def test_schema_mismatch(self, small_log, grid3):
        with pytest.raises(SchemaError):
            train(small_log, grid3, tiny_schema(), self.cfg())

    def test_grid_mismatch(self, small_log, sim):
        with pytest.raises(SchemaError, match="grid"):
            train(small_log, small_grid(4), sim.schema(), self.cfg())


def test_desk_convergence(desk_trained):
    _, rep = desk_trained
    first, last = rep.mean_reward_window(True), rep.mean_reward_window(False)
    assert last > first
