import math

import pytest
import torch
from torch import nn

from hifi_bbrg.bridge import NonFiniteStateError, ScheduleParams
from hifi_bbrg.nets import ModelConfig, build_models
from hifi_bbrg.sampler import (
    SampleRequest,
    TrajectoryRecord,
    sample_multi_step,
    sample_one_step,
    step_grid,
    trajectory_std,
)

from oracles import brute_force_std

RANDOM_NET = ModelConfig(base_width=4, depth=1, time_embed_dim=8, norm_groups=2, zero_init_epsilon=False)


@pytest.fixture(scope="module")
def random_net():
    return build_models(RANDOM_NET, 1, seed=0).epsilon_net.eval()


@pytest.fixture(scope="module")
def zero_net():
    cfg = ModelConfig(base_width=4, depth=1, time_embed_dim=8, norm_groups=2, source_skip=False)
    return build_models(cfg, 1, seed=0).epsilon_net


def _x(seed, shape=(2, 1, 8, 8)):
    return torch.rand(shape, generator=torch.Generator().manual_seed(seed)) * 2 - 1


class PerfectOracle(nn.Module):
    """Exact predictor for the known map x_0 = 0.5 x_T + 0.1."""

    conditional = True

    def forward(self, x_t, x_T, s):
        return x_t - (0.5 * x_T + 0.1)


class TestStepGrid:
    def test_endpoints_and_monotone(self):
        g = step_grid(1000, 7)
        assert g[0] == 1000 and g[-1] == 0 and len(g) == 8
        assert all(a > b for a, b in zip(g, g[1:]))

    def test_single_step(self):
        assert step_grid(200, 1) == [200, 0]

    @pytest.mark.parametrize("n", [0, 11])
    def test_out_of_range(self, n):
        with pytest.raises(ValueError):
            step_grid(10, n)


class TestOneStep:
    @pytest.mark.parametrize("skip", [False, True])
    def test_zero_net_returns_source(self, skip):
        cfg = ModelConfig(base_width=4, depth=1, time_embed_dim=8, norm_groups=2, source_skip=skip)
        net = build_models(cfg, 1, seed=0).epsilon_net
        x = _x(0)
        assert torch.equal(sample_one_step(x, net, ScheduleParams(1000)), x)

    def test_repeats_bit_identical(self, random_net):
        x = _x(1)
        sched = ScheduleParams(1000)
        outs = [sample_one_step(x, random_net, sched) for _ in range(5)]
        assert all(torch.equal(outs[0], o) for o in outs[1:])
        assert trajectory_std(outs)[1] == 0.0

    def test_leaves_global_rng_untouched(self, random_net):
        torch.manual_seed(5)
        expected = torch.rand(4)
        torch.manual_seed(5)
        sample_one_step(_x(2), random_net, ScheduleParams(1000))
        assert torch.equal(torch.rand(4), expected)


class TestMultiStep:
    def test_single_step_reduces_to_one_step(self, random_net):
        sched = ScheduleParams(1000)
        for seed in range(100):
            x = _x(seed, (1, 1, 8, 8))
            multi, _ = sample_multi_step(SampleRequest(x, n_steps=1, stochastic=True, seed=seed), random_net, sched)
            assert torch.equal(multi, sample_one_step(x, random_net, sched))

    def test_deterministic_chain_repeats(self, random_net):
        sched = ScheduleParams(100)
        x = _x(3)
        a, rec = sample_multi_step(SampleRequest(x, n_steps=10, trials=3), random_net, sched)
        b, _ = sample_multi_step(SampleRequest(x, n_steps=10), random_net, sched)
        assert torch.equal(a, b)
        assert rec.mean_std == 0.0

    def test_stochastic_seeded(self, random_net):
        sched = ScheduleParams(100)
        x = _x(4)
        a, _ = sample_multi_step(SampleRequest(x, n_steps=10, stochastic=True, seed=1), random_net, sched)
        b, _ = sample_multi_step(SampleRequest(x, n_steps=10, stochastic=True, seed=1), random_net, sched)
        c, _ = sample_multi_step(SampleRequest(x, n_steps=10, stochastic=True, seed=2), random_net, sched)
        assert torch.equal(a, b) and not torch.equal(a, c)

    def test_perfect_oracle_recovers_target(self):
        x = _x(5).double()
        truth = 0.5 * x + 0.1
        sched = ScheduleParams(1000)
        for n, stochastic in [(1, False), (10, False), (25, True)]:
            out, _ = sample_multi_step(SampleRequest(x, n_steps=n, stochastic=stochastic, seed=3), PerfectOracle(),
                                       sched)
            assert float((out - truth).abs().max()) <= 1e-12

    def test_std_grows_with_step_count(self, zero_net):
        # The zero predictor keeps re-anchoring at the current state, so every
        # extra stochastic step adds spread.
        sched = ScheduleParams(1000)
        x = _x(6, (1, 1, 16, 16))
        stds = {}
        for n in (200, 1000):
            _, rec = sample_multi_step(SampleRequest(x, n_steps=n, stochastic=True, trials=4, seed=0), zero_net, sched)
            stds[n] = rec.mean_std
        assert stds[200] > 0
        assert stds[1000] >= stds[200]

    def test_record_layout(self, random_net, tmp_path):
        sched = ScheduleParams(100)
        _, rec = sample_multi_step(SampleRequest(_x(7), n_steps=50, stochastic=True, trials=2, record_limit=5),
                                   random_net, sched)
        assert isinstance(rec, TrajectoryRecord)
        assert len(rec.steps) == 6 and rec.steps[-1] == 0
        assert len(rec.states[0]) == len(rec.steps) == len(rec.std_maps)
        assert rec.finals.shape == (2, 2, 1, 8, 8)
        lines = rec.write_csv(tmp_path / "traj.csv").read_text().splitlines()
        assert lines[0] == "step,mean_std" and len(lines) == 7

    def test_non_finite_net_reported(self):
        class Broken(nn.Module):
            conditional = True

            def forward(self, x_t, x_T, s):
                return x_t * math.nan

        with pytest.raises(NonFiniteStateError, match="step 100"):
            sample_multi_step(SampleRequest(_x(8), n_steps=4), Broken(), ScheduleParams(100))

    @pytest.mark.parametrize("bad", [dict(n_steps=0), dict(trials=0)])
    def test_request_validation(self, bad):
        with pytest.raises(ValueError):
            SampleRequest(_x(0), **bad)


class TestTrajectoryStd:
    def test_exact_zero_for_identical(self):
        x = _x(9)
        smap, mean = trajectory_std([x, x.clone()])
        assert mean == 0.0 and torch.count_nonzero(smap) == 0

    def test_matches_brute_force(self):
        trials = [_x(s, (1, 3, 3)).double() for s in range(4)]
        smap, mean = trajectory_std(trials)
        ref_map, ref_mean = brute_force_std(trials)
        assert torch.allclose(smap, ref_map, rtol=1e-12, atol=0)
        assert mean == pytest.approx(ref_mean, rel=1e-12)
