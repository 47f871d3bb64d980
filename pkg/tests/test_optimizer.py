"""Parameter optimization against random-search and grid oracles."""

import numpy as np
import pytest

from qkdf.channel import ChannelDetectorModel
from qkdf.finitekey import ProtocolParams
from qkdf.optimizer import (BOX_HI, BOX_LO, MU_GAP, NoPositiveKey,
                            OptimizationResult, analytic_skr, optimize_params,
                            rate_distance_curve)


@pytest.fixture(scope="module")
def opt_2p2():
    model = ChannelDetectorModel().with_total_loss_db(2.2)
    return model, optimize_params(model)


def random_valid_params(rng):
    while True:
        x = BOX_LO + rng.random(4) * (BOX_HI - BOX_LO)
        if x[1] > x[2] + MU_GAP:
            return ProtocolParams(p_z=x[0], q_z=x[0], mu1=x[1], mu2=x[2],
                                  p_mu1=x[3])


class TestOptimum:
    def test_beats_random_search(self, opt_2p2):
        model, opt = opt_2p2
        rng = np.random.default_rng(123)
        best_random = max(analytic_skr(model, random_valid_params(rng))
                          for _ in range(100))
        assert opt.skr >= best_random

    def test_result_fields(self, opt_2p2):
        _, opt = opt_2p2
        assert isinstance(opt, OptimizationResult)
        assert opt.skr > 0
        assert opt.evaluations > 100
        p = opt.best_params
        assert 0.5 < p.p_z < 0.99 and p.mu1 > p.mu2 > 0

    def test_local_maximum_in_each_coordinate(self, opt_2p2):
        import dataclasses
        model, opt = opt_2p2
        p = opt.best_params
        for name in ("p_z", "mu1", "mu2", "p_mu1"):
            for sign in (-1, 1):
                kw = {name: getattr(p, name) * (1 + sign * 0.01)}
                if name == "p_z":
                    kw["q_z"] = kw["p_z"]
                try:
                    perturbed = dataclasses.replace(p, **kw)
                except ValueError:
                    continue  # perturbation left the valid box
                assert analytic_skr(model, perturbed) <= opt.skr * (1 + 1e-6)

    def test_block_scaling_keeps_operating_point(self):
        model = ChannelDetectorModel().with_total_loss_db(9.5)
        p1 = optimize_params(model, n_z_target=1e8).best_params
        p2 = optimize_params(model, n_z_target=2e8).best_params
        for name in ("p_z", "mu1", "mu2", "p_mu1"):
            assert abs(getattr(p1, name) - getattr(p2, name)) < 0.05


class TestInfeasibleRegion:
    def test_deep_loss_has_no_key(self):
        model = ChannelDetectorModel().with_total_loss_db(70.0)
        try:
            opt = optimize_params(model)
            assert opt.skr < 10.0
        except NoPositiveKey:
            pass  # also acceptable per the contract

    def test_grid_scan_confirms_region(self):
        model = ChannelDetectorModel().with_total_loss_db(70.0)
        rng = np.random.default_rng(7)
        skrs = [analytic_skr(model, random_valid_params(rng)) for _ in range(60)]
        assert max(skrs) < 10.0


class TestCurve:
    def test_monotone_in_loss(self):
        model = ChannelDetectorModel()
        rows = rate_distance_curve(model, [5.0, 12.0, 25.0], n_z_target=1e8)
        skrs = [r[1] for r in rows]
        assert skrs[0] > skrs[1] > skrs[2] > 0

    def test_empty_losses(self):
        assert rate_distance_curve(ChannelDetectorModel(), []) == []

    def test_no_key_rows_become_zero(self):
        rows = rate_distance_curve(ChannelDetectorModel(), [75.0])
        assert rows[0][1] == 0.0
        assert rows[0][2] is None
