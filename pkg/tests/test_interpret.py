"""Tests for factor stability, driver regressions, counterfactuals, and event studies."""

import numpy as np
import pytest
from scipy.stats import ortho_group

from sparsefactor import interpret as I
from sparsefactor import model as M
from sparsefactor.datasets import SampleSet
from sparsefactor.errors import ContractViolationError, InvalidArgumentError


def make_panel(latents, seed_dates=0):
    t = latents.shape[0]
    dates = np.arange(t)
    return I.FactorPanel(dates=dates, latents=latents)


class TestFactorPanel:
    def test_nonfinite_latents_raise(self):
        z = np.zeros((5, 2))
        z[0, 0] = np.nan
        with pytest.raises(InvalidArgumentError):
            make_panel(z)

    def test_negative_threshold_raises(self):
        with pytest.raises(InvalidArgumentError):
            I.FactorPanel(dates=np.arange(3), latents=np.zeros((3, 2)),
                          active_threshold=-1.0)


class TestCanonicalCorrelations:
    def test_identical_panels_give_ones(self):
        z = np.random.default_rng(0).standard_normal((200, 4))
        ccs = I.canonical_correlations(z, z)
        assert np.allclose(ccs, 1.0, atol=1e-8)

    def test_independent_panels_give_small_values(self):
        rng = np.random.default_rng(1)
        a = rng.standard_normal((2000, 3))
        b = rng.standard_normal((2000, 3))
        assert np.all(I.canonical_correlations(a, b) < 0.2)

    def test_rank_deficient_panel_raises(self):
        z = np.random.default_rng(2).standard_normal((50, 1))
        a = np.column_stack([z, z])  # duplicated column
        with pytest.raises(Exception):
            I.canonical_correlations(a, a)


class TestProcrustesStability:
    def test_rotated_copies_are_maximally_stable(self):
        rng = np.random.default_rng(3)
        z = rng.standard_normal((300, 4))
        rot = ortho_group.rvs(4, random_state=4)
        panels = [make_panel(z), make_panel(z @ rot)]
        out = I.procrustes_stability(panels)
        assert out["mean_canonical_correlation"] > 0.99
        assert out["max_subspace_angle_rad"] < 0.05

    def test_unrelated_seeds_score_low(self):
        rng = np.random.default_rng(5)
        panels = [make_panel(rng.standard_normal((300, 4))) for _ in range(2)]
        out = I.procrustes_stability(panels)
        assert out["mean_canonical_correlation"] < 0.5

    def test_single_panel_raises(self):
        with pytest.raises(InvalidArgumentError):
            I.procrustes_stability([make_panel(np.zeros((10, 2)) + np.eye(10, 2))])

    def test_mismatched_shapes_raise(self):
        rng = np.random.default_rng(6)
        with pytest.raises(InvalidArgumentError):
            I.procrustes_stability([make_panel(rng.standard_normal((20, 2))),
                                    make_panel(rng.standard_normal((20, 3)))])


class TestDriverRegression:
    def test_planted_driver_is_found(self):
        rng = np.random.default_rng(7)
        d = rng.standard_normal(500)
        z = np.column_stack([d + 0.05 * rng.standard_normal(500),
                             rng.standard_normal(500)])
        out = I.driver_regression(make_panel(z), d, ["freight"])
        assert out[(0, "freight")]["r2"] > 0.9
        assert out[(1, "freight")]["r2"] < 0.1

    def test_overlap_with_model_inputs_is_rejected(self):
        z = np.random.default_rng(8).standard_normal((50, 2))
        with pytest.raises(ContractViolationError):
            I.driver_regression(make_panel(z), z[:, 0], ["pmi"],
                                feature_names={"pmi", "inventories"})

    def test_partial_r_removes_common_cause(self):
        rng = np.random.default_rng(9)
        common = rng.standard_normal(800)
        z = (common + 0.1 * rng.standard_normal(800))[:, None]
        d = common + 0.1 * rng.standard_normal(800)
        out = I.driver_regression(make_panel(z), d, ["drv"],
                                  controls=common[:, None])
        assert abs(out[(0, "drv")]["r"]) > 0.9
        assert abs(out[(0, "drv")]["partial_r"]) < 0.5

    def test_constant_factor_gives_nan(self):
        z = np.ones((40, 1))
        d = np.random.default_rng(10).standard_normal(40)
        out = I.driver_regression(make_panel(z), d, ["drv"])
        assert np.isnan(out[(0, "drv")]["r"])

    def test_misaligned_driver_raises(self):
        z = np.random.default_rng(11).standard_normal((30, 2))
        with pytest.raises(InvalidArgumentError):
            I.driver_regression(make_panel(z), np.zeros((7, 7)), ["a"] * 7)


class TestCounterfactual:
    def setup_method(self):
        self.cfg = M.ModelConfig(window=4, num_features=3, latent_dim=4,
                                 num_horizons=2, h_dim=5, dec_hidden=(6, 5),
                                 decoder_kind="linearized", dropout_rate=0.0)
        self.bundle = M.init_bundle(self.cfg, rng_seed=12)
        rng = np.random.default_rng(13)
        self.sample = SampleSet(features=rng.standard_normal((1, 4, 3)),
                                masks=np.ones((1, 4, 3)),
                                targets=np.zeros((1, 2)), horizons=(1, 5),
                                base_log_price=np.zeros(1)).subset(slice(0, 1))

    def test_linearized_shift_matches_decoder_row(self):
        std = np.ones(4)
        shift = I.counterfactual(self.bundle, self.sample, factor_k=2,
                                 delta=1.5, factor_std=std)
        expected = 1.5 * self.bundle.params["dec_Wz"][2]
        assert shift.shape == (1, 2)
        assert np.allclose(shift[0], expected, atol=1e-10)

    def test_shift_scales_linearly_with_delta(self):
        std = np.full(4, 2.0)
        s1 = I.counterfactual(self.bundle, self.sample, 0, 1.0, std)
        s2 = I.counterfactual(self.bundle, self.sample, 0, 2.0, std)
        assert np.allclose(s2, 2 * s1, atol=1e-10)

    def test_out_of_range_factor_raises(self):
        with pytest.raises(InvalidArgumentError):
            I.counterfactual(self.bundle, self.sample, 7, 1.0, np.ones(4))


class TestEventStudy:
    def planted_panel(self, t=600, events=None, bump=2.0, seed=14):
        rng = np.random.default_rng(seed)
        z = rng.standard_normal((t, 2))
        if events:
            for e in events:
                z[e - 3:e + 4, 0] += bump
        return make_panel(z)

    def test_planted_events_are_significant(self):
        events = [60, 150, 260, 380, 480]
        panel = self.planted_panel(events=events)
        spec = I.EventSpec(event_dates=events, window_half_width=3,
                           factor_index=0, num_permutations=500, seed=0)
        out = I.event_study(panel, spec)
        assert out["p_value"] < 0.01
        assert out["shift_sd"] > 1.0

    def test_null_events_are_insignificant(self):
        panel = self.planted_panel(events=None)
        spec = I.EventSpec(event_dates=[100, 220, 340, 460],
                           window_half_width=3, factor_index=0,
                           num_permutations=500, seed=1)
        out = I.event_study(panel, spec)
        assert out["p_value"] > 0.05

    def test_constant_factor_returns_trivial_result(self):
        panel = make_panel(np.zeros((200, 1)))
        spec = I.EventSpec(event_dates=[50, 120], num_permutations=200)
        out = I.event_study(panel, spec)
        assert out["p_value"] == 1.0 and out["shift_sd"] == 0.0

    def test_overlapping_windows_warn(self):
        panel = self.planted_panel()
        spec = I.EventSpec(event_dates=[100, 102, 300], window_half_width=3,
                           num_permutations=200)
        with pytest.warns(UserWarning):
            I.event_study(panel, spec)

    def test_single_event_raises(self):
        panel = self.planted_panel()
        with pytest.raises(InvalidArgumentError):
            I.event_study(panel, I.EventSpec(event_dates=[100],
                                             num_permutations=200))

    def test_too_few_permutations_raise(self):
        with pytest.raises(InvalidArgumentError):
            I.EventSpec(event_dates=[10, 20], num_permutations=50)


class TestActiveAndSigns:
    def test_active_counts(self):
        z = np.array([[0.0, 0.5, 0.0], [1.0, 1.0, 1.0]])
        panel = I.FactorPanel(dates=np.arange(2), latents=z,
                              active_threshold=0.1)
        out = I.active_factor_stats(panel)
        assert list(out["per_date_counts"]) == [1, 3]
        assert out["mean_count"] == 2.0

    def test_fix_signs_flips_anticorrelated_factor(self):
        rng = np.random.default_rng(15)
        d = rng.standard_normal(300)
        z = np.column_stack([-d + 0.05 * rng.standard_normal(300),
                             d + 0.05 * rng.standard_normal(300)])
        fixed = I.fix_signs(make_panel(z), d)
        assert np.corrcoef(fixed.latents[:, 0], d)[0, 1] > 0.9
        assert np.corrcoef(fixed.latents[:, 1], d)[0, 1] > 0.9
