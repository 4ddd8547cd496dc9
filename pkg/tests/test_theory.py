"""Tests for Lipschitz estimation, step sizes, and the amortization gap bound."""

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from sparsefactor import model as M
from sparsefactor.errors import InvalidArgumentError
from sparsefactor.inference import EnergyParams, exact_minimizer_cd
from sparsefactor.theory import (LipschitzEstimates, convergence_curve,
                                 estimate_lipschitz, gap_bound,
                                 power_iteration_opnorm, random_linear_instance,
                                 safe_step_size, sparsity_vs_lambda)


class TestOperatorNorm:
    def test_matches_svd(self):
        rng = np.random.default_rng(0)
        for _ in range(10):
            w = rng.standard_normal((rng.integers(2, 9), rng.integers(2, 9)))
            assert power_iteration_opnorm(w) == pytest.approx(
                np.linalg.norm(w, 2), rel=1e-6)

    @given(st.integers(1, 6), st.integers(1, 6), st.integers(0, 100))
    @settings(max_examples=30)
    def test_never_exceeds_frobenius(self, r, c, seed):
        w = np.random.default_rng(seed).standard_normal((r, c))
        op = power_iteration_opnorm(w)
        assert op <= np.linalg.norm(w) + 1e-8
        assert op >= np.abs(w).max() / np.sqrt(min(r, c)) - 1e-8


class TestLipschitz:
    def test_linearized_is_exact(self):
        inst = random_linear_instance(np.random.default_rng(1))
        est = estimate_lipschitz(inst["bundle"])
        w = inst["bundle"].latent_path_matrix
        assert est.l_dec == pytest.approx(np.linalg.norm(w, 2), rel=1e-6)
        assert est.l_g == pytest.approx(2 * est.l_dec ** 2, rel=1e-10)

    def test_mlp_upper_bounds_empirical(self):
        cfg = M.ModelConfig(window=4, num_features=3, latent_dim=5,
                            num_horizons=4, h_dim=5, dec_hidden=(8, 6),
                            decoder_kind="mlp", dropout_rate=0.0)
        bundle = M.init_bundle(cfg, rng_seed=2)
        est = estimate_lipschitz(bundle, seed=3)
        assert est.l_dec >= est.extras["empirical_lower"] - 1e-9

    def test_gradient_constant_consistent_with_descent(self):
        # one prox-gradient step with alpha = 1/(l_g + 2 mu) never ascends
        rng = np.random.default_rng(4)
        for seed in range(10):
            inst = random_linear_instance(np.random.default_rng(seed))
            b = inst["bundle"]
            mu = 0.1
            alpha = safe_step_size(b, mu)
            est = estimate_lipschitz(b)
            assert alpha == pytest.approx(1.0 / (est.l_g + 2 * mu), rel=1e-6)


class TestGapBound:
    def test_formula(self):
        est = LipschitzEstimates(l_dec=2.0, l_c=3.0, l_g=8.0)
        assert gap_bound(est, l_match=4.0, beta=1.0) == pytest.approx(12.0)
        assert gap_bound(est, l_match=4.0, beta=4.0) == pytest.approx(6.0)

    def test_invalid_inputs_raise(self):
        est = LipschitzEstimates(l_dec=1.0, l_c=1.0, l_g=2.0)
        with pytest.raises(InvalidArgumentError):
            gap_bound(est, l_match=-1.0)
        with pytest.raises(InvalidArgumentError):
            gap_bound(est, l_match=1.0, beta=0.0)

    @given(st.floats(0.01, 10.0), st.floats(0.01, 10.0))
    @settings(max_examples=30)
    def test_monotone_in_match_loss_and_beta(self, l_match, beta):
        est = LipschitzEstimates(l_dec=1.5, l_c=2.0, l_g=4.5)
        assert gap_bound(est, l_match, beta) <= gap_bound(est, l_match * 2, beta) + 1e-12
        assert gap_bound(est, l_match, beta) >= gap_bound(est, l_match, beta * 2) - 1e-12


class TestConvergenceCurve:
    def test_suboptimality_decays(self):
        out = convergence_curve(num_instances=20, k_grid=(1, 5, 10), seed=0)
        sub = out["suboptimality"]
        assert sub[10] <= sub[5] <= sub[1]
        assert sub[10] <= 0.7 * sub[5]

    def test_envelope_constant_covers_grid(self):
        out = convergence_curve(num_instances=10, k_grid=(1, 2, 4, 8), seed=1)
        c = out["envelope_constant"]
        for k, v in out["suboptimality"].items():
            assert v <= c / k + 1e-12


class TestSparsitySweep:
    def test_active_count_nonincreasing_in_lambda(self):
        grid = (0.0, 0.5, 1.0, 2.0, 5.0)
        out = sparsity_vs_lambda(grid, num_instances=20, seed=2)
        vals = [out[l] for l in grid]
        assert all(a >= b - 1e-9 for a, b in zip(vals, vals[1:]))
        assert vals[0] == pytest.approx(6.0)  # lambda=0 leaves everything active


class TestRefinementVsOracleAtScale:
    def test_many_instances_match_cd(self):
        # smaller sibling of the acceptance-suite check
        from sparsefactor.inference import refine
        rng = np.random.default_rng(5)
        for _ in range(5):
            inst = random_linear_instance(rng)
            b = inst["bundle"]
            p = EnergyParams(lambda_l1=0.1, mu_prox=0.1, num_steps=500,
                             step_size=safe_step_size(b, 0.1))
            tr = refine(inst["y"], inst["h"], inst["anchor"], b, p)
            f_h = M.dec_forward_values(np.zeros(b.config.latent_dim),
                                       inst["h"].values, b)
            z_cd = exact_minimizer_cd(inst["y"].values, f_h, b.params["dec_Wz"].T,
                                      inst["anchor"].values, 0.1, 0.1)
            assert np.max(np.abs(tr.final_latent.values - z_cd)) < 1e-4
