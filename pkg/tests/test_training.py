"""Tests for the optimizer, schedules, alignment metric, and the training loop."""

import math

import numpy as np
import pytest

from sparsefactor import model as M
from sparsefactor import training as T
from sparsefactor.datasets import SampleSet
from sparsefactor.errors import DegenerateTestError, InvalidArgumentError
from sparsefactor.inference import EnergyParams, refine


def tiny_model_config(**kw):
    base = dict(window=5, num_features=4, latent_dim=3, num_horizons=2,
                h_dim=6, dec_hidden=(8, 6), decoder_kind="linearized",
                dropout_rate=0.0)
    base.update(kw)
    return M.ModelConfig(**base)


def toy_samples(n=24, cfg=None, seed=0):
    cfg = cfg or tiny_model_config()
    rng = np.random.default_rng(seed)
    w = rng.standard_normal((cfg.latent_dim, cfg.num_horizons))
    z = rng.standard_normal((n, cfg.latent_dim))
    feats = rng.standard_normal((n, cfg.window, cfg.num_features))
    feats[:, -1, :cfg.latent_dim] = z  # latents visible in the last row
    targets = z @ w + 0.05 * rng.standard_normal((n, cfg.num_horizons))
    return SampleSet(features=feats, masks=np.ones_like(feats), targets=targets,
                     horizons=(1, 5))


class TestConfig:
    def test_negative_weights_raise(self):
        with pytest.raises(InvalidArgumentError):
            T.TrainConfig(beta_match=-1.0)
        with pytest.raises(InvalidArgumentError):
            T.TrainConfig(gamma_contrast=-0.5)

    def test_bad_schedule_raises(self):
        with pytest.raises(InvalidArgumentError):
            T.TrainConfig(lr_schedule="linear")


class TestAdam:
    def test_first_step_moves_by_lr(self):
        # with bias correction the first update has magnitude ~lr per coord
        state = T.AdamState(m=np.zeros(3), v=np.zeros(3))
        p = np.zeros(3)
        g = np.array([0.5, -2.0, 1e-3])
        out = T.adam_step(p, g, state, learning_rate=0.1)
        assert np.allclose(np.abs(out), 0.1, atol=1e-3)
        assert np.all(np.sign(out) == -np.sign(g))

    def test_clip_rescales_only_above_threshold(self):
        g = np.array([3.0, 4.0])
        assert np.allclose(T.clip_by_global_norm(g, 10.0), g)
        clipped = T.clip_by_global_norm(g, 1.0)
        assert np.linalg.norm(clipped) == pytest.approx(1.0)
        assert np.allclose(clipped / np.linalg.norm(clipped),
                           g / np.linalg.norm(g))


class TestSchedule:
    def test_cosine_endpoints(self):
        cfg = T.TrainConfig(learning_rate=1e-3, max_epochs=11)
        assert T.schedule_lr(cfg, 0) == pytest.approx(1e-3)
        assert T.schedule_lr(cfg, 10) == pytest.approx(0.0, abs=1e-12)
        assert T.schedule_lr(cfg, 5) == pytest.approx(5e-4)

    def test_constant(self):
        cfg = T.TrainConfig(learning_rate=2e-4, lr_schedule="constant")
        assert T.schedule_lr(cfg, 7) == 2e-4


class TestAlignment:
    def test_perfect_match_gives_unit_scores(self):
        z = np.random.default_rng(0).standard_normal((10, 4))
        r2, cos = T.compute_alignment(z, z)
        assert r2 == pytest.approx(1.0)
        assert cos == pytest.approx(1.0)

    def test_known_r2(self):
        z = np.array([[1.0, 0.0], [0.0, 1.0], [-1.0, 0.0], [0.0, -1.0]])
        r2, _ = T.compute_alignment(z, np.zeros_like(z))
        assert r2 == pytest.approx(0.0)

    def test_degenerate_refined_set_raises(self):
        with pytest.raises(DegenerateTestError):
            T.compute_alignment(np.ones((5, 3)), np.ones((5, 3)))

    def test_shape_mismatch_raises(self):
        with pytest.raises(InvalidArgumentError):
            T.compute_alignment(np.zeros((4, 2)), np.zeros((4, 3)))


class TestRefineBatch:
    def test_matches_single_sample_refine(self):
        cfg = tiny_model_config()
        bundle = M.init_bundle(cfg, rng_seed=1)
        rng = np.random.default_rng(2)
        b = 4
        y = rng.standard_normal((b, cfg.num_horizons))
        h = rng.standard_normal((b, cfg.h_dim))
        anchor = rng.standard_normal((b, cfg.latent_dim))
        p = EnergyParams(lambda_l1=0.3, mu_prox=0.1, step_size=0.01, num_steps=12)
        z_batch = T.refine_batch(y, h, anchor, bundle, p)
        for j in range(b):
            tr = refine(M.TargetVector(y[j], horizons=(1, 5)),
                        M.HistoryContext(h[j]),
                        M.LatentCode(anchor[j]), bundle, p)
            assert np.allclose(z_batch[j], tr.final_latent.values, atol=1e-12)

    def test_energies_never_increase_with_safe_step(self):
        from sparsefactor.theory import safe_step_size
        cfg = tiny_model_config()
        bundle = M.init_bundle(cfg, rng_seed=3)
        rng = np.random.default_rng(4)
        y = rng.standard_normal((6, cfg.num_horizons))
        h = rng.standard_normal((6, cfg.h_dim))
        anchor = rng.standard_normal((6, cfg.latent_dim))
        p = EnergyParams(lambda_l1=0.2, mu_prox=0.1,
                         step_size=safe_step_size(bundle, 0.1), num_steps=25)
        _, energies = T.refine_batch(y, h, anchor, bundle, p, return_energies=True)
        assert np.all(np.diff(energies, axis=0) <= 1e-10)


class TestEffectiveEnergyParams:
    def test_auto_step_uses_operator_norm(self):
        cfg = tiny_model_config()
        bundle = M.init_bundle(cfg, rng_seed=5)
        tc = T.TrainConfig(auto_step=True,
                           energy_params=EnergyParams(mu_prox=0.2))
        ep = T.effective_energy_params(bundle, tc)
        op = np.linalg.norm(bundle.latent_path_matrix, 2)
        assert ep.step_size == pytest.approx(1.0 / (2 * op * op + 0.4), rel=1e-6)

    def test_disabled_returns_configured_params(self):
        cfg = tiny_model_config()
        bundle = M.init_bundle(cfg, rng_seed=6)
        tc = T.TrainConfig(auto_step=False)
        assert T.effective_energy_params(bundle, tc) is tc.energy_params


class TestTwoStageLoop:
    def test_short_run_improves_val_rmse(self):
        cfg = tiny_model_config()
        samples = toy_samples(n=60, cfg=cfg)
        splits = {"train": samples.subset(slice(0, 40)),
                  "val": samples.subset(slice(40, 60))}
        tc = T.TrainConfig(max_epochs=15, batch_size=20, learning_rate=3e-3,
                           lr_schedule="constant", patience=15, seed=0,
                           energy_params=EnergyParams(lambda_l1=0.1, num_steps=5),
                           use_dropout=False)
        bundle, report = T.train_two_stage(splits, cfg, tc)
        rmses = report.history("val_rmse")
        assert report.best_val_rmse <= rmses[0]
        assert len(report.epochs) <= 15

    def test_empty_split_raises(self):
        cfg = tiny_model_config()
        with pytest.raises(InvalidArgumentError):
            T.train_two_stage({"train": None, "val": None}, cfg, T.TrainConfig())

    def test_callback_sees_every_epoch(self):
        cfg = tiny_model_config()
        samples = toy_samples(n=30, cfg=cfg)
        splits = {"train": samples.subset(slice(0, 20)),
                  "val": samples.subset(slice(20, 30))}
        seen = []
        tc = T.TrainConfig(max_epochs=3, batch_size=10, patience=5,
                           use_dropout=False)
        T.train_two_stage(splits, cfg, tc,
                          epoch_callback=lambda e, b, r: seen.append(e))
        assert seen == [0, 1, 2]


class TestWarmStart:
    def test_requires_linearized_decoder(self):
        cfg = tiny_model_config(decoder_kind="mlp")
        samples = toy_samples(n=30)
        with pytest.raises(InvalidArgumentError):
            T.warm_start_bundle({"train": samples}, cfg, T.TrainConfig())

    def test_dictionary_planted_and_encoder_fits(self):
        cfg = tiny_model_config()
        samples = toy_samples(n=80, cfg=cfg, seed=7)
        tc = T.TrainConfig(batch_size=20, seed=1,
                           energy_params=EnergyParams(lambda_l1=0.2))
        bundle = T.warm_start_bundle({"train": samples}, cfg, tc,
                                     dict_iters=20, pretrain_epochs=15)
        # decoder context head starts at the constant target mean
        assert np.allclose(bundle.params["dec_f_W3"], 0.0)
        assert np.allclose(bundle.params["dec_f_b3"], samples.targets.mean(0))
        # atoms are unit rows
        assert np.allclose(np.linalg.norm(bundle.params["dec_Wz"], axis=1), 1.0)

    def test_pretrain_loss_decreases(self):
        cfg = tiny_model_config()
        samples = toy_samples(n=60, cfg=cfg, seed=8)
        rng = np.random.default_rng(9)
        codes = rng.standard_normal((60, cfg.latent_dim))
        bundle = M.init_bundle(cfg, rng_seed=10)
        tc = T.TrainConfig(batch_size=20, seed=2)
        losses = T.pretrain_encoder(samples, codes, bundle, tc, epochs=12,
                                    learning_rate=3e-3)
        assert losses[-1] < losses[0]

    def test_code_shape_mismatch_raises(self):
        cfg = tiny_model_config()
        samples = toy_samples(n=10, cfg=cfg)
        bundle = M.init_bundle(cfg, rng_seed=11)
        with pytest.raises(InvalidArgumentError):
            T.pretrain_encoder(samples, np.zeros((10, cfg.latent_dim + 1)),
                               bundle, T.TrainConfig())


class TestContrastive:
    def test_loss_is_in_unit_interval(self):
        cfg = tiny_model_config()
        samples = toy_samples(n=16, cfg=cfg)
        bundle_cfg = T.TrainConfig(gamma_contrast=0.1, batch_size=16)
        bundle = M.init_bundle(cfg, rng_seed=12)
        loss = T.contrastive_loss(samples, bundle, bundle_cfg)
        assert 0.0 <= loss <= 1.0

    def test_batch_of_one_raises(self):
        cfg = tiny_model_config()
        samples = toy_samples(n=16, cfg=cfg).subset(slice(0, 1))
        bundle = M.init_bundle(cfg, rng_seed=13)
        with pytest.raises(InvalidArgumentError):
            T.contrastive_loss(samples, bundle, T.TrainConfig(gamma_contrast=0.1))
