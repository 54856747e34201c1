"""
Tests for empirical and Monte Carlo risk, reverse-mode gradients, projected ERM and risk decomposition.
"""

import numpy as np
import pytest

from modules.construction import locpol_transformer_builder, make_construction_config
from modules.datagen import CovariateSpec, HolderSpec, NoiseSpec, PretrainSet, Prompt, PromptGenerator, sample_prompt
from modules.errors import TrainingDivergenceError
from modules.locpol import LocPolPredictor
from modules.training import (ConstantPredictor, OraclePredictor, TrainConfig, empirical_risk, population_risk_mc,
                              risk_trainer)
from modules.transformer import ArchSpec, TransformerParams, TransformerPredictor


def _constant_pset(task, n, gamma, rng, half_width=0.5):
    prompts = [sample_prompt(task, CovariateSpec.uniform(1), NoiseSpec(half_width), n, rng) for _ in range(gamma)]
    return PretrainSet(gamma=gamma, prompts=prompts)


class TestRisk:
    def test_empirical_risk_by_hand(self):
        prompts = [Prompt(xs=[[0.1]], ys=[0.0], query=[0.5], query_response=1.0),
                   Prompt(xs=[[0.2]], ys=[0.0], query=[0.5], query_response=0.0)]
        report = empirical_risk(ConstantPredictor(0.5), PretrainSet(gamma=2, prompts=prompts), sigma2=0.1)
        assert report.value == pytest.approx(0.25)
        assert report.stderr == 0.0
        assert report.excess_over_sigma2 == pytest.approx(0.15)

    def test_empirical_risk_needs_responses(self):
        prompts = [Prompt(xs=[[0.1]], ys=[0.0], query=[0.5])]
        with pytest.raises(ValueError):
            empirical_risk(ConstantPredictor(0.0), PretrainSet(gamma=1, prompts=prompts))

    def test_oracle_risk_is_noise_variance(self, specs_1d, rng):
        report = population_risk_mc(OraclePredictor(), specs_1d, 16, 2000, rng)
        sigma2 = specs_1d[2].sigma2
        assert abs(report.value - sigma2) <= 3 * report.stderr
        assert report.excess_over_sigma2 == pytest.approx(report.value - sigma2)

    def test_constant_predictor_on_zero_tasks(self, specs_1d, rng):
        report = population_risk_mc(ConstantPredictor(0.3), specs_1d, 8, 2000, rng, family="fourier", budget=0)
        expected = specs_1d[2].sigma2 + 0.09
        assert abs(report.value - expected) <= 3 * report.stderr

    def test_stderr_shrinks_with_tasks(self, specs_1d):
        small = population_risk_mc(ConstantPredictor(0.0), specs_1d, 8, 500, np.random.default_rng(1))
        large = population_risk_mc(ConstantPredictor(0.0), specs_1d, 8, 2000, np.random.default_rng(2))
        assert large.stderr / small.stderr == pytest.approx(0.5, abs=0.15)

    def test_needs_two_tasks(self, specs_1d, rng):
        with pytest.raises(ValueError):
            population_risk_mc(ConstantPredictor(0.0), specs_1d, 8, 1, rng)

    def test_shared_draws(self, specs_1d, rng):
        shared = risk_trainer.population_risk_mc_shared({"a": ConstantPredictor(0.0), "b": ConstantPredictor(0.0)},
                                                        specs_1d, 8, 50, rng)
        assert shared.reports["a"].value == shared.reports["b"].value
        assert list(shared.losses.columns) == ["a", "b"] and len(shared.losses) == 50


class TestGradient:
    def test_matches_finite_differences(self, holder_1d):
        generator = PromptGenerator(holder_1d, family="constant")
        worst = 0.0
        for config in range(20):
            rng = np.random.default_rng(100 + config)
            arch = ArchSpec(d_e=3 + config % 2, d_ffn=2 + config % 3, L=1 + config % 2, B=1.0, d=1, M=1.0)
            params = TransformerParams.random(arch, rng, scale=0.3)
            pset = generator.pretrain_set(6, 8, seed=config)
            report = risk_trainer.gradient_check(params, pset, n_coords=10, step=1e-5, rng=rng)
            assert report.coordinates.size == 10
            worst = max(worst, report.max_relative_error)
        assert worst <= 1e-5


class TestTrainErm:
    def test_zero_init_learns_constant(self, constant_task, rng):
        train, held_out = _constant_pset(constant_task, 8, 64, rng), _constant_pset(constant_task, 8, 200, rng)
        arch = ArchSpec(d_e=3, d_ffn=2, L=1, B=1.0, d=1, M=1.0)
        cfg = TrainConfig(optimizer="adam", step_size=0.02, batch_size=16, epochs=40, seed=3, progress=False)
        result = risk_trainer.train_erm(arch, train, cfg)
        baseline = NoiseSpec(0.5).sigma2 + 0.36
        assert result.best_history[-1] <= result.loss_history[0]
        assert empirical_risk(TransformerPredictor(result.params), held_out).value < baseline
        assert len(result.curve_frame()) == len(result.loss_history)

    def test_projection_keeps_bound(self, constant_task, rng):
        pset = _constant_pset(constant_task, 6, 32, rng)
        arch = ArchSpec(d_e=3, d_ffn=2, L=2, B=1.0, d=1, M=1.0)
        cfg = TrainConfig(step_size=0.05, batch_size=8, epochs=5, B=0.05, init_scale=0.05, progress=False)
        result = risk_trainer.train_erm(arch, pset, cfg)
        assert result.params.arch.B == 0.05
        assert result.params.max_abs_param() <= 0.05

    def test_divergence_is_reported(self, constant_task, rng):
        pset = _constant_pset(constant_task, 6, 32, rng, half_width=1e-3)
        arch = ArchSpec(d_e=3, d_ffn=2, L=1, B=1.0, d=1, M=1.0)
        init = TransformerParams.zeros(arch)
        init.blocks[0].b2[1] = 0.6
        cfg = TrainConfig(optimizer="gradient", step_size=1e7, batch_size=16, epochs=10, B=1e9, progress=False)
        with pytest.raises(TrainingDivergenceError) as excinfo:
            risk_trainer.train_erm(arch, pset, cfg, init=init)
        assert len(excinfo.value.loss_history) >= 2
        assert excinfo.value.loss_history[-1] > 10 * excinfo.value.loss_history[0]

    def test_batch_larger_than_set(self, constant_task, rng):
        pset = _constant_pset(constant_task, 4, 4, rng)
        with pytest.raises(ValueError):
            risk_trainer.train_erm(ArchSpec(3, 2, 1, 1.0, 1, 1.0), pset, TrainConfig(batch_size=8, progress=False))

    def test_clamp_mismatch(self, constant_task, rng):
        pset = _constant_pset(constant_task, 4, 8, rng)
        with pytest.raises(ValueError):
            risk_trainer.train_erm(ArchSpec(3, 2, 1, 1.0, 1, 2.0), pset, TrainConfig(batch_size=4, progress=False))

    @pytest.mark.parametrize("kwargs", [dict(optimizer="sgd"), dict(step_size=0.0), dict(schedule="cosine"),
                                        dict(batch_size=0)])
    def test_config_validation(self, kwargs):
        with pytest.raises(ValueError):
            TrainConfig(**kwargs)

    def test_inverse_sqrt_schedule(self):
        cfg = TrainConfig(step_size=0.1, schedule="inverse_sqrt")
        assert cfg.step_at(0) == pytest.approx(0.1)
        assert cfg.step_at(3) == pytest.approx(0.05)


class TestWarmStart:
    @pytest.fixture(scope="class")
    def constructed(self):
        construction = make_construction_config(16, 1, 1.0, 1.0, c_lo=0.05, c_hi=0.7, T=3)
        params, _ = locpol_transformer_builder.build(construction)
        return params

    def test_no_epochs_returns_init(self, constructed, constant_task, rng):
        pset = _constant_pset(constant_task, 16, 12, rng)
        cfg = TrainConfig(batch_size=4, epochs=0, init_scale=0.0, progress=False)
        result = risk_trainer.train_erm(constructed.arch, pset, cfg, init=constructed)
        np.testing.assert_array_equal(result.params.to_vector(), constructed.to_vector())
        assert result.params.arch == constructed.arch
        assert result.loss_history[0] == pytest.approx(empirical_risk(TransformerPredictor(constructed), pset).value,
                                                       rel=1e-10)
        assert result.best_epoch == 0

    def test_init_is_not_mutated(self, constructed, constant_task, rng):
        before = constructed.to_vector().copy()
        pset = _constant_pset(constant_task, 16, 12, rng)
        cfg = TrainConfig(optimizer="adam", step_size=1e-3, batch_size=4, epochs=2, progress=False)
        risk_trainer.train_erm(constructed.arch, pset, cfg, init=constructed)
        np.testing.assert_array_equal(constructed.to_vector(), before)

    def test_starts_at_constructed_risk(self, constructed, constant_task, rng):
        pset = _constant_pset(constant_task, 16, 24, rng)
        cfg = TrainConfig(optimizer="adam", step_size=1e-4, batch_size=8, epochs=3, progress=False)
        result = risk_trainer.train_erm(constructed.arch, pset, cfg, init=constructed)
        start = empirical_risk(TransformerPredictor(constructed), pset).value
        assert result.loss_history[0] == pytest.approx(start, rel=1e-10)
        assert result.best_history[-1] <= start
        assert all(later <= earlier for earlier, later in zip(result.best_history, result.best_history[1:]))
        assert result.params.max_abs_param() <= constructed.arch.B

    @pytest.mark.slow
    def test_trained_risk_tracks_estimator(self):
        n, holder = 64, HolderSpec(d=1, alpha=1.0, M=1.0)
        generator = PromptGenerator(holder, family="fourier")
        calibration_rng = np.random.default_rng(11)
        calibration = [generator.prompt(n, calibration_rng) for _ in range(50)]
        construction = make_construction_config(n, 1, 1.0, 1.0, calibration_prompts=calibration, T=20)
        constructed, _ = locpol_transformer_builder.build(construction)
        pset = generator.pretrain_set(n, 500, seed=12)
        cfg = TrainConfig(optimizer="adam", step_size=1e-4, batch_size=50, epochs=5, seed=13, progress=False)
        result = risk_trainer.train_erm(constructed.arch, pset, cfg, init=constructed)

        specs = (holder, CovariateSpec.uniform(1), NoiseSpec(half_width=0.5))
        shared = risk_trainer.population_risk_mc_shared(
            {"trained": TransformerPredictor(result.params),
             "locpol": LocPolPredictor(alpha=1.0, M=1.0, d=1, h=construction.h, p=construction.p),
             "zero": ConstantPredictor(0.0)}, specs, n, 400, np.random.default_rng(14))
        excess = {name: report.excess_over_sigma2 for name, report in shared.reports.items()}
        assert excess["trained"] <= 2.0 * excess["locpol"] + 0.01
        assert shared.reports["trained"].value < shared.reports["zero"].value


class TestRiskDecomposition:
    def test_equal_predictors_have_zero_gaps(self, specs_1d, rng):
        same = ConstantPredictor(0.1)
        frame = risk_trainer.risk_decomposition_report(same, same, same, specs_1d, 8, 30, rng)
        values = frame.set_index("quantity")["value"]
        assert values["gap_hat_tf"] == 0.0 and values["gap_tf_locpol"] == 0.0

    def test_gaps_telescope(self, specs_1d, rng):
        arch = ArchSpec(d_e=3, d_ffn=2, L=1, B=1.0, d=1, M=1.0)
        frame = risk_trainer.risk_decomposition_report(ConstantPredictor(0.2), ConstantPredictor(-0.1),
                                                       ConstantPredictor(0.0), specs_1d, 8, 40, rng,
                                                       arch=arch, gamma=1000)
        values = frame.set_index("quantity")["value"]
        total = values["gap_hat_tf"] + values["gap_tf_locpol"] + values["gap_locpol_sigma2"]
        assert values["excess_hat"] == pytest.approx(total, abs=1e-12)
        assert values["risk_hat"] - values["sigma2"] == pytest.approx(values["excess_hat"], abs=1e-12)
        assert values["expectation_tail"] > 0
        assert list(frame.columns) == ["quantity", "value", "stderr"]

    @pytest.mark.slow
    def test_estimator_beats_zero_predictor(self, specs_1d, rng):
        shared = risk_trainer.population_risk_mc_shared(
            {"locpol": LocPolPredictor(alpha=2.0, M=1.0, d=1), "zero": ConstantPredictor(0.0),
             "oracle": OraclePredictor()}, specs_1d, 256, 500, rng)
        losses = shared.losses
        assert (losses["locpol"] - losses["oracle"]).mean() > 0
        assert shared.reports["locpol"].value < shared.reports["zero"].value
