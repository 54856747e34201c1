"""
Tests for Hölder classes, task sampling, Hölder verification and prompt generation.
"""

import numpy as np
import pytest

import modules.datagen as datagen
from modules.datagen import (CovariateSpec, HolderSpec, NoiseSpec, PromptGenerator, RegressionTask,
                             holder_check, sample_prompt, sample_task, spawn_streams)
from modules.errors import UnsatisfiableSpecError


class TestHolderSpec:
    def test_underline_alpha(self):
        assert HolderSpec(d=1, alpha=2.0, M=1.0).underline_alpha == 1
        assert HolderSpec(d=1, alpha=1.0, M=1.0).underline_alpha == 0
        assert HolderSpec(d=2, alpha=0.5, M=1.0).underline_alpha == 0
        assert HolderSpec(d=1, alpha=2.5, M=1.0).holder_exponent == pytest.approx(0.5)

    @pytest.mark.parametrize("d, alpha, M", [(0, 1.0, 1.0), (1, 0.0, 1.0), (1, 1.0, -1.0)])
    def test_rejects_invalid(self, d, alpha, M):
        with pytest.raises(ValueError):
            HolderSpec(d=d, alpha=alpha, M=M)


class TestCovariatesAndNoise:
    def test_uniform_mean(self, rng):
        xs = CovariateSpec.uniform(2).sample(100_000, rng)
        np.testing.assert_allclose(xs.mean(axis=0), 0.5, atol=0.01)

    def test_tilted_density_integrates_to_one(self):
        grid = (np.arange(10_000) + 0.5) / 10_000
        density = CovariateSpec.tilted(1).density(grid[:, None])
        assert density.mean() == pytest.approx(1.0, abs=1e-9)

    def test_tilted_sample_mean(self, rng):
        xs = CovariateSpec.tilted(1).sample(100_000, rng)
        assert xs.shape == (100_000, 1)
        # E[x] = (1/2 + 1/6) / 1.25
        assert xs.mean() == pytest.approx((0.5 + 1.0 / 6.0) / 1.25, abs=0.01)

    def test_uniform_requires_unit_bounds(self):
        with pytest.raises(ValueError):
            CovariateSpec(d=1, density_kind="uniform", c_X=0.5, C_X=1.0)

    def test_noise_variance(self, rng):
        noise = NoiseSpec(half_width=0.5)
        assert noise.sigma2 == pytest.approx(0.25 / 3.0)
        draws = noise.sample(200_000, rng)
        assert np.max(np.abs(draws)) <= 0.5
        assert draws.var() == pytest.approx(noise.sigma2, rel=0.02)

    @pytest.mark.parametrize("b", [0.0, 1.5])
    def test_noise_support(self, b):
        with pytest.raises(ValueError):
            NoiseSpec(half_width=b)


class TestHolderCheck:
    def test_zero_task(self, holder_1d):
        report = holder_check(RegressionTask.zero(holder_1d))
        assert report.max_abs_value == 0.0
        assert report.max_holder_quotient == 0.0

    def test_linear_task_quotient(self):
        spec = HolderSpec(d=1, alpha=1.0, M=0.7)
        task = RegressionTask.polynomial(spec, [((1,), 0.7)])
        report = holder_check(task)
        assert report.max_holder_quotient == pytest.approx(0.7, rel=1e-9)
        assert report.max_abs_value == pytest.approx(0.7, rel=1e-12)

    def test_scaling_is_linear(self, holder_1d, rng):
        task = sample_task(holder_1d, 4, rng)
        base, scaled = holder_check(task, 128), holder_check(task.rescaled(3.0), 128)
        assert scaled.max_abs_value == pytest.approx(3.0 * base.max_abs_value, rel=1e-12)
        assert scaled.max_holder_quotient == pytest.approx(3.0 * base.max_holder_quotient, rel=1e-12)

    def test_grid_resolution_minimum(self, holder_1d):
        with pytest.raises(ValueError):
            holder_check(RegressionTask.zero(holder_1d), grid_resolution=1)


class TestSampleTask:
    def test_zero_budget(self, rng):
        spec = HolderSpec(d=1, alpha=1.0, M=1.0)
        task = sample_task(spec, 0, rng)
        assert task.n_terms == 0
        assert task(np.array([[0.3]]))[0] == 0.0

    def test_sampled_task_in_ball(self, holder_1d, rng):
        for _ in range(5):
            task = sample_task(holder_1d, 8, rng)
            values = task(np.linspace(0.0, 1.0, 100_000)[:, None])
            assert np.max(np.abs(values)) <= holder_1d.M
            report = holder_check(task)
            assert report.max_holder_quotient <= holder_1d.M
            assert report.max_abs_value <= holder_1d.M

    def test_cosine_second_derivative(self, holder_1d):
        a = 0.01
        task = RegressionTask(holder_1d, np.array([[1]]), np.array([a]), np.array([0.0]))
        x = np.linspace(0.0, 1.0, 10_001)[:, None]
        analytic = task.derivative(x, (2,))
        step = 1e-4
        first_plus, first_minus = task.derivative(x + step, (1,)), task.derivative(x - step, (1,))
        np.testing.assert_allclose(analytic, (first_plus - first_minus) / (2 * step), atol=1e-5)
        np.testing.assert_allclose(analytic, -a * (2 * np.pi) ** 2 * np.cos(2 * np.pi * x[:, 0]), atol=1e-12)

    def test_deterministic_given_coefficients(self, holder_1d):
        first = sample_task(holder_1d, 6, np.random.default_rng(3))
        second = sample_task(holder_1d, 6, np.random.default_rng(3))
        x = np.random.default_rng(0).random((50, 1))
        np.testing.assert_array_equal(first(x), second(x))

    def test_rejection_limit(self, holder_1d, rng, monkeypatch):
        monkeypatch.setattr(datagen, "_rescale_into_ball", lambda raw, grid: None)
        with pytest.raises(UnsatisfiableSpecError):
            sample_task(holder_1d, 4, rng, max_rejections=3)

    def test_negative_budget(self, holder_1d, rng):
        with pytest.raises(ValueError):
            sample_task(holder_1d, -1, rng)


class TestSamplePrompt:
    def test_zero_task_responses_within_noise(self, holder_1d, rng):
        noise = NoiseSpec(half_width=1e-6)
        prompt = sample_prompt(RegressionTask.zero(holder_1d), CovariateSpec.uniform(1), noise, 500, rng)
        assert np.max(np.abs(prompt.ys)) <= 1e-6
        assert prompt.truth_at_query == 0.0

    def test_responses_follow_task(self, holder_1d, rng, constant_task):
        prompt = sample_prompt(constant_task, CovariateSpec.uniform(1), NoiseSpec(0.5), 300, rng)
        assert prompt.n == 300 and prompt.d == 1
        assert np.max(np.abs(prompt.ys - 0.6)) <= 0.5
        assert prompt.truth_at_query == pytest.approx(0.6)
        assert abs(prompt.query_response - 0.6) <= 0.5

    def test_fixed_seed_is_bit_identical(self, holder_1d):
        generator = PromptGenerator(holder_1d)
        first = generator.prompts(32, 3, seed=11)
        second = generator.prompts(32, 3, seed=11)
        for a, b in zip(first, second):
            np.testing.assert_array_equal(a.xs, b.xs)
            np.testing.assert_array_equal(a.ys, b.ys)
            assert a.query_response == b.query_response

    def test_rejects_empty_prompt(self, holder_1d, rng):
        with pytest.raises(ValueError):
            sample_prompt(RegressionTask.zero(holder_1d), CovariateSpec.uniform(1), NoiseSpec(), 0, rng)

    def test_dimension_mismatch(self, holder_1d, rng):
        with pytest.raises(ValueError):
            sample_prompt(RegressionTask.zero(holder_1d), CovariateSpec.uniform(2), NoiseSpec(), 5, rng)


class TestPromptGenerator:
    def test_pretrain_set_has_independent_tasks(self, holder_1d):
        pset = PromptGenerator(holder_1d, family="constant").pretrain_set(16, 10, seed=5)
        assert pset.gamma == 10 and pset.n == 16 and pset.seed == 5
        constants = {round(float(p.task(np.zeros((1, 1)))[0]), 12) for p in pset.prompts}
        assert len(constants) == 10

    def test_polynomial_family_in_ball(self, holder_1d, rng):
        task = PromptGenerator(holder_1d, family="polynomial").task(rng)
        assert holder_check(task).max_holder_quotient <= holder_1d.M

    def test_unknown_family(self, holder_1d):
        with pytest.raises(ValueError):
            PromptGenerator(holder_1d, family="splines")

    def test_spawned_streams_differ(self):
        a, b = spawn_streams(1, 2)
        assert a.random() != b.random()
