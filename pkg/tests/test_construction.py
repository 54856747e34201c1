"""
Tests for the explicit local polynomial transformer and the inexact gradient descent reference.
"""

import math

import numpy as np
import pytest

from modules.construction import (SPECTRUM_FLOOR, ConstructionConfig, RegisterLayout, bounded_noise_injector,
                                  build_gd_block, build_preprocess_blocks, calibrate_spectrum, default_L0,
                                  default_T, gd_error_bound, inexact_gd_reference, locpol_transformer_builder,
                                  make_construction_config, register_gradient_injector, register_quantities)
from modules.datagen import Prompt
from modules.errors import InfeasibleConstructionError, LayoutMismatchError
from modules.locpol import (BasisSpec, KernelSpec, build_weighted_system, default_bandwidth, fit_locpol,
                           spectral_bounds)
from modules.transformer import ArchSpec, TransformerPredictor, block_forward, embed


def _plain_config(n, d, p=1, alpha=2.0, **kwargs):
    values = dict(n=n, d=d, alpha=alpha, M=1.0, p=p, h=default_bandwidth(n, alpha, d), L0=1.0, T=1,
                  eta=0.5, c_lo=1.0, c_hi=1.0)
    values.update(kwargs)
    return ConstructionConfig(**values)


def _small_build(n=32, T=10, **kwargs):
    cfg = make_construction_config(n, 1, 1.0, 1.0, c_lo=0.05, c_hi=0.7, T=T, **kwargs)
    params, report = locpol_transformer_builder.build(cfg)
    return cfg, params, report


@pytest.fixture(scope="module")
def built_small():
    return _small_build()


class TestRegisterLayout:
    def test_spans(self):
        lay = RegisterLayout(d=1, D=3)
        lay.validate()
        assert lay.d_e == 2 * 1 + 2 * 3 + 5
        assert lay.weight.start == 2 * 1 + 3 + 3
        assert lay.qflag == lay.d_e - 1
        assert lay.columns(lay.basis) == [4, 5, 6]

    def test_arch_mismatch(self):
        with pytest.raises(LayoutMismatchError):
            RegisterLayout(d=1, D=2).check_arch(ArchSpec(d_e=12, d_ffn=2, L=1, B=1.0, d=1, M=1.0))


class TestPreprocessing:
    @pytest.mark.parametrize("n", [8, 64, 256])
    @pytest.mark.parametrize("d", [1, 2])
    def test_columns_match_formula(self, n, d, prompt_factory):
        cfg = _plain_config(n, d)
        lay = cfg.layout
        blocks = build_preprocess_blocks(cfg)
        for _ in range(17):
            prompt = prompt_factory(n, d=d, fn=lambda x: np.cos(3 * x.sum(axis=-1)), noise=0.5)
            Z = embed(prompt, lay.d_e)
            for block in blocks:
                Z = block_forward(Z, block)
            diffs = (prompt.xs - prompt.query) / cfg.h
            sqrt_kernel = np.maximum(1.0 - np.abs(diffs).sum(axis=1), 0.0) / math.sqrt(n * cfg.h ** d)
            np.testing.assert_allclose(Z[:-1, lay.x_centered], diffs, atol=1e-12)
            np.testing.assert_allclose(Z[:-1, lay.sqrt_kernel], sqrt_kernel, atol=1e-12)
            np.testing.assert_allclose(Z[-1, lay.x_centered], 0.0, atol=1e-12)
            assert Z[-1, lay.sqrt_kernel] == pytest.approx(cfg.query_kernel_value, abs=1e-12)
            np.testing.assert_array_equal(Z[:, lay.ones], 1.0)
            np.testing.assert_array_equal(Z[:-1, lay.y], prompt.ys)
            np.testing.assert_array_equal(Z[:-1, lay.x_raw], prompt.xs)

    def test_parameter_magnitudes(self):
        cfg = _plain_config(64, 2)
        bound = max(1.0, cfg.d / cfg.h, cfg.query_kernel_value)
        assert max(block.max_abs() for block in build_preprocess_blocks(cfg)) <= bound
        assert [block.d_ffn for block in build_preprocess_blocks(cfg)] == [2, 4, 6]


class TestBasisBlocks:
    def test_weighted_design_reproduced(self, prompt_factory):
        cfg = make_construction_config(64, 1, 2.0, 1.0, c_lo=0.01, c_hi=0.7, T=1, L0=1)
        params, report = locpol_transformer_builder.build(cfg)
        tolerance = max(cfg.xi, 1e-10)
        lay = cfg.layout
        for _ in range(20):
            prompt = prompt_factory(64, fn=lambda x: 0.8 * np.sin(2 * np.pi * x[..., 0]), noise=0.5)
            trace = locpol_transformer_builder.forward_trace(params, cfg, prompt)
            X_tilde, Y_tilde = build_weighted_system(prompt, cfg.kernel, cfg.basis)
            assert np.max(np.abs(trace.Z_basis[:-1, lay.basis] - X_tilde)) <= tolerance
            assert np.max(np.abs(trace.Z_basis[:-1, lay.response] - Y_tilde)) <= tolerance
            np.testing.assert_allclose(trace.Z_basis[-1, lay.basis], 0.0, atol=tolerance)
            np.testing.assert_array_equal(trace.w_iterates[0], 0.0)

    def test_infeasible_depth_multiplier(self):
        cfg = _plain_config(64, 1, p=2, L0=0.01)
        assert cfg.xi > 1.0
        with pytest.raises(InfeasibleConstructionError):
            locpol_transformer_builder.build_basis_blocks(cfg)

    @pytest.mark.parametrize("n", [16, 64, 256, 1024])
    @pytest.mark.parametrize("p", [1, 2, 3])
    def test_default_depth_multiplier(self, n, p):
        cfg = _plain_config(n, 1, p=p, L0=default_L0(n, p, 1.0))
        assert cfg.xi <= n ** -3.0


class TestGdBlock:
    def test_one_step_by_hand(self):
        cfg = _plain_config(2, 1, p=1, eta=0.25)
        lay = cfg.layout
        Z = np.zeros((3, lay.d_e))
        Z[:, lay.ones] = 1.0
        Z[-1, lay.qflag] = 1.0
        Z[0, lay.basis] = [1.0, 0.0]
        Z[1, lay.basis] = [0.0, 1.0]
        Z[:2, lay.response] = 0.5
        out = block_forward(Z, build_gd_block(cfg))
        np.testing.assert_allclose(out[-1, lay.weight], 0.25 * np.ones(2), atol=1e-15)

    def test_fixed_point_at_minimizer(self):
        cfg = _plain_config(2, 1, p=1, eta=0.25)
        lay = cfg.layout
        Z = np.zeros((3, lay.d_e))
        Z[:, lay.ones] = 1.0
        Z[-1, lay.qflag] = 1.0
        Z[0, lay.basis] = [1.0, 0.0]
        Z[1, lay.basis] = [0.0, 1.0]
        Z[:2, lay.response] = 0.5
        Z[-1, lay.weight] = [0.5, 0.5]
        out = block_forward(Z, build_gd_block(cfg))
        np.testing.assert_array_equal(out[-1, lay.weight], [0.5, 0.5])

    def test_entries_bounded(self):
        cfg = _plain_config(16, 2, p=2, eta=0.8)
        assert build_gd_block(cfg).max_abs() <= max(2 * cfg.eta, 1.0)


class TestGdReference:
    def test_single_step(self):
        trace = inexact_gd_reference(np.eye(4), np.ones(4), T=1, eta=0.5)
        np.testing.assert_allclose(trace.iterates[1], np.ones(4))
        assert trace.T == 1

    def test_zero_fixed_point(self, rng):
        trace = inexact_gd_reference(rng.normal(size=(10, 3)), np.zeros(10), T=25, eta=0.01)
        np.testing.assert_array_equal(trace.iterates, 0.0)

    @pytest.mark.parametrize("eps", [0.0, 1e-4, 1e-2])
    def test_error_bound(self, eps, rng):
        for _ in range(50):
            D = int(rng.integers(1, 7))
            X = rng.normal(size=(40, D)) / math.sqrt(40)
            Y = rng.normal(size=40) / math.sqrt(40)
            lo, hi = spectral_bounds(X)
            C1, C2 = 2.0 * lo, 2.0 * hi
            w_star = np.linalg.solve(X.T @ X, X.T @ Y)
            injector = bounded_noise_injector(eps, rng) if eps > 0 else None
            T = 60
            trace = inexact_gd_reference(X, Y, T, 1.0 / C2, injector)
            np.testing.assert_allclose(trace.gradient_errors, eps, atol=1e-12)
            gap = np.linalg.norm(trace.iterates[-1] - w_star)
            assert gap <= gd_error_bound(C1, C2, T, eps, np.linalg.norm(w_star)) + 1e-12

    def test_register_injector_is_exact_gradient_without_query(self, rng):
        X, Y = rng.normal(size=(12, 3)), rng.normal(size=12)
        plain = inexact_gd_reference(X, Y, 8, 0.02)
        registered = inexact_gd_reference(X, Y, 8, 0.02, register_gradient_injector(X, Y, np.zeros(3), 0.0))
        np.testing.assert_allclose(registered.iterates, plain.iterates, atol=1e-14)


class TestLocPolTransformer:
    def test_blocks_follow_steps(self, built_small, prompt_factory):
        cfg, params, _ = built_small
        for _ in range(20):
            prompt = prompt_factory(32, fn=lambda x: 0.5 * np.cos(4 * x[..., 0]), noise=0.3)
            trace = locpol_transformer_builder.forward_trace(params, cfg, prompt)
            X_check, Y_check, a, b = register_quantities(trace.Z_basis, cfg.layout)
            reference = inexact_gd_reference(X_check, Y_check, cfg.T, cfg.eta,
                                             register_gradient_injector(X_check, Y_check, a, b))
            np.testing.assert_allclose(trace.w_iterates, reference.iterates, atol=1e-10)
            assert trace.output == pytest.approx(float(np.clip(trace.w_iterates[-1][0], -1.0, 1.0)), abs=1e-12)

    def test_block_count_and_bound(self, built_small):
        cfg, params, report = built_small
        assert params.arch.L == cfg.total_blocks == report.total_blocks
        assert report.gd_blocks == cfg.T and report.preprocess_blocks == 3
        assert params.max_abs_param() <= report.B_used
        assert report.B_used >= report.B_formula
        assert params.arch.d_e == cfg.layout.d_e

    def test_constant_task_output(self):
        n = 32
        cfg, params, _ = _small_build(n=n, T=400)
        xs = ((np.arange(n) + 0.5) / n)[:, None]
        prompt = Prompt(xs=xs, ys=np.full(n, 0.6), query=np.array([0.5]))
        assert TransformerPredictor(params)(prompt) == pytest.approx(0.6, abs=1e-8)

    def test_trace_rejects_foreign_config(self, built_small, prompt_factory):
        cfg, params, _ = built_small
        other = make_construction_config(32, 1, 1.0, 1.0, c_lo=0.05, c_hi=0.7, T=11)
        with pytest.raises(LayoutMismatchError):
            locpol_transformer_builder.forward_trace(params, other, prompt_factory(32))

    def test_doubling_steps_does_not_widen_gap(self, prompt_factory):
        prompts = [prompt_factory(32, fn=lambda x: 0.5 * np.sin(5 * x[..., 0]), noise=0.3) for _ in range(30)]
        medians = []
        for T in (20, 40):
            cfg, params, _ = _small_build(T=T)
            predictor = TransformerPredictor(params)
            gaps = [abs(predictor(p) - fit_locpol(p, cfg.kernel, cfg.basis, cfg.M).estimate) for p in prompts]
            medians.append(float(np.median(gaps)))
        assert medians[1] <= medians[0] + 1e-10


class TestConfigResolution:
    def test_eta_override_sets_upper_estimate(self):
        cfg = make_construction_config(64, 1, 2.0, 1.0, c_lo=0.01, c_hi=0.9, eta=0.5)
        assert cfg.c_hi == pytest.approx(1.0)
        assert cfg.eta == pytest.approx(0.5)

    def test_explicit_overrides(self):
        cfg = make_construction_config(64, 1, 2.0, 1.0, c_lo=0.1, c_hi=0.5, T=7, L0=2.0)
        assert (cfg.T, cfg.L0, cfg.eta, cfg.p) == (7, 2.0, 1.0, 2)
        assert cfg.h == pytest.approx(64 ** -0.2)

    def test_calibration_from_prompts(self, prompt_factory):
        prompts = [prompt_factory(64, noise=0.5) for _ in range(5)]
        cfg = make_construction_config(64, 1, 2.0, 1.0, calibration_prompts=prompts, T_cap=50)
        assert 0 < cfg.c_lo <= cfg.c_hi
        assert cfg.T <= 50

    def test_needs_spectrum_source(self):
        with pytest.raises(ValueError):
            make_construction_config(64, 1, 2.0, 1.0)

    def test_rank_deficient_calibration_is_floored(self):
        prompts = [Prompt(xs=[[0.50], [0.52]], ys=[0.0, 0.0], query=[0.51])] * 3
        c_lo, c_hi = calibrate_spectrum(prompts, KernelSpec(h=0.5), BasisSpec(d=1, p=2))
        assert c_hi > 0
        assert c_lo == pytest.approx(SPECTRUM_FLOOR * c_hi)

    def test_calibration_without_kernel_mass(self):
        prompts = [Prompt(xs=[[0.0]], ys=[0.0], query=[1.0])]
        with pytest.raises(InfeasibleConstructionError):
            calibrate_spectrum(prompts, KernelSpec(h=0.5), BasisSpec(d=1, p=1))

    def test_default_steps(self):
        assert default_T(100, 1.0, 2.0) == math.ceil(16 * math.log(100))
        assert default_T(100, 0.001, 1.0, T_cap=5000) == 5000

    def test_invalid_config(self):
        with pytest.raises(ValueError):
            _plain_config(1, 1)
        with pytest.raises(ValueError):
            _plain_config(16, 1, c_lo=2.0, c_hi=1.0)
