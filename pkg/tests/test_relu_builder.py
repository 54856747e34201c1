"""
Tests for the constructive ReLU networks: products, monomials, composition and residual absorption.
"""

from itertools import product

import numpy as np
import pytest

from modules.errors import ShapeMismatchError
from modules.relu_builder import (NetSpec, absorb_residual, build_monomial_net, build_multiprod_net,
                                  build_product_net, build_square_stages, compose_elements, compose_nets)


def _grid(C, d, points):
    axis = np.linspace(-C, C, points)
    return np.array(list(product(axis, repeat=d)))


class TestSquareStages:
    @pytest.mark.parametrize("levels, stages", [(1, 1), (1, 4), (2, 3)])
    def test_square_error(self, levels, stages):
        s = np.linspace(-1.0, 1.0, 4001)[:, None]
        layers = compose_elements(build_square_stages(levels, stages), 1)
        approx = NetSpec(layers).evaluate(s)[:, 0]
        assert np.max(np.abs(approx - s[:, 0] ** 2)) <= 4.0 ** -(levels * stages + 1) + 1e-14

    def test_invalid_levels(self):
        with pytest.raises(ValueError):
            build_square_stages(0, 2)


class TestProductNet:
    def test_certified_error(self):
        net = build_product_net(C=1.0, N=2, L=6)
        assert net.cert_error == pytest.approx(0.375)
        grid = _grid(1.0, 2, 101)
        error = np.max(np.abs(net.evaluate(grid)[:, 0] - grid[:, 0] * grid[:, 1]))
        assert error <= net.cert_error
        assert net.width == 19 and net.depth == 6

    def test_scaling_identity(self, rng):
        C = 3.0
        unit, scaled = build_product_net(1.0, 2, 4), build_product_net(C, 2, 4)
        x = rng.uniform(-1.0, 1.0, size=(500, 2))
        np.testing.assert_allclose(scaled.evaluate(C * x), C * C * unit.evaluate(x), atol=1e-12 * C * C)

    def test_invalid_box(self):
        with pytest.raises(ValueError):
            build_product_net(C=0.5, N=1, L=1)


class TestMultiprodNet:
    def test_three_factor_product(self):
        net = build_multiprod_net(C=1.0, k=3, N=1, L=1)
        assert net.cert_error == pytest.approx(30.0 * 2 * 2.0 ** -21)
        assert net.depth == 42 and net.width == 23
        grid = _grid(1.0, 3, 21)
        error = np.max(np.abs(net.evaluate(grid)[:, 0] - np.prod(grid, axis=1)))
        assert error <= net.cert_error

    def test_needs_two_factors(self):
        with pytest.raises(ValueError):
            build_multiprod_net(C=1.0, k=1, N=1, L=1)


class TestMonomialNet:
    def test_constant_monomial(self, rng):
        net = build_monomial_net((0, 0), C=2.0, N=1, L=1)
        np.testing.assert_array_equal(net.evaluate(rng.uniform(-2, 2, (50, 2)))[:, 0], 1.0)

    def test_linear_monomial_is_exact(self, rng):
        net = build_monomial_net((1, 0), C=2.0, N=1, L=1)
        x = rng.uniform(-2, 2, (200, 2))
        np.testing.assert_array_equal(net.evaluate(x)[:, 0], x[:, 0])

    def test_mixed_monomial(self):
        net = build_monomial_net((1, 1), C=1.0, N=1, L=1)
        grid = _grid(1.0, 2, 51)
        error = np.max(np.abs(net.evaluate(grid)[:, 0] - grid[:, 0] * grid[:, 1]))
        assert error <= net.cert_error
        assert net.depth == net.formula_bounds["depth"] == 15

    @pytest.mark.parametrize("N, L", [(1, 1), (2, 2)])
    @pytest.mark.parametrize("d", [1, 2])
    def test_certification_sweep(self, N, L, d):
        C = 2.0
        grid = _grid(C, d, 41)
        for nu in product(range(4), repeat=d):
            if sum(nu) > 3:
                continue
            net = build_monomial_net(nu, C=C, N=N, L=L)
            k = max(sum(nu), 1)
            assert net.cert_error == pytest.approx(30.0 * C ** k * (k - 1) * (N + 1.0) ** (-7 * k * L))
            truth = np.prod(grid ** np.array(nu), axis=1)
            error = np.max(np.abs(net.evaluate(grid)[:, 0] - truth))
            assert error <= net.cert_error + 1e-12 * C ** k
            assert net.width == 9 * (N + 1) + 2 * k - 1
            assert net.depth == 7 * k * L * (k - 1) + 1

    def test_degree_above_cap(self):
        with pytest.raises(ValueError):
            build_monomial_net((2, 1), C=1.0, N=1, L=1, k=2)


class TestComposition:
    def test_identity_composition(self, rng):
        net = build_product_net(1.0, 1, 2)
        composed = compose_nets(net, NetSpec.identity(1))
        x = rng.uniform(-1, 1, (300, 2))
        np.testing.assert_allclose(composed.evaluate(x), net.evaluate(x), atol=1e-15)
        assert composed.depth == net.depth

    def test_depth_one_pair(self, rng):
        f1 = NetSpec([(rng.normal(size=(4, 3)), rng.normal(size=4)), (rng.normal(size=(2, 4)), rng.normal(size=2))])
        f2 = NetSpec([(rng.normal(size=(5, 2)), rng.normal(size=5)), (rng.normal(size=(1, 5)), rng.normal(size=1))])
        composed = compose_nets(f1, f2)
        x = rng.normal(size=(1000, 3))
        assert composed.depth == 2
        np.testing.assert_allclose(composed.evaluate(x), f2.evaluate(f1.evaluate(x)), atol=1e-12)
        assert composed.bound_certificate >= max(f1.bound_certificate, f2.bound_certificate)

    def test_dimension_mismatch(self):
        with pytest.raises(ShapeMismatchError):
            compose_nets(NetSpec.identity(2), NetSpec.identity(3))

    def test_error_certificate_propagates(self):
        inner = build_product_net(1.0, 1, 1)
        outer = NetSpec.affine(np.array([[2.0]]))
        assert compose_nets(inner, outer).cert_error == pytest.approx(2.0 * inner.cert_error)


class TestResidualAbsorption:
    def test_zero_target_cancels_input(self, rng):
        rewrite = absorb_residual(np.zeros((3, 3)), np.zeros((3, 3)), np.zeros(3), np.zeros(3), B=1.0)
        x = rng.normal(size=(100, 3))
        np.testing.assert_allclose(rewrite.apply(x), 0.0, atol=1e-15)

    def test_identity_holds(self, rng):
        W1, W2 = rng.uniform(-1, 1, (3, 3)), rng.uniform(-1, 1, (3, 3))
        b1, b2 = rng.uniform(-1, 1, 3), rng.uniform(-1, 1, 3)
        rewrite = absorb_residual(W1, W2, b1, b2, B=1.0)
        x = rng.normal(size=(1000, 3))
        plain = np.maximum(x @ W1.T + b1, 0.0) @ W2.T + b2
        np.testing.assert_allclose(rewrite.apply(x), plain, atol=1e-12)
        assert rewrite.width == 9

    def test_bound_below_one(self):
        with pytest.raises(ValueError):
            absorb_residual(np.zeros((1, 1)), np.zeros((1, 1)), np.zeros(1), np.zeros(1), B=0.5)

    def test_parameters_above_bound(self):
        with pytest.raises(ValueError):
            absorb_residual(np.full((1, 1), 3.0), np.zeros((1, 1)), np.zeros(1), np.zeros(1), B=2.0)
