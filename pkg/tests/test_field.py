import cmath

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import random_instance, random_weights
from shimkit.errors import DimensionError, DomainError
from shimkit.field import (
    ComplexImage,
    Mask,
    ShimWeights,
    TargetProfile,
    canonicalize_phase,
    forward_field,
    quadrature_weights,
    rmse,
    shim_objective,
)


def loop_forward(data, w):
    # straight-line oracle: explicit triple loop
    h, wd, c = data.shape
    out = np.zeros((h, wd), dtype=complex)
    for i in range(h):
        for j in range(wd):
            acc = 0j
            for k in range(c):
                acc += data[i, j, k] * w[k]
            out[i, j] = acc
    return out


def loop_objective(data, bits, m, lam, w):
    total = 0.0
    for i in range(data.shape[0]):
        for j in range(data.shape[1]):
            if bits[i, j]:
                y = sum(data[i, j, k] * w[k] for k in range(data.shape[2]))
                total += (abs(y) - m) ** 2
    return total + lam * sum(abs(x) ** 2 for x in w)


def one_voxel(a, m=1.0, lam=0.0):
    return ComplexImage(np.array(a, dtype=complex).reshape(1, 1, -1)), Mask(np.ones((1, 1))), TargetProfile(m, lam)


class TestForwardField:
    def test_single_contributing_coil(self):
        b1 = ComplexImage(np.array([[[1.0, 0.0]]]))
        np.testing.assert_array_equal(forward_field(b1, [5, 9]), [[5]])

    def test_identity_rows(self):
        b1 = ComplexImage(np.eye(2).reshape(1, 2, 2))
        np.testing.assert_array_equal(forward_field(b1, [1, 1j]), [[1, 1j]])

    def test_matches_loop_oracle(self, rng):
        data = rng.normal(size=(2, 2, 3)) + 1j * rng.normal(size=(2, 2, 3))
        w = random_weights(rng, 3)
        np.testing.assert_allclose(forward_field(ComplexImage(data), w), loop_forward(data, w), rtol=0, atol=1e-12)

    def test_channel_mismatch(self):
        with pytest.raises(DimensionError):
            forward_field(ComplexImage(np.ones((2, 2, 3))), [1, 2])


class TestObjective:
    def test_forced_arithmetic(self):
        b1, mask, target = one_voxel([1.0], 1.0, 0.1)
        assert shim_objective(b1, mask, target, [0.9]) == pytest.approx(0.091, abs=1e-15)

    def test_perfect_fit(self, rng):
        b1, mask, _ = random_instance(rng)
        w = random_weights(rng, 3)
        m = np.abs(forward_field(b1, w))[mask.bits]
        assert shim_objective(b1, mask, TargetProfile(m, 0.0), w) == pytest.approx(0.0, abs=1e-24)

    def test_matches_loop_oracle(self, rng):
        data = rng.normal(size=(1, 5, 2)) + 1j * rng.normal(size=(1, 5, 2))
        bits = np.array([[True, False, True, True, True]])
        w = random_weights(rng, 2)
        got = shim_objective(ComplexImage(data), Mask(bits), TargetProfile(1.0, 0.3), w)
        assert got == pytest.approx(loop_objective(data, bits, 1.0, 0.3, w), abs=1e-12)

    def test_empty_mask(self):
        with pytest.raises(DomainError):
            shim_objective(ComplexImage(np.ones((2, 2, 1))), Mask(np.zeros((2, 2))), TargetProfile(), [1])


class TestRmse:
    def test_single_voxel(self):
        b1, mask, target = one_voxel([0.9])
        assert rmse(b1, mask, target, [1.0]) == pytest.approx(0.1, abs=1e-15)
        assert 100 * rmse(b1, mask, target, [1.0]) == pytest.approx(10.0, abs=1e-12)

    def test_exact_fit(self):
        b1, mask, target = one_voxel([2.0])
        assert rmse(b1, mask, target, [0.5]) == 0.0

    def test_three_voxels(self):
        # |Ab| = m + residual with m = 1
        data = np.array([1.1, 0.8, 1.2]).reshape(1, 3, 1)
        got = rmse(ComplexImage(data), Mask(np.ones((1, 3))), TargetProfile(), [1.0])
        assert got == pytest.approx(0.17320508, abs=1e-8)
        assert got == pytest.approx(np.sqrt(0.09 / 3), abs=1e-15)

    def test_counts_masked_voxels_only(self):
        data = np.array([0.9, 123.0]).reshape(1, 2, 1)
        got = rmse(ComplexImage(data), Mask(np.array([[True, False]])), TargetProfile(), [1.0])
        assert got == pytest.approx(0.1)


class TestCanonicalize:
    def test_rotate_minus_quarter_turn(self):
        out = canonicalize_phase([1j, 1])
        np.testing.assert_allclose(out.values, [1, -1j], atol=1e-15)
        assert out.values[0].imag == 0.0

    def test_idempotent(self, rng):
        once = canonicalize_phase(random_weights(rng, 8))
        assert canonicalize_phase(once) == once

    def test_rmse_unchanged(self, rng):
        b1, mask, target = random_instance(rng)
        w = random_weights(rng, 3)
        assert rmse(b1, mask, target, canonicalize_phase(w)) == pytest.approx(rmse(b1, mask, target, w), abs=1e-12)

    def test_zero_first_weight_uses_next(self):
        out = canonicalize_phase([0, -2j, 1])
        np.testing.assert_allclose(out.values, [0, 2, 1j], atol=1e-15)

    def test_all_zero_unchanged(self):
        assert canonicalize_phase([0, 0]) == ShimWeights([0, 0])


class TestQuadrature:
    def test_eight_coils(self):
        w = quadrature_weights(8).values
        np.testing.assert_allclose(np.abs(w), 1.0, atol=1e-15)
        np.testing.assert_allclose(np.degrees(np.angle(w)) % 360, np.arange(0, 360, 45), atol=1e-12)

    def test_single_coil(self):
        assert quadrature_weights(1) == ShimWeights([1])

    def test_four_coils_exact(self):
        assert quadrature_weights(4) == ShimWeights([1, 1j, -1, -1j])

    def test_zero_coils(self):
        with pytest.raises(DomainError):
            quadrature_weights(0)

    def test_canonical(self):
        w = quadrature_weights(8)
        assert canonicalize_phase(w) == w


seeds = st.integers(0, 2**32 - 1)


@settings(max_examples=50, deadline=None)
@given(seeds, st.floats(-10, 10))
def test_global_phase_gauge(seed, psi):
    rng = np.random.default_rng(seed)
    b1, mask, target = random_instance(rng, lam=0.2)
    w = random_weights(rng, 3)
    rot = w * cmath.exp(1j * psi)
    assert abs(rmse(b1, mask, target, rot) - rmse(b1, mask, target, w)) < 1e-10
    assert abs(shim_objective(b1, mask, target, rot) - shim_objective(b1, mask, target, w)) < 1e-10


@settings(max_examples=50, deadline=None)
@given(seeds)
def test_linearity(seed):
    rng = np.random.default_rng(seed)
    b1, _, _ = random_instance(rng)
    u, v = random_weights(rng, 3), random_weights(rng, 3)
    al, be = complex(*rng.normal(size=2)), complex(*rng.normal(size=2))
    lhs = forward_field(b1, al * u + be * v)
    rhs = al * forward_field(b1, u) + be * forward_field(b1, v)
    np.testing.assert_allclose(lhs, rhs, rtol=0, atol=1e-10)


@settings(max_examples=50, deadline=None)
@given(seeds)
def test_unmasked_voxels_ignored(seed):
    rng = np.random.default_rng(seed)
    b1, mask, target = random_instance(rng)
    w = random_weights(rng, 3)
    junk = b1.data.copy()
    junk[~mask.bits] = rng.normal(size=junk[~mask.bits].shape) * 1e3
    b2 = ComplexImage(junk)
    assert shim_objective(b2, mask, target, w) == shim_objective(b1, mask, target, w)
    assert rmse(b2, mask, target, w) == rmse(b1, mask, target, w)


@settings(max_examples=50, deadline=None)
@given(seeds, st.floats(0, 5))
def test_rmse_objective_consistency(seed, lam):
    rng = np.random.default_rng(seed)
    b1, mask, _ = random_instance(rng)
    target = TargetProfile(1.0, lam)
    w = random_weights(rng, 3)
    lhs = rmse(b1, mask, target, w) ** 2 * mask.count + lam * np.sum(np.abs(w) ** 2)
    assert abs(lhs - shim_objective(b1, mask, target, w)) < 1e-10
