"""
Tests for the dense numeric core: matmul, real FFT, activations, dropout,
Linear and the finite-difference gradient checker.
"""
import os
import sys
import unittest

import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

# Add the parent directory to path for imports
sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

from force2kin.errors import ConfigError, DimensionError, UnsupportedLengthError
from force2kin.tensor_core import (
    Dropout,
    Linear,
    Parameter,
    activation,
    activation_grad,
    dropout,
    grad_check,
    irfft,
    irfft_backward,
    make_rng,
    matmul,
    rfft,
    rfft_backward,
    sigmoid,
    spawn_seeds,
)


def naive_dft(x):
    n = len(x)
    k = np.arange(n // 2 + 1)[:, None]
    t = np.arange(n)[None, :]
    return (x[None, :] * np.exp(-2j * np.pi * k * t / n)).sum(axis=1)


class TestMatmul(unittest.TestCase):
    def test_identity(self):
        a = make_rng(0).standard_normal((3, 3))
        assert_array_equal(matmul(np.eye(3), a), a)

    def test_scalar_matrices(self):
        assert_array_equal(matmul([[2.0]], [[3.0]]), [[6.0]])

    def test_matches_triple_loop(self):
        rng = make_rng(1)
        a = rng.standard_normal((7, 5))
        b = rng.standard_normal((5, 4))
        expected = np.zeros((7, 4))
        for i in range(7):
            for j in range(4):
                for k in range(5):
                    expected[i, j] += a[i, k] * b[k, j]
        assert_allclose(matmul(a, b), expected, atol=1e-12)

    def test_shape_mismatch(self):
        with self.assertRaises(DimensionError):
            matmul(np.ones((2, 3)), np.ones((2, 3)))


class TestRealFFT(unittest.TestCase):
    def test_dc_only(self):
        assert_allclose(rfft(np.ones(4)), [4, 0, 0], atol=1e-15)

    def test_single_tone(self):
        n = 16
        x = np.cos(2 * np.pi * 3 * np.arange(n) / n)
        expected = np.zeros(n // 2 + 1)
        expected[3] = 8.0
        assert_allclose(rfft(x), expected, atol=1e-12)

    def test_matches_naive_dft(self):
        rng = make_rng(2)
        for n in (8, 64, 512):
            x = rng.standard_normal(n)
            reference = naive_dft(x)
            err = np.max(np.abs(rfft(x) - reference)) / np.max(np.abs(reference))
            self.assertLess(err, 1e-9, f"H={n}")

    def test_round_trip(self):
        rng = make_rng(3)
        for n in (8, 64, 512, 4096):
            x = rng.standard_normal(n)
            err = np.max(np.abs(irfft(rfft(x), n) - x))
            self.assertLess(err, 1e-10 * np.max(np.abs(x)), f"H={n}")

    def test_parseval(self):
        x = make_rng(4).standard_normal(64)
        spectrum = np.abs(rfft(x)) ** 2
        energy = (spectrum[0] + 2 * spectrum[1:-1].sum() + spectrum[-1]) / 64
        assert_allclose(energy, np.sum(x ** 2), rtol=1e-9)

    def test_zero_and_constant_spectra(self):
        assert_array_equal(irfft(np.zeros(5), 8), np.zeros(8))
        spectrum = np.zeros(5)
        spectrum[0] = 8.0
        assert_allclose(irfft(spectrum, 8), np.ones(8), atol=1e-15)

    def test_edge_imaginary_parts_are_dropped(self):
        spectrum = np.zeros(5, dtype=np.complex128)
        spectrum[0] = 8.0 + 3.0j
        spectrum[4] = 1.0j
        assert_allclose(irfft(spectrum, 8), np.ones(8), atol=1e-15)

    def test_unsupported_lengths(self):
        with self.assertRaises(UnsupportedLengthError):
            rfft(np.ones(7))
        with self.assertRaises(UnsupportedLengthError):
            rfft(np.ones(1))
        with self.assertRaises(DimensionError):
            irfft(np.zeros(4), 8)

    def test_batched_axis(self):
        x = make_rng(5).standard_normal((3, 16, 2))
        spectrum = rfft(x, axis=1)
        self.assertEqual(spectrum.shape, (3, 9, 2))
        assert_allclose(spectrum[1, :, 0], np.fft.rfft(x[1, :, 0]), atol=1e-12)
        assert_allclose(irfft(spectrum, 16, axis=1), x, atol=1e-12)


def test_rfft_backward_matches_finite_differences():
    rng = make_rng(6)
    x = rng.standard_normal(16)
    w_re = rng.standard_normal(9)
    w_im = rng.standard_normal(9)

    def loss():
        s = rfft(x)
        return float(np.sum(w_re * s.real + w_im * s.imag))

    analytic = rfft_backward(w_re + 1j * w_im, 16)
    assert grad_check(loss, x, analytic) < 1e-6


def test_irfft_backward_matches_finite_differences():
    rng = make_rng(7)
    spectrum = rng.standard_normal(9) + 1j * rng.standard_normal(9)
    weights = rng.standard_normal(16)
    g = irfft_backward(weights)

    re = spectrum.real.copy()
    im = spectrum.imag.copy()

    def loss():
        return float(np.sum(weights * irfft(re + 1j * im, 16)))

    assert grad_check(loss, re, g.real) < 1e-6
    # imaginary parts of DC and Nyquist never reach the signal
    assert grad_check(loss, im, g.imag) < 1e-6
    assert abs(g.imag[0]) < 1e-12 and abs(g.imag[-1]) < 1e-12


class TestActivations(unittest.TestCase):
    def test_values(self):
        self.assertEqual(activation(0.0, "sigmoid"), 0.5)
        self.assertEqual(activation(-3.0, "relu"), 0.0)
        self.assertEqual(activation(3.0, "relu"), 3.0)
        self.assertEqual(activation(0.0, "silu"), 0.0)
        self.assertEqual(activation(0.0, "tanh"), 0.0)

    def test_sigmoid_does_not_overflow(self):
        with np.errstate(over="raise"):
            assert_allclose(sigmoid(np.array([-1000.0, 1000.0])), [0.0, 1.0])

    def test_unknown_kind(self):
        with self.assertRaises(ConfigError):
            activation(1.0, "gelu")

    def test_derivatives(self):
        x = make_rng(8).standard_normal(20)
        for kind in ("sigmoid", "tanh", "silu"):
            h = 1e-6
            numeric = (activation(x + h, kind) - activation(x - h, kind)) / (2 * h)
            assert_allclose(activation_grad(x, kind), numeric, atol=1e-8, err_msg=kind)
        assert_array_equal(activation_grad(np.array([-1.0, 2.0]), "relu"), [0.0, 1.0])


class TestDropout(unittest.TestCase):
    def test_identity_cases(self):
        x = make_rng(9).standard_normal((4, 5))
        rng = make_rng(0)
        assert_array_equal(dropout(x, 0.0, True, rng)[0], x)
        assert_array_equal(dropout(x, 0.0, False, rng)[0], x)
        assert_array_equal(dropout(x, 0.1, False, rng)[0], x)

    def test_expectation(self):
        y, mask = dropout(np.ones(10 ** 6), 0.1, True, make_rng(10))
        self.assertAlmostEqual(float(y.mean()), 1.0, delta=0.01)
        self.assertTrue(np.all((mask == 0) | np.isclose(mask, 1 / 0.9)))

    def test_invalid_rate(self):
        with self.assertRaises(ConfigError):
            dropout(np.ones(3), 1.0, True, make_rng(0))

    def test_module_backward_uses_forward_mask(self):
        layer = Dropout(0.5, make_rng(11)).train()
        y = layer(np.ones((3, 4)))
        assert_array_equal(layer.backward(np.ones((3, 4))), y)


class TestLinear(unittest.TestCase):
    def test_identity_weights(self):
        layer = Linear(3, 3, make_rng(0))
        layer.weight.value[...] = np.eye(3)
        x = make_rng(1).standard_normal((2, 3))
        assert_array_equal(layer(x), x)

    def test_backward_input_grad(self):
        layer = Linear(3, 4, make_rng(2), bias=False).train()
        x = make_rng(3).standard_normal((5, 3))
        g = make_rng(4).standard_normal((5, 4))
        layer(x)
        assert_allclose(layer.backward(g), g @ layer.weight.value.T)

    def test_zero_upstream(self):
        layer = Linear(3, 4, make_rng(5)).train()
        layer(make_rng(6).standard_normal((2, 3)))
        self.assertFalse(np.any(layer.backward(np.zeros((2, 4)))))
        self.assertFalse(np.any(layer.weight.grad))
        self.assertFalse(np.any(layer.bias.grad))

    def test_grad_check(self):
        rng = make_rng(7)
        layer = Linear(4, 3, rng).train()
        x = rng.standard_normal((6, 4))
        r = rng.standard_normal((6, 3))

        def loss():
            return float(np.sum(layer.forward(x) * r))

        layer.zero_grad()
        layer(x)
        g_x = layer.backward(r)
        layer.eval()
        self.assertLess(grad_check(loss, x, g_x), 1e-6)
        self.assertLess(grad_check(loss, layer.weight.value, layer.weight.grad), 1e-6)
        self.assertLess(grad_check(loss, layer.bias.value, layer.bias.grad), 1e-6)

    def test_shape_check(self):
        with self.assertRaises(DimensionError):
            Linear(3, 2, make_rng(0))(np.ones((2, 4)))


class TestModule(unittest.TestCase):
    def test_backward_without_forward(self):
        layer = Linear(2, 2, make_rng(0)).train()
        with self.assertRaises(RuntimeError):
            layer.backward(np.ones((1, 2)))

    def test_eval_mode_caches_nothing(self):
        layer = Linear(2, 2, make_rng(0)).eval()
        layer(np.ones((1, 2)))
        with self.assertRaises(RuntimeError):
            layer.backward(np.ones((1, 2)))

    def test_state_dict_round_trip(self):
        a = Linear(3, 2, make_rng(0))
        b = Linear(3, 2, make_rng(1))
        b.load_state_dict(a.state_dict())
        assert_array_equal(b.weight.value, a.weight.value)
        with self.assertRaises(DimensionError):
            b.load_state_dict({"weight": np.ones((3, 2))})

    def test_parameter_zero_grad(self):
        p = Parameter(np.ones(3))
        p.grad += 2.0
        p.zero_grad()
        assert_array_equal(p.grad, np.zeros(3))


def test_grad_check_on_square():
    x = np.array([3.0])
    assert grad_check(lambda: float(x[0] ** 2), x, np.array([6.0])) < 1e-8


def test_rng_streams_are_reproducible():
    assert_array_equal(make_rng(5).random(4), make_rng(5).random(4))
    assert_array_equal(make_rng((5, 1)).random(4), make_rng((5, 1)).random(4))
    assert not np.array_equal(make_rng((5, 1)).random(4), make_rng((5, 2)).random(4))
    seeds = spawn_seeds(3, 2)
    assert len(seeds) == 2
    assert make_rng(seeds[0]).random() != make_rng(seeds[1]).random()


@pytest.mark.parametrize("n", [2, 8, 32])
def test_round_trip_short_lengths(n):
    x = make_rng(n).standard_normal(n)
    assert_allclose(irfft(rfft(x), n), x, atol=1e-12)


if __name__ == '__main__':
    unittest.main()
