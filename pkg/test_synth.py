"""
Tests for the synthetic event generator and the marker/Euler-angle geometry.
"""
import os
import sys
import unittest

import numpy as np
from numpy.testing import assert_allclose, assert_array_equal

# Add the parent directory to path for imports
sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

from force2kin.errors import ConfigError, GeometryError
from force2kin.synth import (
    FORCE_CHANNELS,
    KinematicsSpec,
    QsParams,
    SynthRanges,
    WingGeometry,
    euler_to_markers,
    generate_dataset,
    kinematics_from_spec,
    markers_to_euler,
    passive_angles,
    qs_forces,
    stroke_profile,
    total_force,
)
from force2kin.tensor_core import make_rng


class TestStrokeProfile(unittest.TestCase):
    def test_zero_at_origin(self):
        for shape in (0.0, 0.3, 0.9, 0.99):
            self.assertEqual(stroke_profile(np.array([0.0]), 10.0, 1.2, shape)[0], 0.0)

    def test_quarter_period_peak(self):
        for shape in (0.0, 0.3, 0.9, 0.99):
            peak = stroke_profile(np.array([1 / 40.0]), 10.0, 1.2, shape)[0]
            self.assertAlmostEqual(peak, 0.6, places=12)

    def test_small_shape_is_sinusoid(self):
        t = np.linspace(0, 0.1, 1000)
        assert_allclose(stroke_profile(t, 10.0, 1.0, 1e-8), 0.5 * np.sin(2 * np.pi * 10.0 * t), atol=1e-9)

    def test_periodic_and_odd(self):
        t = np.linspace(0, 0.2, 101)
        phi = stroke_profile(t, 7.0, 1.0, 0.8)
        assert_allclose(stroke_profile(t + 1 / 7.0, 7.0, 1.0, 0.8), phi, atol=1e-12)
        assert_allclose(stroke_profile(-t, 7.0, 1.0, 0.8), -phi, atol=1e-12)

    def test_triangle_limit_rises_linearly(self):
        t = np.array([1 / 80.0])
        # a triangle wave is halfway up at an eighth of the period, a sinusoid is at 0.707
        self.assertLess(stroke_profile(t, 10.0, 1.0, 0.99)[0], stroke_profile(t, 10.0, 1.0, 0.0)[0])

    def test_invalid_shape(self):
        with self.assertRaises(ConfigError):
            stroke_profile(np.zeros(3), 10.0, 1.0, 1.0)
        with self.assertRaises(ConfigError):
            KinematicsSpec(shape=1.0)


class TestPassiveAngles(unittest.TestCase):
    def test_constant_stroke(self):
        spec = KinematicsSpec(frequency=10.0, sample_rate=500.0)
        theta, psi = passive_angles(np.full(250, 0.4), spec)
        assert_array_equal(psi, np.zeros(250))
        t = np.arange(250) / 500.0
        assert_allclose(theta, spec.elev_amp * np.sin(4 * np.pi * 10.0 * t))

    def test_zero_pitch_amplitude(self):
        spec = KinematicsSpec(pitch_amp=0.0)
        phi = stroke_profile(spec.time, spec.frequency, spec.amplitude, spec.shape)
        _, psi = passive_angles(phi, spec)
        assert_array_equal(psi, np.zeros_like(psi))

    def test_reversed_stroke_reverses_pitch(self):
        spec = KinematicsSpec(pitch_lag=0.0)
        phi = stroke_profile(spec.time, spec.frequency, spec.amplitude, spec.shape)
        _, psi = passive_angles(phi, spec)
        _, psi_rev = passive_angles(-phi, spec)
        assert_allclose(psi_rev, -psi, atol=1e-15)

    def test_pitch_is_bounded(self):
        spec = KinematicsSpec(shape=0.99)
        kinematics = kinematics_from_spec(spec)
        self.assertEqual(kinematics.shape, (spec.n_samples, 3))
        self.assertLessEqual(np.max(np.abs(kinematics[:, 2])), spec.pitch_amp)


class TestQsForces(unittest.TestCase):
    def test_zero_motion(self):
        assert_array_equal(qs_forces(np.zeros((50, 3)), QsParams(), 500.0), np.zeros((50, 4)))

    def test_channels_sum_to_total(self):
        kinematics = kinematics_from_spec(KinematicsSpec())
        params = QsParams()
        forces = qs_forces(kinematics, params, 500.0)
        rate = np.gradient(kinematics[:, 0], 1 / 500.0)
        expected = 0.5 * params.rho * params.wing_area * params.r2 ** 2 * params.c_lift_max \
            * np.sin(2 * kinematics[:, 2]) * rate ** 2
        assert_allclose(forces.sum(axis=1), expected, rtol=1e-12, atol=1e-18)
        assert_allclose(total_force(kinematics, params, 500.0), expected, rtol=1e-12, atol=1e-18)

    def test_matches_straight_line_recomputation(self):
        rng = make_rng(0)
        kinematics = rng.uniform(-1, 1, size=(40, 3))
        p = QsParams(rho=1.1, wing_area=2e-3, r2=0.05, c_lift_max=1.5, cp_arm=0.03, sensor_offset=0.025)
        forces = qs_forces(kinematics, p, 200.0)
        for i in (0, 7, 39):
            if i == 0:
                rate = (kinematics[1, 0] - kinematics[0, 0]) * 200.0
            elif i == 39:
                rate = (kinematics[39, 0] - kinematics[38, 0]) * 200.0
            else:
                rate = (kinematics[i + 1, 0] - kinematics[i - 1, 0]) * 100.0
            phi, theta, psi = kinematics[i]
            f = 0.5 * p.rho * p.wing_area * p.r2 ** 2 * p.c_lift_max * np.sin(2 * psi) * rate ** 2
            px = -p.cp_arm * np.cos(theta) * np.sin(phi)
            py = p.cp_arm * np.cos(theta) * np.cos(phi)
            expected = [f / 4 + f * px / (2 * p.sensor_offset), f / 4 - f * px / (2 * p.sensor_offset),
                        f / 4 + f * py / (2 * p.sensor_offset), f / 4 - f * py / (2 * p.sensor_offset)]
            assert_allclose(forces[i], expected, rtol=1e-10)

    def test_invalid_params(self):
        with self.assertRaises(ConfigError):
            QsParams(rho=0.0)


class TestGenerateDataset(unittest.TestCase):
    def test_deterministic(self):
        a = generate_dataset(2, seed=5)
        b = generate_dataset(2, seed=5)
        for ea, eb in zip(a, b):
            self.assertEqual(ea.id, eb.id)
            assert_array_equal(ea.forces, eb.forces)
            assert_array_equal(ea.kinematics, eb.kinematics)
        c = generate_dataset(2, seed=6)
        self.assertFalse(np.array_equal(a.events[0].forces, c.events[0].forces))

    def test_event_length_and_schema(self):
        dataset = generate_dataset(3, SynthRanges(duration_range=(0.5, 0.5), sample_rate=500.0), seed=1)
        self.assertEqual(len(dataset), 3)
        self.assertEqual(dataset.force_channels, FORCE_CHANNELS)
        self.assertEqual(dataset.kinematic_channels, ["phi", "theta", "psi"])
        for event in dataset:
            self.assertEqual(len(event), 250)
            self.assertEqual(event.forces.shape, (250, 4))

    def test_forces_replay_from_kinematics(self):
        dataset = generate_dataset(3, seed=2)
        for event in dataset:
            assert_array_equal(qs_forces(event.kinematics, QsParams(), dataset.sample_rate), event.forces)

    def test_noise(self):
        clean = generate_dataset(1, SynthRanges(noise_std=0.0), seed=3).events[0]
        noisy = generate_dataset(1, SynthRanges(noise_std=0.01), seed=3).events[0]
        assert_array_equal(noisy.kinematics, clean.kinematics)
        self.assertFalse(np.array_equal(noisy.forces, clean.forces))

    def test_invalid_ranges_name_the_field(self):
        with self.assertRaisesRegex(ConfigError, "synth_freq_range"):
            SynthRanges(freq_range=(20.0, 5.0))
        with self.assertRaisesRegex(ConfigError, "synth_shape_range"):
            SynthRanges(shape_range=(0.0, 1.0))
        with self.assertRaises(ConfigError):
            generate_dataset(0)


class TestMarkers(unittest.TestCase):
    def test_zero_angles_give_reference(self):
        geometry = WingGeometry()
        assert_allclose(euler_to_markers(0.0, 0.0, 0.0, geometry), geometry.reference(), atol=1e-15)

    def test_pure_stroke_rotation(self):
        c, s = np.cos(0.3), np.sin(0.3)
        rz = np.array([[c, -s, 0], [s, c, 0], [0, 0, 1]])
        expected = WingGeometry().reference() @ rz.T
        assert_allclose(euler_to_markers(0.3, 0.0, 0.0), expected, atol=1e-15)

    def test_round_trip_grid(self):
        phi, theta, psi = np.meshgrid(
            np.linspace(-1.5, 1.5, 7), np.linspace(-0.75, 0.75, 5), np.linspace(-1.5, 1.5, 7), indexing="ij"
        )
        markers = euler_to_markers(phi, theta, psi)
        self.assertEqual(markers.shape, phi.shape + (3, 3))
        rec = markers_to_euler(markers[..., 0, :], markers[..., 1, :], markers[..., 2, :])
        assert_allclose(rec[0], phi, atol=1e-10)
        assert_allclose(rec[1], theta, atol=1e-10)
        assert_allclose(rec[2], psi, atol=1e-10)

    def test_translation_invariant(self):
        markers = euler_to_markers(0.2, -0.1, 0.4) + np.array([1.0, -2.0, 0.5])
        rec = markers_to_euler(*markers)
        assert_allclose(rec, [0.2, -0.1, 0.4], atol=1e-10)

    def test_degenerate_markers(self):
        with self.assertRaises(GeometryError):
            markers_to_euler(np.zeros(3), np.zeros(3), np.ones(3))
        with self.assertRaises(GeometryError):
            markers_to_euler(np.zeros(3), np.array([0, 1.0, 0]), np.array([0, 2.0, 0]))


if __name__ == '__main__':
    unittest.main()
