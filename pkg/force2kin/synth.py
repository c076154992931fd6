"""
Synthetic flapping-wing events.

Stroke angles follow the sinusoid-to-triangle family
phi(t) = (Phi/2) asin(K sin(2 pi f t)) / asin(K); pitch and elevation come from
a simple surrogate of passive wing dynamics; forces come from a quasi-steady
lift law split over four load cells. The oracle is meant to produce a
learnable inverse-mapping benchmark, not aerodynamic fidelity.
"""
import logging
from dataclasses import dataclass
from typing import Tuple

import numpy as np
from scipy.spatial.transform import Rotation

from .data import Dataset, Event
from .errors import ConfigError, GeometryError
from .tensor_core import DTYPE, make_rng, spawn_seeds

logger = logging.getLogger(__name__)

FORCE_CHANNELS = ["F1", "F2", "F3", "F4"]
MAX_SHAPE = 0.99
EULER_ORDER = "ZXY"


@dataclass
class KinematicsSpec:
    frequency: float = 10.0
    amplitude: float = np.pi / 3
    shape: float = 0.5
    duration: float = 0.5
    sample_rate: float = 500.0
    pitch_lag: float = 0.002
    pitch_amp: float = 0.7
    elev_amp: float = 0.1
    pitch_sharpness: float = 2.0

    def __post_init__(self):
        if not 0.0 <= self.shape < 1.0:
            raise ConfigError(f"shape parameter K must be in [0, 1), got {self.shape}")
        if self.frequency < 0 or self.sample_rate <= 0 or self.duration <= 0:
            raise ConfigError(f"frequency, sample_rate and duration must be positive: {self}")

    @property
    def n_samples(self) -> int:
        return int(round(self.duration * self.sample_rate))

    @property
    def time(self) -> np.ndarray:
        return np.arange(self.n_samples) / self.sample_rate


@dataclass
class SynthRanges:
    """Uniform sampling ranges for `generate_dataset`."""

    freq_range: Tuple[float, float] = (5.0, 20.0)
    amplitude_range: Tuple[float, float] = (np.pi / 6, np.pi / 3)
    shape_range: Tuple[float, float] = (0.0, MAX_SHAPE)
    duration_range: Tuple[float, float] = (0.5, 0.5)
    sample_rate: float = 500.0
    pitch_lag: float = 0.002
    pitch_amp: float = 0.7
    elev_amp: float = 0.1
    noise_std: float = 0.0

    def __post_init__(self):
        for name in ("freq_range", "amplitude_range", "shape_range", "duration_range"):
            low, high = getattr(self, name)
            if low > high:
                raise ConfigError(f"synth_{name}: lower bound {low} exceeds upper bound {high}")
        if not 0.0 <= self.shape_range[0] <= self.shape_range[1] <= MAX_SHAPE:
            raise ConfigError(f"synth_shape_range must lie within [0, {MAX_SHAPE}], got {list(self.shape_range)}")
        if self.freq_range[0] < 0:
            raise ConfigError(f"synth_freq_range must be non-negative, got {list(self.freq_range)}")
        if self.duration_range[0] <= 0:
            raise ConfigError(f"synth_duration_range must be positive, got {list(self.duration_range)}")
        if self.sample_rate <= 0:
            raise ConfigError(f"synth_sample_rate must be positive, got {self.sample_rate}")
        if self.noise_std < 0:
            raise ConfigError(f"synth_noise_std must be >= 0, got {self.noise_std}")


@dataclass
class QsParams:
    """Quasi-steady force model constants (SI units) and load-cell geometry."""

    rho: float = 1.225
    wing_area: float = 1.5e-3
    r2: float = 0.045
    c_lift_max: float = 1.8
    cp_arm: float = 0.04
    sensor_offset: float = 0.02

    def __post_init__(self):
        for name in ("rho", "wing_area", "r2", "c_lift_max", "cp_arm", "sensor_offset"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"QsParams.{name} must be positive, got {getattr(self, name)}")


@dataclass
class WingGeometry:
    """
    Marker positions on the rigid wing at zero angles, in metres.

    Reference frame: hinge at the origin, span along +y, chord pointing down
    (-z) from the leading edge, wing normal along +x. Markers 1 and 2 sit on
    the leading edge; marker 3 sits behind it on the chord.
    """

    r1: float = 0.01
    r2: float = 0.06
    r3: float = 0.035
    chord: float = 0.02

    def reference(self) -> np.ndarray:
        return np.array([
            [0.0, self.r1, 0.0],
            [0.0, self.r2, 0.0],
            [0.0, self.r3, -self.chord],
        ])


def stroke_profile(t: np.ndarray, frequency: float, amplitude: float, shape: float) -> np.ndarray:
    """
    Stroke angle phi(t) in radians.

    Args:
        t: Sample times in seconds.
        frequency: Wingbeat frequency f in Hz.
        amplitude: Peak-to-peak stroke amplitude Phi in radians.
        shape: K in [0, 1); 0 is sinusoidal, values near 1 approach a triangle wave.
    """
    if not 0.0 <= shape < 1.0:
        raise ConfigError(f"shape parameter K must be in [0, 1), got {shape}")
    wave = np.sin(2.0 * np.pi * frequency * np.asarray(t, dtype=DTYPE))
    if shape < 1e-6:
        return 0.5 * amplitude * wave
    return 0.5 * amplitude * np.arcsin(shape * wave) / np.arcsin(shape)


def passive_angles(phi: np.ndarray, spec: KinematicsSpec) -> Tuple[np.ndarray, np.ndarray]:
    """
    Surrogate passive elevation and pitch for a stroke series.

    psi(t) = pitch_amp * tanh(c * dphi/dt(t - pitch_lag)), with c normalizing
    the stroke rate by its sinusoidal peak pi f Phi; theta(t) = elev_amp * sin(4 pi f t).

    Returns:
        (theta, psi)
    """
    phi = np.asarray(phi, dtype=DTYPE)
    t = np.arange(len(phi)) / spec.sample_rate
    rate = np.gradient(phi, 1.0 / spec.sample_rate) if len(phi) > 1 else np.zeros_like(phi)
    lagged = np.interp(t - spec.pitch_lag, t, rate) if spec.pitch_lag else rate
    peak_rate = np.pi * spec.frequency * spec.amplitude
    gain = spec.pitch_sharpness / peak_rate if peak_rate > 0 else 0.0
    psi = spec.pitch_amp * np.tanh(gain * lagged)
    theta = spec.elev_amp * np.sin(4.0 * np.pi * spec.frequency * t)
    return theta, psi


def kinematics_from_spec(spec: KinematicsSpec) -> np.ndarray:
    """[T, 3] columns (phi, theta, psi)."""
    phi = stroke_profile(spec.time, spec.frequency, spec.amplitude, spec.shape)
    theta, psi = passive_angles(phi, spec)
    return np.column_stack([phi, theta, psi])


def qs_forces(kinematics: np.ndarray, params: QsParams, sample_rate: float) -> np.ndarray:
    """
    Quasi-steady vertical force split over four load cells.

    F = 0.5 rho A r2^2 C_max sin(2 psi) dphi/dt^2. The load cells sit at
    (+d, 0), (-d, 0), (0, +d), (0, -d) in the stroke plane; each carries F/4
    plus the moment share of the force acting at the centre of pressure,
    projected onto the stroke plane, so the four channels sum to F.

    Returns:
        [T, 4] channel forces in newtons.
    """
    kinematics = np.asarray(kinematics, dtype=DTYPE)
    phi, theta, psi = kinematics[:, 0], kinematics[:, 1], kinematics[:, 2]
    if len(phi) > 1:
        rate = np.gradient(phi, 1.0 / sample_rate)
    else:
        rate = np.zeros_like(phi)
    total = 0.5 * params.rho * params.wing_area * params.r2 ** 2 * params.c_lift_max * np.sin(2.0 * psi) * rate ** 2
    arm = params.cp_arm * np.cos(theta)
    px = -arm * np.sin(phi)
    py = arm * np.cos(phi)
    d = params.sensor_offset
    quarter = total / 4.0
    return np.column_stack([
        quarter + total * px / (2.0 * d),
        quarter - total * px / (2.0 * d),
        quarter + total * py / (2.0 * d),
        quarter - total * py / (2.0 * d),
    ])


def total_force(kinematics: np.ndarray, params: QsParams, sample_rate: float) -> np.ndarray:
    """Sum of the four load-cell channels of `qs_forces`."""
    return qs_forces(kinematics, params, sample_rate).sum(axis=1)


def generate_dataset(n_events: int, ranges: SynthRanges = None, params: QsParams = None,
                     seed: int = 3407) -> Dataset:
    """
    Sample `n_events` kinematic specs uniformly from `ranges` and label them with
    quasi-steady forces. Event i draws from its own child seed, so the output is
    a pure function of `seed`.
    """
    if n_events < 1:
        raise ConfigError(f"synth_n_events must be >= 1, got {n_events}")
    ranges = ranges or SynthRanges()
    params = params or QsParams()
    events = []
    for i, child in enumerate(spawn_seeds(seed, n_events)):
        rng = make_rng(child)
        spec = KinematicsSpec(
            frequency=rng.uniform(*ranges.freq_range),
            amplitude=rng.uniform(*ranges.amplitude_range),
            shape=min(rng.uniform(*ranges.shape_range), MAX_SHAPE),
            duration=rng.uniform(*ranges.duration_range),
            sample_rate=ranges.sample_rate,
            pitch_lag=ranges.pitch_lag,
            pitch_amp=ranges.pitch_amp,
            elev_amp=ranges.elev_amp,
        )
        kinematics = kinematics_from_spec(spec)
        forces = qs_forces(kinematics, params, spec.sample_rate)
        if ranges.noise_std > 0:
            forces = forces + rng.normal(0.0, ranges.noise_std, size=forces.shape)
        events.append(Event(f"synth_{i:04d}", spec.sample_rate, forces, kinematics))
        logger.debug(f"Event synth_{i:04d}: f={spec.frequency:.2f} Hz, Phi={spec.amplitude:.3f}, K={spec.shape:.3f}")
    logger.info(f"Generated {n_events} synthetic events at {ranges.sample_rate} Hz")
    return Dataset(events, list(FORCE_CHANNELS), ["phi", "theta", "psi"], ranges.sample_rate)


# Marker geometry

def euler_to_matrix(phi, theta, psi) -> np.ndarray:
    """Wing-to-lab rotation R = Rz(phi) Rx(theta) Ry(psi) (intrinsic z-x-y)."""
    angles = np.stack(np.broadcast_arrays(phi, theta, psi), axis=-1)
    batch = angles.shape[:-1]
    matrices = Rotation.from_euler(EULER_ORDER, angles.reshape(-1, 3)).as_matrix()
    return matrices.reshape(batch + (3, 3))


def euler_to_markers(phi, theta, psi, geometry: WingGeometry = None) -> np.ndarray:
    """
    Lab-frame marker positions [..., 3 markers, 3 coords] for the given angles.
    """
    geometry = geometry or WingGeometry()
    rotation = euler_to_matrix(phi, theta, psi)
    return np.einsum("...ij,mj->...mi", rotation, geometry.reference())


def markers_to_euler(p1: np.ndarray, p2: np.ndarray, p3: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """
    Recover (phi, theta, psi) from three wing markers.

    The span axis runs from marker 1 to marker 2 along the leading edge; the
    chord axis is the component of marker 3 - marker 1 orthogonal to it.
    Inputs may carry leading batch axes.

    Raises:
        GeometryError: if the markers are coincident or collinear.
    """
    p1, p2, p3 = (np.asarray(p, dtype=DTYPE) for p in (p1, p2, p3))
    span = p2 - p1
    span_len = np.linalg.norm(span, axis=-1, keepdims=True)
    if np.any(span_len < 1e-12):
        raise GeometryError("leading-edge markers coincide")
    span = span / span_len
    rear = p3 - p1
    chord = rear - np.sum(rear * span, axis=-1, keepdims=True) * span
    chord_len = np.linalg.norm(chord, axis=-1, keepdims=True)
    if np.any(chord_len < 1e-9 * np.maximum(np.linalg.norm(rear, axis=-1, keepdims=True), 1e-12)):
        raise GeometryError("markers are collinear")
    chord = chord / chord_len
    up = -chord
    normal = np.cross(span, up)
    matrix = np.stack([normal, span, up], axis=-1)
    angles = Rotation.from_matrix(matrix.reshape(-1, 3, 3)).as_euler(EULER_ORDER).reshape(matrix.shape[:-2] + (3,))
    return angles[..., 0], angles[..., 1], angles[..., 2]
