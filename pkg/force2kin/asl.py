"""
Adaptive Spectrum Layer.

Moves each force window into the frequency domain, keeps the bins up to a
cutoff frequency, learns one gate weight per retained bin from the stacked
magnitude/phase representation, reweights the spectrum and transforms it back
to a signal of the same shape as the input.
"""
import logging
from dataclasses import asdict, dataclass

import numpy as np

from .errors import ConfigError, DimensionError, UnsupportedLengthError
from .tensor_core import (
    Dropout,
    Linear,
    Module,
    activation_grad,
    bin_multiplicity,
    irfft,
    irfft_backward,
    relu,
    rfft,
    rfft_backward,
    sigmoid,
    silu,
)

logger = logging.getLogger(__name__)

SKIP_MODES = ("add", "concat", "off")
PHASE_ENCODINGS = ("sincos", "angle")


@dataclass
class AslConfig:
    hidden_size: int = 110
    dropout: float = 0.1
    freq_threshold: float = 210.0
    sample_rate: float = 5000.0
    gate: bool = True
    complexify: bool = False
    per_freq_layer: bool = True
    cross_spectrum_density: bool = False
    use_freqs: bool = False
    multidim_fft: bool = False
    skip_mode: str = "add"
    phase_encoding: str = "sincos"
    zero_gate_init: bool = False

    def __post_init__(self):
        if self.hidden_size < 1:
            raise ConfigError(f"asl hidden_size must be positive, got {self.hidden_size}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"asl dropout must be in [0, 1), got {self.dropout}")
        if self.freq_threshold < 0:
            raise ConfigError(f"freq_threshold must be >= 0, got {self.freq_threshold}")
        if self.sample_rate <= 0:
            raise ConfigError(f"sample_rate must be > 0, got {self.sample_rate}")
        if self.skip_mode not in SKIP_MODES:
            raise ConfigError(f"skip_mode must be one of {SKIP_MODES}, got '{self.skip_mode}'")
        if self.phase_encoding not in PHASE_ENCODINGS:
            raise ConfigError(f"phase_encoding must be one of {PHASE_ENCODINGS}, got '{self.phase_encoding}'")

    def to_dict(self) -> dict:
        return asdict(self)


def retained_bins(window: int, sample_rate: float, freq_threshold: float) -> int:
    """
    Number of rfft bins whose centre frequency is at most `freq_threshold`.

    Examples:
        retained_bins(512, 5000, 210) -> 22
    """
    if window < 2 or window % 2:
        raise UnsupportedLengthError(f"window length must be even and >= 2, got {window}")
    if sample_rate <= 0:
        raise ConfigError(f"sample_rate must be > 0, got {sample_rate}")
    k = np.arange(window // 2 + 1)
    return int(np.count_nonzero(k * sample_rate / window <= freq_threshold))


def _polar(spectrum: np.ndarray):
    mag = np.abs(spectrum)
    nonzero = mag > 0
    safe = np.where(nonzero, mag, 1.0)
    cos = np.where(nonzero, spectrum.real / safe, 1.0)
    sin = np.where(nonzero, spectrum.imag / safe, 0.0)
    inv = np.where(nonzero, 1.0 / safe, 0.0)
    return mag, cos, sin, inv


def stack_spectrum(spectrum: np.ndarray, phase_encoding: str = "sincos") -> np.ndarray:
    """
    Real features for a complex spectrum [..., F].

    sincos emits [|X|, cos(angle X), sin(angle X)] along the last axis
    ([..., 3F]); angle emits [|X|, angle X] ([..., 2F]). A zero bin has phase 0.
    """
    mag, cos, sin, _ = _polar(spectrum)
    if phase_encoding == "sincos":
        return np.concatenate([mag, cos, sin], axis=-1)
    if phase_encoding == "angle":
        return np.concatenate([mag, np.arctan2(sin, cos)], axis=-1)
    raise ConfigError(f"phase_encoding must be one of {PHASE_ENCODINGS}, got '{phase_encoding}'")


def stack_spectrum_backward(spectrum: np.ndarray, grad: np.ndarray, phase_encoding: str = "sincos") -> np.ndarray:
    """Gradient (dL/dRe + i dL/dIm) of `stack_spectrum` w.r.t. its complex input."""
    _, cos, sin, inv = _polar(spectrum)
    if phase_encoding == "sincos":
        g_mag, g_cos, g_sin = np.split(grad, 3, axis=-1)
        g_re = g_mag * cos + sin * (g_cos * sin - g_sin * cos) * inv
        g_im = g_mag * sin + cos * (g_sin * cos - g_cos * sin) * inv
    else:
        g_mag, g_angle = np.split(grad, 2, axis=-1)
        g_re = g_mag * cos - g_angle * sin * inv
        g_im = g_mag * sin + g_angle * cos * inv
    return g_re + 1j * g_im


def cross_spectral_density(x: np.ndarray) -> np.ndarray:
    """
    Channel cross-spectral density of windows x [B, H, F] -> [B, F, F].

    Mean over all H bins of the spectrum of each circular channel
    cross-correlation, which equals the zero-lag cross-power (1/H) sum x_i x_j.
    """
    window = x.shape[-2]
    spectrum = rfft(x, axis=-2)
    c = bin_multiplicity(window)
    cross = np.einsum("...ki,...kj,k->...ij", spectrum.conj(), spectrum, c)
    return cross.real / window ** 2


def cross_spectral_density_backward(x: np.ndarray, grad: np.ndarray) -> np.ndarray:
    window = x.shape[-2]
    return x @ (grad + np.swapaxes(grad, -1, -2)) / window


class AdaptiveSpectrumLayer(Module):
    """
    Gated spectral reweighting of windows [B, H, F].

    Output is [B, H, F] for skip modes add/off and [B, H, 2F] for concat.
    """

    def __init__(self, window: int, channels: int, cfg: AslConfig, rng: np.random.Generator):
        self.cfg = cfg
        self.window = window
        self.channels = channels
        self.n_bins = retained_bins(window, cfg.sample_rate, cfg.freq_threshold)
        self.stack_width = channels * (3 if cfg.phase_encoding == "sincos" else 2)
        self.bin_width = self.stack_width + (1 if cfg.use_freqs else 0)
        csd_width = channels * channels if cfg.cross_spectrum_density else 0

        if cfg.per_freq_layer:
            self.fc_hidden = Linear(self.n_bins * self.bin_width + csd_width, cfg.hidden_size, rng)
            self.fc_gate = Linear(cfg.hidden_size, self.n_bins, rng)
            head = self.n_bins * channels
        else:
            self.fc_hidden = Linear(self.bin_width + csd_width, cfg.hidden_size, rng)
            self.fc_gate = Linear(cfg.hidden_size, 1, rng)
            head = channels
        if cfg.complexify:
            self.fc_magnitude = Linear(cfg.hidden_size, head, rng)
            self.fc_phase = Linear(cfg.hidden_size, head, rng)
        self.dropout = Dropout(cfg.dropout, rng)
        if cfg.zero_gate_init:
            # Bin weights start constant and independent of the input window.
            force_gate(self, 0.0)

        k = np.arange(self.n_bins)
        self.bin_freqs = k * cfg.sample_rate / window / (cfg.sample_rate / 2.0)

    @property
    def out_channels(self) -> int:
        return 2 * self.channels if self.cfg.skip_mode == "concat" else self.channels

    def _check_input(self, x: np.ndarray) -> None:
        if x.ndim != 3 or x.shape[1] != self.window or x.shape[2] != self.channels:
            raise DimensionError(
                f"ASL expects windows [B, {self.window}, {self.channels}], got {x.shape}"
            )

    def _head(self, layer: Linear, hidden: np.ndarray, batch: int) -> np.ndarray:
        out = layer(hidden)
        return out.reshape(batch, self.n_bins, self.channels)

    def forward(self, x: np.ndarray) -> np.ndarray:
        self._check_input(x)
        cfg = self.cfg
        batch = x.shape[0]

        spectrum = rfft(x, axis=1)[:, : self.n_bins, :]
        z = np.fft.fft(spectrum, axis=-1) if cfg.multidim_fft else spectrum
        stacked = stack_spectrum(z, cfg.phase_encoding)
        if cfg.use_freqs:
            freqs = np.broadcast_to(self.bin_freqs[None, :, None], (batch, self.n_bins, 1))
            stacked = np.concatenate([stacked, freqs], axis=-1)

        csd = cross_spectral_density(x).reshape(batch, -1) if cfg.cross_spectrum_density else None
        if cfg.per_freq_layer:
            features = stacked.reshape(batch, -1)
            if csd is not None:
                features = np.concatenate([features, csd], axis=-1)
        else:
            features = stacked
            if csd is not None:
                tiled = np.broadcast_to(csd[:, None, :], (batch, self.n_bins, csd.shape[-1]))
                features = np.concatenate([features, tiled], axis=-1)

        pre = self.fc_hidden(features)
        hidden = self.dropout(relu(pre))
        logits = self.fc_gate(hidden).reshape(batch, self.n_bins)
        if cfg.gate:
            squashed = silu(logits)
            weights = sigmoid(squashed)
        else:
            squashed = None
            weights = logits
        self.last_weights = weights

        if cfg.complexify:
            magnitude = self._head(self.fc_magnitude, hidden, batch)
            phase = self._head(self.fc_phase, hidden, batch)
            base = magnitude * np.exp(1j * phase)
        else:
            magnitude = phase = None
            base = z

        gated = base * weights[..., None]
        kept = np.fft.ifft(gated, axis=-1) if cfg.multidim_fft else gated
        full = np.zeros((batch, self.window // 2 + 1, self.channels), dtype=np.complex128)
        full[:, : self.n_bins, :] = kept
        y = irfft(full, self.window, axis=1)

        self._push(x, z, pre, logits, squashed, weights, base, magnitude, phase)

        if cfg.skip_mode == "add":
            return x + y
        if cfg.skip_mode == "concat":
            return np.concatenate([x, y], axis=-1)
        return y

    def backward(self, grad: np.ndarray) -> np.ndarray:
        x, z, pre, logits, squashed, weights, base, magnitude, phase = self._pop()
        cfg = self.cfg
        batch = x.shape[0]

        if cfg.skip_mode == "add":
            g_y = grad
            g_x = grad.copy()
        elif cfg.skip_mode == "concat":
            g_y = grad[..., self.channels:]
            g_x = grad[..., : self.channels].copy()
        else:
            g_y = grad
            g_x = np.zeros_like(x)

        g_kept = irfft_backward(g_y, axis=1)[:, : self.n_bins, :]
        g_gated = np.fft.fft(g_kept, axis=-1) / self.channels if cfg.multidim_fft else g_kept

        g_weights = np.sum(np.real(g_gated * np.conj(base)), axis=-1)
        g_base = g_gated * weights[..., None]
        if cfg.gate:
            g_logits = g_weights * activation_grad(squashed, "sigmoid") * activation_grad(logits, "silu")
        else:
            g_logits = g_weights

        gate_shape = (batch, self.n_bins) if cfg.per_freq_layer else (batch, self.n_bins, 1)
        g_hidden = self.fc_gate.backward(g_logits.reshape(gate_shape))
        if cfg.complexify:
            rotation = np.exp(1j * phase)
            g_magnitude = np.real(g_base * np.conj(rotation))
            g_phase = np.real(g_base * np.conj(1j * magnitude * rotation))
            head_shape = (batch, -1) if cfg.per_freq_layer else (batch, self.n_bins, self.channels)
            g_hidden = g_hidden + self.fc_phase.backward(g_phase.reshape(head_shape))
            g_hidden = g_hidden + self.fc_magnitude.backward(g_magnitude.reshape(head_shape))
            g_z = np.zeros_like(z)
        else:
            g_z = g_base

        g_pre = self.dropout.backward(g_hidden) * (pre > 0)
        g_features = self.fc_hidden.backward(g_pre)

        g_csd = None
        if cfg.per_freq_layer:
            split = self.n_bins * self.bin_width
            g_stacked = g_features[:, :split].reshape(batch, self.n_bins, self.bin_width)
            if cfg.cross_spectrum_density:
                g_csd = g_features[:, split:]
        else:
            g_stacked = g_features[..., : self.bin_width]
            if cfg.cross_spectrum_density:
                g_csd = g_features[..., self.bin_width:].sum(axis=1)

        g_z = g_z + stack_spectrum_backward(z, g_stacked[..., : self.stack_width], cfg.phase_encoding)
        g_spectrum = self.channels * np.fft.ifft(g_z, axis=-1) if cfg.multidim_fft else g_z

        g_full = np.zeros((batch, self.window // 2 + 1, self.channels), dtype=np.complex128)
        g_full[:, : self.n_bins, :] = g_spectrum
        g_x += rfft_backward(g_full, self.window, axis=1)
        if g_csd is not None:
            g_x += cross_spectral_density_backward(x, g_csd.reshape(batch, self.channels, self.channels))
        return g_x


def force_gate(layer: AdaptiveSpectrumLayer, bias: float) -> None:
    """
    Pin the gate to a constant by zeroing its weights and setting its bias.

    `bias=40` saturates the gate to exactly 1.0; `bias=0` gives 0.5. Used for
    `zero_gate_init` and by tests that need a fixed spectral mask.
    """
    layer.fc_gate.weight.value[...] = 0.0
    layer.fc_gate.bias.value[...] = bias
