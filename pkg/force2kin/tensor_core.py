"""
Dense numerics for force2kin.

Tensors are plain float64 numpy arrays with a leading batch axis. Layers follow
a per-layer forward/backward contract: a training-mode forward pushes what its
backward needs onto a per-layer stack, and backward pops it. Calling the same
layer at several time steps therefore works as long as backward visits the
steps in reverse order.
"""
import logging
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterator, List, Tuple

import numpy as np
from scipy.special import expit

from .errors import ConfigError, DimensionError, UnsupportedLengthError

logger = logging.getLogger(__name__)

DTYPE = np.float64


def make_rng(seed) -> np.random.Generator:
    """
    Create a PCG64 generator.

    Args:
        seed: An int, or a tuple of ints such as (seed, epoch) for a
            reproducible sub-stream.
    """
    return np.random.Generator(np.random.PCG64(seed))


def spawn_seeds(seed: int, n: int) -> List[np.random.SeedSequence]:
    """Independent child seeds, one per event/component, derived from `seed`."""
    return np.random.SeedSequence(seed).spawn(n)


@dataclass(eq=False)
class Parameter:
    """A learnable array and its accumulated gradient."""

    value: np.ndarray
    grad: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        self.value = np.array(self.value, dtype=DTYPE)
        self.grad = np.zeros_like(self.value)

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.value.shape

    @property
    def size(self) -> int:
        return int(self.value.size)

    def zero_grad(self) -> None:
        self.grad.fill(0.0)


class Module:
    """
    Base class for layers and models.

    Parameters and sub-modules are discovered from instance attributes in
    assignment order, which fixes the parameter order used by optimizers and
    checkpoints.
    """

    training = False

    def forward(self, *args):
        raise NotImplementedError

    def backward(self, *args):
        raise NotImplementedError

    def __call__(self, *args):
        return self.forward(*args)

    def named_parameters(self, prefix: str = "") -> Iterator[Tuple[str, Parameter]]:
        for name, value in vars(self).items():
            if isinstance(value, Parameter):
                yield prefix + name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(f"{prefix}{name}.")
            elif isinstance(value, list):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{prefix}{name}.{i}.")

    def parameters(self) -> List[Parameter]:
        return [p for _, p in self.named_parameters()]

    def modules(self) -> Iterator["Module"]:
        yield self
        for value in vars(self).values():
            if isinstance(value, Module):
                yield from value.modules()
            elif isinstance(value, list):
                for item in value:
                    if isinstance(item, Module):
                        yield from item.modules()

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def train(self, mode: bool = True) -> "Module":
        for module in self.modules():
            module.training = mode
            module.__dict__.pop("_cache", None)
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {name: p.value.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: Dict[str, np.ndarray]) -> None:
        params = dict(self.named_parameters())
        missing = set(params) - set(state)
        unexpected = set(state) - set(params)
        if missing or unexpected:
            raise DimensionError(
                f"state mismatch: missing {sorted(missing)}, unexpected {sorted(unexpected)}"
            )
        for name, p in params.items():
            value = np.asarray(state[name], dtype=DTYPE)
            if value.shape != p.shape:
                raise DimensionError(f"{name}: expected shape {p.shape}, got {value.shape}")
            p.value[...] = value

    def set_rng(self, rng: np.random.Generator) -> None:
        """Point every dropout layer below this module at `rng`."""
        for module in self.modules():
            if isinstance(module, Dropout):
                module.rng = rng

    def _push(self, *items) -> None:
        if self.training:
            self.__dict__.setdefault("_cache", []).append(items)

    def _pop(self) -> tuple:
        cache = self.__dict__.get("_cache")
        if not cache:
            raise RuntimeError(f"{type(self).__name__}.backward called without a training-mode forward")
        return cache.pop()


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=DTYPE)
    b = np.asarray(b, dtype=DTYPE)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul shapes {a.shape} and {b.shape} do not agree")
    return a @ b


# Activations

def sigmoid(x: np.ndarray) -> np.ndarray:
    return expit(x)


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


def silu(x: np.ndarray) -> np.ndarray:
    return x * expit(x)


ACTIVATIONS: Dict[str, Callable[[np.ndarray], np.ndarray]] = {
    "sigmoid": sigmoid,
    "tanh": np.tanh,
    "relu": relu,
    "silu": silu,
}


def activation(x: np.ndarray, kind: str) -> np.ndarray:
    try:
        fn = ACTIVATIONS[kind]
    except KeyError:
        raise ConfigError(f"unknown activation '{kind}'") from None
    return fn(np.asarray(x, dtype=DTYPE))


def activation_grad(x: np.ndarray, kind: str) -> np.ndarray:
    """Elementwise derivative of `activation(x, kind)` with respect to x."""
    x = np.asarray(x, dtype=DTYPE)
    if kind == "sigmoid":
        s = expit(x)
        return s * (1.0 - s)
    if kind == "tanh":
        return 1.0 - np.tanh(x) ** 2
    if kind == "relu":
        return (x > 0).astype(DTYPE)
    if kind == "silu":
        s = expit(x)
        return s * (1.0 + x * (1.0 - s))
    raise ConfigError(f"unknown activation '{kind}'")


def softmax_backward(weights: np.ndarray, grad: np.ndarray, axis: int = -1) -> np.ndarray:
    return weights * (grad - np.sum(grad * weights, axis=axis, keepdims=True))


# Dropout

def dropout(x: np.ndarray, p: float, training: bool, rng: np.random.Generator):
    """
    Inverted dropout.

    Returns:
        (output, mask); mask is None when the call is an identity.
    """
    if not 0.0 <= p < 1.0:
        raise ConfigError(f"dropout rate must be in [0, 1), got {p}")
    if not training or p == 0.0:
        return x, None
    mask = (rng.random(x.shape) >= p) / (1.0 - p)
    return x * mask, mask


class Dropout(Module):
    def __init__(self, p: float, rng: np.random.Generator):
        if not 0.0 <= p < 1.0:
            raise ConfigError(f"dropout rate must be in [0, 1), got {p}")
        self.p = p
        self.rng = rng

    def forward(self, x: np.ndarray) -> np.ndarray:
        y, mask = dropout(x, self.p, self.training, self.rng)
        self._push(mask)
        return y

    def backward(self, grad: np.ndarray) -> np.ndarray:
        (mask,) = self._pop()
        return grad if mask is None else grad * mask


class Linear(Module):
    """y = x W + b over the last axis; W is [in, out]."""

    def __init__(self, in_features: int, out_features: int, rng: np.random.Generator, bias: bool = True):
        bound = 1.0 / np.sqrt(in_features)
        self.in_features = in_features
        self.out_features = out_features
        self.weight = Parameter(rng.uniform(-bound, bound, size=(in_features, out_features)))
        self.bias = Parameter(np.zeros(out_features)) if bias else None

    def forward(self, x: np.ndarray) -> np.ndarray:
        if x.shape[-1] != self.in_features:
            raise DimensionError(f"Linear expects last axis {self.in_features}, got shape {x.shape}")
        y = x @ self.weight.value
        if self.bias is not None:
            y = y + self.bias.value
        self._push(x)
        return y

    def backward(self, grad: np.ndarray) -> np.ndarray:
        (x,) = self._pop()
        x2 = x.reshape(-1, self.in_features)
        g2 = grad.reshape(-1, self.out_features)
        self.weight.grad += x2.T @ g2
        if self.bias is not None:
            self.bias.grad += g2.sum(axis=0)
        return grad @ self.weight.value.T


# Real FFT

def _check_fft_length(n: int) -> None:
    if n < 2 or n % 2:
        raise UnsupportedLengthError(f"real FFT length must be even and >= 2, got {n}")


def bin_multiplicity(n: int) -> np.ndarray:
    """How often each rfft bin appears in the full length-n spectrum (1 at DC/Nyquist, else 2)."""
    c = np.full(n // 2 + 1, 2.0)
    c[0] = 1.0
    c[-1] = 1.0
    return c


def _along(values: np.ndarray, axis: int, ndim: int) -> np.ndarray:
    shape = [1] * ndim
    shape[axis] = -1
    return values.reshape(shape)


def rfft(x: np.ndarray, axis: int = -1) -> np.ndarray:
    """Unnormalized forward real FFT: X[k] = sum_n x[n] exp(-2 pi i k n / H)."""
    x = np.asarray(x, dtype=DTYPE)
    _check_fft_length(x.shape[axis])
    return np.fft.rfft(x, axis=axis)


def irfft(spectrum: np.ndarray, n: int, axis: int = -1) -> np.ndarray:
    """Inverse of `rfft` (1/H normalization); DC and Nyquist imaginary parts are dropped."""
    _check_fft_length(n)
    spectrum = np.array(spectrum, dtype=np.complex128)
    if spectrum.shape[axis] != n // 2 + 1:
        raise DimensionError(f"irfft of length {n} needs {n // 2 + 1} bins, got {spectrum.shape[axis]}")
    spectrum = np.moveaxis(spectrum, axis, -1)
    spectrum[..., 0] = spectrum[..., 0].real
    spectrum[..., -1] = spectrum[..., -1].real
    return np.moveaxis(np.fft.irfft(spectrum, n=n, axis=-1), -1, axis)


def rfft_backward(grad_spectrum: np.ndarray, n: int, axis: int = -1) -> np.ndarray:
    """
    Gradient of a real loss w.r.t. the input of `rfft`.

    Args:
        grad_spectrum: dL/dRe X + i dL/dIm X for every rfft bin.
        n: Signal length.
    """
    c = _along(bin_multiplicity(n), axis, grad_spectrum.ndim)
    return n * irfft(grad_spectrum / c, n, axis=axis)


def irfft_backward(grad_signal: np.ndarray, axis: int = -1) -> np.ndarray:
    """Gradient (dL/dRe + i dL/dIm) w.r.t. the spectrum fed to `irfft`."""
    n = grad_signal.shape[axis]
    c = _along(bin_multiplicity(n), axis, grad_signal.ndim)
    return rfft(grad_signal, axis=axis) * c / n


# Gradient checking

def numeric_grad(f: Callable[[], float], x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """
    Central-difference gradient of `f` with respect to the array `x`.

    `x` is perturbed in place (so it can be a Parameter's value) and restored.
    """
    grad = np.zeros_like(x, dtype=DTYPE)
    flat = x.reshape(-1)
    out = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        f_plus = f()
        flat[i] = orig - h
        f_minus = f()
        flat[i] = orig
        out[i] = (f_plus - f_minus) / (2.0 * h)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    analytic = np.asarray(analytic, dtype=DTYPE)
    numeric = np.asarray(numeric, dtype=DTYPE)
    if analytic.shape != numeric.shape:
        raise DimensionError(f"gradient shapes {analytic.shape} and {numeric.shape} differ")
    if analytic.size == 0:
        return 0.0
    denom = np.maximum(1e-8, np.abs(analytic) + np.abs(numeric))
    return float(np.max(np.abs(analytic - numeric) / denom))


def grad_check(f: Callable[[], float], x: np.ndarray, analytic: np.ndarray, h: float = 1e-5) -> float:
    """
    Compare an analytic gradient against central differences.

    Args:
        f: Zero-argument closure evaluating the scalar objective at the current
            contents of `x`.
        x: Point (perturbed in place).
        analytic: Analytic gradient at `x`.
        h: Finite-difference step.

    Returns:
        max over coordinates of |analytic - numeric| / max(1e-8, |analytic| + |numeric|)
    """
    return relative_error(analytic, numeric_grad(f, x, h))
