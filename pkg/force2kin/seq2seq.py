"""
Recurrent inverse-mapping models.

Seq2Seq: optional Adaptive Spectrum Layer, GRU encoder, additive FC attention
and a GRU decoder that starts from the last force sample of the window.
LinearModel and NLinearModel are the flattened-window baselines.
"""
import logging
from dataclasses import asdict, dataclass, field
from typing import List, Tuple

import numpy as np
from scipy.special import softmax

from .asl import AdaptiveSpectrumLayer, AslConfig
from .errors import ConfigError, DimensionError
from .tensor_core import (
    DTYPE,
    Linear,
    Module,
    Parameter,
    make_rng,
    sigmoid,
    softmax_backward,
    spawn_seeds,
)

logger = logging.getLogger(__name__)

MODEL_CLASSES = ("Seq2Seq", "Linear", "NLinear")


@dataclass
class ModelConfig:
    model_class_name: str = "Seq2Seq"
    input_size: int = 4
    feature_win: int = 512
    target_win: int = 1
    enc_embedding_size: int = 10
    enc_hidden_size: int = 110
    enc_num_layers: int = 1
    enc_bidirectional: bool = False
    dec_embedding_size: int = 10
    dec_hidden_size: int = 110
    dec_output_size: int = 3
    attn_heads: int = 1
    individual: bool = False
    use_asl: bool = True
    asl: AslConfig = field(default_factory=AslConfig)

    def __post_init__(self):
        if isinstance(self.asl, dict):
            self.asl = AslConfig(**self.asl)
        if self.model_class_name not in MODEL_CLASSES:
            raise ConfigError(f"model_class_name must be one of {MODEL_CLASSES}, got '{self.model_class_name}'")
        for name in ("input_size", "feature_win", "target_win", "enc_embedding_size", "enc_hidden_size",
                     "enc_num_layers", "dec_embedding_size", "dec_hidden_size", "dec_output_size", "attn_heads"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "ModelConfig":
        return cls(**data)


class GRUCell(Module):
    """
    Standard reset/update/candidate GRU cell.

    r = sigmoid(x W_r + h U_r + b_r)
    z = sigmoid(x W_z + h U_z + b_z)
    n = tanh(x W_n + r * (h U_n) + b_n)
    h' = (1 - z) * n + z * h
    """

    def __init__(self, input_size: int, hidden_size: int, rng: np.random.Generator):
        self.input_size = input_size
        self.hidden_size = hidden_size
        bound_x = 1.0 / np.sqrt(input_size)
        bound_h = 1.0 / np.sqrt(hidden_size)
        self.weight_ih = Parameter(rng.uniform(-bound_x, bound_x, size=(input_size, 3 * hidden_size)))
        self.weight_hh = Parameter(rng.uniform(-bound_h, bound_h, size=(hidden_size, 3 * hidden_size)))
        self.bias = Parameter(np.zeros(3 * hidden_size))

    def project(self, x: np.ndarray) -> np.ndarray:
        """Input-side gate pre-activations x W_ih + b; works on [B, in] or a whole [B, T, in] sequence."""
        if x.shape[-1] != self.input_size:
            raise DimensionError(f"GRU cell expects inputs (.., {self.input_size}), got {x.shape}")
        return x @ self.weight_ih.value + self.bias.value

    def project_backward(self, x: np.ndarray, grad_gx: np.ndarray) -> np.ndarray:
        """Accumulate W_ih and bias gradients for `project(x)`; returns grad wrt x."""
        x2 = x.reshape(-1, self.input_size)
        g2 = grad_gx.reshape(-1, 3 * self.hidden_size)
        self.weight_ih.grad += x2.T @ g2
        self.bias.grad += g2.sum(axis=0)
        return grad_gx @ self.weight_ih.value.T

    def step(self, gx: np.ndarray, h: np.ndarray) -> np.ndarray:
        """One recurrence step from precomputed input projections `gx` [B, 3*hid]."""
        if h.shape[-1] != self.hidden_size:
            raise DimensionError(f"GRU cell expects state (.., {self.hidden_size}), got {h.shape}")
        hs = self.hidden_size
        gh = h @ self.weight_hh.value
        r = sigmoid(gx[:, :hs] + gh[:, :hs])
        z = sigmoid(gx[:, hs:2 * hs] + gh[:, hs:2 * hs])
        hn = gh[:, 2 * hs:]
        n = np.tanh(gx[:, 2 * hs:] + r * hn)
        self._push(h, r, z, n, hn)
        return (1.0 - z) * n + z * h

    def step_backward(self, grad: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        """Returns (grad wrt gx, grad wrt previous h)."""
        h, r, z, n, hn = self._pop()
        g_n = grad * (1.0 - z)
        g_z = grad * (h - n)
        g_h = grad * z

        g_an = g_n * (1.0 - n ** 2)
        g_r = g_an * hn
        g_ar = g_r * r * (1.0 - r)
        g_az = g_z * z * (1.0 - z)

        g_gx = np.concatenate([g_ar, g_az, g_an], axis=-1)
        g_gh = np.concatenate([g_ar, g_az, g_an * r], axis=-1)

        self.weight_hh.grad += h.T @ g_gh
        return g_gx, g_h + g_gh @ self.weight_hh.value.T

    def forward(self, x: np.ndarray, h: np.ndarray) -> np.ndarray:
        h_new = self.step(self.project(x), h)
        self._push(x)
        return h_new

    def backward(self, grad: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        """Returns (grad wrt x, grad wrt previous h)."""
        (x,) = self._pop()
        g_gx, g_h = self.step_backward(grad)
        return self.project_backward(x, g_gx), g_h


class GRU(Module):
    """
    Multi-layer, optionally bidirectional GRU over [B, T, in].

    Each layer projects its whole input sequence through W_ih in one matmul;
    only the h W_hh product runs inside the time loop.
    """

    def __init__(self, input_size: int, hidden_size: int, num_layers: int, bidirectional: bool,
                 rng: np.random.Generator):
        self.hidden_size = hidden_size
        self.num_layers = num_layers
        self.directions = 2 if bidirectional else 1
        self.cells: List[GRUCell] = []
        for layer in range(num_layers):
            layer_input = input_size if layer == 0 else hidden_size * self.directions
            for _ in range(self.directions):
                self.cells.append(GRUCell(layer_input, hidden_size, rng))

    @property
    def output_size(self) -> int:
        return self.hidden_size * self.directions

    def _steps(self, direction: int, length: int):
        return range(length) if direction == 0 else range(length - 1, -1, -1)

    def forward(self, x: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        """
        Returns:
            (outputs [B, T, D*hid] of the top layer, final states [B, D*hid] of the top layer)
        """
        batch, length, _ = x.shape
        inputs = x
        finals = []
        for layer in range(self.num_layers):
            outputs = []
            finals = []
            for d in range(self.directions):
                cell = self.cells[layer * self.directions + d]
                gx = cell.project(inputs)
                h = np.zeros((batch, self.hidden_size), dtype=DTYPE)
                out = np.empty((batch, length, self.hidden_size), dtype=DTYPE)
                for t in self._steps(d, length):
                    h = cell.step(gx[:, t, :], h)
                    out[:, t, :] = h
                cell._push(inputs)
                outputs.append(out)
                finals.append(h)
            inputs = np.concatenate(outputs, axis=-1)
        return inputs, np.concatenate(finals, axis=-1)

    def backward(self, grad_outputs: np.ndarray, grad_final: np.ndarray) -> np.ndarray:
        batch, length, _ = grad_outputs.shape
        hs = self.hidden_size
        grad = grad_outputs
        for layer in range(self.num_layers - 1, -1, -1):
            first = self.cells[layer * self.directions]
            grad_in = np.zeros((batch, length, first.input_size), dtype=DTYPE)
            for d in range(self.directions - 1, -1, -1):
                cell = self.cells[layer * self.directions + d]
                (inputs,) = cell._pop()
                g_seq = grad[..., d * hs:(d + 1) * hs]
                if layer == self.num_layers - 1:
                    g_h = grad_final[:, d * hs:(d + 1) * hs].copy()
                else:
                    g_h = np.zeros((batch, hs), dtype=DTYPE)
                g_gx = np.empty((batch, length, 3 * hs), dtype=DTYPE)
                for t in reversed(list(self._steps(d, length))):
                    g_gx[:, t, :], g_h = cell.step_backward(g_h + g_seq[:, t, :])
                grad_in += cell.project_backward(inputs, g_gx)
            grad = grad_in
        return grad


class Encoder(Module):
    """Per-step embedding FC, GRU stack and a bridge FC onto the decoder's initial state."""

    def __init__(self, input_size: int, embedding_size: int, hidden_size: int, num_layers: int,
                 bidirectional: bool, dec_hidden_size: int, rng: np.random.Generator):
        self.embedding = Linear(input_size, embedding_size, rng)
        self.rnn = GRU(embedding_size, hidden_size, num_layers, bidirectional, rng)
        self.bridge = Linear(self.rnn.output_size, dec_hidden_size, rng)

    @property
    def output_size(self) -> int:
        return self.rnn.output_size

    def forward(self, x: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        embedded = self.embedding(x)
        outputs, final = self.rnn(embedded)
        return outputs, self.bridge(final)

    def backward(self, grad_outputs: np.ndarray, grad_init: np.ndarray) -> np.ndarray:
        grad_final = self.bridge.backward(grad_init)
        grad_embedded = self.rnn.backward(grad_outputs, grad_final)
        return self.embedding.backward(grad_embedded)


class Attention(Module):
    """
    Additive FC attention with `heads` scorers sharing one energy layer.

    energy_t = tanh([s, e_t] W_a + b_a); score_{h,t} = energy_t . v_h; the
    context is the mean over heads of the softmax-weighted encoder outputs.
    """

    def __init__(self, dec_hidden_size: int, enc_output_size: int, heads: int, rng: np.random.Generator):
        self.heads = heads
        self.dec_hidden_size = dec_hidden_size
        self.energy = Linear(dec_hidden_size + enc_output_size, dec_hidden_size, rng)
        self.score = Linear(dec_hidden_size, heads, rng, bias=False)

    def forward(self, state: np.ndarray, enc_outputs: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        """
        Returns:
            (context [B, E], weights [B, heads, T])
        """
        batch, length, _ = enc_outputs.shape
        repeated = np.broadcast_to(state[:, None, :], (batch, length, state.shape[-1]))
        energy = np.tanh(self.energy(np.concatenate([repeated, enc_outputs], axis=-1)))
        scores = self.score(energy)
        weights = softmax(scores, axis=1).transpose(0, 2, 1)
        context = np.einsum("bht,bte->be", weights, enc_outputs) / self.heads
        self._push(enc_outputs, energy, weights)
        return context, weights

    def backward(self, grad_context: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        """Returns (grad wrt decoder state, grad wrt encoder outputs)."""
        enc_outputs, energy, weights = self._pop()
        grad_enc = np.einsum("bht,be->bte", weights, grad_context) / self.heads
        grad_weights = np.einsum("be,bte->bt", grad_context, enc_outputs)[:, None, :] / self.heads
        grad_weights = np.broadcast_to(grad_weights, weights.shape)
        grad_scores = softmax_backward(weights, grad_weights, axis=-1).transpose(0, 2, 1)
        grad_energy = self.score.backward(grad_scores)
        grad_cat = self.energy.backward(grad_energy * (1.0 - energy ** 2))
        grad_state = grad_cat[..., : self.dec_hidden_size].sum(axis=1)
        grad_enc = grad_enc + grad_cat[..., self.dec_hidden_size:]
        return grad_state, grad_enc


class Decoder(Module):
    """
    Attention GRU decoder.

    Step 0 embeds the last raw force sample of the window; later steps embed
    the previous prediction through a separate feedback FC.
    """

    def __init__(self, input_size: int, output_size: int, embedding_size: int, hidden_size: int,
                 enc_output_size: int, heads: int, target_win: int, rng: np.random.Generator):
        self.target_win = target_win
        self.embedding_size = embedding_size
        self.input_embedding = Linear(input_size, embedding_size, rng)
        self.feedback_embedding = Linear(output_size, embedding_size, rng) if target_win > 1 else None
        self.attention = Attention(hidden_size, enc_output_size, heads, rng)
        self.cell = GRUCell(embedding_size + enc_output_size, hidden_size, rng)
        self.output = Linear(hidden_size, output_size, rng)

    def forward(self, last_input: np.ndarray, h0: np.ndarray, enc_outputs: np.ndarray) -> np.ndarray:
        h = h0
        embedded = self.input_embedding(last_input)
        predictions = []
        for step in range(self.target_win):
            context, _ = self.attention(h, enc_outputs)
            h = self.cell(np.concatenate([embedded, context], axis=-1), h)
            y = self.output(h)
            predictions.append(y)
            if step + 1 < self.target_win:
                embedded = self.feedback_embedding(y)
        return np.stack(predictions, axis=1)

    def backward(self, grad: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Returns (grad wrt last_input, grad wrt h0, grad wrt encoder outputs)."""
        batch = grad.shape[0]
        g_h = np.zeros((batch, self.cell.hidden_size), dtype=DTYPE)
        g_enc = 0.0
        g_embedded = None
        for step in range(self.target_win - 1, -1, -1):
            g_y = grad[:, step, :]
            if step + 1 < self.target_win:
                g_y = g_y + self.feedback_embedding.backward(g_embedded)
            g_h = g_h + self.output.backward(g_y)
            g_in, g_h = self.cell.backward(g_h)
            g_embedded = g_in[:, : self.embedding_size]
            g_state, g_e = self.attention.backward(g_in[:, self.embedding_size:])
            g_h = g_h + g_state
            g_enc = g_enc + g_e
        return self.input_embedding.backward(g_embedded), g_h, g_enc


class Seq2Seq(Module):
    """ASL (optional) -> Encoder -> Decoder over windows [B, feature_win, M_F]."""

    def __init__(self, cfg: ModelConfig, seed: int = 0):
        self.cfg = cfg
        asl_seed, enc_seed, dec_seed = spawn_seeds(seed, 3)
        enc_input = cfg.input_size
        if cfg.use_asl:
            self.asl = AdaptiveSpectrumLayer(cfg.feature_win, cfg.input_size, cfg.asl, make_rng(asl_seed))
            enc_input = self.asl.out_channels
        else:
            self.asl = None
        self.encoder = Encoder(enc_input, cfg.enc_embedding_size, cfg.enc_hidden_size, cfg.enc_num_layers,
                               cfg.enc_bidirectional, cfg.dec_hidden_size, make_rng(enc_seed))
        self.decoder = Decoder(cfg.input_size, cfg.dec_output_size, cfg.dec_embedding_size, cfg.dec_hidden_size,
                               self.encoder.output_size, cfg.attn_heads, cfg.target_win, make_rng(dec_seed))

    def forward(self, x: np.ndarray) -> np.ndarray:
        _check_window(x, self.cfg)
        h = self.asl(x) if self.asl is not None else x
        enc_outputs, dec_init = self.encoder(h)
        return self.decoder(x[:, -1, :], dec_init, enc_outputs)

    def backward(self, grad: np.ndarray) -> np.ndarray:
        g_last, g_init, g_enc = self.decoder.backward(grad)
        g_h = self.encoder.backward(g_enc, g_init)
        g_x = self.asl.backward(g_h) if self.asl is not None else g_h
        g_x = np.array(g_x)
        g_x[:, -1, :] += g_last
        return g_x


class ChannelHeads(Module):
    """
    One Linear per input channel over that channel's window; the heads' outputs
    are summed. Takes and returns the same flattened [B, window * channels]
    layout as the shared FC it replaces.
    """

    def __init__(self, window: int, channels: int, out_features: int, rng: np.random.Generator):
        self.window = window
        self.channels = channels
        self.heads: List[Linear] = [Linear(window, out_features, rng) for _ in range(channels)]

    def forward(self, x: np.ndarray) -> np.ndarray:
        x = x.reshape(x.shape[0], self.window, self.channels)
        return sum(head(x[:, :, c]) for c, head in enumerate(self.heads))

    def backward(self, grad: np.ndarray) -> np.ndarray:
        g = np.stack([head.backward(grad) for head in self.heads], axis=-1)
        return g.reshape(grad.shape[0], -1)


def _window_fc(cfg: ModelConfig, out_features: int, rng: np.random.Generator) -> Module:
    if cfg.individual:
        return ChannelHeads(cfg.feature_win, cfg.input_size, out_features, rng)
    return Linear(cfg.feature_win * cfg.input_size, out_features, rng)


class LinearModel(Module):
    """One FC over the flattened window, or one per channel with `individual`."""

    def __init__(self, cfg: ModelConfig, seed: int = 0):
        self.cfg = cfg
        self.fc = _window_fc(cfg, cfg.target_win * cfg.dec_output_size, make_rng(seed))

    def forward(self, x: np.ndarray) -> np.ndarray:
        _check_window(x, self.cfg)
        y = self.fc(x.reshape(x.shape[0], -1))
        return y.reshape(x.shape[0], self.cfg.target_win, self.cfg.dec_output_size)

    def backward(self, grad: np.ndarray) -> np.ndarray:
        g = self.fc.backward(grad.reshape(grad.shape[0], -1))
        return g.reshape(grad.shape[0], self.cfg.feature_win, self.cfg.input_size)


class NLinearModel(Module):
    """
    LinearModel on the window minus its last sample, plus a learned projection
    of that last sample added back to the output.
    """

    def __init__(self, cfg: ModelConfig, seed: int = 0):
        self.cfg = cfg
        rng = make_rng(seed)
        out = cfg.target_win * cfg.dec_output_size
        self.fc = _window_fc(cfg, out, rng)
        self.shift = Linear(cfg.input_size, out, rng)

    def forward(self, x: np.ndarray) -> np.ndarray:
        _check_window(x, self.cfg)
        batch = x.shape[0]
        last = x[:, -1, :]
        centred = (x - last[:, None, :]).reshape(batch, -1)
        y = self.fc(centred) + self.shift(last)
        return y.reshape(batch, self.cfg.target_win, self.cfg.dec_output_size)

    def backward(self, grad: np.ndarray) -> np.ndarray:
        batch = grad.shape[0]
        g = grad.reshape(batch, -1)
        g_centred = self.fc.backward(g).reshape(batch, self.cfg.feature_win, self.cfg.input_size)
        g_last = self.shift.backward(g) - g_centred.sum(axis=1)
        g_x = g_centred.copy()
        g_x[:, -1, :] += g_last
        return g_x


def _check_window(x: np.ndarray, cfg: ModelConfig) -> None:
    if x.ndim != 3 or x.shape[1:] != (cfg.feature_win, cfg.input_size):
        raise DimensionError(
            f"expected windows [B, {cfg.feature_win}, {cfg.input_size}], got {tuple(x.shape)}"
        )


MODELS = {"Seq2Seq": Seq2Seq, "Linear": LinearModel, "NLinear": NLinearModel}


def build_model(cfg: ModelConfig, seed: int = 0) -> Module:
    """Instantiate the model named by `cfg.model_class_name`, initialized from `seed`."""
    return MODELS[cfg.model_class_name](cfg, seed)


def count_params(cfg: ModelConfig) -> int:
    return build_model(cfg).num_parameters()


def predict(model: Module, windows: np.ndarray, batch_size: int = 512) -> np.ndarray:
    """Eval-mode forward over `windows` in chunks of `batch_size`."""
    model.eval()
    if len(windows) == 0:
        cfg = model.cfg
        return np.zeros((0, cfg.target_win, cfg.dec_output_size), dtype=DTYPE)
    chunks = [model(windows[i:i + batch_size]) for i in range(0, len(windows), batch_size)]
    return np.concatenate(chunks, axis=0)
