"""
Run configuration.

Keys are flat (train_percent, feature_win, model_args_enc_hidden_size, ...);
model hyperparameters carry the `model_args_` prefix and generator settings
`synth_`. Omitted keys take the measured-dataset defaults.
"""
import logging
import math
import typing
from dataclasses import asdict, dataclass, field, fields, replace
from importlib import resources
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional

import yaml

from .asl import AslConfig
from .data import WindowSpec
from .errors import ConfigError
from .seq2seq import ModelConfig
from .synth import SynthRanges

logger = logging.getLogger(__name__)

PRESETS = ("measured", "open_source", "synthetic")


@dataclass
class RunConfig:
    train_percent: float = 0.75
    val_percent: float = 0.1
    feature_win: int = 512
    target_win: int = 1
    intersect: int = 1
    stride: int = 1
    model_class_name: str = "Seq2Seq"
    optimizer_name: str = "Adam"
    criterion_name: str = "L1Loss"
    patience: int = 10
    patience_tolerance: float = 0.005
    n_epochs: int = 30
    seed: int = 3407
    features_norm_method: str = "zscore"
    targets_norm_method: str = "identity"
    features_global_normalizer: bool = True
    targets_global_normalizer: bool = True
    regularization_factor: float = 0.0
    batch_size: int = 512
    learning_rate: float = 1e-3
    grad_clip: float = 5.0

    model_args_enc_embedding_size: int = 10
    model_args_enc_hidden_size: int = 110
    model_args_enc_num_layers: int = 1
    model_args_enc_bidirectional: bool = False
    model_args_dec_embedding_size: int = 10
    model_args_dec_hidden_size: int = 110
    model_args_dec_output_size: int = 3
    model_args_attn_heads: int = 1
    model_args_individual: bool = False
    model_args_use_asl: bool = True
    model_args_concat_asl: bool = False
    model_args_skip_mode: str = "add"
    model_args_complexify: bool = False
    model_args_gate: bool = True
    model_args_multidim_fft: bool = False
    model_args_dropout: float = 0.1
    model_args_freq_threshold: float = 210.0
    model_args_per_freq_layer: bool = True
    model_args_cross_spectrum_density: bool = False
    model_args_use_freqs: bool = False
    model_args_phase_encoding: str = "sincos"
    model_args_zero_gate_init: bool = False
    model_args_asl_hidden_size: Optional[int] = None
    model_args_sample_rate: Optional[float] = None
    model_args_input_dim: Optional[List[int]] = None

    synth_n_events: int = 64
    synth_sample_rate: float = 500.0
    synth_duration_range: List[float] = field(default_factory=lambda: [0.5, 0.5])
    synth_freq_range: List[float] = field(default_factory=lambda: [5.0, 20.0])
    synth_amplitude_range: List[float] = field(default_factory=lambda: [math.pi / 6, math.pi / 3])
    synth_shape_range: List[float] = field(default_factory=lambda: [0.0, 0.99])
    synth_pitch_amp: float = 0.7
    synth_pitch_lag: float = 0.002
    synth_elev_amp: float = 0.1
    synth_noise_std: float = 0.0

    bench_reps: int = 100
    bench_warmup: int = 20
    bench_hidden_sizes: List[int] = field(default_factory=lambda: [8, 32, 64, 96, 128, 160, 192, 224])

    data_dir: str = "data"
    out_dir: str = "runs"
    checkpoint: Optional[str] = None

    def __post_init__(self):
        if self.model_args_concat_asl and self.model_args_skip_mode not in ("add", "concat"):
            raise ConfigError(
                f"model_args_concat_asl=true conflicts with model_args_skip_mode={self.model_args_skip_mode}"
            )
        if self.grad_clip < 0:
            raise ConfigError(f"grad_clip must be >= 0, got {self.grad_clip}")
        if self.regularization_factor < 0:
            raise ConfigError(f"regularization_factor must be >= 0, got {self.regularization_factor}")
        if self.learning_rate <= 0:
            raise ConfigError(f"learning_rate must be > 0, got {self.learning_rate}")
        if self.batch_size < 1 or self.n_epochs < 1 or self.patience < 1:
            raise ConfigError("batch_size, n_epochs and patience must be positive")
        if self.model_args_input_dim is not None:
            dims = self.model_args_input_dim
            if len(dims) != 3 or dims[1] != self.feature_win:
                raise ConfigError(
                    f"model_args_input_dim {dims} must be [batch, feature_win={self.feature_win}, channels]"
                )

    @property
    def skip_mode(self) -> str:
        return "concat" if self.model_args_concat_asl else self.model_args_skip_mode

    def window_spec(self) -> WindowSpec:
        return WindowSpec(self.feature_win, self.target_win, self.intersect, self.stride)

    def model_config(self, input_size: int, sample_rate: float) -> ModelConfig:
        """
        Build the ModelConfig for a dataset with `input_size` force channels
        sampled at `sample_rate` Hz.
        """
        if self.model_args_input_dim is not None and self.model_args_input_dim[2] != input_size:
            raise ConfigError(
                f"model_args_input_dim declares {self.model_args_input_dim[2]} channels, data has {input_size}"
            )
        asl = AslConfig(
            hidden_size=self.model_args_asl_hidden_size or self.model_args_enc_hidden_size,
            dropout=self.model_args_dropout,
            freq_threshold=self.model_args_freq_threshold,
            sample_rate=self.model_args_sample_rate or sample_rate,
            gate=self.model_args_gate,
            complexify=self.model_args_complexify,
            per_freq_layer=self.model_args_per_freq_layer,
            cross_spectrum_density=self.model_args_cross_spectrum_density,
            use_freqs=self.model_args_use_freqs,
            multidim_fft=self.model_args_multidim_fft,
            skip_mode=self.skip_mode,
            phase_encoding=self.model_args_phase_encoding,
            zero_gate_init=self.model_args_zero_gate_init,
        )
        return ModelConfig(
            model_class_name=self.model_class_name,
            input_size=input_size,
            feature_win=self.feature_win,
            target_win=self.target_win,
            enc_embedding_size=self.model_args_enc_embedding_size,
            enc_hidden_size=self.model_args_enc_hidden_size,
            enc_num_layers=self.model_args_enc_num_layers,
            enc_bidirectional=self.model_args_enc_bidirectional,
            dec_embedding_size=self.model_args_dec_embedding_size,
            dec_hidden_size=self.model_args_dec_hidden_size,
            dec_output_size=self.model_args_dec_output_size,
            attn_heads=self.model_args_attn_heads,
            individual=self.model_args_individual,
            use_asl=self.model_args_use_asl,
            asl=asl,
        )

    def synth_ranges(self) -> SynthRanges:
        return SynthRanges(
            freq_range=tuple(self.synth_freq_range),
            amplitude_range=tuple(self.synth_amplitude_range),
            shape_range=tuple(self.synth_shape_range),
            duration_range=tuple(self.synth_duration_range),
            sample_rate=self.synth_sample_rate,
            pitch_lag=self.synth_pitch_lag,
            pitch_amp=self.synth_pitch_amp,
            elev_amp=self.synth_elev_amp,
            noise_std=self.synth_noise_std,
        )

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    def updated(self, values: Mapping[str, Any]) -> "RunConfig":
        """Copy with `values` applied; keys and types are checked."""
        return replace(self, **coerce_values(values))

    @classmethod
    def from_mapping(cls, values: Mapping[str, Any]) -> "RunConfig":
        return cls(**coerce_values(values))


def _field_types() -> Dict[str, Any]:
    return typing.get_type_hints(RunConfig)


def _coerce(key: str, value: Any, annotation: Any) -> Any:
    origin = typing.get_origin(annotation)
    args = typing.get_args(annotation)
    if origin is typing.Union and type(None) in args:
        if value is None:
            return None
        annotation = next(a for a in args if a is not type(None))
        origin = typing.get_origin(annotation)
        args = typing.get_args(annotation)

    if annotation is bool:
        if isinstance(value, bool):
            return value
        raise ConfigError(f"{key}: expected true/false, got {value!r}")
    if annotation is int:
        if isinstance(value, int) and not isinstance(value, bool):
            return value
        if isinstance(value, float) and value.is_integer():
            return int(value)
        if isinstance(value, str):
            try:
                return int(value)
            except ValueError:
                pass
        raise ConfigError(f"{key}: expected an integer, got {value!r}")
    if annotation is float:
        if isinstance(value, (int, float)) and not isinstance(value, bool):
            return float(value)
        if isinstance(value, str):
            # PyYAML reads exponents without a dot (1e-3) as strings
            try:
                return float(value)
            except ValueError:
                pass
        raise ConfigError(f"{key}: expected a number, got {value!r}")
    if annotation is str:
        if isinstance(value, str):
            return value
        raise ConfigError(f"{key}: expected a string, got {value!r}")
    if origin is list:
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{key}: expected a list, got {value!r}")
        return [_coerce(key, v, args[0]) for v in value]
    return value


def coerce_values(values: Mapping[str, Any]) -> Dict[str, Any]:
    """Check keys against RunConfig and convert values to the field types."""
    types = _field_types()
    out = {}
    for key, value in values.items():
        if key not in types:
            raise ConfigError(f"unknown config key '{key}'")
        out[key] = _coerce(key, value, types[key])
    return out


def config_keys() -> List[str]:
    return [f.name for f in fields(RunConfig)]


def parse_config_text(text: str, source: str = "<config>") -> Dict[str, Any]:
    """
    Parse YAML/JSON text, or plain `key=value` lines.

    Values of key=value lines are read as YAML scalars, so `true`, `0.1` and
    `[1, 2]` take their natural types.
    """
    try:
        loaded = yaml.safe_load(text)
    except yaml.YAMLError:
        loaded = None
    if isinstance(loaded, dict):
        return loaded
    if loaded is None and not text.strip():
        return {}

    values = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}, line {lineno}: expected key=value, got '{raw.strip()}'")
        key, value = line.split("=", 1)
        try:
            values[key.strip()] = yaml.safe_load(value.strip())
        except yaml.YAMLError as e:
            raise ConfigError(f"{source}, line {lineno}: cannot parse value for '{key.strip()}': {e}") from e
    return values


def load_preset(name: str) -> Dict[str, Any]:
    if name not in PRESETS:
        raise ConfigError(f"unknown preset '{name}', choose from {PRESETS}")
    text = resources.files("force2kin").joinpath("templates", f"{name}.yaml").read_text(encoding="utf-8")
    return parse_config_text(text, source=f"preset {name}")


def load_run_config(path: Optional[str] = None, preset: Optional[str] = None,
                    overrides: Optional[Mapping[str, Any]] = None) -> RunConfig:
    """
    Resolve a RunConfig from defaults, then a preset, then a config file, then overrides.

    Raises:
        ConfigError: unknown key, bad value type or unreadable file.
    """
    values: Dict[str, Any] = {}
    if preset:
        values.update(load_preset(preset))
    if path:
        config_path = Path(path)
        if not config_path.is_file():
            raise ConfigError(f"config file not found: {config_path}")
        values.update(parse_config_text(config_path.read_text(encoding="utf-8"), source=str(config_path)))
    if overrides:
        values.update(overrides)
    cfg = RunConfig.from_mapping(values)
    logger.debug(f"Resolved config: {cfg.to_dict()}")
    return cfg


def dump_run_config(cfg: RunConfig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        yaml.safe_dump(cfg.to_dict(), f, sort_keys=False)
    return path
