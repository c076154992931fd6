"""
Checkpoint files.

Layout:
    <JSON header>\\n
    <payload: little-endian float32 parameter arrays, in manifest order>
    <trailer: struct "<QI" = payload byte length, CRC32 of payload>

The header holds the format version, the ModelConfig, both normalizers, the
run hyperparameters and the parameter manifest (ordered names and shapes).
"""
import json
import logging
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Tuple

import numpy as np

from .data import Normalizer
from .errors import DataError
from .seq2seq import ModelConfig, build_model
from .tensor_core import Module

logger = logging.getLogger(__name__)

FORMAT = "force2kin-checkpoint"
FORMAT_VERSION = 1
TRAILER = struct.Struct("<QI")
PAYLOAD_DTYPE = np.dtype("<f4")


@dataclass
class Checkpoint:
    model_config: ModelConfig
    feature_normalizer: Normalizer
    target_normalizer: Normalizer
    run_config: Dict[str, Any] = field(default_factory=dict)
    force_channels: List[str] = field(default_factory=list)
    kinematic_channels: List[str] = field(default_factory=lambda: ["phi", "theta", "psi"])
    manifest: List[Tuple[str, Tuple[int, ...]]] = field(default_factory=list)


def save_checkpoint(path, model: Module, checkpoint: Checkpoint) -> Path:
    """Write `model`'s parameters with the metadata in `checkpoint`; the manifest is filled in from the model."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    named = list(model.named_parameters())
    checkpoint.manifest = [(name, tuple(p.shape)) for name, p in named]
    header = {
        "format": FORMAT,
        "version": FORMAT_VERSION,
        "model_config": checkpoint.model_config.to_dict(),
        "feature_normalizer": checkpoint.feature_normalizer.to_dict(),
        "target_normalizer": checkpoint.target_normalizer.to_dict(),
        "run_config": checkpoint.run_config,
        "force_channels": checkpoint.force_channels,
        "kinematic_channels": checkpoint.kinematic_channels,
        "manifest": [[name, list(shape)] for name, shape in checkpoint.manifest],
    }
    payload = b"".join(np.ascontiguousarray(p.value, dtype=PAYLOAD_DTYPE).tobytes() for _, p in named)
    with open(path, "wb") as f:
        f.write(json.dumps(header, sort_keys=True).encode("utf-8"))
        f.write(b"\n")
        f.write(payload)
        f.write(TRAILER.pack(len(payload), zlib.crc32(payload)))
    logger.info(f"Saved checkpoint with {len(named)} arrays ({len(payload)} bytes) to {path}")
    return path


def read_checkpoint(path) -> Tuple[Checkpoint, Dict[str, np.ndarray]]:
    """
    Parse and verify a checkpoint file.

    Returns:
        (metadata, parameter arrays by name as float64)

    Raises:
        DataError: on a malformed header, truncated payload or CRC mismatch.
    """
    path = Path(path)
    if not path.is_file():
        raise DataError(f"{path}: checkpoint not found")
    data = path.read_bytes()
    newline = data.find(b"\n")
    if newline < 0 or len(data) < newline + 1 + TRAILER.size:
        raise DataError(f"{path}: truncated checkpoint")
    try:
        header = json.loads(data[:newline].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise DataError(f"{path}: unreadable checkpoint header ({e})") from e
    if header.get("format") != FORMAT or header.get("version") != FORMAT_VERSION:
        raise DataError(f"{path}: unsupported checkpoint format {header.get('format')} v{header.get('version')}")

    payload = data[newline + 1:-TRAILER.size]
    length, crc = TRAILER.unpack(data[-TRAILER.size:])
    if length != len(payload):
        raise DataError(f"{path}: payload is {len(payload)} bytes, trailer says {length}")
    if zlib.crc32(payload) != crc:
        raise DataError(f"{path}: payload CRC mismatch")

    manifest = [(name, tuple(shape)) for name, shape in header["manifest"]]
    expected = sum(int(np.prod(shape)) for _, shape in manifest) * PAYLOAD_DTYPE.itemsize
    if expected != len(payload):
        raise DataError(f"{path}: manifest needs {expected} payload bytes, found {len(payload)}")

    flat = np.frombuffer(payload, dtype=PAYLOAD_DTYPE).astype(np.float64)
    state = {}
    offset = 0
    for name, shape in manifest:
        size = int(np.prod(shape))
        state[name] = flat[offset:offset + size].reshape(shape)
        offset += size

    checkpoint = Checkpoint(
        model_config=ModelConfig.from_dict(header["model_config"]),
        feature_normalizer=Normalizer.from_dict(header["feature_normalizer"]),
        target_normalizer=Normalizer.from_dict(header["target_normalizer"]),
        run_config=header.get("run_config", {}),
        force_channels=header.get("force_channels", []),
        kinematic_channels=header.get("kinematic_channels", ["phi", "theta", "psi"]),
        manifest=manifest,
    )
    return checkpoint, state


def load_checkpoint(path) -> Tuple[Module, Checkpoint]:
    """Rebuild the model stored at `path` in eval mode."""
    checkpoint, state = read_checkpoint(path)
    model = build_model(checkpoint.model_config)
    try:
        model.load_state_dict(state)
    except ValueError as e:
        raise DataError(f"{path}: {e}") from e
    model.eval()
    logger.info(f"Loaded {checkpoint.model_config.model_class_name} checkpoint from {path}")
    return model, checkpoint
