"""
Event datasets: loading/writing, normalization, windowing, splitting and
force/kinematics onset alignment.
"""
import json
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from numpy.lib.stride_tricks import sliding_window_view
from scipy.ndimage import uniform_filter1d

from .errors import AlignmentError, ConfigError, DataError
from .tensor_core import DTYPE, make_rng
from .utils import event_filename, write_table

logger = logging.getLogger(__name__)

MANIFEST_NAME = "manifest.json"
KINEMATIC_CHANNELS = ["phi", "theta", "psi"]
NORM_METHODS = ("zscore", "minmax", "identity")
SPREAD_FLOOR = 1e-8


@dataclass
class Event:
    """One synchronized recording: forces [T, M_F] and kinematics [T, M_K] (radians)."""

    id: str
    sample_rate: float
    forces: np.ndarray
    kinematics: np.ndarray

    def __post_init__(self):
        self.forces = np.asarray(self.forces, dtype=DTYPE)
        self.kinematics = np.asarray(self.kinematics, dtype=DTYPE)
        if self.forces.ndim != 2 or self.kinematics.ndim != 2:
            raise DataError(f"event {self.id}: forces and kinematics must be 2-D")
        if len(self.forces) != len(self.kinematics):
            raise DataError(
                f"event {self.id}: forces have {len(self.forces)} samples, kinematics {len(self.kinematics)}"
            )

    def __len__(self) -> int:
        return len(self.forces)


@dataclass
class Dataset:
    events: List[Event]
    force_channels: List[str]
    kinematic_channels: List[str] = field(default_factory=lambda: list(KINEMATIC_CHANNELS))
    sample_rate: float = 5000.0

    def __post_init__(self):
        for event in self.events:
            if event.forces.shape[1] != self.n_forces:
                raise DataError(
                    f"event {event.id}: {event.forces.shape[1]} force channels, dataset has {self.n_forces}"
                )
            if event.kinematics.shape[1] != self.n_kinematics:
                raise DataError(
                    f"event {event.id}: {event.kinematics.shape[1]} kinematic channels, dataset has {self.n_kinematics}"
                )

    @property
    def n_forces(self) -> int:
        return len(self.force_channels)

    @property
    def n_kinematics(self) -> int:
        return len(self.kinematic_channels)

    def __len__(self) -> int:
        return len(self.events)

    def __iter__(self) -> Iterator[Event]:
        return iter(self.events)

    def subset(self, indices: Sequence[int]) -> "Dataset":
        return replace(self, events=[self.events[i] for i in indices])

    def select(self, event_ids: Sequence[str]) -> "Dataset":
        by_id = {e.id: e for e in self.events}
        missing = [i for i in event_ids if i not in by_id]
        if missing:
            raise DataError(f"events not in dataset: {missing}")
        return replace(self, events=[by_id[i] for i in event_ids])


# Loading and writing

def _read_manifest(root: Path) -> dict:
    manifest_path = root / MANIFEST_NAME
    if not manifest_path.exists():
        raise DataError(f"{manifest_path}: manifest not found")
    try:
        with open(manifest_path, "r", encoding="utf-8") as f:
            manifest = json.load(f)
    except json.JSONDecodeError as e:
        raise DataError(f"{manifest_path}: invalid JSON at line {e.lineno}: {e.msg}") from e
    if "sample_rate" not in manifest:
        raise DataError(f"{manifest_path}: missing 'sample_rate'")
    return manifest


def _read_event_file(path: Path, sample_rate: float, kinematic_channels: List[str]) -> Tuple[List[str], Event]:
    try:
        frame = pd.read_csv(path, float_precision="round_trip")
    except pd.errors.ParserError as e:
        raise DataError(f"{path}: ragged rows ({e})") from e
    except (pd.errors.EmptyDataError, UnicodeDecodeError) as e:
        raise DataError(f"{path}: unreadable event file ({e})") from e

    columns = [str(c).strip() for c in frame.columns]
    if not columns or columns[0] != "t":
        raise DataError(f"{path}, line 1: first column must be 't'")
    for name in kinematic_channels:
        if name not in columns:
            raise DataError(f"{path}, line 1: missing column '{name}'")
    if columns[-len(kinematic_channels):] != kinematic_channels:
        raise DataError(f"{path}, line 1: kinematic columns must come last as {kinematic_channels}")
    force_channels = columns[1:-len(kinematic_channels)]
    if not force_channels:
        raise DataError(f"{path}, line 1: no force columns")

    values = frame.apply(pd.to_numeric, errors="coerce").to_numpy(dtype=DTYPE)
    bad_rows = np.flatnonzero(~np.isfinite(values).all(axis=1))
    if bad_rows.size:
        row = int(bad_rows[0])
        bad_cols = [columns[j] for j in np.flatnonzero(~np.isfinite(values[row]))]
        raise DataError(f"{path}, line {row + 2}: missing or non-finite value in {bad_cols}")

    t = values[:, 0]
    if len(t) > 1:
        dt = np.diff(t)
        if np.any(dt <= 0):
            row = int(np.flatnonzero(dt <= 0)[0]) + 1
            raise DataError(f"{path}, line {row + 2}: time column is not strictly increasing")
        uneven = np.flatnonzero(~np.isclose(dt, 1.0 / sample_rate, rtol=1e-6, atol=1e-9))
        if uneven.size:
            row = int(uneven[0]) + 1
            raise DataError(f"{path}, line {row + 2}: time step differs from 1/sample_rate")

    n_forces = len(force_channels)
    event = Event(
        id=path.stem,
        sample_rate=sample_rate,
        forces=values[:, 1:1 + n_forces],
        kinematics=values[:, 1 + n_forces:],
    )
    return force_channels, event


def load_events(path) -> Dataset:
    """
    Load a dataset directory: `manifest.json` plus one CSV per event.

    Each CSV has header `t,<force channels...>,phi,theta,psi`. Events are
    returned in sorted file-name order.

    Raises:
        DataError: naming the offending file (and line) on any schema problem.
    """
    root = Path(path)
    if not root.is_dir():
        raise DataError(f"{root}: dataset directory not found")
    manifest = _read_manifest(root)
    sample_rate = float(manifest["sample_rate"])
    kinematic_channels = list(manifest.get("kinematic_channels", KINEMATIC_CHANNELS))
    declared_forces = manifest.get("force_channels")

    if "events" in manifest:
        files = sorted(root / name for name in manifest["events"])
    else:
        files = sorted(root.glob("*.csv"))
    if not files:
        raise DataError(f"{root}: no event files")

    events = []
    force_channels = list(declared_forces) if declared_forces else None
    for file in files:
        if not file.exists():
            raise DataError(f"{file}: listed in manifest but missing")
        channels, event = _read_event_file(file, sample_rate, kinematic_channels)
        if force_channels is None:
            force_channels = channels
        elif channels != force_channels:
            raise DataError(f"{file}, line 1: force columns {channels} differ from {force_channels}")
        events.append(event)

    logger.info(f"Loaded {len(events)} events ({len(force_channels)} force channels) from {root}")
    return Dataset(events, force_channels, kinematic_channels, sample_rate)


def write_events(dataset: Dataset, path) -> Path:
    """Write `dataset` in the format `load_events` reads; returns the directory."""
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    names = []
    for event in dataset.events:
        name = event_filename(event.id)
        t = np.arange(len(event)) / dataset.sample_rate
        frame = pd.DataFrame(
            np.column_stack([t, event.forces, event.kinematics]),
            columns=["t", *dataset.force_channels, *dataset.kinematic_channels],
        )
        write_table(frame, root / name)
        names.append(name)
    manifest = {
        "sample_rate": dataset.sample_rate,
        "force_channels": dataset.force_channels,
        "kinematic_channels": dataset.kinematic_channels,
        "events": names,
    }
    with open(root / MANIFEST_NAME, "w", encoding="utf-8") as f:
        json.dump(manifest, f, indent=2)
        f.write("\n")
    logger.info(f"Wrote {len(names)} events to {root}")
    return root


# Normalization

@dataclass
class Normalizer:
    """
    Per-channel affine normalization, y = (x - shift) / scale.

    A non-global normalizer carries no statistics; `resolve` fits it on the
    array it is about to transform (per-event normalization).
    """

    method: str = "identity"
    is_global: bool = True
    shift: Optional[np.ndarray] = None
    scale: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.method not in NORM_METHODS:
            raise ConfigError(f"normalization method must be one of {NORM_METHODS}, got '{self.method}'")
        if self.shift is not None:
            self.shift = np.asarray(self.shift, dtype=DTYPE)
            self.scale = np.asarray(self.scale, dtype=DTYPE)

    @property
    def fitted(self) -> bool:
        return self.shift is not None

    @classmethod
    def fit(cls, arrays: Sequence[np.ndarray], method: str, is_global: bool = True) -> "Normalizer":
        """Fit on the concatenation of `arrays` (rows are samples, columns channels)."""
        data = np.concatenate([np.asarray(a, dtype=DTYPE) for a in arrays], axis=0)
        if method == "zscore":
            shift = data.mean(axis=0)
            scale = np.maximum(data.std(axis=0), SPREAD_FLOOR)
        elif method == "minmax":
            shift = data.min(axis=0)
            scale = np.maximum(data.max(axis=0) - shift, SPREAD_FLOOR)
        elif method == "identity":
            shift = np.zeros(data.shape[1])
            scale = np.ones(data.shape[1])
        else:
            raise ConfigError(f"normalization method must be one of {NORM_METHODS}, got '{method}'")
        return cls(method, is_global, shift, scale)

    def resolve(self, x: np.ndarray) -> "Normalizer":
        if self.fitted:
            return self
        return Normalizer.fit([x], self.method, is_global=False)

    def apply(self, x: np.ndarray) -> np.ndarray:
        norm = self.resolve(x)
        return (np.asarray(x, dtype=DTYPE) - norm.shift) / norm.scale

    def invert(self, y: np.ndarray) -> np.ndarray:
        if not self.fitted:
            raise ConfigError("cannot invert a per-event normalizer without its fitted statistics")
        return np.asarray(y, dtype=DTYPE) * self.scale + self.shift

    def to_dict(self) -> dict:
        return {
            "method": self.method,
            "is_global": self.is_global,
            "shift": None if self.shift is None else self.shift.tolist(),
            "scale": None if self.scale is None else self.scale.tolist(),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "Normalizer":
        return cls(**data)


def fit_normalizer(events: Sequence[np.ndarray], method: str, is_global: bool = True) -> Normalizer:
    """
    Fit on training arrays when `is_global`; otherwise return an unfitted
    normalizer that fits each array on its own.
    """
    if is_global:
        return Normalizer.fit(events, method, True)
    return Normalizer(method, False)


def normalize_dataset(dataset: Dataset, features: Normalizer, targets: Normalizer) -> Dataset:
    events = [
        replace(e, forces=features.apply(e.forces), kinematics=targets.apply(e.kinematics))
        for e in dataset.events
    ]
    return replace(dataset, events=events)


# Windowing

@dataclass(frozen=True)
class WindowSpec:
    feature_win: int = 512
    target_win: int = 1
    intersect: int = 1
    stride: int = 1

    def __post_init__(self):
        if self.feature_win < 1 or self.target_win < 1 or self.stride < 1:
            raise ConfigError(f"feature_win, target_win and stride must be positive: {self}")
        if not 1 <= self.intersect <= self.feature_win:
            raise ConfigError(f"intersect must be in [1, feature_win], got {self.intersect}")

    @property
    def span(self) -> int:
        """Samples an event needs for one window."""
        return max(self.feature_win, self.feature_win - self.intersect + self.target_win)

    def starts(self, length: int) -> np.ndarray:
        if length < self.span:
            return np.zeros(0, dtype=np.int64)
        return np.arange(0, length - self.span + 1, self.stride)


@dataclass
class WindowBatch:
    features: np.ndarray
    targets: np.ndarray
    target_index: np.ndarray
    event_ids: np.ndarray

    def __len__(self) -> int:
        return len(self.features)


def make_windows(event: Event, spec: WindowSpec) -> WindowBatch:
    """
    Cut `event` into (force window, kinematic target) pairs.

    X = forces[s : s+W]; Y = kinematics[s+W-intersect : s+W-intersect+target_win]
    for s = 0, stride, ...; `target_index` is the first target sample.
    """
    starts = spec.starts(len(event))
    m_f = event.forces.shape[1]
    m_k = event.kinematics.shape[1]
    if starts.size == 0:
        logger.warning(f"Event {event.id}: {len(event)} samples < {spec.span} needed, skipped")
        return WindowBatch(
            np.zeros((0, spec.feature_win, m_f)),
            np.zeros((0, spec.target_win, m_k)),
            np.zeros(0, dtype=np.int64),
            np.array([], dtype=object),
        )
    offsets = starts + spec.feature_win - spec.intersect
    features = sliding_window_view(event.forces, spec.feature_win, axis=0)[starts].transpose(0, 2, 1)
    targets = sliding_window_view(event.kinematics, spec.target_win, axis=0)[offsets].transpose(0, 2, 1)
    return WindowBatch(
        np.ascontiguousarray(features),
        np.ascontiguousarray(targets),
        offsets,
        np.full(len(starts), event.id, dtype=object),
    )


class WindowSet:
    """
    All windows of a list of events, gathered lazily batch by batch so long
    recordings never materialize every overlapping window at once.
    """

    def __init__(self, events: Sequence[Event], spec: WindowSpec):
        self.events = list(events)
        self.spec = spec
        index = []
        for i, event in enumerate(self.events):
            starts = spec.starts(len(event))
            if starts.size == 0:
                logger.warning(f"Event {event.id}: {len(event)} samples < {spec.span} needed, skipped")
                continue
            index.append(np.column_stack([np.full(starts.size, i), starts]))
        self.index = np.concatenate(index) if index else np.zeros((0, 2), dtype=np.int64)

    def __len__(self) -> int:
        return len(self.index)

    def gather(self, rows: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        spec = self.spec
        x = []
        y = []
        for event_idx, start in self.index[rows]:
            event = self.events[event_idx]
            offset = start + spec.feature_win - spec.intersect
            x.append(event.forces[start:start + spec.feature_win])
            y.append(event.kinematics[offset:offset + spec.target_win])
        return np.stack(x), np.stack(y)

    def batches(self, batch_size: int, rng: Optional[np.random.Generator] = None):
        """Yield (X, Y) batches; shuffled when `rng` is given. The last batch may be short."""
        order = rng.permutation(len(self)) if rng is not None else np.arange(len(self))
        for i in range(0, len(order), batch_size):
            yield self.gather(order[i:i + batch_size])


# Splitting

def split(dataset: Dataset, train_percent: float = 0.75, val_percent: float = 0.10,
          seed: int = 3407) -> Tuple[Dataset, Dataset, Dataset]:
    """
    Shuffle whole events with a seeded generator and cut floor(train*N),
    floor(val*N) and the remainder.
    """
    if train_percent < 0 or val_percent < 0 or train_percent + val_percent > 1.0 + 1e-12:
        raise ConfigError(f"invalid split fractions train={train_percent}, val={val_percent}")
    n = len(dataset)
    order = make_rng(seed).permutation(n)
    n_train = int(np.floor(train_percent * n + 1e-9))
    n_val = int(np.floor(val_percent * n + 1e-9))
    n_test = n - n_train - n_val
    if min(n_train, n_val, n_test) == 0:
        raise ConfigError(f"empty partition splitting {n} events: train={n_train}, val={n_val}, test={n_test}")
    parts = (order[:n_train], order[n_train:n_train + n_val], order[n_train + n_val:])
    logger.info(f"Split {n} events into {n_train} train / {n_val} val / {n_test} test")
    return tuple(dataset.subset(sorted(p)) for p in parts)


def split_ids(dataset: Dataset, train_percent: float, val_percent: float, seed: int) -> Dict[str, List[str]]:
    train, val, test = split(dataset, train_percent, val_percent, seed)
    return {name: [e.id for e in part] for name, part in (("train", train), ("val", val), ("test", test))}


# Alignment

@dataclass
class AlignConfig:
    smooth_window: int = 11
    force_onset_thresh: float = 0.05
    motion_onset_thresh: float = 0.05

    def __post_init__(self):
        if self.smooth_window < 1:
            raise ConfigError(f"smooth_window must be positive, got {self.smooth_window}")


def _as_columns(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=DTYPE)
    return x[:, None] if x.ndim == 1 else x


def find_onsets(forces: np.ndarray, motion: np.ndarray, cfg: AlignConfig) -> Tuple[int, int]:
    """
    Returns:
        (force onset, motion onset) sample indices.

    Raises:
        AlignmentError: when either series never crosses its threshold.
    """
    smooth_f = uniform_filter1d(_as_columns(forces), size=cfg.smooth_window, axis=0, mode="nearest")
    smooth_m = uniform_filter1d(_as_columns(motion), size=cfg.smooth_window, axis=0, mode="nearest")

    jumps = np.abs(np.diff(smooth_f, axis=0)).max(axis=1)
    force_hits = np.flatnonzero(jumps > cfg.force_onset_thresh)
    if force_hits.size == 0:
        raise AlignmentError("no force onset found")

    deviation = np.abs(smooth_m - smooth_m[0]).max(axis=1)
    motion_hits = np.flatnonzero(deviation > cfg.motion_onset_thresh)
    if motion_hits.size == 0:
        raise AlignmentError("no motion onset found")
    return int(force_hits[0]) + 1, int(motion_hits[0])


def align(forces: np.ndarray, kinematics: np.ndarray, cfg: Optional[AlignConfig] = None,
          event_id: str = "event", sample_rate: float = 5000.0) -> Event:
    """Shift the two series so their onsets coincide and trim to the common support."""
    cfg = cfg or AlignConfig()
    forces = _as_columns(forces)
    kinematics = _as_columns(kinematics)
    force_onset, motion_onset = find_onsets(forces, kinematics, cfg)
    lead = min(force_onset, motion_onset)
    f0 = force_onset - lead
    k0 = motion_onset - lead
    n = min(len(forces) - f0, len(kinematics) - k0)
    logger.info(f"Event {event_id}: motion onset lags force onset by {motion_onset - force_onset} samples")
    return Event(event_id, sample_rate, forces[f0:f0 + n], kinematics[k0:k0 + n])
