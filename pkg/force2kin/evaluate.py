"""
Evaluation: per-event MAE, mean/median aggregation, paired Wilcoxon
signed-rank tests and inference latency benchmarks.
"""
import logging
import time
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence

import numpy as np
import pandas as pd
from scipy.stats import median_abs_deviation, norm, rankdata
from threadpoolctl import threadpool_limits

from .data import Dataset, Event, Normalizer, WindowSpec, make_windows
from .errors import ConfigError, DataError, DimensionError
from .seq2seq import ModelConfig, build_model, predict
from .tensor_core import Module, make_rng

logger = logging.getLogger(__name__)

EXACT_MAX_N = 12
AGGREGATES = ("mean", "median")


def event_mae(pred: np.ndarray, truth: np.ndarray) -> float:
    """Mean over time of the mean absolute error over the angle channels."""
    pred = np.asarray(pred, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if pred.shape != truth.shape:
        raise DimensionError(f"prediction shape {pred.shape} != truth shape {truth.shape}")
    return float(np.mean(np.abs(pred - truth)))


def aggregate(maes: Sequence[float], mode: str = "median") -> float:
    values = np.asarray(maes, dtype=np.float64)
    if values.size == 0:
        raise DataError("cannot aggregate an empty list of event errors")
    if mode == "mean":
        return float(values.mean())
    if mode == "median":
        return float(np.median(values))
    raise ConfigError(f"aggregate mode must be one of {AGGREGATES}, got '{mode}'")


@dataclass
class WilcoxonResult:
    statistic: float
    n: int
    p_greater: float
    p_less: float
    p_two_sided: float
    method: str
    degenerate: bool = False


def _exact_null(ranks: np.ndarray) -> np.ndarray:
    """
    Null distribution of 2*W+ over all 2^n equally likely sign assignments.

    Returns:
        counts[s] = number of assignments with 2*W+ == s
    """
    doubled = np.rint(2 * ranks).astype(np.int64)
    counts = np.zeros(int(doubled.sum()) + 1)
    counts[0] = 1.0
    for r in doubled:
        counts[r:] = counts[r:] + counts[:-r]
    return counts


def wilcoxon_signed_rank(a: Sequence[float], b: Sequence[float], exact: Optional[bool] = None) -> WilcoxonResult:
    """
    Paired Wilcoxon signed-rank test of d = a - b.

    Zero differences are dropped and tied |d| get midranks. The statistic is
    W+ (sum of ranks of positive differences). p_greater tests a > b. With
    n <= 12 nonzero pairs the p-values come from the exact null distribution
    over all 2^n sign assignments; above that (or with exact=False) from the normal
    approximation with tie and continuity corrections.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise DimensionError(f"paired samples must be equal-length 1-D, got {a.shape} and {b.shape}")
    d = a - b
    d = d[d != 0]
    n = len(d)
    if n == 0:
        return WilcoxonResult(0.0, 0, 1.0, 1.0, 1.0, "degenerate", degenerate=True)

    ranks = rankdata(np.abs(d))
    w_plus = float(ranks[d > 0].sum())
    use_exact = n <= EXACT_MAX_N if exact is None else exact

    if use_exact:
        counts = _exact_null(ranks)
        observed = int(round(2 * w_plus))
        total = counts.sum()
        p_greater = float(counts[observed:].sum() / total)
        p_less = float(counts[:observed + 1].sum() / total)
        method = "exact"
    else:
        mean = n * (n + 1) / 4.0
        _, counts = np.unique(ranks, return_counts=True)
        var = n * (n + 1) * (2 * n + 1) / 24.0 - np.sum(counts ** 3 - counts) / 48.0
        if var <= 0:
            return WilcoxonResult(w_plus, n, 1.0, 1.0, 1.0, "degenerate", degenerate=True)
        sd = np.sqrt(var)
        p_greater = float(norm.sf((w_plus - mean - 0.5) / sd))
        p_less = float(norm.cdf((w_plus - mean + 0.5) / sd))
        method = "normal"
    p_two = min(1.0, 2.0 * min(p_greater, p_less))
    return WilcoxonResult(w_plus, n, p_greater, p_less, p_two, method)


@dataclass
class EvalReport:
    event_ids: List[str]
    maes: np.ndarray
    per_angle: np.ndarray
    angle_names: List[str] = field(default_factory=lambda: ["phi", "theta", "psi"])

    @property
    def mean(self) -> float:
        return aggregate(self.maes, "mean")

    @property
    def median(self) -> float:
        return aggregate(self.maes, "median")

    def to_frame(self) -> pd.DataFrame:
        frame = pd.DataFrame({"event_id": self.event_ids, "mae": self.maes})
        for j, name in enumerate(self.angle_names):
            frame[f"mae_{name}"] = self.per_angle[:, j]
        return frame


def predict_event(model: Module, forces: np.ndarray, kinematics: np.ndarray, spec: WindowSpec,
                  features: Normalizer, targets: Normalizer, batch_size: int = 512):
    """
    Predict every window of one event in target units.

    Returns:
        (predictions [N, target_win, M_K], truth [N, target_win, M_K])
    """
    f_norm = features.resolve(forces)
    t_norm = targets.resolve(kinematics)
    event = Event("_", 1.0, f_norm.apply(forces), kinematics)
    windows = make_windows(event, spec)
    pred = predict(model, windows.features, batch_size)
    return t_norm.invert(pred), windows.targets


def evaluate_model(model: Module, dataset: Dataset, spec: WindowSpec, features: Normalizer,
                   targets: Normalizer, batch_size: int = 512) -> EvalReport:
    """Per-event MAE (in radians) of `model` on every event of `dataset` long enough to window."""
    ids = []
    maes = []
    per_angle = []
    for event in dataset:
        if len(event) < spec.span:
            logger.warning(f"Event {event.id}: too short for evaluation, skipped")
            continue
        pred, truth = predict_event(model, event.forces, event.kinematics, spec, features, targets, batch_size)
        pred = pred.reshape(-1, pred.shape[-1])
        truth = truth.reshape(-1, truth.shape[-1])
        ids.append(event.id)
        maes.append(event_mae(pred, truth))
        per_angle.append(np.mean(np.abs(pred - truth), axis=0))
    if not ids:
        raise DataError("no event is long enough to evaluate")
    report = EvalReport(ids, np.array(maes), np.array(per_angle), list(dataset.kinematic_channels))
    logger.info(f"Evaluated {len(ids)} events: mean MAE {report.mean:.4f} rad, median MAE {report.median:.4f} rad")
    return report


@dataclass
class LatencyStats:
    median_ms: float
    mad_ms: float
    samples_ms: np.ndarray


def bench_latency(model: Module, reps: int = 100, warmup: int = 20, seed: int = 0) -> LatencyStats:
    """
    Wall-clock time of single-window eval-mode forward passes.

    BLAS is held to one thread for the whole measurement. Warmup calls are
    excluded; the median and median absolute deviation are taken over `reps`
    timed calls.
    """
    if reps < 1:
        raise ConfigError(f"bench_reps must be >= 1, got {reps}")
    cfg = model.cfg
    window = make_rng(seed).standard_normal((1, cfg.feature_win, cfg.input_size))
    model.eval()
    samples = np.empty(reps)
    with threadpool_limits(limits=1):
        for _ in range(warmup):
            model(window)
        for i in range(reps):
            start = time.perf_counter()
            model(window)
            samples[i] = (time.perf_counter() - start) * 1e3
    return LatencyStats(float(np.median(samples)), float(median_abs_deviation(samples)), samples)


def param_sweep(configs: Sequence[ModelConfig], reps: int = 100, warmup: int = 20, seed: int = 0,
                score: Optional[Callable[[ModelConfig], float]] = None) -> pd.DataFrame:
    """
    Parameter count and latency for each config; with `score`, also the best
    validation loss it returns for that config.
    """
    rows = []
    for cfg in configs:
        model = build_model(cfg, seed)
        stats = bench_latency(model, reps, warmup, seed)
        row = {
            "enc_hidden_size": cfg.enc_hidden_size,
            "dec_hidden_size": cfg.dec_hidden_size,
            "n_params": model.num_parameters(),
            "median_ms": stats.median_ms,
            "mad_ms": stats.mad_ms,
        }
        if score is not None:
            row["best_val_loss"] = score(cfg)
            logger.info(f"{row['n_params']} parameters: best val loss {row['best_val_loss']:.5f}")
        logger.info(f"{row['n_params']} parameters: {stats.median_ms:.3f} ms (MAD {stats.mad_ms:.3f})")
        rows.append(row)
    return pd.DataFrame(rows)
