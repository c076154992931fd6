"""
Training: L1 loss, Adam, gradient clipping, early stopping and grid search.
"""
import itertools
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from .config import RunConfig, config_keys
from .data import (
    Dataset,
    Normalizer,
    WindowSet,
    fit_normalizer,
    normalize_dataset,
    split,
)
from .errors import ConfigError, DimensionError, NumericError
from .seq2seq import ModelConfig, build_model, predict
from .tensor_core import Module, Parameter, make_rng
from .utils import write_table

logger = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    batch_size: int = 512
    n_epochs: int = 30
    patience: int = 10
    patience_tolerance: float = 0.005
    learning_rate: float = 1e-3
    seed: int = 3407
    optimizer_name: str = "Adam"
    criterion_name: str = "L1Loss"
    betas: Tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    regularization_factor: float = 0.0
    grad_clip: float = 5.0

    def __post_init__(self):
        if self.optimizer_name != "Adam":
            raise ConfigError(f"optimizer_name '{self.optimizer_name}' is not supported (only Adam)")
        if self.criterion_name != "L1Loss":
            raise ConfigError(f"criterion_name '{self.criterion_name}' is not supported (only L1Loss)")

    @classmethod
    def from_run_config(cls, cfg: RunConfig) -> "TrainConfig":
        return cls(
            batch_size=cfg.batch_size,
            n_epochs=cfg.n_epochs,
            patience=cfg.patience,
            patience_tolerance=cfg.patience_tolerance,
            learning_rate=cfg.learning_rate,
            seed=cfg.seed,
            optimizer_name=cfg.optimizer_name,
            criterion_name=cfg.criterion_name,
            regularization_factor=cfg.regularization_factor,
            grad_clip=cfg.grad_clip,
        )


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    wall_time: float


@dataclass
class TrainReport:
    epochs: List[EpochRecord] = field(default_factory=list)
    best_epoch: int = 0
    best_val_loss: float = float("inf")
    stop_reason: str = "max_epochs"

    @property
    def train_losses(self) -> List[float]:
        return [e.train_loss for e in self.epochs]

    @property
    def val_losses(self) -> List[float]:
        return [e.val_loss for e in self.epochs]

    def to_frame(self) -> pd.DataFrame:
        frame = pd.DataFrame([vars(e) for e in self.epochs], columns=["epoch", "train_loss", "val_loss", "wall_time"])
        frame["best"] = frame["epoch"] == self.best_epoch
        return frame


def l1_loss(pred: np.ndarray, target: np.ndarray) -> Tuple[float, np.ndarray]:
    """
    Mean absolute error and its gradient w.r.t. `pred`.

    Examples:
        l1_loss([1, 2], [0, 0]) -> (1.5, [0.5, 0.5])
    """
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise DimensionError(f"prediction shape {pred.shape} != target shape {target.shape}")
    diff = pred - target
    return float(np.mean(np.abs(diff))), np.sign(diff) / diff.size


def l1_penalty(params: Sequence[Parameter], factor: float) -> float:
    """Add factor * sum|p| to the loss; its subgradient is accumulated into each p.grad."""
    if factor <= 0:
        return 0.0
    total = 0.0
    for p in params:
        total += float(np.abs(p.value).sum())
        p.grad += factor * np.sign(p.value)
    return factor * total


def adam_step(value: np.ndarray, grad: np.ndarray, m: np.ndarray, v: np.ndarray, lr: float, t: int,
              betas: Tuple[float, float] = (0.9, 0.999), eps: float = 1e-8) -> None:
    """One in-place Adam update of `value` with bias-corrected moments `m`, `v` at step t >= 1."""
    beta1, beta2 = betas
    m *= beta1
    m += (1.0 - beta1) * grad
    v *= beta2
    v += (1.0 - beta2) * grad * grad
    m_hat = m / (1.0 - beta1 ** t)
    v_hat = v / (1.0 - beta2 ** t)
    value -= lr * m_hat / (np.sqrt(v_hat) + eps)


class Adam:
    def __init__(self, params: Sequence[Parameter], lr: float = 1e-3,
                 betas: Tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.value) for p in self.params]
        self.v = [np.zeros_like(p.value) for p in self.params]

    def step(self) -> None:
        self.t += 1
        for p, m, v in zip(self.params, self.m, self.v):
            adam_step(p.value, p.grad, m, v, self.lr, self.t, self.betas, self.eps)

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()


def clip_grad_norm(params: Sequence[Parameter], max_norm: float) -> float:
    """Scale gradients so their global L2 norm is at most `max_norm`; returns the norm before clipping."""
    total = float(np.sqrt(sum(float(np.sum(p.grad ** 2)) for p in params)))
    if max_norm > 0 and total > max_norm:
        scale = max_norm / (total + 1e-12)
        for p in params:
            p.grad *= scale
    return total


class EarlyStopping:
    """
    Stop when the validation loss has not dropped more than `tolerance` below
    the last accepted value for `patience` consecutive epochs. The best
    parameters seen so far are kept separately.
    """

    def __init__(self, patience: int = 10, tolerance: float = 0.005):
        self.patience = patience
        self.tolerance = tolerance
        self.counter = 0
        self.anchor = float("inf")
        self.best_loss = float("inf")
        self.best_epoch = 0
        self.best_state: Optional[Dict[str, np.ndarray]] = None
        self.early_stop = False

    def __call__(self, val_loss: float, epoch: int, model: Module) -> bool:
        if val_loss < self.best_loss:
            self.best_loss = val_loss
            self.best_epoch = epoch
            self.best_state = model.state_dict()
        if self.anchor - val_loss > self.tolerance:
            self.anchor = val_loss
            self.counter = 0
        else:
            self.counter += 1
            logger.info(f"Early stopping counter: {self.counter} of {self.patience}")
            if self.counter >= self.patience:
                self.early_stop = True
        return self.early_stop


def evaluate_loss(model: Module, windows: WindowSet, batch_size: int) -> float:
    """Mean L1 over all windows of `windows` in eval mode."""
    total = 0.0
    count = 0
    for x, y in windows.batches(batch_size):
        pred = predict(model, x, batch_size)
        total += float(np.abs(pred - y).sum())
        count += y.size
    if count == 0:
        raise ConfigError("validation split produced no windows")
    return total / count


def train(model: Module, train_windows: WindowSet, val_windows: WindowSet,
          cfg: TrainConfig) -> Tuple[Module, TrainReport]:
    """
    Fit `model` in place and restore the parameters with the best validation loss.

    Raises:
        NumericError: on a non-finite training loss.
        ConfigError: when either split has no windows.
    """
    if len(train_windows) == 0:
        raise ConfigError("training split produced no windows")
    params = model.parameters()
    optimizer = Adam(params, cfg.learning_rate, cfg.betas, cfg.eps)
    stopper = EarlyStopping(cfg.patience, cfg.patience_tolerance)
    report = TrainReport()
    n_windows = len(train_windows)
    logger.info(f"Training {type(model).__name__} ({model.num_parameters()} parameters) on {n_windows} windows")

    for epoch in range(1, cfg.n_epochs + 1):
        start = time.perf_counter()
        model.train()
        model.set_rng(make_rng((cfg.seed, epoch, 1)))
        total = 0.0
        for x, y in train_windows.batches(cfg.batch_size, make_rng((cfg.seed, epoch))):
            model.zero_grad()
            pred = model(x)
            loss, grad = l1_loss(pred, y)
            penalty = l1_penalty(params, cfg.regularization_factor)
            if not np.isfinite(loss + penalty):
                raise NumericError(f"non-finite training loss at epoch {epoch}", stage="train")
            model.backward(grad)
            if cfg.grad_clip:
                clip_grad_norm(params, cfg.grad_clip)
            optimizer.step()
            total += loss * len(x)
        train_loss = total / n_windows
        val_loss = evaluate_loss(model, val_windows, cfg.batch_size)
        if not np.isfinite(val_loss):
            raise NumericError(f"non-finite validation loss at epoch {epoch}", stage="train")
        elapsed = time.perf_counter() - start
        report.epochs.append(EpochRecord(epoch, train_loss, val_loss, elapsed))
        logger.info(f"Epoch {epoch}/{cfg.n_epochs} - train {train_loss:.5f} - val {val_loss:.5f} - {elapsed:.1f}s")
        if stopper(val_loss, epoch, model):
            report.stop_reason = "early_stop"
            logger.info(f"Early stopping at epoch {epoch}")
            break

    model.load_state_dict(stopper.best_state)
    model.eval()
    report.best_epoch = stopper.best_epoch
    report.best_val_loss = stopper.best_loss
    logger.info(f"Best epoch {report.best_epoch} with val loss {report.best_val_loss:.5f}")
    return model, report


@dataclass
class PreparedData:
    train: Dataset
    val: Dataset
    test: Dataset
    feature_normalizer: Normalizer
    target_normalizer: Normalizer
    train_windows: WindowSet
    val_windows: WindowSet


def prepare_data(dataset: Dataset, cfg: RunConfig) -> PreparedData:
    """Split by event, fit normalizers on the training events and index the windows."""
    train_set, val_set, test_set = split(dataset, cfg.train_percent, cfg.val_percent, cfg.seed)
    features = fit_normalizer([e.forces for e in train_set], cfg.features_norm_method, cfg.features_global_normalizer)
    targets = fit_normalizer([e.kinematics for e in train_set], cfg.targets_norm_method, cfg.targets_global_normalizer)
    spec = cfg.window_spec()
    train_windows = WindowSet(normalize_dataset(train_set, features, targets).events, spec)
    val_windows = WindowSet(normalize_dataset(val_set, features, targets).events, spec)
    return PreparedData(train_set, val_set, test_set, features, targets, train_windows, val_windows)


def run_experiment(cfg: RunConfig, dataset: Dataset,
                   prepared: Optional[PreparedData] = None) -> Tuple[Module, ModelConfig, TrainReport, PreparedData]:
    """Prepare data, build the configured model and train it."""
    prepared = prepared or prepare_data(dataset, cfg)
    model_cfg = cfg.model_config(dataset.n_forces, dataset.sample_rate)
    model = build_model(model_cfg, cfg.seed)
    model, report = train(model, prepared.train_windows, prepared.val_windows, TrainConfig.from_run_config(cfg))
    return model, model_cfg, report, prepared


@dataclass
class GridTrial:
    index: int
    overrides: Dict[str, Any]
    best_val_loss: float
    best_epoch: int
    wall_time: float
    n_params: int


def grid_search(space: Mapping[str, Sequence[Any]], dataset: Dataset, base: Optional[RunConfig] = None,
                budget: Optional[int] = None, ledger_path=None) -> List[GridTrial]:
    """
    Train every combination in the Cartesian product of `space` and rank by
    best validation loss.

    Args:
        space: Config key -> candidate values.
        dataset: Events to split and train on.
        base: Values for keys not in `space`.
        budget: If smaller than the grid, a seeded sample of this many points.
        ledger_path: CSV path for one row per trial.

    Returns:
        Trials sorted by best validation loss (ties keep grid order).
    """
    base = base or RunConfig()
    known = set(config_keys())
    for key in space:
        if key not in known:
            raise ConfigError(f"unknown grid key '{key}'")
    keys = list(space)
    grid = list(itertools.product(*(space[k] for k in keys)))
    if budget is not None and budget < len(grid):
        picks = np.sort(make_rng(base.seed).choice(len(grid), size=budget, replace=False))
        grid = [grid[i] for i in picks]
    logger.info(f"Grid search over {len(grid)} configurations of {keys}")

    trials = []
    rows = []
    for index, values in enumerate(grid):
        overrides = dict(zip(keys, values))
        cfg = base.updated(overrides)
        logger.info(f"=== Trial {index + 1}/{len(grid)}: {overrides} ===")
        start = time.perf_counter()
        model, _, report, _ = run_experiment(cfg, dataset)
        elapsed = time.perf_counter() - start
        trial = GridTrial(index, overrides, report.best_val_loss, report.best_epoch, elapsed, model.num_parameters())
        trials.append(trial)
        rows.append({**cfg.to_dict(), "best_val_loss": trial.best_val_loss, "best_epoch": trial.best_epoch,
                     "wall_time": elapsed, "n_params": trial.n_params})

    ranked = sorted(trials, key=lambda t: (t.best_val_loss, t.index))
    if ledger_path is not None:
        ledger = pd.DataFrame(rows)
        ledger["rank"] = 0
        for rank, trial in enumerate(ranked, start=1):
            ledger.loc[trial.index, "rank"] = rank
        for column in ledger.columns:
            if ledger[column].map(lambda v: isinstance(v, list)).any():
                ledger[column] = ledger[column].map(str)
        write_table(ledger, Path(ledger_path))
        logger.info(f"Grid ledger written to {ledger_path}")
    return ranked
