import argparse
import logging
import sys
from pathlib import Path
from typing import Any, Dict, List, Optional

import numpy as np
import pandas as pd
import yaml

from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .config import RunConfig, dump_run_config, load_run_config
from .data import WindowSpec, load_events, split, write_events
from .errors import ConfigError, DataError, Force2KinError
from .evaluate import EvalReport, aggregate, bench_latency, evaluate_model, param_sweep, wilcoxon_signed_rank
from .seq2seq import predict
from .synth import generate_dataset
from .train import run_experiment
from .utils import pipeline_stage, setup_logging, write_table

logger = logging.getLogger(__name__)


def parse_overrides(tokens: List[str]) -> Dict[str, Any]:
    """
    Turn leftover `--key value` / `--key=value` tokens into config overrides.

    Values are parsed as YAML scalars; dashes in keys become underscores.
    """
    overrides = {}
    i = 0
    while i < len(tokens):
        token = tokens[i]
        if not token.startswith("--") or len(token) == 2:
            raise ConfigError(f"unexpected argument '{token}'")
        key = token[2:]
        if "=" in key:
            key, raw = key.split("=", 1)
            i += 1
        else:
            if i + 1 >= len(tokens):
                raise ConfigError(f"missing value for --{key}")
            raw = tokens[i + 1]
            i += 2
        try:
            overrides[key.replace("-", "_")] = yaml.safe_load(raw)
        except yaml.YAMLError as e:
            raise ConfigError(f"cannot parse value for --{key}: {e}") from e
    return overrides


def cmd_synth(cfg: RunConfig, out_dir: Optional[str] = None) -> Path:
    """Generate a synthetic dataset directory."""
    target = Path(out_dir or cfg.data_dir)
    logger.info(f"=== Step 1: Generating {cfg.synth_n_events} synthetic events ===")
    with pipeline_stage("synth"):
        dataset = generate_dataset(cfg.synth_n_events, cfg.synth_ranges(), seed=cfg.seed)
    logger.info(f"=== Step 2: Writing events to {target} ===")
    with pipeline_stage("write"):
        write_events(dataset, target)
    logger.info("=== Done! ===")
    return target


def cmd_train(cfg: RunConfig, data_dir: Optional[str] = None, out_dir: Optional[str] = None) -> Path:
    """Train on a dataset directory; writes model.ckpt, train_report.csv, run_config.yaml and splits.yaml."""
    data_path = Path(data_dir or cfg.data_dir)
    out = Path(out_dir or cfg.out_dir)
    if not data_path.is_dir():
        raise ConfigError(f"dataset directory not found: {data_path}", stage="load")

    logger.info(f"=== Step 1: Loading events from {data_path} ===")
    with pipeline_stage("load"):
        dataset = load_events(data_path)

    logger.info("=== Step 2: Splitting, normalizing and training ===")
    with pipeline_stage("train"):
        model, model_cfg, report, prepared = run_experiment(cfg, dataset)

    logger.info(f"=== Step 3: Saving artifacts to {out} ===")
    with pipeline_stage("save"):
        checkpoint = Checkpoint(
            model_config=model_cfg,
            feature_normalizer=prepared.feature_normalizer,
            target_normalizer=prepared.target_normalizer,
            run_config=cfg.to_dict(),
            force_channels=list(dataset.force_channels),
            kinematic_channels=list(dataset.kinematic_channels),
        )
        ckpt_path = save_checkpoint(out / "model.ckpt", model, checkpoint)
        write_table(report.to_frame(), out / "train_report.csv")
        dump_run_config(cfg, out / "run_config.yaml")
        splits = {name: [e.id for e in part] for name, part in
                  (("train", prepared.train), ("val", prepared.val), ("test", prepared.test))}
        with open(out / "splits.yaml", "w", encoding="utf-8") as f:
            yaml.safe_dump(splits, f)

    logger.info("=== Done! ===")
    logger.info(f"Checkpoint: {ckpt_path}")
    logger.info(f"Best val loss {report.best_val_loss:.5f} at epoch {report.best_epoch} ({report.stop_reason})")
    return ckpt_path


def _evaluate_checkpoint(ckpt_path: str, dataset, test_only: bool) -> EvalReport:
    model, checkpoint = load_checkpoint(ckpt_path)
    cfg = checkpoint.model_config
    if dataset.n_forces != cfg.input_size:
        raise DataError(
            f"checkpoint expects {cfg.input_size} force channels, dataset has {dataset.n_forces}"
        )
    run = RunConfig.from_mapping(checkpoint.run_config) if checkpoint.run_config else None
    if test_only:
        if run is None:
            raise ConfigError(f"{ckpt_path}: checkpoint carries no split settings")
        _, _, dataset = split(dataset, run.train_percent, run.val_percent, run.seed)
    spec = run.window_spec() if run is not None else WindowSpec(cfg.feature_win, cfg.target_win)
    return evaluate_model(model, dataset, spec, checkpoint.feature_normalizer, checkpoint.target_normalizer)


def cmd_eval(ckpt_path: str, data_dir: str, mode: str = "median", compare: Optional[str] = None,
             test_only: bool = False, out_path: Optional[str] = None) -> Dict[str, Any]:
    """
    Per-event MAE table for a checkpoint, aggregated by `mode`; with `compare`,
    a paired Wilcoxon test against a second checkpoint on the same events.
    """
    logger.info(f"=== Step 1: Loading events from {data_dir} ===")
    with pipeline_stage("load"):
        if not Path(data_dir).is_dir():
            raise ConfigError(f"dataset directory not found: {data_dir}")
        dataset = load_events(data_dir)

    logger.info(f"=== Step 2: Evaluating {ckpt_path} ===")
    with pipeline_stage("eval"):
        report = _evaluate_checkpoint(ckpt_path, dataset, test_only)
    summary: Dict[str, Any] = {
        "checkpoint": str(ckpt_path),
        "events": len(report.event_ids),
        "mean_mae": report.mean,
        "median_mae": report.median,
        "aggregate": mode,
        "value": aggregate(report.maes, mode),
    }

    if compare:
        logger.info(f"=== Step 3: Comparing against {compare} ===")
        with pipeline_stage("compare"):
            other = _evaluate_checkpoint(compare, dataset, test_only)
            if other.event_ids != report.event_ids:
                raise DataError("compared checkpoints were evaluated on different events")
            result = wilcoxon_signed_rank(report.maes, other.maes)
        summary["compare"] = {
            "checkpoint": str(compare),
            "median_mae": other.median,
            "mean_mae": other.mean,
            "wins": int(np.sum(report.maes < other.maes)),
            "statistic": result.statistic,
            "p_less": result.p_less,
            "p_greater": result.p_greater,
            "p_two_sided": result.p_two_sided,
            "method": result.method,
            "degenerate": result.degenerate,
        }
        logger.info(f"Wilcoxon signed-rank: W+={result.statistic}, p(less)={result.p_less:.4g}, "
                    f"p(two-sided)={result.p_two_sided:.4g}")

    out = Path(out_path) if out_path else Path(ckpt_path).with_name("eval_report.csv")
    with pipeline_stage("save"):
        write_table(report.to_frame(), out)
        with open(out.with_suffix(".yaml"), "w", encoding="utf-8") as f:
            yaml.safe_dump(summary, f, sort_keys=False)
    logger.info(f"{mode.capitalize()} MAE over {len(report.event_ids)} events: {summary['value']:.4f} rad")
    logger.info(f"Report: {out}")
    return summary


def cmd_infer(ckpt_path: str, window_path: str, out_path: Optional[str] = None) -> np.ndarray:
    """
    Predict angles (radians) for one force window CSV.

    The CSV holds `feature_win` rows; force columns are matched by the
    checkpoint's channel names, otherwise every non-`t` column is used in order.
    """
    with pipeline_stage("load"):
        model, checkpoint = load_checkpoint(ckpt_path)
        cfg = checkpoint.model_config
        try:
            frame = pd.read_csv(window_path, float_precision="round_trip")
        except (OSError, pd.errors.ParserError, pd.errors.EmptyDataError) as e:
            raise DataError(f"{window_path}: cannot read force window ({e})") from e
        columns = [c for c in checkpoint.force_channels if c in frame.columns]
        if len(columns) != cfg.input_size:
            columns = [c for c in frame.columns if c != "t"]
        if len(columns) != cfg.input_size:
            raise DataError(f"{window_path}: expected {cfg.input_size} force columns, found {len(columns)}")
        window = frame[columns].to_numpy(dtype=np.float64)
        if len(window) != cfg.feature_win:
            raise DataError(f"{window_path}: window has {len(window)} samples, expected feature_win={cfg.feature_win}")
        if not np.all(np.isfinite(window)):
            raise DataError(f"{window_path}: non-finite force values")

    with pipeline_stage("infer"):
        features = checkpoint.feature_normalizer.resolve(window)
        pred = predict(model, features.apply(window)[None, :, :])[0]
        if not checkpoint.target_normalizer.fitted:
            raise ConfigError("per-event target normalization cannot be inverted at inference time")
        angles = checkpoint.target_normalizer.invert(pred)

    frame = pd.DataFrame(angles, columns=checkpoint.kinematic_channels)
    frame.insert(0, "step", np.arange(len(angles)))
    out = Path(out_path) if out_path else Path(window_path).with_name(Path(window_path).stem + "_angles.csv")
    write_table(frame, out)
    logger.info(f"Predicted angles written to {out}")
    return angles


def cmd_bench(cfg: RunConfig, ckpt_path: Optional[str] = None, sweep: Optional[List[int]] = None,
              out_path: Optional[str] = None, data_dir: Optional[str] = None) -> pd.DataFrame:
    """
    Latency of a checkpoint, or a sweep over encoder hidden sizes.

    With `data_dir`, each swept width is also trained on that dataset and its
    best validation loss is added to the table.
    """
    with pipeline_stage("bench"):
        if ckpt_path:
            model, checkpoint = load_checkpoint(ckpt_path)
            stats = bench_latency(model, cfg.bench_reps, cfg.bench_warmup, cfg.seed)
            table = pd.DataFrame([{
                "n_params": model.num_parameters(),
                "median_ms": stats.median_ms,
                "mad_ms": stats.mad_ms,
            }])
        else:
            sizes = sweep or cfg.bench_hidden_sizes
            runs = {h: cfg.updated({"model_args_enc_hidden_size": h}) for h in sizes}
            score = None
            if data_dir:
                if not Path(data_dir).is_dir():
                    raise ConfigError(f"dataset directory not found: {data_dir}")
                dataset = load_events(data_dir)
                channels, sample_rate = dataset.n_forces, dataset.sample_rate

                def score(model_cfg):
                    logger.info(f"Training enc_hidden_size={model_cfg.enc_hidden_size}")
                    return run_experiment(runs[model_cfg.enc_hidden_size], dataset)[2].best_val_loss
            else:
                channels = cfg.model_args_input_dim[2] if cfg.model_args_input_dim else 4
                sample_rate = cfg.model_args_sample_rate or 5000.0
            configs = [runs[h].model_config(channels, sample_rate) for h in sizes]
            logger.info(f"=== Sweeping {len(configs)} encoder widths ===")
            table = param_sweep(configs, cfg.bench_reps, cfg.bench_warmup, cfg.seed, score)
    out = Path(out_path or Path(cfg.out_dir) / "bench.csv")
    write_table(table, out)
    logger.info(f"Latency table written to {out}")
    return table


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(description="Force-to-kinematics inverse mapping for flapping wings")
    parser.add_argument("--verbose", "-v", action="store_true", help="Enable debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    def add_config_options(p):
        p.add_argument("--config", "-c", help="Config file (YAML, JSON or key=value lines)")
        p.add_argument("--preset", help="Built-in config: measured, open_source or synthetic")

    p = sub.add_parser("synth", help="Generate a synthetic dataset")
    add_config_options(p)
    p.add_argument("--out", "-o", help="Output dataset directory (default: data_dir)")

    p = sub.add_parser("train", help="Train a model on a dataset directory")
    add_config_options(p)
    p.add_argument("--data", "-d", help="Dataset directory (default: data_dir)")
    p.add_argument("--out", "-o", help="Run output directory (default: out_dir)")

    p = sub.add_parser("eval", help="Evaluate a checkpoint on a dataset directory")
    p.add_argument("checkpoint", help="Checkpoint file")
    p.add_argument("--data", "-d", required=True, help="Dataset directory")
    group = p.add_mutually_exclusive_group()
    group.add_argument("--median", dest="mode", action="store_const", const="median", help="Aggregate by median (default)")
    group.add_argument("--mean", dest="mode", action="store_const", const="mean", help="Aggregate by mean")
    p.add_argument("--compare", help="Second checkpoint for a paired Wilcoxon signed-rank test")
    p.add_argument("--test-only", action="store_true", help="Evaluate only the checkpoint's test split")
    p.add_argument("--out", "-o", help="Per-event report CSV (default: next to the checkpoint)")
    p.set_defaults(mode="median")

    p = sub.add_parser("infer", help="Predict angles for one force window")
    p.add_argument("checkpoint", help="Checkpoint file")
    p.add_argument("window", help="CSV with feature_win rows of force samples")
    p.add_argument("--out", "-o", help="Output CSV (default: <window>_angles.csv)")

    p = sub.add_parser("bench", help="Inference latency of a checkpoint or a width sweep")
    add_config_options(p)
    p.add_argument("--checkpoint", help="Checkpoint file (omit for a sweep)")
    p.add_argument("--sweep", help="Comma-separated encoder hidden sizes, e.g. 32,64,128")
    p.add_argument("--data", "-d", help="Dataset directory; trains each swept width and records its best val loss")
    p.add_argument("--out", "-o", help="Output CSV (default: out_dir/bench.csv)")
    return parser


def run(argv: Optional[List[str]] = None) -> int:
    """Run the CLI and return the process exit code."""
    parser = build_parser()
    args, extra = parser.parse_known_args(argv)
    setup_logging(args.verbose)

    try:
        if args.command in ("eval", "infer") and extra:
            raise ConfigError(f"unexpected arguments: {' '.join(extra)}")
        if args.command in ("synth", "train", "bench"):
            with pipeline_stage("config"):
                cfg = load_run_config(args.config, args.preset, parse_overrides(extra))

        if args.command == "synth":
            cmd_synth(cfg, args.out)
        elif args.command == "train":
            cmd_train(cfg, args.data, args.out)
        elif args.command == "eval":
            cmd_eval(args.checkpoint, args.data, args.mode, args.compare, args.test_only, args.out)
        elif args.command == "infer":
            cmd_infer(args.checkpoint, args.window, args.out)
        elif args.command == "bench":
            sweep = None
            if args.sweep:
                try:
                    sweep = [int(s) for s in args.sweep.split(",") if s.strip()]
                except ValueError:
                    raise ConfigError(f"--sweep expects comma-separated integers, got '{args.sweep}'") from None
            cmd_bench(cfg, args.checkpoint or cfg.checkpoint, sweep, args.out, args.data)
    except Force2KinError as e:
        tag = f"[{e.stage}] " if e.stage else ""
        logger.error(f"{tag}{e}")
        return e.exit_code
    return 0


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
