"""
End-to-end runs of the force2kin pipeline.

These train real models and take minutes; they carry the `slow` marker so a
quick run can deselect them with `pytest -m "not slow"`. The open-source
dataset check runs only when FORCE2KIN_OPEN_SOURCE_DIR points at a converted
dataset directory.
"""
import os
import sys

import numpy as np
import pytest

# Add the parent directory to path for imports
sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

from force2kin.config import load_run_config
from force2kin.data import load_events
from force2kin.evaluate import evaluate_model, param_sweep
from force2kin.seq2seq import count_params
from force2kin.synth import generate_dataset
from force2kin.train import run_experiment

pytestmark = pytest.mark.slow


def median_mae(cfg, dataset):
    """Train with `cfg` and return the median per-event MAE on the test split."""
    model, _, report, prepared = run_experiment(cfg, dataset)
    result = evaluate_model(model, prepared.test, cfg.window_spec(), prepared.feature_normalizer,
                            prepared.target_normalizer)
    print(f"   {cfg.model_class_name} use_asl={cfg.model_args_use_asl} seed={cfg.seed}: "
          f"best epoch {report.best_epoch}, test median MAE {result.median:.4f} rad")
    return result.median


@pytest.fixture(scope="module")
def synthetic():
    cfg = load_run_config(preset="synthetic")
    return cfg, generate_dataset(cfg.synth_n_events, cfg.synth_ranges(), seed=cfg.seed)


def test_asl_model_beats_linear_baseline(synthetic):
    print("=== End-to-End Synthetic Inverse Mapping ===")
    cfg, dataset = synthetic

    print("\n1. Training Seq2Seq+ASL...")
    asl = median_mae(cfg, dataset)

    print("\n2. Training the Linear baseline...")
    linear = median_mae(cfg.updated({"model_class_name": "Linear"}), dataset)

    print(f"\n3. Seq2Seq+ASL {asl:.4f} rad vs Linear {linear:.4f} rad")
    assert asl <= 0.5 * linear
    assert asl <= 0.35


def test_asl_ablation_direction(synthetic):
    print("=== ASL Ablation over 5 Seeds ===")
    cfg, dataset = synthetic
    with_asl = []
    without_asl = []
    for seed in range(5):
        seeded = cfg.updated({"seed": seed})
        with_asl.append(median_mae(seeded, dataset))
        without_asl.append(median_mae(seeded.updated({"model_args_use_asl": False}), dataset))

    on = float(np.median(with_asl))
    off = float(np.median(without_asl))
    print(f"\nMedian over seeds: with ASL {on:.4f} rad, without {off:.4f} rad "
          f"({100 * (off - on) / off:.1f}% improvement)")
    assert on <= 1.02 * off


def test_latency_grows_slowly_with_width():
    print("=== Inference Latency vs Parameter Count ===")
    cfg = load_run_config(preset="measured")

    def model_config(hidden):
        widened = cfg.updated({"model_args_enc_hidden_size": hidden})
        return widened.model_config(4, 5000.0)

    sizes = list(range(8, 400, 8))
    counts = np.array([count_params(model_config(h)) for h in sizes])
    small = sizes[int(np.argmin(np.abs(counts - 5e4)))]
    large = sizes[int(np.argmin(np.abs(counts - 4e5)))]

    table = param_sweep([model_config(small), model_config(large)], reps=50, warmup=10)
    print(table.to_string(index=False))
    assert table["n_params"][0] < table["n_params"][1]
    assert table["median_ms"][1] <= 2.0 * table["median_ms"][0]


def test_open_source_dataset():
    data_dir = os.environ.get("FORCE2KIN_OPEN_SOURCE_DIR")
    if not data_dir or not os.path.isdir(data_dir):
        pytest.skip("FORCE2KIN_OPEN_SOURCE_DIR is not set to a dataset directory")

    print("=== Open-Source Dataset Reproduction ===")
    cfg = load_run_config(preset="open_source")
    dataset = load_events(data_dir)
    assert dataset.n_forces == 5
    assert median_mae(cfg, dataset) <= 0.20


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-v", "-s"]))
