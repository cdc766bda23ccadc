"""
Training-efficiency benchmark: per-epoch wall time of SanMove against the
LSTM baseline on a fixed synthetic workload.
"""

from __future__ import annotations

from typing import Optional, Sequence

import numpy as np
import pandas as pd

from sanmove.src.baselines import LSTMBaseline
from sanmove.src.logger_download import logger
from sanmove.src.predictor import Recommender, SequenceExample, build_examples
from sanmove.src.synthetic import bench_workload
from sanmove.src.trainer import AdamOptimizer, TrainConfig, build_model, train_epoch

BENCH_COLUMNS = ["model", "seq_len", "epochs", "median_s", "ratio_vs_lstm", "workers", "sessions"]
MODELS = ("sanmove", "lstm")


def time_epochs(
    model: Recommender,
    examples: Sequence[SequenceExample],
    config: TrainConfig,
    epochs: int = 5,
) -> list[float]:
    """Wall time of `epochs` training epochs after one untimed warm-up epoch."""
    pad_tables = model.pad_tables() if hasattr(model, "pad_tables") else ()
    optimizer = AdamOptimizer(model.parameters(), config.lr, config.weight_decay, pad_tables)
    train_epoch(model, examples, optimizer, config, epoch=0)
    return [train_epoch(model, examples, optimizer, config, epoch=e).wall_time_s for e in range(1, epochs + 1)]


def bench_epoch_time(
    models: Sequence[str] = MODELS,
    seq_len: int = 128,
    n_sessions: int = 2000,
    workers: int = 4,
    epochs: int = 5,
    config: Optional[TrainConfig] = None,
) -> pd.DataFrame:
    """
    Median per-epoch training time of each model.

    `ratio_vs_lstm` divides each median by the LSTM median (NaN when the LSTM
    is not among `models`).
    """
    unknown = set(models) - set(MODELS)
    if unknown:
        raise ValueError(f"unknown benchmark models: {sorted(unknown)}")
    config = (config or TrainConfig.from_preset("bench")).model_copy(update={"workers": workers})
    dataset = bench_workload(n_sessions, seq_len, seed=config.seed)
    examples = build_examples(dataset, "train")

    medians = {}
    for name in models:
        if name == "sanmove":
            model = build_model(dataset, config)
        else:
            rng = np.random.default_rng(config.seed)
            model = LSTMBaseline.initialize(dataset.vocab.n_locations, config.d, rng, config.init_std)
        times = time_epochs(model, examples, config, epochs)
        medians[name] = float(np.median(times))
        logger.info(f"[Bench] {name}: median epoch {medians[name]:.3f} s over {epochs} epochs")

    lstm = medians.get("lstm")
    rows = [
        {
            "model": name,
            "seq_len": seq_len,
            "epochs": epochs,
            "median_s": median,
            "ratio_vs_lstm": median / lstm if lstm else float("nan"),
            "workers": workers,
            "sessions": len(examples),
        }
        for name, median in medians.items()
    ]
    return pd.DataFrame(rows, columns=BENCH_COLUMNS)
