import argparse
import os
import sys
from typing import Optional, Sequence

import pandas as pd
from dotenv import find_dotenv, load_dotenv
from pydantic import ValidationError

from sanmove.src.baselines import MarkovModel
from sanmove.src.bench import MODELS, bench_epoch_time
from sanmove.src.checkpoint import load_checkpoint, save_checkpoint
from sanmove.src.data_pipeline import (
    PreprocessConfig,
    dataset_stats,
    parse_checkins,
    prepared_stats,
    preprocess,
)
from sanmove.src.dataset_store import read_dataset, write_dataset, write_rejects, write_stats
from sanmove.src.errors import CheckpointError, ConfigError, DataError
from sanmove.src.logger_download import logger
from sanmove.src.metrics import evaluate
from sanmove.src.predictor import SanMoveModel, build_examples
from sanmove.src.stnova import StnovaMode
from sanmove.src.trainer import TrainConfig, Trainer, build_model, load_config
from sanmove.src.utils import env_workers, get_reply_text

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2


class UsageError(Exception):
    pass


class ArgumentParser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def config_sidecar(checkpoint: str) -> str:
    return f"{checkpoint}.cfg.yml"


def run_preprocess(args) -> int:
    config = PreprocessConfig(
        gap_hours=args.gap_hours,
        merge_minutes=args.merge_minutes,
        min_user_records=args.min_user_records,
        min_session_records=args.min_session_records,
        min_user_sessions=args.min_user_sessions,
        train_ratio=args.train_ratio,
        workers=args.workers,
    )
    rejects = []
    with open(args.input, "rb") as f:
        records = parse_checkins(f, args.format, rejects)
    dataset = preprocess(records, config)
    write_dataset(dataset, args.output)
    stats = pd.concat(
        [dataset_stats(records).to_frame("raw"), prepared_stats(dataset).to_frame("processed")],
        ignore_index=True,
    )
    write_stats(stats, args.output)
    write_rejects(rejects, args.output)
    print(get_reply_text("done", what=f"dataset written to {args.output}"))
    return EXIT_OK


def train_config(args) -> TrainConfig:
    config = load_config(args.config) if args.config else TrainConfig.from_preset(args.preset)
    overrides = {}
    if args.mode:
        overrides["mode"] = StnovaMode(args.mode)
    if args.epochs:
        overrides["epochs"] = args.epochs
    if args.seed is not None:
        overrides["seed"] = args.seed
    overrides["workers"] = args.workers
    return TrainConfig(**{**config.model_dump(), **overrides})


def run_train(args) -> int:
    config = train_config(args)
    dataset = read_dataset(args.data)
    examples = build_examples(dataset, "train")
    model = build_model(dataset, config)
    logger.info(
        f"[Trainer] {len(examples)} training examples, d={config.d}, mode={config.mode.value}"
    )
    Trainer(model, config).fit(examples)
    save_checkpoint(model.params, args.checkpoint)
    config.to_yaml(config_sidecar(args.checkpoint))
    print(get_reply_text("done", what=f"checkpoint saved to {args.checkpoint}"))
    return EXIT_OK


def run_eval(args) -> int:
    dataset = read_dataset(args.data)
    sidecar = config_sidecar(args.checkpoint)
    if not os.path.exists(sidecar):
        raise ConfigError(f"missing model config {sidecar} next to the checkpoint")
    config = TrainConfig.from_yaml(sidecar)
    params = load_checkpoint(args.checkpoint)
    if params.tables.location.shape[0] != dataset.vocab.n_locations + 1:
        raise DataError(
            f"checkpoint has {params.tables.location.shape[0] - 1} locations, "
            f"dataset has {dataset.vocab.n_locations}"
        )
    if params.tables.user.shape[0] != dataset.vocab.n_users:
        raise DataError(
            f"checkpoint has {params.tables.user.shape[0]} users, dataset has {dataset.vocab.n_users}"
        )
    model = SanMoveModel.from_config(config, params, dataset.slot_table)
    examples = build_examples(dataset, "test")
    frames = [evaluate(model, examples, workers=args.workers).to_frame("sanmove", config.mode.value)]
    if args.baselines:
        markov = MarkovModel.from_dataset(dataset)
        frames.append(evaluate(markov, examples).to_frame("markov", "-"))
    pd.concat(frames, ignore_index=True).to_csv(args.out, index=False)
    print(get_reply_text("done", what=f"metrics written to {args.out}"))
    return EXIT_OK


def run_bench(args) -> int:
    report = bench_epoch_time(
        models=args.models,
        seq_len=args.seq_len,
        n_sessions=args.sessions,
        workers=args.workers,
        epochs=args.epochs,
    )
    report.to_csv(args.out, index=False)
    print(report.to_string(index=False))
    return EXIT_OK


def run_stats(args) -> int:
    with open(args.input, "rb") as f:
        records = parse_checkins(f, args.format)
    print(dataset_stats(records).to_text(), end="")
    return EXIT_OK


def build_parser() -> ArgumentParser:
    workers = env_workers()
    parser = ArgumentParser(prog="sanmove", description=get_reply_text("description"))
    commands = parser.add_subparsers(dest="command", parser_class=ArgumentParser)

    p = commands.add_parser("preprocess", help=get_reply_text("preprocess_help"))
    p.add_argument("--input", required=True)
    p.add_argument("--output", required=True)
    p.add_argument("--format", default="foursquare")
    p.add_argument("--gap-hours", type=float, default=72.0)
    p.add_argument("--merge-minutes", type=float, default=10.0)
    p.add_argument("--min-user-records", type=int, default=10)
    p.add_argument("--min-session-records", type=int, default=5)
    p.add_argument("--min-user-sessions", type=int, default=5)
    p.add_argument("--train-ratio", type=float, default=0.8)
    p.add_argument("--workers", type=int, default=workers)
    p.set_defaults(handler=run_preprocess)

    p = commands.add_parser("train", help=get_reply_text("train_help"))
    p.add_argument("--data", required=True)
    p.add_argument("--config")
    p.add_argument("--preset", default="desk")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--mode", choices=[m.value for m in StnovaMode])
    p.add_argument("--epochs", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--workers", type=int, default=workers)
    p.set_defaults(handler=run_train)

    p = commands.add_parser("eval", help=get_reply_text("eval_help"))
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--baselines", action="store_true")
    p.add_argument("--workers", type=int, default=workers)
    p.set_defaults(handler=run_eval)

    p = commands.add_parser("bench", help=get_reply_text("bench_help"))
    p.add_argument("--seq-len", type=int, default=128)
    p.add_argument("--sessions", type=int, default=2000)
    p.add_argument("--workers", type=int, default=max(workers, 4))
    p.add_argument("--epochs", type=int, default=5)
    p.add_argument("--models", nargs="+", choices=MODELS, default=list(MODELS))
    p.add_argument("--out", required=True)
    p.set_defaults(handler=run_bench)

    p = commands.add_parser("stats", help=get_reply_text("stats_help"))
    p.add_argument("--input", required=True)
    p.add_argument("--format", default="foursquare")
    p.set_defaults(handler=run_stats)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    load_dotenv(find_dotenv())
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError("a command is required")
        return args.handler(args)
    except UsageError as e:
        print(get_reply_text("usage_error", error=e), file=sys.stderr)
        print(parser.format_usage(), end="", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, CheckpointError, ConfigError, ValidationError, OSError) as e:
        logger.error(f"[CLI] {type(e).__name__}: {e}")
        print(get_reply_text("data_error", error=e), file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
