"""Command-line pipeline: synth -> ingest -> train (two phases) -> eval/predict.

Exit codes:
  0  success
  1  configuration or other errors
  2  synth output not writable
  3  ingest failed (malformed/empty CSV or too many out-of-range records)
  4  train --phase stsan without a usable Stream-T checkpoint
  5  checkpoint missing, unreadable, or config-hash mismatch (eval/predict)
  6  predict at an interval with insufficient history

Heavy imports happen after thread pinning: --threads (or STSAN_THREADS) is
applied to the BLAS/OpenMP environment before numpy loads, so --threads 1
yields bit-reproducible runs.
"""

from __future__ import annotations

import argparse
import os
import sys

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_IO = 2
EXIT_INGEST = 3
EXIT_MISSING_CKPT = 4
EXIT_CKPT_MISMATCH = 5
EXIT_NO_HISTORY = 6

_THREAD_VARS = ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS",
                "NUMEXPR_NUM_THREADS")


def _pin_threads(threads: int | None):
    if threads is None:
        env = os.environ.get("STSAN_THREADS")
        if env is None:
            return
        threads = int(env)
    for var in _THREAD_VARS:
        os.environ[var] = str(threads)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="stsan", description="gridded flow prediction pipeline")
    parser.add_argument("--threads", type=int, default=None,
                        help="worker thread cap (1 forces bit-reproducibility); "
                             "overrides STSAN_THREADS")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic trip CSV")
    p.add_argument("--config", required=True)
    p.add_argument("--seed", type=int, default=None, help="override config seed")
    p.add_argument("--days", type=int, default=None, help="override data.synth_days")
    p.add_argument("--out", default=None, help="trip CSV path (default paths.trips)")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("ingest", help="build the binary dataset cache from a trip CSV")
    p.add_argument("--config", required=True)
    p.add_argument("--trips", default=None)
    p.add_argument("--out", default=None, help="cache path (default paths.cache)")
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("train", help="run one training phase")
    p.add_argument("--config", required=True)
    p.add_argument("--phase", required=True, choices=("stream-t", "stsan"))
    p.add_argument("--from-checkpoint", default=None,
                   help="Stream-T checkpoint (required for --phase stsan unless "
                        "an ablation flag is set)")
    p.add_argument("--data", default=None, help="dataset cache (default paths.cache)")
    p.add_argument("--out", default=None, help="checkpoint output path")
    p.add_argument("--log", default=None, help="training-log CSV path")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint against the HA baseline")
    p.add_argument("--config", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", default=None)
    p.add_argument("--report", default=None,
                   help="report path prefix (writes .json, .txt, .csv)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("predict", help="predict the whole grid at one interval")
    p.add_argument("--config", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", default=None)
    p.add_argument("--at", type=int, required=True, help="target interval index")
    p.add_argument("--out", default=None, help="prediction CSV path")
    p.set_defaults(func=cmd_predict)
    return parser


def _load_config(path: str):
    from .config import RunConfig
    return RunConfig.from_json(path)


def _load_prepared(cfg, data_path):
    from .data import GriddedDataset, PreparedDataset
    from .errors import ConfigError
    dataset = GriddedDataset.load(data_path)
    if dataset.cfg != cfg.grid:
        raise ConfigError(
            f"dataset cache {data_path} was built with a different grid config")
    return PreparedDataset(dataset, cfg.data, cfg.seed)


def cmd_synth(args) -> int:
    from .data import write_trips_csv
    from .synthetic import generate_synthetic
    cfg = _load_config(args.config)
    days = cfg.data.synth_days if args.days is None else args.days
    seed = cfg.seed if args.seed is None else args.seed
    out = args.out or cfg.paths.trips

    if days < cfg.grid.history_days + 2:
        print(f"warning: {days} days < history_days + 2 "
              f"({cfg.grid.history_days + 2}); no training example will have "
              f"sufficient history", file=sys.stderr)
    if days * cfg.grid.intervals_per_day != cfg.grid.num_intervals:
        print(f"warning: {days} days covers {days * cfg.grid.intervals_per_day} "
              f"intervals but grid.num_intervals is {cfg.grid.num_intervals}",
              file=sys.stderr)

    trips = generate_synthetic(cfg.grid, seed, days, cfg.data.synth_intensity)
    try:
        n = write_trips_csv(out, trips)
    except OSError as exc:
        print(f"error: cannot write {out}: {exc}", file=sys.stderr)
        return EXIT_IO
    print(f"wrote {n} trip records to {out}")
    return EXIT_OK


def cmd_ingest(args) -> int:
    from .data import GriddedDataset, ingest_trips, read_trips_csv
    from .errors import IngestError
    cfg = _load_config(args.config)
    trips_path = args.trips or cfg.paths.trips
    out = args.out or cfg.paths.cache
    try:
        arr = read_trips_csv(trips_path)
        flow, trans, report = ingest_trips(arr, cfg.grid)
    except IngestError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INGEST
    GriddedDataset(cfg.grid, flow, trans).save(out)
    print(f"records={report.total} used={report.used} skipped={report.skipped}")
    print(f"flow_total={report.flow_total:.0f} transition_total={report.transition_total:.0f}")
    print(f"transition_pairs={report.transition_pairs} "
          f"excluded_by_threshold={report.excluded_by_threshold} "
          f"excluded_outside_aoi={report.excluded_outside_aoi}")
    print(f"cache={out}")
    return EXIT_OK


def cmd_train(args) -> int:
    import dataclasses

    from .errors import CheckpointError
    from .model import load_checkpoint
    from .training import train_stream_t, train_stsan
    cfg = _load_config(args.config)
    config_hash = cfg.config_hash()
    phase = args.phase.replace("-", "_")
    train_cfg = dataclasses.replace(cfg.train, phase=phase)
    prepared = _load_prepared(cfg, args.data or cfg.paths.cache)

    ckpt_dir = cfg.paths.checkpoint_dir
    os.makedirs(ckpt_dir, exist_ok=True)
    out = args.out or os.path.join(ckpt_dir, f"{phase}.stck")
    log = args.log or os.path.join(ckpt_dir, f"{phase}_log.csv")

    if phase == "stream_t":
        result = train_stream_t(prepared, cfg.grid, cfg.model, train_cfg, cfg.seed,
                                checkpoint_path=out, log_path=log,
                                config_hash=config_hash)
    else:
        source = None
        if not (train_cfg.skip_pretrain or train_cfg.single_stream):
            if args.from_checkpoint is None:
                print("error: --phase stsan requires --from-checkpoint "
                      "(or the skip_pretrain/single_stream ablation)", file=sys.stderr)
                return EXIT_MISSING_CKPT
            try:
                source, _ = load_checkpoint(args.from_checkpoint)
            except CheckpointError as exc:
                print(f"error: {exc}", file=sys.stderr)
                return EXIT_MISSING_CKPT
            print(f"stream_t_hash_before={source.payload_hash('stream_t.')}")
        result = train_stsan(prepared, cfg.grid, cfg.model, train_cfg, cfg.seed,
                             stream_t_source=source, checkpoint_path=out,
                             log_path=log, config_hash=config_hash)
        if source is not None:
            print(f"stream_t_hash_after={result.store.payload_hash('stream_t.')}")
    print(f"steps={result.steps} best_val={result.best_val:.10g} "
          f"best_step={result.best_step} final_val={result.final_val:.10g}")
    print(f"checkpoint={out}")
    print(f"log={log}")
    return EXIT_OK


def cmd_eval(args) -> int:
    from .errors import CheckpointError
    from .evaluation import INTERVAL_CSV_HEADER, evaluate
    from .model import load_checkpoint
    cfg = _load_config(args.config)
    config_hash = cfg.config_hash()
    try:
        store, _ = load_checkpoint(args.checkpoint, expected_config_hash=config_hash)
    except CheckpointError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CKPT_MISMATCH
    prepared = _load_prepared(cfg, args.data or cfg.paths.cache)
    report, csv_rows = evaluate(store, prepared, cfg.model,
                                cfg.eval.filter_threshold, config_hash, cfg.seed)

    prefix = args.report
    if prefix is None:
        os.makedirs(cfg.paths.report_dir, exist_ok=True)
        prefix = os.path.join(cfg.paths.report_dir, "report")
    with open(prefix + ".json", "w", encoding="utf-8") as fh:
        fh.write(report.to_json() + "\n")
    with open(prefix + ".txt", "w", encoding="utf-8") as fh:
        fh.write(report.to_text())
    with open(prefix + ".csv", "w", encoding="utf-8") as fh:
        fh.write(INTERVAL_CSV_HEADER + "\n")
        for row in csv_rows:
            fh.write(row + "\n")
    sys.stdout.write(report.to_text())
    print(f"report={prefix}.json")
    return EXIT_OK


def cmd_predict(args) -> int:
    from .errors import CheckpointError, InsufficientHistoryError
    from .evaluation import flow_type_names
    from .model import load_checkpoint, predict_map
    cfg = _load_config(args.config)
    try:
        store, _ = load_checkpoint(args.checkpoint,
                                   expected_config_hash=cfg.config_hash())
    except CheckpointError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CKPT_MISMATCH
    prepared = _load_prepared(cfg, args.data or cfg.paths.cache)
    try:
        grid = predict_map(store, prepared, args.at, cfg.model)
    except InsufficientHistoryError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NO_HISTORY

    out = args.out or f"prediction_{args.at}.csv"
    names = flow_type_names(cfg.grid.flow_types)
    with open(out, "w", encoding="utf-8") as fh:
        fh.write("row,col," + ",".join(names) + "\n")
        for r in range(cfg.grid.rows):
            for c in range(cfg.grid.cols):
                vals = ",".join(f"{grid[r, c, ft]:.6f}" for ft in range(len(names)))
                fh.write(f"{r},{c},{vals}\n")
    print(f"prediction={out}")
    return EXIT_OK


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        _pin_threads(args.threads)
    except ValueError:
        print("error: STSAN_THREADS must be an integer", file=sys.stderr)
        return EXIT_ERROR
    try:
        return args.func(args)
    except SystemExit:
        raise
    except Exception as exc:  # typed errors not mapped above -> generic failure
        from .errors import StsanError
        if isinstance(exc, (StsanError, OSError)):
            print(f"error: {exc}", file=sys.stderr)
            return EXIT_ERROR
        raise


if __name__ == "__main__":
    sys.exit(main())
