"""``floodstgcn`` command line: generate, train, predict and evaluate.

Every command writes into a fresh run directory ``<out>/<timestamp>-seed<seed>``
that is assembled under a temporary name and renamed into place only when
the command succeeds, so a failed run leaves no partial outputs behind.

Exit codes: 0 success, 1 runtime or numeric failure, 2 usage or config error.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import os
import shutil
import sys
import tempfile
import time
from dataclasses import asdict, dataclass
from datetime import datetime, timezone
from pathlib import Path

from . import __version__
from .estimator import FloodForecaster, STGCNForecaster
from .exceptions import CheckpointError, ConfigError, FloodSTGCNError
from .graph import read_segments, write_segments
from .metrics import horizon_eval, rolling_eval, status_from_speed
from .simulate import (
    ScenarioConfig,
    generate_network,
    ingest_traces,
    read_config_file,
    read_ground_truth,
    simulate,
    write_config_file,
    write_ground_truth,
    write_traces,
)
from .training import checkpoint_load, checkpoint_save

logger = logging.getLogger("floodstgcn")

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2
CHECKPOINT_GLOB = "cluster-*.ckpt.json"


class UsageError(Exception):
    """Bad flags or inputs detected before any work starts."""


@dataclass(frozen=True)
class TrainSettings:
    """Keys accepted by ``train --config`` (plain ``key = value`` lines)."""

    n_history: int = 0  # 0 picks the architecture default
    temporal_kernel: int = 3
    cheb_order: int = 3
    channels: str = "64,16,64"
    w_max: float = 1.0
    epochs: int = 20
    batch_size: int = 16
    batches_per_epoch: int = 8
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    patience: int = 10
    input_noise: float = 0.1
    holdout_hours: float = 72.0
    per_cluster: int = 1
    workers: int = 1

    def __post_init__(self):
        try:
            chans = tuple(int(c) for c in str(self.channels).split(","))
        except ValueError:
            raise ConfigError(f"channels must be comma-separated integers, got {self.channels!r}") from None
        if len(chans) != 3:
            raise ConfigError(f"channels needs three values, got {self.channels!r}")
        if self.holdout_hours < 0 or self.workers < 1 or self.n_history < 0:
            raise ConfigError("holdout_hours and n_history must be >= 0, workers >= 1")

    def forecaster(self, model: str, seed: int) -> STGCNForecaster:
        return STGCNForecaster(
            architecture=model, n_history=self.n_history or None, temporal_kernel=self.temporal_kernel,
            cheb_order=self.cheb_order, channels=tuple(int(c) for c in self.channels.split(",")),
            w_max=self.w_max, epochs=self.epochs, batch_size=self.batch_size,
            batches_per_epoch=self.batches_per_epoch, learning_rate=self.learning_rate, beta1=self.beta1,
            beta2=self.beta2, patience=self.patience, input_noise=self.input_noise,
            random_state=seed)


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


class RunDirectory:
    """Collects outputs in a staging directory and publishes them atomically."""

    def __init__(self, parent, command: str, seed: int, argv, config_path=None, inputs=()):
        self.parent = Path(parent)
        self.command = command
        self.seed = seed
        self.argv = list(argv)
        self.config_path = config_path
        self.inputs = [str(p) for p in inputs]
        self.outputs: list[str] = []
        self.started = time.monotonic()
        self.parent.mkdir(parents=True, exist_ok=True)
        self.staging = Path(tempfile.mkdtemp(prefix=".staging-", dir=self.parent))

    def path(self, name: str) -> Path:
        self.outputs.append(name)
        return self.staging / name

    def publish(self) -> Path:
        stamp = datetime.now(timezone.utc).strftime("%Y%m%dT%H%M%SZ")
        final = self.parent / f"{stamp}-seed{self.seed}"
        n = 1
        while final.exists():
            n += 1
            final = self.parent / f"{stamp}-seed{self.seed}-{n}"
        manifest = {
            "command": self.command,
            "argv": self.argv,
            "config_path": None if self.config_path is None else str(self.config_path),
            "inputs": self.inputs,
            "outputs": {name: _sha256(self.staging / name) for name in sorted(self.outputs)},
            "seed": self.seed,
            "tool_version": __version__,
            "duration_s": round(time.monotonic() - self.started, 3),
        }
        tmp = self.staging / "manifest.json.tmp"
        tmp.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
        os.replace(tmp, self.staging / "manifest.json")
        os.rename(self.staging, final)
        return final

    def discard(self) -> None:
        shutil.rmtree(self.staging, ignore_errors=True)


def _require_file(path, what: str) -> Path:
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"{what} {path} does not exist")
    return p


def _checkpoint_paths(path) -> list[Path]:
    p = Path(path)
    if p.is_dir():
        found = sorted(p.glob(CHECKPOINT_GLOB))
        if not found:
            raise UsageError(f"no {CHECKPOINT_GLOB} files in {path}")
        return found
    return [_require_file(p, "checkpoint")]


def _load_forecaster(path) -> FloodForecaster:
    return FloodForecaster.from_checkpoints([checkpoint_load(p) for p in _checkpoint_paths(path)])


def _parse_rolling(text: str) -> tuple[float, float]:
    try:
        hours, every = (float(v) for v in text.split(":"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected HOURS:INTERVAL such as 72:4, got {text!r}") from None
    if hours <= 0 or every <= 0 or every > hours:
        raise argparse.ArgumentTypeError(f"invalid rolling window {text!r}")
    return hours, every


# -- commands -----------------------------------------------------------------------------


def cmd_generate(args) -> Path:
    config = read_config_file(args.config) if args.config else ScenarioConfig()
    if args.seed is not None:
        config = ScenarioConfig(**{**asdict(config), "seed": args.seed})
    run = RunDirectory(args.out, "generate", config.seed, args.argv, args.config)
    try:
        segments = generate_network(config)
        result = simulate(config, segments)
        write_segments(run.path("segments.csv"), segments)
        write_traces(run.path("traces.csv"), result.traces)
        write_ground_truth(run.path("ground_truth.csv"), result.truth)
        write_config_file(run.path("scenario.cfg"), config)
        return run.publish()
    except BaseException:
        run.discard()
        raise


def cmd_train(args) -> Path:
    settings = read_config_file(args.config, TrainSettings) if args.config else TrainSettings()
    segments = read_segments(_require_file(args.segments, "segment table"))
    traces = ingest_traces(_require_file(args.traces, "trace file"), [s.id for s in segments])
    holdout = int(round(settings.holdout_hours * 60.0 / traces.step_minutes))
    split = traces.speeds.shape[0] - holdout
    if split < 2:
        raise UsageError(f"traces hold {traces.speeds.shape[0]} steps, too few to keep {holdout} for evaluation")
    base = settings.forecaster(args.model, args.seed)
    base.model_config()  # validate the architecture settings before any work
    run = RunDirectory(args.out, "train", args.seed, args.argv, args.config, [args.segments, args.traces])
    try:
        ff = FloodForecaster(base, per_cluster=bool(settings.per_cluster), n_jobs=settings.workers)
        ff.fit(traces.speeds[:split], segments=segments, historical=traces.historical)
        meta = {"split_time": split, "step_minutes": traces.step_minutes, "seed": args.seed,
                "train_config": base.train_config().to_dict()}
        for label, ckpt in ff.to_checkpoints(meta):
            checkpoint_save(ckpt, run.path(f"cluster-{label}.ckpt.json"))
            with open(run.path(f"loss-cluster-{label}.csv"), "w", newline="", encoding="utf-8") as fh:
                writer = csv.writer(fh, lineterminator="\n")
                writer.writerow(("epoch", "train_loss"))
                for epoch, loss in enumerate(ckpt.metadata["loss_curve"]):
                    writer.writerow((epoch, repr(float(loss))))
        return run.publish()
    except BaseException:
        run.discard()
        raise


def _history_end(args, ff, n_steps: int) -> int:
    end = n_steps if args.start is None else args.start
    if not ff.n_history <= end <= n_steps:
        raise UsageError(f"--start must lie in [{ff.n_history}, {n_steps}], got {end}")
    return end


def cmd_predict(args) -> Path:
    if args.horizon_steps < 1:
        raise UsageError("--horizon-steps must be >= 1")
    ff = _load_forecaster(args.checkpoint)
    traces = ingest_traces(_require_file(args.traces, "trace file")).select(ff.segment_ids_)
    end = _history_end(args, ff, traces.speeds.shape[0])
    run = RunDirectory(args.out, "predict", 0, args.argv, None, [args.checkpoint, args.traces])
    try:
        speeds = ff.forecast(traces.speeds[:end], args.horizon_steps)
        status = status_from_speed(speeds, ff.historical_[None, :], ff.threshold)
        step = traces.step_minutes
        last = traces.timestamps[end - 1]
        with open(run.path("predictions.csv"), "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(("segment_id", "step", "timestamp_min", "speed_kmh", "flooded"))
            for j, sid in enumerate(ff.segment_ids_):
                for s in range(args.horizon_steps):
                    stamp = last + (s + 1) * step
                    writer.writerow((sid, s + 1, repr(float(stamp)), repr(float(speeds[s, j])), int(status[s, j])))
        return run.publish()
    except BaseException:
        run.discard()
        raise


def cmd_evaluate(args) -> Path:
    checkpoints = [checkpoint_load(p) for p in _checkpoint_paths(args.checkpoint)]
    ff = FloodForecaster.from_checkpoints(checkpoints)
    traces = ingest_traces(_require_file(args.traces, "trace file")).select(ff.segment_ids_)
    observed = None
    if args.ground_truth:
        truth = read_ground_truth(_require_file(args.ground_truth, "ground truth"), None).select(ff.segment_ids_)
        if truth.flooded.shape != traces.speeds.shape:
            raise UsageError("ground truth and traces cover different time grids")
        observed = truth.flooded
    if args.start is None:
        splits = {int(c.metadata.get("split_time", -1)) for c in checkpoints}
        if len(splits) != 1 or -1 in splits:
            raise UsageError("checkpoints carry no common split_time; pass --start")
        start = splits.pop()
    else:
        start = args.start
    hours, every = args.rolling
    step = traces.step_minutes
    rolling = rolling_eval(ff, traces.speeds, traces.historical, start, observed=observed, hours=hours,
                           interval_hours=every, step_minutes=step, threshold=ff.threshold)
    run = RunDirectory(args.out, "evaluate", 0, args.argv, None,
                       [args.checkpoint, args.traces] + ([args.ground_truth] if args.ground_truth else []))
    try:
        rolling.write_csv(run.path("rolling_report.csv"))
        rolling.write_long_csv(run.path("rolling_report_long.csv"), "rolling")
        if args.horizons:
            report = horizon_eval(ff, traces.speeds, traces.historical, start, observed=observed,
                                  horizons_hours=args.horizons, step_minutes=step, threshold=ff.threshold)
            report.write_csv(run.path("horizon_report.csv"))
        return run.publish()
    except BaseException:
        run.discard()
        raise


# -- entry point ----------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="floodstgcn", description="Flood status forecasting with STGCN models.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log training progress")
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="simulate a synthetic flood scenario")
    g.add_argument("--config", help="scenario config file (key = value)")
    g.add_argument("--seed", type=int, help="override the config seed")
    g.add_argument("--out", required=True, help="parent directory for the run directory")
    g.set_defaults(func=cmd_generate)

    t = sub.add_parser("train", help="train one model per cluster")
    t.add_argument("--model", required=True, choices=("1", "2", "3"), help="architecture id")
    t.add_argument("--segments", required=True)
    t.add_argument("--traces", required=True)
    t.add_argument("--config", help="training config file (key = value)")
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--out", required=True)
    t.set_defaults(func=cmd_train)

    p = sub.add_parser("predict", help="forecast speeds and statuses")
    p.add_argument("--checkpoint", required=True, help="checkpoint file or training run directory")
    p.add_argument("--traces", required=True)
    p.add_argument("--horizon-steps", required=True, type=int)
    p.add_argument("--start", type=int, help="forecast from this time index (default: end of traces)")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_predict)

    e = sub.add_parser("evaluate", help="rolling evaluation of flood statuses")
    e.add_argument("--checkpoint", required=True, help="checkpoint file or training run directory")
    e.add_argument("--traces", required=True)
    e.add_argument("--ground-truth", help="flags CSV; without it statuses come from the traces")
    e.add_argument("--rolling", type=_parse_rolling, default=(72.0, 4.0), help="HOURS:INTERVAL (default 72:4)")
    e.add_argument("--horizons", type=lambda s: tuple(float(v) for v in s.split(",")),
                   help="also write a pooled report at these horizons in hours, e.g. 2,4,6")
    e.add_argument("--start", type=int, help="first forecast time index (default: the training split)")
    e.add_argument("--out", required=True)
    e.set_defaults(func=cmd_evaluate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)  # exits with status 2 on usage errors
    args.argv = list(sys.argv[1:] if argv is None else argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        run_dir = args.func(args)
    except (UsageError, ConfigError) as exc:
        parser.print_usage(sys.stderr)
        print(f"floodstgcn {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (FloodSTGCNError, CheckpointError, OSError) as exc:
        print(f"floodstgcn {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    print(run_dir)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
