"""Command line: ``alast train | inspect | report``.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
The default output root is ``$ALAST_OUTPUT_ROOT`` (``runs`` if unset).
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .controller import write_trajectory
from .errors import AlastError, ConfigError, FormatError
from .train import RunConfig, load_data, train, write_metrics_csv
from .vit import PRESETS, forward, layer_inputs, load_checkpoint, relative_magnitude, save_checkpoint

log = logging.getLogger("alast")

OUTPUT_ROOT_ENV = "ALAST_OUTPUT_ROOT"
METRICS_FILE = "metrics.csv"
TRAJECTORY_FILE = "trajectory.jsonl"
CHECKPOINT_FILE = "checkpoint.bin"
SUMMARY_FILE = "summary.json"
RELMAG_FILE = "relative_magnitude.csv"
ATTENTION_FILE = "cls_attention.csv"
COMPARISON_FILE = "comparison.csv"
COMPARISON_COLUMNS = ("run", "method", "accuracy", "total_flops", "peak_bytes", "wallclock_ms",
                      "accuracy_ratio", "flops_ratio", "peak_bytes_ratio", "wallclock_ratio")


class UsageFailure(Exception):
    """Bad invocation or input files; maps to exit code 2."""


@dataclass
class CliInvocation:
    subcommand: str
    config: Path | None = None
    output: Path | None = None
    overrides: list = field(default_factory=list)
    seed: int | None = None


def output_root():
    return Path(os.environ.get(OUTPUT_ROOT_ENV, "runs"))


def _parse_value(text):
    try:
        return json.loads(text)
    except ValueError:
        return text


def apply_overrides(config, overrides):
    """Set dotted ``key=value`` pairs on a config dict (values parsed as JSON when possible)."""
    config = json.loads(json.dumps(config))
    for item in overrides:
        key, sep, value = item.partition("=")
        if not sep or not key:
            raise ConfigError(item, "override must look like key=value")
        parts = key.split(".")
        node = config
        for i, part in enumerate(parts[:-1]):
            child = node.get(part)
            if part == "model" and i == 0 and isinstance(child, str):
                if child not in PRESETS:
                    raise ConfigError("model", f"unknown preset {child!r}")
                child = PRESETS[child].to_dict()
            if child is None:
                child = {}
            if not isinstance(child, dict):
                raise ConfigError(".".join(parts[:i + 1]), "is not an object")
            node[part] = child
            node = child
        node[parts[-1]] = _parse_value(value)
    return config


def load_run_config(inv):
    try:
        raw = json.loads(Path(inv.config).read_text())
    except FileNotFoundError:
        raise UsageFailure(f"config file not found: {inv.config}") from None
    except ValueError as exc:
        raise UsageFailure(f"{inv.config}: invalid JSON ({exc})") from None
    if not isinstance(raw, dict):
        raise ConfigError("<root>", "config must be a JSON object")
    raw = apply_overrides(raw, inv.overrides)
    if inv.seed is not None:
        raw["seed"] = inv.seed
    return RunConfig.from_dict(raw)


def cmd_train(inv):
    rc = load_run_config(inv)
    out = Path(inv.output) if inv.output else output_root() / f"{rc.method}-seed{rc.seed}"
    out.mkdir(parents=True, exist_ok=True)
    report = train(rc, on_step=_log_step)
    write_metrics_csv(report.records, out / METRICS_FILE)
    write_trajectory(report.trajectory, out / TRAJECTORY_FILE)
    save_checkpoint(report.model, out / CHECKPOINT_FILE)
    (out / SUMMARY_FILE).write_text(json.dumps(report.summary(), indent=2, sort_keys=True) + "\n")
    print(f"{rc.method}: accuracy {report.final_accuracy:.4f}, "
          f"total flops {report.total_flops:.4g}, peak bytes {report.peak_bytes} -> {out}")
    return 0


def _log_step(record, schedule, model):
    if record.step % 50 == 0:
        log.info("step %d loss %.4f acc %.3f trainable %s retain %s", record.step, record.loss,
                 record.train_acc, schedule.trainable, schedule.retain)


def inspect_rows(model, images):
    """(relative-magnitude rows, CLS-attention rows) for a batch under full retention."""
    heads = model.config.num_heads
    rel_rows = [(l, relative_magnitude(layer, seq, heads))
                for l, (layer, seq) in enumerate(zip(model.layers, layer_inputs(model, images)))]
    _, _, traces = forward(model, images)
    _, cols = model.config.grid
    att_rows = []
    for l, trace in enumerate(traces):
        mean = trace.cls_attention_scores.mean(axis=0)
        att_rows.extend((l, p // cols, p % cols, float(s)) for p, s in enumerate(mean))
    return rel_rows, att_rows


def cmd_inspect(args):
    ckpt = Path(args.checkpoint)
    if not ckpt.is_file():
        raise UsageFailure(f"checkpoint not found: {ckpt}")
    try:
        model = load_checkpoint(ckpt)
    except FormatError as exc:
        raise UsageFailure(str(exc)) from None
    if args.config:
        rc = load_run_config(CliInvocation("inspect", Path(args.config), overrides=args.override))
        if rc.model_config() != model.config:
            raise ConfigError("model", "config model does not match the checkpoint")
    else:
        rc = RunConfig(model=model.config.to_dict(), method="ft_full")
    _, eval_ds = load_data(rc)
    images = eval_ds.images[:args.num_images]
    if len(images) == 0:
        raise UsageFailure("no evaluation images available for inspection")
    rel_rows, att_rows = inspect_rows(model, images)
    out = Path(args.out) if args.out else output_root() / "inspect"
    out.mkdir(parents=True, exist_ok=True)
    _write_csv(out / RELMAG_FILE, ("layer", "relative_magnitude"), rel_rows)
    _write_csv(out / ATTENTION_FILE, ("layer", "patch_row", "patch_col", "score"), att_rows)
    print(f"wrote {RELMAG_FILE} and {ATTENTION_FILE} to {out}")
    return 0


def _fmt(value):
    return repr(float(value)) if isinstance(value, (float, np.floating)) else value


def _write_csv(path, header, rows):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows([_fmt(v) for v in row] for row in rows)


def read_csv(path):
    """Rows as dicts with ints and floats restored."""
    def conv(text):
        try:
            return int(text)
        except ValueError:
            try:
                return float(text)
            except ValueError:
                return text
    with open(path, newline="", encoding="utf-8") as fh:
        return [{k: conv(v) for k, v in row.items()} for row in csv.DictReader(fh)]


def _load_summary(run_dir):
    path = Path(run_dir) / SUMMARY_FILE
    if not path.is_file():
        raise UsageFailure(f"no {SUMMARY_FILE} in run directory {run_dir}")
    return json.loads(path.read_text())


def _ratio(a, b):
    return a / b if b else math.nan


def comparison_rows(runs, baseline):
    """``runs`` maps run name -> summary dict; ratios are relative to ``baseline``."""
    base = runs[baseline]
    rows = []
    for name, s in runs.items():
        rows.append((name, s["method"], float(s["final_accuracy"]), int(s["total_flops"]),
                     int(s["peak_bytes"]), float(s["wallclock_ms"]),
                     _ratio(s["final_accuracy"], base["final_accuracy"]),
                     _ratio(s["total_flops"], base["total_flops"]),
                     _ratio(s["peak_bytes"], base["peak_bytes"]),
                     _ratio(s["wallclock_ms"], base["wallclock_ms"])))
    return rows


def cmd_report(args):
    if len(args.runs) < 2:
        raise UsageFailure("report needs at least two run directories")
    runs = {}
    for d in args.runs:
        name = Path(d).name
        if name in runs:
            name = str(d)
        runs[name] = _load_summary(d)
    baseline = args.baseline or args.runs[0]
    if baseline not in args.runs:
        raise UsageFailure(f"baseline {baseline} is not among the compared runs")
    base_name = [n for n, d in zip(runs, args.runs) if d == baseline][0]
    rows = comparison_rows(runs, base_name)
    out = Path(args.out) if args.out else output_root() / "report"
    out.mkdir(parents=True, exist_ok=True)
    _write_csv(out / COMPARISON_FILE, COMPARISON_COLUMNS, rows)
    for row in rows:
        print(f"{row[0]:>24} {row[1]:>15} acc {row[2]:.4f} flops x{row[7]:.3f} "
              f"memory x{row[8]:.3f}")
    return 0


def build_parser():
    p = argparse.ArgumentParser(prog="alast", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="subcommand", required=True)

    t = sub.add_parser("train", help="run one fine-tuning experiment")
    t.add_argument("--config", required=True, help="RunConfig JSON file")
    t.add_argument("--out", help="output directory (created if absent)")
    t.add_argument("--override", action="append", default=[], metavar="KEY=VALUE",
                   help="dotted config override, applied after the file is parsed")
    t.add_argument("--seed", type=int)

    i = sub.add_parser("inspect", help="relative magnitudes and CLS attention of a checkpoint")
    i.add_argument("--checkpoint", required=True)
    i.add_argument("--config", help="RunConfig JSON naming the data source")
    i.add_argument("--override", action="append", default=[], metavar="KEY=VALUE")
    i.add_argument("--num-images", type=int, default=16)
    i.add_argument("--out")

    r = sub.add_parser("report", help="compare finished runs against a baseline")
    r.add_argument("runs", nargs="+", help="run directories")
    r.add_argument("--baseline", help="baseline run directory (default: the first)")
    r.add_argument("--out")
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.subcommand == "train":
            inv = CliInvocation("train", Path(args.config), args.out and Path(args.out),
                                args.override, args.seed)
            return cmd_train(inv)
        if args.subcommand == "inspect":
            return cmd_inspect(args)
        return cmd_report(args)
    except (ConfigError, UsageFailure) as exc:
        print(f"alast {args.subcommand}: error: {exc}", file=sys.stderr)
        return 2
    except (AlastError, ArithmeticError, OSError, ValueError) as exc:
        print(f"alast {args.subcommand}: failed: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
