"""Experiment runner and run comparison.

``layerfl run <config> [--set k=v]... [--workers N]`` executes the configured
experiment once per seed, writing one JSON-lines round log per seed plus CSV
and JSON summaries. ``layerfl compare <dir>...`` aligns completed runs that
share the same data hash.

Round logs contain only deterministic fields, so identical config + seed
reproduces byte-identical files; wall-clock timings go to the summaries.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import seeding
from .config import ExperimentConfig, parse_config
from .errors import ConfigurationError, LayerFLError
from .server import run_experiment

OUTPUT_ROOT_ENV = "LAYERFL_OUTPUT_ROOT"


def _dumps(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def _output_dir(cfg: ExperimentConfig) -> Path:
    root = os.environ.get(OUTPUT_ROOT_ENV)
    out = Path(cfg.output_dir)
    return Path(root) / out if root else out


def run_command(config_path: str, overrides: list[str], workers: int) -> int:
    cfg = parse_config(config_path, overrides)
    out = _output_dir(cfg)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(
        json.dumps(cfg.to_dict(), sort_keys=True, indent=2) + "\n", encoding="utf-8"
    )

    started = time.perf_counter()
    rows = []
    for seed in cfg.seeds:
        seed_dir = out / f"seed_{seed}"
        seed_dir.mkdir(parents=True, exist_ok=True)
        sink = None
        if cfg.dump_payloads:
            dump_dir = seed_dir / "payloads"
            dump_dir.mkdir(exist_ok=True)

            def sink(t, k, blob, _dir=dump_dir):
                (_dir / f"r{t:04d}_c{k:03d}.bin").write_bytes(blob)

        result = run_experiment(cfg, seed, workers=workers, payload_sink=sink)

        header = {
            "type": "header",
            "config_hash": cfg.config_hash(),
            "data_hash": cfg.data_hash(),
            "seed": seed,
            "strategy": cfg.strategy["name"],
            "substreams": seeding.STREAM_NAMES,
        }
        lines = [_dumps(header)]
        lines += [_dumps(r.to_record()) for r in result.reports]
        (seed_dir / "rounds.jsonl").write_text("\n".join(lines) + "\n", encoding="utf-8")

        rows.append(
            {
                "seed": seed,
                "rounds_run": len(result.reports),
                "rounds_to_convergence": result.rounds_to_convergence,
                "final_mean_acc": result.final_mean_acc,
                "payload_bytes_per_round_mean": float(
                    np.mean([r.payload_bytes for r in result.reports])
                ),
                "total_time_s": result.total_time_s,
            }
        )
        print(
            f"seed {seed}: {rows[-1]['rounds_run']} rounds, "
            f"converged at {rows[-1]['rounds_to_convergence']}, "
            f"final acc {rows[-1]['final_mean_acc']:.4f}"
        )

    _write_summary(out, cfg, rows, time.perf_counter() - started)
    print(f"wrote {out}")
    return 0


def _write_summary(out: Path, cfg: ExperimentConfig, rows: list[dict], wall_s: float) -> None:
    columns = [
        "seed",
        "rounds_run",
        "rounds_to_convergence",
        "final_mean_acc",
        "payload_bytes_per_round_mean",
        "total_time_s",
    ]
    with open(out / "summary.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=columns)
        writer.writeheader()
        writer.writerows(rows)

    accs = [r["final_mean_acc"] for r in rows]
    summary = {
        "config_hash": cfg.config_hash(),
        "data_hash": cfg.data_hash(),
        "strategy": cfg.strategy["name"],
        "seeds": cfg.seeds,
        "per_seed": rows,
        "final_mean_acc_mean": float(np.mean(accs)),
        "final_mean_acc_std": float(np.std(accs)),
        "rounds_to_convergence_mean": float(np.mean([r["rounds_to_convergence"] for r in rows])),
        "payload_bytes_per_round_mean": float(
            np.mean([r["payload_bytes_per_round_mean"] for r in rows])
        ),
        "total_wall_s": wall_s,
    }
    (out / "summary.json").write_text(
        json.dumps(summary, sort_keys=True, indent=2) + "\n", encoding="utf-8"
    )


def compare_command(run_dirs: list[str], csv_out: str | None) -> int:
    summaries = []
    for d in run_dirs:
        path = Path(d) / "summary.json"
        if not path.exists():
            raise ConfigurationError(f"{d} has no summary.json (incomplete run?)")
        summaries.append((d, json.loads(path.read_text(encoding="utf-8"))))

    reference = summaries[0][1]["data_hash"]
    for d, s in summaries[1:]:
        if s["data_hash"] != reference:
            raise ConfigurationError(
                f"incompatible runs: {d} has data hash {s['data_hash']}, expected {reference}"
            )

    columns = [
        "run",
        "strategy",
        "rounds_to_convergence",
        "final_acc_mean",
        "final_acc_std",
        "payload_bytes_per_round",
        "delta_rounds",
        "delta_acc",
    ]
    base = summaries[0][1]
    rows = []
    for d, s in summaries:
        rows.append(
            {
                "run": d,
                "strategy": s["strategy"],
                "rounds_to_convergence": s["rounds_to_convergence_mean"],
                "final_acc_mean": s["final_mean_acc_mean"],
                "final_acc_std": s["final_mean_acc_std"],
                "payload_bytes_per_round": s["payload_bytes_per_round_mean"],
                "delta_rounds": s["rounds_to_convergence_mean"] - base["rounds_to_convergence_mean"],
                "delta_acc": s["final_mean_acc_mean"] - base["final_mean_acc_mean"],
            }
        )

    widths = {c: max(len(c), *(len(_cell(r[c])) for r in rows)) for c in columns}
    print("  ".join(c.ljust(widths[c]) for c in columns))
    for r in rows:
        print("  ".join(_cell(r[c]).ljust(widths[c]) for c in columns))

    if csv_out:
        with open(csv_out, "w", newline="", encoding="utf-8") as fh:
            writer = csv.DictWriter(fh, fieldnames=columns)
            writer.writeheader()
            writer.writerows(rows)
        print(f"wrote {csv_out}")
    return 0


def _cell(v) -> str:
    return f"{v:.4f}" if isinstance(v, float) else str(v)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="layerfl", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="execute an experiment config")
    p_run.add_argument("config", help="path to a JSON experiment config")
    p_run.add_argument(
        "--set",
        dest="overrides",
        action="append",
        default=[],
        metavar="KEY=VALUE",
        help="override a config field, e.g. --set strategy.name=fedavg",
    )
    p_run.add_argument("--workers", type=int, default=1, help="parallel clients per round")

    p_cmp = sub.add_parser("compare", help="compare completed runs")
    p_cmp.add_argument("run_dirs", nargs="+", help="run output directories")
    p_cmp.add_argument("--csv", default=None, help="also write the table to this CSV file")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "run":
            if args.workers < 1:
                raise ConfigurationError("--workers must be >= 1")
            return run_command(args.config, args.overrides, args.workers)
        return compare_command(args.run_dirs, args.csv)
    except ConfigurationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except LayerFLError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
