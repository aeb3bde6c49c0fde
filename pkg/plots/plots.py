#!/usr/bin/env python3
"""Render divergence figures from round-log CSVs.

Two styles: per-client divergence trajectories across rounds (one subplot
per input CSV, shared y-scale) and paired divergence/z-score panels with
the shifted client emphasized. Consumes only the documented CSV contract;
inputs are never modified.
"""

from __future__ import annotations

import argparse
import csv
import sys
from collections import defaultdict
from dataclasses import dataclass
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt

EXPECTED_COLUMNS = [
    "round",
    "client_id",
    "n_samples",
    "divergence",
    "zscore",
    "local_loss",
    "is_shifted",
    "median",
    "mad",
    "probe_accuracy",
]

STYLES = ("divergence_rounds", "zscore_panels")

SHIFTED_COLOR = "#d62728"
SHIFTED_WIDTH = 2.4
REGULAR_WIDTH = 1.1


class PlotsError(Exception):
    """Bad inputs: unreadable CSV, wrong columns, or no data rows."""


@dataclass
class RunLog:
    """Per-client trajectories parsed from one round-log CSV."""

    name: str
    rounds: dict[int, list[int]]
    divergence: dict[int, list[float]]
    zscore: dict[int, list[float]]
    shifted: set[int]

    @property
    def client_ids(self) -> list[int]:
        return sorted(self.rounds)


def read_run_log(path: str | Path) -> RunLog:
    path = Path(path)
    try:
        with open(path, newline="") as f:
            reader = csv.DictReader(f)
            header = reader.fieldnames
            if header is None:
                raise PlotsError(f"{path}: empty file, no header")
            missing = [c for c in EXPECTED_COLUMNS if c not in header]
            if missing:
                raise PlotsError(f"{path}: missing column {missing[0]!r}")
            extra = [c for c in header if c not in EXPECTED_COLUMNS]
            if extra:
                raise PlotsError(f"{path}: unexpected column {extra[0]!r}")
            rows = list(reader)
    except OSError as exc:
        raise PlotsError(f"cannot read {path}: {exc}") from exc
    if not rows:
        raise PlotsError(f"{path}: no data rows")

    rounds: dict[int, list[int]] = defaultdict(list)
    divergence: dict[int, list[float]] = defaultdict(list)
    zscore: dict[int, list[float]] = defaultdict(list)
    shifted: set[int] = set()
    for row in rows:
        try:
            client = int(row["client_id"])
            rounds[client].append(int(row["round"]))
            divergence[client].append(float(row["divergence"]))
            zscore[client].append(float(row["zscore"]))
            if row["is_shifted"] not in ("0", "1"):
                raise ValueError(f"is_shifted must be 0 or 1, got {row['is_shifted']!r}")
            if row["is_shifted"] == "1":
                shifted.add(client)
        except (TypeError, ValueError) as exc:
            raise PlotsError(f"{path}: malformed row {row}: {exc}") from exc
    return RunLog(
        name=path.stem if path.stem != "rounds" else path.parent.name or path.stem,
        rounds=dict(rounds),
        divergence=dict(divergence),
        zscore=dict(zscore),
        shifted=shifted,
    )


def _line_style(log: RunLog, client: int) -> dict:
    if client in log.shifted:
        return {
            "color": SHIFTED_COLOR,
            "linewidth": SHIFTED_WIDTH,
            "zorder": 3,
            "label": f"client {client} (shifted)",
        }
    return {"linewidth": REGULAR_WIDTH, "alpha": 0.8, "label": f"client {client}"}


def _plot_series(ax, log: RunLog, values: dict[int, list[float]]) -> None:
    for client in log.client_ids:
        xs, ys = log.rounds[client], values[client]
        # markers keep single-round logs visible
        ax.plot(xs, ys, marker="." if len(xs) < 2 else None, **_line_style(log, client))
    ax.set_xlabel("round")
    ax.grid(True, alpha=0.3)


def plot_divergence_rounds(inputs: list[str | Path], out: str | Path) -> None:
    """One subplot per run, one divergence line per client, shared y-scale."""
    logs = [read_run_log(p) for p in inputs]
    fig, axes = plt.subplots(
        1, len(logs), figsize=(4.2 * len(logs), 3.4), sharey=True, squeeze=False
    )
    for ax, log in zip(axes[0], logs):
        _plot_series(ax, log, log.divergence)
        ax.set_title(log.name)
    axes[0][0].set_ylabel("divergence")
    if logs[0].client_ids:
        axes[0][-1].legend(fontsize=6, loc="upper right")
    fig.tight_layout()
    fig.savefig(out, dpi=150)
    plt.close(fig)


def plot_zscore_panels(inputs: list[str | Path], out: str | Path) -> None:
    """Paired (divergence, z-score) panels per run; shifted client stands out."""
    logs = [read_run_log(p) for p in inputs]
    fig, axes = plt.subplots(
        2, len(logs), figsize=(4.6 * len(logs), 6.0), squeeze=False
    )
    for col, log in enumerate(logs):
        _plot_series(axes[0][col], log, log.divergence)
        axes[0][col].set_title(log.name)
        _plot_series(axes[1][col], log, log.zscore)
    axes[0][0].set_ylabel("divergence")
    axes[1][0].set_ylabel("robust z-score")
    axes[1][-1].legend(fontsize=6, loc="upper right")
    fig.tight_layout()
    fig.savefig(out, dpi=150)
    plt.close(fig)


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(
        prog="plots.py", description="Render figures from round-log CSVs"
    )
    parser.add_argument("--style", required=True, choices=STYLES)
    parser.add_argument("--in", dest="inputs", required=True, nargs="+", metavar="CSV")
    parser.add_argument("--out", required=True, metavar="PNG")
    args = parser.parse_args(argv)
    try:
        if args.style == "divergence_rounds":
            plot_divergence_rounds(args.inputs, args.out)
        else:
            plot_zscore_panels(args.inputs, args.out)
    except PlotsError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    print(f"wrote {args.out}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
