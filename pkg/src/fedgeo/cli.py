"""Command-line entry point: run, sweep, and verify.

Exit codes: 0 success, 1 verify failure, 2 invalid config or usage,
3 data error, 4 runtime numeric failure (NaN detected).
"""

from __future__ import annotations

import argparse
import copy
import json
import math
import os
import sys
import time
from pathlib import Path
from typing import Any

import numpy as np

from . import anomaly, geometry
from .config import ConfigError, build_config, load_config, load_raw, set_scalar
from .data_fabric import DataError
from .fed_sim import RoundRecord, run_experiment
from .nn_core import (
    MlpModel,
    NumericError,
    init_model,
    loss_and_gradients,
    permute_hidden_units,
)

EXIT_OK = 0
EXIT_VERIFY_FAILED = 1
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4


def _resolve_threads(arg_value: int | None) -> int:
    if arg_value is not None:
        return max(1, arg_value)
    env = os.environ.get("FEDGEO_THREADS")
    if env is not None:
        try:
            return max(1, int(env))
        except ValueError:
            raise ConfigError(f"FEDGEO_THREADS must be an integer, got {env!r}")
    return 1


def _parse_dump_affinity(text: str | None) -> tuple[int, int] | None:
    if text is None:
        return None
    try:
        round_part, client_part = text.split(":")
        return int(round_part), int(client_part)
    except ValueError:
        raise ConfigError(f"--dump-affinity expects <round>:<client>, got {text!r}")


def _parse_sweep_value(text: str) -> Any:
    text = text.strip()
    for caster in (int, float):
        try:
            return caster(text)
        except ValueError:
            continue
    if text.lower() in ("true", "false"):
        return text.lower() == "true"
    return text


def cmd_run(
    config_path: str,
    out: str | None,
    threads: int | None,
    dump_affinity: str | None,
) -> int:
    cfg = load_config(config_path)
    records = run_experiment(
        cfg,
        out_dir=out,
        threads=_resolve_threads(threads),
        dump_affinity=_parse_dump_affinity(dump_affinity),
    )
    out_dir = Path(out) if out is not None else Path(cfg.output.dir)
    last = records[-1]
    print(
        f"completed {len(records)} rounds -> {out_dir/'rounds.csv'} "
        f"(final probe accuracy {last.probe_accuracy:.4f}, eval accuracy {last.eval_accuracy:.4f})"
    )
    return EXIT_OK


def _sweep_run_stats(records: list[RoundRecord]) -> dict[str, Any]:
    tail = records[-10:] if len(records) >= 10 else records
    per_client: dict[int, list[float]] = {}
    for record in tail:
        for c in record.clients:
            per_client.setdefault(c.client_id, []).append(c.divergence)
    means = {str(c): float(np.mean(v)) for c, v in sorted(per_client.items())}
    values = list(means.values())
    return {
        "tail_rounds": len(tail),
        "mean_divergence_per_client": means,
        "mean_divergence": float(np.mean(values)),
        "std_divergence_across_clients": float(np.std(values)),
        "final_probe_accuracy": records[-1].probe_accuracy,
        "final_eval_accuracy": records[-1].eval_accuracy,
    }


def cmd_sweep(config_path: str, key: str, values_csv: str, threads: int | None) -> int:
    raw = load_raw(config_path)
    base_dir = Path(config_path).parent
    texts = [v for v in values_csv.split(",") if v.strip()]
    if not texts:
        raise ConfigError("sweep needs a nonempty --values list")
    set_scalar(copy.deepcopy(raw), key, 0)  # key must exist and be scalar

    base_cfg = build_config(copy.deepcopy(raw), base_dir=base_dir)
    base_out = Path(base_cfg.output.dir)
    n_threads = _resolve_threads(threads)

    runs = []
    worst = EXIT_OK
    for text in texts:
        value = _parse_sweep_value(text)
        run_dir = base_out / f"{key}={text.strip()}"
        entry: dict[str, Any] = {"value": value, "out_dir": str(run_dir)}
        try:
            variant = copy.deepcopy(raw)
            set_scalar(variant, key, value)
            cfg = build_config(variant, base_dir=base_dir)
            records = run_experiment(cfg, out_dir=run_dir, threads=n_threads)
            entry["exit_code"] = EXIT_OK
            entry["stats"] = _sweep_run_stats(records)
            print(f"sweep {key}={text.strip()}: ok -> {run_dir}")
        except ConfigError as exc:
            entry.update(exit_code=EXIT_CONFIG, error=str(exc))
            print(f"sweep {key}={text.strip()}: config error: {exc}", file=sys.stderr)
        except DataError as exc:
            entry.update(exit_code=EXIT_DATA, error=str(exc))
            print(f"sweep {key}={text.strip()}: data error: {exc}", file=sys.stderr)
        except NumericError as exc:
            entry.update(exit_code=EXIT_NUMERIC, error=str(exc))
            print(f"sweep {key}={text.strip()}: numeric error: {exc}", file=sys.stderr)
        worst = max(worst, entry["exit_code"])
        runs.append(entry)

    base_out.mkdir(parents=True, exist_ok=True)
    combined = {"key": key, "values": [r["value"] for r in runs], "runs": runs}
    with open(base_out / "sweep_summary.json", "w") as f:
        json.dump(combined, f, indent=2, sort_keys=True)
        f.write("\n")
    print(f"sweep summary -> {base_out / 'sweep_summary.json'}")
    return worst


# --- built-in verification suite -------------------------------------------

def _finite_difference_grads(model: MlpModel, inputs, labels, h: float = 1e-5):
    """Central-difference loss gradients, parameter by parameter."""
    def loss_at() -> float:
        return loss_and_gradients(model, inputs, labels)[0]

    grads = []
    for params in (model.weights, model.biases):
        for arr in params:
            g = np.zeros_like(arr)
            it = np.nditer(arr, flags=["multi_index"])
            for _ in it:
                idx = it.multi_index
                orig = arr[idx]
                arr[idx] = orig + h
                up = loss_at()
                arr[idx] = orig - h
                down = loss_at()
                arr[idx] = orig
                g[idx] = (up - down) / (2 * h)
            grads.append(g)
    return grads


def _check_affinity_hand_case() -> bool:
    patterns = np.array([[1, 0, 1, 1], [1, 1, 0, 1]], dtype=bool)
    k = geometry.affinity_matrix(patterns)
    return k.values[0, 1] == 0.5 and k.values[0, 0] == 1.0 and k.values[1, 0] == 0.5


def _check_frobenius_hand_case() -> bool:
    ka = geometry.AffinityMatrix(np.array([[1.0, 1.0], [1.0, 1.0]]), layer_width=2)
    kb = geometry.AffinityMatrix(np.array([[1.0, 0.5], [0.5, 1.0]]), layer_width=2)
    return abs(geometry.layer_distance(ka, kb) - math.sqrt(0.5)) < 1e-15


def _check_hierarchical_recurrence() -> bool:
    cfg = geometry.DivergenceConfig(beta=1.0)
    dist = geometry.LayerDistances(
        d=[1.0, 0.5, 0.2], lam=[math.exp(-1.0), math.exp(-0.5), math.exp(-0.2)]
    )
    got = geometry.hierarchical_divergence(dist, cfg)
    expected = 1.0 + math.exp(-1.0) * 0.5 + math.exp(-1.0) * math.exp(-0.5) * 0.2
    return abs(got - expected) < 1e-12


def _check_zscore_hand_case() -> bool:
    scores = anomaly.robust_scores(np.array([1.0, 1.1, 0.9, 1.05, 5.0]), epsilon=1e-8)
    return (
        scores.median == 1.05
        and abs(scores.mad - 0.05) < 1e-15
        and abs(scores.zscores[4] - 79.0) / 79.0 < 1e-5
    )


def _check_gradient() -> bool:
    rng = np.random.default_rng(7)
    model = init_model([4, 5, 3], rng_seed=11)
    inputs = rng.standard_normal((8, 4))
    labels = rng.integers(0, 3, size=8)
    _, grads = loss_and_gradients(model, inputs, labels)
    numeric = _finite_difference_grads(model, inputs, labels)
    analytic = grads.weights + grads.biases
    worst = 0.0
    for a, n in zip(analytic, numeric):
        denom = np.maximum(np.abs(a) + np.abs(n), 1e-8)
        worst = max(worst, float(np.max(np.abs(a - n) / denom)))
    return worst < 1e-4


def _check_permutation_invariance() -> bool:
    rng = np.random.default_rng(23)
    cfg = geometry.DivergenceConfig(beta=1.0)
    for trial in range(10):
        model_a = init_model([16, 12, 8, 4], rng_seed=100 + trial)
        model_b = init_model([16, 12, 8, 4], rng_seed=200 + trial)
        probe = rng.standard_normal((32, 16))
        base = geometry.client_divergence(model_a, model_b, probe, cfg)
        permuted = model_b.copy()
        for layer, width in ((0, 12), (1, 8)):
            permuted = permute_hidden_units(permuted, layer, rng.permutation(width))
        if geometry.client_divergence(model_a, permuted, probe, cfg) != base:
            return False
    return True


def _check_packed_vs_naive() -> bool:
    rng = np.random.default_rng(5)
    for _ in range(20):
        m = int(rng.integers(1, 33))
        n = int(rng.integers(1, 65))
        patterns = rng.random((m, n)) < rng.uniform(0.1, 0.9)
        if not np.array_equal(
            geometry.hamming_matrix(patterns), geometry.hamming_matrix_naive(patterns)
        ):
            return False
    return True


def _check_median_mad_reference() -> bool:
    rng = np.random.default_rng(13)
    for _ in range(200):
        values = rng.standard_normal(int(rng.integers(2, 13)))
        scores = anomaly.robust_scores(values, epsilon=1e-8)
        if scores.median != anomaly.sort_based_median(values):
            return False
        if scores.mad != anomaly.sort_based_mad(values):
            return False
    return True


VERIFY_CHECKS = [
    ("affinity_hand_case", _check_affinity_hand_case),
    ("frobenius_hand_case", _check_frobenius_hand_case),
    ("hierarchical_divergence_recurrence", _check_hierarchical_recurrence),
    ("robust_zscore_hand_case", _check_zscore_hand_case),
    ("gradient_check_vs_finite_differences", _check_gradient),
    ("permutation_invariance", _check_permutation_invariance),
    ("packed_hamming_vs_naive_loop", _check_packed_vs_naive),
    ("median_mad_vs_sort_reference", _check_median_mad_reference),
]


def cmd_verify() -> int:
    started = time.perf_counter()
    all_ok = True
    for name, check in VERIFY_CHECKS:
        try:
            ok = check()
        except Exception as exc:  # a crashed check is a failed check
            ok = False
            print(f"FAIL {name}: {exc}")
            all_ok = False
            continue
        print(f"{'PASS' if ok else 'FAIL'} {name}")
        all_ok = all_ok and ok
    print(f"verify finished in {time.perf_counter() - started:.2f}s")
    return EXIT_OK if all_ok else EXIT_VERIFY_FAILED


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fedgeo",
        description="Federated-learning simulator with activation-geometry divergence monitoring",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    run_p = sub.add_parser("run", help="run one experiment from a config file")
    run_p.add_argument("--config", required=True)
    run_p.add_argument("--out", default=None, help="override output.dir")
    run_p.add_argument("--threads", type=int, default=None)
    run_p.add_argument(
        "--dump-affinity",
        default=None,
        metavar="R:C",
        help="dump affinity matrices for round R and client C as CSV",
    )

    sweep_p = sub.add_parser("sweep", help="run one experiment per value of a config key")
    sweep_p.add_argument("--config", required=True)
    sweep_p.add_argument("--key", required=True, help="dotted scalar key, e.g. partition.alpha")
    sweep_p.add_argument("--values", required=True, help="comma-separated values")
    sweep_p.add_argument("--threads", type=int, default=None)

    sub.add_parser("verify", help="run the built-in oracle suite")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "run":
            return cmd_run(args.config, args.out, args.threads, args.dump_affinity)
        if args.command == "sweep":
            return cmd_sweep(args.config, args.key, args.values, args.threads)
        return cmd_verify()
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
