"""Federated training loop with per-round divergence monitoring.

Each round: every participating client trains a copy of the current global
model on its shard, the activation-geometry divergence of each client model
against that same pre-aggregation global model is measured on the fixed
probe set, robust z-scores are computed, and FedAvg aggregates all
participants (flagged clients included -- this is a monitor, not a filter).
"""

from __future__ import annotations

import hashlib
import json
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import TYPE_CHECKING, Callable, TextIO

import numpy as np

from .anomaly import RoundScores, robust_scores
from .data_fabric import (
    ClientShard,
    DataError,
    Dataset,
    PartitionConfig,
    apply_perturbations,
    dirichlet_partition,
    load_idx_dataset,
    select_probe_set,
    synth_dataset,
)
from .geometry import (
    AffinityMatrix,
    DivergenceConfig,
    divergence_from_affinities,
    model_affinities,
)
from .nn_core import (
    MlpModel,
    NumericError,
    SgdState,
    forward,
    init_model,
    loss_and_gradients,
    same_architecture,
    save_model,
    sgd_step,
)
from .seeds import (
    STREAM_MODEL_INIT,
    STREAM_PARTICIPATION,
    STREAM_PARTITION,
    STREAM_PROBE,
    STREAM_ROUND,
    STREAM_SPLIT,
    STREAM_SYNTH,
    derive_seed,
)

if TYPE_CHECKING:
    from .config import SimConfig

CSV_HEADER = "round,client_id,n_samples,divergence,zscore,local_loss,is_shifted,median,mad,probe_accuracy"


@dataclass
class FedConfig:
    n_rounds: int
    n_clients: int
    local_epochs: int = 1
    batch_size: int = 64
    learning_rate: float = 0.05
    momentum: float = 0.9
    client_fraction: float = 1.0


@dataclass
class LocalTrainResult:
    model: MlpModel
    mean_loss: float


@dataclass
class ClientRound:
    client_id: int
    n_samples: int
    divergence: float
    zscore: float
    local_loss: float
    is_shifted: bool


@dataclass
class RoundRecord:
    round_index: int
    clients: list[ClientRound]
    median: float
    mad: float
    probe_accuracy: float
    eval_accuracy: float


@dataclass
class SimState:
    global_model: MlpModel
    shards: list[ClientShard]
    client_datasets: list[Dataset]
    client_shards: list[ClientShard]
    probe: Dataset
    eval_set: Dataset
    fed: FedConfig
    divergence: DivergenceConfig
    epsilon: float
    z_threshold: float
    shifted_client: int | None
    master_seed: int
    threads: int = 1
    probe_sha: str = ""


def accuracy(model: MlpModel, images: np.ndarray, labels: np.ndarray) -> float:
    predictions = forward(model, images).output.argmax(axis=1)
    return float(np.mean(predictions == labels))


def round_seed(master_seed: int, round_index: int) -> int:
    """Seed for one round's batch shuffles, deterministic in (master, round)."""
    return derive_seed(master_seed, STREAM_ROUND, round_index)


def local_train(
    global_model: MlpModel,
    shard: ClientShard,
    dataset: Dataset,
    cfg: FedConfig,
    round_seed: int,
) -> LocalTrainResult:
    """Train a copy of the global model on one client's shard.

    Momentum starts fresh every round (clients are stateless between
    rounds); mini-batch order is deterministic in (round_seed, client_id).
    Returns the trained model and the mean mini-batch loss over the pass.
    """
    indices = shard.sample_indices
    if indices.size == 0:
        raise ValueError(f"client {shard.client_id}: empty shard")
    model = global_model.copy()
    state = SgdState.for_model(model, cfg.learning_rate, cfg.momentum)
    rng = np.random.default_rng((round_seed, shard.client_id))
    losses = []
    for _ in range(cfg.local_epochs):
        order = rng.permutation(indices.size)
        shuffled = indices[order]
        for start in range(0, shuffled.size, cfg.batch_size):
            batch = shuffled[start : start + cfg.batch_size]
            loss, grads = loss_and_gradients(
                model, dataset.images[batch], dataset.labels[batch]
            )
            sgd_step(model, grads, state)
            losses.append(loss)
    return LocalTrainResult(model=model, mean_loss=float(np.mean(losses)))


def fedavg(client_models: list[MlpModel], sample_counts: list[int]) -> MlpModel:
    """Parameter-wise mean of client models weighted by sample counts."""
    if not client_models or len(client_models) != len(sample_counts):
        raise ValueError("need one positive sample count per client model")
    if any(c <= 0 for c in sample_counts):
        raise ValueError("sample counts must be positive")
    first = client_models[0]
    for m in client_models[1:]:
        if not same_architecture(first, m):
            raise ValueError("client models must share one architecture")
    weights = np.asarray(sample_counts, dtype=np.float64)
    weights /= weights.sum()
    merged = [np.zeros_like(w) for w in first.weights]
    merged_b = [np.zeros_like(b) for b in first.biases]
    for w_c, model in zip(weights, client_models):
        for l in range(first.n_layers):
            merged[l] += w_c * model.weights[l]
            merged_b[l] += w_c * model.biases[l]
    return MlpModel(merged, merged_b)


def _participants(state: SimState, round_index: int) -> list[int]:
    n = state.fed.n_clients
    if state.fed.client_fraction >= 1.0:
        return list(range(n))
    k = max(1, int(round(state.fed.client_fraction * n)))
    rng = np.random.default_rng(derive_seed(state.master_seed, STREAM_PARTICIPATION, round_index))
    return sorted(int(c) for c in rng.choice(n, size=k, replace=False))


def _map_clients(state: SimState, fn: Callable[[int], object], clients: list[int]) -> list:
    if state.threads > 1:
        with ThreadPoolExecutor(max_workers=state.threads) as pool:
            return list(pool.map(fn, clients))
    return [fn(c) for c in clients]


def run_round(state: SimState, round_index: int) -> tuple[MlpModel, RoundRecord]:
    """One communication round; returns the aggregated model and the record.

    Order contract: clients train from the current global model; divergence
    and z-scores are measured against that same pre-aggregation model; only
    then does FedAvg produce the next global model, over all participants.
    """
    participants = _participants(state, round_index)
    seed = round_seed(state.master_seed, round_index)

    def train_one(c: int) -> LocalTrainResult:
        return local_train(
            state.global_model,
            state.client_shards[c],
            state.client_datasets[c],
            state.fed,
            seed,
        )

    results: list[LocalTrainResult] = _map_clients(state, train_one, participants)

    global_affinities = model_affinities(state.global_model, state.probe.images)

    def diverge_one(idx: int) -> float:
        client_aff = model_affinities(results[idx].model, state.probe.images)
        return divergence_from_affinities(global_affinities, client_aff, state.divergence)

    divergences = np.array(
        _map_clients(state, diverge_one, list(range(len(participants)))), dtype=np.float64
    )
    if not np.isfinite(divergences).all():
        raise NumericError(f"round {round_index}: non-finite divergence")

    scores = robust_scores(divergences, state.epsilon, round_index)
    counts = [int(state.shards[c].sample_indices.size) for c in participants]
    new_global = fedavg([r.model for r in results], counts)

    probe_acc = accuracy(state.global_model, state.probe.images, state.probe.labels)
    eval_acc = accuracy(state.global_model, state.eval_set.images, state.eval_set.labels)
    clients = [
        ClientRound(
            client_id=c,
            n_samples=counts[i],
            divergence=float(divergences[i]),
            zscore=float(scores.zscores[i]),
            local_loss=results[i].mean_loss,
            is_shifted=(c == state.shifted_client),
        )
        for i, c in enumerate(participants)
    ]
    record = RoundRecord(
        round_index=round_index,
        clients=clients,
        median=scores.median,
        mad=scores.mad,
        probe_accuracy=probe_acc,
        eval_accuracy=eval_acc,
    )
    return new_global, record


def _split_holdout(dataset: Dataset, fraction: float, seed: int) -> tuple[Dataset, Dataset]:
    n_hold = max(1, int(round(dataset.n_samples * fraction)))
    order = np.random.default_rng(seed).permutation(dataset.n_samples)
    hold, train = order[:n_hold], order[n_hold:]
    take = lambda idx: Dataset(
        images=dataset.images[idx].copy(),
        labels=dataset.labels[idx].copy(),
        n_classes=dataset.n_classes,
    )
    return take(train), take(hold)


def _image_side(d: int) -> int:
    side = math.isqrt(d)
    if side * side != d:
        raise DataError(f"images with {d} pixels are not square; cannot perturb")
    return side


def build_state(cfg: "SimConfig", threads: int = 1) -> SimState:
    """Materialize data, partition, probe, and the initial global model."""
    master = cfg.master_seed
    if cfg.data.source == "synth":
        full = synth_dataset(
            cfg.data.n, cfg.data.d, cfg.data.n_classes, derive_seed(master, STREAM_SYNTH)
        )
        train, holdout = _split_holdout(
            full, cfg.data.holdout_fraction, derive_seed(master, STREAM_SPLIT)
        )
    else:
        train = load_idx_dataset(cfg.data.images, cfg.data.labels)
        if cfg.data.test_images is not None:
            holdout = load_idx_dataset(cfg.data.test_images, cfg.data.test_labels)
            n_classes = max(train.n_classes, holdout.n_classes)
            train.n_classes = holdout.n_classes = n_classes
        else:
            train, holdout = _split_holdout(
                train, cfg.data.holdout_fraction, derive_seed(master, STREAM_SPLIT)
            )
    if cfg.probe_size > holdout.n_samples:
        raise DataError(
            f"probe.size {cfg.probe_size} exceeds the holdout ({holdout.n_samples} samples)"
        )

    shards = dirichlet_partition(
        train.labels,
        PartitionConfig(
            n_clients=cfg.n_clients, alpha=cfg.alpha, seed=derive_seed(master, STREAM_PARTITION)
        ),
    )
    probe = select_probe_set(holdout, cfg.probe_size, derive_seed(master, STREAM_PROBE))

    client_datasets = [train] * cfg.n_clients
    client_shards = list(shards)
    shifted_client = None
    if cfg.shifted is not None:
        shifted_client = cfg.shifted.client
        idx = shards[shifted_client].sample_indices
        side = _image_side(train.images.shape[1])
        perturbed = apply_perturbations(train.images[idx], cfg.shifted.perturbations, side)
        client_datasets[shifted_client] = Dataset(
            images=perturbed, labels=train.labels[idx].copy(), n_classes=train.n_classes
        )
        client_shards[shifted_client] = ClientShard(
            client_id=shifted_client, sample_indices=np.arange(idx.size, dtype=np.int64)
        )

    d = train.images.shape[1]
    model = init_model([d, *cfg.hidden, train.n_classes], derive_seed(master, STREAM_MODEL_INIT))
    probe_sha = hashlib.sha256(probe.images.tobytes() + probe.labels.tobytes()).hexdigest()
    return SimState(
        global_model=model,
        shards=shards,
        client_datasets=client_datasets,
        client_shards=client_shards,
        probe=probe,
        eval_set=holdout,
        fed=cfg.fed,
        divergence=cfg.divergence,
        epsilon=cfg.epsilon,
        z_threshold=cfg.z_threshold,
        shifted_client=shifted_client,
        master_seed=master,
        threads=threads,
        probe_sha=probe_sha,
    )


def _fmt(x: float) -> str:
    return format(float(x), ".17g")


def _write_round_rows(f: TextIO, record: RoundRecord) -> None:
    for c in record.clients:
        f.write(
            f"{record.round_index},{c.client_id},{c.n_samples},{_fmt(c.divergence)},"
            f"{_fmt(c.zscore)},{_fmt(c.local_loss)},{int(c.is_shifted)},"
            f"{_fmt(record.median)},{_fmt(record.mad)},{_fmt(record.probe_accuracy)}\n"
        )


def _dump_affinities(
    out_dir: Path, tag: str, round_index: int, affinities: list[AffinityMatrix]
) -> None:
    for l, aff in enumerate(affinities):
        path = out_dir / f"affinity_{tag}_round{round_index}_layer{l}.csv"
        np.savetxt(path, aff.values, delimiter=",")


def summarize(
    cfg: "SimConfig", state: SimState, records: list[RoundRecord], timings: dict
) -> dict:
    """Run summary: config echo, trajectories, and detection statistics."""
    divergence_traj: dict[str, list[float]] = {}
    zscore_traj: dict[str, list[float]] = {}
    for record in records:
        for c in record.clients:
            divergence_traj.setdefault(str(c.client_id), []).append(c.divergence)
            zscore_traj.setdefault(str(c.client_id), []).append(c.zscore)
    max_z_per_round = [
        max(r.clients, key=lambda c: c.zscore).client_id if r.clients else None for r in records
    ]
    n_rounds = max(1, len(records))
    max_z_fraction = {
        str(c): sum(1 for m in max_z_per_round if m == c) / n_rounds
        for c in range(cfg.n_clients)
    }
    flagged = []
    for r in records:
        over = sorted((c for c in r.clients if c.zscore > state.z_threshold), key=lambda c: -c.zscore)
        flagged.append([c.client_id for c in over])
    return {
        "config": cfg.echo(),
        "architecture": state.global_model.layer_sizes,
        "probe_sha256": state.probe_sha,
        "clients": {
            str(s.client_id): {
                "n_samples": int(s.sample_indices.size),
                "is_shifted": s.client_id == state.shifted_client,
            }
            for s in state.shards
        },
        "divergence_trajectories": divergence_traj,
        "zscore_trajectories": zscore_traj,
        "median": [r.median for r in records],
        "mad": [r.mad for r in records],
        "probe_accuracy": [r.probe_accuracy for r in records],
        "eval_accuracy": [r.eval_accuracy for r in records],
        "max_z_client_per_round": max_z_per_round,
        "max_z_fraction": max_z_fraction,
        "flagged_per_round": flagged,
        "timings": timings,
    }


def run_experiment(
    cfg: "SimConfig",
    out_dir: str | Path | None = None,
    threads: int = 1,
    dump_affinity: tuple[int, int] | None = None,
) -> list[RoundRecord]:
    """Run the full simulation, writing rounds.csv incrementally plus summary.json.

    Deterministic in the master seed: identical configs produce byte-identical
    CSVs. Raises NumericError if any parameter or divergence becomes NaN.
    """
    started = time.perf_counter()
    state = build_state(cfg, threads=threads)
    out = Path(out_dir) if out_dir is not None else Path(cfg.output.dir)
    out.mkdir(parents=True, exist_ok=True)

    records: list[RoundRecord] = []
    round_times: list[float] = []
    expected_sha = state.probe_sha
    with open(out / "rounds.csv", "w", newline="") as f:
        f.write(CSV_HEADER + "\n")
        for t in range(cfg.fed.n_rounds):
            tick = time.perf_counter()
            sha = hashlib.sha256(
                state.probe.images.tobytes() + state.probe.labels.tobytes()
            ).hexdigest()
            if sha != expected_sha:
                raise NumericError(f"round {t}: probe set changed mid-run")
            if cfg.output.save_round_checkpoints:
                save_model(state.global_model, out / f"global_round_{t:04d}.bin")
            if dump_affinity is not None and dump_affinity[0] == t:
                _dump_affinities(
                    out, "global", t, model_affinities(state.global_model, state.probe.images)
                )
            new_global, record = run_round(state, t)
            if dump_affinity is not None and dump_affinity[0] == t:
                c = dump_affinity[1]
                retrained = local_train(
                    state.global_model,
                    state.client_shards[c],
                    state.client_datasets[c],
                    state.fed,
                    round_seed(state.master_seed, t),
                )
                _dump_affinities(
                    out, f"client{c}", t, model_affinities(retrained.model, state.probe.images)
                )
            state.global_model = new_global
            records.append(record)
            _write_round_rows(f, record)
            f.flush()
            round_times.append(time.perf_counter() - tick)

    timings = {
        "total_seconds": time.perf_counter() - started,
        "mean_round_seconds": float(np.mean(round_times)) if round_times else 0.0,
    }
    summary = summarize(cfg, state, records, timings)
    with open(out / "summary.json", "w") as f:
        json.dump(summary, f, indent=2, sort_keys=True)
        f.write("\n")
    return records
