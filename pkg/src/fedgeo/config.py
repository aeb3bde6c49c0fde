"""Experiment configuration: TOML loading, validation, and echoing.

The config file uses flat sections ([data], [partition], [probe], [model],
[fed], [divergence], [anomaly], [shifted], [output]) plus a top-level
master_seed. Unknown sections or keys are errors; every effective value,
defaults included, is echoed into the run summary.
"""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .data_fabric import PERTURBATION_KINDS, PerturbationSpec
from .fed_sim import FedConfig
from .geometry import DivergenceConfig
from .seeds import STREAM_PERTURB, derive_seed


class ConfigError(Exception):
    """The config file is unreadable, malformed, or fails validation."""


_SCHEMA: dict[str, set[str]] = {
    "": {"master_seed"},
    "data": {
        "source",
        "images",
        "labels",
        "test_images",
        "test_labels",
        "n",
        "d",
        "n_classes",
        "holdout_fraction",
    },
    "partition": {"alpha", "n_clients"},
    "probe": {"size"},
    "model": {"hidden"},
    "fed": {
        "n_rounds",
        "local_epochs",
        "batch_size",
        "learning_rate",
        "momentum",
        "client_fraction",
    },
    "divergence": {"beta"},
    "anomaly": {"epsilon", "z_threshold"},
    "shifted": {"client", "perturbations"},
    "output": {"dir", "save_round_checkpoints"},
}

DEFAULT_SHIFTED_PERTURBATIONS = (
    ("gaussian_noise", 0.3),
    ("rotation", 25.0),
    ("blur", 1.0),
)


@dataclass
class DataConfig:
    source: str
    images: str | None = None
    labels: str | None = None
    test_images: str | None = None
    test_labels: str | None = None
    n: int = 4000
    d: int = 64
    n_classes: int = 10
    holdout_fraction: float = 0.2


@dataclass
class ShiftedConfig:
    client: int
    perturbations: list[PerturbationSpec]


@dataclass
class OutputConfig:
    dir: str = "out"
    save_round_checkpoints: bool = False


@dataclass
class SimConfig:
    master_seed: int
    data: DataConfig
    alpha: float
    n_clients: int
    probe_size: int
    hidden: list[int]
    fed: FedConfig
    divergence: DivergenceConfig
    epsilon: float
    z_threshold: float
    shifted: ShiftedConfig | None
    output: OutputConfig

    def echo(self) -> dict[str, Any]:
        """Fully resolved config, defaults included, as a JSON-ready dict."""
        out: dict[str, Any] = {
            "master_seed": self.master_seed,
            "data": {
                "source": self.data.source,
                "holdout_fraction": self.data.holdout_fraction,
            },
            "partition": {"alpha": self.alpha, "n_clients": self.n_clients},
            "probe": {"size": self.probe_size},
            "model": {"hidden": list(self.hidden)},
            "fed": {
                "n_rounds": self.fed.n_rounds,
                "local_epochs": self.fed.local_epochs,
                "batch_size": self.fed.batch_size,
                "learning_rate": self.fed.learning_rate,
                "momentum": self.fed.momentum,
                "client_fraction": self.fed.client_fraction,
            },
            "divergence": {"beta": self.divergence.beta},
            "anomaly": {"epsilon": self.epsilon, "z_threshold": self.z_threshold},
            "output": {
                "dir": self.output.dir,
                "save_round_checkpoints": self.output.save_round_checkpoints,
            },
        }
        if self.data.source == "idx":
            out["data"].update(
                images=self.data.images,
                labels=self.data.labels,
                test_images=self.data.test_images,
                test_labels=self.data.test_labels,
            )
        else:
            out["data"].update(n=self.data.n, d=self.data.d, n_classes=self.data.n_classes)
        if self.shifted is not None:
            out["shifted"] = {
                "client": self.shifted.client,
                "perturbations": [
                    {"kind": p.kind, "magnitude": p.magnitude, "seed": p.seed}
                    for p in self.shifted.perturbations
                ],
            }
        return out


def load_raw(path: str | Path) -> dict[str, Any]:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        with open(path, "rb") as f:
            return tomllib.load(f)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc


def load_config(path: str | Path) -> SimConfig:
    return build_config(load_raw(path), base_dir=Path(path).parent)


def set_scalar(raw: dict[str, Any], dotted_key: str, value: Any) -> None:
    """Assign one scalar config field addressed as section.key (for sweeps)."""
    parts = dotted_key.split(".")
    if len(parts) == 1:
        section, key = "", parts[0]
    elif len(parts) == 2:
        section, key = parts
    else:
        raise ConfigError(f"key {dotted_key!r} is too deep; use section.key")
    if section not in _SCHEMA or key not in _SCHEMA[section]:
        raise ConfigError(f"unknown config key {dotted_key!r}")
    target = raw if section == "" else raw.setdefault(section, {})
    if not isinstance(target, dict):
        raise ConfigError(f"section [{section}] must be a table")
    if isinstance(target.get(key), (list, dict)):
        raise ConfigError(f"{dotted_key} is not a scalar field")
    target[key] = value


def _check_unknown_keys(raw: dict[str, Any]) -> None:
    for key, value in raw.items():
        if isinstance(value, dict):
            if key not in _SCHEMA or key == "":
                raise ConfigError(f"unknown config section [{key}]")
            for sub in value:
                if sub not in _SCHEMA[key]:
                    raise ConfigError(f"unknown config key {key}.{sub}")
        elif key not in _SCHEMA[""]:
            raise ConfigError(f"unknown top-level config key {key!r}")


def _get(
    raw: dict[str, Any],
    section: str,
    key: str,
    kinds: tuple[type, ...],
    default: Any,
    kind_name: str,
) -> Any:
    table = raw.get(section, {}) if section else raw
    if not isinstance(table, dict):
        raise ConfigError(f"section [{section}] must be a table")
    value = table.get(key, default)
    if value is None:
        return None
    if isinstance(value, bool) and bool not in kinds:
        raise ConfigError(f"{section + '.' if section else ''}{key} must be {kind_name}")
    if not isinstance(value, kinds):
        raise ConfigError(f"{section + '.' if section else ''}{key} must be {kind_name}")
    return value


def _get_int(raw, section, key, default):
    return _get(raw, section, key, (int,), default, "an integer")


def _get_float(raw, section, key, default):
    value = _get(raw, section, key, (int, float), default, "a number")
    return None if value is None else float(value)


def _get_str(raw, section, key, default):
    return _get(raw, section, key, (str,), default, "a string")


def _get_bool(raw, section, key, default):
    return _get(raw, section, key, (bool,), default, "a boolean")


def _build_perturbations(
    entries: Any, master_seed: int, n_clients: int
) -> list[PerturbationSpec]:
    if entries is None:
        entries = [
            {"kind": kind, "magnitude": magnitude}
            for kind, magnitude in DEFAULT_SHIFTED_PERTURBATIONS
        ]
    if not isinstance(entries, list) or not entries:
        raise ConfigError("shifted.perturbations must be a nonempty array of tables")
    specs = []
    for i, entry in enumerate(entries):
        if not isinstance(entry, dict):
            raise ConfigError(f"shifted.perturbations[{i}] must be a table")
        unknown = set(entry) - {"kind", "magnitude", "seed"}
        if unknown:
            raise ConfigError(f"shifted.perturbations[{i}]: unknown key {unknown.pop()!r}")
        kind = entry.get("kind")
        if kind not in PERTURBATION_KINDS:
            raise ConfigError(
                f"shifted.perturbations[{i}].kind must be one of {PERTURBATION_KINDS}"
            )
        magnitude = entry.get("magnitude")
        if not isinstance(magnitude, (int, float)) or isinstance(magnitude, bool) or magnitude <= 0:
            raise ConfigError(f"shifted.perturbations[{i}].magnitude must be > 0")
        seed = entry.get("seed", derive_seed(master_seed, STREAM_PERTURB, i))
        if not isinstance(seed, int) or isinstance(seed, bool) or seed < 0:
            raise ConfigError(f"shifted.perturbations[{i}].seed must be a non-negative integer")
        specs.append(PerturbationSpec(kind=kind, magnitude=float(magnitude), seed=seed))
    return specs


def build_config(raw: dict[str, Any], base_dir: Path | None = None) -> SimConfig:
    """Validate a parsed config dict into a SimConfig, applying defaults."""
    raw = copy.deepcopy(raw)
    _check_unknown_keys(raw)
    base_dir = Path(base_dir) if base_dir is not None else Path(".")

    master_seed = _get_int(raw, "", "master_seed", 0)
    if master_seed < 0:
        raise ConfigError("master_seed must be >= 0")

    source = _get_str(raw, "data", "source", None)
    if source not in ("synth", "idx"):
        raise ConfigError("data.source must be 'synth' or 'idx'")
    holdout_fraction = _get_float(raw, "data", "holdout_fraction", 0.2)
    if not 0.0 < holdout_fraction < 1.0:
        raise ConfigError("data.holdout_fraction must lie in (0, 1)")

    def resolve(p: str | None) -> str | None:
        if p is None:
            return None
        path = Path(p)
        return str(path if path.is_absolute() else base_dir / path)

    data = DataConfig(
        source=source,
        images=resolve(_get_str(raw, "data", "images", None)),
        labels=resolve(_get_str(raw, "data", "labels", None)),
        test_images=resolve(_get_str(raw, "data", "test_images", None)),
        test_labels=resolve(_get_str(raw, "data", "test_labels", None)),
        n=_get_int(raw, "data", "n", 4000),
        d=_get_int(raw, "data", "d", 64),
        n_classes=_get_int(raw, "data", "n_classes", 10),
        holdout_fraction=holdout_fraction,
    )
    if source == "idx":
        if data.images is None or data.labels is None:
            raise ConfigError("data.images and data.labels are required when data.source = 'idx'")
        if (data.test_images is None) != (data.test_labels is None):
            raise ConfigError("data.test_images and data.test_labels must be given together")
    else:
        if data.n < 1 or data.d < 1 or data.n_classes < 2:
            raise ConfigError("data.n, data.d must be >= 1 and data.n_classes >= 2")
        if data.n < data.n_classes:
            raise ConfigError("data.n must be at least data.n_classes")

    alpha = _get_float(raw, "partition", "alpha", 1.0)
    if alpha <= 0.0:
        raise ConfigError("partition.alpha must be > 0")
    n_clients = _get_int(raw, "partition", "n_clients", 10)
    if n_clients < 2:
        raise ConfigError("partition.n_clients must be >= 2")

    probe_size = _get_int(raw, "probe", "size", 128)
    if probe_size < 1:
        raise ConfigError("probe.size must be >= 1")

    hidden = _get(raw, "model", "hidden", (list,), [128], "an array of integers")
    if not hidden or not all(isinstance(h, int) and not isinstance(h, bool) and h >= 1 for h in hidden):
        raise ConfigError("model.hidden must be a nonempty array of integers >= 1")

    n_rounds = _get_int(raw, "fed", "n_rounds", 30)
    if n_rounds < 1:
        raise ConfigError("fed.n_rounds must be >= 1")
    local_epochs = _get_int(raw, "fed", "local_epochs", 1)
    if local_epochs < 1:
        raise ConfigError("fed.local_epochs must be >= 1")
    batch_size = _get_int(raw, "fed", "batch_size", 64)
    if batch_size < 1:
        raise ConfigError("fed.batch_size must be >= 1")
    learning_rate = _get_float(raw, "fed", "learning_rate", 0.05)
    if learning_rate < 0.0:
        raise ConfigError("fed.learning_rate must be >= 0")
    momentum = _get_float(raw, "fed", "momentum", 0.9)
    if not 0.0 <= momentum < 1.0:
        raise ConfigError("fed.momentum must lie in [0, 1)")
    client_fraction = _get_float(raw, "fed", "client_fraction", 1.0)
    if not 0.0 < client_fraction <= 1.0:
        raise ConfigError("fed.client_fraction must lie in (0, 1]")
    fed = FedConfig(
        n_rounds=n_rounds,
        n_clients=n_clients,
        local_epochs=local_epochs,
        batch_size=batch_size,
        learning_rate=learning_rate,
        momentum=momentum,
        client_fraction=client_fraction,
    )

    beta = _get_float(raw, "divergence", "beta", 1.0)
    if beta <= 0.0:
        raise ConfigError("divergence.beta must be > 0")

    epsilon = _get_float(raw, "anomaly", "epsilon", 1e-8)
    if epsilon <= 0.0:
        raise ConfigError("anomaly.epsilon must be > 0")
    z_threshold = _get_float(raw, "anomaly", "z_threshold", 3.5)
    if z_threshold <= 0.0:
        raise ConfigError("anomaly.z_threshold must be > 0")

    shifted = None
    if "shifted" in raw:
        client = _get_int(raw, "shifted", "client", None)
        if client is None or not 0 <= client < n_clients:
            raise ConfigError("shifted.client must name a client in [0, partition.n_clients)")
        shifted = ShiftedConfig(
            client=client,
            perturbations=_build_perturbations(
                raw.get("shifted", {}).get("perturbations"), master_seed, n_clients
            ),
        )
        if source == "synth" and math.isqrt(data.d) ** 2 != data.d:
            raise ConfigError("data.d must be a perfect square to perturb a shifted client")

    output = OutputConfig(
        dir=str(_get_str(raw, "output", "dir", "out")),
        save_round_checkpoints=_get_bool(raw, "output", "save_round_checkpoints", False),
    )

    if source == "synth" and probe_size > int(data.n * holdout_fraction):
        raise ConfigError(
            "probe.size exceeds the synthetic holdout "
            f"({int(data.n * holdout_fraction)} samples); raise data.n or data.holdout_fraction"
        )

    return SimConfig(
        master_seed=master_seed,
        data=data,
        alpha=alpha,
        n_clients=n_clients,
        probe_size=probe_size,
        hidden=[int(h) for h in hidden],
        fed=fed,
        divergence=DivergenceConfig(beta=beta),
        epsilon=epsilon,
        z_threshold=z_threshold,
        shifted=shifted,
        output=output,
    )
