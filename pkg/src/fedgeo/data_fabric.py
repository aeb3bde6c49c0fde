"""Dataset ingestion, synthetic generation, partitioning, and perturbations.

Covers IDX file decoding, a class-conditional Gaussian-blob generator for
desk-scale runs, per-class Dirichlet partitioning across clients, stratified
probe-set selection, and the noise/rotation/blur pipeline used to construct
a shifted client. All randomness flows through explicit per-operation seeds.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

IDX_IMAGE_MAGIC = 0x00000803
IDX_LABEL_MAGIC = 0x00000801

PERTURBATION_KINDS = ("gaussian_noise", "rotation", "blur")

# Guard against pathological Dirichlet draws that keep producing empty shards.
_MAX_PARTITION_ATTEMPTS = 10000


class DataError(Exception):
    """Base class for dataset ingestion and partitioning failures."""


class IdxMagicError(DataError):
    """IDX file carries the wrong magic number."""


class IdxTruncatedError(DataError):
    """IDX file ends before the payload its header promises."""


class IdxCountMismatchError(DataError):
    """Image and label files disagree on the sample count."""


@dataclass
class Dataset:
    """Flattened images in [0,1] with integer class labels."""

    images: np.ndarray
    labels: np.ndarray
    n_classes: int

    @property
    def n_samples(self) -> int:
        return int(self.images.shape[0])


@dataclass
class PartitionConfig:
    n_clients: int
    alpha: float
    seed: int


@dataclass
class ClientShard:
    client_id: int
    sample_indices: np.ndarray


@dataclass
class PerturbationSpec:
    """One image corruption: kind, strength, and its private RNG seed.

    ``magnitude`` means the noise sigma, rotation degrees, or blur kernel
    sigma depending on ``kind``.
    """

    kind: str
    magnitude: float
    seed: int

    def __post_init__(self) -> None:
        if self.kind not in PERTURBATION_KINDS:
            raise ValueError(f"unknown perturbation kind {self.kind!r}")
        if self.magnitude <= 0.0:
            raise ValueError("perturbation magnitude must be > 0")


def _read_file(path: str | Path) -> bytes:
    try:
        return Path(path).read_bytes()
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc


def _read_idx_header(buf: bytes, path: str | Path, expected_magic: int, n_dims: int) -> tuple:
    header_len = 4 * (1 + n_dims)
    if len(buf) < header_len:
        raise IdxTruncatedError(f"{path}: truncated before the IDX header completed")
    fields = struct.unpack_from(f">{1 + n_dims}I", buf, 0)
    if fields[0] != expected_magic:
        raise IdxMagicError(
            f"{path}: wrong magic 0x{fields[0]:08x} (expected 0x{expected_magic:08x})"
        )
    return fields[1:]


def load_idx_dataset(images_path: str | Path, labels_path: str | Path) -> Dataset:
    """Decode big-endian IDX image/label files into a Dataset.

    Pixels are scaled to [0,1] by dividing by 255. Raises IdxMagicError,
    IdxTruncatedError, or IdxCountMismatchError for the respective defects.
    """
    img_buf = _read_file(images_path)
    n_images, rows, cols = _read_idx_header(img_buf, images_path, IDX_IMAGE_MAGIC, 3)
    pixel_count = n_images * rows * cols
    if len(img_buf) < 16 + pixel_count:
        raise IdxTruncatedError(f"{images_path}: truncated mid-pixels")
    pixels = np.frombuffer(img_buf, dtype=np.uint8, count=pixel_count, offset=16)

    lbl_buf = _read_file(labels_path)
    (n_labels,) = _read_idx_header(lbl_buf, labels_path, IDX_LABEL_MAGIC, 1)
    if len(lbl_buf) < 8 + n_labels:
        raise IdxTruncatedError(f"{labels_path}: truncated mid-labels")
    raw_labels = np.frombuffer(lbl_buf, dtype=np.uint8, count=n_labels, offset=8)

    if n_images != n_labels:
        raise IdxCountMismatchError(
            f"{images_path} holds {n_images} images but {labels_path} holds {n_labels} labels"
        )

    images = pixels.reshape(n_images, rows * cols).astype(np.float64) / 255.0
    labels = raw_labels.astype(np.int64)
    return Dataset(images=images, labels=labels, n_classes=int(labels.max()) + 1)


def synth_dataset(n: int, d: int, n_classes: int, seed: int) -> Dataset:
    """Class-conditional Gaussian blobs, deterministic in the seed.

    Per class a mean vector is drawn uniform in [0.2, 0.8]^d; samples are
    mean + 0.1 * standard normal noise clamped to [0,1]. Class counts are
    near-equal (first n % n_classes classes get one extra sample).
    """
    if n < n_classes:
        raise ValueError("need at least one sample per class")
    rng = np.random.default_rng(seed)
    means = rng.uniform(0.2, 0.8, size=(n_classes, d))
    counts = np.full(n_classes, n // n_classes)
    counts[: n % n_classes] += 1
    labels = np.repeat(np.arange(n_classes, dtype=np.int64), counts)
    images = np.clip(means[labels] + 0.1 * rng.standard_normal((n, d)), 0.0, 1.0)
    order = rng.permutation(n)
    return Dataset(images=images[order], labels=labels[order], n_classes=n_classes)


def dirichlet_partition(labels: np.ndarray, cfg: PartitionConfig) -> list[ClientShard]:
    """Split sample indices across clients with per-class Dirichlet draws.

    For each class a proportion vector p ~ Dirichlet(alpha * 1) is drawn and
    the class's indices are dealt to clients multinomially per p. Draws that
    leave any client empty are repaired by re-drawing with seed+1.
    """
    if cfg.alpha <= 0.0:
        raise ValueError("alpha must be > 0")
    if cfg.n_clients < 2:
        raise ValueError("need at least 2 clients")
    labels = np.asarray(labels)
    n = labels.size
    if cfg.n_clients > n:
        raise DataError(f"cannot give {cfg.n_clients} clients nonempty shards from {n} samples")

    classes = np.unique(labels)
    seed = cfg.seed
    for _ in range(_MAX_PARTITION_ATTEMPTS):
        rng = np.random.default_rng(seed)
        parts: list[list[np.ndarray]] = [[] for _ in range(cfg.n_clients)]
        for k in classes:
            idx = rng.permutation(np.flatnonzero(labels == k))
            proportions = rng.dirichlet(np.full(cfg.n_clients, cfg.alpha))
            counts = rng.multinomial(idx.size, proportions)
            for client, piece in enumerate(np.split(idx, np.cumsum(counts)[:-1])):
                parts[client].append(piece)
        shards = [
            ClientShard(client, np.sort(np.concatenate(pieces)))
            for client, pieces in enumerate(parts)
        ]
        if all(s.sample_indices.size > 0 for s in shards):
            return shards
        seed += 1
    raise DataError(
        f"no nonempty assignment found after {_MAX_PARTITION_ATTEMPTS} re-draws "
        f"(alpha={cfg.alpha}, n_clients={cfg.n_clients}, n={n})"
    )


def select_probe_set(dataset: Dataset, m: int, seed: int) -> Dataset:
    """Uniform class-stratified sample of m inputs, without replacement.

    Per-class targets differ by at most one; classes too small to meet their
    target hand the remainder to classes with spare samples.
    """
    n = dataset.n_samples
    if m > n:
        raise ValueError(f"probe size {m} exceeds dataset size {n}")
    if m < 1:
        raise ValueError("probe size must be >= 1")
    rng = np.random.default_rng(seed)
    k = dataset.n_classes
    class_indices = [rng.permutation(np.flatnonzero(dataset.labels == c)) for c in range(k)]
    available = np.array([ci.size for ci in class_indices])

    targets = np.full(k, m // k)
    targets[rng.permutation(k)[: m % k]] += 1
    targets = np.minimum(targets, available)
    deficit = m - int(targets.sum())
    refill_order = rng.permutation(k)
    while deficit > 0:
        for c in refill_order:
            if deficit == 0:
                break
            if targets[c] < available[c]:
                targets[c] += 1
                deficit -= 1

    chosen = np.concatenate([class_indices[c][: targets[c]] for c in range(k)])
    chosen = rng.permutation(chosen)
    return Dataset(
        images=dataset.images[chosen].copy(),
        labels=dataset.labels[chosen].copy(),
        n_classes=k,
    )


def apply_perturbations(
    shard_images: np.ndarray, specs: list[PerturbationSpec], side: int
) -> np.ndarray:
    """Apply the perturbation list in order to a [k x side*side] image block.

    gaussian_noise adds per-pixel N(0, sigma^2) then clamps to [0,1];
    rotation resamples bilinearly about the image center with zero fill;
    blur convolves with a separable Gaussian kernel (radius ceil(3*sigma),
    replicated edges). Output pixels always stay in [0,1].
    """
    shard_images = np.asarray(shard_images, dtype=np.float64)
    if shard_images.ndim != 2:
        raise ValueError("shard_images must be a [k x pixels] matrix")
    if shard_images.shape[1] != side * side:
        raise ValueError(f"row length {shard_images.shape[1]} is not {side}x{side}")
    imgs = shard_images.reshape(-1, side, side).copy()
    for spec in specs:
        if spec.kind == "gaussian_noise":
            rng = np.random.default_rng(spec.seed)
            imgs = np.clip(imgs + rng.normal(0.0, spec.magnitude, imgs.shape), 0.0, 1.0)
        elif spec.kind == "rotation":
            imgs = np.clip(_rotate_bilinear(imgs, spec.magnitude), 0.0, 1.0)
        elif spec.kind == "blur":
            imgs = np.clip(_gaussian_blur(imgs, spec.magnitude), 0.0, 1.0)
    return imgs.reshape(shard_images.shape)


def _rotate_bilinear(imgs: np.ndarray, degrees: float) -> np.ndarray:
    """Rotate each image about its center; out-of-bounds pixels read as 0."""
    side = imgs.shape[1]
    theta = math.radians(degrees)
    cos_t, sin_t = math.cos(theta), math.sin(theta)
    center = (side - 1) / 2.0

    rows, cols = np.meshgrid(np.arange(side), np.arange(side), indexing="ij")
    dr = rows - center
    dc = cols - center
    src_r = cos_t * dr + sin_t * dc + center
    src_c = -sin_t * dr + cos_t * dc + center

    r0 = np.floor(src_r).astype(np.int64)
    c0 = np.floor(src_c).astype(np.int64)
    fr = src_r - r0
    fc = src_c - c0

    out = np.zeros_like(imgs)
    for dr0, dc0, w in (
        (0, 0, (1 - fr) * (1 - fc)),
        (0, 1, (1 - fr) * fc),
        (1, 0, fr * (1 - fc)),
        (1, 1, fr * fc),
    ):
        rr = r0 + dr0
        cc = c0 + dc0
        inside = (rr >= 0) & (rr < side) & (cc >= 0) & (cc < side)
        vals = imgs[:, np.clip(rr, 0, side - 1), np.clip(cc, 0, side - 1)]
        out += (w * inside) * vals
    return out


def _gaussian_kernel(sigma: float) -> np.ndarray:
    radius = math.ceil(3.0 * sigma)
    offsets = np.arange(-radius, radius + 1, dtype=np.float64)
    kernel = np.exp(-(offsets**2) / (2.0 * sigma * sigma))
    return kernel / kernel.sum()


def _gaussian_blur(imgs: np.ndarray, sigma: float) -> np.ndarray:
    """Separable Gaussian filter; coordinates clamp at the borders."""
    kernel = _gaussian_kernel(sigma)
    radius = kernel.size // 2
    side = imgs.shape[1]
    for axis in (1, 2):
        acc = np.zeros_like(imgs)
        for tap, weight in enumerate(kernel):
            idx = np.clip(np.arange(side) + tap - radius, 0, side - 1)
            acc += weight * np.take(imgs, idx, axis=axis)
        imgs = acc
    return imgs
