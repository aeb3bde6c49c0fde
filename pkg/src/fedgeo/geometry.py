"""Activation-geometry divergence between two models over a shared probe set.

Pipeline: binary activation patterns at every hidden ReLU layer, pairwise
activation-affinity matrices (1 minus normalized Hamming distance between
pattern rows), Frobenius distances between the two models' affinity
matrices, and a hierarchical sum that exponentially damps deeper layers by
agreement at earlier ones. The result is invariant under any consistent
within-layer neuron permutation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .nn_core import MlpModel, forward, same_architecture

_HAS_BITWISE_COUNT = hasattr(np, "bitwise_count")
# Byte-level popcount fallback for numpy < 2.0.
_POPCOUNT8 = np.array([bin(v).count("1") for v in range(256)], dtype=np.uint8)


@dataclass
class ActivationPatternSet:
    """Per hidden layer, the [probe x width] matrix of ReLU on/off bits."""

    per_layer: list[np.ndarray]

    @property
    def layer_count(self) -> int:
        return len(self.per_layer)


@dataclass
class AffinityMatrix:
    """Pairwise probe affinities at one layer; entries quantized to 1/width."""

    values: np.ndarray
    layer_width: int


@dataclass
class DivergenceConfig:
    """Hyperparameters of the hierarchical divergence."""

    beta: float = 1.0
    includes_output_layer: bool = False

    def __post_init__(self) -> None:
        if self.beta <= 0.0:
            raise ValueError("beta must be > 0")
        if self.includes_output_layer:
            raise ValueError("the output layer has no ReLU pattern and cannot contribute")


@dataclass
class LayerDistances:
    """Frobenius distances per hidden layer and their decay factors."""

    d: list[float]
    lam: list[float]


def extract_patterns(model: MlpModel, probe: np.ndarray) -> ActivationPatternSet:
    """Activation patterns of every hidden layer on the probe inputs.

    A bit is 1 iff the pre-activation is strictly positive; exact zeros map
    to 0. The output layer is excluded.
    """
    trace = forward(model, probe)
    return ActivationPatternSet([z > 0.0 for z in trace.preactivations[:-1]])


def _pack_rows(patterns: np.ndarray) -> np.ndarray:
    """Pack pattern rows into uint64 words (zero-padded on the right)."""
    packed = np.packbits(patterns, axis=1)
    pad = (-packed.shape[1]) % 8
    if pad:
        packed = np.pad(packed, ((0, 0), (0, pad)))
    return packed.view(np.uint64)


def hamming_matrix(patterns: np.ndarray) -> np.ndarray:
    """All pairwise row Hamming distances via packed words and popcount."""
    patterns = np.asarray(patterns).astype(bool)
    words = _pack_rows(patterns)
    xor = words[:, None, :] ^ words[None, :, :]
    if _HAS_BITWISE_COUNT:
        return np.bitwise_count(xor).sum(axis=2, dtype=np.int64)
    return _POPCOUNT8[xor.view(np.uint8)].sum(axis=2, dtype=np.int64)


def hamming_matrix_naive(patterns: np.ndarray) -> np.ndarray:
    """Reference double loop over row pairs; kept as the testing oracle."""
    patterns = np.asarray(patterns).astype(bool)
    m = patterns.shape[0]
    out = np.zeros((m, m), dtype=np.int64)
    for i in range(m):
        for j in range(m):
            out[i, j] = int(np.sum(patterns[i] != patterns[j]))
    return out


def affinity_matrix(patterns: np.ndarray) -> AffinityMatrix:
    """Activation affinity K(i,j) = 1 - Hamming(row_i, row_j) / width."""
    patterns = np.asarray(patterns).astype(bool)
    m, width = patterns.shape
    if m < 1 or width < 1:
        raise ValueError("patterns must be a nonempty [probe x width] matrix")
    distances = hamming_matrix(patterns)
    return AffinityMatrix(values=(width - distances) / width, layer_width=width)


def layer_distance(ka: AffinityMatrix, kb: AffinityMatrix) -> float:
    """Frobenius norm of the affinity difference, un-normalized."""
    if ka.values.shape != kb.values.shape:
        raise ValueError("affinity matrices must share the probe size")
    if ka.layer_width != kb.layer_width:
        raise ValueError("affinity matrices must come from layers of equal width")
    diff = ka.values - kb.values
    return float(math.sqrt(float((diff * diff).sum())))


def layer_distances(
    ka_list: list[AffinityMatrix], kb_list: list[AffinityMatrix], cfg: DivergenceConfig
) -> LayerDistances:
    if len(ka_list) != len(kb_list) or not ka_list:
        raise ValueError("need matching, nonempty affinity lists")
    d = [layer_distance(ka, kb) for ka, kb in zip(ka_list, kb_list)]
    lam = [math.exp(-cfg.beta * dl) for dl in d]
    return LayerDistances(d=d, lam=lam)


def hierarchical_divergence(dist: LayerDistances, cfg: DivergenceConfig) -> float:
    """Depth-damped sum: d_1 + sum_l (prod_{r<l} lambda_r) * d_l.

    Deeper layers only contribute in proportion to how well all earlier
    layers already agree; the result is 0 iff every layer distance is 0.
    """
    if not dist.d:
        raise ValueError("need at least one layer distance")
    if len(dist.lam) != len(dist.d):
        raise ValueError("lambda list must match the distance list")
    total = 0.0
    damping = 1.0
    for dl, lam in zip(dist.d, dist.lam):
        total += damping * dl
        damping *= lam
    return total


def model_affinities(model: MlpModel, probe: np.ndarray) -> list[AffinityMatrix]:
    """Affinity matrices of every hidden layer; computed once, reusable."""
    return [affinity_matrix(p) for p in extract_patterns(model, probe).per_layer]


def divergence_from_affinities(
    ka_list: list[AffinityMatrix], kb_list: list[AffinityMatrix], cfg: DivergenceConfig
) -> float:
    return hierarchical_divergence(layer_distances(ka_list, kb_list, cfg), cfg)


def client_divergence(
    global_model: MlpModel,
    client_model: MlpModel,
    probe: np.ndarray,
    cfg: DivergenceConfig,
) -> float:
    """Hierarchical divergence between a client and the global model."""
    if not same_architecture(global_model, client_model):
        raise ValueError("models must share one architecture")
    return divergence_from_affinities(
        model_affinities(global_model, probe), model_affinities(client_model, probe), cfg
    )
