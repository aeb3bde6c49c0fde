"""Dense ReLU feedforward networks with pre-activation capture.

All numeric carriers are row-major float64 ndarrays. A model is a plain
container of per-layer (weights, bias) pairs; hidden layers apply ReLU and
the output layer is linear (logits). Every operation is deterministic in
its explicit inputs -- there is no hidden RNG or global state.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

CHECKPOINT_MAGIC = b"FGMLP1"


class NumericError(RuntimeError):
    """A parameter or metric became NaN/Inf during computation."""


@dataclass
class MlpModel:
    """Fully-connected ReLU network; ``weights[l]`` is [fan_in x fan_out]."""

    weights: list[np.ndarray]
    biases: list[np.ndarray]

    def __post_init__(self) -> None:
        if len(self.weights) != len(self.biases):
            raise ValueError("weights and biases must pair up layer by layer")
        if len(self.weights) < 2:
            raise ValueError("model needs at least one hidden layer plus an output layer")
        for l, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.ndim != 2 or b.ndim != 1 or w.shape[1] != b.shape[0]:
                raise ValueError(f"layer {l}: weights {w.shape} and bias {b.shape} do not match")
            if l > 0 and self.weights[l - 1].shape[1] != w.shape[0]:
                raise ValueError(
                    f"layer {l}: fan_in {w.shape[0]} does not chain with previous "
                    f"fan_out {self.weights[l - 1].shape[1]}"
                )

    @property
    def n_layers(self) -> int:
        return len(self.weights)

    @property
    def layer_sizes(self) -> list[int]:
        return [int(self.weights[0].shape[0])] + [int(w.shape[1]) for w in self.weights]

    def copy(self) -> "MlpModel":
        return MlpModel([w.copy() for w in self.weights], [b.copy() for b in self.biases])


@dataclass
class ForwardTrace:
    """Per-layer pre-activation batches plus the final logits."""

    preactivations: list[np.ndarray]
    output: np.ndarray


@dataclass
class Gradients:
    """Loss gradients shaped exactly like the model parameters."""

    weights: list[np.ndarray]
    biases: list[np.ndarray]


@dataclass
class SgdState:
    """Heavy-ball momentum buffers mirroring the model shapes."""

    learning_rate: float
    momentum: float
    vel_weights: list[np.ndarray]
    vel_biases: list[np.ndarray]

    @classmethod
    def for_model(cls, model: MlpModel, learning_rate: float, momentum: float) -> "SgdState":
        if learning_rate < 0.0:
            raise ValueError("learning_rate must be >= 0")
        if not 0.0 <= momentum < 1.0:
            raise ValueError("momentum must lie in [0, 1)")
        return cls(
            learning_rate=learning_rate,
            momentum=momentum,
            vel_weights=[np.zeros_like(w) for w in model.weights],
            vel_biases=[np.zeros_like(b) for b in model.biases],
        )


def same_architecture(a: MlpModel, b: MlpModel) -> bool:
    return a.layer_sizes == b.layer_sizes


def init_model(layer_sizes: list[int], rng_seed: int) -> MlpModel:
    """Glorot-uniform weights, zero biases, deterministic in the seed.

    ``layer_sizes`` is [input, hidden..., output] and needs at least three
    entries (one hidden ReLU layer plus the linear output layer).
    """
    sizes = [int(s) for s in layer_sizes]
    if len(sizes) < 3:
        raise ValueError("layer_sizes needs input, at least one hidden, and output entries")
    if any(s < 1 for s in sizes):
        raise ValueError("every layer size must be >= 1")
    rng = np.random.default_rng(rng_seed)
    weights = []
    biases = []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        bound = math.sqrt(6.0 / (fan_in + fan_out))
        weights.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)))
        biases.append(np.zeros(fan_out))
    return MlpModel(weights, biases)


def forward(model: MlpModel, inputs: np.ndarray) -> ForwardTrace:
    """Forward pass recording every layer's pre-activation batch.

    Hidden layers apply elementwise max(0, z); the output layer is the
    identity, so ``output`` equals the last pre-activation matrix.
    """
    inputs = np.asarray(inputs, dtype=np.float64)
    if inputs.ndim != 2:
        raise ValueError("inputs must be a [batch x features] matrix")
    if inputs.shape[1] != model.weights[0].shape[0]:
        raise ValueError(
            f"input width {inputs.shape[1]} does not match model input {model.weights[0].shape[0]}"
        )
    preactivations = []
    h = inputs
    last = model.n_layers - 1
    for l, (w, b) in enumerate(zip(model.weights, model.biases)):
        z = h @ w + b
        preactivations.append(z)
        h = np.maximum(z, 0.0) if l < last else z
    return ForwardTrace(preactivations, h)


def loss_and_gradients(
    model: MlpModel, inputs: np.ndarray, labels: np.ndarray
) -> tuple[float, Gradients]:
    """Mean softmax cross-entropy and its reverse-mode gradients.

    ReLU gates pass gradient only where the pre-activation is strictly
    positive; a pre-activation of exactly zero blocks it.
    """
    inputs = np.asarray(inputs, dtype=np.float64)
    labels = np.asarray(labels)
    n = inputs.shape[0]
    if n == 0:
        raise ValueError("batch must be nonempty")
    n_classes = model.weights[-1].shape[1]
    if labels.shape != (n,):
        raise ValueError("labels must be a vector matching the batch size")
    if labels.min() < 0 or labels.max() >= n_classes:
        raise ValueError(f"label out of range [0, {n_classes})")
    labels = labels.astype(np.int64)

    trace = forward(model, inputs)
    logits = trace.output
    shifted = logits - logits.max(axis=1, keepdims=True)
    exp = np.exp(shifted)
    sums = exp.sum(axis=1)
    loss = float(np.mean(np.log(sums) - shifted[np.arange(n), labels]))

    delta = exp / sums[:, None]
    delta[np.arange(n), labels] -= 1.0
    delta /= n

    n_layers = model.n_layers
    layer_inputs = [inputs] + [np.maximum(z, 0.0) for z in trace.preactivations[:-1]]
    grad_w: list[np.ndarray] = [np.empty(0)] * n_layers
    grad_b: list[np.ndarray] = [np.empty(0)] * n_layers
    for l in reversed(range(n_layers)):
        grad_w[l] = layer_inputs[l].T @ delta
        grad_b[l] = delta.sum(axis=0)
        if l > 0:
            delta = (delta @ model.weights[l].T) * (trace.preactivations[l - 1] > 0.0)
    return loss, Gradients(grad_w, grad_b)


def sgd_step(model: MlpModel, grads: Gradients, state: SgdState) -> tuple[MlpModel, SgdState]:
    """One heavy-ball update: v <- momentum*v + g; theta <- theta - lr*v.

    Mutates the model and state in place (caller owns both exclusively) and
    returns them for chaining.
    """
    if len(grads.weights) != model.n_layers:
        raise ValueError("gradient layer count does not match the model")
    for l in range(model.n_layers):
        if grads.weights[l].shape != model.weights[l].shape or grads.biases[l].shape != model.biases[l].shape:
            raise ValueError(f"layer {l}: gradient shapes do not match the model")
        vw = state.vel_weights[l]
        vb = state.vel_biases[l]
        vw *= state.momentum
        vw += grads.weights[l]
        vb *= state.momentum
        vb += grads.biases[l]
        model.weights[l] -= state.learning_rate * vw
        model.biases[l] -= state.learning_rate * vb
        if not (np.isfinite(model.weights[l]).all() and np.isfinite(model.biases[l]).all()):
            raise NumericError(f"non-finite parameter after update in layer {l}")
    return model, state


def permute_hidden_units(model: MlpModel, layer_index: int, permutation: np.ndarray) -> MlpModel:
    """Reorder one hidden layer's units, rewiring the next layer to match.

    Returns a new model computing exactly the same function; useful for
    checking permutation invariance of pattern-based metrics.
    """
    if not 0 <= layer_index < model.n_layers - 1:
        raise ValueError("only hidden layers can be permuted")
    perm = np.asarray(permutation)
    width = model.weights[layer_index].shape[1]
    if sorted(perm.tolist()) != list(range(width)):
        raise ValueError(f"permutation must rearrange exactly 0..{width - 1}")
    out = model.copy()
    out.weights[layer_index] = out.weights[layer_index][:, perm]
    out.biases[layer_index] = out.biases[layer_index][perm]
    out.weights[layer_index + 1] = out.weights[layer_index + 1][perm, :]
    return out


def save_model(model: MlpModel, path: str | Path) -> None:
    """Write the flat binary checkpoint.

    Layout: magic ``FGMLP1``, layer count L (u32 LE), L+1 layer sizes
    (u32 LE), then per layer the row-major weights and the bias as
    little-endian float64.
    """
    sizes = model.layer_sizes
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", model.n_layers))
        f.write(struct.pack(f"<{len(sizes)}I", *sizes))
        for w, b in zip(model.weights, model.biases):
            f.write(np.ascontiguousarray(w, dtype="<f8").tobytes())
            f.write(np.ascontiguousarray(b, dtype="<f8").tobytes())


def load_model(path: str | Path) -> MlpModel:
    buf = Path(path).read_bytes()
    header = len(CHECKPOINT_MAGIC)
    if buf[:header] != CHECKPOINT_MAGIC:
        raise ValueError(f"bad checkpoint magic in {path}")
    if len(buf) < header + 4:
        raise ValueError(f"truncated checkpoint header in {path}")
    (n_layers,) = struct.unpack_from("<I", buf, header)
    offset = header + 4
    if len(buf) < offset + 4 * (n_layers + 1):
        raise ValueError(f"truncated checkpoint header in {path}")
    sizes = struct.unpack_from(f"<{n_layers + 1}I", buf, offset)
    offset += 4 * (n_layers + 1)
    weights = []
    biases = []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        need = 8 * (fan_in * fan_out + fan_out)
        if len(buf) < offset + need:
            raise ValueError(f"truncated checkpoint payload in {path}")
        w = np.frombuffer(buf, dtype="<f8", count=fan_in * fan_out, offset=offset)
        offset += 8 * fan_in * fan_out
        b = np.frombuffer(buf, dtype="<f8", count=fan_out, offset=offset)
        offset += 8 * fan_out
        weights.append(w.reshape(fan_in, fan_out).astype(np.float64))
        biases.append(b.astype(np.float64))
    return MlpModel(weights, biases)
