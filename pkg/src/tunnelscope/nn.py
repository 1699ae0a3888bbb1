"""Deterministic training and surgery of small feed-forward classifiers.

Plain and residual ReLU stacks with a linear classifier head, trained by
mini-batch SGD with momentum and L2 weight decay. Everything is seeded and
single-threaded, so identical inputs give bitwise-identical parameters.
Parameters are float32 so checkpoint files round-trip exactly; the
forward/backward code is dtype-generic, which lets tests run it in float64
for finite-difference gradient checks.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import Callable, Iterable, NamedTuple, Sequence

import numpy as np

Layer = tuple[np.ndarray, np.ndarray]  # (weights fan_in x fan_out, bias fan_out)

CHECKPOINT_MAGIC = b"TNLC"
CHECKPOINT_VERSION = 1


class TrainingDivergedError(RuntimeError):
    """Raised when the training loss becomes non-finite."""


@dataclass(frozen=True)
class NetworkSpec:
    """Architecture description: widths plus an optional identity-skip toggle.

    With residual=True every hidden layer after the first adds an identity
    skip connection before the rectifier, which requires all hidden widths
    to be equal.
    """

    input_dim: int
    hidden_widths: tuple[int, ...]
    num_classes: int
    residual: bool = False

    def __post_init__(self):
        object.__setattr__(self, "hidden_widths", tuple(int(w) for w in self.hidden_widths))
        if self.input_dim < 1:
            raise ValueError(f"input_dim must be >= 1, got {self.input_dim}")
        if self.num_classes < 2:
            raise ValueError(f"num_classes must be >= 2, got {self.num_classes}")
        if any(w < 1 for w in self.hidden_widths):
            raise ValueError(f"hidden widths must all be >= 1, got {self.hidden_widths}")
        if self.residual and len(set(self.hidden_widths)) > 1:
            raise ValueError("residual networks require equal hidden widths")

    @property
    def layer_sizes(self) -> tuple[int, ...]:
        return (self.input_dim, *self.hidden_widths, self.num_classes)

    @property
    def num_layers(self) -> int:
        """Hidden layers plus the final linear classifier."""
        return len(self.hidden_widths) + 1


@dataclass(frozen=True, eq=False)
class Network:
    spec: NetworkSpec
    layers: tuple[Layer, ...]
    rng_seed: int

    def __post_init__(self):
        sizes = self.spec.layer_sizes
        if len(self.layers) != self.spec.num_layers:
            raise ValueError(
                f"expected {self.spec.num_layers} layers, got {len(self.layers)}"
            )
        for i, (w, b) in enumerate(self.layers):
            if w.shape != (sizes[i], sizes[i + 1]) or b.shape != (sizes[i + 1],):
                raise ValueError(f"layer {i} parameter shapes do not match the spec")
            if not (np.isfinite(w).all() and np.isfinite(b).all()):
                raise ValueError(f"layer {i} contains non-finite parameters")


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float
    momentum: float = 0.0
    weight_decay: float = 0.0
    epochs: int = 30
    batch_size: int = 128
    lr_decay_milestones: tuple[int, ...] = ()
    lr_decay_gamma: float = 0.1
    seed: int = 0
    checkpoint_every: int = 0  # 0 = only the pre-training and final checkpoints

    def __post_init__(self):
        object.__setattr__(
            self, "lr_decay_milestones", tuple(int(m) for m in self.lr_decay_milestones)
        )
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be non-negative")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError(f"momentum must be in [0, 1), got {self.momentum}")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be non-negative")
        if self.epochs < 0 or self.batch_size < 1 or self.checkpoint_every < 0:
            raise ValueError("epochs/batch_size/checkpoint_every out of range")
        if not 0.0 < self.lr_decay_gamma <= 1.0:
            raise ValueError(f"lr_decay_gamma must be in (0, 1], got {self.lr_decay_gamma}")
        ms = self.lr_decay_milestones
        if any(b <= a for a, b in zip(ms, ms[1:])) or any(
            not 0 <= m < max(self.epochs, 1) for m in ms
        ):
            raise ValueError("milestones must be strictly increasing and < epochs")


@dataclass(frozen=True, eq=False)
class Checkpoint:
    epoch: int
    step: int
    parameters: tuple[Layer, ...]


@dataclass(eq=False)
class ActivationSet:
    """Per-layer captured representations: post-ReLU hidden outputs then logits."""

    layers: list[np.ndarray] = field(default_factory=list)

    def __post_init__(self):
        rows = {a.shape[0] for a in self.layers}
        if len(rows) > 1:
            raise ValueError(f"activation matrices disagree on row count: {sorted(rows)}")

    def __len__(self) -> int:
        return len(self.layers)

    def __getitem__(self, idx: int) -> np.ndarray:
        return self.layers[idx]

    def __iter__(self):
        return iter(self.layers)


class TrainResult(NamedTuple):
    network: Network
    checkpoints: list[Checkpoint]
    test_accuracy: float


def _copy_layers(layers: Sequence[Layer]) -> tuple[Layer, ...]:
    return tuple((w.copy(), b.copy()) for w, b in layers)


def init_network(spec: NetworkSpec, seed: int) -> Network:
    """Fan-in-scaled uniform weights in [-sqrt(6/fan_in), +], zero biases."""
    rng = np.random.default_rng(seed)
    sizes = spec.layer_sizes
    layers = []
    for fan_in, fan_out in zip(sizes, sizes[1:]):
        bound = np.sqrt(6.0 / fan_in)
        w = rng.uniform(-bound, bound, size=(fan_in, fan_out)).astype(np.float32)
        layers.append((w, np.zeros(fan_out, dtype=np.float32)))
    return Network(spec=spec, layers=tuple(layers), rng_seed=seed)


def network_from_parameters(spec: NetworkSpec, parameters: Sequence[Layer],
                            rng_seed: int = -1) -> Network:
    return Network(spec=spec, layers=_copy_layers(parameters), rng_seed=rng_seed)


def _forward_cache(layers: Sequence[Layer], x: np.ndarray, residual: bool) -> list[np.ndarray]:
    """All intermediate activations, input first, logits last."""
    last = len(layers) - 1
    hs = [x]
    for i, (w, b) in enumerate(layers):
        z = hs[-1] @ w + b
        if i < last:
            if residual and i >= 1:
                z = z + hs[-1]
            hs.append(np.maximum(z, 0))
        else:
            hs.append(z)
    return hs


def _softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def cross_entropy_loss(layers: Sequence[Layer], x: np.ndarray, y: np.ndarray,
                       residual: bool = False) -> float:
    """Mean softmax cross-entropy of the stack on a batch."""
    logits = np.asarray(_forward_cache(layers, x, residual)[-1], dtype=np.float64)
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_probs = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    return float(-log_probs[np.arange(len(y)), y].mean())


def loss_and_gradients(layers: Sequence[Layer], x: np.ndarray, y: np.ndarray,
                       residual: bool = False) -> tuple[float, list[Layer]]:
    """Backprop through the stack; returns (loss, per-layer (dW, db)).

    Weight decay is not included here; the optimizer adds it as an L2
    gradient term. Dtype follows the inputs.
    """
    last = len(layers) - 1
    with np.errstate(over="ignore", invalid="ignore"):
        hs = _forward_cache(layers, x, residual)
        logits = hs[-1]
        m = x.shape[0]
        probs = _softmax(logits)
        # loss in float64 for a robust divergence check
        p64 = np.asarray(probs, dtype=np.float64)
        loss = float(-np.log(np.clip(p64[np.arange(m), y], 1e-300, None)).mean())
        if not np.isfinite(logits).all():
            loss = float("nan")
        d = probs.copy()
        d[np.arange(m), y] -= 1.0
        d /= m
        grads: list[Layer] = [None] * len(layers)  # type: ignore[list-item]
        for i in range(last, -1, -1):
            w, _ = layers[i]
            grads[i] = (hs[i].T @ d, d.sum(axis=0))
            if i > 0:
                d_prev = d @ w.T
                if residual and 1 <= i < last:
                    d_prev = d_prev + d
                d = d_prev * (hs[i] > 0)
    return loss, grads


def forward_collect(net: Network, batch) -> tuple[ActivationSet, np.ndarray]:
    """Run the network, capturing every post-ReLU hidden output and the logits.

    Returns the activations and the predicted labels (argmax of logits,
    ties broken toward the lowest class index).
    """
    x = np.ascontiguousarray(batch, dtype=np.float32)
    if x.ndim != 2 or x.shape[1] != net.spec.input_dim:
        raise ValueError(
            f"batch must be 2-D with {net.spec.input_dim} columns, got {x.shape}"
        )
    hs = _forward_cache(net.layers, x, net.spec.residual)
    acts = ActivationSet(layers=hs[1:])
    return acts, np.argmax(hs[-1], axis=1)


def network_accuracy(net: Network, dataset) -> float:
    """Fraction of argmax-correct predictions on a dataset."""
    if dataset.features.shape[0] == 0:
        raise ValueError("cannot compute accuracy on an empty dataset")
    _, preds = forward_collect(net, dataset.features)
    return float(np.mean(preds == dataset.labels))


def train(net: Network, train_data, test_data, cfg: TrainConfig,
          on_step: Callable[[int, Sequence[Layer]], None] | None = None) -> TrainResult:
    """Mini-batch SGD with momentum, L2 weight decay and milestone LR decay.

    Data is reshuffled each epoch with a seed derived from (cfg.seed, epoch);
    the trailing incomplete batch is kept. Checkpoints are taken before
    training (epoch 0), every cfg.checkpoint_every epochs, and after the
    final epoch. `on_step(step, layers)` is called with 0 before the first
    update and after every optimizer step.
    """
    if train_data.features.shape[1] != net.spec.input_dim:
        raise ValueError("training features do not match the network input width")
    labels = np.asarray(train_data.labels)
    if labels.size and (labels.min() < 0 or labels.max() >= net.spec.num_classes):
        raise ValueError("training labels outside [0, num_classes)")

    layers = [(w.copy(), b.copy()) for w, b in net.layers]
    velocity = [(np.zeros_like(w), np.zeros_like(b)) for w, b in layers]
    x_all = np.ascontiguousarray(train_data.features, dtype=np.float32)
    y_all = labels
    n = x_all.shape[0]
    residual = net.spec.residual

    checkpoints = [Checkpoint(epoch=0, step=0, parameters=_copy_layers(layers))]
    step = 0
    if on_step is not None:
        on_step(0, layers)

    lr = cfg.learning_rate
    for epoch in range(cfg.epochs):
        if epoch in cfg.lr_decay_milestones:
            lr *= cfg.lr_decay_gamma
        order = np.random.default_rng([cfg.seed, epoch]).permutation(n)
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            loss, grads = loss_and_gradients(layers, x_all[idx], y_all[idx], residual)
            if not np.isfinite(loss):
                raise TrainingDivergedError(
                    f"non-finite loss {loss!r} at epoch {epoch} step {step}"
                )
            for i, ((w, b), (gw, gb), (vw, vb)) in enumerate(zip(layers, grads, velocity)):
                gw = gw + cfg.weight_decay * w
                vw = cfg.momentum * vw + gw
                vb = cfg.momentum * vb + gb
                velocity[i] = (vw, vb)
                layers[i] = (w - lr * vw, b - lr * vb)
            step += 1
            if on_step is not None:
                on_step(step, layers)
        done = epoch + 1
        is_last = done == cfg.epochs
        if (cfg.checkpoint_every and done % cfg.checkpoint_every == 0) or is_last:
            if checkpoints[-1].epoch != done:
                checkpoints.append(
                    Checkpoint(epoch=done, step=step, parameters=_copy_layers(layers))
                )

    trained = Network(spec=net.spec, layers=_copy_layers(layers), rng_seed=net.rng_seed)
    return TrainResult(trained, checkpoints, network_accuracy(trained, test_data))


def weight_change_norm(a: Checkpoint, b: Checkpoint, layer: int) -> float:
    """Per-layer parameter movement: ||W_a - W_b||_F / sqrt(#weights).

    Biases are excluded; the normalizer is the weight-matrix element count.
    """
    if not 0 <= layer < len(a.parameters) or len(a.parameters) != len(b.parameters):
        raise ValueError(f"invalid layer {layer} for checkpoints")
    wa, wb = a.parameters[layer][0], b.parameters[layer][0]
    if wa.shape != wb.shape:
        raise ValueError(f"layer {layer} shapes differ between checkpoints: "
                         f"{wa.shape} vs {wb.shape}")
    diff = wa.astype(np.float64) - wb.astype(np.float64)
    return float(np.linalg.norm(diff) / np.sqrt(diff.size))


def reset_layers(net: Network, init: Checkpoint, layer_range: Iterable[int]) -> Network:
    """Copy of net with the given layers' parameters taken from a checkpoint."""
    indices = list(layer_range)
    if len(init.parameters) != len(net.layers):
        raise ValueError("checkpoint layer count does not match the network")
    layers = list(_copy_layers(net.layers))
    for i in indices:
        if not 0 <= i < len(layers):
            raise ValueError(f"layer index {i} out of range")
        w, b = init.parameters[i]
        if w.shape != layers[i][0].shape or b.shape != layers[i][1].shape:
            raise ValueError(f"checkpoint layer {i} shape does not match the network")
        layers[i] = (w.copy(), b.copy())
    return Network(spec=net.spec, layers=tuple(layers), rng_seed=net.rng_seed)


def stitch(bottom: Network, top: Network, split: int) -> Network:
    """Layers [0, split) from bottom, [split, n) from top. Specs must match."""
    if bottom.spec != top.spec:
        raise ValueError("cannot stitch networks with different specs")
    n = len(bottom.layers)
    if not 0 <= split <= n:
        raise ValueError(f"split {split} out of range [0, {n}]")
    layers = _copy_layers(bottom.layers[:split]) + _copy_layers(top.layers[split:])
    return Network(spec=bottom.spec, layers=layers, rng_seed=bottom.rng_seed)


def truncate(spec: NetworkSpec, depth: int) -> NetworkSpec:
    """Spec keeping the first `depth` hidden layers and the same head width."""
    if not 0 <= depth <= len(spec.hidden_widths):
        raise ValueError(f"depth {depth} out of range [0, {len(spec.hidden_widths)}]")
    return NetworkSpec(
        input_dim=spec.input_dim,
        hidden_widths=spec.hidden_widths[:depth],
        num_classes=spec.num_classes,
        residual=spec.residual,
    )


def save_checkpoint(path, parameters: Sequence[Layer] | Checkpoint) -> None:
    """Write parameters to the binary container (magic TNLC, little-endian)."""
    if isinstance(parameters, Checkpoint):
        parameters = parameters.parameters
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<II", CHECKPOINT_VERSION, len(parameters)))
        for w, b in parameters:
            rows, cols = w.shape
            f.write(struct.pack("<II", rows, cols))
            f.write(np.ascontiguousarray(w, dtype="<f4").tobytes())
            f.write(np.ascontiguousarray(b, dtype="<f4").tobytes())


def load_checkpoint(path) -> list[Layer]:
    """Read a parameter container written by save_checkpoint."""
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:4] != CHECKPOINT_MAGIC:
        raise ValueError("not a checkpoint container (bad magic)")
    version, count = struct.unpack_from("<II", blob, 4)
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    offset = 12
    layers: list[Layer] = []
    for _ in range(count):
        if offset + 8 > len(blob):
            raise ValueError("truncated checkpoint container")
        rows, cols = struct.unpack_from("<II", blob, offset)
        offset += 8
        nbytes_w, nbytes_b = rows * cols * 4, cols * 4
        if offset + nbytes_w + nbytes_b > len(blob):
            raise ValueError("truncated checkpoint container")
        w = np.frombuffer(blob, dtype="<f4", count=rows * cols, offset=offset)
        offset += nbytes_w
        b = np.frombuffer(blob, dtype="<f4", count=cols, offset=offset)
        offset += nbytes_b
        layers.append((w.reshape(rows, cols).astype(np.float32),
                       b.astype(np.float32)))
    if offset != len(blob):
        raise ValueError("trailing bytes in checkpoint container")
    return layers
