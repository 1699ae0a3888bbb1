"""Linear probes: the measurement device for per-layer linear separability.

A probe is a zero-initialized linear classifier trained with Adam on frozen
activations. probe_curve sweeps every captured layer of a network and
reports mean/std test accuracy over several seeded runs.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .data import Dataset
from .nn import Network, forward_collect

_ADAM_BETA1 = 0.9
_ADAM_BETA2 = 0.999
_ADAM_EPS = 1e-8


@dataclass(frozen=True)
class ProbeConfig:
    learning_rate: float = 0.001
    epochs: int = 30
    batch_size: int = 512  # capped at the dataset size
    seed: int = 0

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs/batch_size out of range")


@dataclass(frozen=True, eq=False)
class Probe:
    weights: np.ndarray  # features x classes, float64
    bias: np.ndarray     # classes, float64


@dataclass(frozen=True)
class ProbeCurve:
    mean: tuple[float, ...]
    std: tuple[float, ...]
    runs: int

    def __post_init__(self):
        if len(self.mean) != len(self.std):
            raise ValueError("mean and std must have the same length")
        if any(not 0.0 <= v <= 1.0 for v in self.mean):
            raise ValueError("accuracies must lie in [0, 1]")

    def __len__(self) -> int:
        return len(self.mean)


def train_probe(train_acts, train_labels, cfg: ProbeConfig,
                num_classes: int | None = None) -> Probe:
    """Adam on softmax cross-entropy from a zero-initialized linear map.

    The activations are frozen constants; only the probe parameters move.
    """
    acts = np.asarray(train_acts, dtype=np.float64)
    labels = np.asarray(train_labels, dtype=np.int64)
    if acts.ndim != 2 or acts.shape[0] != labels.shape[0]:
        raise ValueError("activations and labels disagree on sample count")
    if not np.isfinite(acts).all():
        raise ValueError("activations contain non-finite values")
    if num_classes is None:
        num_classes = int(labels.max()) + 1 if labels.size else 0
    if num_classes < 2:
        raise ValueError("need at least 2 classes to train a probe")
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        raise ValueError("labels outside [0, num_classes)")

    n, p = acts.shape
    w = np.zeros((p, num_classes))
    b = np.zeros(num_classes)
    m_w = np.zeros_like(w); v_w = np.zeros_like(w)
    m_b = np.zeros_like(b); v_b = np.zeros_like(b)
    batch = min(cfg.batch_size, n)
    t = 0
    for epoch in range(cfg.epochs):
        order = np.random.default_rng([cfg.seed, epoch]).permutation(n)
        for start in range(0, n, batch):
            idx = order[start:start + batch]
            xb, yb = acts[idx], labels[idx]
            logits = xb @ w + b
            shifted = logits - logits.max(axis=1, keepdims=True)
            e = np.exp(shifted)
            probs = e / e.sum(axis=1, keepdims=True)
            d = probs
            d[np.arange(len(yb)), yb] -= 1.0
            d /= len(yb)
            g_w = xb.T @ d
            g_b = d.sum(axis=0)
            t += 1
            m_w = _ADAM_BETA1 * m_w + (1 - _ADAM_BETA1) * g_w
            v_w = _ADAM_BETA2 * v_w + (1 - _ADAM_BETA2) * g_w * g_w
            m_b = _ADAM_BETA1 * m_b + (1 - _ADAM_BETA1) * g_b
            v_b = _ADAM_BETA2 * v_b + (1 - _ADAM_BETA2) * g_b * g_b
            bc1 = 1 - _ADAM_BETA1 ** t
            bc2 = 1 - _ADAM_BETA2 ** t
            w = w - cfg.learning_rate * (m_w / bc1) / (np.sqrt(v_w / bc2) + _ADAM_EPS)
            b = b - cfg.learning_rate * (m_b / bc1) / (np.sqrt(v_b / bc2) + _ADAM_EPS)
    return Probe(weights=w, bias=b)


def probe_accuracy(probe: Probe, acts, labels) -> float:
    """Fraction of argmax-correct predictions (ties -> lowest class index)."""
    acts = np.asarray(acts, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if acts.shape[0] == 0:
        raise ValueError("cannot evaluate a probe on an empty set")
    if acts.ndim != 2 or acts.shape[1] != probe.weights.shape[0]:
        raise ValueError(
            f"activation width {acts.shape[1:]} does not match probe "
            f"({probe.weights.shape[0]} features)"
        )
    if acts.shape[0] != labels.shape[0]:
        raise ValueError("activations and labels disagree on sample count")
    preds = np.argmax(acts @ probe.weights + probe.bias, axis=1)
    return float(np.mean(preds == labels))


def _run_seed(base_seed: int, layer: int, run: int) -> int:
    ss = np.random.SeedSequence((base_seed, layer, run))
    return int(ss.generate_state(1)[0])


def probe_curve(net: Network, probe_train: Dataset, probe_test: Dataset,
                cfg: ProbeConfig, runs: int = 3, threads: int = 1) -> ProbeCurve:
    """Per-layer probe accuracy: mean and std over `runs` seeded trainings.

    Activations are captured once per dataset; probes for different layers
    are independent. The probe datasets may come from a different class
    space than the backbone's training task (the OOD path).
    """
    if probe_train.num_classes != probe_test.num_classes:
        raise ValueError("probe train/test datasets disagree on class count")
    if runs < 1:
        raise ValueError("runs must be >= 1")
    acts_train, _ = forward_collect(net, probe_train.features)
    acts_test, _ = forward_collect(net, probe_test.features)

    def one_layer(layer: int) -> tuple[float, float]:
        accs = []
        for run in range(runs):
            run_cfg = replace(cfg, seed=_run_seed(cfg.seed, layer, run))
            probe = train_probe(acts_train[layer], probe_train.labels, run_cfg,
                                num_classes=probe_train.num_classes)
            accs.append(probe_accuracy(probe, acts_test[layer], probe_test.labels))
        return float(np.mean(accs)), float(np.std(accs))

    indices = range(len(acts_train))
    if threads > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=threads) as pool:
            stats = list(pool.map(one_layer, indices))
    else:
        stats = [one_layer(i) for i in indices]
    return ProbeCurve(
        mean=tuple(s[0] for s in stats),
        std=tuple(s[1] for s in stats),
        runs=runs,
    )
