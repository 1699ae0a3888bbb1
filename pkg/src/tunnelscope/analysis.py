"""Experiment protocols and tunnel-boundary detection.

Each run_* function consumes a RunConfig and returns a serializable report.
All randomness is derived from the config, so identical configs produce
identical reports.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, replace
from typing import Any, NamedTuple, Sequence

import numpy as np

from .config import RunConfig, config_to_dict
from .data import (BlobSpec, Dataset, class_subset, load_csv, make_blobs,
                   ood_pair, split_tasks, standardize_pair)
from .linalg import numerical_rank
from .metrics import (CkaConfig, VarianceReport, cka_matrix, intra_inter_variance,
                      l1_drift)
from .nn import (ActivationSet, Checkpoint, Network, NetworkSpec, TrainConfig,
                 _forward_cache, forward_collect, init_network, network_accuracy,
                 network_from_parameters, train, truncate, weight_change_norm)
from .probes import Probe, ProbeConfig, ProbeCurve, probe_accuracy, probe_curve, train_probe

SCHEMA_VERSION = 1


class TunnelDetection(NamedTuple):
    layer: int
    found: bool


def detect_tunnel(curve: Sequence[float], reference: float, theta: float) -> TunnelDetection:
    """First layer whose mean probe accuracy reaches theta * reference.

    Returns (last layer, found=False) when no layer qualifies.
    """
    if len(curve) == 0:
        raise ValueError("cannot detect a tunnel on an empty curve")
    if reference <= 0:
        raise ValueError(f"reference accuracy must be positive, got {reference}")
    if not 0.0 < theta <= 1.0:
        raise ValueError(f"theta must be in (0, 1], got {theta}")
    threshold = theta * reference
    for i, value in enumerate(curve):
        if value >= threshold:
            return TunnelDetection(layer=i, found=True)
    return TunnelDetection(layer=len(curve) - 1, found=False)


# ---------------------------------------------------------------------------
# seed derivations: RunConfig.seed offsets every stream


def _effective_data(spec: BlobSpec, cfg: RunConfig) -> BlobSpec:
    return replace(spec, seed=spec.seed + cfg.seed)


def _init_seed(cfg: RunConfig) -> int:
    return cfg.seed + 1


def _train_cfg(cfg: RunConfig, stream: int = 0) -> TrainConfig:
    return replace(cfg.train, seed=cfg.train.seed + cfg.seed + stream)


def _probe_cfg(cfg: RunConfig) -> ProbeConfig:
    return replace(cfg.probe, seed=cfg.probe.seed + cfg.seed)


def _load_datasets(cfg: RunConfig) -> tuple[Dataset, Dataset]:
    """Standardized (train, test) from blobs or CSV paths."""
    if cfg.csv_train is not None:
        train_d = load_csv(cfg.csv_train, cfg.data.num_classes, name="csv-train")
        test_d = load_csv(cfg.csv_test, cfg.data.num_classes, name="csv-test")
    else:
        train_d, test_d = make_blobs(_effective_data(cfg.data, cfg))
    return standardize_pair(train_d, test_d)


# ---------------------------------------------------------------------------
# reports


@dataclass(frozen=True, eq=False)
class TunnelReport:
    probe_curve: ProbeCurve
    rank_curve: tuple[int, ...]
    variance_curve: tuple[VarianceReport, ...]
    tunnel_start_95: int
    tunnel_95_found: bool
    tunnel_start_98: int
    tunnel_98_found: bool
    reference_accuracy: float
    config: dict

    @property
    def num_layers(self) -> int:
        return len(self.probe_curve)

    def extractor_fraction(self, start: int) -> float:
        return (start + 1) / self.num_layers

    def to_dict(self) -> dict:
        return {
            "probe_curve": {
                "mean": list(self.probe_curve.mean),
                "std": list(self.probe_curve.std),
                "runs": self.probe_curve.runs,
            },
            "rank_curve": list(self.rank_curve),
            "variance_curve": [
                {"intra": v.intra, "inter": v.inter} for v in self.variance_curve
            ],
            "tunnel_start_95": self.tunnel_start_95,
            "tunnel_95_found": self.tunnel_95_found,
            "tunnel_start_98": self.tunnel_start_98,
            "tunnel_98_found": self.tunnel_98_found,
            "extractor_fraction_95": self.extractor_fraction(self.tunnel_start_95),
            "extractor_fraction_98": self.extractor_fraction(self.tunnel_start_98),
            "reference_accuracy": self.reference_accuracy,
        }


@dataclass(frozen=True, eq=False)
class OodReport:
    id_report: TunnelReport
    ood_probe_curve: ProbeCurve
    ood_rank_curve: tuple[int, ...]
    ood_best_layer: int
    config: dict

    def to_dict(self) -> dict:
        return {
            "in_distribution": self.id_report.to_dict(),
            "ood_probe_curve": {
                "mean": list(self.ood_probe_curve.mean),
                "std": list(self.ood_probe_curve.std),
                "runs": self.ood_probe_curve.runs,
            },
            "ood_rank_curve": list(self.ood_rank_curve),
            "ood_best_layer": self.ood_best_layer,
        }


@dataclass(frozen=True, eq=False)
class StitchReport:
    split_layer: int
    task_classes: tuple[tuple[int, ...], ...]
    task_accuracies: tuple[float, ...]
    grid: dict[str, float]               # "E1+T2@task0" -> accuracy
    sweeps: dict[str, list[dict]]        # direction -> [{x, task0, task1}]
    finetune: dict[str, float]           # "E2+T1(FT)@task0", "E2(FT)@task0"
    config: dict

    def to_dict(self) -> dict:
        return {
            "split_layer": self.split_layer,
            "task_classes": [list(g) for g in self.task_classes],
            "task_accuracies": list(self.task_accuracies),
            "grid": dict(sorted(self.grid.items())),
            "sweeps": self.sweeps,
            "finetune": dict(sorted(self.finetune.items())),
        }


@dataclass(frozen=True, eq=False)
class DevelopmentReport:
    checkpoint_epochs: tuple[int, ...]
    weight_change: tuple[tuple[float, ...], ...]  # consecutive pairs x layers
    rank_steps: tuple[int, ...]
    rank_evolution: tuple[tuple[int, ...], ...]   # captured steps x layers
    config: dict

    def to_dict(self) -> dict:
        return {
            "checkpoint_epochs": list(self.checkpoint_epochs),
            "weight_change": [list(row) for row in self.weight_change],
            "rank_steps": list(self.rank_steps),
            "rank_evolution": [list(row) for row in self.rank_evolution],
        }


@dataclass(frozen=True, eq=False)
class SweepCell:
    depth: int
    width: int
    num_classes: int
    tunnel_start_95: int
    tunnel_95_found: bool
    tunnel_start_98: int
    tunnel_98_found: bool
    reference_accuracy: float
    extractor_fraction_95: float

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


@dataclass(frozen=True, eq=False)
class CapacityReport:
    cells: tuple[SweepCell, ...]
    config: dict

    def to_dict(self) -> dict:
        return {"cells": [c.to_dict() for c in self.cells]}


@dataclass(frozen=True, eq=False)
class ShorterRow:
    depth: int
    task1_accuracy: float
    task2_accuracy: float
    task1_after_task2: float
    forgetting: float

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


@dataclass(frozen=True, eq=False)
class ShorterReport:
    rows: tuple[ShorterRow, ...]
    config: dict

    def to_dict(self) -> dict:
        return {"rows": [r.to_dict() for r in self.rows]}


@dataclass(frozen=True, eq=False)
class MetricsReport:
    cka: tuple[tuple[float | None, ...], ...]
    drift: tuple[float, ...] | None
    rank_curve: tuple[int, ...]
    variance_curve: tuple[VarianceReport, ...]
    reference_accuracy: float
    config: dict

    def to_dict(self) -> dict:
        return {
            "cka_matrix": [list(row) for row in self.cka],
            "l1_drift": None if self.drift is None else list(self.drift),
            "rank_curve": list(self.rank_curve),
            "variance_curve": [
                {"intra": v.intra, "inter": v.inter} for v in self.variance_curve
            ],
            "reference_accuracy": self.reference_accuracy,
        }


# ---------------------------------------------------------------------------
# shared pieces


def _rank_curve(acts: ActivationSet, cfg: RunConfig) -> tuple[int, ...]:
    return tuple(numerical_rank(layer, cfg.spectrum) for layer in acts)


def _variance_curve(acts: ActivationSet, labels) -> tuple[VarianceReport, ...]:
    return tuple(intra_inter_variance(layer, labels) for layer in acts)


class TunnelArtifacts(NamedTuple):
    report: TunnelReport
    network: Network
    checkpoints: list[Checkpoint]
    train_data: Dataset
    test_data: Dataset


def _tunnel_artifacts(cfg: RunConfig) -> TunnelArtifacts:
    train_d, test_d = _load_datasets(cfg)
    net = init_network(cfg.network, _init_seed(cfg))
    result = train(net, train_d, test_d, _train_cfg(cfg))
    curve = probe_curve(result.network, train_d, test_d, _probe_cfg(cfg),
                        runs=cfg.runs, threads=cfg.threads)
    acts, _ = forward_collect(result.network, test_d.features)
    ranks = _rank_curve(acts, cfg)
    variances = _variance_curve(acts, test_d.labels)
    ts95 = detect_tunnel(curve.mean, result.test_accuracy, 0.95)
    ts98 = detect_tunnel(curve.mean, result.test_accuracy, 0.98)
    report = TunnelReport(
        probe_curve=curve,
        rank_curve=ranks,
        variance_curve=variances,
        tunnel_start_95=ts95.layer,
        tunnel_95_found=ts95.found,
        tunnel_start_98=ts98.layer,
        tunnel_98_found=ts98.found,
        reference_accuracy=result.test_accuracy,
        config=config_to_dict(cfg),
    )
    return TunnelArtifacts(report, result.network, result.checkpoints, train_d, test_d)


def run_tunnel_experiment(cfg: RunConfig) -> TunnelReport:
    """Train the backbone and measure probe/rank/variance curves per layer."""
    return _tunnel_artifacts(cfg).report


class OodArtifacts(NamedTuple):
    report: OodReport
    network: Network
    checkpoints: list[Checkpoint]


def _ood_artifacts(cfg: RunConfig) -> OodArtifacts:
    if cfg.ood_data is None:
        raise ValueError("ood experiment requires the ood_data section")
    artifacts = _tunnel_artifacts(cfg)
    source = _effective_data(cfg.data, cfg)
    target = _effective_data(cfg.ood_data, cfg)
    if source == target:
        # degenerate sanity mode: the "OOD" task is the source task itself
        tgt_train, tgt_test = artifacts.train_data, artifacts.test_data
    else:
        _, (tgt_train_raw, tgt_test_raw) = ood_pair(source, target)
        tgt_train, tgt_test = standardize_pair(tgt_train_raw, tgt_test_raw)
    ood_curve = probe_curve(artifacts.network, tgt_train, tgt_test, _probe_cfg(cfg),
                            runs=cfg.runs, threads=cfg.threads)
    acts, _ = forward_collect(artifacts.network, tgt_test.features)
    ood_ranks = _rank_curve(acts, cfg)
    best = int(np.argmax(ood_curve.mean))
    report = OodReport(
        id_report=artifacts.report,
        ood_probe_curve=ood_curve,
        ood_rank_curve=ood_ranks,
        ood_best_layer=best,
        config=config_to_dict(cfg),
    )
    return OodArtifacts(report, artifacts.network, artifacts.checkpoints)


def run_ood_experiment(cfg: RunConfig) -> OodReport:
    """Probe a source-trained backbone on a different task, layer by layer."""
    return _ood_artifacts(cfg).report


# ---------------------------------------------------------------------------
# two-task machinery (stitch / shorter)


def _task_spec(base: NetworkSpec, num_classes: int) -> NetworkSpec:
    return NetworkSpec(
        input_dim=base.input_dim,
        hidden_widths=base.hidden_widths,
        num_classes=num_classes,
        residual=base.residual,
    )


def _zero_head_network(prev: Network, spec: NetworkSpec) -> Network:
    """Body from a trained network, classifier head reset to zeros."""
    width = spec.hidden_widths[-1] if spec.hidden_widths else spec.input_dim
    head = (np.zeros((width, spec.num_classes), dtype=np.float32),
            np.zeros(spec.num_classes, dtype=np.float32))
    layers = tuple((w.copy(), b.copy()) for w, b in prev.layers[:-1]) + (head,)
    return Network(spec=spec, layers=layers, rng_seed=prev.rng_seed)


class TwoTaskRun(NamedTuple):
    nets: tuple[Network, Network]
    tasks_train: tuple[Dataset, Dataset]
    tasks_test: tuple[Dataset, Dataset]
    accuracies: tuple[float, float]


def _run_two_tasks(cfg: RunConfig, spec: NetworkSpec) -> TwoTaskRun:
    """Sequential training: task 1 from init, task 2 from task-1 parameters."""
    if cfg.partition is None or len(cfg.partition) != 2:
        raise ValueError("two-task experiments need a partition with exactly 2 groups")
    train_d, test_d = _load_datasets(cfg)
    tr_tasks = split_tasks(train_d, cfg.partition)
    te_tasks = split_tasks(test_d, cfg.partition)
    spec1 = _task_spec(spec, tr_tasks[0].num_classes)
    spec2 = _task_spec(spec, tr_tasks[1].num_classes)
    net1_init = init_network(spec1, _init_seed(cfg))
    res1 = train(net1_init, tr_tasks[0], te_tasks[0], _train_cfg(cfg))
    net2_init = _zero_head_network(res1.network, spec2)
    res2 = train(net2_init, tr_tasks[1], te_tasks[1], _train_cfg(cfg, stream=5))
    return TwoTaskRun(
        nets=(res1.network, res2.network),
        tasks_train=(tr_tasks[0], tr_tasks[1]),
        tasks_test=(te_tasks[0], te_tasks[1]),
        accuracies=(res1.test_accuracy, res2.test_accuracy),
    )


def _compose(hidden_bottom: Network, hidden_top: Network, split: int,
             head_net: Network) -> Network:
    """Hidden layers [0, split) from one net, [split, H) from another, plus
    the head (and class count) of a third. Bodies must share widths."""
    n_hidden = len(head_net.spec.hidden_widths)
    layers = (
        tuple((w.copy(), b.copy()) for w, b in hidden_bottom.layers[:split])
        + tuple((w.copy(), b.copy()) for w, b in hidden_top.layers[split:n_hidden])
        + ((head_net.layers[-1][0].copy(), head_net.layers[-1][1].copy()),)
    )
    return Network(spec=head_net.spec, layers=layers, rng_seed=head_net.rng_seed)


def _hidden_output(net: Network, upto: int, features) -> np.ndarray:
    """Activation after hidden layer upto-1 (the raw input for upto=0)."""
    x = np.ascontiguousarray(features, dtype=np.float32)
    if upto == 0:
        return x
    acts, _ = forward_collect(net, x)
    return acts[upto - 1]


def run_stitch_experiment(cfg: RunConfig) -> StitchReport:
    """Mix extractors and tunnels across two sequentially trained tasks.

    The split sits at the task-1 tunnel start. Every combination is
    evaluated with the saved per-task heads; substitution sweeps move the
    boundary across the whole stack in both directions; the FT rows retrain
    a probe on the designated representation.
    """
    two = _run_two_tasks(cfg, cfg.network)
    net1, net2 = two.nets
    n_hidden = len(cfg.network.hidden_widths)

    curve1 = probe_curve(net1, two.tasks_train[0], two.tasks_test[0],
                         _probe_cfg(cfg), runs=cfg.runs, threads=cfg.threads)
    ts = detect_tunnel(curve1.mean, two.accuracies[0], 0.95)
    split = ts.layer

    nets = {"E1": net1, "E2": net2, "T1": net1, "T2": net2}
    grid: dict[str, float] = {}
    for e_name in ("E1", "E2"):
        for t_name in ("T1", "T2"):
            for task in (0, 1):
                head_net = two.nets[task]
                composed = _compose(nets[e_name], nets[t_name], split, head_net)
                acc = network_accuracy(composed, two.tasks_test[task])
                grid[f"{e_name}+{t_name}@task{task}"] = acc

    sweeps: dict[str, list[dict]] = {}
    for direction, bottom, top in (("bottom_from_task1", net1, net2),
                                   ("bottom_from_task2", net2, net1)):
        rows = []
        for x in range(n_hidden + 1):
            entry: dict[str, Any] = {"x": x}
            for task in (0, 1):
                composed = _compose(bottom, top, x, two.nets[task])
                entry[f"task{task}"] = network_accuracy(composed, two.tasks_test[task])
            rows.append(entry)
        sweeps[direction] = rows

    # FT rows: retrain a linear readout on the designated representation,
    # using task-1 data (the forgetting-recovery question).
    pcfg = _probe_cfg(cfg)
    finetune: dict[str, float] = {}
    e2t1 = _compose(net2, net1, split, net1)
    rep_train = _hidden_output(e2t1, n_hidden, two.tasks_train[0].features)
    rep_test = _hidden_output(e2t1, n_hidden, two.tasks_test[0].features)
    probe = train_probe(rep_train, two.tasks_train[0].labels, pcfg,
                        num_classes=two.tasks_train[0].num_classes)
    finetune["E2+T1(FT)@task0"] = probe_accuracy(probe, rep_test, two.tasks_test[0].labels)

    rep_train = _hidden_output(net2, split, two.tasks_train[0].features)
    rep_test = _hidden_output(net2, split, two.tasks_test[0].features)
    probe = train_probe(rep_train, two.tasks_train[0].labels, pcfg,
                        num_classes=two.tasks_train[0].num_classes)
    finetune["E2(FT)@task0"] = probe_accuracy(probe, rep_test, two.tasks_test[0].labels)

    return StitchReport(
        split_layer=split,
        task_classes=cfg.partition,
        task_accuracies=two.accuracies,
        grid=grid,
        sweeps=sweeps,
        finetune=finetune,
        config=config_to_dict(cfg),
    )


def run_development_experiment(cfg: RunConfig) -> DevelopmentReport:
    """Track weight movement between checkpoints and rank collapse over steps.

    Ranks are captured for every layer at step 0, every step up to
    cfg.rank_capture_steps, and at each epoch boundary afterwards.
    """
    train_d, test_d = _load_datasets(cfg)
    net = init_network(cfg.network, _init_seed(cfg))
    steps_per_epoch = max(1, math.ceil(train_d.size / cfg.train.batch_size))
    rank_steps: list[int] = []
    rank_rows: list[tuple[int, ...]] = []
    test_x = test_d.features

    def capture(step: int, layers) -> None:
        if step <= cfg.rank_capture_steps or step % steps_per_epoch == 0:
            acts = _forward_cache(layers, test_x, cfg.network.residual)[1:]
            rank_steps.append(step)
            rank_rows.append(tuple(numerical_rank(a, cfg.spectrum) for a in acts))

    result = train(net, train_d, test_d, _train_cfg(cfg), on_step=capture)
    ckpts = result.checkpoints
    heatmap = tuple(
        tuple(weight_change_norm(a, b, layer) for layer in range(len(net.layers)))
        for a, b in zip(ckpts, ckpts[1:])
    )
    return DevelopmentReport(
        checkpoint_epochs=tuple(c.epoch for c in ckpts),
        weight_change=heatmap,
        rank_steps=tuple(rank_steps),
        rank_evolution=tuple(rank_rows),
        config=config_to_dict(cfg),
    )


def _subset_pair(train_d: Dataset, test_d: Dataset, classes) -> tuple[Dataset, Dataset]:
    return class_subset(train_d, classes), class_subset(test_d, classes)


def run_capacity_sweep(cfg: RunConfig) -> CapacityReport:
    """One tunnel experiment per (depth, width, class-count) cell.

    Class-count cells take the first k classes of the base task; with
    equalize_steps the epoch count is scaled so every cell sees the same
    number of gradient steps as the full task.
    """
    depths = cfg.depths or (len(cfg.network.hidden_widths),)
    widths = cfg.widths or (cfg.network.hidden_widths[0],)
    counts = cfg.class_counts or (cfg.data.num_classes,)
    base_steps = cfg.train.epochs * max(1, math.ceil(
        cfg.data.num_classes * cfg.data.per_class_train / cfg.train.batch_size))

    def run_cell(cell: tuple[int, int, int]) -> SweepCell:
        depth, width, classes = cell
        spec = NetworkSpec(
            input_dim=cfg.network.input_dim,
            hidden_widths=(width,) * depth,
            num_classes=classes,
            residual=cfg.network.residual,
        )
        cell_cfg = replace(cfg, network=spec, threads=1)
        epochs = cfg.train.epochs
        if cfg.equalize_steps and classes != cfg.data.num_classes:
            subset_rows = classes * cfg.data.per_class_train
            cell_steps = max(1, math.ceil(subset_rows / cfg.train.batch_size))
            epochs = max(1, round(base_steps / cell_steps))
        milestones = tuple(m for m in cfg.train.lr_decay_milestones if m < epochs)
        cell_cfg = replace(cell_cfg, train=replace(
            cfg.train, epochs=epochs, lr_decay_milestones=milestones,
            checkpoint_every=0))
        # build datasets here so class subsetting happens after standardization
        train_d, test_d = _load_datasets(cfg)
        if classes != cfg.data.num_classes:
            train_d, test_d = _subset_pair(train_d, test_d, range(classes))
        net = init_network(spec, _init_seed(cfg))
        result = train(net, train_d, test_d, _train_cfg(cell_cfg))
        curve = probe_curve(result.network, train_d, test_d, _probe_cfg(cfg),
                            runs=cfg.runs)
        ts95 = detect_tunnel(curve.mean, result.test_accuracy, 0.95)
        ts98 = detect_tunnel(curve.mean, result.test_accuracy, 0.98)
        return SweepCell(
            depth=depth, width=width, num_classes=classes,
            tunnel_start_95=ts95.layer, tunnel_95_found=ts95.found,
            tunnel_start_98=ts98.layer, tunnel_98_found=ts98.found,
            reference_accuracy=result.test_accuracy,
            extractor_fraction_95=(ts95.layer + 1) / len(curve),
        )

    cells = [(d, w, c) for d in depths for w in widths for c in counts]
    if cfg.threads > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=cfg.threads) as pool:
            results = list(pool.map(run_cell, cells))
    else:
        results = [run_cell(c) for c in cells]
    return CapacityReport(cells=tuple(results), config=config_to_dict(cfg))


def run_shorter_network_experiment(cfg: RunConfig) -> ShorterReport:
    """Sequential two-task training at several truncation depths.

    Forgetting is the task-1 accuracy drop after task-2 training, evaluated
    with the retained task-1 head on the task-2 body.
    """
    if not cfg.truncation_depths:
        raise ValueError("shorter-network experiment needs truncation_depths")
    rows = []
    for depth in cfg.truncation_depths:
        spec = truncate(cfg.network, depth)
        two = _run_two_tasks(cfg, spec)
        net1, net2 = two.nets
        n_hidden = len(spec.hidden_widths)
        retained = _compose(net2, net2, n_hidden, net1)
        after = network_accuracy(retained, two.tasks_test[0])
        rows.append(ShorterRow(
            depth=depth,
            task1_accuracy=two.accuracies[0],
            task2_accuracy=two.accuracies[1],
            task1_after_task2=after,
            forgetting=two.accuracies[0] - after,
        ))
    return ShorterReport(rows=tuple(rows), config=config_to_dict(cfg))


def run_metrics_experiment(cfg: RunConfig) -> MetricsReport:
    """Representation-similarity snapshot of a trained backbone.

    CKA across all layer pairs; L1 drift over the equal-width hidden prefix
    (omitted if hidden widths vary).
    """
    artifacts = _tunnel_artifacts(replace(cfg, runs=1))
    acts, _ = forward_collect(artifacts.network, artifacts.test_data.features)
    matrix = cka_matrix(acts, cfg.cka)
    cka_rows = tuple(
        tuple(None if not np.isfinite(v) else float(v) for v in row)
        for row in matrix
    )
    drift = None
    widths = cfg.network.hidden_widths
    if len(widths) >= 2 and len(set(widths)) == 1:
        hidden_acts = ActivationSet(layers=list(acts)[:len(widths)])
        drift = tuple(l1_drift(hidden_acts))
    return MetricsReport(
        cka=cka_rows,
        drift=drift,
        rank_curve=artifacts.report.rank_curve,
        variance_curve=artifacts.report.variance_curve,
        reference_accuracy=artifacts.report.reference_accuracy,
        config=config_to_dict(cfg),
    )
