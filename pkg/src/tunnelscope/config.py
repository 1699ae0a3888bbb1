"""Run configuration: one document that fully determines an experiment.

Configs are plain JSON. Unknown keys are rejected by name; omitted keys fall
back to the calibrated defaults for the chosen experiment kind. The master
`seed` offsets every internal seed (data, shuffling, probes), so `--seed N`
reproducibly shifts a whole run.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field, replace
from typing import Any

from .data import BlobSpec
from .linalg import SpectrumPolicy
from .metrics import CkaConfig
from .nn import NetworkSpec, TrainConfig
from .probes import ProbeConfig

KINDS = ("tunnel", "ood", "stitch", "develop", "sweep", "shorter", "metrics")


@dataclass(frozen=True)
class RunConfig:
    kind: str
    data: BlobSpec
    network: NetworkSpec
    train: TrainConfig
    probe: ProbeConfig = ProbeConfig()
    spectrum: SpectrumPolicy = SpectrumPolicy()
    cka: CkaConfig = CkaConfig()
    runs: int = 3
    seed: int = 0
    threads: int = 1
    out_dir: str | None = None
    # experiment-specific sections
    ood_data: BlobSpec | None = None          # ood
    partition: tuple[tuple[int, ...], ...] | None = None  # stitch / shorter
    truncation_depths: tuple[int, ...] | None = None      # shorter
    depths: tuple[int, ...] | None = None     # sweep
    widths: tuple[int, ...] | None = None     # sweep
    class_counts: tuple[int, ...] | None = None  # sweep
    equalize_steps: bool = True               # sweep, class-count axis
    rank_capture_steps: int = 75              # develop
    csv_train: str | None = None              # CSV data source override
    csv_test: str | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown experiment kind {self.kind!r}; expected one of {KINDS}")
        if self.runs < 1 or self.threads < 1:
            raise ValueError("runs and threads must be >= 1")
        if self.rank_capture_steps < 0:
            raise ValueError("rank_capture_steps must be >= 0")
        if (self.csv_train is None) != (self.csv_test is None):
            raise ValueError("csv_train and csv_test must be given together")


# Calibrated desk-scale defaults. The reference task uses clustered blobs so
# that the input is not linearly separable and the probe curve genuinely
# rises through the early layers; the two-task (stitch/shorter) preset uses
# slower, momentum-free training so that sequential fine-tuning rewires the
# extractor while leaving the tunnel essentially untouched.

_REFERENCE_DATA = BlobSpec(
    num_classes=10, dim=32, per_class_train=500, per_class_test=100,
    center_scale=3.0, noise_std=0.8, seed=0, clusters_per_class=32,
)
_REFERENCE_NET = NetworkSpec(input_dim=32, hidden_widths=(256,) * 12, num_classes=10)
_REFERENCE_TRAIN = TrainConfig(
    learning_rate=0.02, momentum=0.9, weight_decay=3e-3,
    epochs=30, batch_size=128, seed=0, checkpoint_every=10,
)

_TWO_TASK_DATA = BlobSpec(
    num_classes=10, dim=32, per_class_train=500, per_class_test=200,
    center_scale=3.0, noise_std=0.8, seed=0, clusters_per_class=64,
)
_TWO_TASK_NET = NetworkSpec(input_dim=32, hidden_widths=(256,) * 10, num_classes=10)
_TWO_TASK_TRAIN = TrainConfig(
    learning_rate=0.05, momentum=0.0, weight_decay=5e-3,
    epochs=45, batch_size=256, lr_decay_milestones=(30,), lr_decay_gamma=0.1,
    seed=0, checkpoint_every=0,
)
_TWO_TASK_PARTITION = ((0, 1, 2, 3, 4), (5, 6, 7, 8, 9))


def default_config(kind: str) -> RunConfig:
    """The full reference run configuration for an experiment kind."""
    base = RunConfig(
        kind=kind if kind in KINDS else "tunnel",
        data=_REFERENCE_DATA,
        network=_REFERENCE_NET,
        train=_REFERENCE_TRAIN,
    )
    if kind == "tunnel" or kind == "metrics":
        return base
    if kind == "ood":
        return replace(base, ood_data=replace(_REFERENCE_DATA, seed=99))
    if kind == "develop":
        return replace(base, train=replace(_REFERENCE_TRAIN, checkpoint_every=5))
    if kind == "sweep":
        return replace(base, depths=(8, 12, 16))
    if kind in ("stitch", "shorter"):
        cfg = replace(
            base,
            data=_TWO_TASK_DATA,
            network=_TWO_TASK_NET,
            train=_TWO_TASK_TRAIN,
            partition=_TWO_TASK_PARTITION,
        )
        if kind == "shorter":
            cfg = replace(cfg, truncation_depths=(7, 10))
        return cfg
    raise ValueError(f"unknown experiment kind {kind!r}")


_SECTION_TYPES = {
    "data": BlobSpec,
    "ood_data": BlobSpec,
    "network": NetworkSpec,
    "train": TrainConfig,
    "probe": ProbeConfig,
    "spectrum": SpectrumPolicy,
    "cka": CkaConfig,
}
_TUPLE_KEYS = {"partition", "truncation_depths", "depths", "widths", "class_counts"}


def _build_section(cls, value: Any, path: str):
    if isinstance(value, cls):
        return value
    if not isinstance(value, dict):
        raise ValueError(f"{path}: expected an object for {cls.__name__}, got {type(value).__name__}")
    names = {f.name: f for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, val in value.items():
        if key not in names:
            raise ValueError(f"{path}.{key}: unknown key (not a {cls.__name__} field)")
        ftype = names[key].type
        if isinstance(val, list):
            val = tuple(val)
        kwargs[key] = val
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ValueError(f"{path}: {exc}") from None


def config_from_dict(doc: dict, defaults: RunConfig | None = None) -> RunConfig:
    """Build a RunConfig from a JSON-style dict, rejecting unknown keys."""
    if not isinstance(doc, dict):
        raise ValueError("config document must be a JSON object")
    kind = doc.get("kind") or (defaults.kind if defaults else None)
    if kind is None:
        raise ValueError("config.kind: missing experiment kind")
    base = defaults if defaults is not None else default_config(kind)
    base = replace(base, kind=kind)
    field_names = {f.name for f in dataclasses.fields(RunConfig)}
    kwargs: dict[str, Any] = {}
    for key, value in doc.items():
        if key == "kind":
            continue
        if key not in field_names:
            raise ValueError(f"config.{key}: unknown key")
        if key in _SECTION_TYPES and value is not None:
            current = getattr(base, key)
            if isinstance(value, dict) and current is not None:
                merged = {**_section_to_dict(current), **value}
                # re-check unknown keys against the section type, not the merge
                for k in value:
                    if k not in {f.name for f in dataclasses.fields(_SECTION_TYPES[key])}:
                        raise ValueError(f"config.{key}.{k}: unknown key")
                value = merged
            kwargs[key] = _build_section(_SECTION_TYPES[key], value, f"config.{key}")
        elif key == "partition" and value is not None:
            kwargs[key] = tuple(tuple(int(c) for c in group) for group in value)
        elif key in _TUPLE_KEYS and value is not None:
            kwargs[key] = tuple(value)
        else:
            kwargs[key] = value
    try:
        return replace(base, **kwargs)
    except (TypeError, ValueError) as exc:
        raise ValueError(f"config: {exc}") from None


def _section_to_dict(obj) -> dict:
    out = {}
    for f in dataclasses.fields(obj):
        v = getattr(obj, f.name)
        out[f.name] = list(v) if isinstance(v, tuple) else v
    return out


def config_to_dict(cfg: RunConfig) -> dict:
    """Canonical JSON-ready form; feeding it back reproduces the config.

    out_dir is normalized to None: where a report lands is not part of the
    experiment's identity, and embedding it would break byte-identical
    reports across output directories.
    """
    out: dict[str, Any] = {"kind": cfg.kind}
    for f in dataclasses.fields(RunConfig):
        if f.name == "kind":
            continue
        v = None if f.name == "out_dir" else getattr(cfg, f.name)
        if dataclasses.is_dataclass(v) and not isinstance(v, type):
            out[f.name] = _section_to_dict(v)
        elif isinstance(v, tuple):
            out[f.name] = [list(g) if isinstance(g, tuple) else g for g in v]
        else:
            out[f.name] = v
    return out


def load_config(path) -> RunConfig:
    with open(path, "r", encoding="utf-8") as f:
        try:
            doc = json.load(f)
        except json.JSONDecodeError as exc:
            raise ValueError(f"{path}: invalid JSON: {exc}") from None
    return config_from_dict(doc)


def _parse_literal(text: str) -> Any:
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(cfg: RunConfig, assignments: list[str]) -> RunConfig:
    """Apply dotted-key overrides like `train.learning_rate=0.05`."""
    doc = config_to_dict(cfg)
    for item in assignments:
        if "=" not in item:
            raise ValueError(f"override {item!r} must look like key=value")
        key, _, raw = item.partition("=")
        parts = key.strip().split(".")
        target = doc
        for p in parts[:-1]:
            if p not in target or not isinstance(target[p], dict):
                raise ValueError(f"override key {key!r}: no section {p!r}")
            target = target[p]
        target[parts[-1]] = _parse_literal(raw)
    return config_from_dict(doc)
