"""tunnelscope: measure how small classifiers split into extractor and tunnel."""

from .analysis import (
    CapacityReport,
    DevelopmentReport,
    MetricsReport,
    OodReport,
    ShorterReport,
    StitchReport,
    TunnelDetection,
    TunnelReport,
    detect_tunnel,
    run_capacity_sweep,
    run_development_experiment,
    run_metrics_experiment,
    run_ood_experiment,
    run_shorter_network_experiment,
    run_stitch_experiment,
    run_tunnel_experiment,
)
from .config import RunConfig, config_from_dict, config_to_dict, default_config, load_config
from .data import (
    BlobSpec,
    Dataset,
    apply_standardization,
    class_subset,
    feature_stats,
    load_csv,
    make_blobs,
    ood_pair,
    save_csv,
    split_tasks,
    standardize_pair,
)
from .linalg import SpectrumPolicy, numerical_rank, sample_covariance, singular_values
from .metrics import (
    CkaConfig,
    DegenerateRepresentationsError,
    VarianceReport,
    cka,
    cka_matrix,
    hsic_unbiased,
    intra_inter_variance,
    l1_drift,
    representation_rank,
)
from .nn import (
    ActivationSet,
    Checkpoint,
    Network,
    NetworkSpec,
    TrainConfig,
    TrainingDivergedError,
    TrainResult,
    forward_collect,
    init_network,
    load_checkpoint,
    network_accuracy,
    network_from_parameters,
    reset_layers,
    save_checkpoint,
    stitch,
    train,
    truncate,
    weight_change_norm,
)
from .probes import Probe, ProbeConfig, ProbeCurve, probe_accuracy, probe_curve, train_probe

__version__ = "0.1.0"
