from dataclasses import replace

import pytest

from tunnelscope import analysis
from tunnelscope.config import default_config


@pytest.fixture(scope="session")
def ref_artifacts():
    """Reference tunnel run: trained backbone, checkpoints, datasets, report."""
    return analysis._tunnel_artifacts(default_config("tunnel"))


@pytest.fixture(scope="session")
def ood_report():
    return analysis.run_ood_experiment(default_config("ood"))


@pytest.fixture(scope="session")
def depth_sweep():
    cfg = replace(default_config("sweep"), depths=(8, 16))
    return analysis.run_capacity_sweep(cfg)


@pytest.fixture(scope="session")
def class_sweep():
    cfg = replace(default_config("sweep"), depths=None, class_counts=(3,))
    return analysis.run_capacity_sweep(cfg)


@pytest.fixture(scope="session")
def stitch_report():
    return analysis.run_stitch_experiment(default_config("stitch"))


@pytest.fixture(scope="session")
def dev_report():
    return analysis.run_development_experiment(default_config("develop"))


@pytest.fixture(scope="session")
def shorter_report(stitch_report):
    cfg = default_config("shorter")
    full_depth = len(cfg.network.hidden_widths)
    extractor_len = stitch_report.split_layer + 1
    cfg = replace(cfg, truncation_depths=(extractor_len, full_depth))
    return analysis.run_shorter_network_experiment(cfg)
