"""Certified robustness for two-layer networks via a dual semidefinite bound."""
from .attacks import PgdConfig, attack_error, fgsm, pgd
from .bounds import (DualCertificate, build_pair_matrix, certified_error, certify_network,
                     dual_value, minimize_dual, qp_vertex_oracle)
from .data import LabeledDataset, load_idx, synth_blobs
from .model import Network, forward, margin, margin_input_grad
from .train import TrainConfig

__all__ = [
    "DualCertificate", "LabeledDataset", "Network", "PgdConfig", "TrainConfig", "attack_error",
    "build_pair_matrix", "certified_error", "certify_network", "dual_value", "fgsm", "forward",
    "load_idx", "margin", "margin_input_grad", "minimize_dual", "pgd", "qp_vertex_oracle",
    "synth_blobs",
]
__version__ = "0.1.0"
