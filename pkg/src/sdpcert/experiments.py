"""Experiment protocols shared by the CLI, scripts/ and the acceptance tests."""
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import bounds
from .attacks import PgdConfig, run_attack
from .data import LabeledDataset, load_idx
from .errors import ConfigError
from .model import Network, predict
from .seeding import substream
from .train import TrainConfig, train

log = logging.getLogger(__name__)

BOUND_COLUMNS = ("epsilon", "clean_error", "sdp_error", "spectral_error", "frobenius_error")

MNIST_FILES = {
    "train_images": "train-images-idx3-ubyte",
    "train_labels": "train-labels-idx1-ubyte",
    "test_images": "t10k-images-idx3-ubyte",
    "test_labels": "t10k-labels-idx1-ubyte",
}


def bounds_table(net: Network, X, y, epsilons, cert: bounds.DualCertificate) -> list:
    """One dict per radius with the clean error and the three upper bounds."""
    clean = float(np.mean(predict(net, X) != y))
    return [{
        "epsilon": float(eps),
        "clean_error": clean,
        "sdp_error": bounds.certified_error(net, X, y, eps, cert),
        "spectral_error": bounds.norm_bound_error(net, X, y, eps, "spectral"),
        "frobenius_error": bounds.norm_bound_error(net, X, y, eps, "frobenius"),
    } for eps in epsilons]


def find_mnist(directory) -> dict:
    """Paths of the four MNIST IDX files, gzipped or not."""
    directory = Path(directory)
    found = {}
    for key, stem in MNIST_FILES.items():
        for name in (stem, stem + ".gz"):
            if (directory / name).is_file():
                found[key] = directory / name
                break
        else:
            raise ConfigError(f"{directory}: missing {stem}[.gz]")
    return found


def load_mnist(directory):
    paths = find_mnist(directory)
    train_set = load_idx(paths["train_images"], paths["train_labels"], k=10)
    test_set = load_idx(paths["test_images"], paths["test_labels"], k=10)
    return train_set, test_set


@dataclass
class ProtocolResult:
    net: Network
    clean_error: float
    pgd_error: float
    certified_error: float
    post_hoc_error: float
    training_duals: np.ndarray  # per-pair values, sorted pair order
    post_hoc_duals: np.ndarray
    log: list


def certification_protocol(cfg: TrainConfig, train_set: LabeledDataset,
                           test_set: LabeledDataset, epsilon: float = 0.1,
                           post_hoc_steps: int = 2000, pgd: PgdConfig | None = None,
                           workers: int = 1) -> ProtocolResult:
    """Train, then measure clean, PGD and certified error on ``test_set``.

    The certified error is reported twice: from the dual variables learned
    during training, and after ``post_hoc_steps`` further steps of
    :func:`bounds.minimize_dual` started from them.
    """
    result = train(cfg, train_set, on_epoch_end=lambda s, row: log.info("%s", row))
    net = result.net
    X, y = test_set.inputs, test_set.labels
    pgd = pgd or PgdConfig(epsilon)
    seed = int(substream(cfg.seed, "attack/eval").integers(2**62))
    attack = run_attack(net, X, y, "pgd", pgd, seed)
    trained = bounds.certificate_from_duals(net, result.state.duals, [epsilon])
    refined = bounds.certify_network(net, steps=post_hoc_steps, epsilon=[epsilon],
                                     workers=workers, start=trained)
    keys = sorted(trained.pairs)
    return ProtocolResult(
        net=net,
        clean_error=float(np.mean(predict(net, X) != y)),
        pgd_error=attack.error,
        certified_error=bounds.certified_error(net, X, y, epsilon, trained),
        post_hoc_error=bounds.certified_error(net, X, y, epsilon, refined),
        training_duals=np.array([trained.pairs[k].value for k in keys]),
        post_hoc_duals=np.array([refined.pairs[k].value for k in keys]),
        log=result.log,
    )


def mnist_config(scheme: str = "weighted", **overrides) -> TrainConfig:
    """The desk-scale MNIST setting: 500 hidden units, hinge loss, 90 epochs."""
    base = dict(objective="sdp_dual", loss="hinge", lam=0.05, lam_scheme=scheme,
                hidden=500, lr=1e-3, lr_decay=0.1, lr_decay_every=30, epochs=90,
                refresh_epochs=20, epsilon=0.1)
    base.update(overrides)
    return TrainConfig(**base)
