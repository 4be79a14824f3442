"""FGSM and multi-restart PGD under an l_inf budget, clipped to [0, 1]."""
import csv
import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .errors import InvalidInputError
from .losses import LOSSES, cross_entropy, max_margin
from .model import Network, activate, activation_grad, forward, max_wrong_margin, predict

ATTACKS = ("fgsm", "pgd")


@dataclass(frozen=True)
class PgdConfig:
    epsilon: float
    step_size: float = 0.1
    iterations: int = 40
    restarts: int = 5
    # "hinge" ascends max_{i != y} f^{iy}; cross-entropy works better even on hinge-trained nets
    loss: str = "cross_entropy"

    def __post_init__(self):
        if self.epsilon < 0:
            raise InvalidInputError("epsilon must be >= 0")
        if not self.step_size > 0:
            raise InvalidInputError("step_size must be > 0")
        if self.iterations < 1 or self.restarts < 1:
            raise InvalidInputError("iterations and restarts must be >= 1")
        if self.loss not in LOSSES:
            raise InvalidInputError(f"unknown attack loss {self.loss!r}")


def _attack_loss(scores, y, kind):
    if kind == "cross_entropy":
        return cross_entropy(scores, y)
    return max_margin(scores, y)


def loss_and_input_grad(net: Network, X, y, kind="cross_entropy"):
    """Attack objective per example and its gradient w.r.t. the inputs."""
    z = X @ net.W.T
    scores = activate(z, net.activation) @ net.V.T
    loss, g_scores = _attack_loss(scores, y, kind)
    g_hidden = (g_scores @ net.V) * activation_grad(z, net.activation)
    return loss, g_hidden @ net.W


def _prepare(net, x, y):
    X = np.asarray(x, dtype=np.float64)
    single = X.ndim == 1
    X = np.atleast_2d(X)
    y = np.atleast_1d(np.asarray(y))
    if X.shape[1] != net.d or len(y) != len(X):
        raise InvalidInputError("inputs and labels do not match the network")
    if not np.issubdtype(y.dtype, np.integer) or np.any((y < 0) | (y >= net.k)):
        raise InvalidInputError(f"labels must be integers in [0, {net.k})")
    return X, y.astype(np.int64), single


def _project(Xadv, X, eps):
    return np.clip(np.clip(Xadv, X - eps, X + eps), 0.0, 1.0)


def fgsm(net: Network, x, y, epsilon: float, loss: str = "cross_entropy"):
    """One signed-gradient step of size ``epsilon``; ``sign(0) = 0``."""
    X, y, single = _prepare(net, x, y)
    if epsilon == 0:
        return X[0].copy() if single else X.copy()
    _, g = loss_and_input_grad(net, X, y, loss)
    adv = _project(X + epsilon * np.sign(g), X, epsilon)
    return adv[0] if single else adv


def pgd_batch(net: Network, X, y, cfg: PgdConfig, rng: np.random.Generator):
    """Best adversarial point per example over all restarts and iterates.

    Restart 0 starts at ``x`` and its first step is the full FGSM step, so
    PGD never does worse than FGSM. The other ``cfg.restarts`` restarts start
    uniformly in the ball. Points are ranked by (misclassified, attack loss).
    """
    X, y, _ = _prepare(net, X, y)
    eps = cfg.epsilon
    if eps == 0:
        return X.copy()
    best = X.copy()
    best_loss = _attack_loss(forward(net, X), y, cfg.loss)[0]
    best_wrong = predict(net, X) != y

    def consider(cand, loss):
        nonlocal best, best_loss, best_wrong
        wrong = predict(net, cand) != y
        better = (wrong & ~best_wrong) | ((wrong == best_wrong) & (loss > best_loss))
        best[better] = cand[better]
        best_loss = np.where(better, loss, best_loss)
        best_wrong = best_wrong | wrong

    for restart in range(cfg.restarts + 1):
        if restart == 0:
            cur = X.copy()
        else:
            cur = _project(X + rng.uniform(-eps, eps, size=X.shape), X, eps)
        loss, g = loss_and_input_grad(net, cur, y, cfg.loss)
        if restart > 0:
            consider(cur, loss)
        for it in range(cfg.iterations):
            step = eps if (restart == 0 and it == 0) else cfg.step_size
            cur = _project(cur + step * np.sign(g), X, eps)
            loss, g = loss_and_input_grad(net, cur, y, cfg.loss)
            consider(cur, loss)
    return best


def pgd(net: Network, x, y, cfg: PgdConfig, seed: int = 0):
    X, yy, single = _prepare(net, x, y)
    adv = pgd_batch(net, X, yy, cfg, np.random.default_rng(seed))
    return adv[0] if single else adv


@dataclass
class AttackReport:
    adversarial: np.ndarray
    loss: np.ndarray
    predicted: np.ndarray
    success: np.ndarray  # attacked prediction differs from the label
    clean_correct: np.ndarray
    attack_margin: np.ndarray  # max_{i != y} f^{iy} at the adversarial point

    @property
    def error(self) -> float:
        return float(np.mean(self.success))

    @property
    def clean_error(self) -> float:
        return float(1.0 - np.mean(self.clean_correct))


def run_attack(net: Network, X, y, attack: str, cfg: PgdConfig, seed: int = 0,
               batch_size: int = 1000) -> AttackReport:
    X, y, _ = _prepare(net, X, y)
    if len(X) == 0:
        raise InvalidInputError("empty dataset")
    if attack not in ATTACKS:
        raise InvalidInputError(f"unknown attack {attack!r}")
    rng = np.random.default_rng(seed)
    parts = []
    for start in range(0, len(X), batch_size):
        xb, yb = X[start:start + batch_size], y[start:start + batch_size]
        if attack == "fgsm":
            parts.append(fgsm(net, xb, yb, cfg.epsilon, cfg.loss))
        else:
            parts.append(pgd_batch(net, xb, yb, cfg, rng))
    adv = np.concatenate(parts)
    scores = forward(net, adv)
    pred = np.argmax(scores, axis=1)
    return AttackReport(
        adversarial=adv,
        loss=_attack_loss(scores, y, cfg.loss)[0],
        predicted=pred,
        success=pred != y,
        clean_correct=predict(net, X) == y,
        attack_margin=max_wrong_margin(net, adv, y)[0],
    )


def attack_error(net: Network, X, y, attack: str, cfg: PgdConfig, seed: int = 0) -> float:
    return run_attack(net, X, y, attack, cfg, seed).error


CSV_COLUMNS = ("attack", "epsilon", "example_id", "clean_correct", "attacked_correct",
               "attack_margin")


def write_attack_csv(path, results) -> None:
    """``results`` is a list of ``(attack, epsilon, AttackReport)``."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        for attack, eps, rep in results:
            for n in range(len(rep.success)):
                w.writerow([attack, repr(float(eps)), n, int(rep.clean_correct[n]),
                            int(not rep.success[n]), repr(float(rep.attack_margin[n]))])


def read_attack_csv(path):
    """Rows grouped as ``{(attack, epsilon): {"attacked_correct": array, ...}}``."""
    groups = {}
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            key = (row["attack"], float(row["epsilon"]))
            g = groups.setdefault(key, {"example_id": [], "clean_correct": [],
                                        "attacked_correct": [], "attack_margin": []})
            g["example_id"].append(int(row["example_id"]))
            g["clean_correct"].append(int(row["clean_correct"]))
            g["attacked_correct"].append(int(row["attacked_correct"]))
            g["attack_margin"].append(float(row["attack_margin"]))
    return {k: {name: np.array(v) for name, v in g.items()} for k, g in groups.items()}


def write_attack_summary(path, weight_hash: str, cfg: PgdConfig, seed: int, results) -> None:
    summary = {
        "weight_hash": weight_hash,
        "seed": seed,
        "config": asdict(cfg),
        "results": [
            {"attack": a, "epsilon": float(e), "n": int(len(r.success)),
             "clean_error": r.clean_error, "attack_error": r.error}
            for a, e, r in results
        ],
    }
    Path(path).write_text(json.dumps(summary, indent=1) + "\n")
