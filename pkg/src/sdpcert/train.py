"""Training two-layer networks with the five objectives: normal, Frobenius- and
spectral-norm regularised, PGD-adversarial, and the dual-SDP certificate.

The dual-SDP objective for a batch is

    mean_n loss(x_n, y_n) + scale * sum_{sampled (i, j)} lam^{ij} R^{ij}(W, V, c^{ij}),
    R^{ij} = D * lmax+(M^{ij} - diag(c^{ij})) + sum(max(c^{ij}, 0)),

with one trainable ``c`` per unordered pair (both orders give the same R).
"""
import io
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from . import bounds, linalg
from .attacks import PgdConfig, pgd_batch
from .data import LabeledDataset
from .errors import DivergenceError, InvalidInputError, ParseError
from .losses import LOSSES, classification_loss
from .model import Network, activate, activation_grad, init_network, predict
from .seeding import substream

OBJECTIVES = ("normal", "frobenius", "spectral", "adversarial", "sdp_dual")
LAMBDA_SCHEMES = ("unweighted", "weighted")
# default strengths for 500-unit networks on 28x28 images
DEFAULT_LAMBDA = {"normal": 0.0, "frobenius": 0.08, "spectral": 0.09,
                  "adversarial": 0.5, "sdp_dual": 0.05}
CHECKPOINT_VERSION = 1


@dataclass
class TrainConfig:
    objective: str = "sdp_dual"
    loss: str = "hinge"
    lam: float | None = None  # None -> DEFAULT_LAMBDA[objective]
    lam_scheme: str = "unweighted"
    refresh_epochs: int = 20
    hidden: int = 500
    activation: str = "relu"
    lr: float = 1e-3
    lr_decay: float = 0.1
    lr_decay_every: int = 30
    epochs: int = 90
    batch_size: int = 64
    seed: int = 0
    # radius for the weighted scheme and the certificate column of the log
    epsilon: float = 0.1
    adv_epsilon: float = 0.3
    adv_step: float = 0.1
    adv_iterations: int = 40
    adv_restarts: int = 1
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    eig_tol: float = linalg.DEFAULT_TOL
    workers: int = 1
    log_certificate: bool = True

    def __post_init__(self):
        if self.objective not in OBJECTIVES:
            raise InvalidInputError(f"objective must be one of {OBJECTIVES}")
        if self.loss not in LOSSES:
            raise InvalidInputError(f"loss must be one of {LOSSES}")
        if self.lam_scheme not in LAMBDA_SCHEMES:
            raise InvalidInputError(f"lam_scheme must be one of {LAMBDA_SCHEMES}")
        if self.lam is None:
            self.lam = DEFAULT_LAMBDA[self.objective]
        if self.lam < 0:
            raise InvalidInputError("lam must be >= 0")
        if not 0 < self.lr_decay <= 1:
            raise InvalidInputError("lr_decay must lie in (0, 1]")
        if min(self.epochs, self.batch_size, self.hidden, self.refresh_epochs,
               self.lr_decay_every) < 1:
            raise InvalidInputError("epochs, batch_size, hidden, refresh_epochs and "
                                    "lr_decay_every must be >= 1")

    def learning_rate(self, epoch: int) -> float:
        return self.lr * self.lr_decay ** (epoch // self.lr_decay_every)

    @classmethod
    def field_names(cls):
        return [f.name for f in fields(cls)]


def pair_key(i, j):
    return (i, j) if i < j else (j, i)


@dataclass
class TrainState:
    net: Network
    duals: dict  # (i, j), i < j -> c vector of length D
    pair_weights: np.ndarray  # symmetric (k, k), zero diagonal
    moments: dict = field(default_factory=dict)  # name -> (first, second)
    step: int = 0
    epoch: int = 0

    @classmethod
    def fresh(cls, net: Network, scheme: str = "unweighted") -> "TrainState":
        k = net.k
        D = 1 + net.d + net.m
        duals = {p: np.zeros(D) for p in bounds.all_pairs(k)}
        if scheme == "weighted":
            w = np.full((k, k), 1.0 / (k * (k - 1) / 2))
        else:
            w = np.ones((k, k))
        np.fill_diagonal(w, 0.0)
        return cls(net, duals, w)

    def lambda_matrix(self, lam: float) -> np.ndarray:
        return lam * self.pair_weights


# ------------------------------------------------------------------ objectives


def classification_grads(net: Network, X, y, loss: str):
    """Mean loss over the batch and its gradients w.r.t. ``W`` and ``V``."""
    z = X @ net.W.T
    h = activate(z, net.activation)
    scores = h @ net.V.T
    per_example, g = classification_loss(scores, y, loss)
    g = g / len(y)
    dV = g.T @ h
    dz = (g @ net.V) * activation_grad(z, net.activation)
    return float(per_example.mean()), dz.T @ X, dV


def pair_regularizer(net: Network, i: int, j: int, c, tol=linalg.DEFAULT_TOL):
    """``R^{ij}`` and its subgradients w.r.t. ``W``, ``v = V_i - V_j`` and ``c``."""
    W = net.W
    d = net.d
    v = net.V[i] - net.V[j]
    M = bounds.pair_matrix(W, v)
    D = M.shape[0]
    top = linalg.top_eigenpair(M - np.diag(c), tol=tol)
    value = float(np.maximum(c, 0.0).sum())
    dc = (c > 0).astype(np.float64)
    if top.value <= 0:
        return value, np.zeros_like(W), np.zeros_like(v), dc
    u = top.vector
    value += D * top.value
    dc -= D * u * u
    # <D u u^T, M(v, W)> = 2 D v^T ((u_0 + u_s) * (W u_t))
    ut, us = u[1:1 + d], u[1 + d:]
    a = u[0] + us
    Wut = W @ ut
    dv = 2.0 * D * a * Wut
    dW = 2.0 * D * np.outer(a * v, ut)
    return value, dW, dv, dc


def sdp_regularizer(state: TrainState, pairs, lam_matrix, scale: float = 1.0,
                    tol=linalg.DEFAULT_TOL, workers: int = 1):
    """Weighted sum of ``R^{ij}`` over ordered ``pairs``, with gradients."""
    net = state.net
    dW = np.zeros_like(net.W)
    dV = np.zeros_like(net.V)
    dC = {}
    active = [(i, j) for i, j in pairs if lam_matrix[i, j] > 0]

    def one(pair):
        i, j = pair
        return pair, pair_regularizer(net, i, j, state.duals[pair_key(i, j)], tol)

    if workers > 1 and len(active) > 1:
        with ThreadPoolExecutor(workers) as pool:
            results = list(pool.map(one, active))
    else:
        results = [one(p) for p in active]
    total = 0.0
    for (i, j), (value, gW, gv, gc) in results:
        wgt = scale * lam_matrix[i, j]
        total += wgt * value
        dW += wgt * gW
        dV[i] += wgt * gv
        dV[j] -= wgt * gv
        key = pair_key(i, j)
        dC[key] = dC.get(key, 0.0) + wgt * gc
    return total, dW, dV, dC


def all_ordered_pairs(k: int):
    return [(i, j) for i in range(k) for j in range(k) if i != j]


def _sdp_parts(state, X, y, lam, loss, pairs, scale, tol, workers):
    value, dW, dV = classification_grads(state.net, X, y, loss)
    grads = {"W": dW, "V": dV}
    if lam == 0:
        return value, 0.0, grads
    if pairs is None:
        pairs = all_ordered_pairs(state.net.k)
    reg, rW, rV, dC = sdp_regularizer(state, pairs, state.lambda_matrix(lam), scale, tol,
                                      workers)
    grads["W"] = dW + rW
    grads["V"] = dV + rV
    grads.update(dC)
    return value, reg, grads


def sdp_dual_objective(state: TrainState, X, y, lam: float, loss: str = "hinge",
                       pairs=None, scale: float = 1.0, tol=linalg.DEFAULT_TOL,
                       workers: int = 1):
    """Batch objective and gradients ``{"W", "V", (i, j): dc}``.

    Without ``pairs`` the regulariser sums over every ordered pair.
    """
    value, reg, grads = _sdp_parts(state, X, y, lam, loss, pairs, scale, tol, workers)
    return value + reg, grads


def pair_sampling(k: int, rng: np.random.Generator):
    """Pairs ``(i_t, j)``, ``j != i_t``, for one uniformly drawn class ``i_t``.

    Multiplying their sum by ``k`` gives an unbiased estimate of the sum over
    all ordered pairs.
    """
    if k < 2:
        raise InvalidInputError("need at least two classes")
    i = int(rng.integers(k))
    return [(i, j) for j in range(k) if j != i]


def dual_value_matrix(net: Network, duals: dict) -> np.ndarray:
    """Exact dual value for every pair under the current ``c``."""
    k = net.k
    out = np.zeros((k, k))
    for (i, j), c in duals.items():
        out[i, j] = out[j, i] = bounds.dual_value(bounds.pair_matrix(net.W, net.V[i] - net.V[j]), c)
    return out


def update_pair_weights(net: Network, duals: dict, X, y, epsilon: float) -> np.ndarray:
    """Fraction of points whose worst certified pair is ``{i, j}``.

    For each point the maximising class ``i* = argmax_{i != y}`` of the
    certified margin is found, and the unordered pair ``{i*, y}`` gets the
    credit. The result is symmetric and sums to 1 over ``i < j``.
    """
    k = net.k
    dual = dual_value_matrix(net, duals)
    scores = activate(X @ net.W.T, net.activation) @ net.V.T
    rows = np.arange(len(y))
    bound = scores - scores[rows, y][:, None] + net.beta * epsilon / 4.0 * dual[:, y].T
    bound[rows, y] = -np.inf
    worst = np.argmax(bound, axis=1)
    counts = np.zeros((k, k))
    np.add.at(counts, (np.minimum(worst, y), np.maximum(worst, y)), 1.0)
    w = counts / len(y)
    return w + w.T


def _norm_regularizer(net: Network, kind: str):
    V_norm = float(np.linalg.norm(net.V))
    dV = net.V / V_norm if V_norm > 0 else np.zeros_like(net.V)
    if kind == "frobenius":
        W_norm = float(np.linalg.norm(net.W))
        dW = net.W / W_norm if W_norm > 0 else np.zeros_like(net.W)
        return W_norm + V_norm, dW, dV
    # spectral norm via the top eigenpair of the smaller Gram matrix
    W = net.W
    if W.shape[0] <= W.shape[1]:
        top = linalg.top_eigenpair(W @ W.T)
        sigma = math.sqrt(max(top.value, 0.0))
        left = top.vector
        right = W.T @ left / sigma if sigma > 0 else np.zeros(W.shape[1])
    else:
        top = linalg.top_eigenpair(W.T @ W)
        sigma = math.sqrt(max(top.value, 0.0))
        right = top.vector
        left = W @ right / sigma if sigma > 0 else np.zeros(W.shape[0])
    return sigma + V_norm, np.outer(left, right), dV


# ------------------------------------------------------------------ optimiser


def adam_update(state: TrainState, name, param, grad, lr, cfg: TrainConfig):
    m1, m2 = state.moments.get(name, (np.zeros_like(param), np.zeros_like(param)))
    m1 = cfg.beta1 * m1 + (1 - cfg.beta1) * grad
    m2 = cfg.beta2 * m2 + (1 - cfg.beta2) * grad * grad
    state.moments[name] = (m1, m2)
    t = state.step
    mhat = m1 / (1 - cfg.beta1 ** t)
    vhat = m2 / (1 - cfg.beta2 ** t)
    return param - lr * mhat / (np.sqrt(vhat) + cfg.adam_eps)


def train_step(state: TrainState, X, y, cfg: TrainConfig, lr: float, rngs) -> tuple:
    """One optimiser step; returns (objective value, regulariser value)."""
    net = state.net
    lam = cfg.lam
    reg = 0.0
    grads = {}
    if cfg.objective == "sdp_dual" and lam > 0:
        pairs = pair_sampling(net.k, rngs["pairs"])
        value, reg, grads = _sdp_parts(state, X, y, lam, cfg.loss, pairs, net.k,
                                       cfg.eig_tol, cfg.workers)
        value += reg
    else:
        value, dW, dV = classification_grads(net, X, y, cfg.loss)
        grads = {"W": dW, "V": dV}
        if cfg.objective in ("frobenius", "spectral") and lam > 0:
            r, rW, rV = _norm_regularizer(net, cfg.objective)
            reg = lam * r
            grads["W"] = dW + lam * rW
            grads["V"] = dV + lam * rV
        elif cfg.objective == "adversarial" and lam > 0:
            pgd_cfg = PgdConfig(cfg.adv_epsilon, cfg.adv_step, cfg.adv_iterations,
                                cfg.adv_restarts, "cross_entropy")
            Xadv = pgd_batch(net, X, y, pgd_cfg, rngs["attack"])
            adv_value, aW, aV = classification_grads(net, Xadv, y, "cross_entropy")
            reg = lam * adv_value
            grads["W"] = dW + lam * aW
            grads["V"] = dV + lam * aV
        value += reg
    if not math.isfinite(value):
        raise DivergenceError(f"non-finite objective at epoch {state.epoch}, step {state.step}")
    state.step += 1
    W = adam_update(state, "W", net.W, grads.pop("W"), lr, cfg)
    V = adam_update(state, "V", net.V, grads.pop("V"), lr, cfg)
    for key, gc in grads.items():
        state.duals[key] = adam_update(state, ("c",) + key, state.duals[key], gc, lr, cfg)
    if not (np.all(np.isfinite(W)) and np.all(np.isfinite(V))):
        raise DivergenceError(f"non-finite weights at epoch {state.epoch}, step {state.step}")
    state.net = net.replace(W=W, V=V)
    return value, reg


# ------------------------------------------------------------------ loop

LOG_COLUMNS = ("epoch", "lr", "objective", "regularizer", "clean_error", "cert_error",
               "dual_mean")


@dataclass
class TrainResult:
    net: Network
    certificate: "bounds.DualCertificate | None"
    log: list
    state: TrainState


def training_certificate(state: TrainState, epsilon=()) -> bounds.DualCertificate:
    """Certificate read straight off the trained dual variables."""
    return bounds.certificate_from_duals(state.net, state.duals, epsilon)


def train(cfg: TrainConfig, dataset: LabeledDataset, on_epoch_end=None,
          state: TrainState | None = None) -> TrainResult:
    """Run the epoch loop; deterministic given ``cfg.seed``.

    ``on_epoch_end(state, row)`` is called after every epoch. Passing a
    ``state`` (e.g. from :func:`load_checkpoint`) resumes at its epoch; the
    random streams restart from the seed.
    """
    X, y = dataset.inputs, dataset.labels
    if dataset.k < 2:
        raise InvalidInputError("need at least two classes")
    rngs = {name: substream(cfg.seed, name) for name in ("init", "train", "pairs", "attack")}
    if state is None:
        net = init_network(dataset.d, cfg.hidden, dataset.k, rngs["init"], cfg.activation)
        state = TrainState.fresh(net, cfg.lam_scheme)
    log = []
    for epoch in range(state.epoch, cfg.epochs):
        state.epoch = epoch
        lr = cfg.learning_rate(epoch)
        if (cfg.objective == "sdp_dual" and cfg.lam_scheme == "weighted"
                and epoch % cfg.refresh_epochs == 0):
            state.pair_weights = update_pair_weights(state.net, state.duals, X, y, cfg.epsilon)
        order = rngs["train"].permutation(len(y))
        values, regs = [], []
        for start in range(0, len(y), cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            value, reg = train_step(state, X[idx], y[idx], cfg, lr, rngs)
            values.append(value)
            regs.append(reg)
        state.epoch = epoch + 1
        row = {
            "epoch": epoch + 1,
            "lr": lr,
            "objective": float(np.mean(values)),
            "regularizer": float(np.mean(regs)),
            "clean_error": float(np.mean(predict(state.net, X) != y)),
            "cert_error": "",
            "dual_mean": "",
        }
        if cfg.log_certificate:
            cert = training_certificate(state, [cfg.epsilon])
            row["cert_error"] = bounds.certified_error(state.net, X, y, cfg.epsilon, cert)
            row["dual_mean"] = float(np.mean([p.value for p in cert.pairs.values()]))
        log.append(row)
        if on_epoch_end is not None:
            on_epoch_end(state, row)
    cert = training_certificate(state, [cfg.epsilon]) if cfg.objective == "sdp_dual" else None
    return TrainResult(state.net, cert, log, state)


def write_log_csv(path, rows) -> None:
    lines = [",".join(LOG_COLUMNS)]
    for row in rows:
        lines.append(",".join(repr(row[c]) if isinstance(row[c], float) else str(row[c])
                              for c in LOG_COLUMNS))
    Path(path).write_text("\n".join(lines) + "\n")


# ------------------------------------------------------------------ checkpoints


def save_checkpoint(path, state: TrainState) -> None:
    keys = sorted(state.duals)
    arrays = {
        "version": np.array(CHECKPOINT_VERSION),
        "network": np.frombuffer(state.net.to_bytes(), dtype=np.uint8),
        "step": np.array(state.step),
        "epoch": np.array(state.epoch),
        "pair_weights": state.pair_weights,
        "dual_keys": np.array(keys, dtype=np.int64).reshape(-1, 2),
        "dual_values": np.array([state.duals[k] for k in keys]).reshape(len(keys), -1),
    }
    for name, (m1, m2) in state.moments.items():
        label = "W" if name == "W" else "V" if name == "V" else f"c_{name[1]}_{name[2]}"
        arrays[f"m1_{label}"] = m1
        arrays[f"m2_{label}"] = m2
    buf = io.BytesIO()
    np.savez(buf, **arrays)
    Path(path).write_bytes(buf.getvalue())


def load_checkpoint(path) -> TrainState:
    with np.load(path) as z:
        if "version" not in z or int(z["version"]) != CHECKPOINT_VERSION:
            raise ParseError("unsupported checkpoint version", path=path)
        net = Network.from_bytes(z["network"].tobytes(), path=path)
        duals = {(int(a), int(b)): z["dual_values"][n].copy()
                 for n, (a, b) in enumerate(z["dual_keys"])}
        moments = {}
        for name in z.files:
            if not name.startswith("m1_"):
                continue
            label = name[3:]
            if label in ("W", "V"):
                key = label
            else:
                _, a, b = label.split("_")
                key = ("c", int(a), int(b))
            moments[key] = (z[name].copy(), z["m2_" + label].copy())
        return TrainState(net, duals, z["pair_weights"].copy(), moments,
                          int(z["step"]), int(z["epoch"]))
