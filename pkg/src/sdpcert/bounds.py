"""Upper bounds on the worst-case pairwise margin inside an l_inf ball.

For a pair (i, j) with ``v = V_i - V_j`` the certified margin is

    f^{ij}(x) + beta * eps / 4 * [D * lmax+(M - diag(c)) + sum(max(c, 0))]

where ``M`` is the (1 + d + m)-dimensional matrix from :func:`build_pair_matrix`,
``D = 1 + d + m`` and ``beta`` bounds the activation derivative. Any ``c``
gives a valid bound, and :func:`minimize_dual` tightens it.
"""
import itertools
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import linalg
from .errors import CapacityError, InvalidCertificateError, InvalidInputError, ParseError
from .model import Network, forward, margin, pair_vector, weight_hash

CERT_FORMAT = "sdpcert-certificate/1"
QP_MAX_HIDDEN = 20


@dataclass(frozen=True)
class PairCertMatrix:
    i: int
    j: int
    M: np.ndarray

    @property
    def dim(self) -> int:
        return self.M.shape[0]


def pair_matrix(W, v) -> np.ndarray:
    """Symmetric matrix whose quadratic form is the bilinear gradient bound.

    Indexing is ``y = (1, t, s)`` with ``t`` in [-1,1]^d and ``s`` in [-1,1]^m.
    Then ``y^T M y / 4 = t^T W^T diag(v) (1 + s) / 2``, so the maximum over
    sign vectors ``y`` is exactly ``max ||W^T diag(v) s'||_1`` over s' in {0,1}^m.
    """
    W = np.asarray(W, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    m, d = W.shape
    D = 1 + d + m
    M = np.zeros((D, D))
    A = W.T * v  # W^T diag(v), shape (d, m)
    M[0, 1:1 + d] = A.sum(axis=1)
    M[1:1 + d, 1 + d:] = A
    return M + M.T


def build_pair_matrix(net: Network, i: int, j: int) -> PairCertMatrix:
    return PairCertMatrix(i, j, pair_matrix(net.W, pair_vector(net, i, j)))


def _matrix(M):
    return M.M if isinstance(M, PairCertMatrix) else np.asarray(M, dtype=np.float64)


def _check_c(c, D):
    c = np.asarray(c, dtype=np.float64)
    if c.shape != (D,):
        raise InvalidInputError(f"c must have shape ({D},), got {c.shape}")
    if not np.all(np.isfinite(c)):
        raise InvalidInputError("c has non-finite entries")
    return c


def dual_value(M, c) -> float:
    """``D * lmax+(M - diag(c)) + 1^T max(c, 0)``; an upper bound on the SDP for every c."""
    M = _matrix(M)
    D = M.shape[0]
    c = _check_c(c, D)
    top = linalg.lambda_max(M - np.diag(c))
    return D * max(top, 0.0) + float(np.maximum(c, 0.0).sum())


def dual_subgradient(M, c, tol=linalg.DEFAULT_TOL):
    """Value and a subgradient of the dual objective in ``c``."""
    M = _matrix(M)
    D = M.shape[0]
    c = _check_c(c, D)
    top = linalg.top_eigenpair(M - np.diag(c), tol=tol)
    g = (c > 0).astype(np.float64)
    value = float(np.maximum(c, 0.0).sum())
    if top.value > 0:
        g -= D * top.vector ** 2
        value += D * top.value
    return value, g


def default_step(M) -> float:
    M = _matrix(M)
    return 0.1 * float(np.linalg.norm(M)) / M.shape[0]


def minimize_dual(M, steps: int = 2000, eta0: float | None = None, c0=None,
                  tol: float = linalg.DEFAULT_TOL, trace: list | None = None):
    """Subgradient descent on the dual, returning the best ``(c, value)`` seen.

    Steps are ``eta0 / sqrt(t)``. Before each step ``c`` is shifted by the
    current top eigenvalue of ``M - diag(c)``. The uniform shift is the exact
    minimiser along the all-ones direction, so it never increases the value,
    and it keeps the iterates near the face where the eigenvalue term vanishes.
    Every iterate is a valid certificate. If ``trace`` is a list, each
    iterate's ``(c, value)`` is appended to it.
    """
    M = _matrix(M)
    if steps < 1:
        raise InvalidInputError("steps must be >= 1")
    D = M.shape[0]
    c = np.zeros(D) if c0 is None else _check_c(c0, D).copy()
    if not np.any(M):
        return np.zeros(D), 0.0
    eta0 = default_step(M) if eta0 is None else float(eta0)
    best_c, best = c.copy(), dual_value(M, c)
    for t in range(1, steps + 1):
        top = linalg.top_eigenpair(M - np.diag(c), tol=tol)
        c = c + top.value
        value = float(np.maximum(c, 0.0).sum())
        if trace is not None:
            trace.append((c.copy(), value))
        if value < best:
            best, best_c = value, c.copy()
        # after the shift the top eigenvalue is 0 and the eigenvector unchanged
        g = (c > 0).astype(np.float64) - D * top.vector ** 2
        c = c - eta0 / np.sqrt(t) * g
    # rescore with a dense solve so the reported value does not rely on Lanczos accuracy
    return best_c, dual_value(M, best_c)


def qp_vertex_oracle(net: Network, i: int, j: int) -> float:
    """``max_{s in [0,1]^m, t in [-1,1]^d} t^T W^T diag(v) s`` by vertex enumeration."""
    if net.m > QP_MAX_HIDDEN:
        raise CapacityError(f"vertex enumeration needs m <= {QP_MAX_HIDDEN}, got {net.m}")
    B = pair_vector(net, i, j)[:, None] * net.W  # diag(v) W, shape (m, d)
    best = 0.0
    chunk = 1 << 14
    total = 1 << net.m
    bits = 1 << np.arange(net.m)
    for start in range(0, total, chunk):
        idx = np.arange(start, min(start + chunk, total))
        S = ((idx[:, None] & bits) > 0).astype(np.float64)
        best = max(best, float(np.abs(S @ B).sum(axis=1).max()))
    return best


def max_sign_quadratic(M) -> float:
    """``max_{y in {-1,1}^D} y^T M y`` by exhaustive enumeration (small D only)."""
    M = _matrix(M)
    D = M.shape[0]
    if D > 22:
        raise CapacityError(f"enumeration over 2^{D} sign vectors refused")
    Y = np.array(list(itertools.product((-1.0, 1.0), repeat=D)))
    return float(np.einsum("na,ab,nb->n", Y, M, Y).max())


# ---------------------------------------------------------------- certificates


@dataclass
class PairDual:
    i: int
    j: int
    c: np.ndarray
    value: float


@dataclass
class DualCertificate:
    weight_hash: str
    pairs: dict = field(default_factory=dict)  # (i, j) with i < j -> PairDual
    epsilon: list = field(default_factory=list)
    activation: str = "relu"

    def pair(self, i: int, j: int) -> PairDual:
        key = (min(i, j), max(i, j))
        if key not in self.pairs:
            raise InvalidCertificateError(f"certificate has no entry for pair {key}")
        return self.pairs[key]

    def value(self, i: int, j: int) -> float:
        return self.pair(i, j).value

    def value_matrix(self, k: int) -> np.ndarray:
        out = np.zeros((k, k))
        for (i, j), p in self.pairs.items():
            out[i, j] = out[j, i] = p.value
        return out

    def check(self, net: Network) -> None:
        h = weight_hash(net)
        if h != self.weight_hash:
            raise InvalidCertificateError(
                f"certificate is for weights {self.weight_hash[:12]}, network is {h[:12]}")
        missing = [(i, j) for i in range(net.k) for j in range(i + 1, net.k)
                   if (i, j) not in self.pairs]
        if missing:
            raise InvalidCertificateError(f"certificate lacks pairs {missing[:5]}")

    def to_dict(self) -> dict:
        return {
            "format": CERT_FORMAT,
            "weight_hash": self.weight_hash,
            "activation": self.activation,
            "epsilon": [float(e) for e in self.epsilon],
            "pairs": [
                {"i": p.i, "j": p.j, "dual_value": float(p.value),
                 "c": [float(a) for a in p.c]}
                for _, p in sorted(self.pairs.items())
            ],
        }

    @classmethod
    def from_dict(cls, obj: dict) -> "DualCertificate":
        if obj.get("format") != CERT_FORMAT:
            raise ParseError(f"not a certificate file (format={obj.get('format')!r})")
        pairs = {}
        for p in obj["pairs"]:
            i, j = int(p["i"]), int(p["j"])
            pairs[(min(i, j), max(i, j))] = PairDual(
                min(i, j), max(i, j), np.array(p["c"], dtype=np.float64), float(p["dual_value"]))
        return cls(obj["weight_hash"], pairs, list(obj.get("epsilon", [])),
                   obj.get("activation", "relu"))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1) + "\n")

    @classmethod
    def load(cls, path) -> "DualCertificate":
        try:
            obj = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ParseError(f"invalid JSON: {exc.msg}", offset=exc.pos, path=path) from exc
        return cls.from_dict(obj)


def all_pairs(k: int):
    return [(i, j) for i in range(k) for j in range(i + 1, k)]


def certificate_from_duals(net: Network, duals: dict, epsilon=()) -> DualCertificate:
    """Score given dual vectors ``{(i, j): c}`` exactly and wrap them as a certificate."""
    pairs = {}
    for (i, j), c in duals.items():
        a, b = min(i, j), max(i, j)
        c = np.asarray(c, dtype=np.float64)
        pairs[(a, b)] = PairDual(a, b, c.copy(), dual_value(pair_matrix(net.W, net.V[a] - net.V[b]), c))
    return DualCertificate(weight_hash(net), pairs, list(epsilon), net.activation)


def certify_network(net: Network, steps: int = 2000, epsilon=(), workers: int = 1,
                    start: DualCertificate | None = None) -> DualCertificate:
    """Run :func:`minimize_dual` for every unordered class pair.

    ``(i, j)`` and ``(j, i)`` share one dual vector: conjugating by
    ``diag(1, -I_d, I_m)`` maps ``M^{ij}`` to ``M^{ji}`` and fixes ``diag(c)``,
    so the dual objective is identical for both orders.
    """

    def solve(pair):
        i, j = pair
        c0 = None if start is None else start.pair(i, j).c
        c, value = minimize_dual(build_pair_matrix(net, i, j), steps=steps, c0=c0)
        return pair, PairDual(i, j, c, value)

    pairs = all_pairs(net.k)
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            results = list(pool.map(solve, pairs))
    else:
        results = [solve(p) for p in pairs]
    return DualCertificate(weight_hash(net), dict(results), list(epsilon), net.activation)


@dataclass(frozen=True)
class CertifiedMargin:
    i: int
    j: int
    value: float


def certified_pair_margin(net: Network, i: int, j: int, x, epsilon: float,
                          cert: DualCertificate) -> CertifiedMargin:
    cert.check(net)
    value = margin(net, i, j, x) + net.beta * epsilon / 4.0 * cert.value(i, j)
    return CertifiedMargin(i, j, float(value))


def _pair_margins(net, X, y):
    X = np.atleast_2d(X)
    y = np.asarray(y)
    if len(X) == 0:
        raise InvalidInputError("empty dataset")
    if np.any((y < 0) | (y >= net.k)):
        raise InvalidInputError("labels out of range")
    scores = forward(net, X)
    return scores - scores[np.arange(len(y)), y][:, None]


def certified_margins(net: Network, X, y, epsilon: float, cert: DualCertificate) -> np.ndarray:
    """Per-example ``max_{i != y}`` of the certified margin upper bound."""
    cert.check(net)
    diffs = _pair_margins(net, X, y)
    bound = diffs + net.beta * epsilon / 4.0 * cert.value_matrix(net.k)[:, y].T
    bound[np.arange(len(y)), y] = -np.inf
    return bound.max(axis=1)


def certified_error(net: Network, X, y, epsilon: float, cert: DualCertificate) -> float:
    """Fraction of examples not certified at radius ``epsilon``.

    An example is certified only if every certified margin is strictly
    negative. A margin of exactly zero counts as a failure. So at
    ``epsilon = 0`` this is the clean error with exact score ties counted
    as errors.
    """
    return float(np.mean(certified_margins(net, X, y, epsilon, cert) >= 0))


def _norm_bound_matrix(net, norm_W):
    V = net.V
    pair_norms = np.linalg.norm(V[:, None, :] - V[None, :, :], axis=2)
    return np.sqrt(net.d) * norm_W * pair_norms


def spectral_bound(net: Network, i: int, j: int, x, epsilon: float):
    """``f^{ij}(x) + eps sqrt(d) ||W||_2 ||V_i - V_j||_2``."""
    v = pair_vector(net, i, j)
    return margin(net, i, j, x) + epsilon * np.sqrt(net.d) * np.linalg.norm(net.W, 2) * np.linalg.norm(v)


def frobenius_bound(net: Network, i: int, j: int, x, epsilon: float):
    """``f^{ij}(x) + eps sqrt(d) ||W||_F ||V_i - V_j||_2``."""
    v = pair_vector(net, i, j)
    return margin(net, i, j, x) + epsilon * np.sqrt(net.d) * np.linalg.norm(net.W) * np.linalg.norm(v)


def norm_bound_error(net: Network, X, y, epsilon: float, kind: str) -> float:
    """Error bound from the spectral or Frobenius baseline (ties count as errors)."""
    if kind == "spectral":
        nw = np.linalg.norm(net.W, 2)
    elif kind == "frobenius":
        nw = np.linalg.norm(net.W)
    else:
        raise InvalidInputError(f"unknown bound {kind!r}")
    diffs = _pair_margins(net, X, y)
    bound = diffs + epsilon * _norm_bound_matrix(net, nw)[:, y].T
    bound[np.arange(len(y)), y] = -np.inf
    return float(np.mean(bound.max(axis=1) >= 0))


def gradient_ball_bound_linear(w1, w2, x, epsilon: float) -> float:
    """Exact worst case of a linear margin ``(w1 - w2)^T x`` over the l_inf ball."""
    diff = np.asarray(w1, dtype=np.float64) - np.asarray(w2, dtype=np.float64)
    return float(diff @ np.asarray(x, dtype=np.float64) + epsilon * np.abs(diff).sum())


def linear_attack_witness(w1, w2, x, epsilon: float) -> np.ndarray:
    """The maximiser ``x + eps * sign(w1 - w2)`` attaining the linear bound."""
    diff = np.asarray(w1, dtype=np.float64) - np.asarray(w2, dtype=np.float64)
    return np.asarray(x, dtype=np.float64) + epsilon * np.sign(diff)


def verify_certificate(net: Network, cert: DualCertificate, rtol: float = 1e-9) -> list:
    """Pairs whose stored dual value is below the value recomputed from their ``c``."""
    cert.check(net)
    bad = []
    for (i, j), p in sorted(cert.pairs.items()):
        actual = dual_value(build_pair_matrix(net, i, j), p.c)
        if p.value < actual - rtol * max(1.0, abs(actual)):
            bad.append((i, j, p.value, actual))
    return bad
