"""Two-layer score-based classifiers ``f^i(x) = V_i . act(W x)`` (no biases)."""
import hashlib
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import InvalidInputError, ParseError

ACTIVATIONS = ("relu", "sigmoid")
# sup of the activation derivative
DERIVATIVE_BOUND = {"relu": 1.0, "sigmoid": 0.25}

MAGIC = b"CERTNET1"
_HEADER = struct.Struct("<8s3I8s")


@dataclass(frozen=True, eq=False)
class Network:
    W: np.ndarray  # (m, d)
    V: np.ndarray  # (k, m)
    activation: str = "relu"

    def __post_init__(self):
        W = np.array(self.W, dtype=np.float64)
        V = np.array(self.V, dtype=np.float64)
        if W.ndim != 2 or V.ndim != 2 or V.shape[1] != W.shape[0]:
            raise InvalidInputError(f"incompatible shapes W{W.shape} V{V.shape}")
        if min(W.shape + V.shape) < 1:
            raise InvalidInputError("empty weight matrix")
        if not (np.all(np.isfinite(W)) and np.all(np.isfinite(V))):
            raise InvalidInputError("weights must be finite")
        if self.activation not in ACTIVATIONS:
            raise InvalidInputError(f"unknown activation {self.activation!r}")
        W.flags.writeable = False
        V.flags.writeable = False
        object.__setattr__(self, "W", W)
        object.__setattr__(self, "V", V)

    @property
    def m(self) -> int:
        return self.W.shape[0]

    @property
    def d(self) -> int:
        return self.W.shape[1]

    @property
    def k(self) -> int:
        return self.V.shape[0]

    @property
    def beta(self) -> float:
        return DERIVATIVE_BOUND[self.activation]

    def replace(self, W=None, V=None) -> "Network":
        return Network(self.W if W is None else W, self.V if V is None else V,
                       self.activation)

    def to_bytes(self) -> bytes:
        tag = self.activation.encode().ljust(8, b"\0")
        return (_HEADER.pack(MAGIC, self.m, self.d, self.k, tag)
                + self.W.astype("<f8").tobytes() + self.V.astype("<f8").tobytes())

    @classmethod
    def from_bytes(cls, blob: bytes, path=None) -> "Network":
        if len(blob) < _HEADER.size:
            raise ParseError("truncated network header", offset=len(blob), path=path)
        magic, m, d, k, tag = _HEADER.unpack_from(blob)
        if magic != MAGIC:
            raise ParseError(f"bad magic {magic!r}", offset=0, path=path)
        activation = tag.rstrip(b"\0").decode("ascii", errors="replace")
        expected = _HEADER.size + 8 * (m * d + k * m)
        if len(blob) != expected:
            raise ParseError(f"expected {expected} bytes, found {len(blob)}",
                             offset=min(len(blob), expected), path=path)
        W = np.frombuffer(blob, "<f8", m * d, _HEADER.size).reshape(m, d)
        V = np.frombuffer(blob, "<f8", k * m, _HEADER.size + 8 * m * d).reshape(k, m)
        try:
            return cls(W, V, activation)
        except InvalidInputError as exc:
            raise ParseError(str(exc), path=path) from exc

    def save(self, path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path) -> "Network":
        return cls.from_bytes(Path(path).read_bytes(), path=path)


def weight_hash(net: Network) -> str:
    return hashlib.sha256(net.to_bytes()).hexdigest()


def init_network(d: int, m: int, k: int, rng: np.random.Generator,
                 activation: str = "relu") -> Network:
    """Uniform init with bound 1/sqrt(fan_in) per layer."""
    W = rng.uniform(-1.0, 1.0, size=(m, d)) / np.sqrt(d)
    V = rng.uniform(-1.0, 1.0, size=(k, m)) / np.sqrt(m)
    return Network(W, V, activation)


def activate(z, activation):
    if activation == "relu":
        return np.maximum(z, 0.0)
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def activation_grad(z, activation):
    if activation == "relu":
        # subgradient choice: derivative 0 at z == 0
        return (z > 0).astype(np.float64)
    s = activate(z, "sigmoid")
    return s * (1.0 - s)


def _check_input(net, x):
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != net.d or x.ndim not in (1, 2):
        raise InvalidInputError(f"input shape {x.shape} does not match d={net.d}")
    return x


def hidden(net: Network, x):
    """Pre-activations ``W x`` for a vector or a batch of row vectors."""
    x = _check_input(net, x)
    return x @ net.W.T


def forward(net: Network, x) -> np.ndarray:
    """Class scores; accepts a single input (d,) or a batch (n, d)."""
    return activate(hidden(net, x), net.activation) @ net.V.T


def predict(net: Network, x) -> np.ndarray:
    # argmax returns the first maximum, i.e. ties go to the lower class index
    return np.argmax(forward(net, x), axis=-1)


def _check_pair(net, i, j):
    if not (0 <= i < net.k and 0 <= j < net.k):
        raise InvalidInputError(f"class pair ({i}, {j}) out of range for k={net.k}")
    if i == j:
        raise InvalidInputError("pair must have i != j")


def pair_vector(net: Network, i: int, j: int) -> np.ndarray:
    """``v = V_i - V_j``."""
    _check_pair(net, i, j)
    return net.V[i] - net.V[j]


def margin(net: Network, i: int, j: int, x):
    """``f^i(x) - f^j(x)``; vectorised over a batch of inputs."""
    _check_pair(net, i, j)
    scores = forward(net, x)
    return scores[..., i] - scores[..., j]


def margin_input_grad(net: Network, i: int, j: int, x) -> np.ndarray:
    """Gradient of the pairwise margin w.r.t. the input: ``W^T diag(v) act'(W x)``."""
    v = pair_vector(net, i, j)
    z = hidden(net, x)
    return (activation_grad(z, net.activation) * v) @ net.W


def max_wrong_margin(net: Network, X, y):
    """``max_{i != y} f^{iy}(x)`` per example, and the maximising class."""
    scores = np.atleast_2d(forward(net, X))
    y = np.atleast_1d(y)
    rows = np.arange(len(y))
    diffs = scores - scores[rows, y][:, None]
    diffs[rows, y] = -np.inf
    best = np.argmax(diffs, axis=1)
    return diffs[rows, best], best
