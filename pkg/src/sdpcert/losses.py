"""Per-example classification losses and their gradients w.r.t. the scores."""
import numpy as np
from scipy.special import log_softmax, softmax

from .errors import InvalidInputError

LOSSES = ("cross_entropy", "hinge")


def cross_entropy(scores, y):
    rows = np.arange(len(y))
    loss = -log_softmax(scores, axis=1)[rows, y]
    grad = softmax(scores, axis=1)
    grad[rows, y] -= 1.0
    return loss, grad


def multiclass_hinge(scores, y):
    """``sum_{i != y} max(0, 1 + f^i - f^y)``."""
    rows = np.arange(len(y))
    slack = 1.0 + scores - scores[rows, y][:, None]
    slack[rows, y] = 0.0
    active = (slack > 0).astype(np.float64)
    loss = (slack * active).sum(axis=1)
    grad = active
    grad[rows, y] = -active.sum(axis=1)
    return loss, grad


def max_margin(scores, y):
    """``max_{i != y} f^i - f^y``: the untargeted margin objective for attacks."""
    rows = np.arange(len(y))
    diffs = scores - scores[rows, y][:, None]
    diffs[rows, y] = -np.inf
    best = np.argmax(diffs, axis=1)
    grad = np.zeros_like(scores)
    grad[rows, best] = 1.0
    grad[rows, y] -= 1.0
    return diffs[rows, best], grad


def classification_loss(scores, y, kind):
    if kind == "cross_entropy":
        return cross_entropy(scores, y)
    if kind == "hinge":
        return multiclass_hinge(scores, y)
    raise InvalidInputError(f"unknown loss {kind!r}")
