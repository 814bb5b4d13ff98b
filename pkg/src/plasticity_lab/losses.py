"""Losses returning (loss, gradient w.r.t. the network output).

All losses average over the batch axis, so gradients carry a 1/B factor.
"""
import dataclasses

import numpy as np
from scipy.special import log_softmax, softmax

from .utils import ConfigError, ShapeError, TargetRangeError

LOSS_KINDS = ("mse", "xent", "two_hot")


def mse_loss(pred: "numpy array (b, k)", target: "numpy array (b, k)") -> tuple[float, "numpy array (b, k)"]:
    """mean over the batch of the squared error summed over outputs"""
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ShapeError(f"prediction shape {pred.shape} does not match target shape {target.shape}")
    diff = pred - target
    b = pred.shape[0]
    return float((diff**2).sum() / b), 2 * diff / b


def soft_xent_loss(logits: "numpy array (b, k)", target_dist: "numpy array (b, k)") -> tuple[float, "numpy array (b, k)"]:
    """cross entropy against arbitrary target distributions"""
    logp = log_softmax(logits, axis=-1)
    b = logits.shape[0]
    loss = -(target_dist * logp).sum() / b
    return float(loss), (np.exp(logp) - target_dist) / b


def smoothed_one_hot(labels: "numpy array (b,)", num_classes: int, smoothing: float = 0.0) -> "numpy array (b, k)":
    labels = np.asarray(labels)
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        raise ConfigError(f"labels must be in [0, {num_classes})", path="labels", value=int(labels.max() if labels.max() >= num_classes else labels.min()))
    out = np.full((labels.shape[0], num_classes), smoothing / num_classes)
    out[np.arange(labels.shape[0]), labels] += 1 - smoothing
    return out


def xent_loss(logits: "numpy array (b, k)", labels: "numpy array (b,)", smoothing: float = 0.0) -> tuple[float, "numpy array (b, k)"]:
    """softmax cross entropy against (1-smoothing)*onehot + smoothing*uniform"""
    logits = np.asarray(logits, dtype=np.float64)
    if not 0 <= smoothing < 1:
        raise ConfigError("smoothing must be in [0, 1)", path="smoothing", value=smoothing)
    return soft_xent_loss(logits, smoothed_one_hot(labels, logits.shape[-1], smoothing))


@dataclasses.dataclass(frozen=True)
class TwoHotCodec:
    """Categorical encoding of reals on the integer grid {-bound, ..., bound}."""
    bound: int
    smoothing: float = 0.0

    def __post_init__(self) -> None:
        if not isinstance(self.bound, (int, np.integer)) or self.bound < 1:
            raise ConfigError("two-hot bound must be a positive integer", path="bound", value=self.bound)
        if not 0 <= self.smoothing < 1:
            raise ConfigError("smoothing must be in [0, 1)", path="smoothing", value=self.smoothing)

    @property
    def num_atoms(self) -> int:
        return 2 * self.bound + 1

    @property
    def atoms(self) -> "numpy array (2M+1,)":
        return np.arange(-self.bound, self.bound + 1, dtype=np.float64)

    def encode(self, c: "float | numpy array (n,)") -> "numpy array (2M+1,) | (n, 2M+1)":
        values = np.atleast_1d(np.asarray(c, dtype=np.float64))
        bad = np.abs(values) > self.bound
        if bad.any() or not np.isfinite(values).all():
            raise TargetRangeError(float(values[bad | ~np.isfinite(values)][0]), self.bound)
        lo = np.floor(values)
        hi = np.ceil(values)
        rows = np.arange(values.shape[0])
        out = np.zeros((values.shape[0], self.num_atoms))
        out[rows, (lo + self.bound).astype(int)] = hi - values
        # integer values: lo == hi, all mass ends up on one atom
        out[rows, (hi + self.bound).astype(int)] += 1 - (hi - values)
        if self.smoothing:
            out = (1 - self.smoothing) * out + self.smoothing / self.num_atoms
        return out[0] if np.ndim(c) == 0 else out

    def decode(self, p: "numpy array (..., 2M+1)") -> "float | numpy array":
        out = np.asarray(p, dtype=np.float64) @ self.atoms
        return float(out) if np.ndim(out) == 0 else out

    def decode_logits(self, logits: "numpy array (..., 2M+1)") -> "numpy array":
        return self.decode(softmax(logits, axis=-1))


def two_hot_loss(codec: TwoHotCodec, logits: "numpy array (b, 2M+1)", c: "numpy array (b,)") -> tuple[float, "numpy array (b, 2M+1)"]:
    logits = np.asarray(logits, dtype=np.float64)
    if logits.shape[-1] != codec.num_atoms:
        raise ShapeError(f"two-hot head needs {codec.num_atoms} logits, got {logits.shape[-1]}")
    return soft_xent_loss(logits, codec.encode(np.asarray(c, dtype=np.float64).reshape(-1)))
