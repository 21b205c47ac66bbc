"""Linear classifiers on sparse codes or pooled group norms, losses and the gap penalty."""
from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from .container import CLASSIFIER_MAGIC, read_matrix, write_matrix
from .dictionary import GroupPartition
from .errors import InvalidInputError


def _values(x):
    return np.asarray(getattr(x, "values", x), dtype=np.float64)


@dataclass(frozen=True, eq=False)
class LinearClassifier:
    """Scores f = W code + b.

    A single row is a binary classifier: class 1 iff f > 0 and the margin is |f|.
    """

    weights: np.ndarray
    bias: np.ndarray

    def __post_init__(self):
        W = np.atleast_2d(np.asarray(self.weights, dtype=np.float64)).copy()
        b = np.asarray(self.bias, dtype=np.float64).reshape(-1).copy()
        if b.size != W.shape[0]:
            raise InvalidInputError(f"bias has {b.size} entries for {W.shape[0]} score rows")
        if not (np.all(np.isfinite(W)) and np.all(np.isfinite(b))):
            raise InvalidInputError("classifier parameters must be finite")
        W.flags.writeable = False
        b.flags.writeable = False
        object.__setattr__(self, "weights", W)
        object.__setattr__(self, "bias", b)

    @property
    def n_classes(self):
        return max(2, self.weights.shape[0])

    @property
    def binary(self):
        return self.weights.shape[0] == 1

    @property
    def n_features(self):
        return self.weights.shape[1]

    def scores(self, codes):
        Z = _values(codes)
        if Z.shape[-1] != self.n_features:
            raise InvalidInputError(f"code length {Z.shape[-1]} != classifier input {self.n_features}")
        return Z @ self.weights.T + self.bias

    def predict(self, codes):
        return predict_and_margin(self, codes)[0]

    def save(self, path):
        write_matrix(path, np.column_stack([self.weights, self.bias]), magic=CLASSIFIER_MAGIC)

    @classmethod
    def load(cls, path):
        M = read_matrix(path, magic=CLASSIFIER_MAGIC)
        return cls(M[:, :-1], M[:, -1])


def pool_groups(codes, partition: GroupPartition):
    """Per-group Euclidean norms; works on a single code or a (batch, m) stack."""
    return partition.group_norms(_values(codes))


def predict_and_margin(clf: LinearClassifier, codes):
    """(class, margin) for one code, or arrays of both for a batch.

    Ties go to the lowest class index with margin 0.
    """
    f = clf.scores(codes)
    single = f.ndim == 1
    f = np.atleast_2d(f)
    if clf.binary:
        s = f[:, 0]
        cls = (s > 0).astype(np.int64)
        margin = np.abs(s)
    else:
        cls = np.argmax(f, axis=1)
        top = f[np.arange(f.shape[0]), cls]
        rival = f.copy()
        rival[np.arange(f.shape[0]), cls] = -np.inf
        margin = top - rival.max(axis=1)
    if single:
        return int(cls[0]), float(margin[0])
    return cls, margin


class LossKind(enum.Enum):
    HINGE = "hinge"
    CROSS_ENTROPY = "cross_entropy"


def _loss_kind(kind):
    if isinstance(kind, LossKind):
        return kind
    try:
        return LossKind(str(kind).lower().replace("-", "_"))
    except ValueError:
        raise InvalidInputError(f"unknown loss kind {kind!r}") from None


def classification_loss(clf: LinearClassifier, codes, labels, kind="hinge", params_grad=False):
    """Mean loss over a batch and its gradient with respect to the codes.

    Hinge needs a single-score classifier and labels in {-1, +1} (class
    indices 0/1 are mapped to -1/+1).  With ``params_grad`` the gradients
    with respect to weights and bias are returned as well.
    """
    kind = _loss_kind(kind)
    Z = _values(codes)
    single = Z.ndim == 1
    Z = np.atleast_2d(Z)
    y = np.atleast_1d(np.asarray(labels)).astype(np.int64)
    if y.size != Z.shape[0]:
        raise InvalidInputError(f"{y.size} labels for {Z.shape[0]} codes")
    B = Z.shape[0]
    f = Z @ clf.weights.T + clf.bias
    if kind is LossKind.HINGE:
        if not clf.binary:
            raise InvalidInputError("hinge loss needs a single-score classifier")
        if np.any((y != -1) & (y != 1) & (y != 0)):
            raise InvalidInputError("hinge labels must be -1/+1 (or 0/1)")
        ys = np.where(y == 0, -1, y).astype(np.float64)
        s = f[:, 0]
        losses = np.maximum(0.0, 1.0 - ys * s)
        dscore = np.where(1.0 - ys * s > 0, -ys, 0.0)[:, None] / B
    else:
        C = f.shape[1]
        if C < 2:
            raise InvalidInputError("cross-entropy needs at least two score rows")
        if np.any((y < 0) | (y >= C)):
            raise InvalidInputError(f"labels must lie in 0..{C - 1}")
        z = f - f.max(axis=1, keepdims=True)
        logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
        losses = -logp[np.arange(B), y]
        dscore = np.exp(logp)
        dscore[np.arange(B), y] -= 1.0
        dscore /= B
    loss = float(losses.mean())
    gZ = dscore @ clf.weights
    if single:
        gZ = gZ[0]
    if params_grad:
        return loss, gZ, dscore.T @ Z, dscore.sum(axis=0)
    return loss, gZ


@dataclass(frozen=True)
class GapResult:
    value: float
    grad: np.ndarray
    degenerate: bool
    sample: int | None = None


def gap_per_sample(codes, partition: GroupPartition, gamma_threshold):
    """Per-sample gap (smallest active minus largest inactive group norm) and its gradient.

    Returns (gaps, grads, valid); invalid samples have gap +inf and zero gradient.
    """
    Z = np.atleast_2d(_values(codes))
    norms = partition.group_norms(Z)
    active = norms > gamma_threshold
    valid = active.any(axis=1) & (~active).any(axis=1)
    lo = np.where(active, norms, np.inf)
    hi = np.where(active, -np.inf, norms)
    gaps = np.where(valid, lo.min(axis=1) - hi.max(axis=1), np.inf)
    grads = np.zeros_like(Z)
    labels = partition.labels
    rows = np.flatnonzero(valid)
    for j_of, sgn in ((np.argmin(lo, axis=1), 1.0), (np.argmax(hi, axis=1), -1.0)):
        for i in rows:
            j = j_of[i]
            n = norms[i, j]
            if n > 0:
                sel = labels == j
                grads[i, sel] += sgn * Z[i, sel] / n
    return gaps, grads, valid


def gap_regularizer(codes, partition: GroupPartition, gamma_threshold) -> GapResult:
    """Negative smallest per-sample gap between active and inactive group norms.

    A group is active when its norm exceeds gamma_threshold.  Samples with no
    active or no inactive group are skipped; if none remain the value is 0 and
    ``degenerate`` is set.  The subgradient touches only the minimizing sample's
    two extreme groups.
    """
    shape = _values(codes).shape
    Z = np.atleast_2d(_values(codes))
    if Z.shape[0] == 0:
        raise InvalidInputError("empty batch")
    gaps, grads, valid = gap_per_sample(Z, partition, gamma_threshold)
    grad = np.zeros_like(Z)
    if not valid.any():
        return GapResult(0.0, grad.reshape(shape), True)
    i = int(np.argmin(gaps))
    grad[i] = -grads[i]
    return GapResult(-float(gaps[i]), grad.reshape(shape), False, i)


# --- group activity statistics ----------------------------------------------

@dataclass(frozen=True)
class GroupStatistics:
    inactive_rate: float
    mean_group_accuracy: float
    exact_combination_rate: float
    n_samples: int

    def as_row(self):
        return {"Inactive Groups": self.inactive_rate, "Mean Grp. Acc.": self.mean_group_accuracy,
                "Found Grp. Combs.": self.exact_combination_rate}


def group_activity(codes_or_norms, partition: GroupPartition | None = None, threshold=0.0):
    """Boolean (batch, groups) activity; pass pooled norms with partition=None."""
    A = np.atleast_2d(_values(codes_or_norms))
    norms = A if partition is None else partition.group_norms(A)
    return norms > threshold


def group_statistics(estimated_active, true_active) -> GroupStatistics:
    """Inactive-group rate, per-group accuracy and exact-combination rate."""
    est = np.atleast_2d(np.asarray(estimated_active, dtype=bool))
    tru = np.atleast_2d(np.asarray(true_active, dtype=bool))
    if est.shape != tru.shape:
        raise InvalidInputError(f"activity shapes differ: {est.shape} vs {tru.shape}")
    return GroupStatistics(float((~est).mean()), float((est == tru).mean()),
                           float(np.all(est == tru, axis=1).mean()), est.shape[0])
