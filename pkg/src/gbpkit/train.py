"""Dictionary pretraining, classifier training and approximator regression."""
from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass, field

import numpy as np

from .classify import LinearClassifier, _loss_kind, LossKind, classification_loss, gap_regularizer, predict_and_margin
from .dictionary import Dictionary, RegularizerSpec, as_dictionary
from .errors import DeadDictionaryError, InvalidInputError, TrainingDivergedError
from .nn import FeedforwardModel
from .solver import ConvergenceWarning, SolveOptions, solve_gbp_batch

EXPLODE_LIMIT = 1e6


@dataclass(frozen=True)
class TrainConfig:
    epochs_max: int = 500
    early_stop_patience: int = 10
    gamma_warmup_epochs: int = 4
    batch_size: int = 64
    learning_rate: float = 0.01
    momentum: float = 0.9
    seed: int = 0
    loss: str = "hinge"
    gap_weight: float = 0.0
    gap_threshold: float = 0.0
    validation_fraction: float = 0.1

    def __post_init__(self):
        if self.early_stop_patience < 1:
            raise InvalidInputError("early_stop_patience must be >= 1")
        if not 0 <= self.gamma_warmup_epochs <= self.epochs_max:
            raise InvalidInputError("gamma_warmup_epochs must lie in [0, epochs_max]")
        if self.batch_size < 1 or self.learning_rate <= 0:
            raise InvalidInputError("batch_size must be >= 1 and learning_rate > 0")
        if not 0 <= self.validation_fraction < 1:
            raise InvalidInputError("validation_fraction must lie in [0, 1)")
        _loss_kind(self.loss)


@dataclass
class TrainingLog:
    rows: list = field(default_factory=list)

    def add(self, epoch, train_loss, val_metric):
        self.rows.append((int(epoch), float(train_loss), float(val_metric)))

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["epoch", "train_loss", "val_metric"])
            for e, l, v in self.rows:
                w.writerow([e, repr(l), repr(v)])


def _split(n, frac, rng):
    perm = rng.permutation(n)
    n_val = int(round(frac * n)) if frac > 0 else 0
    if n_val == 0 or n_val == n:
        return perm, perm
    return perm[n_val:], perm[:n_val]


def warmup_factor(epoch, warmup_epochs):
    """Fraction of the final regularization weight used in a given epoch (0-based)."""
    if warmup_epochs <= 0:
        return 1.0
    return min(1.0, (epoch + 1) / warmup_epochs)


# --- dictionary pretraining --------------------------------------------------

@dataclass
class PretrainResult:
    dictionary: Dictionary
    log: TrainingLog
    best_epoch: int
    best_val_loss: float


def reconstruction_loss(X, D, codes):
    R = np.atleast_2d(X) - codes @ as_dictionary(D).matrix.T
    return float(np.mean(np.sum(R * R, axis=1)))


def _codes(X, D, spec, opts, init=None):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", ConvergenceWarning)
        return solve_gbp_batch(X, D, spec, opts, init=init).codes


def pretrain_dictionary(samples, spec: RegularizerSpec, config: TrainConfig, init=None, validation=None,
                        opts: SolveOptions | None = None) -> PretrainResult:
    """Alternate sparse coding with a least-squares dictionary update.

    Each epoch codes the training samples at the current (warm-up scaled)
    weights, refits every used atom by least squares, and renormalizes the
    columns.  Early stopping watches the validation reconstruction loss,
    always measured at the final weights so that it is comparable across the
    warm-up.
    """
    X = np.atleast_2d(np.asarray(samples, dtype=np.float64))
    if X.shape[0] == 0:
        raise InvalidInputError("no samples")
    rng = np.random.default_rng(config.seed)
    if validation is None:
        tr, va = _split(X.shape[0], config.validation_fraction, rng)
        Xt, Xv = X[tr], X[va]
    else:
        Xt, Xv = X, np.atleast_2d(np.asarray(validation, dtype=np.float64))
    m = spec.n_atoms
    if init is None:
        D = Dictionary.normalized(rng.standard_normal((X.shape[1], m)))
    else:
        D = Dictionary.normalized(as_dictionary(init).matrix)
    opts = opts or SolveOptions(tol=1e-5, max_iter=2000)
    log = TrainingLog()
    best = (np.inf, D, -1)
    stale = 0
    for epoch in range(config.epochs_max):
        f = warmup_factor(epoch, config.gamma_warmup_epochs)
        s = spec.scaled(f)
        G = _codes(Xt, D, s, opts)
        train_loss = reconstruction_loss(Xt, D, G)
        if not np.any(G):
            raise DeadDictionaryError(f"all codes are zero in epoch {epoch} (gamma factor {f:.3f})")
        used = np.any(G != 0, axis=0)
        Gu = G[:, used]
        sol, *_ = np.linalg.lstsq(Gu, Xt, rcond=None)
        M = D.matrix.copy()
        M[:, used] = sol.T
        norms = np.linalg.norm(M, axis=0)
        dead = norms < 1e-12
        if np.any(dead):
            M[:, dead] = D.matrix[:, dead]
        D = Dictionary.normalized(M)
        val = reconstruction_loss(Xv, D, _codes(Xv, D, spec, opts))
        log.add(epoch, train_loss, val)
        if val < best[0]:
            best = (val, D, epoch)
            stale = 0
        else:
            stale += 1
            if stale >= config.early_stop_patience:
                break
    return PretrainResult(best[1], log, best[2], best[0])


# --- classifier training -----------------------------------------------------

@dataclass
class ClassifierResult:
    classifier: LinearClassifier
    log: TrainingLog
    best_epoch: int
    best_val_accuracy: float


def train_classifier(features, labels, config: TrainConfig, n_classes=None, partition=None, validation=None,
                     init: LinearClassifier | None = None) -> ClassifierResult:
    """Minibatch SGD with momentum on hinge or cross-entropy loss.

    The gap penalty (weight ``gap_weight``, needs ``partition``) is added to
    the reported loss; it depends only on the codes, so its gradient with
    respect to the classifier is zero.  Returns the best-validation weights.
    """
    Z = np.atleast_2d(np.asarray(features, dtype=np.float64))
    y = np.asarray(labels).astype(np.int64)
    if y.size != Z.shape[0]:
        raise InvalidInputError(f"{y.size} labels for {Z.shape[0]} samples")
    kind = _loss_kind(config.loss)
    rng = np.random.default_rng(config.seed)
    if validation is None:
        tr, va = _split(Z.shape[0], config.validation_fraction, rng)
        Zt, yt, Zv, yv = Z[tr], y[tr], Z[va], y[va]
    else:
        Zt, yt = Z, y
        Zv, yv = np.atleast_2d(validation[0]), np.asarray(validation[1]).astype(np.int64)
    if init is not None:
        W, b = np.array(init.weights), np.array(init.bias)
    else:
        C = 1 if kind is LossKind.HINGE else int(n_classes or (y.max() + 1))
        W = rng.standard_normal((C, Z.shape[1])) * 0.01
        b = np.zeros(C)
    vW, vb = np.zeros_like(W), np.zeros_like(b)
    log = TrainingLog()
    best = (-1.0, LinearClassifier(W, b), -1)
    stale = 0
    for epoch in range(config.epochs_max):
        perm = rng.permutation(Zt.shape[0])
        total = 0.0
        for s in range(0, len(perm), config.batch_size):
            idx = perm[s:s + config.batch_size]
            clf = LinearClassifier(W, b)
            loss, _, gW, gb = classification_loss(clf, Zt[idx], yt[idx], kind, params_grad=True)
            if config.gap_weight > 0 and partition is not None:
                loss += config.gap_weight * gap_regularizer(Zt[idx], partition, config.gap_threshold).value
            if not np.isfinite(loss):
                raise TrainingDivergedError(f"non-finite loss in epoch {epoch}; last finite epoch {epoch - 1}")
            total += loss * len(idx)
            vW = config.momentum * vW - config.learning_rate * gW
            vb = config.momentum * vb - config.learning_rate * gb
            W = W + vW
            b = b + vb
        clf = LinearClassifier(W, b)
        acc = float(np.mean(np.atleast_1d(predict_and_margin(clf, Zv)[0]) == yv))
        log.add(epoch, total / len(perm), acc)
        if acc > best[0]:
            best = (acc, clf, epoch)
            stale = 0
        else:
            stale += 1
            if stale >= config.early_stop_patience:
                break
    return ClassifierResult(best[1], log, best[2], best[0])


# --- feedforward approximators ----------------------------------------------

@dataclass
class ApproximatorResult:
    model: FeedforwardModel
    log: TrainingLog
    best_epoch: int
    best_val_mse: float


def _snapshot(model):
    return [{k: v.copy() for k, v in L.state().items()} for L in model.layers]


def _restore(model, snap):
    for L, s in zip(model.layers, snap):
        L.load_state(s)


def train_feedforward_approximator(X, targets, model: FeedforwardModel, config: TrainConfig,
                                   validation=None) -> ApproximatorResult:
    """Regress the pooled code with mean squared error; the head is left untouched."""
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    T = np.atleast_2d(np.asarray(targets, dtype=np.float64))
    if X.shape[0] != T.shape[0]:
        raise InvalidInputError(f"{X.shape[0]} inputs for {T.shape[0]} targets")
    rng = np.random.default_rng(config.seed)
    if validation is None:
        tr, va = _split(X.shape[0], config.validation_fraction, rng)
        Xt, Tt, Xv, Tv = X[tr], T[tr], X[va], T[va]
    else:
        Xt, Tt = X, T
        Xv, Tv = np.atleast_2d(validation[0]), np.atleast_2d(validation[1])
    params = [(L, k) for L in model.code_layers for k in L.params]
    vel = [np.zeros_like(L.params[k]) for L, k in params]
    log = TrainingLog()
    best = (np.inf, _snapshot(model), -1)
    stale = 0
    for epoch in range(config.epochs_max):
        perm = rng.permutation(Xt.shape[0])
        total = 0.0
        for s in range(0, len(perm), config.batch_size):
            idx = perm[s:s + config.batch_size]
            out = model.encode(Xt[idx], train=True)
            diff = out - Tt[idx]
            loss = float(np.mean(diff * diff))
            if not np.isfinite(loss) or loss > EXPLODE_LIMIT:
                raise TrainingDivergedError(f"loss {loss:.3g} in epoch {epoch}; last finite epoch {epoch - 1}")
            total += loss * len(idx)
            model.backward_code(2.0 * diff / diff.size)
            for i, (L, k) in enumerate(params):
                vel[i] = config.momentum * vel[i] - config.learning_rate * L.grads[k]
                L.params[k] += vel[i]
        val = float(np.mean((model.encode(Xv) - Tv) ** 2))
        log.add(epoch, total / len(perm), val)
        if val < best[0]:
            best = (val, _snapshot(model), epoch)
            stale = 0
        else:
            stale += 1
            if stale >= config.early_stop_patience:
                break
    _restore(model, best[1])
    return ApproximatorResult(model, log, best[2], best[0])
