"""Sign-gradient attacks against the sparse-coding classifier, with gradients through the solver."""
from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass, field

import numpy as np

from .classify import LinearClassifier, _loss_kind, LossKind, gap_per_sample, pool_groups, predict_and_margin
from .dictionary import RegularizerSpec, as_dictionary
from .errors import InvalidInputError
from .solver import ConvergenceWarning, SolveOptions, prox_step, solve_gbp_batch

DEFAULT_UNROLL = 300
# momentum in the differentiated replay is reset on this fixed schedule
REPLAY_RESTART = 30


@dataclass(frozen=True, eq=False)
class Pipeline:
    """Signal -> sparse code -> (optional group pooling) -> linear classifier.

    ``gap_weight`` > 0 adds that multiple of the per-sample gap penalty to the
    loss, with groups counted active above ``gap_threshold``.
    """

    D: object
    spec: RegularizerSpec
    classifier: LinearClassifier
    loss: str = "hinge"
    pooled: bool = False
    opts: SolveOptions = field(default_factory=lambda: SolveOptions(tol=1e-9, max_iter=20000))
    gap_weight: float = 0.0
    gap_threshold: float = 0.0
    unroll: int = DEFAULT_UNROLL

    def __post_init__(self):
        object.__setattr__(self, "D", as_dictionary(self.D))
        _loss_kind(self.loss)
        feat = self.spec.partition.n_groups if self.pooled else self.D.n_atoms
        if self.classifier.n_features != feat:
            raise InvalidInputError(f"classifier expects {self.classifier.n_features} features, pipeline gives {feat}")
        if self.unroll < 1:
            raise InvalidInputError("unroll must be >= 1")

    def codes(self, X, init=None):
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", ConvergenceWarning)
            r = solve_gbp_batch(np.atleast_2d(X), self.D, self.spec, self.opts, init=init)
        return r.codes, r.converged

    def features(self, codes):
        return pool_groups(codes, self.spec.partition) if self.pooled else codes

    def predict(self, X, init=None):
        """(classes, margins, codes) for a batch of signals."""
        Z, _ = self.codes(X, init)
        cls, margin = predict_and_margin(self.classifier, self.features(Z))
        return np.atleast_1d(cls), np.atleast_1d(margin), Z

    def loss_and_code_grad(self, Z, labels, with_gap=True):
        """Per-sample loss and its gradient with respect to each code row."""
        Z = np.atleast_2d(Z)
        y = np.atleast_1d(labels).astype(np.int64)
        F = self.features(Z)
        f = F @ self.classifier.weights.T + self.classifier.bias
        kind = _loss_kind(self.loss)
        if kind is LossKind.HINGE:
            ys = np.where(y == 0, -1.0, y.astype(np.float64))
            s = f[:, 0]
            loss = np.maximum(0.0, 1.0 - ys * s)
            dscore = np.where(1.0 - ys * s > 0, -ys, 0.0)[:, None]
        else:
            z = f - f.max(axis=1, keepdims=True)
            logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
            loss = -logp[np.arange(len(y)), y]
            dscore = np.exp(logp)
            dscore[np.arange(len(y)), y] -= 1.0
        gF = dscore @ self.classifier.weights
        if self.pooled:
            part = self.spec.partition
            norms = part.group_norms(Z)
            with np.errstate(divide="ignore", invalid="ignore"):
                coef = np.where(norms > 0, gF / norms, 0.0)
            gZ = coef[:, part.labels] * Z
        else:
            gZ = gF
        if with_gap and self.gap_weight > 0:
            gaps, ggrad, valid = gap_per_sample(Z, self.spec.partition, self.gap_threshold)
            loss = loss + self.gap_weight * np.where(valid, -gaps, 0.0)
            gZ = gZ - self.gap_weight * ggrad
        return loss, gZ


def prox_jvp(v, u, step, spec: RegularizerSpec, nonnegative=False):
    """Jacobian of the proximal map at v applied to u (the Jacobian is symmetric).

    At kinks the zero element of the sub-Jacobian is used.
    """
    idx, ptr, a, b = spec.kernel_arrays
    ta, tb = step * a, step * b
    if nonnegative:
        pre = v - ta
        keep = pre > 0
        w = np.where(keep, pre, 0.0)
    else:
        keep = np.abs(v) > ta
        w = np.where(keep, v - np.sign(v) * ta, 0.0)
    du = np.where(keep, u, 0.0)
    labels = spec.partition.labels
    nrm = np.sqrt(np.add.reduceat((w * w)[..., idx], ptr[:-1], axis=-1))
    wdu = np.add.reduceat((w * du)[..., idx], ptr[:-1], axis=-1)
    active = tb > 0
    with np.errstate(divide="ignore", invalid="ignore"):
        live = nrm > tb
        scale = np.where(active, np.where(live, 1.0 - tb / nrm, 0.0), 1.0)
        rank1 = np.where(active & live, tb * wdu / nrm ** 3, 0.0)
    return scale[..., labels] * du + rank1[..., labels] * w


@dataclass(frozen=True)
class GradientResult:
    grad: np.ndarray
    loss: np.ndarray
    converged: np.ndarray
    codes: np.ndarray


def input_gradient(pipeline: Pipeline, X, labels, init=None, with_gap=True) -> GradientResult:
    """Gradient of the pipeline loss with respect to the input signal(s).

    The code is obtained by the solver, then ``pipeline.unroll`` accelerated
    proximal-gradient iterations (momentum reset every REPLAY_RESTART steps)
    are replayed from it and differentiated in reverse mode; the warm start
    itself is held constant.  Works on a single
    signal or a batch.
    """
    single = np.asarray(X).ndim == 1
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    Z, conv = pipeline.codes(X, init)
    D = pipeline.D.matrix
    spec = pipeline.spec
    nonneg = pipeline.opts.nonnegative
    step = 1.0 / pipeline.D.lipschitz
    DtX = X @ D
    gram = pipeline.D.gram
    # accelerated proximal-gradient replay: y_k = x_k + beta_k (x_k - x_{k-1})
    vs, betas = [], []
    x_prev = x = Z
    for k in range(pipeline.unroll):
        if k % REPLAY_RESTART == 0:
            t = 1.0
        t_next = 0.5 * (1.0 + np.sqrt(1.0 + 4.0 * t * t))
        beta = (t - 1.0) / t_next
        y = x + beta * (x - x_prev)
        v = y - step * (y @ gram - DtX)
        vs.append(v)
        betas.append(beta)
        x_prev, x = x, prox_step(v, step, spec, nonneg)
        t = t_next
    loss, adj = pipeline.loss_and_code_grad(x, labels, with_gap)
    adj_prev = np.zeros_like(adj)
    gDtX = np.zeros_like(Z)
    for v, beta in zip(reversed(vs), reversed(betas)):
        u = prox_jvp(v, adj, step, spec, nonneg)
        gDtX += step * u
        ay = u - step * (u @ gram)
        adj, adj_prev = adj_prev + (1.0 + beta) * ay, -beta * ay
    g = gDtX @ D.T
    if single:
        return GradientResult(g[0], loss[:1], conv[:1], x[0])
    return GradientResult(g, loss, conv, x)


@dataclass(frozen=True)
class AttackConfig:
    epsilon: float
    steps: int = 10
    clamp_low: float | None = None
    clamp_high: float | None = None
    include_gap_term: bool = False
    norm: str = "linf"

    def __post_init__(self):
        if self.epsilon < 0 or self.steps < 1:
            raise InvalidInputError("epsilon must be >= 0 and steps >= 1")
        if self.clamp_low is not None and self.clamp_high is not None and not self.clamp_low < self.clamp_high:
            raise InvalidInputError("clamp_low must be below clamp_high")
        if self.norm not in ("linf", "l2"):
            raise InvalidInputError(f"norm must be 'linf' or 'l2', got {self.norm!r}")

    @property
    def step_size(self):
        return self.epsilon / self.steps


def project_linf(Y, X, eps, low=None, high=None):
    """Clip Y into the eps-box around X and the data range, exactly in floating point."""
    Y = np.clip(Y, X - eps, X + eps)
    if low is not None or high is not None:
        Y = np.clip(Y, low, high)
    # X +- eps can round outward; step such entries back towards X one ulp at a time
    bad = np.abs(Y - X) > eps
    while bad.any():
        Y[bad] = np.nextafter(Y[bad], X[bad])
        bad = np.abs(Y - X) > eps
    return Y


def project_l2(Y, X, eps, low=None, high=None):
    d = Y - X
    n = np.linalg.norm(d, axis=-1, keepdims=True)
    with np.errstate(divide="ignore", invalid="ignore"):
        f = np.where(n > eps, eps / n, 1.0)
    Y = X + d * f
    if low is not None or high is not None:
        Y = np.clip(Y, low, high)
    return Y


def ifgsm(pipeline: Pipeline, X, labels, cfg: AttackConfig):
    """Iterated sign-gradient ascent on the loss inside an epsilon ball.

    Labels are those of the clean input throughout.  The l2 variant steps
    along the normalized gradient and projects on the l2 ball.
    """
    single = np.asarray(X).ndim == 1
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    Y = X.copy()
    if cfg.epsilon == 0:
        return Y[0] if single else Y
    a = cfg.step_size
    init = None
    for _ in range(cfg.steps):
        gr = input_gradient(pipeline, Y, labels, init=init, with_gap=cfg.include_gap_term)
        init = gr.codes
        if cfg.norm == "linf":
            Y = project_linf(Y + a * np.sign(gr.grad), X, cfg.epsilon, cfg.clamp_low, cfg.clamp_high)
        else:
            n = np.linalg.norm(gr.grad, axis=1, keepdims=True)
            with np.errstate(divide="ignore", invalid="ignore"):
                d = np.where(n > 0, gr.grad / n, 0.0)
            Y = project_l2(Y + a * d, X, cfg.epsilon, cfg.clamp_low, cfg.clamp_high)
    return Y[0] if single else Y


SWEEP_FIELDS = ["method", "epsilon", "accuracy", "n_samples", "seed", "config_hash"]


def attack_sweep(pipeline: Pipeline, X, labels, epsilons, cfg: AttackConfig, method="pipeline",
                 evaluators=None, seed=0, config_hash="", return_inputs=False):
    """Accuracy of the attacked pipeline for each budget.

    ``evaluators`` maps a method name to a callable Y -> predicted classes;
    those methods are scored on the perturbations crafted against
    ``pipeline`` (a black-box transfer attack).
    """
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    y = np.asarray(labels).astype(np.int64)
    evaluators = dict(evaluators or {})
    rows, inputs = [], {}
    for eps in epsilons:
        c = AttackConfig(float(eps), cfg.steps, cfg.clamp_low, cfg.clamp_high, cfg.include_gap_term, cfg.norm)
        Y = ifgsm(pipeline, X, y, c)
        pred, _, _ = pipeline.predict(Y)
        rows.append({"method": method, "epsilon": float(eps), "accuracy": float(np.mean(pred == y)),
                     "n_samples": len(y), "seed": seed, "config_hash": config_hash})
        for name, ev in evaluators.items():
            p = np.asarray(ev(Y))
            rows.append({"method": name, "epsilon": float(eps), "accuracy": float(np.mean(p == y)),
                         "n_samples": len(y), "seed": seed, "config_hash": config_hash})
        if return_inputs:
            inputs[float(eps)] = Y
    return (rows, inputs) if return_inputs else rows


def write_sweep_csv(rows, path):
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=SWEEP_FIELDS)
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})


def read_sweep_csv(path):
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    for r in rows:
        r["epsilon"] = float(r["epsilon"])
        r["accuracy"] = float(r["accuracy"])
        r["n_samples"] = int(r["n_samples"])
    return rows


@dataclass(frozen=True)
class CertifiedOutcome:
    epsilon: float
    sample: int
    certified: bool
    correct: bool
    threshold: float
    margin: float

    @property
    def violation(self):
        return self.certified and not self.correct


def certificate_audit(pipeline: Pipeline, codes_true, labels, epsilons, cfg: AttackConfig, c=None):
    """Attack clean signals D @ codes_true and test the margin certificate on each result.

    For every budget and sample the measured perturbation is fed to the
    single-layer recovery conditions; when they hold and the clean margin
    clears the resulting threshold, the attacked prediction must be the
    clean label.  Returns one CertifiedOutcome per (budget, sample).
    """
    from .stability import DEFAULT_C, check_recovery_conditions, margin_certificate

    c = DEFAULT_C if c is None else c
    G = np.atleast_2d(np.asarray(codes_true, dtype=np.float64))
    y = np.asarray(labels).astype(np.int64)
    X = G @ pipeline.D.matrix.T
    feats = pool_groups(G, pipeline.spec.partition) if pipeline.pooled else G
    _, margins = predict_and_margin(pipeline.classifier, feats)
    margins = np.atleast_1d(margins)
    out = []
    for eps in epsilons:
        run = AttackConfig(float(eps), cfg.steps, cfg.clamp_low, cfg.clamp_high, cfg.include_gap_term, cfg.norm)
        Y = ifgsm(pipeline, X, y, run)
        pred, _, _ = pipeline.predict(Y)
        for j in range(len(y)):
            cert = check_recovery_conditions(pipeline.D, pipeline.spec, G[j], Y[j] - X[j], c)
            ok = False
            thr = np.inf
            if cert.holds:
                mc = margin_certificate(margins[j], pipeline.classifier.weights, cert, int(cert.chi.sum()))
                ok, thr = mc.certified, mc.threshold
            out.append(CertifiedOutcome(float(eps), j, ok, bool(pred[j] == y[j]), float(thr), float(margins[j])))
    return out
