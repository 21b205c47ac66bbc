"""Recovery certificates for noisy group-sparse coding and their empirical audit."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, fields

import numpy as np

from .dictionary import (
    RegularizerSpec,
    as_dictionary,
    characteristic_vector,
    local_amplitude,
    local_l0,
    max_stripe,
    mutual_coherence,
    pinv_columns,
    stripe_norm,
    erc,
)
from .errors import InvalidInputError, PreconditionViolated, RankError
from .solver import SolveOptions, solve_gbp

DEFAULT_C = 2.0 / 3.0
# relative slack when comparing a quantity with a bound that it may meet exactly
_EDGE = 1e-12


def _check_c(c):
    if not 0.0 < c < 1.0:
        raise InvalidInputError(f"c must lie in (0, 1), got {c}")


def _values(x):
    return np.asarray(getattr(x, "values", x), dtype=np.float64).reshape(-1)


def stripe_limit(c, theta, mu):
    """Largest admissible stripe norm of the characteristic vector (inf when mu = 0)."""
    if mu == 0.0:
        return math.inf
    return c * theta / (1.0 + theta) * (1.0 + 1.0 / mu)


def error_factor(c, theta, mu):
    """Bound on ||inv(Gram restricted to the support)||_inf implied by the stripe condition."""
    return (1.0 + theta) / ((1.0 + mu) * (1.0 + theta - c * theta))


@dataclass(frozen=True)
class RecoveryCertificate:
    c: float
    lam: float
    theta: float
    mu: float
    mu_is_zero: bool
    chi: np.ndarray = field(repr=False)
    chi_stripe: int
    stripe_limit: float
    condition_a: bool
    local_amplitude: float
    gamma_min: float
    gamma_max: float
    required_gamma_min: float
    condition_b: bool
    rank: int
    full_rank: bool
    # bound with gamma at its required value, with and without the coherence factor
    linf_bound: float
    weak_linf_bound: float
    # same bound evaluated at the weights actually in the spec
    linf_bound_at_gamma: float
    # smallest c for which condition a) holds (nan if none below 1) and the gamma it needs
    c_threshold: float
    tightest_gamma_min: float

    @property
    def holds(self):
        return self.condition_a and self.condition_b and self.full_rank

    def failing(self):
        out = []
        if not self.condition_a:
            out.append(f"condition a (stripe {self.chi_stripe} > {self.stripe_limit:.6g})")
        if not self.condition_b:
            out.append(f"condition b (gamma_min {self.gamma_min:.6g} < {self.required_gamma_min:.6g})")
        if not self.full_rank:
            out.append(f"rank (support rank {self.rank} < {int(self.chi.sum())})")
        return out


def check_recovery_conditions(D, spec: RegularizerSpec, gamma_true, E, c=DEFAULT_C) -> RecoveryCertificate:
    """Evaluate the single-layer recovery conditions for Y = D gamma_true + E."""
    _check_c(c)
    D = as_dictionary(D)
    if not D.unit_normed:
        raise InvalidInputError("certificates require unit-norm atoms")
    if spec.n_atoms != D.n_atoms:
        raise InvalidInputError(f"spec covers {spec.n_atoms} atoms, dictionary has {D.n_atoms}")
    lam, theta = spec.lam, spec.theta
    mu = mutual_coherence(D) if D.n_atoms > 1 else 0.0
    chi = characteristic_vector(_values(gamma_true), spec)
    s = stripe_norm(chi, D)
    lim = stripe_limit(c, theta, mu)
    cond_a = s <= lim * (1 + _EDGE)
    ea = local_amplitude(E, D)
    req = ea / (lam * (1.0 - c))
    cond_b = spec.gamma_min >= req * (1 - _EDGE)
    k = int(chi.sum())
    try:
        pinv_columns(D.matrix[:, chi])
        rank = k
    except RankError as exc:
        rank = exc.rank
    lb = (1 + theta) / ((1 + mu) * theta * (1 - c)) * ea
    weak = (1 + theta) / (theta * (1 - c)) * ea
    at_gamma = (spec.gamma_max + ea) * error_factor(c, theta, mu)
    if mu == 0.0:
        c_thr = 0.0
    else:
        c_thr = s * (1 + theta) / (theta * (1 + 1 / mu))
    if c_thr < 1:
        tight = ea / (lam * (1 - c_thr))
    else:
        c_thr, tight = math.nan, math.nan
    return RecoveryCertificate(
        c=c, lam=lam, theta=theta, mu=mu, mu_is_zero=(mu == 0.0), chi=chi, chi_stripe=s, stripe_limit=lim,
        condition_a=cond_a, local_amplitude=ea, gamma_min=spec.gamma_min, gamma_max=spec.gamma_max,
        required_gamma_min=req, condition_b=cond_b, rank=rank, full_rank=(rank == k), linf_bound=lb,
        weak_linf_bound=weak, linf_bound_at_gamma=at_gamma, c_threshold=c_thr, tightest_gamma_min=tight)


@dataclass(frozen=True)
class RecoveryReport:
    support_in_chi: bool
    unique: bool | None
    linf_error: float
    linf_bound: float
    within_bound: bool
    large_entries_found: bool
    restart_gap: float | None = None

    @property
    def passed(self):
        return self.support_in_chi and self.within_bound and self.large_entries_found and self.unique is not False


def verify_recovery(result, gamma_true, cert: RecoveryCertificate, spec: RegularizerSpec, *, D=None, Y=None,
                    opts: SolveOptions | None = None, seed=0, unique_tol=1e-7) -> RecoveryReport:
    """Check the four recovery claims against a computed solution.

    Uniqueness is probed only when D and Y are given: the problem is solved
    again from a random start and the two solutions must agree to unique_tol.
    """
    if not cert.holds:
        raise PreconditionViolated(cert.failing())
    x = _values(result)
    g = _values(gamma_true)
    bound = cert.linf_bound_at_gamma
    in_chi = bool(np.all(cert.chi[x != 0]))
    err = float(np.max(np.abs(x - g)))
    big = np.abs(g) > bound
    found = bool(np.all(x[big] != 0))
    unique, gap = None, None
    if D is not None and Y is not None:
        rng = np.random.default_rng(seed)
        start = rng.standard_normal(x.size) * max(1.0, float(np.abs(g).max()))
        other = solve_gbp(np.asarray(Y, dtype=np.float64), D, spec, opts, init=start)
        gap = float(np.max(np.abs(other.values - x)))
        unique = gap <= unique_tol
    return RecoveryReport(in_chi, unique, err, bound, err < bound, found, gap)


# --- layered bounds ----------------------------------------------------------

@dataclass(frozen=True)
class LayerBound:
    c: float
    lam: float
    theta: float
    mu: float
    chi: np.ndarray = field(repr=False)
    chi_stripe: int
    stripe_limit: float
    condition_a: bool
    required_gamma_min: float
    gamma_min: float
    gamma_max: float
    condition_b: bool
    # nonzeros of chi seen by one atom of the next layer (plain count on the last layer)
    chi_local_l0: int
    linf_bound: float
    linf_bound_at_gamma: float


@dataclass(frozen=True)
class LayeredBounds:
    eps: tuple
    eps_at_gamma: tuple
    layers: tuple
    weak: bool

    @property
    def holds(self):
        return all(L.condition_a and L.condition_b for L in self.layers)

    def failing(self):
        out = []
        for j, L in enumerate(self.layers, 1):
            if not L.condition_a:
                out.append(f"layer {j} condition a")
            if not L.condition_b:
                out.append(f"layer {j} condition b")
        return out


def layered_error_bounds(problem, codes_true, E, c=DEFAULT_C, weak=False) -> LayeredBounds:
    """Per-layer error levels for a cascade of noisy codes.

    eps[0] is the local amplitude of the input noise; eps[j] bounds the
    local amplitude of the layer-j error measured through the atoms of
    layer j+1.  ``weak`` drops the 1/(1+mu) factors.  ``eps_at_gamma``
    repeats the recursion with the weights actually present in the specs.
    """
    K = problem.depth
    cs = [float(c)] * K if np.isscalar(c) else [float(v) for v in c]
    if len(cs) != K:
        raise InvalidInputError(f"{len(cs)} values of c for {K} layers")
    for v in cs:
        _check_c(v)
    if len(codes_true) != K:
        raise InvalidInputError(f"{len(codes_true)} true codes for {K} layers")
    eps = [local_amplitude(E, problem.dictionaries[0])]
    eps_g = [eps[0]]
    layers = []
    for j in range(K):
        D, spec, cj = problem.dictionaries[j], problem.specs[j], cs[j]
        if not D.unit_normed:
            raise InvalidInputError(f"layer {j + 1} dictionary is not unit-normed")
        lam, theta = spec.lam, spec.theta
        mu = mutual_coherence(D) if D.n_atoms > 1 else 0.0
        chi = characteristic_vector(_values(codes_true[j]), spec)
        s = stripe_norm(chi, D)
        lim = stripe_limit(cj, theta, mu)
        req = eps_g[j] / (lam * (1 - cj))
        nxt = local_l0(chi, problem.dictionaries[j + 1]) if j + 1 < K else int(chi.sum())
        mu_f = 0.0 if weak else mu
        lb = (1 + theta) / ((1 + mu_f) * theta * (1 - cj)) * eps[j]
        lbg = (spec.gamma_max + eps_g[j]) * error_factor(cj, theta, mu_f)
        layers.append(LayerBound(cj, lam, theta, mu, chi, s, lim, s <= lim * (1 + _EDGE), req,
                                 spec.gamma_min, spec.gamma_max, spec.gamma_min >= req * (1 - _EDGE), nxt, lb, lbg))
        eps.append(math.sqrt(nxt) * lb)
        eps_g.append(math.sqrt(nxt) * lbg)
    return LayeredBounds(tuple(eps), tuple(eps_g), tuple(layers), weak)


@dataclass(frozen=True)
class LayerRecovery:
    support_in_chi: bool
    linf_error: float
    linf_bound: float
    within_bound: bool
    local_error: float
    local_bound: float
    within_local: bool
    large_entries_found: bool

    @property
    def passed(self):
        return self.support_in_chi and self.within_bound and self.within_local and self.large_entries_found


def verify_layered_recovery(codes_hat, codes_true, problem, bounds: LayeredBounds):
    if not bounds.holds:
        raise PreconditionViolated(bounds.failing())
    out = []
    K = problem.depth
    for j in range(K):
        x, g, L = _values(codes_hat[j]), _values(codes_true[j]), bounds.layers[j]
        err = x - g
        linf = float(np.abs(err).max())
        if j + 1 < K:
            loc = local_amplitude(err, problem.dictionaries[j + 1])
        else:
            loc = float(np.linalg.norm(err))
        big = np.abs(g) > L.linf_bound_at_gamma
        out.append(LayerRecovery(bool(np.all(L.chi[x != 0])), linf, L.linf_bound_at_gamma, linf < L.linf_bound_at_gamma,
                                 loc, bounds.eps_at_gamma[j + 1], loc <= bounds.eps_at_gamma[j + 1] * (1 + _EDGE),
                                 bool(np.all(x[big] != 0))))
    return out


# --- exact recovery condition ------------------------------------------------

@dataclass(frozen=True)
class ErcConditions:
    mu: float
    lam: float
    limit: float
    k_dict: int
    k_dict_limit: float
    k_dict_ok: bool
    k_support: int
    k_support_ok: bool
    k_support_stripe: int
    k_support_stripe_ok: bool
    code_stripe: int | None
    code_stripe_ok: bool | None
    chi_stripe: int | None
    chi_stripe_ok: bool | None

    @property
    def any_holds(self):
        return self.k_dict_ok or self.k_support_ok or self.k_support_stripe_ok or bool(self.code_stripe_ok)


def erc_conditions(D, support, lam=1.0, spec: RegularizerSpec | None = None) -> ErcConditions:
    """Sufficient conditions for a positive exact recovery coefficient on ``support``.

    ``support`` is a set of indices or a code vector.  With a spec, the
    widened characteristic vector is checked as well.
    """
    D = as_dictionary(D)
    mu = mutual_coherence(D)
    if isinstance(support, (set, frozenset)):
        mask = np.zeros(D.n_atoms, dtype=bool)
        mask[list(support)] = True
        code = None
    else:
        code = _values(support)
        mask = code != 0
    lim = lam / (1 + lam) * (1 + 1 / mu) if mu > 0 else math.inf
    kd = max_stripe(D)
    kd_lim = 1 + lam / ((1 + lam) * mu) if mu > 0 else math.inf
    kl = int(mask.sum())
    kld = stripe_norm(mask, D)
    cs = stripe_norm(code, D) if code is not None else None
    xs = stripe_norm(characteristic_vector(mask, spec), D) if spec is not None else None
    return ErcConditions(mu, lam, lim, kd, kd_lim, kd < kd_lim, kl, kl < lim, kld, kld < lim,
                    cs, None if cs is None else cs < lim, xs, None if xs is None else xs < lim)


def erc_value(D, support, lam=1.0):
    return erc(support, D, lam)


# --- classification margin ---------------------------------------------------

@dataclass(frozen=True)
class MarginCertificate:
    certified: bool
    margin: float
    threshold: float
    phi: float


def classifier_spread(weights):
    """max pairwise distance of the class weight vectors (norm of w for one binary score)."""
    W = np.atleast_2d(np.asarray(weights, dtype=np.float64))
    if W.shape[0] == 1:
        return float(np.linalg.norm(W[0]))
    diff = W[:, None, :] - W[None, :, :]
    return float(np.sqrt((diff ** 2).sum(axis=-1)).max())


def margin_certificate(margin, weights, linf_bound, chi_l0) -> MarginCertificate:
    """Is the clean-signal margin large enough that the noisy code cannot flip the class?

    The code error is bounded entrywise by ``linf_bound`` and confined to
    ``chi_l0`` entries, so scores move by at most phi * sqrt(chi_l0) * linf_bound.
    ``linf_bound`` may also be a RecoveryCertificate or LayeredBounds.
    Pooling by group norms is 1-Lipschitz, so the same threshold applies to
    pooled classifiers.
    """
    if isinstance(linf_bound, RecoveryCertificate):
        linf_bound = linf_bound.linf_bound_at_gamma
    elif isinstance(linf_bound, LayeredBounds):
        linf_bound = linf_bound.layers[-1].linf_bound_at_gamma
    phi = classifier_spread(weights)
    thr = phi * math.sqrt(chi_l0) * float(linf_bound)
    return MarginCertificate(bool(margin > thr), float(margin), thr, phi)


# --- audit output ------------------------------------------------------------

AUDIT_FIELDS = ["instance", "seed", "config_hash", "mu", "theta", "chi_stripe", "stripe_limit", "condition_a",
                "local_amplitude", "gamma_min", "required_gamma_min", "condition_b", "full_rank", "linf_bound",
                "linf_bound_at_gamma", "linf_error", "support_in_chi", "unique", "within_bound",
                "large_entries_found", "passed"]


def audit_row(instance, cert, report, seed, config_hash):
    row = {"instance": instance, "seed": seed, "config_hash": config_hash}
    for f in fields(cert):
        if f.name in AUDIT_FIELDS:
            row[f.name] = getattr(cert, f.name)
    for name in ("linf_error", "support_in_chi", "unique", "within_bound", "large_entries_found"):
        row[name] = getattr(report, name) if report is not None else ""
    row["passed"] = report.passed if report is not None else ""
    return row


def write_audit(rows, csv_path, text_path=None):
    with open(csv_path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=AUDIT_FIELDS)
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})
    if text_path is not None:
        n = len(rows)
        ok = sum(1 for r in rows if r["passed"] is True)
        lines = [f"certified instances: {n}", f"all claims verified: {ok}/{n}"]
        for r in rows:
            status = "ok" if r["passed"] is True else "FAIL"
            lines.append(f"  #{r['instance']:>4}  {status:4}  stripe {r['chi_stripe']}/{r['stripe_limit']:.3f}  "
                         f"err {float(r['linf_error'] or 0):.3e} < {r['linf_bound_at_gamma']:.3e}")
        with open(text_path, "w") as fh:
            fh.write("\n".join(lines) + "\n")


# names used by the public interface contract
Theorem2Certificate = RecoveryCertificate
check_theorem2 = check_recovery_conditions
proposition_p1_conditions = erc_conditions
