"""Proximal-gradient solvers for group-regularized least squares."""
from __future__ import annotations

import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace

import numpy as np

from . import kernels
from .dictionary import (
    Dictionary,
    GroupPartition,
    NormKind,
    RegularizerSpec,
    SparseCode,
    as_dictionary,
    mutual_coherence,
)
from .errors import InvalidInputError, InvalidStructureError


class ConvergenceWarning(UserWarning):
    pass


@dataclass(frozen=True)
class SolveOptions:
    max_iter: int = 5000
    rel_tol: float = 1e-9
    step_rule: str = "fixed"
    acceleration: bool = True
    nonnegative: bool = False
    # convergence: optimality residual <= tol * (1 + ||X||_2)
    tol: float = 1e-7
    check_every: int = 10
    # entries below snap * max(1, ||x||_inf) are set to exactly zero
    snap: float = 1e-8

    def __post_init__(self):
        if self.max_iter < 0 or self.check_every < 1:
            raise InvalidInputError("max_iter must be >= 0 and check_every >= 1")
        if self.step_rule != "fixed":
            raise InvalidInputError(f"unsupported step rule {self.step_rule!r}; only 'fixed' is implemented")
        if not (self.tol > 0 and self.rel_tol >= 0):
            raise InvalidInputError("tolerances must be positive")


@dataclass(frozen=True, eq=False)
class SolveResult:
    code: SparseCode
    objective: float
    iterations: int
    converged: bool
    residual: float

    @property
    def values(self):
        return self.code.values


@dataclass(frozen=True, eq=False)
class BatchResult:
    codes: np.ndarray
    objective: np.ndarray
    iterations: np.ndarray
    converged: np.ndarray
    residual: np.ndarray

    def __len__(self):
        return self.codes.shape[0]

    def result(self, i, partition=None):
        return SolveResult(SparseCode(self.codes[i], partition), float(self.objective[i]),
                           int(self.iterations[i]), bool(self.converged[i]), float(self.residual[i]))


def prox_step(v, step, spec: RegularizerSpec, nonnegative=False):
    """Proximal map of step * <weights, group norms> (plus the orthant constraint if asked)."""
    if step <= 0:
        raise InvalidInputError("step must be positive")
    idx, ptr, a, b = spec.kernel_arrays
    v = np.asarray(v, dtype=np.float64)
    if v.shape[-1] != spec.n_atoms:
        raise InvalidInputError(f"vector length {v.shape[-1]} does not match {spec.n_atoms} atoms")
    return kernels.prox(v, float(step), idx, ptr, a, b, bool(nonnegative))


def gbp_objective(x, X, D, spec: RegularizerSpec):
    D = as_dictionary(D)
    x = np.asarray(x.values if isinstance(x, SparseCode) else x, dtype=np.float64)
    r = np.asarray(X, dtype=np.float64) - x @ D.matrix.T
    return 0.5 * np.sum(r * r, axis=-1) + kernels.regularizer(x, *spec.kernel_arrays)


def optimality_residual(x, X, D, spec: RegularizerSpec, nonnegative=False):
    """Distance from D^T (X - D x) to the subdifferential of the regularizer at x.

    Per group this is the Euclidean distance to that group's block of the
    subdifferential; the returned value is the largest over groups.  It is
    zero exactly at minimizers.
    """
    D = as_dictionary(D)
    x = np.asarray(x.values if isinstance(x, SparseCode) else x, dtype=np.float64)
    X = np.asarray(X, dtype=np.float64)
    _check_dims(X, D, spec)
    p = (X - x @ D.matrix.T) @ D.matrix
    return kernels.residual(x, p, *spec.kernel_arrays, bool(nonnegative))


def _check_dims(X, D, spec):
    if X.shape[-1] != D.n_signal:
        raise InvalidInputError(f"signal length {X.shape[-1]} does not match dictionary rows {D.n_signal}")
    if spec.n_atoms != D.n_atoms:
        raise InvalidInputError(f"spec covers {spec.n_atoms} atoms, dictionary has {D.n_atoms}")


def _run_chunk(args):
    D, X, X0, spec, opts = args
    return _solve_rows(D, X, X0, spec, opts)


def _solve_rows(D, X, X0, spec, opts):
    idx, ptr, a, b = spec.kernel_arrays
    tol = opts.tol * (1.0 + np.linalg.norm(X, axis=1))
    codes, obj, its, _, _ = kernels.fista_batch(
        np.ascontiguousarray(D.matrix), np.ascontiguousarray(X), np.ascontiguousarray(X0),
        1.0 / D.lipschitz, idx, ptr, a, b, opts.nonnegative, opts.acceleration,
        int(opts.max_iter), tol, float(opts.rel_tol), int(opts.check_every))
    scale = np.maximum(1.0, np.abs(codes).max(axis=1, initial=0.0))
    codes[np.abs(codes) < opts.snap * scale[:, None]] = 0.0
    obj = gbp_objective(codes, X, D, spec)
    p = (X - codes @ D.matrix.T) @ D.matrix
    res = np.atleast_1d(kernels.residual(codes, p, idx, ptr, a, b, opts.nonnegative))
    return codes, np.atleast_1d(obj), its, res <= tol, res


def solve_gbp_batch(X, D, spec: RegularizerSpec, opts: SolveOptions | None = None, init=None, jobs=1):
    """Solve every row of X independently.  ``jobs > 1`` splits rows across processes."""
    opts = opts or SolveOptions()
    D = as_dictionary(D)
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    _check_dims(X, D, spec)
    if not np.all(np.isfinite(X)):
        raise InvalidInputError("signal contains non-finite entries")
    B = X.shape[0]
    X0 = np.zeros((B, D.n_atoms)) if init is None else np.array(np.broadcast_to(init, (B, D.n_atoms)), dtype=np.float64)
    if opts.nonnegative:
        X0 = np.maximum(X0, 0.0)
    if jobs > 1 and B > 1:
        chunks = np.array_split(np.arange(B), min(jobs, B))
        with ProcessPoolExecutor(max_workers=jobs) as ex:
            parts = list(ex.map(_run_chunk, [(D, X[c], X0[c], spec, opts) for c in chunks]))
        out = [np.concatenate([p[k] for p in parts]) for k in range(5)]
    else:
        out = _solve_rows(D, X, X0, spec, opts)
    res = BatchResult(*out)
    bad = int(np.sum(~res.converged))
    if bad:
        warnings.warn(f"{bad} of {B} problems did not reach the residual tolerance", ConvergenceWarning, stacklevel=2)
    return res


def solve_gbp(X, D, spec: RegularizerSpec, opts: SolveOptions | None = None, init=None) -> SolveResult:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 1:
        raise InvalidInputError("solve_gbp takes a single signal; use solve_gbp_batch for stacks")
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", ConvergenceWarning)
        res = solve_gbp_batch(X[None, :], D, spec, opts, None if init is None else np.asarray(init)[None, :])
    out = res.result(0, spec.partition)
    if not out.converged:
        warnings.warn(f"solver stopped after {out.iterations} iterations with residual {out.residual:.3g}",
                      ConvergenceWarning, stacklevel=2)
    return out


def solve_positive_gbp(X, D, spec: RegularizerSpec, opts: SolveOptions | None = None, init=None) -> SolveResult:
    opts = opts or SolveOptions()
    return solve_gbp(X, D, spec, replace(opts, nonnegative=True), init)


# --- layered problems --------------------------------------------------------

@dataclass(frozen=True, eq=False)
class LayeredProblem:
    """Chain X ~ D_1 G_1, G_1 ~ D_2 G_2, ... with one regularizer per layer."""

    dictionaries: tuple
    specs: tuple

    def __post_init__(self):
        ds = tuple(as_dictionary(d) for d in self.dictionaries)
        sp = tuple(self.specs)
        if not ds:
            raise InvalidInputError("a layered problem needs at least one layer")
        if len(ds) != len(sp):
            raise InvalidStructureError(f"{len(ds)} dictionaries but {len(sp)} regularizers")
        for j in range(1, len(ds)):
            if ds[j].n_signal != ds[j - 1].n_atoms:
                raise InvalidStructureError(
                    f"layer {j + 1} dictionary has {ds[j].n_signal} rows, layer {j} has {ds[j - 1].n_atoms} atoms")
        for j, (d, s) in enumerate(zip(ds, sp)):
            if s.n_atoms != d.n_atoms:
                raise InvalidStructureError(f"layer {j + 1}: spec covers {s.n_atoms} atoms, dictionary has {d.n_atoms}")
        object.__setattr__(self, "dictionaries", ds)
        object.__setattr__(self, "specs", sp)

    @property
    def depth(self):
        return len(self.dictionaries)


@dataclass(frozen=True, eq=False)
class LayeredResult:
    layers: tuple

    @property
    def codes(self):
        return [r.values for r in self.layers]


def solve_layered_gbp(X, problem: LayeredProblem, opts: SolveOptions | None = None) -> LayeredResult:
    """Cascade: each layer's code becomes the next layer's signal."""
    out = []
    signal = np.asarray(X, dtype=np.float64)
    for D, spec in zip(problem.dictionaries, problem.specs):
        r = solve_gbp(signal, D, spec, opts)
        out.append(r)
        signal = r.values
    return LayeredResult(tuple(out))


# --- block rewrites ----------------------------------------------------------

@dataclass(frozen=True, eq=False)
class BlockProblem:
    """A single group-regularized problem assembled from blocks and renormalized.

    ``matrix``/``spec`` describe the problem as assembled; ``dictionary``/
    ``renormalized_spec`` the equivalent problem with unit-norm columns whose
    solution maps back by dividing each entry by ``scales``.
    """

    matrix: np.ndarray
    spec: RegularizerSpec
    signal: np.ndarray
    dictionary: Dictionary
    renormalized_spec: RegularizerSpec
    scales: np.ndarray
    col_offsets: tuple

    def recover(self, x_tilde):
        return np.asarray(x_tilde, dtype=np.float64) / self.scales

    def split(self, x):
        o = self.col_offsets
        return [np.asarray(x)[..., o[j]:o[j + 1]] for j in range(len(o) - 1)]

    def objective(self, x):
        """Objective of the assembled (un-normalized) problem."""
        r = self.signal - self.matrix @ np.asarray(x, dtype=np.float64)
        return 0.5 * float(r @ r) + self.spec.value(x)

    def renormalized_objective(self, x_tilde):
        return float(gbp_objective(x_tilde, self.signal, self.dictionary, self.renormalized_spec))


def build_block_problem(blocks, spec: RegularizerSpec, signal_blocks=None, norm_tol=1e-10) -> BlockProblem:
    """Assemble a block matrix (None entries are zero) and renormalize its columns.

    Atoms of an l2 or elastic group must share a common norm so the group
    weight can absorb it.  l1 groups whose atoms differ in norm are split
    into singletons, which leaves the penalty unchanged.
    """
    rows = len(blocks)
    cols = len(blocks[0])
    if rows == 0 or any(len(r) != cols for r in blocks):
        raise InvalidStructureError("block layout must be a non-empty rectangular grid")
    heights = [None] * rows
    widths = [None] * cols
    for p in range(rows):
        for q in range(cols):
            blk = blocks[p][q]
            if blk is None:
                continue
            blk = np.asarray(blk, dtype=np.float64)
            for lst, k, v in ((heights, p, blk.shape[0]), (widths, q, blk.shape[1])):
                if lst[k] is None:
                    lst[k] = v
                elif lst[k] != v:
                    raise InvalidStructureError(f"block ({p}, {q}) has shape {blk.shape}, inconsistent with its row/column")
    if any(h is None for h in heights) or any(w is None for w in widths):
        raise InvalidStructureError("every block row and column needs at least one non-zero block")
    A = np.block([[np.zeros((heights[p], widths[q])) if blocks[p][q] is None else np.asarray(blocks[p][q], dtype=np.float64)
                   for q in range(cols)] for p in range(rows)])
    if spec.n_atoms != A.shape[1]:
        raise InvalidStructureError(f"spec covers {spec.n_atoms} atoms, block matrix has {A.shape[1]} columns")
    if signal_blocks is None:
        signal = np.zeros(A.shape[0])
    else:
        signal = np.concatenate([np.zeros(heights[p]) if s is None else np.asarray(s, dtype=np.float64).reshape(-1)
                                 for p, s in enumerate(signal_blocks)])
        if signal.size != A.shape[0]:
            raise InvalidStructureError("signal blocks do not match the block row heights")
    norms = np.linalg.norm(A, axis=0)
    if np.any(norms <= 1e-12):
        raise InvalidStructureError("assembled matrix has a zero column")

    groups, tags, weights = [], [], []
    for g, n, w in zip(spec.partition.groups, spec.norms, spec.weights):
        c = norms[list(g)]
        if np.ptp(c) <= norm_tol * c.max():
            groups.append(g)
            tags.append(n)
            weights.append(w / c.mean())
        elif n.kind is NormKind.L1:
            for i in g:
                groups.append((i,))
                tags.append(n)
                weights.append(w / norms[i])
        else:
            raise InvalidStructureError(f"atoms of {n} group {g} have unequal norms {c.min():.6g}..{c.max():.6g}")
    spec_mod = RegularizerSpec(GroupPartition(tuple(groups)), tuple(tags), np.array(weights))
    offsets = tuple(np.concatenate([[0], np.cumsum(widths)]).tolist())
    return BlockProblem(A, spec, signal, Dictionary(A / norms), spec_mod, norms, offsets)


def _offset_spec(specs, offsets):
    groups, tags, weights = [], [], []
    for s, o in zip(specs, offsets):
        groups += [tuple(i + o for i in g) for g in s.partition.groups]
        tags += list(s.norms)
        weights += list(s.weights)
    return RegularizerSpec(GroupPartition(tuple(groups)), tuple(tags), np.array(weights))


def rewrite_single_layer(problem: LayeredProblem, X=None) -> BlockProblem:
    """Joint single-problem form of a layered chain.

    Block column j holds D_j on the diagonal and -I below it; after column
    renormalization blocks 1..K-1 carry a factor 1/sqrt(2) (for unit-norm
    D_j) and their weights are divided by sqrt(2).
    """
    ds = problem.dictionaries
    K = len(ds)
    blocks = [[None] * K for _ in range(K)]
    for j, D in enumerate(ds):
        blocks[j][j] = D.matrix
        if j + 1 < K:
            blocks[j + 1][j] = -np.eye(D.n_atoms)
    offsets = np.concatenate([[0], np.cumsum([d.n_atoms for d in ds])])
    spec = _offset_spec(problem.specs, offsets[:-1])
    sig = None if X is None else [X] + [None] * (K - 1)
    return build_block_problem(blocks, spec, sig)


def rewritten_coherence(dictionaries):
    """Closed-form coherence of the renormalized single-layer matrix (unit-norm layers).

    Within block j < K the Gram entries are halved; adjacent interior blocks
    meet through -I/sqrt(2) against D_{j+1}/sqrt(2), giving |D_{j+1}|/2; the last
    block is unscaled, so its meeting term is |D_K|/sqrt(2).
    """
    ds = [as_dictionary(d) for d in dictionaries]
    K = len(ds)
    if K == 1:
        return mutual_coherence(ds[0])
    terms = [0.5 * mutual_coherence(d) for d in ds[:-1] if d.n_atoms > 1]
    if ds[-1].n_atoms > 1:
        terms.append(mutual_coherence(ds[-1]))
    terms += [0.5 * np.abs(d.matrix).max() for d in ds[1:-1]]
    terms.append(np.abs(ds[-1].matrix).max() / np.sqrt(2.0))
    return float(max(terms))
