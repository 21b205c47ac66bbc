"""Dictionaries, group partitions, regularizer specs and structural metrics."""
from __future__ import annotations

import enum
from dataclasses import dataclass
from functools import cached_property

import numpy as np
import scipy.linalg

from .errors import InvalidInputError, RankError

ZERO_TOL = 1e-12
UNIT_NORM_TOL = 1e-10


def _readonly(a):
    a = np.array(a, dtype=np.float64, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class Dictionary:
    """Column dictionary D with shape (n_signal, n_atoms)."""

    matrix: np.ndarray

    def __post_init__(self):
        a = np.asarray(self.matrix, dtype=np.float64)
        if a.ndim != 2 or a.shape[0] < 1 or a.shape[1] < 1:
            raise InvalidInputError(f"dictionary must be a non-empty 2-d array, got shape {a.shape}")
        if not np.all(np.isfinite(a)):
            raise InvalidInputError("dictionary contains non-finite entries")
        norms = np.linalg.norm(a, axis=0)
        if np.any(norms <= ZERO_TOL):
            raise InvalidInputError(f"zero atom at column {int(np.argmin(norms))}")
        object.__setattr__(self, "matrix", _readonly(a))

    @classmethod
    def normalized(cls, matrix):
        a = np.asarray(matrix, dtype=np.float64)
        norms = np.linalg.norm(a, axis=0)
        if np.any(norms <= ZERO_TOL):
            raise InvalidInputError("cannot normalize a zero atom")
        return cls(a / norms)

    @property
    def shape(self):
        return self.matrix.shape

    @property
    def n_signal(self):
        return self.matrix.shape[0]

    @property
    def n_atoms(self):
        return self.matrix.shape[1]

    @cached_property
    def column_norms(self):
        return np.linalg.norm(self.matrix, axis=0)

    @property
    def unit_normed(self):
        return bool(np.all(np.abs(self.column_norms - 1.0) <= UNIT_NORM_TOL))

    @cached_property
    def gram(self):
        return _readonly(self.matrix.T @ self.matrix)

    @cached_property
    def lipschitz(self):
        """Squared spectral norm, the Lipschitz constant of the data-term gradient."""
        return float(np.linalg.norm(self.matrix, 2) ** 2)

    @cached_property
    def atom_supports(self):
        nz = np.abs(self.matrix) > ZERO_TOL
        return tuple(frozenset(np.flatnonzero(nz[:, i]).tolist()) for i in range(self.n_atoms))

    @cached_property
    def neighbor_mask(self):
        """Boolean (m, m) mask, True where |<d_i, d_j>| > ZERO_TOL (diagonal included)."""
        mask = np.abs(self.gram) > ZERO_TOL
        np.fill_diagonal(mask, True)
        mask.setflags(write=False)
        return mask


def as_dictionary(D) -> Dictionary:
    return D if isinstance(D, Dictionary) else Dictionary(D)


@dataclass(frozen=True, eq=False)
class GroupPartition:
    """A partition of atom indices 0..m-1 into non-empty groups."""

    groups: tuple

    def __post_init__(self):
        groups = tuple(tuple(int(i) for i in g) for g in self.groups)
        if not groups:
            raise InvalidInputError("partition has no groups")
        seen = set()
        for k, g in enumerate(groups):
            if not g:
                raise InvalidInputError(f"group {k} is empty")
            for i in g:
                if i in seen:
                    raise InvalidInputError(f"atom {i} appears in more than one group")
                seen.add(i)
        m = len(seen)
        if seen != set(range(m)):
            missing = sorted(set(range(max(seen) + 1)) - seen)
            raise InvalidInputError(f"partition does not cover 0..{m - 1}; missing {missing[:5]}")
        object.__setattr__(self, "groups", groups)

    @classmethod
    def contiguous(cls, m, size):
        if size < 1 or m % size:
            raise InvalidInputError(f"cannot split {m} atoms into groups of {size}")
        return cls(tuple(tuple(range(s, s + size)) for s in range(0, m, size)))

    @classmethod
    def singletons(cls, m):
        return cls(tuple((i,) for i in range(m)))

    @classmethod
    def from_sizes(cls, sizes):
        out, start = [], 0
        for s in sizes:
            out.append(tuple(range(start, start + int(s))))
            start += int(s)
        return cls(tuple(out))

    @property
    def n_groups(self):
        return len(self.groups)

    @cached_property
    def n_atoms(self):
        return sum(len(g) for g in self.groups)

    @cached_property
    def sizes(self):
        return np.array([len(g) for g in self.groups], dtype=np.int64)

    @cached_property
    def labels(self):
        """Group id of every atom."""
        lab = np.empty(self.n_atoms, dtype=np.int64)
        for k, g in enumerate(self.groups):
            lab[list(g)] = k
        return lab

    @cached_property
    def order(self):
        """Atom indices concatenated group by group, plus group offsets."""
        idx = np.fromiter((i for g in self.groups for i in g), dtype=np.int64, count=self.n_atoms)
        ptr = np.zeros(self.n_groups + 1, dtype=np.int64)
        np.cumsum(self.sizes, out=ptr[1:])
        return idx, ptr

    def group_norms(self, x):
        """l2 norm of every group; works on a vector or a (batch, m) array."""
        x = np.asarray(x, dtype=np.float64)
        idx, ptr = self.order
        sq = np.square(x[..., idx])
        return np.sqrt(np.add.reduceat(sq, ptr[:-1], axis=-1))


class NormKind(enum.IntEnum):
    L1 = 0
    L2 = 1
    ELASTIC = 2


@dataclass(frozen=True)
class GroupNorm:
    """Per-group norm tag.  Elastic(beta) is beta*l1 + (1 - beta)*l2."""

    kind: NormKind
    beta: float = 1.0

    def __post_init__(self):
        kind = NormKind(self.kind)
        object.__setattr__(self, "kind", kind)
        if kind is NormKind.ELASTIC:
            if not 0.0 < self.beta < 1.0:
                raise InvalidInputError(f"elastic beta must lie in (0, 1), got {self.beta}")
        else:
            object.__setattr__(self, "beta", 1.0)

    @property
    def l1_part(self):
        """Weight on the l1 term."""
        return {NormKind.L1: 1.0, NormKind.L2: 0.0}.get(self.kind, self.beta)

    @property
    def l2_part(self):
        return {NormKind.L1: 0.0, NormKind.L2: 1.0}.get(self.kind, 1.0 - self.beta)

    def __str__(self):
        if self.kind is NormKind.ELASTIC:
            return f"elastic({self.beta:g})"
        return self.kind.name


L1 = GroupNorm(NormKind.L1)
L2 = GroupNorm(NormKind.L2)


def elastic(beta) -> GroupNorm:
    return GroupNorm(NormKind.ELASTIC, float(beta))


def parse_norm(text) -> GroupNorm:
    t = str(text).strip().lower()
    if t == "l1":
        return L1
    if t == "l2":
        return L2
    if t.startswith("elastic(") and t.endswith(")"):
        return elastic(float(t[8:-1]))
    raise InvalidInputError(f"unknown norm tag {text!r}")


@dataclass(frozen=True, eq=False)
class RegularizerSpec:
    """Partition plus per-group norm tag and positive weight."""

    partition: GroupPartition
    norms: tuple
    weights: np.ndarray

    def __post_init__(self):
        norms = tuple(self.norms)
        k = self.partition.n_groups
        if len(norms) != k:
            raise InvalidInputError(f"{len(norms)} norm tags for {k} groups")
        w = np.asarray(self.weights, dtype=np.float64).reshape(-1)
        if w.shape != (k,):
            raise InvalidInputError(f"{w.size} weights for {k} groups")
        if not np.all(np.isfinite(w)) or np.any(w <= 0):
            raise InvalidInputError("group weights must be positive and finite")
        object.__setattr__(self, "norms", norms)
        object.__setattr__(self, "weights", _readonly(w))

    @classmethod
    def uniform(cls, partition, norm, gamma):
        k = partition.n_groups
        return cls(partition, (norm,) * k, np.full(k, float(gamma)))

    def with_weights(self, weights):
        return RegularizerSpec(self.partition, self.norms, weights)

    def scaled(self, factor):
        return self.with_weights(self.weights * float(factor))

    @property
    def n_atoms(self):
        return self.partition.n_atoms

    @property
    def lam(self):
        """min of 1 and all elastic betas."""
        return min([1.0] + [n.beta for n in self.norms if n.kind is NormKind.ELASTIC])

    @property
    def gamma_min(self):
        return float(self.weights.min())

    @property
    def gamma_max(self):
        return float(self.weights.max())

    @property
    def theta(self):
        return self.lam * self.gamma_min / self.gamma_max

    @cached_property
    def kernel_arrays(self):
        """(index, offsets, l1 weight per atom, l2 weight per group) used by the kernels."""
        idx, ptr = self.partition.order
        a = np.zeros(self.n_atoms)
        b = np.empty(self.partition.n_groups)
        for k, (g, n) in enumerate(zip(self.partition.groups, self.norms)):
            a[list(g)] = self.weights[k] * n.l1_part
            b[k] = self.weights[k] * n.l2_part
        return idx, ptr, a, b

    def value(self, x):
        x = np.asarray(x, dtype=np.float64)
        _, _, a, b = self.kernel_arrays
        return float(np.abs(x) @ a + self.partition.group_norms(x) @ b)

    def l2_group_mask(self):
        return np.array([n.kind is NormKind.L2 for n in self.norms])


@dataclass(frozen=True, eq=False)
class SparseCode:
    values: np.ndarray
    partition: GroupPartition | None = None

    def __post_init__(self):
        object.__setattr__(self, "values", _readonly(np.asarray(self.values).reshape(-1)))

    @cached_property
    def support(self):
        return frozenset(np.flatnonzero(self.values != 0).tolist())

    @cached_property
    def group_norms(self):
        if self.partition is None:
            raise InvalidInputError("code has no partition attached")
        return self.partition.group_norms(self.values)


def _values(x):
    if isinstance(x, SparseCode):
        return x.values
    return np.asarray(x, dtype=np.float64).reshape(-1)


def _support_mask(x, m):
    """Boolean mask from a code vector, a boolean mask, or a set of indices."""
    if isinstance(x, SparseCode):
        return x.values != 0
    if isinstance(x, (set, frozenset)):
        mask = np.zeros(m, dtype=bool)
        if x:
            mask[np.fromiter(x, dtype=np.int64)] = True
        return mask
    v = np.asarray(x)
    if v.dtype == bool:
        return v.reshape(-1)
    return v.reshape(-1) != 0


# --- metrics -----------------------------------------------------------------

def _require_unit(D):
    if not D.unit_normed:
        raise InvalidInputError("dictionary columns must have unit l2 norm")


def mutual_coherence(D, signed=False):
    """Largest off-diagonal Gram entry.

    With ``signed=True`` the raw inner products are maximised; the default
    maximises their absolute values, which is what the certificates use.
    """
    D = as_dictionary(D)
    if D.n_atoms < 2:
        raise InvalidInputError("coherence needs at least two atoms")
    _require_unit(D)
    G = np.array(D.gram if signed else np.abs(D.gram))
    np.fill_diagonal(G, -np.inf)
    return float(G.max())


def neighborhoods(D):
    """Indices of atoms not orthogonal to each atom (the atom itself included)."""
    D = as_dictionary(D)
    return tuple(frozenset(np.flatnonzero(row).tolist()) for row in D.neighbor_mask)


def max_stripe(D):
    return int(as_dictionary(D).neighbor_mask.sum(axis=1).max())


def stripe_norm(x, D):
    """Largest number of support entries falling in one neighbourhood."""
    D = as_dictionary(D)
    mask = _support_mask(x, D.n_atoms)
    if mask.size != D.n_atoms:
        raise InvalidInputError(f"code length {mask.size} does not match {D.n_atoms} atoms")
    return int(D.neighbor_mask[:, mask].sum(axis=1).max()) if mask.any() else 0


def local_amplitude(e, D):
    """max over atoms of the l2 norm of e restricted to that atom's support."""
    D = as_dictionary(D)
    e = np.asarray(e, dtype=np.float64).reshape(-1)
    if e.size != D.n_signal:
        raise InvalidInputError(f"vector length {e.size} does not match {D.n_signal} rows")
    nz = np.abs(D.matrix) > ZERO_TOL
    return float(np.sqrt((e[:, None] ** 2 * nz).sum(axis=0).max()))


def local_l0(x, D):
    """max over atoms of the number of nonzeros of x inside that atom's support."""
    D = as_dictionary(D)
    mask = _support_mask(x, D.n_signal)
    nz = np.abs(D.matrix) > ZERO_TOL
    return int(nz[mask].sum(axis=0).max()) if mask.any() else 0


def characteristic_vector(x, spec: RegularizerSpec):
    """Indicator of the support, widened to whole groups for l2-tagged groups."""
    m = spec.n_atoms
    mask = _support_mask(x, m).copy()
    if mask.size != m:
        raise InvalidInputError(f"code length {mask.size} does not match {m} atoms")
    for g, n in zip(spec.partition.groups, spec.norms):
        if n.kind is NormKind.L2 and mask[list(g)].any():
            mask[list(g)] = True
    return mask


def is_group_full(x, spec: RegularizerSpec):
    """True when every l2 group is either entirely inside or entirely outside the support."""
    mask = _support_mask(x, spec.n_atoms)
    for g, n in zip(spec.partition.groups, spec.norms):
        if n.kind is NormKind.L2:
            inside = mask[list(g)]
            if inside.any() and not inside.all():
                return False
    return True


def pinv_columns(A, rank_tol=1e-10):
    """Pseudo-inverse of a full-column-rank matrix via pivoted QR.

    Raises RankError (carrying the detected rank) when the columns are dependent.
    """
    A = np.asarray(A, dtype=np.float64)
    k = A.shape[1]
    if k == 0:
        return np.zeros((0, A.shape[0]))
    Q, R, piv = scipy.linalg.qr(A, mode="economic", pivoting=True)
    diag = np.abs(np.diag(R))
    smax = np.linalg.norm(A, 2)
    rank = int(np.sum(diag > rank_tol * smax))
    if rank < k:
        raise RankError("sub-dictionary is rank deficient", rank, k)
    X = scipy.linalg.solve_triangular(R, Q.T)
    out = np.empty_like(X)
    out[piv] = X
    return out


def erc(support, D, lam=1.0):
    """lam - max over atoms outside the support of ||pinv(D_S) d_w||_1."""
    D = as_dictionary(D)
    mask = _support_mask(support, D.n_atoms)
    if not mask.any():
        raise InvalidInputError("support must be non-empty")
    if mask.all():
        return float(lam)
    P = pinv_columns(D.matrix[:, mask])
    vals = np.abs(P @ D.matrix[:, ~mask]).sum(axis=0)
    return float(lam - vals.max())
