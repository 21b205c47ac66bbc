"""Dictionary construction, synthetic and certified problem instances, IDX files."""
from __future__ import annotations

import csv
import gzip
import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .classify import LinearClassifier, pool_groups
from .container import read_bundle, read_matrix, write_bundle, write_matrix
from .dictionary import (
    L1,
    L2,
    Dictionary,
    GroupPartition,
    RegularizerSpec,
    elastic,
    local_amplitude,
    local_l0,
    mutual_coherence,
    stripe_norm,
)
from .errors import FormatError, GenerationError, InfeasibleRequestError, InvalidInputError
from .solver import LayeredProblem
from .stability import (
    DEFAULT_C,
    check_recovery_conditions,
    error_factor,
    layered_error_bounds,
    stripe_limit,
)


def welch_bound(n, m):
    return math.sqrt((m - n) / (n * (m - 1))) if m > n else 0.0


def _coherence(D):
    G = np.abs(D.T @ D)
    np.fill_diagonal(G, 0.0)
    return float(G.max())


def build_low_coherence_dictionary(n, m, partition=None, *, seed=0, target_mu=None, max_rounds=300, shrink=0.95):
    """Unit-norm n x m frame with small coherence, by alternating projection.

    ``partition`` is accepted for interface symmetry; the construction treats
    all atoms alike.

    Each round clips the off-diagonal Gram entries to a level that shrinks
    towards the target (the Welch bound by default), then projects back to
    a rank-n positive semidefinite Gram and renormalizes.  Returns the best
    frame seen and its coherence.
    """
    if n < 1 or m < 1:
        raise InvalidInputError("dictionary dimensions must be positive")
    rng = np.random.default_rng(seed)
    if m <= n:
        Q, _ = np.linalg.qr(rng.standard_normal((n, m)))
        return Dictionary.normalized(Q), 0.0
    target = welch_bound(n, m) if target_mu is None else float(target_mu)
    D = rng.standard_normal((n, m))
    D /= np.linalg.norm(D, axis=0)
    best, best_mu = D, _coherence(D)
    cur = best_mu
    for _ in range(max_rounds):
        if best_mu <= target * (1 + 1e-9):
            break
        level = max(target, shrink * cur)
        G = np.clip(D.T @ D, -level, level)
        np.fill_diagonal(G, 1.0)
        w, V = np.linalg.eigh(G)
        D = (V[:, -n:] * np.sqrt(np.maximum(w[-n:], 0.0))).T
        norms = np.linalg.norm(D, axis=0)
        if np.any(norms < 1e-12):
            D = rng.standard_normal((n, m))
            norms = np.linalg.norm(D, axis=0)
        D = D / norms
        cur = _coherence(D)
        if cur < best_mu:
            best, best_mu = D, cur
    return Dictionary.normalized(best), best_mu


def build_block_dictionary(n, m, n_blocks, *, seed=0, max_rounds=300):
    """Block-diagonal frame whose atom i lives in block i % n_blocks.

    Atoms in different blocks are orthogonal, so a group whose atoms sit in
    distinct blocks has stripe norm 1.  Returns (Dictionary, block id per atom).
    """
    if not 1 <= n_blocks <= min(n, m):
        raise InvalidInputError(f"need 1 <= n_blocks <= min(n, m), got {n_blocks}")
    rows = np.array_split(np.arange(n), n_blocks)
    block_of = np.arange(m) % n_blocks
    D = np.zeros((n, m))
    for b in range(n_blocks):
        cols = np.flatnonzero(block_of == b)
        sub, _ = build_low_coherence_dictionary(rows[b].size, cols.size, seed=seed * 7919 + b, max_rounds=max_rounds)
        D[np.ix_(rows[b], cols)] = sub.matrix
    return Dictionary.normalized(D), block_of


def noise_with_local_amplitude(D, level, rng):
    e = rng.standard_normal(D.n_signal)
    if level == 0:
        return np.zeros(D.n_signal)
    return e * (level / local_amplitude(e, D))


@dataclass(frozen=True, eq=False)
class CertifiedInstance:
    D: Dictionary
    spec: RegularizerSpec
    gamma_true: np.ndarray
    E: np.ndarray
    X: np.ndarray
    Y: np.ndarray
    certificate: object
    active_groups: tuple


def random_tags(n_groups, rng, beta_range=(0.6, 0.95)):
    """Random mix of l1, l2 and elastic tags."""
    out = []
    for _ in range(n_groups):
        k = rng.integers(3)
        out.append(L1 if k == 0 else L2 if k == 1 else elastic(round(float(rng.uniform(*beta_range)), 3)))
    return tuple(out)


def generate_certified_instance(n, m, partition: GroupPartition, noise_level, c=DEFAULT_C, *, tags=None,
                                n_active=1, n_blocks=None, positive=False, weight_spread=1.0,
                                amplitude=(2.0, 3.0), seed=0, max_tries=50, dictionary=None) -> CertifiedInstance:
    """Random instance meeting the single-layer recovery conditions.

    The dictionary is block-diagonal (see build_block_dictionary) so that a
    group's atoms are mutually orthogonal.  Group weights are set to the
    smallest value the noise allows, and nonzero entries have magnitudes in
    ``amplitude`` times the resulting entrywise error bound.  ``tags`` is a
    sequence of norms, a single norm, or "mixed".
    """
    if partition.n_atoms != m:
        raise InvalidInputError(f"partition covers {partition.n_atoms} atoms, m = {m}")
    if noise_level < 0:
        raise InvalidInputError("noise level must be non-negative")
    if weight_spread < 1:
        raise InvalidInputError("weight_spread must be >= 1")
    rng = np.random.default_rng(seed)
    k = partition.n_groups
    if n_blocks is None:
        n_blocks = int(min(partition.sizes.max(), n, m))
    if dictionary is None:
        D, _ = build_block_dictionary(n, m, n_blocks, seed=seed)
    else:
        D = dictionary
    mu = mutual_coherence(D)
    for attempt in range(max_tries):
        if tags is None:
            norms = (L2,) * k
        elif tags == "mixed":
            norms = random_tags(k, rng)
        elif hasattr(tags, "kind"):
            norms = (tags,) * k
        else:
            norms = tuple(tags)
        rel = np.ones(k)
        if weight_spread > 1:
            rel = rng.uniform(1.0, weight_spread, k)
            if k > 1:
                lo, hi = rng.choice(k, 2, replace=False)
                rel[lo], rel[hi] = 1.0, weight_spread
        probe = RegularizerSpec(partition, norms, rel)
        lim = stripe_limit(c, probe.theta, mu)
        order = rng.permutation(k)
        chosen = []
        mask = np.zeros(m, dtype=bool)
        for g in order:
            if len(chosen) == n_active:
                break
            trial = mask.copy()
            trial[list(partition.groups[g])] = True
            if stripe_norm(trial, D) <= lim:
                chosen.append(int(g))
                mask = trial
        if len(chosen) < n_active:
            if attempt == max_tries - 1 or tags in (None,) or hasattr(tags, "kind"):
                raise InfeasibleRequestError(
                    f"only {len(chosen)} of {n_active} groups fit the stripe limit {lim:.3f} (mu = {mu:.3f})")
            continue
        E = noise_with_local_amplitude(D, noise_level, rng)
        ea = local_amplitude(E, D)
        gmin = ea / (probe.lam * (1 - c)) if ea > 0 else 1e-10
        spec = RegularizerSpec(partition, norms, rel * gmin)
        bound = (spec.gamma_max + ea) * error_factor(c, spec.theta, mu)
        scale = bound if ea > 0 else 1.0 / amplitude[0]
        g_true = np.zeros(m)
        idx = np.flatnonzero(mask)
        mags = rng.uniform(*amplitude, idx.size) * scale
        signs = np.ones(idx.size) if positive else rng.choice([-1.0, 1.0], idx.size)
        g_true[idx] = mags * signs
        X = D.matrix @ g_true
        cert = check_recovery_conditions(D, spec, g_true, E, c)
        if cert.holds:
            return CertifiedInstance(D, spec, g_true, E, X, X + E, cert, tuple(sorted(chosen)))
    raise GenerationError(f"no certified instance after {max_tries} attempts")


@dataclass(frozen=True, eq=False)
class LayeredInstance:
    problem: LayeredProblem
    codes_true: tuple
    E: np.ndarray
    X: np.ndarray
    Y: np.ndarray
    bounds: object


def _sparse_layer_dictionary(m_prev, m, rows_per_block, block_of_prev, seed):
    """Atoms of the next layer, each supported on one row from each of several previous-layer blocks."""
    rng = np.random.default_rng(seed)
    B_prev = int(block_of_prev.max()) + 1
    if rows_per_block > B_prev:
        raise InvalidInputError("rows_per_block cannot exceed the number of previous-layer blocks")
    by_block = [list(rng.permutation(np.flatnonzero(block_of_prev == b))) for b in range(B_prev)]
    n_sub = min(len(v) for v in by_block)
    D = np.zeros((m_prev, m))
    per = np.array_split(np.arange(m), n_sub)
    for s, cols in enumerate(per):
        if cols.size == 0:
            continue
        blocks = rng.permutation(B_prev)[:rows_per_block]
        rows = [by_block[b][s] for b in blocks]
        sub, _ = build_low_coherence_dictionary(rows_per_block, cols.size, seed=seed * 104729 + s)
        D[np.ix_(rows, cols)] = sub.matrix
    missing = np.flatnonzero(np.abs(D).sum(axis=1) == 0)
    return D, missing


def generate_layered_instance(n=48, m1=64, m2=96, noise_level=0.01, c=DEFAULT_C, *, n_blocks=4, rows_per_block=4,
                              n_active=1, amplitude=(2.0, 3.0), seed=0, max_tries=50) -> LayeredInstance:
    """Two-layer l1 chain meeting the per-layer recovery conditions.

    Layer-1 atoms live in orthogonal blocks; every layer-2 atom touches one
    layer-1 atom per block, so the layer-1 code of a single layer-2 atom has
    stripe norm 1.
    """
    rng = np.random.default_rng(seed)
    D1, block_of = build_block_dictionary(n, m1, n_blocks, seed=seed)
    D2m, _ = _sparse_layer_dictionary(m1, m2, rows_per_block, block_of, seed + 1)
    D2 = Dictionary.normalized(D2m)
    mu1, mu2 = mutual_coherence(D1), mutual_coherence(D2)
    for _ in range(max_tries):
        E = noise_with_local_amplitude(D1, noise_level, rng)
        e0 = local_amplitude(E, D1)
        g1 = max(e0, 1e-10) / (1 - c)
        spec1 = RegularizerSpec.uniform(GroupPartition.singletons(m1), L1, g1)
        f1 = error_factor(c, 1.0, mu1)
        b1 = (g1 + e0) * f1
        active = rng.choice(m2, n_active, replace=False)
        chi1 = np.any(D2.matrix[:, active] != 0, axis=1)
        e1 = math.sqrt(local_l0(chi1, D2)) * b1
        g2 = e1 / (1 - c)
        spec2 = RegularizerSpec.uniform(GroupPartition.singletons(m2), L1, g2)
        b2 = (g2 + e1) * error_factor(c, 1.0, mu2)
        G2 = np.zeros(m2)
        G2[active] = rng.uniform(*amplitude, n_active) * b2 * rng.choice([-1.0, 1.0], n_active)
        G1 = D2.matrix @ G2
        X = D1.matrix @ G1
        problem = LayeredProblem((D1, D2), (spec1, spec2))
        bounds = layered_error_bounds(problem, (G1, G2), E, c)
        if bounds.holds:
            return LayeredInstance(problem, (G1, G2), E, X, X + E, bounds)
    raise GenerationError(f"no certified layered instance after {max_tries} attempts "
                          f"(mu1 = {mu1:.3f}, mu2 = {mu2:.3f})")


# --- synthetic classification data ------------------------------------------

DATASET_MAGIC = b"GBPX"

@dataclass(frozen=True)
class SyntheticSpec:
    n: int = 100
    m: int = 300
    group_size: int = 4
    active_groups: int = 8
    amplitude: tuple = (1.0, 2.0)
    count: int = 10000
    margin: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.m % self.group_size:
            raise InvalidInputError("m must be a multiple of group_size")
        if not 0 < self.active_groups <= self.m // self.group_size:
            raise InvalidInputError("active_groups out of range")
        if self.margin < 0 or self.count < 1:
            raise InvalidInputError("margin must be >= 0 and count >= 1")

    @property
    def n_groups(self):
        return self.m // self.group_size

    @property
    def partition(self):
        return GroupPartition.contiguous(self.m, self.group_size)


@dataclass(frozen=True, eq=False)
class SyntheticDataset:
    X: np.ndarray
    codes: np.ndarray
    labels: np.ndarray
    margins: np.ndarray
    pooled: bool

    def __len__(self):
        return self.X.shape[0]

    def subset(self, idx):
        return SyntheticDataset(self.X[idx], self.codes[idx], self.labels[idx], self.margins[idx], self.pooled)

    def save(self, directory, seed=0):
        """Write X and codes as matrix containers plus a CSV manifest (id, label, margin, seed)."""
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        write_matrix(d / "X.bin", self.X, magic=DATASET_MAGIC)
        write_matrix(d / "codes.bin", self.codes, magic=DATASET_MAGIC)
        with open(d / "manifest.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["id", "label", "margin", "seed", "pooled"])
            for i in range(len(self)):
                w.writerow([i, int(self.labels[i]), repr(float(self.margins[i])), seed, int(self.pooled)])

    @classmethod
    def load(cls, directory):
        d = Path(directory)
        X = read_matrix(d / "X.bin", magic=DATASET_MAGIC)
        codes = read_matrix(d / "codes.bin", magic=DATASET_MAGIC)
        with open(d / "manifest.csv", newline="") as fh:
            rows = list(csv.DictReader(fh))
        if len(rows) != X.shape[0] or codes.shape[0] != X.shape[0]:
            raise FormatError(f"{d}: manifest has {len(rows)} rows for {X.shape[0]} samples")
        labels = np.array([int(r["label"]) for r in rows], dtype=np.int64)
        margins = np.array([float(r["margin"]) for r in rows])
        pooled = bool(int(rows[0]["pooled"])) if rows else False
        return cls(X, codes, labels, margins, pooled)


def make_classifiers(m, n_groups, seed=0):
    """Random unit-norm score vectors (bias 0) on full codes and on pooled group norms."""
    rng = np.random.default_rng(seed)
    w = rng.standard_normal(m)
    v = rng.standard_normal(n_groups)
    return (LinearClassifier(w[None, :] / np.linalg.norm(w), np.zeros(1)),
            LinearClassifier(v[None, :] / np.linalg.norm(v), np.zeros(1)))


def _draw_codes(spec, rng, size):
    k, gs = spec.n_groups, spec.group_size
    active = np.argsort(rng.random((size, k)), axis=1)[:, :spec.active_groups]
    codes = np.zeros((size, spec.m))
    rows = np.repeat(np.arange(size), spec.active_groups * gs)
    cols = (active[:, :, None] * gs + np.arange(gs)).reshape(size, -1).reshape(-1)
    codes[rows, cols] = rng.uniform(*spec.amplitude, rows.size)
    return codes


def _sample(D, spec, clf, pooled, rng, max_draws=1_000_000):
    part = spec.partition
    keep_codes, drawn, kept = [], 0, 0
    while kept < spec.count:
        if drawn >= max_draws and kept < 1e-3 * drawn:
            raise GenerationError(f"margin filter accepted {kept} of {drawn} draws")
        size = max(256, 2 * (spec.count - kept))
        codes = _draw_codes(spec, rng, size)
        feats = pool_groups(codes, part) if pooled else codes
        score = clf.scores(feats)[:, 0]
        ok = (np.abs(score) >= spec.margin) & (score != 0)
        drawn += size
        kept += int(ok.sum())
        keep_codes.append(codes[ok])
    codes = np.concatenate(keep_codes)[:spec.count]
    feats = pool_groups(codes, part) if pooled else codes
    score = clf.scores(feats)[:, 0]
    return SyntheticDataset(codes @ D.matrix.T, codes, (score > 0).astype(np.int64), np.abs(score), pooled)


def generate_synthetic_dataset(D, spec: SyntheticSpec, clf_full, clf_pooled, seed=None):
    """Two independent datasets: labels from the full-code score and from the pooled score.

    Samples whose |score| is below the margin are rejected.
    """
    rng = np.random.default_rng(spec.seed if seed is None else seed)
    rng_a, rng_b = rng.spawn(2)
    return _sample(D, spec, clf_full, False, rng_a), _sample(D, spec, clf_pooled, True, rng_b)


# --- IDX files ---------------------------------------------------------------

_IDX_TYPES = {0x08: ">u1", 0x09: ">i1", 0x0B: ">i2", 0x0C: ">i4", 0x0D: ">f4", 0x0E: ">f8"}
_IDX_CODES = {np.dtype(v).newbyteorder("="): k for k, v in _IDX_TYPES.items()}


def _open(path):
    path = Path(path)
    with open(path, "rb") as fh:
        head = fh.read(2)
    return gzip.open(path, "rb") if head == b"\x1f\x8b" else open(path, "rb")


def read_idx(path):
    with _open(path) as fh:
        raw = fh.read()
    if len(raw) < 4 or raw[0] != 0 or raw[1] != 0:
        raise FormatError(f"{path}: not an IDX file")
    code, ndim = raw[2], raw[3]
    if code not in _IDX_TYPES:
        raise FormatError(f"{path}: unknown IDX element type 0x{code:02x}")
    if len(raw) < 4 + 4 * ndim:
        raise FormatError(f"{path}: truncated IDX header")
    dims = struct.unpack(f">{ndim}I", raw[4:4 + 4 * ndim])
    dt = np.dtype(_IDX_TYPES[code])
    need = 4 + 4 * ndim + dt.itemsize * int(np.prod(dims))
    if len(raw) != need:
        raise FormatError(f"{path}: payload is {len(raw)} bytes, header implies {need}")
    return np.frombuffer(raw, dtype=dt, offset=4 + 4 * ndim).reshape(dims).astype(dt.newbyteorder("="))


def write_idx(path, array, compress=False):
    a = np.asarray(array)
    code = _IDX_CODES.get(a.dtype.newbyteorder("="))
    if code is None:
        raise FormatError(f"dtype {a.dtype} has no IDX code")
    body = struct.pack(">BBBB", 0, 0, code, a.ndim) + struct.pack(f">{a.ndim}I", *a.shape)
    body += a.astype(np.dtype(_IDX_TYPES[code])).tobytes()
    opener = gzip.open if compress else open
    with opener(path, "wb") as fh:
        fh.write(body)


@dataclass(frozen=True, eq=False)
class MnistSplit:
    images: np.ndarray
    labels: np.ndarray

    def __len__(self):
        return self.labels.size

    def flat(self):
        return self.images.reshape(len(self), -1).astype(np.float64)


IMAGE_MAGIC = 0x00000803
LABEL_MAGIC = 0x00000801


def _magic(path):
    with _open(path) as fh:
        head = fh.read(4)
    if len(head) < 4:
        raise FormatError(f"{path}: truncated header")
    return struct.unpack(">I", head)[0]


def load_mnist_idx(images_path, labels_path) -> MnistSplit:
    """Read an image/label IDX pair and check they describe the same samples."""
    if _magic(images_path) != IMAGE_MAGIC:
        raise FormatError(f"{images_path}: magic is not 0x{IMAGE_MAGIC:08x}")
    if _magic(labels_path) != LABEL_MAGIC:
        raise FormatError(f"{labels_path}: magic is not 0x{LABEL_MAGIC:08x}")
    images = read_idx(images_path)
    labels = read_idx(labels_path)
    if images.shape[0] != labels.shape[0]:
        raise FormatError(f"{images.shape[0]} images but {labels.shape[0]} labels")
    if labels.size and labels.max() > 9:
        raise FormatError(f"label {int(labels.max())} outside 0..9")
    return MnistSplit(images, labels)


@dataclass(frozen=True, eq=False)
class Standardizer:
    """Per-feature centering and scaling; eps keeps constant pixels finite."""

    mean: np.ndarray
    std: np.ndarray
    eps: float = 1e-8

    @classmethod
    def fit(cls, X, eps=1e-8):
        X = np.asarray(X, dtype=np.float64)
        return cls(X.mean(axis=0), X.std(axis=0), eps)

    def transform(self, X):
        return (np.asarray(X, dtype=np.float64) - self.mean) / (self.std + self.eps)

    def save(self, path):
        write_bundle(path, {"kind": "standardizer", "eps": self.eps},
                     {"mean": self.mean, "std": self.std}, magic=b"GBPS")

    @classmethod
    def load(cls, path):
        meta, arrays = read_bundle(path, magic=b"GBPS")
        return cls(arrays["mean"], arrays["std"], meta["eps"])


def standardize(train, test=None):
    st = Standardizer.fit(train)
    return st.transform(train), (None if test is None else st.transform(test)), st
