"""Dataset ingestion: LIBSVM text, normalization, splits, and the synthetic
two-Gaussian generator.  Datasets are immutable after construction and safe
to share across benchmark workers.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass, field

import numpy as np

from .errors import DataError, ParseError
from .objectives import make_problem


@dataclass(frozen=True)
class DatasetRaw:
    """Sparse parsed samples: rows of (index, value) pairs plus labels in {-1,+1}."""

    rows: tuple          # tuple of (idx array, val array) per sample
    labels: np.ndarray   # (N,) in {-1, +1}
    n: int


@dataclass(frozen=True)
class Dataset:
    """Dense normalized data matrix with a train/test split.

    A is (n, N) with samples as columns and every entry in [-1, 1];
    b is (N,) in {-1, +1}; the two index sets are disjoint.
    """

    A: np.ndarray
    b: np.ndarray
    train_idx: np.ndarray
    test_idx: np.ndarray
    meta: dict = field(default_factory=dict)

    @property
    def n(self):
        return self.A.shape[0]

    @property
    def N(self):
        return self.A.shape[1]


def _remap_label(raw, lineno):
    if raw in (1.0, 1):
        return 1.0
    if raw in (0.0, -1.0):
        return -1.0
    raise ParseError(lineno, f"label {raw} not in {{0, 1, -1}}")


def parse_libsvm(stream, n_features=None) -> DatasetRaw:
    """Parse LIBSVM text ("<label> <idx>:<val> ...", 1-based indices).

    Blank lines and '#' comment lines are skipped.  Labels in {0, 1} are
    remapped to {-1, +1} immediately (the logistic loss is degenerate at
    b = 0).  Duplicate indices on a line and malformed tokens raise
    ParseError with the offending line number.
    """
    rows, labels = [], []
    max_idx = 0
    for lineno, line in enumerate(stream, start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        tokens = line.split()
        try:
            label = float(tokens[0])
        except ValueError:
            raise ParseError(lineno, f"bad label token {tokens[0]!r}")
        labels.append(_remap_label(label, lineno))
        idxs, vals = [], []
        seen = set()
        for tok in tokens[1:]:
            try:
                idx_s, val_s = tok.split(":", 1)
                idx = int(idx_s)
                val = float(val_s)
            except ValueError:
                raise ParseError(lineno, f"bad feature token {tok!r}")
            if idx < 1:
                raise ParseError(lineno, f"feature index {idx} is not 1-based")
            if idx in seen:
                raise ParseError(lineno, f"duplicate feature index {idx}")
            seen.add(idx)
            idxs.append(idx - 1)
            vals.append(val)
            max_idx = max(max_idx, idx)
        rows.append((np.array(idxs, dtype=int), np.array(vals, dtype=float)))
    if not rows:
        raise DataError("empty dataset")
    n = max_idx if n_features is None else n_features
    if n_features is not None and max_idx > n_features:
        raise DataError(f"feature index {max_idx} exceeds override dimension {n_features}")
    return DatasetRaw(tuple(rows), np.array(labels), n)


def write_libsvm(raw: DatasetRaw, path):
    """Serialize back to LIBSVM text; round-trips the sparse representation."""
    with open(path, "w") as fh:
        for (idxs, vals), label in zip(raw.rows, raw.labels):
            feats = " ".join(f"{i + 1}:{v:.17g}" for i, v in zip(idxs, vals))
            fh.write(f"{int(label)} {feats}\n" if feats else f"{int(label)}\n")


def densify(raw: DatasetRaw) -> np.ndarray:
    A = np.zeros((raw.n, len(raw.rows)))
    for j, (idxs, vals) in enumerate(raw.rows):
        A[idxs, j] = vals
    return A


def normalize_columns(A) -> np.ndarray:
    """Scale each attribute (row of A) by 1/max|.|; all-zero rows unchanged.

    Idempotent: rows scaled once have max abs exactly 1.
    """
    A = np.asarray(A, dtype=float)
    scale = np.max(np.abs(A), axis=1)
    scale[scale == 0.0] = 1.0
    return A / scale[:, None]


def split_indices(N, train_size, seed):
    rng = np.random.default_rng(seed)
    perm = rng.permutation(N)
    return np.sort(perm[:train_size]), np.sort(perm[train_size:])


def build_dataset(raw: DatasetRaw, train_size=None, seed=0, meta=None) -> Dataset:
    A = normalize_columns(densify(raw))
    N = A.shape[1]
    if train_size is None:
        train_size = N // 2
    if not 0 < train_size < N:
        raise DataError(f"train size {train_size} out of range for N={N}")
    tr, te = split_indices(N, train_size, seed)
    info = {"train_seed": seed, "train_size": int(train_size)}
    info.update(meta or {})
    return Dataset(A, raw.labels.copy(), tr, te, info)


def gen_separable_raw(d, N, seed):
    """2N Gaussian samples: N at mu with label +1, N at mu + nu with label -1.

    mu entries are uniform over {0..19}, nu entries over {0, 0.1, ..., 0.9}.
    Returns the pre-normalization matrix for mean checks alongside labels.
    """
    if d < 1:
        raise DataError("dimension must be >= 1")
    rng = np.random.default_rng(seed)
    mu = rng.integers(0, 20, size=d).astype(float)
    nu = rng.integers(0, 10, size=d).astype(float) / 10.0
    pos = rng.standard_normal((N, d)) + mu
    neg = rng.standard_normal((N, d)) + mu + nu
    A = np.vstack([pos, neg]).T
    b = np.concatenate([np.ones(N), -np.ones(N)])
    return A, b, mu, nu


def gen_separable(d, N, seed) -> Dataset:
    """Normalized two-Gaussian dataset, split half train / half test."""
    A_raw, b, mu, nu = gen_separable_raw(d, N, seed)
    A = normalize_columns(A_raw)
    tr, te = split_indices(2 * N, N, seed + 1)
    meta = {"generator": "separable", "d": d, "count": N, "seed": seed,
            "mu": mu.tolist(), "nu": nu.tolist(), "train_seed": seed + 1}
    return Dataset(A, b, tr, te, meta)


def sample_problem(dataset: Dataset, n_sp, kind, seed, p=4):
    """Finite-sum instance over n_sp train samples drawn without replacement."""
    if n_sp > len(dataset.train_idx):
        raise DataError(f"n_sp={n_sp} exceeds train split of {len(dataset.train_idx)}")
    rng = np.random.default_rng(seed)
    pick = rng.choice(dataset.train_idx, size=n_sp, replace=False)
    return make_problem(kind, dataset.A[:, pick], dataset.b[pick], p=p, seed=seed), pick


def sample_test_problem(dataset: Dataset, n_sp, kind, seed, p=4):
    """Same as sample_problem but drawn from the held-out split."""
    if n_sp > len(dataset.test_idx):
        raise DataError(f"n_sp={n_sp} exceeds test split of {len(dataset.test_idx)}")
    rng = np.random.default_rng(seed)
    pick = rng.choice(dataset.test_idx, size=n_sp, replace=False)
    return make_problem(kind, dataset.A[:, pick], dataset.b[pick], p=p, seed=seed), pick


# --- caching: LIBSVM text plus a JSON sidecar with generator/split metadata


def _dataset_to_raw(dataset: Dataset) -> DatasetRaw:
    rows = []
    for j in range(dataset.N):
        col = dataset.A[:, j]
        idxs = np.nonzero(col)[0]
        rows.append((idxs, col[idxs]))
    return DatasetRaw(tuple(rows), dataset.b.copy(), dataset.n)


def save_cache(dataset: Dataset, directory):
    os.makedirs(directory, exist_ok=True)
    data_path = os.path.join(directory, "data.libsvm")
    write_libsvm(_dataset_to_raw(dataset), data_path)
    sidecar = {"format_version": 1, "n": dataset.n, "N": dataset.N,
               "train_idx": dataset.train_idx.tolist(),
               "test_idx": dataset.test_idx.tolist(),
               "meta": dataset.meta}
    with open(os.path.join(directory, "meta.json"), "w") as fh:
        json.dump(sidecar, fh, sort_keys=True, indent=1)
    return data_path


def load_cache(directory) -> Dataset:
    meta_path = os.path.join(directory, "meta.json")
    data_path = os.path.join(directory, "data.libsvm")
    if not (os.path.exists(meta_path) and os.path.exists(data_path)):
        raise DataError(f"no dataset cache under {directory}")
    with open(meta_path) as fh:
        sidecar = json.load(fh)
    if sidecar.get("format_version") != 1:
        raise DataError("dataset cache version mismatch")
    with open(data_path) as fh:
        raw = parse_libsvm(fh, n_features=sidecar["n"])
    A = densify(raw)  # cache stores normalized values already
    return Dataset(A, raw.labels, np.array(sidecar["train_idx"]),
                   np.array(sidecar["test_idx"]), sidecar["meta"])


def cache_checksum(directory) -> str:
    digest = hashlib.sha256()
    for name in ("data.libsvm", "meta.json"):
        with open(os.path.join(directory, name), "rb") as fh:
            digest.update(fh.read())
    return digest.hexdigest()
