"""Sample representation, seeded splitting, standardization and CSV ingestion."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import PreconditionError


def _frozen(a, dtype=np.float64) -> np.ndarray:
    out = np.array(a, dtype=dtype, copy=True)
    out.setflags(write=False)
    return out


@dataclass(frozen=True)
class Dataset:
    features: np.ndarray
    response: np.ndarray
    feature_names: tuple[str, ...] = ()

    def __post_init__(self):
        X = _frozen(self.features)
        if X.ndim == 1:
            X = _frozen(X.reshape(-1, 1))
        y = _frozen(self.response).reshape(-1)
        if X.ndim != 2 or X.shape[0] < 1 or X.shape[1] < 1:
            raise PreconditionError(f"features must be a non-empty n x p matrix, got shape {X.shape}")
        if X.shape[0] != y.shape[0]:
            raise PreconditionError(f"{X.shape[0]} feature rows but {y.shape[0]} responses")
        if not (np.all(np.isfinite(X)) and np.all(np.isfinite(y))):
            raise PreconditionError("features and response must be finite")
        names = tuple(self.feature_names) or tuple(f"x{j + 1}" for j in range(X.shape[1]))
        if len(names) != X.shape[1]:
            raise PreconditionError(f"{len(names)} feature names for {X.shape[1]} columns")
        object.__setattr__(self, "features", X)
        object.__setattr__(self, "response", y)
        object.__setattr__(self, "feature_names", names)

    @property
    def n(self) -> int:
        return self.features.shape[0]

    @property
    def p(self) -> int:
        return self.features.shape[1]

    def subset(self, rows) -> "Dataset":
        rows = np.asarray(rows, dtype=np.int64)
        return Dataset(self.features[rows], self.response[rows], self.feature_names)


def read_table(path, delimiter: str = ",") -> tuple[list[str], np.ndarray]:
    """Header and all-numeric body of a CSV file.

    Raises FileNotFoundError for a missing file and PreconditionError for ragged
    rows or any cell that is not a finite real (the message names row and column).
    """
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh, delimiter=delimiter))
    if not rows:
        raise PreconditionError(f"{path}: empty file, header row required")
    header = [h.strip() for h in rows[0]]
    body = [r for r in rows[1:] if r]
    if not body:
        raise PreconditionError(f"{path}: no data rows")
    values = np.empty((len(body), len(header)))
    for r, row in enumerate(body):
        if len(row) != len(header):
            raise PreconditionError(
                f"{path}: row {r + 2} has {len(row)} cells, header has {len(header)}")
        for c, cell in enumerate(row):
            try:
                v = float(cell)
            except ValueError:
                v = math.nan
            if not math.isfinite(v):
                raise PreconditionError(
                    f"{path}: row {r + 2}, column {header[c]!r}: {cell!r} is not a finite number")
            values[r, c] = v
    return header, values


def load_csv(path, target_column: str, delimiter: str = ",", drop: Sequence[str] = ()) -> Dataset:
    """Read a headered CSV; every non-target column becomes a feature, in file order.

    Columns named in ``drop`` are ignored.  Raises FileNotFoundError for a
    missing file and PreconditionError for a missing/duplicate target column or
    any cell that is not a finite real.
    """
    header, values = read_table(path, delimiter)
    hits = [i for i, h in enumerate(header) if h == target_column]
    if not hits:
        raise PreconditionError(f"{path}: target column {target_column!r} not in header {header}")
    if len(hits) > 1:
        raise PreconditionError(f"{path}: target column {target_column!r} appears {len(hits)} times")
    t = hits[0]
    feat_cols = [c for c in range(len(header)) if c != t and header[c] not in drop]
    if not feat_cols:
        raise PreconditionError(f"{path}: need at least one feature column besides the target")
    return Dataset(values[:, feat_cols], values[:, t], tuple(header[c] for c in feat_cols))


def load_features(path, feature_names: Sequence[str], delimiter: str = ",") -> np.ndarray:
    """Feature matrix for a fitted model: columns picked by name, else all columns if the count matches."""
    header, values = read_table(path, delimiter)
    names = list(feature_names)
    if all(n in header for n in names):
        return values[:, [header.index(n) for n in names]]
    if len(header) == len(names):
        return values
    missing = [n for n in names if n not in header]
    raise PreconditionError(f"{path}: columns {missing} required by the model are missing")


# ---------------------------------------------------------------------------
# splitting
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SplitPlan:
    """Disjoint index sets, one per named role.

    Indices are kept in shuffle order, so any prefix/suffix of a role is itself
    a uniformly random subset (used for the within-role halving).
    """
    roles: tuple[tuple[str, np.ndarray], ...]
    seed: int

    def __post_init__(self):
        roles = tuple((str(name), _frozen(idx, np.int64)) for name, idx in self.roles)
        seen = set()
        for name, idx in roles:
            if idx.size < 1:
                raise PreconditionError(f"split role {name!r} is empty")
            s = set(idx.tolist())
            if len(s) != idx.size or seen & s:
                raise PreconditionError(f"split role {name!r} overlaps another role or repeats rows")
            seen |= s
        object.__setattr__(self, "roles", roles)

    @property
    def names(self) -> tuple[str, ...]:
        return tuple(n for n, _ in self.roles)

    def __getitem__(self, name: str) -> np.ndarray:
        for n, idx in self.roles:
            if n == name:
                return idx
        raise KeyError(name)

    def sizes(self) -> dict[str, int]:
        return {n: int(idx.size) for n, idx in self.roles}

    def to_dict(self) -> dict:
        return {"seed": int(self.seed),
                "roles": [{"name": n, "indices": idx.tolist()} for n, idx in self.roles]}

    @classmethod
    def from_dict(cls, d: dict) -> "SplitPlan":
        return cls(tuple((r["name"], r["indices"]) for r in d["roles"]), int(d["seed"]))

    def to_json(self) -> str:
        return json.dumps(self.to_dict())


def split_sizes(n: int, weights: Sequence[float]) -> list[int]:
    """Largest-remainder apportionment of n rows; remainder ties go to the earlier role.

    A role that would round to zero takes one row from the currently largest role.
    """
    w = [float(x) for x in weights]
    if not w:
        raise PreconditionError("at least one split role is required")
    if any(not (x > 0 and math.isfinite(x)) for x in w):
        raise PreconditionError(f"split weights must be positive, got {w}")
    if n < len(w):
        raise PreconditionError(f"n={n} is smaller than the number of roles ({len(w)})")
    total = sum(w)
    quotas = [n * x / total for x in w]
    sizes = [int(math.floor(q)) for q in quotas]
    order = sorted(range(len(w)), key=lambda i: (-(quotas[i] - sizes[i]), i))
    for i in order[: n - sum(sizes)]:
        sizes[i] += 1
    for i in range(len(sizes)):
        if sizes[i] == 0:
            donor = max(range(len(sizes)), key=lambda j: (sizes[j], -j))
            sizes[donor] -= 1
            sizes[i] = 1
    return sizes


def shuffled_indices(n: int, seed: int) -> np.ndarray:
    """Fisher-Yates permutation of 0..n-1 driven by raw PCG64 64-bit outputs.

    Step i (from n-1 down to 1) swaps position i with ``raw % (i + 1)``; the
    modulo bias is below n / 2**64 and is ignored.
    """
    bitgen = np.random.PCG64(seed)
    raw = bitgen.random_raw(max(n - 1, 0)).tolist()
    perm = list(range(n))
    for step, i in enumerate(range(n - 1, 0, -1)):
        j = raw[step] % (i + 1)
        perm[i], perm[j] = perm[j], perm[i]
    return np.array(perm, dtype=np.int64)


def make_splits(n: int, fractions: Sequence[tuple[str, float]], seed: int) -> SplitPlan:
    names = [name for name, _ in fractions]
    if len(set(names)) != len(names):
        raise PreconditionError(f"duplicate role names in {names}")
    sizes = split_sizes(n, [w for _, w in fractions])
    perm = shuffled_indices(n, seed)
    roles, start = [], 0
    for name, size in zip(names, sizes):
        roles.append((name, perm[start:start + size]))
        start += size
    return SplitPlan(tuple(roles), int(seed))


# ---------------------------------------------------------------------------
# standardization
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Standardizer:
    mean: np.ndarray
    sd: np.ndarray
    constant: np.ndarray = field(default=None)

    def __post_init__(self):
        mean = _frozen(self.mean)
        sd = _frozen(self.sd)
        const = self.constant
        const = _frozen(sd == 0 if const is None else const, bool)
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "sd", sd)
        object.__setattr__(self, "constant", const)

    def transform(self, X: np.ndarray) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        out = X.copy()
        keep = ~self.constant
        out[..., keep] = (X[..., keep] - self.mean[keep]) / self.sd[keep]
        return out

    def to_dict(self) -> dict:
        return {"mean": self.mean.tolist(), "sd": self.sd.tolist(),
                "constant": self.constant.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "Standardizer":
        return cls(np.array(d["mean"]), np.array(d["sd"]), np.array(d["constant"], dtype=bool))


def fit_standardizer(data: Dataset, rows) -> Standardizer:
    """Per-feature mean and population sd over ``rows``; constant columns are flagged."""
    rows = np.asarray(rows, dtype=np.int64)
    if rows.size == 0:
        raise PreconditionError("cannot fit a standardizer on an empty row set")
    X = data.features[rows]
    constant = X.max(axis=0) == X.min(axis=0)
    mean = X.mean(axis=0)
    sd = X.std(axis=0)
    mean = np.where(constant, 0.0, mean)
    sd = np.where(constant, 1.0, sd)
    return Standardizer(mean, sd, constant)


def apply_standardizer(s: Standardizer, data: Dataset) -> Dataset:
    if s.mean.shape[0] != data.p:
        raise PreconditionError(f"standardizer fitted on {s.mean.shape[0]} features, data has {data.p}")
    return Dataset(s.transform(data.features), data.response, data.feature_names)
