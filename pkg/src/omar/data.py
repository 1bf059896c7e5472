"""Clustered household data and the CSV schema used by the CLI."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

M_CAP = 30


class DataError(ValueError):
    """Malformed input data; ``line`` is the 1-based CSV line when known."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


@dataclass(frozen=True, eq=False)
class ClusterData:
    """One cluster: binary outcomes ``y``, binary treatments ``a`` and covariates ``x`` (n x d)."""

    cluster_id: str
    y: np.ndarray
    a: np.ndarray
    x: np.ndarray
    household_ids: tuple = field(default=())

    def __post_init__(self):
        y = np.asarray(self.y, dtype=np.int64).reshape(-1)
        a = np.asarray(self.a, dtype=np.int64).reshape(-1)
        x = np.asarray(self.x, dtype=float)
        if x.ndim == 1:
            x = x.reshape(-1, 1)
        n = y.shape[0]
        if n < 1:
            raise DataError(f"cluster {self.cluster_id!r} is empty")
        if a.shape[0] != n or x.shape[0] != n:
            raise DataError(f"cluster {self.cluster_id!r}: y, a, x lengths differ")
        if not np.isin(y, (0, 1)).all() or not np.isin(a, (0, 1)).all():
            raise DataError(f"cluster {self.cluster_id!r}: y and a must be 0/1")
        if not np.isfinite(x).all():
            raise DataError(f"cluster {self.cluster_id!r}: non-finite covariates")
        hh = tuple(self.household_ids) if self.household_ids else tuple(str(j + 1) for j in range(n))
        for arr in (y, a, x):
            arr.setflags(write=False)
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "a", a)
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "household_ids", hh)

    @property
    def n(self) -> int:
        return int(self.y.shape[0])

    @property
    def d(self) -> int:
        return int(self.x.shape[1])

    def peer_counts(self) -> np.ndarray:
        """S_{i(-j)}: treated peers of each household."""
        return int(self.a.sum()) - self.a

    def peer_fraction(self) -> np.ndarray:
        """Abar_{i(-j)}; zero for singleton clusters."""
        if self.n == 1:
            return np.zeros(1)
        return self.peer_counts() / (self.n - 1)

    def subset(self, rows: Sequence[int]) -> "ClusterData":
        rows = np.asarray(rows, dtype=int)
        return ClusterData(
            self.cluster_id,
            self.y[rows],
            self.a[rows],
            self.x[rows],
            tuple(self.household_ids[r] for r in rows),
        )

    def same_as(self, other: "ClusterData") -> bool:
        return (
            self.cluster_id == other.cluster_id
            and self.household_ids == other.household_ids
            and np.array_equal(self.y, other.y)
            and np.array_equal(self.a, other.a)
            and np.array_equal(self.x, other.x)
        )


def validate_dataset(clusters: Sequence[ClusterData], m_cap: int = M_CAP) -> None:
    if len(clusters) == 0:
        raise DataError("dataset has no clusters")
    d = clusters[0].d
    seen = set()
    for c in clusters:
        if c.d != d:
            raise DataError(f"cluster {c.cluster_id!r} has {c.d} covariates, expected {d}")
        if c.n > m_cap:
            raise DataError(f"cluster {c.cluster_id!r} has {c.n} households (cap {m_cap})")
        if c.cluster_id in seen:
            raise DataError(f"duplicate cluster id {c.cluster_id!r}")
        seen.add(c.cluster_id)


def cluster_sizes(clusters: Sequence[ClusterData]) -> np.ndarray:
    return np.array([c.n for c in clusters], dtype=np.int64)


def cluster_features(clusters: Sequence[ClusterData], include_size: bool = True) -> np.ndarray:
    """Fixed-width cluster summaries used by the kernel rule: covariate means (and n)."""
    rows = []
    for c in clusters:
        row = c.x.mean(axis=0)
        if include_size:
            row = np.append(row, float(c.n))
        rows.append(row)
    return np.vstack(rows)


def cluster_means(clusters: Sequence[ClusterData]) -> tuple[np.ndarray, np.ndarray]:
    """(Ybar_i, Abar_i) per cluster."""
    ybar = np.array([c.y.mean() for c in clusters])
    abar = np.array([c.a.mean() for c in clusters])
    return ybar, abar


# --------------------------------------------------------------------------
# CSV I/O

def _header(d: int) -> list[str]:
    return ["cluster_id", "household_id", "y", "a"] + [f"x{k + 1}" for k in range(d)]


def _fmt(v: float) -> str:
    return repr(float(v))


def write_csv(clusters: Sequence[ClusterData], path: str | Path) -> None:
    """Write the dataset in the ingest schema; floats are written round-trip exact."""
    d = clusters[0].d if clusters else 0
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(_header(d))
        for c in clusters:
            for j in range(c.n):
                w.writerow([c.cluster_id, c.household_ids[j], int(c.y[j]), int(c.a[j])] + [_fmt(v) for v in c.x[j]])


def _parse_binary(value: str, name: str, line: int) -> int:
    v = value.strip()
    if v not in ("0", "1"):
        raise DataError(f"column {name!r} must be 0 or 1, got {value!r}", line)
    return int(v)


def read_csv(path: str | Path, m_cap: int = M_CAP) -> list[ClusterData]:
    """Read ``cluster_id,household_id,y,a,x1..xd``; rows are grouped by cluster in file order."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"{path} does not exist")
    with open(path, newline="", encoding="utf-8") as fh:
        return parse_csv(fh, m_cap=m_cap)


def parse_csv(fh: Iterable[str] | io.TextIOBase, m_cap: int = M_CAP) -> list[ClusterData]:
    reader = csv.reader(fh)
    try:
        header = next(reader)
    except StopIteration:
        raise DataError("empty file", 1) from None
    header = [h.strip() for h in header]
    required = ["cluster_id", "household_id", "y", "a"]
    for k, name in enumerate(required):
        if len(header) <= k or header[k] != name:
            raise DataError(f"header must start with {','.join(required)}", 1)
    cov_names = header[4:]
    if not cov_names:
        raise DataError("no covariate columns (x1..xd)", 1)
    for k, name in enumerate(cov_names):
        if name != f"x{k + 1}":
            raise DataError(f"covariate columns must be x1..x{len(cov_names)}, got {name!r}", 1)
    width = len(header)

    groups: dict[str, dict] = {}
    for lineno, row in enumerate(reader, start=2):
        if not row or all(not cell.strip() for cell in row):
            continue
        if len(row) != width:
            raise DataError(f"expected {width} fields, got {len(row)}", lineno)
        cid = row[0].strip()
        if cid == "":
            raise DataError("empty cluster_id", lineno)
        y = _parse_binary(row[2], "y", lineno)
        a = _parse_binary(row[3], "a", lineno)
        try:
            x = [float(v) for v in row[4:]]
        except ValueError:
            raise DataError("non-numeric covariate", lineno) from None
        if not all(np.isfinite(x)):
            raise DataError("non-finite covariate", lineno)
        g = groups.setdefault(cid, {"y": [], "a": [], "x": [], "hh": [], "first": lineno})
        g["y"].append(y)
        g["a"].append(a)
        g["x"].append(x)
        g["hh"].append(row[1].strip())

    clusters = [
        ClusterData(cid, np.array(g["y"]), np.array(g["a"]), np.array(g["x"], dtype=float), tuple(g["hh"]))
        for cid, g in groups.items()
    ]
    for cid, g in groups.items():
        if len(g["y"]) > m_cap:
            raise DataError(f"cluster {cid!r} has {len(g['y'])} households (cap {m_cap})", g["first"])
    validate_dataset(clusters, m_cap)
    return clusters
