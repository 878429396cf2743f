"""Directory scanning and per-directory feature matrices.

Every eligible directory becomes its own dataset: one row per regular file,
columns built from size, type, creation and modification time (and
optionally the file's position in name order), then reduced with PCA.
"""
from __future__ import annotations

import json
import logging
import math
import os
import stat
from dataclasses import dataclass, field
from datetime import datetime, timezone
from typing import Iterator, Mapping, Sequence

import numpy as np

log = logging.getLogger(__name__)

SECONDS_PER_DAY = 86400.0
DAYS_PER_YEAR = 365.25
DEFAULT_VARIANCE_RETAINED = 0.95
# Relative spread below which a column is treated as constant.
_ZERO_SPREAD = 1e-12
# Marks a synthetic corpus root; never treated as user data.
SANDBOX_MARKER = ".decoytrap-sandbox"


@dataclass(frozen=True)
class FileRecord:
    path: str
    size: int
    type_tag: str
    created: float
    modified: float

    def __post_init__(self):
        if self.size < 0:
            raise ValueError(f"negative size for {self.path}")
        if not (math.isfinite(self.created) and math.isfinite(self.modified)):
            raise ValueError(f"non-finite timestamp for {self.path}")

    @property
    def name(self) -> str:
        return os.path.basename(self.path)


@dataclass
class ScanConfig:
    roots: list[str]
    exclusions: list[str] = field(default_factory=list)
    min_files: int = 3

    def __post_init__(self):
        if self.min_files < 1:
            raise ValueError("min_files must be at least 1")


@dataclass(frozen=True)
class Column:
    name: str
    transform: str


@dataclass
class DirectoryDataset:
    """Feature table for one directory.

    ``features`` holds the preprocessed columns described by ``columns``;
    ``matrix`` is their PCA projection and is what the clusterers consume.
    """

    directory: str
    records: list[FileRecord]
    features: np.ndarray
    columns: list[Column]
    matrix: np.ndarray

    @property
    def paths(self) -> list[str]:
        return [r.path for r in self.records]

    def to_json(self) -> str:
        return json.dumps(
            {
                "directory": self.directory,
                "records": [
                    {
                        "path": r.path,
                        "size": r.size,
                        "type_tag": r.type_tag,
                        "created": r.created,
                        "modified": r.modified,
                    }
                    for r in self.records
                ],
                "columns": [{"name": c.name, "transform": c.transform} for c in self.columns],
                "features": self.features.tolist(),
                "matrix": self.matrix.tolist(),
            },
            indent=1,
        )


def type_tag(name: str) -> str:
    """Lower-cased extension without the dot; ``""`` when there is none."""
    ext = os.path.splitext(name)[1]
    return ext[1:].lower() if ext else ""


def name_key(name: str) -> tuple[bytes, str]:
    """Case-insensitive byte-wise collation key for base names."""
    return (os.fsencode(name.casefold()), name)


def _is_excluded(path: str, prefixes: Sequence[str]) -> bool:
    return any(path.startswith(p) for p in prefixes)


def _resolve_exclusions(root: str, exclusions: Sequence[str]) -> list[str]:
    out = []
    for ex in exclusions:
        out.append(os.path.normpath(ex if os.path.isabs(ex) else os.path.join(root, ex)))
    return out


def walk_endpoint(config: ScanConfig, warnings: list[str] | None = None) -> Iterator[tuple[str, int]]:
    """Yield ``(directory, regular_file_count)`` for every non-excluded directory.

    Counts are non-recursive. Unreadable subdirectories are skipped and noted
    in ``warnings``; an unreadable root raises.
    """
    for root in config.roots:
        root = os.path.abspath(root)
        if not os.path.isdir(root) or not os.access(root, os.R_OK | os.X_OK):
            raise PermissionError(f"scan root is missing or unreadable: {root}")
        excluded = _resolve_exclusions(root, config.exclusions)
        stack = [root]
        while stack:
            current = stack.pop()
            if _is_excluded(current, excluded):
                continue
            try:
                with os.scandir(current) as it:
                    entries = list(it)
            except OSError as exc:
                if current == root:
                    raise PermissionError(f"scan root is unreadable: {root}") from exc
                msg = f"skipped unreadable directory {current}: {exc.strerror or exc}"
                log.warning(msg)
                if warnings is not None:
                    warnings.append(msg)
                continue
            n_files = 0
            subdirs = []
            for e in entries:
                try:
                    if e.is_file(follow_symlinks=False):
                        n_files += e.name != SANDBOX_MARKER
                    elif e.is_dir(follow_symlinks=False):
                        subdirs.append(e.path)
                except OSError:
                    continue
            yield current, n_files
            stack.extend(sorted(subdirs, reverse=True))


def scan_endpoint(config: ScanConfig, warnings: list[str] | None = None) -> list[str]:
    """Directories holding at least ``min_files`` regular files, sorted by path."""
    return sorted(d for d, n in walk_endpoint(config, warnings) if n >= config.min_files)


def count_endpoint_files(config: ScanConfig) -> int:
    return sum(n for _, n in walk_endpoint(config))


def _created_time(st: os.stat_result) -> float:
    # st_birthtime exists on macOS/BSD (and Windows from 3.12); elsewhere the
    # inode change time is the closest the platform offers.
    birth = getattr(st, "st_birthtime", None)
    return float(birth) if birth is not None else float(st.st_ctime)


def extract_records(
    directory: str,
    created_lookup: Mapping[str, float] | None = None,
    warnings: list[str] | None = None,
) -> list[FileRecord]:
    """One record per regular file directly inside ``directory``.

    ``created_lookup`` overrides creation times by absolute path, for
    platforms where the filesystem cannot store them (see the corpus
    manifest).
    """
    directory = os.path.abspath(directory)
    records = []
    with os.scandir(directory) as it:
        entries = sorted(it, key=lambda e: e.name)
    for e in entries:
        if e.name == SANDBOX_MARKER:
            continue
        try:
            st = e.stat(follow_symlinks=False)
        except FileNotFoundError:
            msg = f"file vanished during scan: {e.path}"
            log.warning(msg)
            if warnings is not None:
                warnings.append(msg)
            continue
        if not stat.S_ISREG(st.st_mode):
            continue
        created = _created_time(st)
        if created_lookup is not None:
            created = created_lookup.get(e.path, created)
        records.append(FileRecord(e.path, int(st.st_size), type_tag(e.name), created, float(st.st_mtime)))
    records.sort(key=lambda r: r.path)
    return records


def standardize_column(values) -> np.ndarray:
    """Zero mean, unit population variance; constant columns map to zeros."""
    v = np.asarray(values, dtype=np.float64)
    if v.size == 0:
        raise ValueError("cannot standardize an empty column")
    if not np.all(np.isfinite(v)):
        raise ValueError("column contains non-finite values")
    mean = v.mean()
    std = v.std()
    if std <= _ZERO_SPREAD * max(1.0, abs(mean)):
        return np.zeros_like(v)
    return (v - mean) / std


def encode_types(tags: Sequence[str]) -> list[int]:
    """Integer codes in order of first appearance, starting at 0."""
    codes: dict[str, int] = {}
    return [codes.setdefault(t, len(codes)) for t in tags]


def encode_datetime(t: float) -> tuple[float, float, float, float]:
    """Time-of-day and day-of-year phases as (sin, cos) pairs, in UTC."""
    if not math.isfinite(t):
        raise ValueError("timestamp must be finite")
    day_phase = 2 * math.pi * (t % SECONDS_PER_DAY) / SECONDS_PER_DAY
    dt = datetime.fromtimestamp(t, tz=timezone.utc)
    year_start = datetime(dt.year, 1, 1, tzinfo=timezone.utc).timestamp()
    year_phase = 2 * math.pi * ((t - year_start) / SECONDS_PER_DAY) / DAYS_PER_YEAR
    return (math.sin(day_phase), math.cos(day_phase), math.sin(year_phase), math.cos(year_phase))


def name_order_features(records: Sequence[FileRecord]) -> tuple[np.ndarray, np.ndarray]:
    """Alphabetical rank mapped linearly onto [1, -1], and its reverse.

    The alphabetically first file scores 1 and the last -1 in the first
    column; the second column is the same construction for reverse order.
    """
    m = len(records)
    if m == 1:
        return np.zeros(1), np.zeros(1)
    ranked = sorted(range(m), key=lambda i: (name_key(records[i].name), records[i].path))
    alpha = np.empty(m)
    for rank, i in enumerate(ranked):
        alpha[i] = 1.0 - 2.0 * rank / (m - 1)
    return alpha, -alpha


@dataclass
class PcaFit:
    mean: np.ndarray
    components: np.ndarray
    explained_variance: np.ndarray
    scores: np.ndarray

    @property
    def n_components(self) -> int:
        return self.components.shape[0]

    def reconstruct(self) -> np.ndarray:
        """Centered reconstruction from the retained components."""
        return self.scores @ self.components


def fit_pca(matrix, variance_retained: float = DEFAULT_VARIANCE_RETAINED) -> PcaFit:
    X = np.asarray(matrix, dtype=np.float64)
    if X.ndim != 2:
        raise ValueError("PCA needs a 2-D matrix")
    m, n = X.shape
    if m < 2:
        raise ValueError("PCA needs at least two rows")
    if not 0 < variance_retained <= 1:
        raise ValueError("variance_retained must lie in (0, 1]")
    if not np.all(np.isfinite(X)):
        raise ValueError("matrix contains non-finite values")
    mean = X.mean(axis=0)
    Xc = X - mean
    _, s, vt = np.linalg.svd(Xc, full_matrices=False)
    var = s * s / (m - 1)
    total = var.sum()
    scale = max(1.0, float(np.abs(X).max()))
    if total <= (_ZERO_SPREAD * scale) ** 2:
        return PcaFit(mean, np.zeros((1, n)), np.zeros(1), np.zeros((m, 1)))
    ratio = np.cumsum(var) / total
    k = int(np.searchsorted(ratio, variance_retained - 1e-12) + 1)
    k = min(k, len(var))
    comps = vt[:k].copy()
    for row in comps:
        j = int(np.argmax(np.abs(row)))
        if row[j] < 0:
            row *= -1
    return PcaFit(mean, comps, var[:k], Xc @ comps.T)


def apply_pca(matrix, variance_retained: float = DEFAULT_VARIANCE_RETAINED) -> np.ndarray:
    """Project onto the fewest principal components reaching ``variance_retained``."""
    return fit_pca(matrix, variance_retained).scores


def feature_table(records: Sequence[FileRecord], include_name_order: bool = False) -> tuple[np.ndarray, list[Column]]:
    cols: list[np.ndarray] = []
    names: list[Column] = []
    cols.append(standardize_column([r.size for r in records]))
    names.append(Column("size", "standardize"))
    cols.append(standardize_column(encode_types([r.type_tag for r in records])))
    names.append(Column("type", "first-appearance code, standardize"))
    for field_name in ("created", "modified"):
        enc = np.array([encode_datetime(getattr(r, field_name)) for r in records])
        for j, part in enumerate(("day_sin", "day_cos", "year_sin", "year_cos")):
            cols.append(enc[:, j])
            names.append(Column(f"{field_name}.{part}", "cyclic"))
    if include_name_order:
        alpha, rev = name_order_features(records)
        cols += [alpha, rev]
        names += [Column("name_order.alpha", "rank onto [1,-1]"), Column("name_order.reverse", "rank onto [1,-1]")]
    return np.column_stack(cols), names


def build_dataset(
    directory: str,
    include_name_order: bool = False,
    variance_retained: float = DEFAULT_VARIANCE_RETAINED,
    created_lookup: Mapping[str, float] | None = None,
    warnings: list[str] | None = None,
    records: Sequence[FileRecord] | None = None,
) -> DirectoryDataset:
    if records is None:
        records = extract_records(directory, created_lookup, warnings)
    records = list(records)
    if len(records) < 3:
        raise ValueError(f"{directory} has {len(records)} regular files; at least 3 are needed")
    features, columns = feature_table(records, include_name_order)
    matrix = apply_pca(features, variance_retained)
    return DirectoryDataset(os.path.abspath(directory), records, features, columns, matrix)
