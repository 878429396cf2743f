"""Endpoint-wide trap selection, trap renaming and the trap-list file."""
from __future__ import annotations

import json
import logging
import os
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Callable, Mapping

import numpy as np

from . import features
from .clustering import (
    ClusterResult,
    affinity_propagation,
    estimate_bandwidth,
    gmm_select,
    mean_shift,
    select_minpts,
    similarity_matrix,
)
from .clustering.distance import pairwise_dists
from .clustering.optics import medoid

log = logging.getLogger(__name__)

ML_METHODS = ("AP", "GMM", "MeanShift", "OPTICS")
ALL_METHODS = ML_METHODS + ("APFO",)
APFO_SOURCES = ("APFO-ML", "APFO-alpha", "APFO-revalpha")
DEFAULT_SUFFIX = "_tp"

_ALIASES = {
    "ap": "AP",
    "affinity": "AP",
    "gmm": "GMM",
    "meanshift": "MeanShift",
    "mean_shift": "MeanShift",
    "mean-shift": "MeanShift",
    "ms": "MeanShift",
    "optics": "OPTICS",
    "apfo": "APFO",
}


def canonical_method(name: str) -> str:
    try:
        return _ALIASES[name.lower()]
    except KeyError:
        raise ValueError(f"unknown selection method {name!r}; expected one of {ALL_METHODS}") from None


class TrapFileError(ValueError):
    """A trap-list file could not be parsed."""


class RenameError(OSError):
    pass


@dataclass
class SelectionOptions:
    include_name_order: bool = False
    variance_retained: float = features.DEFAULT_VARIANCE_RETAINED
    seed: int = 0
    ap_damping: float = 0.9
    ap_max_iter: int = 1000
    ap_convergence_iter: int = 100
    ap_preference: float | str = "median"
    gmm_criterion: str = "BIC"
    gmm_k_max: int = 10
    gmm_restarts: int = 5
    gmm_reg_floor: float = 1e-6
    ms_quantile: float = 0.3
    optics_minpts_candidates: list[int] | None = None
    optics_threshold_quantile: float = 0.75
    workers: int = 1
    # Creation times keyed by absolute path, for filesystems that cannot
    # record them. Not part of the serialised configuration.
    created_lookup: Mapping[str, float] | None = field(default=None, repr=False, compare=False)


@dataclass(frozen=True)
class TrapEntry:
    original_path: str
    active_path: str
    directory: str
    method: str
    source: str


@dataclass
class TrapList:
    entries: list[TrapEntry]
    method: str
    created_at: float
    total_files: int
    eligible_directories: int
    warnings: list[str] = field(default_factory=list)

    @property
    def trap_count(self) -> int:
        return len(self.entries)

    @property
    def trap_percentage(self) -> float:
        return 100.0 * len(self.entries) / self.total_files if self.total_files else 0.0

    @property
    def active_paths(self) -> list[str]:
        return [e.active_path for e in self.entries]

    @property
    def original_paths(self) -> set[str]:
        return {e.original_path for e in self.entries}

    def directories(self) -> list[str]:
        return sorted({e.directory for e in self.entries})


def cluster_dataset(dataset: features.DirectoryDataset, method: str, options: SelectionOptions) -> ClusterResult:
    X = dataset.matrix
    method = canonical_method(method)
    if method == "AP":
        S = similarity_matrix(X, options.ap_preference)
        return affinity_propagation(S, options.ap_damping, options.ap_max_iter, options.ap_convergence_iter)
    if method == "GMM":
        return gmm_select(
            X,
            k_max=options.gmm_k_max,
            criterion=options.gmm_criterion,
            restarts=options.gmm_restarts,
            seed=options.seed,
            reg_floor=options.gmm_reg_floor,
        )
    if method == "MeanShift":
        return mean_shift(X, estimate_bandwidth(X, options.ms_quantile))
    if method == "OPTICS":
        _, result = select_minpts(X, options.optics_minpts_candidates, options.optics_threshold_quantile)
        return result
    raise ValueError(f"{method} is not a clustering method")


def _directory_traps(
    directory: str, method: str, options: SelectionOptions, warnings: list[str]
) -> tuple[list[TrapEntry], list[features.FileRecord]]:
    dataset = features.build_dataset(
        directory,
        include_name_order=options.include_name_order,
        variance_retained=options.variance_retained,
        created_lookup=options.created_lookup,
        warnings=warnings,
    )
    try:
        result = cluster_dataset(dataset, method, options)
        result.validate()
        picks = [int(i) for i in result.exemplars]
    except Exception as exc:  # noqa: BLE001 - any clustering failure falls back
        msg = f"{method} failed on {directory} ({exc}); using the directory medoid"
        log.warning(msg)
        warnings.append(msg)
        D = pairwise_dists(dataset.matrix)
        picks = [medoid(D, np.arange(len(dataset.records)))]
    recs = dataset.records
    entries = [TrapEntry(recs[i].path, recs[i].path, dataset.directory, method, method) for i in sorted(picks)]
    return entries, recs


def _per_directory(config: features.ScanConfig, fn: Callable[[str, list[str]], list[TrapEntry]], workers: int):
    warnings: list[str] = []
    total = 0
    eligible = []
    for d, n in features.walk_endpoint(config, warnings):
        total += n
        if n >= config.min_files:
            eligible.append(d)
    eligible.sort()
    if workers > 1:
        buckets: list[list[str]] = [[] for _ in eligible]
        with ThreadPoolExecutor(max_workers=workers) as pool:
            chunks = list(pool.map(lambda a: fn(a[1], buckets[a[0]]), enumerate(eligible)))
        for b in buckets:
            warnings.extend(b)
    else:
        chunks = [fn(d, warnings) for d in eligible]
    if not eligible:
        msg = "no eligible directories found under " + ", ".join(config.roots)
        log.warning(msg)
        warnings.append(msg)
    return chunks, total, len(eligible), warnings


def _dedup(entries: list[TrapEntry]) -> list[TrapEntry]:
    seen: set[str] = set()
    out = []
    for e in entries:
        if e.original_path not in seen:
            seen.add(e.original_path)
            out.append(e)
    return out


def select_traps(config: features.ScanConfig, method: str, options: SelectionOptions | None = None) -> TrapList:
    """Cluster every eligible directory and keep each cluster's exemplar file."""
    options = options or SelectionOptions()
    method = canonical_method(method)
    if method == "APFO":
        return apfo_select(config, options)
    chunks, total, n_eligible, warnings = _per_directory(
        config, lambda d, w: _directory_traps(d, method, options, w)[0], options.workers
    )
    entries = _dedup([e for chunk in chunks for e in chunk])
    return TrapList(entries, method, time.time(), total, n_eligible, warnings)


def apfo_select(config: features.ScanConfig, options: SelectionOptions | None = None) -> TrapList:
    """AP exemplars plus the first file in name order and the first in reverse
    name order of every eligible directory, without duplicates."""
    options = options or SelectionOptions()

    def one(directory: str, warnings: list[str]) -> list[TrapEntry]:
        ml, records = _directory_traps(directory, "AP", options, warnings)
        out = [TrapEntry(e.original_path, e.active_path, e.directory, "APFO", "APFO-ML") for e in ml]
        ranked = sorted(records, key=lambda r: features.name_key(r.name))
        d = os.path.abspath(directory)
        for rec, source in ((ranked[0], "APFO-alpha"), (ranked[-1], "APFO-revalpha")):
            out.append(TrapEntry(rec.path, rec.path, d, "APFO", source))
        return _dedup(out)

    chunks, total, n_eligible, warnings = _per_directory(config, one, options.workers)
    entries = _dedup([e for chunk in chunks for e in chunk])
    return TrapList(entries, "APFO", time.time(), total, n_eligible, warnings)


def rename_traps(traps: TrapList, suffix: str = DEFAULT_SUFFIX) -> TrapList:
    """Append ``suffix`` to every trap's full file name (report.pdf -> report.pdf_tp).

    All-or-nothing: if any rename fails, the ones already done are undone
    and the error is re-raised.
    """
    if not suffix:
        raise ValueError("trap suffix must be non-empty")
    for e in traps.entries:
        target = e.original_path + suffix
        if os.path.lexists(target):
            raise RenameError(f"rename target already exists: {target}")
    done: list[tuple[str, str]] = []
    renamed = []
    try:
        for e in traps.entries:
            target = e.original_path + suffix
            if os.path.lexists(target):
                raise RenameError(f"rename target already exists: {target}")
            os.rename(e.active_path, target)
            done.append((e.active_path, target))
            renamed.append(TrapEntry(e.original_path, target, e.directory, e.method, e.source))
    except OSError as exc:
        for src, dst in reversed(done):
            try:
                os.rename(dst, src)
            except OSError:
                log.error("rollback failed: could not rename %s back to %s", dst, src)
        if isinstance(exc, RenameError):
            raise
        raise RenameError(f"could not rename trap {exc.filename}: {exc.strerror}") from exc
    return TrapList(renamed, traps.method, traps.created_at, traps.total_files, traps.eligible_directories, list(traps.warnings))


def restore_traps(traps: TrapList, missing_ok: bool = True) -> TrapList:
    """Rename traps back to their original names."""
    restored = []
    for e in traps.entries:
        if e.active_path != e.original_path:
            try:
                os.rename(e.active_path, e.original_path)
            except FileNotFoundError:
                if not missing_ok:
                    raise
                log.info("trap %s no longer present; leaving it", e.active_path)
        restored.append(TrapEntry(e.original_path, e.original_path, e.directory, e.method, e.source))
    return TrapList(restored, traps.method, traps.created_at, traps.total_files, traps.eligible_directories, list(traps.warnings))


def traps_to_dict(traps: TrapList) -> dict:
    return {
        "method": traps.method,
        "created_at": traps.created_at,
        "total_files": traps.total_files,
        "eligible_directories": traps.eligible_directories,
        "warnings": list(traps.warnings),
        "entries": [asdict(e) for e in traps.entries],
    }


def traps_from_dict(data) -> TrapList:
    if isinstance(data, list):
        data = {"entries": data}
    if not isinstance(data, dict) or not isinstance(data.get("entries"), list):
        raise TrapFileError("trap file must hold an object with an 'entries' array")
    entries = []
    for i, item in enumerate(data["entries"]):
        try:
            entries.append(
                TrapEntry(
                    str(item["original_path"]),
                    str(item["active_path"]),
                    str(item["directory"]),
                    str(item["method"]),
                    str(item.get("source", item["method"])),
                )
            )
        except (KeyError, TypeError) as exc:
            raise TrapFileError(f"entry {i} is malformed: missing {exc}") from None
    methods = {e.method for e in entries}
    return TrapList(
        entries,
        str(data.get("method", methods.pop() if len(methods) == 1 else "")),
        float(data.get("created_at", 0.0)),
        int(data.get("total_files", 0)),
        int(data.get("eligible_directories", 0)),
        list(data.get("warnings", [])),
    )


def persist_traps(traps: TrapList, path: str) -> str:
    tmp = f"{path}.tmp{os.getpid()}"
    with open(tmp, "w", encoding="utf-8") as fh:
        json.dump(traps_to_dict(traps), fh, indent=1)
        fh.write("\n")
    os.replace(tmp, path)
    return path


def load_traps(path: str) -> TrapList:
    with open(path, encoding="utf-8") as fh:
        text = fh.read()
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise TrapFileError(f"{path}: line {exc.lineno} column {exc.colno}: {exc.msg}") from None
    return traps_from_dict(data)


class Rescanner:
    """Periodically re-selects traps and swaps them in.

    On each tick the current traps are renamed back, ``select`` runs, and the
    new list is renamed and handed to ``on_swap``. If selection fails, the
    previous traps are renamed again and stay active.
    """

    def __init__(
        self,
        interval: float,
        select: Callable[[], TrapList],
        current: TrapList | None = None,
        suffix: str = DEFAULT_SUFFIX,
        on_swap: Callable[[TrapList], None] | None = None,
    ):
        if interval <= 0:
            raise ValueError("rescan interval must be positive")
        self.interval = interval
        self._select = select
        self._suffix = suffix
        self._on_swap = on_swap
        self.current = current
        self.invocations = 0
        self.failures = 0
        self._stop = threading.Event()
        self._thread = threading.Thread(target=self._run, name="trap-rescan", daemon=True)

    def start(self) -> "Rescanner":
        self._thread.start()
        return self

    def cancel(self, timeout: float | None = None) -> None:
        self._stop.set()
        if self._thread.is_alive() and threading.current_thread() is not self._thread:
            self._thread.join(timeout)

    def _run(self) -> None:
        while not self._stop.wait(self.interval):
            self.tick()

    def tick(self) -> None:
        self.invocations += 1
        previous = self.current
        if previous is not None:
            previous = restore_traps(previous)
        try:
            fresh = rename_traps(self._select(), self._suffix)
        except Exception:  # noqa: BLE001 - a failed rescan must not drop protection
            self.failures += 1
            log.exception("trap rescan failed; keeping the previous trap set")
            if previous is not None:
                self.current = rename_traps(previous, self._suffix)
            return
        self.current = fresh
        if self._on_swap is not None:
            self._on_swap(fresh)


def schedule_rescan(interval: float, select: Callable[[], TrapList], **kwargs) -> Rescanner:
    return Rescanner(interval, select, **kwargs).start()
