"""Synthetic endpoints and a ransomware behaviour emulator.

Nothing here runs malware. "Encryption" overwrites a file with seeded
pseudo-random bytes of the same length and appends the family's extension,
which is all the file-loss metric observes. Attacks refuse to run unless
the target root carries the sandbox marker written by
:func:`generate_corpus`.
"""
from __future__ import annotations

import hashlib
import json
import logging
import math
import os
import shutil
import threading
import time
import zlib
from dataclasses import asdict, dataclass, field
from typing import Iterable

import numpy as np

from .features import SANDBOX_MARKER, name_key

log = logging.getLogger(__name__)

ORDERS = ("Alphabetical", "ReverseAlphabetical", "DepthFirst", "BreadthFirst", "Random")
STOP_GRACE_S = 0.2

_WORDS = (
    "agenda budget camera contract draft export figure grant invoice journal ledger "
    "memo minutes notes offer paper photo plan poster proposal receipt record report "
    "resume review scan schedule sheet slides song statement summary survey thesis "
    "ticket track travel video voucher whitepaper"
).split()

DEFAULT_TYPE_MIX = {
    "pdf": 0.22,
    "docx": 0.16,
    "xlsx": 0.1,
    "txt": 0.1,
    "jpg": 0.16,
    "png": 0.08,
    "mp3": 0.08,
    "csv": 0.06,
    "pptx": 0.04,
}


@dataclass
class CountLaw:
    """Per-directory file count: ``fixed`` (always the mean), ``uniform`` on
    mean +/- spread, or ``normal`` with sd = spread. Never below 3."""

    mean: float
    spread: float = 0.0
    law: str = "fixed"

    def draw(self, rng: np.random.Generator) -> int:
        if self.law == "fixed":
            n = round(self.mean)
        elif self.law == "uniform":
            n = int(rng.integers(round(self.mean - self.spread), round(self.mean + self.spread) + 1))
        elif self.law == "normal":
            n = round(rng.normal(self.mean, self.spread))
        else:
            raise ValueError(f"unknown count law {self.law!r}")
        return max(3, int(n))


@dataclass
class CorpusSpec:
    """Shape of a synthetic endpoint.

    A directory holds a few activities (a project, a photo series, a run of
    statements). Files of one activity share a name stem, mostly a type and
    a size scale, are created over a window of days, and are numbered in
    creation order.
    """

    n_directories: int
    files_per_directory: CountLaw
    size_median: int = 4096
    size_sigma: float = 1.2
    size_max: int = 256 * 1024
    type_mix: dict[str, float] = field(default_factory=lambda: dict(DEFAULT_TYPE_MIX))
    time_start: int = 1_546_300_800  # 2019-01-01T00:00:00Z
    time_end: int = 1_704_067_200  # 2024-01-01T00:00:00Z
    groups_mean: float = 5.0
    min_groups: int = 3
    group_span_days: float = 20.0
    burst_mean: float = 16.0
    burst_gap_s: float = 60.0
    burst_hour_sd_h: float = 0.3
    size_spread: float = 0.02
    type_purity: float = 0.99
    edit_probability: float = 0.05
    edit_days: float = 30.0
    seed: int = 0

    def __post_init__(self):
        if isinstance(self.files_per_directory, dict):
            self.files_per_directory = CountLaw(**self.files_per_directory)
        total = sum(self.type_mix.values())
        if not math.isclose(total, 1.0, abs_tol=1e-9):
            raise ValueError(f"type mix probabilities sum to {total}, not 1")
        self.min_groups = int(self.min_groups)
        if self.min_groups < 1:
            raise ValueError("min_groups must be at least 1")
        if self.n_directories < 1:
            raise ValueError("need at least one directory")
        if self.time_end <= self.time_start:
            raise ValueError("empty timestamp range")


def ep1_like(n_directories: int = 12, seed: int = 0) -> CorpusSpec:
    """Fewer files per folder (about 450)."""
    return CorpusSpec(n_directories, CountLaw(450, 30, "uniform"), seed=seed)


def ep2_like(n_directories: int = 5, seed: int = 0) -> CorpusSpec:
    """More files per folder (about 1,000)."""
    return CorpusSpec(n_directories, CountLaw(1080, 60, "uniform"), seed=seed)


def reference_spec(seed: int = 0) -> CorpusSpec:
    """Desk-scale endpoint: 40 folders, about 18,000 files."""
    return CorpusSpec(40, CountLaw(450, 30, "uniform"), seed=seed)


@dataclass(frozen=True)
class ManifestEntry:
    path: str  # relative to the corpus root, '/'-separated
    size: int
    type_tag: str
    created: int
    modified: int
    content_seed: int
    sha256: str


@dataclass
class Manifest:
    spec: dict
    files: list[ManifestEntry]

    @property
    def total_files(self) -> int:
        return len(self.files)

    def to_json(self) -> str:
        return json.dumps({"spec": self.spec, "files": [asdict(f) for f in self.files]}, indent=0, sort_keys=True)

    def save(self, path: str) -> str:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(self.to_json())
        return path

    @classmethod
    def load(cls, path: str) -> "Manifest":
        with open(path, encoding="utf-8") as fh:
            data = json.load(fh)
        return cls(data["spec"], [ManifestEntry(**f) for f in data["files"]])

    def created_lookup(self, root: str) -> dict[str, float]:
        root = os.path.abspath(root)
        return {os.path.join(root, *f.path.split("/")): float(f.created) for f in self.files}


def content_bytes(content_seed: int, size: int) -> bytes:
    return np.random.default_rng(content_seed).bytes(size)


def _spec_dict(spec: CorpusSpec) -> dict:
    d = asdict(spec)
    d["files_per_directory"] = asdict(spec.files_per_directory)
    return d


def _split(n: int, k: int, rng: np.random.Generator) -> list[int]:
    """Split n files into k groups of at least 3 (fewer groups if n is small)."""
    k = max(1, min(k, n // 3))
    extra = n - 3 * k
    shares = rng.dirichlet(np.full(k, 2.0))
    counts = np.floor(shares * extra).astype(int)
    counts[: extra - counts.sum()] += 1
    return [3 + int(c) for c in counts]


def _plan_directory(spec: CorpusSpec, rng: np.random.Generator) -> list[dict]:
    n = spec.files_per_directory.draw(rng)
    exts = list(spec.type_mix)
    probs = np.array([spec.type_mix[e] for e in exts])
    groups = _split(n, spec.min_groups + int(rng.poisson(max(0.0, spec.groups_mean - spec.min_groups))), rng)
    stems = rng.permutation(len(_WORDS))
    plan = []
    for j, count in enumerate(groups):
        stem = _WORDS[stems[j % len(_WORDS)]] + (f"{j // len(_WORDS)}" if j >= len(_WORDS) else "")
        stem += "_" + "".join(chr(97 + int(c)) for c in rng.integers(0, 26, 3))
        main_ext = exts[int(rng.choice(len(exts), p=probs))]
        scale = spec.size_median * math.exp(rng.normal(0, spec.size_sigma))
        span = max(3600.0, rng.exponential(spec.group_span_days) * 86400)
        start = int(rng.integers(spec.time_start, max(spec.time_start + 1, spec.time_end - int(span))))
        # Files land in short bursts (a scan session, a photo burst) on
        # different days of the activity, around the hour it is usually
        # worked on.
        n_bursts = max(1, int(round(count / spec.burst_mean)))
        hour = rng.normal(14.0, 3.0)
        days = np.floor((start + rng.uniform(0, span, n_bursts)) / 86400.0)
        burst_at = days * 86400.0 + 3600.0 * (hour + rng.normal(0, spec.burst_hour_sd_h, n_bursts))
        which = np.sort(rng.integers(0, n_bursts, count))
        offsets = np.empty(count)
        for b in range(n_bursts):
            members = which == b
            offsets[members] = rng.exponential(spec.burst_gap_s, int(members.sum())).cumsum()
        created = np.sort((burst_at[which] + offsets).astype(np.int64))
        start_no = int(rng.integers(1, 500))
        for k in range(count):
            ext = main_ext if rng.random() < spec.type_purity else exts[int(rng.choice(len(exts), p=probs))]
            size = int(min(spec.size_max, max(1, scale * math.exp(rng.normal(0, spec.size_spread)))))
            t = int(created[k])
            modified = t + int(rng.integers(0, 5))
            if rng.random() < spec.edit_probability:
                # Edited on a later day, around the activity's usual hour.
                day = math.floor(t / 86400) + 1 + int(rng.exponential(spec.edit_days))
                modified = int(86400 * day + 3600 * (hour + rng.normal(0, spec.burst_hour_sd_h)))
            plan.append(
                {
                    "name": f"{stem}_{start_no + k:04d}.{ext}",
                    "size": size,
                    "type_tag": ext,
                    "created": t,
                    "modified": min(max(modified, t), spec.time_end),
                }
            )
    return plan


def generate_corpus(spec: CorpusSpec, root: str) -> Manifest:
    """Write a synthetic endpoint under ``root`` (which must be empty)."""
    root = os.path.abspath(root)
    os.makedirs(root, exist_ok=True)
    if os.listdir(root):
        raise FileExistsError(f"corpus root is not empty: {root}")
    rng = np.random.default_rng(spec.seed)
    width = max(2, len(str(spec.n_directories - 1)))
    entries: list[ManifestEntry] = []
    try:
        with open(os.path.join(root, SANDBOX_MARKER), "w") as fh:
            fh.write("synthetic corpus; emulated attacks allowed\n")
        for d in range(spec.n_directories):
            rel_dir = f"folder_{d:0{width}d}"
            os.mkdir(os.path.join(root, rel_dir))
            for i, item in enumerate(_plan_directory(spec, rng)):
                cseed = int(np.random.SeedSequence([spec.seed, d, i]).generate_state(1)[0])
                data = content_bytes(cseed, item["size"])
                rel = f"{rel_dir}/{item['name']}"
                full = os.path.join(root, rel_dir, item["name"])
                with open(full, "wb") as fh:
                    fh.write(data)
                os.utime(full, (item["modified"], item["modified"]))
                entries.append(
                    ManifestEntry(
                        rel,
                        item["size"],
                        item["type_tag"],
                        item["created"],
                        item["modified"],
                        cseed,
                        hashlib.sha256(data).hexdigest(),
                    )
                )
    except OSError:
        shutil.rmtree(root, ignore_errors=True)
        raise
    entries.sort(key=lambda e: e.path)
    return Manifest(_spec_dict(spec), entries)


def _entry_path(root: str, entry: ManifestEntry) -> str:
    return os.path.join(root, *entry.path.split("/"))


def restore_corpus(root: str, manifest: Manifest, verify: bool = False) -> int:
    """Bring ``root`` back to the manifest state; returns the number of files fixed.

    Renamed files (extension or trap suffix appended) are renamed back and
    their content regenerated when it changed. With ``verify`` every file is
    hashed, otherwise size and mtime decide.
    """
    root = os.path.abspath(root)
    by_dir: dict[str, list[ManifestEntry]] = {}
    for e in manifest.files:
        by_dir.setdefault(os.path.dirname(_entry_path(root, e)), []).append(e)
    fixed = 0
    for directory, expected in by_dir.items():
        os.makedirs(directory, exist_ok=True)
        wanted = {os.path.basename(e.path): e for e in expected}
        present = set(os.listdir(directory))
        strays = sorted(present - set(wanted), key=len, reverse=True)
        for stray in strays:
            # Longest manifest name that prefixes the stray name owns it.
            owner = max((w for w in wanted if stray.startswith(w)), key=len, default=None)
            if owner is None:
                continue
            src = os.path.join(directory, stray)
            dst = os.path.join(directory, owner)
            if owner in present:
                os.remove(src)
            else:
                os.replace(src, dst)
                present.add(owner)
            fixed += 1
        for name, e in wanted.items():
            full = os.path.join(directory, name)
            try:
                st = os.stat(full)
            except FileNotFoundError:
                st = None
            ok = st is not None and st.st_size == e.size and int(st.st_mtime) == e.modified
            if ok and verify:
                with open(full, "rb") as fh:
                    ok = hashlib.sha256(fh.read()).hexdigest() == e.sha256
            if not ok:
                with open(full, "wb") as fh:
                    fh.write(content_bytes(e.content_seed, e.size))
                fixed += 1
            if not ok or st.st_mtime_ns != e.modified * 10**9:
                os.utime(full, (e.modified, e.modified))
    return fixed


def verify_corpus(root: str, manifest: Manifest) -> list[str]:
    """Relative paths whose bytes, size, mtime or presence differ from the manifest."""
    root = os.path.abspath(root)
    bad = []
    known = set()
    for e in manifest.files:
        full = _entry_path(root, e)
        known.add(full)
        try:
            st = os.stat(full)
            with open(full, "rb") as fh:
                digest = hashlib.sha256(fh.read()).hexdigest()
        except FileNotFoundError:
            bad.append(e.path)
            continue
        if st.st_size != e.size or st.st_mtime_ns != e.modified * 10**9 or digest != e.sha256:
            bad.append(e.path)
    for dirpath, _, files in os.walk(root):
        for f in files:
            full = os.path.join(dirpath, f)
            if f != SANDBOX_MARKER and full not in known:
                bad.append(os.path.relpath(full, root))
    return bad


def is_sandbox(root: str) -> bool:
    return os.path.isfile(os.path.join(os.path.abspath(root), SANDBOX_MARKER))


@dataclass
class AttackProfile:
    name: str
    order: str
    threads: int
    pre_encryption_delay: float
    extension: str
    min_size_filter: int = 0
    throughput: float = 50.0
    category: int = 0

    def __post_init__(self):
        if self.order not in ORDERS:
            raise ValueError(f"unknown traversal order {self.order!r}")
        if self.threads < 1:
            raise ValueError("an attack needs at least one thread")
        if self.throughput <= 0:
            raise ValueError("throughput must be positive")
        if not self.extension:
            raise ValueError("an attack must tag files with an extension")


# Thread counts respect the >10 / <10 split; delays and throughputs are
# synthetic calibration knobs.
_BUILTIN = [
    # name, order, threads, delay s, extension, min size, category
    ("Atomsilo", "Alphabetical", 12, 0.10, ".ATOMSILO", 0, 1),
    ("AvosLocker", "ReverseAlphabetical", 16, 0.02, ".avos2", 0, 1),
    ("Babuk", "Alphabetical", 20, 0.05, ".babyk", 0, 1),
    ("BlackMatter", "ReverseAlphabetical", 14, 0.10, ".blackmatter", 0, 1),
    ("Cerber", "Random", 11, 0.02, ".cerber", 1024, 1),
    ("Lockbit", "Alphabetical", 24, 0.05, ".lockbit", 0, 1),
    ("Lorenz", "Random", 12, 0.15, ".lorenz", 0, 1),
    ("Surtr", "Random", 16, 0.10, ".SURT", 0, 1),
    ("Conti", "ReverseAlphabetical", 4, 0.60, ".conti", 0, 2),
    ("Cuba", "Random", 6, 0.02, ".cuba", 0, 2),
    ("Demonware", "Random", 2, 0.60, ".demonware", 0, 2),
    ("GlobeImposter", "Random", 2, 0.60, ".globe", 0, 2),
    ("Intercobros", "Random", 5, 0.02, ".intercobros", 0, 2),
    ("Karma", "Random", 4, 0.20, ".karma", 0, 2),
    ("Magniber", "Random", 3, 0.20, ".magniber", 0, 2),
    ("Makop", "Random", 6, 0.20, ".makop", 0, 2),
    ("Mespinoza", "Random", 3, 0.30, ".pysa", 0, 2),
    ("Mountlocker", "Random", 8, 0.20, ".mount", 0, 2),
]


def builtin_profiles() -> list[AttackProfile]:
    return [
        AttackProfile(n, o, t, delay, ext, min_size, category=cat)
        for n, o, t, delay, ext, min_size, cat in _BUILTIN
    ]


def get_profile(name: str) -> AttackProfile:
    for p in builtin_profiles():
        if p.name.lower() == name.lower():
            return p
    raise KeyError(f"no built-in profile named {name!r}")


@dataclass(frozen=True)
class EncryptionRecord:
    path: str
    completed_at: int  # monotonic ns
    thread: int


@dataclass
class AttackLog:
    profile: str
    start_at: int
    records: list[EncryptionRecord]
    stop_at: int
    stop_cause: str  # "Killed" | "Finished"
    stop_requested_at: int | None = None
    skipped: int = 0

    def to_jsonl(self) -> str:
        head = {
            "profile": self.profile,
            "start_at": self.start_at,
            "stop_at": self.stop_at,
            "stop_cause": self.stop_cause,
            "stop_requested_at": self.stop_requested_at,
            "skipped": self.skipped,
        }
        lines = [json.dumps(head)]
        lines += [json.dumps(asdict(r)) for r in self.records]
        return "\n".join(lines) + "\n"


class SandboxViolation(PermissionError):
    pass


def _ordered_dirs(root: str, order: str, rng: np.random.Generator) -> list[str]:
    walked = []
    for dirpath, dirnames, filenames in os.walk(root):
        dirnames.sort(key=name_key)
        if any(f != SANDBOX_MARKER for f in filenames):
            walked.append(dirpath)
    if order == "Alphabetical":
        return sorted(walked, key=lambda p: [name_key(c) for c in os.path.relpath(p, root).split(os.sep)])
    if order == "ReverseAlphabetical":
        return sorted(walked, key=lambda p: [name_key(c) for c in os.path.relpath(p, root).split(os.sep)], reverse=True)
    if order == "DepthFirst":
        return walked
    if order == "BreadthFirst":
        return sorted(walked, key=lambda p: (os.path.relpath(p, root).count(os.sep), walked.index(p)))
    return [walked[i] for i in rng.permutation(len(walked))]


class Attack:
    """A running emulated attack. ``stop()`` is the kill switch."""

    def __init__(self, profile: AttackProfile, root: str, seed: int = 0, stop_signal: threading.Event | None = None):
        root = os.path.abspath(root)
        if not is_sandbox(root):
            raise SandboxViolation(f"refusing to attack {root}: no {SANDBOX_MARKER} marker")
        self.profile = profile
        self.root = root
        self.seed = seed
        self.stop_signal = stop_signal or threading.Event()
        # Different profiles draw different shuffles under the same seed.
        self._salt = zlib.crc32(profile.name.encode())
        self.stop_requested_at: int | None = None
        self._records: list[list[EncryptionRecord]] = [[] for _ in range(profile.threads)]
        self._acks: list[int | None] = [None] * profile.threads
        self._skipped = [0] * profile.threads
        self._threads: list[threading.Thread] = []
        self._supervisor: threading.Thread | None = None
        self.start_at: int | None = None
        self._log: AttackLog | None = None
        self._done = threading.Event()

    def stop(self) -> int:
        """Request a stop; returns the monotonic ns of the request. Idempotent."""
        if self.stop_requested_at is None:
            self.stop_requested_at = time.monotonic_ns()
        self.stop_signal.set()
        return self.stop_requested_at

    @property
    def running(self) -> bool:
        return self.start_at is not None and not self._done.is_set()

    def start(self) -> "Attack":
        self.start_at = time.monotonic_ns()
        self._supervisor = threading.Thread(target=self._run, name=f"attack-{self.profile.name}", daemon=True)
        self._supervisor.start()
        return self

    def _run(self) -> None:
        p = self.profile
        if p.pre_encryption_delay > 0:
            self.stop_signal.wait(p.pre_encryption_delay)
        if not self.stop_signal.is_set():
            rng = np.random.default_rng([self.seed, self._salt, 0])
            dirs = _ordered_dirs(self.root, p.order, rng)
            for t in range(p.threads):
                th = threading.Thread(target=self._worker, args=(t, dirs[t :: p.threads]), daemon=True)
                self._threads.append(th)
            for th in self._threads:
                th.start()
            for th in self._threads:
                th.join()
        now = time.monotonic_ns()
        acks = [a for a in self._acks if a is not None]
        killed = self.stop_signal.is_set()
        records = sorted((r for rs in self._records for r in rs), key=lambda r: r.completed_at)
        self._log = AttackLog(
            p.name,
            self.start_at,
            records,
            max(acks) if acks else now,
            "Killed" if killed else "Finished",
            self.stop_requested_at,
            sum(self._skipped),
        )
        self._done.set()

    def _order_files(self, directory: str, rng: np.random.Generator) -> list[str]:
        ext = self.profile.extension
        names = []
        with os.scandir(directory) as it:
            for e in it:
                if e.name == SANDBOX_MARKER or e.name.endswith(ext):
                    continue
                if e.is_file(follow_symlinks=False):
                    names.append(e.name)
        order = self.profile.order
        if order == "Random":
            names.sort()
            return [names[i] for i in rng.permutation(len(names))]
        names.sort(key=name_key, reverse=order == "ReverseAlphabetical")
        return names

    def _worker(self, tid: int, dirs: list[str]) -> None:
        p = self.profile
        rng = np.random.default_rng([self.seed, self._salt, 1, tid])
        period = 1.0 / p.throughput
        next_due = time.monotonic()
        out = self._records[tid]
        for directory in dirs:
            if self.stop_signal.is_set():
                break
            try:
                names = self._order_files(directory, rng)
            except OSError:
                continue
            for name in names:
                if self.stop_signal.is_set():
                    break
                path = os.path.join(directory, name)
                try:
                    size = os.stat(path).st_size
                    if size < p.min_size_filter:
                        self._skipped[tid] += 1
                        continue
                    with open(path, "r+b") as fh:
                        fh.write(rng.bytes(size))
                    os.rename(path, path + p.extension)
                except OSError:
                    log.debug("emulator: %s vanished or is locked; skipping", path)
                    continue
                out.append(EncryptionRecord(path, time.monotonic_ns(), tid))
                next_due += period
                delay = next_due - time.monotonic()
                if delay > 0:
                    if self.stop_signal.wait(delay):
                        break
                else:
                    next_due = time.monotonic()
        self._acks[tid] = time.monotonic_ns()

    def join(self, timeout: float | None = None) -> AttackLog:
        if not self._done.wait(timeout):
            raise TimeoutError("attack did not finish in time")
        return self._log


def run_attack(
    profile: AttackProfile,
    root: str,
    stop_signal: threading.Event | None = None,
    seed: int = 0,
    timeout: float | None = None,
) -> AttackLog:
    """Run an emulated attack to completion (or until ``stop_signal`` is set)."""
    return Attack(profile, root, seed, stop_signal).start().join(timeout)


def count_files_with_extension(root: str, extension: str) -> int:
    n = 0
    for _, _, files in os.walk(root):
        n += sum(1 for f in files if f.endswith(extension))
    return n


def encrypted_prefix_ok(sorted_names: Iterable[str], encrypted: set[str]) -> bool:
    """True when ``encrypted`` is exactly a prefix of ``sorted_names``."""
    names = list(sorted_names)
    k = len(encrypted)
    return set(names[:k]) == encrypted
