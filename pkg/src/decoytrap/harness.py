"""End-to-end experiments: corpus, trap selection, monitor, attack, kill, metrics."""
from __future__ import annotations

import csv
import io
import json
import logging
import math
import os
import queue
import statistics
import subprocess
import sys
import tempfile
import threading
import time
from dataclasses import asdict, dataclass, field

import psutil

from . import emulator, features, selection
from .emulator import Attack, AttackLog, AttackProfile, Manifest
from .monitor import READY_LINE, AlertReport, kill_action_emulator

log = logging.getLogger(__name__)

MISSED = "missed"
STATUS_OK = "ok"
STATUS_INFRA = "infrastructure_failure"
READY_TIMEOUT_S = 20.0
LATE_ALERT_GRACE_S = 1.0
MEMORY_SAMPLE_INTERVAL_S = 0.05


class ClockError(ValueError):
    pass


class MonitorStartupError(RuntimeError):
    pass


def count_file_loss(root: str, extension: str) -> int:
    """Regular files under ``root`` whose name ends with ``extension``."""
    if not extension:
        raise ValueError("extension must be non-empty")
    n = 0
    for dirpath, _, files in os.walk(root):
        for f in files:
            if f.endswith(extension) and os.path.isfile(os.path.join(dirpath, f)):
                n += 1
    return n


def detection_delay(attack_start_ns: int, alert: AlertReport) -> float:
    """Seconds from attack start to the alert's triggering event."""
    if isinstance(attack_start_ns, AttackLog):
        attack_start_ns = attack_start_ns.start_at
    dt = alert.event.observed_at - attack_start_ns
    if dt < 0:
        raise ClockError(f"alert observed {-dt / 1e9:.6f}s before the attack started; clocks are not comparable")
    return dt / 1e9


@dataclass
class Corpus:
    """A generated corpus on disk plus its manifest."""

    label: str
    root: str
    manifest: Manifest

    @property
    def files_total(self) -> int:
        return self.manifest.total_files

    def created_lookup(self) -> dict[str, float]:
        return self.manifest.created_lookup(self.root)

    @classmethod
    def generate(cls, label: str, spec: emulator.CorpusSpec, root: str) -> "Corpus":
        return cls(label, os.path.abspath(root), emulator.generate_corpus(spec, root))

    @classmethod
    def open(cls, root: str, manifest_path: str, label: str | None = None) -> "Corpus":
        return cls(label or os.path.basename(os.path.abspath(root)), os.path.abspath(root), Manifest.load(manifest_path))


@dataclass
class ExperimentResult:
    method: str
    profile: str
    corpus: str
    seed: int
    files_total: int
    files_lost: int
    file_loss_pct: float
    detection_delay_s: float | str
    trap_count: int
    trap_pct: float
    monitor_memory_mb: float | None
    status: str = STATUS_OK
    error: str = ""
    traps_lost: int = 0
    files_untouched: int = 0
    traps_intact: int = 0
    alert_kind: str = ""
    stop_cause: str = ""
    attack_started_wall: float = 0.0
    finished_wall: float = 0.0
    restore_exact: bool | None = None
    lost_per_directory: dict = field(default_factory=dict)

    @property
    def missed(self) -> bool:
        return self.detection_delay_s == MISSED

    @property
    def key(self) -> tuple:
        return (self.corpus, self.method, self.profile, self.seed)

    def check(self) -> None:
        if not 0 <= self.files_lost <= self.files_total:
            raise AssertionError(f"files_lost={self.files_lost} outside [0, {self.files_total}]")
        if not self.missed and self.status == STATUS_OK and self.detection_delay_s < 0:
            raise AssertionError("negative detection delay")
        if self.files_total and abs(self.trap_pct - 100.0 * self.trap_count / self.files_total) > 1e-9:
            raise AssertionError("trap_pct inconsistent with trap_count")

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentResult":
        known = {f for f in cls.__dataclass_fields__}
        return cls(**{k: v for k, v in data.items() if k in known})


class _MonitorProcess:
    """The monitor as a child process; alerts arrive as JSON lines."""

    def __init__(self, trap_file: str, backend: str = "auto", audit_log: str | None = None):
        cmd = [sys.executable, "-m", "decoytrap", "monitor", "--traps", trap_file, "--mode", "FirstHit", "--backend", backend]
        if audit_log:
            cmd += ["--audit-log", audit_log]
        self.proc = subprocess.Popen(cmd, stdout=subprocess.PIPE, stderr=subprocess.PIPE, text=True, bufsize=1)
        self.lines: queue.Queue[str | None] = queue.Queue()
        self._reader = threading.Thread(target=self._read, daemon=True)
        self._reader.start()

    def _read(self) -> None:
        for line in self.proc.stdout:
            self.lines.put(line.rstrip("\n"))
        self.lines.put(None)

    def wait_ready(self, timeout: float) -> None:
        deadline = time.monotonic() + timeout
        while True:
            left = deadline - time.monotonic()
            try:
                line = self.lines.get(timeout=max(left, 0.0))
            except queue.Empty:
                raise MonitorStartupError(f"monitor not ready within {timeout:.0f}s") from None
            if line is None:
                err = self.proc.stderr.read() if self.proc.stderr else ""
                raise MonitorStartupError(f"monitor exited before READY: {err.strip()[-500:]}")
            if line == READY_LINE:
                return

    def close(self) -> None:
        if self.proc.poll() is None:
            self.proc.terminate()
            try:
                self.proc.wait(5)
            except subprocess.TimeoutExpired:
                self.proc.kill()
                self.proc.wait()
        for stream in (self.proc.stdout, self.proc.stderr):
            if stream:
                stream.close()


class _MemorySampler(threading.Thread):
    def __init__(self, pid: int):
        super().__init__(daemon=True)
        self.proc = psutil.Process(pid)
        self.samples: list[int] = []
        self.halt = threading.Event()

    def sample(self) -> None:
        try:
            self.samples.append(self.proc.memory_info().rss)
        except psutil.NoSuchProcess:
            pass

    def run(self) -> None:
        while not self.halt.wait(MEMORY_SAMPLE_INTERVAL_S):
            self.sample()

    def mean_mb(self) -> float | None:
        if len(self.samples) < 3:
            return None
        return statistics.fmean(self.samples) / 2**20


def _file_census(corpus: Corpus, traps: selection.TrapList, extension: str) -> dict:
    """Classify every file now on disk: lost, intact trap, untouched original."""
    known = {os.path.join(corpus.root, *e.path.split("/")) for e in corpus.manifest.files}
    trap_active = set(traps.active_paths)
    trap_original = traps.original_paths
    lost = traps_lost = untouched = intact = other = 0
    per_dir: dict[str, int] = {}
    for dirpath, _, files in os.walk(corpus.root):
        for f in files:
            if f == features.SANDBOX_MARKER:
                continue
            full = os.path.join(dirpath, f)
            if f.endswith(extension):
                lost += 1
                rel = os.path.relpath(dirpath, corpus.root)
                per_dir[rel] = per_dir.get(rel, 0) + 1
                if full[: -len(extension)] in trap_active:
                    traps_lost += 1
            elif full in trap_active:
                intact += 1
            elif full in known and full not in trap_original:
                untouched += 1
            else:
                other += 1
    return {
        "lost": lost,
        "traps_lost": traps_lost,
        "untouched": untouched,
        "intact": intact,
        "other": other,
        "per_dir": per_dir,
    }


def select_for(corpus: Corpus, method: str, options: selection.SelectionOptions | None = None) -> selection.TrapList:
    options = options or selection.SelectionOptions()
    options.created_lookup = corpus.created_lookup()
    cfg = features.ScanConfig([corpus.root])
    return selection.select_traps(cfg, method, options)


def run_experiment(
    corpus: Corpus,
    method: str,
    profile: AttackProfile,
    seed: int = 0,
    options: selection.SelectionOptions | None = None,
    traps: selection.TrapList | None = None,
    suffix: str = selection.DEFAULT_SUFFIX,
    backend: str = "auto",
    attack_timeout: float = 600.0,
    verify_restore: bool = False,
    workdir: str | None = None,
) -> ExperimentResult:
    """One cell: select, rename, monitor, attack, kill, count, restore.

    ``traps`` may carry a selection made earlier on the pristine corpus
    (selection is deterministic, so grids reuse it across profiles and
    seeds). Monitor start-up failures come back as infrastructure failures.
    """
    method = selection.canonical_method(method)
    emulator.restore_corpus(corpus.root, corpus.manifest)
    if traps is None:
        traps = select_for(corpus, method, options)
    total = corpus.files_total
    base = dict(
        method=method,
        profile=profile.name,
        corpus=corpus.label,
        seed=int(seed),
        files_total=total,
        trap_count=traps.trap_count,
        trap_pct=100.0 * traps.trap_count / total if total else 0.0,
    )
    active = selection.rename_traps(traps, suffix)
    tmpdir = tempfile.mkdtemp(prefix="decoytrap-run-", dir=workdir)
    trap_file = selection.persist_traps(active, os.path.join(tmpdir, "traps.json"))
    monitor = None
    sampler = None
    alert: list[AlertReport] = []
    attack = None
    attack_log = None
    try:
        try:
            monitor = _MonitorProcess(trap_file, backend)
            monitor.wait_ready(READY_TIMEOUT_S)
        except (MonitorStartupError, OSError) as exc:
            log.error("run %s/%s/%s aborted: %s", method, profile.name, seed, exc)
            return ExperimentResult(
                **base,
                files_lost=0,
                file_loss_pct=0.0,
                detection_delay_s=MISSED,
                monitor_memory_mb=None,
                status=STATUS_INFRA,
                error=str(exc),
                finished_wall=time.time(),
            )
        sampler = _MemorySampler(monitor.proc.pid)
        for _ in range(3):
            sampler.sample()
        sampler.start()

        attack = Attack(profile, corpus.root, seed)
        kill = kill_action_emulator(attack)
        got_alert = threading.Event()

        def pump():
            while True:
                line = monitor.lines.get()
                if line is None:
                    return
                try:
                    report = AlertReport.from_dict(json.loads(line))
                except (ValueError, KeyError, TypeError):
                    log.warning("unparseable monitor line: %r", line[:200])
                    continue
                if not alert:
                    alert.append(report)
                    kill(report)
                    got_alert.set()

        pumper = threading.Thread(target=pump, daemon=True)
        pumper.start()
        started_wall = time.time()
        attack.start()
        attack_log = attack.join(attack_timeout)
        if not alert:
            got_alert.wait(LATE_ALERT_GRACE_S)
        sampler.halt.set()
        sampler.join()
        memory = sampler.mean_mb()
    finally:
        if attack is not None and attack.running:
            attack.stop()
            attack.join(30)
        if monitor is not None:
            monitor.close()

    census = _file_census(corpus, active, profile.extension)
    delay: float | str = MISSED
    alert_kind = ""
    if alert:
        delay = detection_delay(attack_log.start_at, alert[0])
        alert_kind = alert[0].event.kind
    result = ExperimentResult(
        **base,
        files_lost=census["lost"],
        file_loss_pct=100.0 * census["lost"] / total if total else 0.0,
        detection_delay_s=delay,
        monitor_memory_mb=memory,
        traps_lost=census["traps_lost"],
        files_untouched=census["untouched"],
        traps_intact=census["intact"],
        alert_kind=alert_kind,
        stop_cause=attack_log.stop_cause,
        attack_started_wall=started_wall,
        lost_per_directory=census["per_dir"],
    )
    if census["other"] or census["lost"] + census["untouched"] + census["intact"] != total:
        result.status = STATUS_INFRA
        result.error = f"file conservation violated: {census}"
    selection.restore_traps(active)
    emulator.restore_corpus(corpus.root, corpus.manifest, verify=verify_restore)
    if verify_restore:
        result.restore_exact = not emulator.verify_corpus(corpus.root, corpus.manifest)
    try:
        os.remove(trap_file)
        os.rmdir(tmpdir)
    except OSError:
        pass
    result.finished_wall = time.time()
    result.check()
    return result


def load_results(path: str) -> list[ExperimentResult]:
    if not os.path.exists(path):
        return []
    out = []
    with open(path, encoding="utf-8") as fh:
        for n, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                out.append(ExperimentResult.from_dict(json.loads(line)))
            except (ValueError, TypeError) as exc:
                # A torn last line from an interrupted run is re-executed.
                log.warning("%s:%d unreadable result line skipped (%s)", path, n, exc)
    return out


def _mean(values) -> float | None:
    values = [v for v in values if v is not None]
    return math.fsum(values) / len(values) if values else None


@dataclass
class ComparisonReport:
    cells: list[ExperimentResult]

    def ok_cells(self, corpus: str | None = None) -> list[ExperimentResult]:
        return [c for c in self.cells if c.status == STATUS_OK and (corpus is None or c.corpus == corpus)]

    @property
    def methods(self) -> list[str]:
        return list(dict.fromkeys(c.method for c in self.cells))

    @property
    def corpora(self) -> list[str]:
        return list(dict.fromkeys(c.corpus for c in self.cells))

    def averages(self, corpus: str | None = None) -> dict[str, dict]:
        """Per-method summary; missed detections are excluded from the delay
        mean and counted separately, infrastructure failures from everything."""
        out = {}
        for m in self.methods:
            cells = [c for c in self.ok_cells(corpus) if c.method == m]
            out[m] = {
                "runs": len(cells),
                "failures": sum(1 for c in self.cells if c.method == m and c.status != STATUS_OK and (corpus is None or c.corpus == corpus)),
                "trap_pct": _mean(c.trap_pct for c in cells),
                "avg_files_lost": _mean(c.files_lost for c in cells),
                "avg_file_loss_pct": _mean(c.file_loss_pct for c in cells),
                "avg_delay_s": _mean(c.detection_delay_s for c in cells if not c.missed),
                "missed": sum(1 for c in cells if c.missed),
                "avg_memory_mb": _mean(c.monitor_memory_mb for c in cells),
            }
        return out

    def ranking(self, corpus: str | None = None, key: str = "avg_files_lost") -> list[tuple[str, float]]:
        avg = self.averages(corpus)
        scored = [(m, a[key]) for m, a in avg.items() if a[key] is not None]
        return sorted(scored, key=lambda t: t[1])

    def per_profile(self, corpus: str | None = None) -> dict[tuple[str, str], float]:
        groups: dict[tuple[str, str], list[int]] = {}
        for c in self.ok_cells(corpus):
            groups.setdefault((c.method, c.profile), []).append(c.files_lost)
        return {k: _mean(v) for k, v in groups.items()}

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["corpus", "method", "runs", "failures", "trap_pct", "avg_files_lost", "avg_file_loss_pct", "avg_delay_s", "missed", "avg_memory_mb"])
        for corpus in self.corpora:
            for m, a in self.averages(corpus).items():
                w.writerow([corpus, m] + [("" if a[k] is None else a[k]) for k in ("runs", "failures", "trap_pct", "avg_files_lost", "avg_file_loss_pct", "avg_delay_s", "missed", "avg_memory_mb")])
        return buf.getvalue()

    def to_markdown(self) -> str:
        def fmt(v, spec):
            return "n/a" if v is None else format(v, spec)

        lines = []
        for corpus in self.corpora:
            lines.append(f"### {corpus}")
            lines.append("")
            lines.append("| Method | Trap % | Avg file loss | Avg loss % | Avg delay (s) | Missed | Avg memory (MB) |")
            lines.append("|---|---:|---:|---:|---:|---:|---:|")
            for m, a in self.averages(corpus).items():
                lines.append(
                    f"| {m} | {fmt(a['trap_pct'], '.3f')} | {fmt(a['avg_files_lost'], '.2f')} | "
                    f"{fmt(a['avg_file_loss_pct'], '.4f')} | {fmt(a['avg_delay_s'], '.3f')} | {a['missed']} | "
                    f"{fmt(a['avg_memory_mb'], '.2f')} |"
                )
            lines.append("")
            lines.append("Ranking by average file loss: " + ", ".join(f"{m} ({v:.2f})" for m, v in self.ranking(corpus)))
            lines.append("")
        return "\n".join(lines)


def run_grid(
    methods,
    profiles: list[AttackProfile],
    corpora: list[Corpus],
    seeds,
    results_path: str,
    options: selection.SelectionOptions | None = None,
    backend: str = "auto",
    verify_restore: bool = False,
    progress=None,
) -> ComparisonReport:
    """Full cross product, appending each cell to ``results_path`` as it
    finishes. Cells already present in the file are not re-run."""
    done = {r.key: r for r in load_results(results_path)}
    methods = [selection.canonical_method(m) for m in methods]
    cells: list[ExperimentResult] = []
    with open(results_path, "a", encoding="utf-8") as out:
        for corpus in corpora:
            trap_cache: dict[str, selection.TrapList] = {}
            for method in methods:
                for profile in profiles:
                    for seed in seeds:
                        key = (corpus.label, method, profile.name, int(seed))
                        if key in done:
                            cells.append(done[key])
                            continue
                        if method not in trap_cache:
                            emulator.restore_corpus(corpus.root, corpus.manifest)
                            trap_cache[method] = select_for(corpus, method, options)
                        result = run_experiment(
                            corpus, method, profile, seed, options, trap_cache[method], backend=backend, verify_restore=verify_restore
                        )
                        out.write(result.to_json() + "\n")
                        out.flush()
                        cells.append(result)
                        if progress is not None:
                            progress(result)
    return ComparisonReport(cells)
