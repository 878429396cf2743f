"""Trap monitor: directory watches filtered to trap names, one alert latch.

Platform notification threads produce :class:`TrapEvent` objects into a
queue; a single consumer thread owns the first-alert latch, runs the kill
action and appends to the audit log. Only content writes, renames,
deletions and creations under a trap name are monitored; reads are not.
"""
from __future__ import annotations

import json
import logging
import os
import queue
import threading
import time
from dataclasses import asdict, dataclass
from typing import Callable, Iterable, Iterator

from . import _inotify

log = logging.getLogger(__name__)

EVENT_KINDS = ("Modified", "Renamed", "Deleted", "Created")
MODES = ("FirstHit", "Continuous")
OUTCOMES = ("ActionInvoked", "ActionFailed", "DryRun")
READY_LINE = "READY"

_WATCH_MASK = (
    _inotify.IN_MODIFY
    | _inotify.IN_MOVED_FROM
    | _inotify.IN_MOVED_TO
    | _inotify.IN_CREATE
    | _inotify.IN_DELETE
    | _inotify.IN_DELETE_SELF
    | _inotify.IN_MOVE_SELF
    | _inotify.IN_ONLYDIR
)


class WatchRegistrationError(OSError):
    def __init__(self, failures: dict[str, str]):
        self.failures = failures
        listing = "; ".join(f"{d}: {why}" for d, why in sorted(failures.items()))
        super().__init__(f"could not watch {len(failures)} director{'y' if len(failures) == 1 else 'ies'}: {listing}")


class MonitorNotRunning(RuntimeError):
    pass


@dataclass(frozen=True)
class TrapEvent:
    path: str
    kind: str
    observed_at: int  # time.monotonic_ns()
    observed_wall: float
    overflow: bool = False


@dataclass(frozen=True)
class AlertReport:
    event: TrapEvent
    alert_raised_at: int
    alert_raised_wall: float
    action_outcome: str
    detail: str = ""

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, data: dict) -> "AlertReport":
        return cls(TrapEvent(**data["event"]), data["alert_raised_at"], data["alert_raised_wall"], data["action_outcome"], data.get("detail", ""))


def trap_paths_of(traps) -> list[str]:
    """Active paths from a TrapList or any iterable of paths."""
    paths = getattr(traps, "active_paths", traps)
    return [os.path.abspath(p) for p in paths]


class _Stamper:
    """Stamps events and enqueues them under one lock, so observed_at is
    non-decreasing in queue order whatever thread produced the event."""

    def __init__(self, out: queue.Queue):
        self.out = out
        self._lock = threading.Lock()

    def emit(self, items: Iterable[tuple[str, str, bool]]) -> None:
        with self._lock:
            now = time.monotonic_ns()
            wall = time.time()
            for path, kind, overflow in items:
                self.out.put(TrapEvent(path, kind, now, wall, overflow))


class _InotifyBackend:
    name = "inotify"

    def __init__(self, directories: dict[str, set[str]], stamper: _Stamper):
        self.directories = directories
        self.stamper = stamper
        self.ino = _inotify.Inotify()
        self.wd_dir: dict[int, str] = {}
        self.thread: threading.Thread | None = None

    def start(self) -> None:
        failures = {}
        for d in self.directories:
            try:
                self.wd_dir[self.ino.add_watch(d, _WATCH_MASK)] = d
            except OSError as exc:
                failures[d] = exc.strerror or str(exc)
        if failures:
            self.ino.close()
            self.ino.release()
            raise WatchRegistrationError(failures)
        self.thread = threading.Thread(target=self._run, name="trap-inotify", daemon=True)
        self.thread.start()

    def _translate(self, wd: int, mask: int, name: bytes):
        if mask & _inotify.IN_Q_OVERFLOW:
            # Events were lost; any of them might have touched a trap.
            yield "", "Modified", True
            return
        d = self.wd_dir.get(wd)
        if d is None:
            return
        if mask & (_inotify.IN_DELETE_SELF | _inotify.IN_MOVE_SELF):
            kind = "Deleted" if mask & _inotify.IN_DELETE_SELF else "Renamed"
            for trap in sorted(self.directories[d]):
                yield os.path.join(d, trap), kind, False
            return
        base = os.fsdecode(name)
        if base not in self.directories[d]:
            return
        if mask & _inotify.IN_MODIFY:
            kind = "Modified"
        elif mask & _inotify.IN_MOVED_FROM:
            kind = "Renamed"
        elif mask & _inotify.IN_DELETE:
            kind = "Deleted"
        elif mask & (_inotify.IN_CREATE | _inotify.IN_MOVED_TO):
            kind = "Created"
        else:
            return
        yield os.path.join(d, base), kind, False

    def _run(self) -> None:
        while True:
            try:
                batch = self.ino.read()
            except OSError as exc:
                log.error("inotify read failed: %s", exc)
                self.stamper.emit([("", "Modified", True)])
                return
            if not batch:
                return
            items = [it for wd, mask, _, name in batch for it in self._translate(wd, mask, name)]
            if items:
                self.stamper.emit(items)

    def stop(self) -> None:
        self.ino.close()
        if self.thread is not None:
            self.thread.join(2.0)
        self.ino.release()


class _WatchdogBackend:
    name = "watchdog"

    def __init__(self, directories: dict[str, set[str]], stamper: _Stamper):
        from watchdog.events import FileSystemEventHandler
        from watchdog.observers import Observer

        self.directories = directories
        self.stamper = stamper
        self.observer = Observer()
        backend = self

        class Handler(FileSystemEventHandler):
            def on_modified(self, event):
                backend._hit(event.src_path, "Modified", event.is_directory)

            def on_moved(self, event):
                backend._hit(event.src_path, "Renamed", event.is_directory)
                backend._hit(event.dest_path, "Created", event.is_directory)

            def on_deleted(self, event):
                backend._hit(event.src_path, "Deleted", event.is_directory)

            def on_created(self, event):
                backend._hit(event.src_path, "Created", event.is_directory)

        self.handler = Handler()

    def _hit(self, path, kind, is_dir) -> None:
        if is_dir:
            return
        path = os.fsdecode(path)
        d, base = os.path.split(path)
        if base in self.directories.get(d, ()):
            self.stamper.emit([(path, kind, False)])

    def start(self) -> None:
        failures = {}
        for d in self.directories:
            try:
                self.observer.schedule(self.handler, d, recursive=False)
            except OSError as exc:
                failures[d] = exc.strerror or str(exc)
        if failures:
            raise WatchRegistrationError(failures)
        try:
            self.observer.start()
        except OSError as exc:
            raise WatchRegistrationError({d: exc.strerror or str(exc) for d in self.directories}) from exc

    def stop(self) -> None:
        self.observer.stop()
        self.observer.join(2.0)


def _pick_backend(name: str):
    if name == "auto":
        name = "inotify" if _inotify.available() else "watchdog"
    if name == "inotify":
        if not _inotify.available():
            raise RuntimeError("inotify is not available on this platform")
        return _InotifyBackend
    if name == "watchdog":
        return _WatchdogBackend
    raise ValueError(f"unknown monitor backend {name!r}")


Action = Callable[[AlertReport], object]


class TrapMonitor:
    """Watches the directories holding traps and alerts on trap events.

    ``action`` is called with a provisional report (outcome filled in after
    it returns); ``None`` means dry run. In FirstHit mode the action runs
    exactly once and later events are dropped. In Continuous mode every
    qualifying event yields an alert and re-invokes the action.
    """

    def __init__(
        self,
        traps,
        action: Action | None = None,
        mode: str = "FirstHit",
        audit_log: str | None = None,
        backend: str = "auto",
        on_alert: Callable[[AlertReport], None] | None = None,
    ):
        if mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        self.paths = trap_paths_of(traps)
        missing = [p for p in self.paths if not os.path.lexists(p)]
        if missing:
            raise FileNotFoundError(f"{len(missing)} trap(s) missing, e.g. {missing[0]}")
        self.directories: dict[str, set[str]] = {}
        for p in self.paths:
            d, base = os.path.split(p)
            self.directories.setdefault(d, set()).add(base)
        self.action = action
        self.mode = mode
        self.audit_log = audit_log
        self.on_alert = on_alert
        self.alerts: queue.Queue[AlertReport | None] = queue.Queue()
        self._events: queue.Queue[TrapEvent | None] = queue.Queue()
        self._backend = _pick_backend(backend)(self.directories, _Stamper(self._events))
        self._latched = False
        self._consumer: threading.Thread | None = None
        self._running = False
        self.events_seen = 0

    @property
    def backend(self) -> str:
        return self._backend.name

    @property
    def running(self) -> bool:
        return self._running

    def start(self) -> "TrapMonitor":
        """Register every watch, then start consuming. Returns once ready."""
        self._backend.start()
        self._consumer = threading.Thread(target=self._consume, name="trap-alerts", daemon=True)
        self._consumer.start()
        self._running = True
        log.info("monitoring %d trap(s) in %d director(ies) via %s", len(self.paths), len(self.directories), self.backend)
        return self

    def stop(self) -> None:
        if not self._running:
            return
        self._running = False
        self._backend.stop()
        self._events.put(None)
        if self._consumer is not None:
            self._consumer.join(2.0)
        self.alerts.put(None)

    def __enter__(self):
        return self.start()

    def __exit__(self, *exc):
        self.stop()

    def _invoke(self, event: TrapEvent) -> AlertReport:
        raised = time.monotonic_ns()
        wall = time.time()
        if self.action is None:
            return AlertReport(event, raised, wall, "DryRun")
        provisional = AlertReport(event, raised, wall, "ActionInvoked")
        try:
            self.action(provisional)
        except Exception as exc:  # the monitor keeps running whatever the action does
            log.error("kill action failed: %s", exc)
            return AlertReport(event, raised, wall, "ActionFailed", str(exc))
        return provisional

    def _consume(self) -> None:
        audit = open(self.audit_log, "a", encoding="utf-8") if self.audit_log else None
        try:
            while True:
                event = self._events.get()
                if event is None:
                    return
                self.events_seen += 1
                if self.mode == "FirstHit":
                    if self._latched:
                        continue
                    self._latched = True
                report = self._invoke(event)
                if audit is not None:
                    audit.write(report.to_json() + "\n")
                    audit.flush()
                if self.on_alert is not None:
                    self.on_alert(report)
                self.alerts.put(report)
        finally:
            if audit is not None:
                audit.close()

    def wait_alert(self, timeout: float | None = None) -> AlertReport | None:
        try:
            return self.alerts.get(timeout=timeout)
        except queue.Empty:
            return None

    def __iter__(self) -> Iterator[AlertReport]:
        while True:
            report = self.alerts.get()
            if report is None:
                return
            yield report


def watch(traps, action: Action | None = None, mode: str = "FirstHit", **kwargs) -> TrapMonitor:
    """Start monitoring and return the running monitor; iterate it for alerts."""
    return TrapMonitor(traps, action, mode, **kwargs).start()


def kill_action_emulator(handle) -> Action:
    """Action that stops an in-process emulated attack (anything with ``stop()``)."""

    def action(report: AlertReport):
        return handle.stop()

    return action


def kill_action_process(pids: Iterable[int], timeout: float = 3.0) -> Action:
    """Action that terminates a set of processes. For live deployments only."""
    import psutil

    pids = list(pids)

    def action(report: AlertReport):
        procs = []
        for pid in pids:
            try:
                p = psutil.Process(pid)
                p.terminate()
                procs.append(p)
            except psutil.NoSuchProcess:
                continue
        _, alive = psutil.wait_procs(procs, timeout=timeout)
        for p in alive:
            p.kill()
        if alive:
            _, still = psutil.wait_procs(alive, timeout=timeout)
            if still:
                raise RuntimeError(f"processes survived termination: {[p.pid for p in still]}")

    return action


def measure_monitor_memory(target, samples: int = 5, interval: float = 0.05) -> float:
    """Mean resident set size of the monitoring process, in MB (2**20 bytes).

    ``target`` is a pid, a ``subprocess.Popen`` or a :class:`TrapMonitor`
    (which means this process).
    """
    import psutil

    if samples < 3:
        raise ValueError("take at least three samples")
    if isinstance(target, TrapMonitor):
        if not target.running:
            raise MonitorNotRunning("monitor is not running")
        pid = os.getpid()
    else:
        pid = getattr(target, "pid", target)
    try:
        proc = psutil.Process(pid)
        values = []
        for i in range(samples):
            if i:
                time.sleep(interval)
            values.append(proc.memory_info().rss)
    except psutil.NoSuchProcess:
        raise MonitorNotRunning(f"monitor process {pid} is not running") from None
    except psutil.AccessDenied as exc:
        raise RuntimeError(f"resident memory of {pid} is not readable") from exc
    return sum(values) / len(values) / 2**20


def read_trap_paths(path: str) -> list[str]:
    """Active trap paths from a trap-list file, without importing the
    selection stack (keeps the monitor process lean)."""
    with open(path, encoding="utf-8") as fh:
        data = json.load(fh)
    entries = data["entries"] if isinstance(data, dict) else data
    return [e["active_path"] for e in entries]


def serve(trap_file: str, mode: str = "FirstHit", audit_log: str | None = None, backend: str = "auto", out=None) -> int:
    """Monitor process main loop: print READY, then one alert JSON per line.

    The action here is the notification itself: whoever reads the stream
    (the harness, or an operator's supervisor) carries out the kill.
    """
    import signal
    import sys

    out = out or sys.stdout
    done = threading.Event()

    def emit(report: AlertReport):
        out.write(report.to_json() + "\n")
        out.flush()

    mon = TrapMonitor(read_trap_paths(trap_file), emit, mode, audit_log, backend)
    for sig in (signal.SIGTERM, signal.SIGINT):
        signal.signal(sig, lambda *_: done.set())
    mon.start()
    out.write(READY_LINE + "\n")
    out.flush()
    try:
        while not done.wait(0.5):
            pass
    finally:
        mon.stop()
    return 0
