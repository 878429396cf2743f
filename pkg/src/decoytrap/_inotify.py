"""Minimal inotify binding over ctypes (Linux only)."""
from __future__ import annotations

import ctypes
import ctypes.util
import errno
import os
import select
import struct

IN_MODIFY = 0x00000002
IN_ATTRIB = 0x00000004
IN_CLOSE_WRITE = 0x00000008
IN_MOVED_FROM = 0x00000040
IN_MOVED_TO = 0x00000080
IN_CREATE = 0x00000100
IN_DELETE = 0x00000200
IN_DELETE_SELF = 0x00000400
IN_MOVE_SELF = 0x00000800
IN_UNMOUNT = 0x00002000
IN_Q_OVERFLOW = 0x00004000
IN_IGNORED = 0x00008000
IN_ONLYDIR = 0x01000000
IN_EXCL_UNLINK = 0x04000000
IN_ISDIR = 0x40000000

IN_NONBLOCK = os.O_NONBLOCK
IN_CLOEXEC = 0o2000000

_HEADER = struct.Struct("iIII")
_BUF = 256 * 1024

_libc = None


def _lib():
    global _libc
    if _libc is None:
        _libc = ctypes.CDLL(ctypes.util.find_library("c") or None, use_errno=True)
        _libc.inotify_init1.argtypes = [ctypes.c_int]
        _libc.inotify_add_watch.argtypes = [ctypes.c_int, ctypes.c_char_p, ctypes.c_uint32]
        _libc.inotify_rm_watch.argtypes = [ctypes.c_int, ctypes.c_int]
    return _libc


def available() -> bool:
    if not os.uname().sysname == "Linux":
        return False
    try:
        return hasattr(_lib(), "inotify_init1")
    except OSError:
        return False


class Inotify:
    """One inotify instance; ``read`` blocks until events or ``close``."""

    def __init__(self):
        fd = _lib().inotify_init1(IN_NONBLOCK | IN_CLOEXEC)
        if fd < 0:
            e = ctypes.get_errno()
            raise OSError(e, f"inotify_init1: {os.strerror(e)}")
        self.fd = fd
        self._wake_r, self._wake_w = os.pipe()
        self._poll = select.poll()
        self._poll.register(self.fd, select.POLLIN)
        self._poll.register(self._wake_r, select.POLLIN)
        self.closed = False

    def add_watch(self, path: str, mask: int) -> int:
        wd = _lib().inotify_add_watch(self.fd, os.fsencode(path), mask)
        if wd < 0:
            e = ctypes.get_errno()
            raise OSError(e, os.strerror(e), path)
        return wd

    def read(self) -> list[tuple[int, int, int, bytes]]:
        """Next batch of ``(wd, mask, cookie, name)``; empty once closed."""
        while not self.closed:
            try:
                ready = self._poll.poll()
            except InterruptedError:
                continue
            if any(fd == self._wake_r for fd, _ in ready):
                return []
            try:
                data = os.read(self.fd, _BUF)
            except BlockingIOError:
                continue
            except OSError as exc:
                if exc.errno == errno.EBADF:
                    return []
                raise
            return list(_parse(data))
        return []

    def wake(self) -> None:
        if not self.closed:
            os.write(self._wake_w, b"x")

    def close(self) -> None:
        if self.closed:
            return
        self.wake()
        self.closed = True

    def release(self) -> None:
        """Close the descriptors; call after the reader thread has exited."""
        self.closed = True
        for fd in (self.fd, self._wake_r, self._wake_w):
            try:
                os.close(fd)
            except OSError:
                pass


def _parse(data: bytes):
    off = 0
    n = len(data)
    while off + _HEADER.size <= n:
        wd, mask, cookie, length = _HEADER.unpack_from(data, off)
        off += _HEADER.size
        name = data[off : off + length].rstrip(b"\0")
        off += length
        yield wd, mask, cookie, name
