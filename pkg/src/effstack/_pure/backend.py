"""Pure-Python stand-in for the compiled core.

Frames are real memory: malloc-like ctypes buffers for fixed and segmented
frames, anonymous no-reserve mappings for the overcommit strategies. The
user-overcommit fault handler cannot run as a signal handler here, so writes
consult the same commit decision before touching protected pages.
"""
from __future__ import annotations

import ctypes
import mmap
import os
import threading
import time
import weakref

BACKEND = "python"
PAGE_SIZE = mmap.PAGESIZE
MIN_FRAME_SIZE = 1024
SEG_MARGIN = 256
SYSCALL_SEGMENT_SIZE = 8 * 1024
SEGMENT_CANARY = 0x9999999999999999
SEGMENT_HEADER_SIZE = 32
REQUEST_SIZE = 16
RETURN_ID = 64
YIELD_ID = 65

FAULT_COMMIT = 0
FAULT_ALREADY_COMMITTED = 1
FAULT_OVERFLOW = 2
FAULT_FOREIGN = 3

FIXED, SEGMENTED, OVERCOMMIT_KERNEL, OVERCOMMIT_USER = range(4)
_KINDS = {"fixed": FIXED, "segmented": SEGMENTED, "overcommit-kernel": OVERCOMMIT_KERNEL,
          "overcommit-user": OVERCOMMIT_USER}
_DEFAULT_FRAME = {FIXED: 150 * 1024, SEGMENTED: 1024, OVERCOMMIT_KERNEL: 150 * 1024,
                  OVERCOMMIT_USER: 150 * 1024}
DEBUG_FILL = 0x13
MAP_NORESERVE = getattr(mmap, "MAP_NORESERVE", 0x4000)
PROT_NONE = 0

_debug = os.environ.get("EFFSTACK_DEBUG", "1")[:1].lower() not in ("0", "n", "f")


class NativeError(RuntimeError):
    def __init__(self, code, what=""):
        self.code = code
        super().__init__(f"{what}: error {code}" if what else f"error {code}")


class FatalFault(RuntimeError):
    """What the native core would report before aborting the process."""


def debug_enabled():
    return _debug


def set_debug(on):
    global _debug
    _debug = bool(on)


def now_ns():
    return time.monotonic_ns()


def _kind(name):
    try:
        return _KINDS[name]
    except KeyError:
        raise ValueError(f"unknown stack strategy {name!r}") from None


def default_frame_size(name):
    return _DEFAULT_FRAME[_kind(name)]


# ------------------------------------------------------------------ libc

_libc = ctypes.CDLL(None, use_errno=True)
_libc.mmap.restype = ctypes.c_void_p
_libc.mmap.argtypes = [ctypes.c_void_p, ctypes.c_size_t, ctypes.c_int, ctypes.c_int, ctypes.c_int, ctypes.c_long]
_libc.munmap.argtypes = [ctypes.c_void_p, ctypes.c_size_t]
_libc.mprotect.argtypes = [ctypes.c_void_p, ctypes.c_size_t, ctypes.c_int]
_libc.mincore.argtypes = [ctypes.c_void_p, ctypes.c_size_t, ctypes.POINTER(ctypes.c_ubyte)]
_MAP_FAILED = ctypes.c_void_p(-1).value


def _os_error(what):
    err = ctypes.get_errno()
    return OSError(err, f"{what}: {os.strerror(err)}")


def _mmap(size, prot):
    addr = _libc.mmap(None, size, prot, mmap.MAP_PRIVATE | mmap.MAP_ANONYMOUS | MAP_NORESERVE, -1, 0)
    if addr is None or addr == _MAP_FAILED:
        raise _os_error("mmap")
    return addr


def _mprotect(addr, size, prot):
    if _libc.mprotect(addr, size, prot) != 0:
        raise _os_error("mprotect")


def resident_bytes(addr, length):
    pages = (length + PAGE_SIZE - 1) // PAGE_SIZE
    vec = (ctypes.c_ubyte * pages)()
    if _libc.mincore(addr, length, vec) != 0:
        return 0
    return sum(v & 1 for v in vec) * PAGE_SIZE


# -------------------------------------------------------- fault decision

def fault_decide(kind, base, total, allowed, guard, committed, addr):
    """Return (action, commit_start, commit_len) for a fault at addr."""
    top = base + total
    if addr < base or addr >= top:
        return FAULT_FOREIGN, 0, 0
    if addr < base + guard:
        return FAULT_OVERFLOW, 0, 0
    if kind != OVERCOMMIT_USER:
        return FAULT_FOREIGN, 0, 0
    frontier = top - committed
    if addr >= frontier:
        return FAULT_ALREADY_COMMITTED, 0, 0
    commit = PAGE_SIZE if committed == 0 else committed
    if committed + commit > allowed:
        commit = allowed - committed
    if commit == 0:
        return FAULT_OVERFLOW, 0, 0
    return FAULT_COMMIT, frontier - commit, commit


# -------------------------------------------------------------- registry

_reg_lock = threading.Lock()
_regions: "weakref.WeakValueDictionary[int, NativeFrame]" = weakref.WeakValueDictionary()
_region_ids = 0


def _register(frame):
    global _region_ids
    with _reg_lock:
        _region_ids += 1
        _regions[frame.base] = frame
        return _region_ids


def _deregister(frame):
    with _reg_lock:
        _regions.pop(frame.base, None)


def registry_lookup(addr):
    with _reg_lock:
        for base, f in _regions.items():
            if base <= addr < base + f.total_size:
                return f.region_id
    return None


def registry_count():
    with _reg_lock:
        return len(_regions)


def handler_installed():
    # the software fault path is "installed" exactly while regions exist
    return registry_count() > 0


def altstack_ready():
    return True


# ---------------------------------------------------------------- frames

class NativeFrame:
    """A stack frame owned by one strategy (same surface as the native class)."""

    def __init__(self, strategy, size):
        self.strategy = strategy
        self.kind = _kind(strategy)
        if size < MIN_FRAME_SIZE and self.kind != SEGMENTED:
            raise NativeError(-2, "frame: frame too small for bootstrap")
        self.size = size
        self._live = False
        self._bufs = {}
        self.guard_size = 0
        self.region_id = None
        if self.kind == FIXED:
            buf = ctypes.create_string_buffer(bytes([DEBUG_FILL]) * size if _debug else b"", size)
            self._bufs[ctypes.addressof(buf)] = buf
            self.base = ctypes.addressof(buf)
            self.allowed_size = self.total_size = size
            self.initial_sp = (self.base + size) & ~0xF
        elif self.kind == SEGMENTED:
            self._min_segment_size = 0
            self._allocations = 0
            head = self._new_segment(size)
            self._head = self._current = head
            self.base = head
            self.allowed_size = self.total_size = size
            self.initial_sp = (head + SEGMENT_HEADER_SIZE + size) & ~0xF
        else:
            allowed = (size + PAGE_SIZE - 1) & ~(PAGE_SIZE - 1)
            self.guard_size = PAGE_SIZE
            self.allowed_size = allowed
            self.total_size = allowed + PAGE_SIZE
            if self.kind == OVERCOMMIT_KERNEL:
                self.base = _mmap(self.total_size, mmap.PROT_READ | mmap.PROT_WRITE)
                _mprotect(self.base, PAGE_SIZE, PROT_NONE)
            else:
                self.base = _mmap(self.total_size, PROT_NONE)
            self._committed = 0
            self.initial_sp = (self.base + self.total_size) & ~0xF
            self.region_id = _register(self)
        self._live = True

    def __del__(self):
        if getattr(self, "_live", False):
            self._release()

    def _release(self):
        self._live = False
        if self.kind in (OVERCOMMIT_KERNEL, OVERCOMMIT_USER):
            _deregister(self)
            _libc.munmap(self.base, self.total_size)
        elif self.kind == SEGMENTED and _debug:
            for addr in self._bufs:
                if self._hdr(addr, 3) != SEGMENT_CANARY:
                    raise FatalFault("segment canary corrupted")
        self._bufs.clear()

    def release(self):
        if not self._live:
            raise RuntimeError("frame released twice")
        self._release()

    @property
    def released(self):
        return not self._live

    def _check(self):
        if not self._live:
            raise RuntimeError("frame already released")

    def committed_bytes(self):
        self._check()
        if self.kind == FIXED:
            return self.size
        if self.kind == SEGMENTED:
            return sum(size + SEGMENT_HEADER_SIZE for _, size, _, _ in self.chain())
        if self.kind == OVERCOMMIT_KERNEL:
            return resident_bytes(self.base + self.guard_size, self.allowed_size)
        return self._committed

    def resident_bytes(self):
        self._check()
        if self.kind in (OVERCOMMIT_KERNEL, OVERCOMMIT_USER):
            return resident_bytes(self.base + self.guard_size, self.allowed_size)
        return self.size

    def _in_bounds(self, addr, n):
        if self.kind == SEGMENTED:
            return any(a <= addr and addr + n <= a + len(b) for a, b in self._bufs.items())
        return self.base <= addr and addr + n <= self.base + self.total_size

    def _fault_in(self, addr):
        """Software stand-in for the SIGSEGV handler on a user region."""
        while True:
            action, start, length = fault_decide(self.kind, self.base, self.total_size, self.allowed_size,
                                                 self.guard_size, self._committed, addr)
            if action == FAULT_ALREADY_COMMITTED:
                return
            if action == FAULT_OVERFLOW:
                raise FatalFault("stack overflow")
            if action == FAULT_FOREIGN:
                raise FatalFault("fault outside any region")
            _mprotect(start, length, mmap.PROT_READ | mmap.PROT_WRITE)
            self._committed += length

    def write(self, addr, data):
        self._check()
        if not self._in_bounds(addr, len(data)):
            raise ValueError("write outside the frame")
        if self.kind in (OVERCOMMIT_KERNEL, OVERCOMMIT_USER) and addr < self.base + self.guard_size:
            raise FatalFault("stack overflow")
        if self.kind == OVERCOMMIT_USER and data:
            self._fault_in(addr)
        ctypes.memmove(addr, data, len(data))

    def read(self, addr, n):
        self._check()
        if not self._in_bounds(addr, n):
            raise ValueError("read outside the frame")
        if self.kind in (OVERCOMMIT_KERNEL, OVERCOMMIT_USER) and addr < self.base + self.guard_size:
            raise FatalFault("stack overflow")
        if self.kind == OVERCOMMIT_USER and n:
            self._fault_in(addr)
        return ctypes.string_at(addr, n)

    def count_fill(self, byte):
        self._check()
        if self.kind == SEGMENTED:
            raw = ctypes.string_at(self._head + SEGMENT_HEADER_SIZE, self._hdr(self._head, 2))
        elif self.kind == FIXED:
            raw = ctypes.string_at(self.base, self.size)
        else:
            return 0
        return len(raw) - len(raw.lstrip(bytes([byte])))

    # segmented ----------------------------------------------------------

    def _need_seg(self):
        self._check()
        if self.kind != SEGMENTED:
            raise TypeError("not a segmented frame")

    @staticmethod
    def _hdr(addr, i):
        return ctypes.c_uint64.from_address(addr + 8 * i).value

    @staticmethod
    def _set_hdr(addr, i, v):
        ctypes.c_uint64.from_address(addr + 8 * i).value = v

    def _new_segment(self, size):
        fill = bytes([DEBUG_FILL]) * (size + SEGMENT_HEADER_SIZE) if _debug else b""
        buf = ctypes.create_string_buffer(fill, size + SEGMENT_HEADER_SIZE)
        addr = ctypes.addressof(buf)
        self._bufs[addr] = buf
        for i, v in enumerate((0, 0, size, SEGMENT_CANARY)):
            self._set_hdr(addr, i, v)
        return addr

    def _link(self, first, second):
        self._set_hdr(first, 1, second)
        self._set_hdr(second, 0, first)

    @property
    def min_segment_size(self):
        self._need_seg()
        return self._min_segment_size

    @min_segment_size.setter
    def min_segment_size(self, v):
        self._need_seg()
        self._min_segment_size = v

    @property
    def allocations(self):
        self._need_seg()
        return self._allocations

    @property
    def current_segment(self):
        self._need_seg()
        return self._current

    def segment_low(self):
        self._need_seg()
        return self._current + SEGMENT_HEADER_SIZE

    def grow(self, frame_size, old_stack=0, param_size=0):
        self._need_seg()
        if param_size and not old_stack:
            raise ValueError("param_size needs old_stack")
        cur = self._current
        need = frame_size + param_size
        new_size = max(need, self._min_segment_size)
        nxt = self._hdr(cur, 1)
        if nxt == 0:
            seg = self._new_segment(new_size)
            self._allocations += 1
            self._link(cur, seg)
        elif self._hdr(nxt, 2) < need:
            seg = self._new_segment(new_size)
            self._allocations += 1
            self._link(seg, nxt)
            self._link(cur, seg)
        else:
            seg = nxt
        self._current = seg
        size = self._hdr(seg, 2)
        sp = (seg + SEGMENT_HEADER_SIZE + size - param_size) & ~0xF
        if param_size:
            ctypes.memmove(sp, old_stack, param_size)
        return sp, size - param_size

    def shrink(self):
        self._need_seg()
        prev = self._hdr(self._current, 0)
        if prev == 0:
            raise RuntimeError("segment release at chain head")
        if _debug and self._hdr(self._current, 3) != SEGMENT_CANARY:
            raise FatalFault("segment canary corrupted")
        self._current = prev
        return prev + SEGMENT_HEADER_SIZE

    def chain(self):
        self._need_seg()
        out = []
        s = self._head
        while s:
            out.append((s, self._hdr(s, 2), self._hdr(s, 3), s == self._current))
            s = self._hdr(s, 1)
        return out

    def chain_backward(self):
        self._need_seg()
        s = self._head
        while self._hdr(s, 1):
            s = self._hdr(s, 1)
        out = []
        while s:
            out.append(s)
            s = self._hdr(s, 0)
        return out

    def check_chain(self):
        self._need_seg()
        fwd = [a for a, _, _, _ in self.chain()]
        ok = (self._hdr(self._head, 0) == 0 and fwd == self.chain_backward()[::-1]
              and all(self._hdr(a, 3) == SEGMENT_CANARY for a in fwd) and self._current in fwd)
        return ok, len(fwd)


def init_segment(frame_size):
    fill = bytes([DEBUG_FILL]) * (frame_size + SEGMENT_HEADER_SIZE) if _debug else b""
    buf = ctypes.create_string_buffer(fill, frame_size + SEGMENT_HEADER_SIZE)
    addr = ctypes.addressof(buf)
    hdr = (ctypes.c_uint64 * 4).from_address(addr)
    hdr[0], hdr[1], hdr[2], hdr[3] = 0, 0, frame_size, SEGMENT_CANARY
    body = ctypes.string_at(addr + SEGMENT_HEADER_SIZE, frame_size)
    return {"prev": hdr[0], "next": hdr[1], "size": hdr[2], "canary": hdr[3],
            "filled": (not _debug) or body == bytes([DEBUG_FILL]) * frame_size}
