# cython: language_level=3, boundscheck=False, wraparound=False
"""Binding to the native core: real stack frames, benchmark kernels, probes."""

from libc.stdint cimport uint64_t, int64_t, uintptr_t, uint16_t, uint32_t
from libc.string cimport memcpy, memset
from libc.stdlib cimport malloc, free

cdef extern from "_csrc/effstack.h" nogil:
    ctypedef uint64_t eff_id_t
    ctypedef uint64_t eff_set_t

    int EFF_OK, EFF_ERR_STATE, EFF_ERR_SIZE, EFF_ERR_NOMEM, EFF_ERR_OS, EFF_ERR_ALIGN
    int EFF_ERR_CHAIN, EFF_ERR_STALE
    int EFF_FIXED, EFF_SEGMENTED, EFF_OVERCOMMIT_KERNEL, EFF_OVERCOMMIT_USER
    int EFF_FAULT_COMMIT, EFF_FAULT_ALREADY_COMMITTED, EFF_FAULT_OVERFLOW, EFF_FAULT_FOREIGN
    size_t EFF_MIN_FRAME_SIZE, EFF_SEG_MARGIN, EFF_SEG_SYSCALL_SEGMENT
    uint64_t EFF_SEG_CANARY
    eff_id_t EFF_RETURN, EFF_YIELD

    ctypedef struct eff_request_t:
        eff_id_t effect
        uint64_t payload

    ctypedef struct eff_ctx_t:
        pass

    ctypedef struct eff_segment_t:
        eff_segment_t *prev
        eff_segment_t *next
        size_t size
        uint64_t canary

    ctypedef struct eff_seg_state_t:
        eff_segment_t *head
        eff_segment_t *current
        size_t min_segment_size
        size_t allocations

    ctypedef struct eff_region_t:
        char *base
        size_t total_size
        size_t allowed_size
        size_t guard_size
        size_t committed_size
        int kind
        uint64_t id

    ctypedef struct eff_frame_t:
        void *base
        char *initial_sp
        size_t size
        eff_region_t *region
        eff_seg_state_t seg

    ctypedef struct eff_strategy_t:
        const char *name
        int kind
        size_t default_frame_size
        int (*init)(eff_frame_t *f, size_t size)
        void (*release)(eff_frame_t *f)
        size_t (*committed)(const eff_frame_t *f)

    const eff_strategy_t *eff_strategy_by_name(const char *name)
    int eff_debug
    size_t eff_page_size()
    void eff_core_init()

    eff_segment_t *eff_seg_init_segment(size_t frame_size)
    char *eff_seg_allocate_growth_frame(eff_seg_state_t *st, size_t *frame_size, const void *old_stack,
                                        size_t param_size)
    char *eff_seg_release_growth_frame(eff_seg_state_t *st)
    void eff_seg_free_chain(eff_seg_state_t *st)
    int eff_seg_check_chain(const eff_seg_state_t *st, size_t *count)

    int eff_fault_decide(const eff_region_t *r, uintptr_t addr, uintptr_t *commit_start, size_t *commit_len)
    eff_region_t *eff_registry_lookup(uintptr_t addr)
    size_t eff_registry_count()
    int eff_handler_installed()
    int eff_ensure_altstack()
    int eff_altstack_ready()
    size_t eff_resident_bytes(const void *addr, size_t length)

    ctypedef struct eff_sample_t:
        int64_t duration_ns
        int64_t output
        int64_t aux
        int error

    ctypedef struct eff_ad_result_t:
        double value
        double derivative
        int64_t forward_effects
        int64_t reverse_effects
        int64_t max_handle_depth
        int64_t duration_ns
        int error

    ctypedef struct eff_salt_report_t:
        uint64_t host_mismatch
        uint64_t coro_mismatch
        uint64_t sp_changes
        uint64_t roundtrips
        void *first_sp

    int64_t eff_now_ns()
    eff_sample_t eff_kernel_switch(const eff_strategy_t *s, size_t frame_size)
    eff_sample_t eff_kernel_complex(const eff_strategy_t *s, size_t frame_size, int64_t iterations)
    eff_sample_t eff_kernel_expand(const eff_strategy_t *s, size_t frame_size, int max_depth)
    eff_sample_t eff_kernel_mt(const eff_strategy_t *s, size_t frame_size, int threads, int64_t iterations,
                               int runs_per_thread)
    int64_t eff_run_async(const eff_strategy_t *s, size_t frame_size, int64_t iterations, int thread_id, int *err)
    eff_ad_result_t eff_kernel_ad(const eff_strategy_t *s, size_t frame_size, size_t iters, double x0)
    int eff_demo_read_file(const eff_strategy_t *s, size_t frame_size, const char *reply, char *seen_name,
                           size_t seen_cap, char *received, size_t received_cap)

    eff_salt_report_t eff_harness_salt(uint64_t roundtrips)
    int eff_harness_bootstrap(uint64_t arg, uint64_t *seen_arg, uintptr_t *local_addr, uintptr_t *base,
                              uintptr_t *top)
    int eff_harness_bootstrap_misaligned()
    int eff_harness_double_switch()
    int eff_harness_pingpong(uint64_t first, uint64_t second, uint64_t *a_got, uint64_t *b_got)
    int eff_harness_hot_split(const eff_strategy_t *s, size_t iterations, size_t crossing_need,
                              size_t *allocations, size_t *chain_len)
    int eff_harness_locate(const eff_set_t *masks, int depth, eff_id_t effect, int *found)
    void eff_harness_overflow(const eff_strategy_t *s, size_t frame_size, int place_canary)
    void eff_harness_unhandled(eff_id_t effect)

eff_core_init()

BACKEND = "native"
PAGE_SIZE = eff_page_size()
MIN_FRAME_SIZE = EFF_MIN_FRAME_SIZE
SEG_MARGIN = EFF_SEG_MARGIN
SYSCALL_SEGMENT_SIZE = EFF_SEG_SYSCALL_SEGMENT
SEGMENT_CANARY = EFF_SEG_CANARY
SEGMENT_HEADER_SIZE = sizeof(eff_segment_t)
REQUEST_SIZE = sizeof(eff_request_t)
RETURN_ID = EFF_RETURN
YIELD_ID = EFF_YIELD

FAULT_COMMIT = EFF_FAULT_COMMIT
FAULT_ALREADY_COMMITTED = EFF_FAULT_ALREADY_COMMITTED
FAULT_OVERFLOW = EFF_FAULT_OVERFLOW
FAULT_FOREIGN = EFF_FAULT_FOREIGN

_ERRORS = {
    EFF_ERR_STATE: "illegal coroutine state",
    EFF_ERR_SIZE: "frame too small for bootstrap",
    EFF_ERR_NOMEM: "out of memory",
    EFF_ERR_OS: "operating system call failed",
    EFF_ERR_ALIGN: "misaligned stack pointer",
    EFF_ERR_CHAIN: "broken coroutine or segment chain",
    EFF_ERR_STALE: "switch to a context that is not live",
}


class NativeError(RuntimeError):
    def __init__(self, code, what=""):
        self.code = code
        msg = _ERRORS.get(code, "error %d" % code)
        super().__init__(f"{what}: {msg}" if what else msg)


def error_name(int code):
    return _ERRORS.get(code)


def debug_enabled():
    return bool(eff_debug)


def set_debug(bint on):
    global eff_debug
    eff_debug = 1 if on else 0


cdef const eff_strategy_t *_strategy(name) except NULL:
    cdef bytes b = name.encode()
    cdef const eff_strategy_t *s = eff_strategy_by_name(b)
    if s == NULL:
        raise ValueError(f"unknown stack strategy {name!r}")
    return s


def default_frame_size(name):
    return _strategy(name).default_frame_size


cdef class NativeFrame:
    """A stack frame allocated by one of the native strategies."""

    cdef eff_frame_t f
    cdef const eff_strategy_t *s
    cdef bint live
    cdef readonly str strategy

    def __cinit__(self, str strategy, size_t size):
        self.s = _strategy(strategy)
        self.strategy = strategy
        if size < EFF_MIN_FRAME_SIZE and self.s.kind != EFF_SEGMENTED:
            raise NativeError(EFF_ERR_SIZE, "frame")
        cdef int rc = self.s.init(&self.f, size)
        if rc != EFF_OK:
            raise NativeError(rc, "frame")
        self.live = True

    def __dealloc__(self):
        if self.live:
            self.s.release(&self.f)
            self.live = False

    def release(self):
        if not self.live:
            raise RuntimeError("frame released twice")
        self.s.release(&self.f)
        self.live = False

    @property
    def released(self):
        return not self.live

    cdef _check(self):
        if not self.live:
            raise RuntimeError("frame already released")

    @property
    def kind(self):
        return self.s.kind

    @property
    def base(self):
        return <uintptr_t>self.f.base

    @property
    def initial_sp(self):
        return <uintptr_t>self.f.initial_sp

    @property
    def size(self):
        return self.f.size

    @property
    def guard_size(self):
        return self.f.region.guard_size if self.f.region != NULL else 0

    @property
    def allowed_size(self):
        if self.f.region != NULL:
            return self.f.region.allowed_size
        return self.f.size

    @property
    def total_size(self):
        if self.f.region != NULL:
            return self.f.region.total_size
        return self.f.size

    @property
    def region_id(self):
        return self.f.region.id if self.f.region != NULL else None

    def committed_bytes(self):
        self._check()
        return self.s.committed(&self.f)

    def resident_bytes(self):
        self._check()
        if self.f.region == NULL:
            return self.f.size
        return eff_resident_bytes(self.f.region.base + self.f.region.guard_size, self.f.region.allowed_size)

    cdef bint _in_bounds(self, uintptr_t addr, size_t n):
        cdef eff_segment_t *s
        cdef uintptr_t lo
        if self.s.kind == EFF_SEGMENTED:
            s = self.f.seg.head
            while s != NULL:
                lo = <uintptr_t>s
                if lo <= addr and addr + n <= lo + sizeof(eff_segment_t) + s.size:
                    return True
                s = s.next
            return False
        lo = <uintptr_t>self.f.base
        return lo <= addr and addr + n <= lo + self.total_size

    def write(self, uintptr_t addr, bytes data):
        """Copy data to addr; on overcommit-user frames this faults pages in.

        A write into a guard page ends the process with the overflow diagnostic.
        """
        self._check()
        if not self._in_bounds(addr, len(data)):
            raise ValueError("write outside the frame")
        if self.f.region != NULL:
            eff_ensure_altstack()
        memcpy(<void *>addr, <const char *>data, len(data))

    def read(self, uintptr_t addr, size_t n):
        self._check()
        if not self._in_bounds(addr, n):
            raise ValueError("read outside the frame")
        return (<const char *>addr)[:n]

    def count_fill(self, int byte):
        """Number of leading bytes (from the low end) still equal to byte."""
        self._check()
        cdef const unsigned char *p
        cdef size_t i = 0, n
        if self.s.kind == EFF_SEGMENTED:
            p = <const unsigned char *>(self.f.seg.head + 1)
            n = self.f.seg.head.size
        elif self.f.region != NULL:
            return 0
        else:
            p = <const unsigned char *>self.f.base
            n = self.f.size
        while i < n and p[i] == byte:
            i += 1
        return i

    # segmented primitives -------------------------------------------------

    cdef _need_seg(self):
        self._check()
        if self.s.kind != EFF_SEGMENTED:
            raise TypeError("not a segmented frame")

    @property
    def min_segment_size(self):
        self._need_seg()
        return self.f.seg.min_segment_size

    @min_segment_size.setter
    def min_segment_size(self, size_t v):
        self._need_seg()
        self.f.seg.min_segment_size = v

    @property
    def allocations(self):
        self._need_seg()
        return self.f.seg.allocations

    @property
    def current_segment(self):
        self._need_seg()
        return <uintptr_t>self.f.seg.current

    def segment_low(self):
        """Lowest usable address of the current segment."""
        self._need_seg()
        return <uintptr_t>(self.f.seg.current + 1)

    def grow(self, size_t frame_size, uintptr_t old_stack=0, size_t param_size=0):
        """Allocate (or reuse) the next segment; returns (new_sp, usable)."""
        self._need_seg()
        if param_size and not old_stack:
            raise ValueError("param_size needs old_stack")
        cdef size_t fs = frame_size
        cdef char *sp = eff_seg_allocate_growth_frame(&self.f.seg, &fs, <const void *>old_stack, param_size)
        return <uintptr_t>sp, fs

    def shrink(self):
        self._need_seg()
        if self.f.seg.current == NULL or self.f.seg.current.prev == NULL:
            raise RuntimeError("segment release at chain head")
        return <uintptr_t>eff_seg_release_growth_frame(&self.f.seg)

    def chain(self):
        """Segments from head to tail as (address, size, canary, is_current)."""
        self._need_seg()
        out = []
        cdef eff_segment_t *s = self.f.seg.head
        while s != NULL:
            out.append((<uintptr_t>s, s.size, s.canary, s == self.f.seg.current))
            s = s.next
        return out

    def chain_backward(self):
        self._need_seg()
        cdef eff_segment_t *s = self.f.seg.head
        if s == NULL:
            return []
        while s.next != NULL:
            s = s.next
        out = []
        while s != NULL:
            out.append(<uintptr_t>s)
            s = s.prev
        return out

    def check_chain(self):
        self._need_seg()
        cdef size_t n = 0
        return eff_seg_check_chain(&self.f.seg, &n) == EFF_OK, n


def init_segment(size_t frame_size):
    """Allocate a lone segment and report its header fields, then free it."""
    cdef eff_segment_t *s = eff_seg_init_segment(frame_size)
    if s == NULL:
        raise MemoryError()
    cdef const unsigned char *body = <const unsigned char *>(s + 1)
    cdef size_t i
    cdef bint filled = True
    if eff_debug:
        for i in range(frame_size):
            if body[i] != 0x13:
                filled = False
                break
    res = {"prev": <uintptr_t>s.prev, "next": <uintptr_t>s.next, "size": s.size,
           "canary": s.canary, "filled": filled}
    free(s)
    return res


def fault_decide(int kind, uintptr_t base, size_t total, size_t allowed, size_t guard, size_t committed,
                 uintptr_t addr):
    cdef eff_region_t r
    memset(&r, 0, sizeof(r))
    r.base = <char *>base
    r.total_size = total
    r.allowed_size = allowed
    r.guard_size = guard
    r.committed_size = committed
    r.kind = kind
    cdef uintptr_t start = 0
    cdef size_t n = 0
    cdef int action = eff_fault_decide(&r, addr, &start, &n)
    return action, start, n


def registry_lookup(uintptr_t addr):
    cdef eff_region_t *r = eff_registry_lookup(addr)
    return None if r == NULL else r.id


def registry_count():
    return eff_registry_count()


def handler_installed():
    return bool(eff_handler_installed())


def altstack_ready():
    return bool(eff_altstack_ready())


def now_ns():
    return eff_now_ns()


# kernels ------------------------------------------------------------------

def _sample(eff_sample_t s, what):
    if s.error:
        raise NativeError(s.error, what)
    return s.duration_ns, s.output, s.aux


def kernel_switch(str strategy, size_t frame_size):
    cdef const eff_strategy_t *s = _strategy(strategy)
    return _sample(eff_kernel_switch(s, frame_size), "switch")


def kernel_complex(str strategy, size_t frame_size, int64_t iterations):
    cdef const eff_strategy_t *s = _strategy(strategy)
    return _sample(eff_kernel_complex(s, frame_size, iterations), "complex")


def kernel_expand(str strategy, size_t frame_size, int depth):
    cdef const eff_strategy_t *s = _strategy(strategy)
    return _sample(eff_kernel_expand(s, frame_size, depth), "expand")


def kernel_mt(str strategy, size_t frame_size, int threads, int64_t iterations, int runs_per_thread=1000):
    cdef const eff_strategy_t *s = _strategy(strategy)
    cdef eff_sample_t r
    with nogil:
        r = eff_kernel_mt(s, frame_size, threads, iterations, runs_per_thread)
    return _sample(r, "mt")


def run_async(str strategy, size_t frame_size, int64_t iterations, int thread_id):
    cdef const eff_strategy_t *s = _strategy(strategy)
    cdef int err = EFF_OK
    cdef int64_t v = eff_run_async(s, frame_size, iterations, thread_id, &err)
    if err != EFF_OK:
        raise NativeError(err, "run_async")
    return v


def kernel_ad(str strategy, size_t frame_size, size_t iters, double x0=0.5):
    cdef const eff_strategy_t *s = _strategy(strategy)
    cdef eff_ad_result_t r = eff_kernel_ad(s, frame_size, iters, x0)
    if r.error:
        raise NativeError(r.error, "ad")
    return {"value": r.value, "derivative": r.derivative, "forward_effects": r.forward_effects,
            "reverse_effects": r.reverse_effects, "max_handle_depth": r.max_handle_depth,
            "duration_ns": r.duration_ns}


def demo_read_file(str strategy, size_t frame_size, bytes reply):
    cdef const eff_strategy_t *s = _strategy(strategy)
    cdef char seen[256]
    cdef char got[4096]
    seen[0] = 0
    got[0] = 0
    cdef int rc = eff_demo_read_file(s, frame_size, reply, seen, sizeof(seen), got, sizeof(got))
    if rc != EFF_OK:
        raise NativeError(rc, "read_file")
    return <bytes>seen, <bytes>got


# probes -------------------------------------------------------------------

def probe_salt(uint64_t roundtrips):
    cdef eff_salt_report_t r
    with nogil:
        r = eff_harness_salt(roundtrips)
    return {"host_mismatch": r.host_mismatch, "coro_mismatch": r.coro_mismatch,
            "sp_changes": r.sp_changes, "roundtrips": r.roundtrips, "sp": <uintptr_t>r.first_sp}


def probe_bootstrap(uint64_t arg):
    cdef uint64_t seen = 0
    cdef uintptr_t local = 0, base = 0, top = 0
    rc = eff_harness_bootstrap(arg, &seen, &local, &base, &top)
    return rc, seen, local, base, top


def probe_bootstrap_misaligned():
    return eff_harness_bootstrap_misaligned()


def probe_double_switch():
    return eff_harness_double_switch()


def probe_pingpong(uint64_t first, uint64_t second):
    cdef uint64_t a = 0, b = 0
    eff_harness_pingpong(first, second, &a, &b)
    return a, b


def probe_hot_split(str strategy, size_t iterations, size_t crossing_need):
    cdef const eff_strategy_t *s = _strategy(strategy)
    cdef size_t allocs = 0, chain = 0
    cdef int rc
    with nogil:
        rc = eff_harness_hot_split(s, iterations, crossing_need, &allocs, &chain)
    if rc != EFF_OK:
        raise NativeError(rc, "hot split")
    return allocs, chain


def probe_locate(masks, int effect):
    cdef int depth = len(masks)
    if depth < 1 or depth > 8:
        raise ValueError("nest depth must be in 1..8")
    cdef eff_set_t m[8]
    for i in range(depth):
        m[i] = masks[i]
    cdef int found = -2
    rc = eff_harness_locate(m, depth, effect, &found)
    if rc != EFF_OK:
        raise NativeError(rc, "locate")
    return None if found < 0 else found


def probe_overflow(str strategy, size_t frame_size, bint place_canary=True):
    """Never returns: the process ends in the overflow diagnostic."""
    cdef const eff_strategy_t *s = _strategy(strategy)
    eff_harness_overflow(s, frame_size, place_canary)


def probe_unhandled(int effect):
    eff_harness_unhandled(effect)
