/* Stack strategies, the overcommit region registry and the SIGSEGV handler. */
#define _GNU_SOURCE
#include "effstack.h"

#include <errno.h>
#include <pthread.h>
#include <sched.h>
#include <stdlib.h>
#include <string.h>
#include <sys/mman.h>
#include <unistd.h>

int eff_debug = 1;
static size_t g_page = 4096;

size_t eff_page_size(void) { return g_page; }

static size_t round_up_page(size_t n) { return (n + g_page - 1) & ~(g_page - 1); }

static pthread_once_t g_init_once = PTHREAD_ONCE_INIT;

static void core_init_once(void)
{
    long p = sysconf(_SC_PAGESIZE);
    if (p > 0)
        g_page = (size_t)p;
    const char *d = getenv("EFFSTACK_DEBUG");
    if (d && (d[0] == '0' || d[0] == 'n' || d[0] == 'N' || d[0] == 'f' || d[0] == 'F'))
        eff_debug = 0;
}

void eff_core_init(void) { pthread_once(&g_init_once, core_init_once); }

/* ------------------------------------------------ async-signal-safe output */

static void put_str(int fd, const char *s)
{
    size_t n = strlen(s);
    while (n) {
        ssize_t w = write(fd, s, n);
        if (w <= 0) {
            if (w < 0 && errno == EINTR)
                continue;
            return;
        }
        s += w;
        n -= (size_t)w;
    }
}

static void put_hex(int fd, uint64_t v)
{
    char buf[19];
    buf[0] = '0';
    buf[1] = 'x';
    for (int i = 0; i < 16; i++)
        buf[2 + i] = "0123456789abcdef"[(v >> (60 - 4 * i)) & 0xF];
    buf[18] = 0;
    put_str(fd, buf);
}

static void put_dec(int fd, uint64_t v)
{
    char buf[21];
    int i = 20;
    buf[i] = 0;
    do {
        buf[--i] = (char)('0' + v % 10);
        v /= 10;
    } while (v && i > 0);
    put_str(fd, buf + i);
}

static eff_fatal_hook_t g_fatal_hook;

void eff_set_fatal_hook(eff_fatal_hook_t hook) { g_fatal_hook = hook; }

void eff_fatal(const char *msg)
{
    put_str(2, "effstack: fatal: ");
    put_str(2, msg);
    put_str(2, "\n");
    eff_registry_dump(2);
    if (g_fatal_hook)
        g_fatal_hook();
    abort();
}

/* ---------------------------------------------------------------- fixed */

static int fixed_init(eff_frame_t *f, size_t size)
{
    memset(f, 0, sizeof(*f));
    char *p = malloc(size);
    if (!p)
        return EFF_ERR_NOMEM;
    if (eff_debug)
        memset(p, EFF_DEBUG_FILL, size);
    f->base = p;
    f->size = size;
    f->initial_sp = (char *)(((uintptr_t)p + size) & ~(uintptr_t)0xF);
    return EFF_OK;
}

static void fixed_release(eff_frame_t *f)
{
    free(f->base);
    f->base = NULL;
}

static size_t fixed_committed(const eff_frame_t *f) { return f->base ? f->size : 0; }

/* ------------------------------------------------------------ segmented */

eff_segment_t *eff_seg_init_segment(size_t frame_size)
{
    size_t overhead = sizeof(eff_segment_t);
    eff_segment_t *s = malloc(frame_size + overhead);
    if (!s)
        return NULL;
    if (eff_debug)
        memset(s, EFF_DEBUG_FILL, frame_size + overhead);
    s->prev = NULL;
    s->next = NULL;
    s->size = frame_size;
    s->canary = EFF_SEG_CANARY;
    return s;
}

#define LINK(first, second)                                                                        \
    do {                                                                                           \
        (first)->next = (second);                                                                  \
        (second)->prev = (first);                                                                  \
    } while (0)

char *eff_seg_allocate_growth_frame(eff_seg_state_t *st, size_t *pframe_size, const void *old_stack,
                                    size_t param_size)
{
    size_t frame_size = *pframe_size;
    eff_segment_t *current = st->current;
    if (!current)
        eff_fatal("segmented growth without a current segment");
    size_t need = frame_size + param_size;
    size_t new_size = need < st->min_segment_size ? st->min_segment_size : need;
    eff_segment_t *seg;
    if (current->next == NULL) {
        seg = eff_seg_init_segment(new_size);
        if (!seg)
            eff_fatal("segment allocation failed");
        st->allocations++;
        LINK(current, seg);
    } else if (current->next->size < need) {
        seg = eff_seg_init_segment(new_size);
        if (!seg)
            eff_fatal("segment allocation failed");
        st->allocations++;
        LINK(seg, current->next);
        LINK(current, seg);
    } else {
        seg = current->next;
    }
    st->current = seg;
    *pframe_size = seg->size - param_size;
    char *new_stack = (char *)(seg + 1) + seg->size - param_size;
    new_stack = (char *)((uintptr_t)new_stack & ~(uintptr_t)0xF);
    if (param_size)
        memcpy(new_stack, old_stack, param_size);
    return new_stack;
}

char *eff_seg_release_growth_frame(eff_seg_state_t *st)
{
    eff_segment_t *current = st->current;
    if (!current || !current->prev)
        eff_fatal("segment release at chain head");
    if (eff_debug && current->canary != EFF_SEG_CANARY)
        eff_fatal("segment canary corrupted");
    st->current = current->prev;
    return (char *)current->prev + sizeof(eff_segment_t);
}

int eff_seg_check_chain(const eff_seg_state_t *st, size_t *count)
{
    size_t fwd = 0, back = 0;
    const eff_segment_t *tail = NULL;
    int current_seen = 0;
    if (!st->head)
        return EFF_ERR_CHAIN;
    if (st->head->prev)
        return EFF_ERR_CHAIN;
    for (const eff_segment_t *s = st->head; s; s = s->next) {
        if (s->canary != EFF_SEG_CANARY)
            return EFF_ERR_CHAIN;
        if (s->next && s->next->prev != s)
            return EFF_ERR_CHAIN;
        if (s == st->current)
            current_seen = 1;
        tail = s;
        if (++fwd > (1u << 24))
            return EFF_ERR_CHAIN;
    }
    for (const eff_segment_t *s = tail; s; s = s->prev)
        back++;
    if (count)
        *count = fwd;
    return (fwd == back && current_seen) ? EFF_OK : EFF_ERR_CHAIN;
}

void eff_seg_free_chain(eff_seg_state_t *st)
{
    eff_segment_t *s = st->head;
    while (s) {
        eff_segment_t *next = s->next;
        if (eff_debug && s->canary != EFF_SEG_CANARY)
            eff_fatal("segment canary corrupted");
        free(s);
        s = next;
    }
    st->head = st->current = NULL;
}

static int seg_init(eff_frame_t *f, size_t size)
{
    memset(f, 0, sizeof(*f));
    eff_segment_t *s = eff_seg_init_segment(size);
    if (!s)
        return EFF_ERR_NOMEM;
    f->seg.head = f->seg.current = s;
    f->seg.min_segment_size = EFF_SEG_DEFAULT_MIN_SEGMENT;
    f->base = s;
    f->size = size;
    f->initial_sp = (char *)(((uintptr_t)(s + 1) + size) & ~(uintptr_t)0xF);
    return EFF_OK;
}

static void seg_release(eff_frame_t *f)
{
    eff_seg_free_chain(&f->seg);
    f->base = NULL;
}

static size_t seg_committed(const eff_frame_t *f)
{
    size_t total = 0;
    for (const eff_segment_t *s = f->seg.head; s; s = s->next)
        total += s->size + sizeof(eff_segment_t);
    return total;
}

/* ------------------------------------------------------ region registry */

typedef struct region_table {
    size_t n;
    eff_region_t *r[];
} region_table_t;

static _Atomic(region_table_t *) g_table;
static atomic_int g_readers;
static pthread_mutex_t g_reg_lock = PTHREAD_MUTEX_INITIALIZER;
static atomic_uint_fast64_t g_region_ids;
static struct sigaction g_old_segv;
static int g_installed;

static void segv_handler(int sig, siginfo_t *si, void *uc);

static region_table_t *table_alloc(size_t n)
{
    region_table_t *t = malloc(sizeof(*t) + n * sizeof(eff_region_t *));
    if (t)
        t->n = n;
    return t;
}

static void wait_readers(void)
{
    while (atomic_load(&g_readers) != 0)
        sched_yield();
}

static eff_region_t *lookup_in(const region_table_t *t, uintptr_t addr)
{
    if (!t)
        return NULL;
    size_t lo = 0, hi = t->n;
    while (lo < hi) {
        size_t mid = (lo + hi) / 2;
        eff_region_t *r = t->r[mid];
        uintptr_t b = (uintptr_t)r->base;
        if (addr < b)
            hi = mid;
        else if (addr >= b + r->total_size)
            lo = mid + 1;
        else
            return r;
    }
    return NULL;
}

eff_region_t *eff_registry_lookup(uintptr_t addr)
{
    atomic_fetch_add(&g_readers, 1);
    eff_region_t *r = lookup_in(atomic_load(&g_table), addr);
    atomic_fetch_sub(&g_readers, 1);
    return r;
}

size_t eff_registry_count(void)
{
    atomic_fetch_add(&g_readers, 1);
    region_table_t *t = atomic_load(&g_table);
    size_t n = t ? t->n : 0;
    atomic_fetch_sub(&g_readers, 1);
    return n;
}

int eff_handler_installed(void)
{
    pthread_mutex_lock(&g_reg_lock);
    int v = g_installed;
    pthread_mutex_unlock(&g_reg_lock);
    return v;
}

static int registry_add(eff_region_t *r)
{
    int err = EFF_OK;
    pthread_mutex_lock(&g_reg_lock);
    region_table_t *old = atomic_load(&g_table);
    size_t n = old ? old->n : 0;
    region_table_t *t = table_alloc(n + 1);
    if (!t) {
        err = EFF_ERR_NOMEM;
        goto out;
    }
    size_t j = 0;
    int placed = 0;
    for (size_t i = 0; i < n; i++) {
        if (!placed && old->r[i]->base > r->base) {
            t->r[j++] = r;
            placed = 1;
        }
        t->r[j++] = old->r[i];
    }
    if (!placed)
        t->r[j++] = r;
    if (!g_installed) {
        struct sigaction sa;
        memset(&sa, 0, sizeof(sa));
        sa.sa_sigaction = segv_handler;
        sa.sa_flags = SA_SIGINFO | SA_ONSTACK | SA_RESTART;
        sigemptyset(&sa.sa_mask);
        if (sigaction(SIGSEGV, &sa, &g_old_segv) != 0) {
            free(t);
            err = EFF_ERR_OS;
            goto out;
        }
        g_installed = 1;
    }
    atomic_store(&g_table, t);
    wait_readers();
    free(old);
out:
    pthread_mutex_unlock(&g_reg_lock);
    return err;
}

static void altstack_release_own(void);

static void registry_remove(eff_region_t *r)
{
    pthread_mutex_lock(&g_reg_lock);
    region_table_t *old = atomic_load(&g_table);
    size_t n = old ? old->n : 0;
    region_table_t *t = NULL;
    if (n > 1) {
        t = table_alloc(n - 1);
        if (!t)
            eff_fatal("registry allocation failed");
        size_t j = 0;
        for (size_t i = 0; i < n; i++)
            if (old->r[i] != r)
                t->r[j++] = old->r[i];
        t->n = j;
    }
    atomic_store(&g_table, t);
    wait_readers();
    free(old);
    int last = t == NULL;
    if (last && g_installed) {
        struct sigaction cur;
        if (sigaction(SIGSEGV, NULL, &cur) == 0 && (cur.sa_flags & SA_SIGINFO) &&
            cur.sa_sigaction == segv_handler)
            sigaction(SIGSEGV, &g_old_segv, NULL);
        g_installed = 0;
    }
    pthread_mutex_unlock(&g_reg_lock);
    if (last)
        altstack_release_own();
}

void eff_registry_dump(int fd)
{
    atomic_fetch_add(&g_readers, 1);
    region_table_t *t = atomic_load(&g_table);
    put_str(fd, "effstack: region registry (");
    put_dec(fd, t ? t->n : 0);
    put_str(fd, " live)\n");
    for (size_t i = 0; t && i < t->n; i++) {
        eff_region_t *r = t->r[i];
        put_str(fd, "  region id=");
        put_dec(fd, r->id);
        put_str(fd, r->kind == EFF_OVERCOMMIT_USER ? " kind=overcommit-user" : " kind=overcommit-kernel");
        put_str(fd, " base=");
        put_hex(fd, (uintptr_t)r->base);
        put_str(fd, " total=");
        put_dec(fd, r->total_size);
        put_str(fd, " allowed=");
        put_dec(fd, r->allowed_size);
        put_str(fd, " committed=");
        put_dec(fd, atomic_load(&r->committed_size));
        put_str(fd, "\n");
    }
    atomic_fetch_sub(&g_readers, 1);
}

/* ------------------------------------------------------ alternate stack */

#define EFF_ALTSTACK_SIZE (64 * 1024)

static EFF_TLS int g_alt_ready;
static EFF_TLS void *g_alt_mem;
static pthread_key_t g_alt_key;
static pthread_once_t g_alt_key_once = PTHREAD_ONCE_INIT;

static void altstack_destroy(void *mem)
{
    stack_t cur;
    if (sigaltstack(NULL, &cur) == 0 && cur.ss_sp == mem && !(cur.ss_flags & SS_ONSTACK)) {
        stack_t off;
        memset(&off, 0, sizeof(off));
        off.ss_flags = SS_DISABLE;
        sigaltstack(&off, NULL);
    }
    munmap(mem, EFF_ALTSTACK_SIZE);
}

static void alt_key_dtor(void *mem)
{
    if (mem)
        altstack_destroy(mem);
}

static void alt_key_init(void) { pthread_key_create(&g_alt_key, alt_key_dtor); }

int eff_altstack_ready(void) { return g_alt_ready; }

int eff_ensure_altstack(void)
{
    if (g_alt_ready)
        return EFF_OK;
    stack_t cur;
    if (sigaltstack(NULL, &cur) != 0)
        return EFF_ERR_OS;
    if (!(cur.ss_flags & SS_DISABLE)) {
        /* Someone else (faulthandler, for instance) already set one up. */
        g_alt_ready = 1;
        return EFF_OK;
    }
    void *mem = mmap(NULL, EFF_ALTSTACK_SIZE, PROT_READ | PROT_WRITE, MAP_PRIVATE | MAP_ANONYMOUS, -1, 0);
    if (mem == MAP_FAILED)
        return EFF_ERR_OS;
    stack_t ss;
    memset(&ss, 0, sizeof(ss));
    ss.ss_sp = mem;
    ss.ss_size = EFF_ALTSTACK_SIZE;
    if (sigaltstack(&ss, NULL) != 0) {
        munmap(mem, EFF_ALTSTACK_SIZE);
        return EFF_ERR_OS;
    }
    pthread_once(&g_alt_key_once, alt_key_init);
    pthread_setspecific(g_alt_key, mem);
    g_alt_mem = mem;
    g_alt_ready = 1;
    return EFF_OK;
}

static void altstack_release_own(void)
{
    if (g_alt_mem) {
        pthread_setspecific(g_alt_key, NULL);
        altstack_destroy(g_alt_mem);
        g_alt_mem = NULL;
    }
    g_alt_ready = 0;
}

/* ------------------------------------------------------ overcommit frames */

static int region_frame_init(eff_frame_t *f, size_t size, int kind)
{
    memset(f, 0, sizeof(*f));
    size_t allowed = round_up_page(size);
    size_t guard = g_page;
    size_t total = allowed + guard;
    int prot = kind == EFF_OVERCOMMIT_KERNEL ? PROT_READ | PROT_WRITE : PROT_NONE;
    char *base = mmap(NULL, total, prot, MAP_PRIVATE | MAP_ANONYMOUS | MAP_NORESERVE, -1, 0);
    if (base == MAP_FAILED)
        return EFF_ERR_OS;
    if (kind == EFF_OVERCOMMIT_KERNEL && mprotect(base, guard, PROT_NONE) != 0) {
        munmap(base, total);
        return EFF_ERR_OS;
    }
    eff_region_t *r = calloc(1, sizeof(*r));
    if (!r) {
        munmap(base, total);
        return EFF_ERR_NOMEM;
    }
    r->base = base;
    r->total_size = total;
    r->allowed_size = allowed;
    r->guard_size = guard;
    atomic_store(&r->committed_size, 0);
    r->kind = kind;
    r->id = atomic_fetch_add(&g_region_ids, 1) + 1;
    int err = eff_ensure_altstack();
    if (err == EFF_OK)
        err = registry_add(r);
    if (err != EFF_OK) {
        munmap(base, total);
        free(r);
        return err;
    }
    f->base = base;
    f->size = size;
    f->region = r;
    f->initial_sp = (char *)(((uintptr_t)base + total) & ~(uintptr_t)0xF);
    return EFF_OK;
}

static void region_frame_release(eff_frame_t *f)
{
    eff_region_t *r = f->region;
    if (!r)
        return;
    registry_remove(r);
    munmap(r->base, r->total_size);
    free(r);
    f->region = NULL;
    f->base = NULL;
}

static int kernel_init(eff_frame_t *f, size_t size) { return region_frame_init(f, size, EFF_OVERCOMMIT_KERNEL); }
static int user_init(eff_frame_t *f, size_t size) { return region_frame_init(f, size, EFF_OVERCOMMIT_USER); }

size_t eff_resident_bytes(const void *addr, size_t len)
{
    size_t pages = (len + g_page - 1) / g_page;
    unsigned char small[256];
    unsigned char *vec = pages <= sizeof(small) ? small : malloc(pages);
    if (!vec)
        return 0;
    size_t n = 0;
    if (mincore((void *)addr, len, vec) == 0)
        for (size_t i = 0; i < pages; i++)
            n += vec[i] & 1;
    if (vec != small)
        free(vec);
    return n * g_page;
}

static size_t kernel_committed(const eff_frame_t *f)
{
    const eff_region_t *r = f->region;
    if (!r)
        return 0;
    return eff_resident_bytes(r->base + r->guard_size, r->allowed_size);
}

static size_t user_committed(const eff_frame_t *f)
{
    return f->region ? atomic_load(&f->region->committed_size) : 0;
}

/* ---------------------------------------------------------- fault path */

eff_fault_action_t eff_fault_decide(const eff_region_t *r, uintptr_t addr, uintptr_t *commit_start,
                                    size_t *commit_len)
{
    uintptr_t base = (uintptr_t)r->base;
    uintptr_t allowed_start = base + r->guard_size;
    uintptr_t top = base + r->total_size;
    if (addr < base || addr >= top)
        return EFF_FAULT_FOREIGN;
    if (addr < allowed_start)
        return EFF_FAULT_OVERFLOW;
    if (r->kind != EFF_OVERCOMMIT_USER)
        return EFF_FAULT_FOREIGN;
    size_t committed = atomic_load(&r->committed_size);
    uintptr_t frontier = top - committed;
    if (addr >= frontier)
        return EFF_FAULT_ALREADY_COMMITTED;
    size_t commit = committed == 0 ? g_page : committed;
    if (committed + commit > r->allowed_size)
        commit = r->allowed_size - committed;
    if (commit == 0)
        return EFF_FAULT_OVERFLOW;
    *commit_start = frontier - commit;
    *commit_len = commit;
    return EFF_FAULT_COMMIT;
}

static void segv_handler(int sig, siginfo_t *si, void *uc)
{
    int saved_errno = errno;
    uintptr_t addr = (uintptr_t)si->si_addr;
    atomic_fetch_add(&g_readers, 1);
    eff_region_t *r = lookup_in(atomic_load(&g_table), addr);
    if (r) {
        uintptr_t start = 0;
        size_t len = 0;
        switch (eff_fault_decide(r, addr, &start, &len)) {
        case EFF_FAULT_COMMIT:
            if (mprotect((void *)start, len, PROT_READ | PROT_WRITE) != 0) {
                atomic_fetch_sub(&g_readers, 1);
                eff_fatal("mprotect in segv handler failed");
            }
            atomic_fetch_add(&r->committed_size, len);
            atomic_fetch_sub(&g_readers, 1);
            errno = saved_errno;
            return;
        case EFF_FAULT_ALREADY_COMMITTED:
            atomic_fetch_sub(&g_readers, 1);
            eff_fatal("fault in already committed region");
        case EFF_FAULT_OVERFLOW:
            atomic_fetch_sub(&g_readers, 1);
            put_str(2, "effstack: stack overflow: fault at ");
            put_hex(2, addr);
            put_str(2, " hit the guard page\n");
            eff_fatal("stack overflow");
        case EFF_FAULT_FOREIGN:
            break;
        }
    }
    atomic_fetch_sub(&g_readers, 1);
    struct sigaction old = g_old_segv;
    if ((old.sa_flags & SA_SIGINFO) && old.sa_sigaction) {
        put_str(2, "effstack: delegating fault to old handler\n");
        old.sa_sigaction(sig, si, uc);
    } else if (!(old.sa_flags & SA_SIGINFO) && old.sa_handler != SIG_DFL && old.sa_handler != SIG_IGN) {
        put_str(2, "effstack: delegating fault to old handler\n");
        old.sa_handler(sig);
    } else {
        put_str(2, "effstack: no old handler, resetting signal and raising\n");
        signal(sig, SIG_DFL);
        raise(sig);
    }
    errno = saved_errno;
}

/* ----------------------------------------------------------- strategies */

const eff_strategy_t eff_strategies[EFF_NUM_STRATEGIES] = {
    {"fixed", EFF_FIXED, EFF_FIXED_DEFAULT_FRAME, fixed_init, fixed_release, fixed_committed},
    {"segmented", EFF_SEGMENTED, EFF_SEG_DEFAULT_FRAME, seg_init, seg_release, seg_committed},
    {"overcommit-kernel", EFF_OVERCOMMIT_KERNEL, EFF_FIXED_DEFAULT_FRAME, kernel_init, region_frame_release,
     kernel_committed},
    {"overcommit-user", EFF_OVERCOMMIT_USER, EFF_FIXED_DEFAULT_FRAME, user_init, region_frame_release,
     user_committed},
};

const eff_strategy_t *eff_strategy_by_name(const char *name)
{
    for (int i = 0; i < EFF_NUM_STRATEGIES; i++)
        if (strcmp(eff_strategies[i].name, name) == 0)
            return &eff_strategies[i];
    return NULL;
}
