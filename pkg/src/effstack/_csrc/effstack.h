/*
 * Internal interface of the native effstack core: context switching,
 * coroutines and effect dispatch, stack strategies, benchmark kernels.
 *
 * x86-64 System V only.
 */
#ifndef EFFSTACK_H
#define EFFSTACK_H

#include <signal.h>
#include <stdatomic.h>
#include <stddef.h>
#include <stdint.h>

#if !defined(__x86_64__)
#error "effstack native core supports x86-64 only"
#endif

#define EFF_TLS __thread __attribute__((tls_model("initial-exec")))
#define EFF_LIKELY(x) __builtin_expect(!!(x), 1)
#define EFF_UNLIKELY(x) __builtin_expect(!!(x), 0)

enum {
    EFF_OK = 0,
    EFF_ERR_STATE = -1,  /* illegal coroutine state transition */
    EFF_ERR_SIZE = -2,   /* frame too small for bootstrap */
    EFF_ERR_NOMEM = -3,
    EFF_ERR_OS = -4,     /* mmap / mprotect / sigaction / sigaltstack */
    EFF_ERR_ALIGN = -5,
    EFF_ERR_CHAIN = -6,  /* target not on the ancestor chain */
    EFF_ERR_STALE = -7,  /* switch to a context that is not live */
};

/* ------------------------------------------------------------------ ctx */

/* Field offsets are hard-coded in ctx_x86_64.c. */
typedef struct eff_ctx {
    void *rip;        /* 0  */
    void *rsp;        /* 8  */
    void *rbp;        /* 16 */
    uint64_t rbx;     /* 24 */
    uint64_t r12;     /* 32 */
    uint64_t r13;     /* 40 */
    uint64_t r14;     /* 48 */
    uint64_t r15;     /* 56 */
    uint32_t mxcsr;   /* 64 */
    uint16_t fpucw;   /* 68 */
    uint16_t live;    /* 70: set when saved, cleared when restored */
} eff_ctx_t;

#define EFF_CTX_CALLEE_SAVED 5

uint64_t effstack_ctx_switch(eff_ctx_t *save, eff_ctx_t *restore, uint64_t payload);
__attribute__((noreturn)) void effstack_ctx_jump(eff_ctx_t *restore, uint64_t payload);
void *effstack_call_on_stack(void *(*fn)(void *), void *arg, void *sp);
uint64_t effstack_salt_probe(eff_ctx_t *save, eff_ctx_t *restore, uint64_t salt);
void *effstack_current_sp(void);

int eff_ctx_bootstrap(eff_ctx_t *ctx, void *(*entry)(void *), void *arg, void *initial_sp);
/* Checked switch: returns EFF_ERR_STALE instead of jumping into a dead context. */
int eff_ctx_switch_checked(eff_ctx_t *save, eff_ctx_t *restore, uint64_t payload, uint64_t *out);

/* Called by the bootstrap trampoline when an entry function returns. */
__attribute__((noreturn)) void effstack_ctx_entry_returned(uint64_t value);

/* -------------------------------------------------------------- effects */

typedef uint64_t eff_id_t;
typedef uint64_t eff_set_t;

#define EFF_ID_MAX 63
#define EFF_RETURN ((eff_id_t)64)
#define EFF_YIELD ((eff_id_t)65)
#define EFF_HANDLES(id) ((eff_set_t)1 << (id))
#define EFF_ALL (~(eff_set_t)0)

typedef struct eff_request {
    eff_id_t effect;
    uint64_t payload;
} eff_request_t;

_Static_assert(sizeof(eff_request_t) == 2 * sizeof(void *), "request is two machine words");

typedef enum { EFF_SUSPENDED = 0, EFF_RUNNING = 1, EFF_FINISHED = 2 } eff_state_t;

/* --------------------------------------------------------------- stacks */

enum { EFF_FIXED = 0, EFF_SEGMENTED = 1, EFF_OVERCOMMIT_KERNEL = 2, EFF_OVERCOMMIT_USER = 3 };
#define EFF_NUM_STRATEGIES 4

#define EFF_MIN_FRAME_SIZE 1024
#define EFF_FIXED_DEFAULT_FRAME (150 * 1024)
#define EFF_SEG_DEFAULT_FRAME 1024
#define EFF_SEG_DEFAULT_MIN_SEGMENT 0
#define EFF_SEG_SYSCALL_SEGMENT (8 * 1024)
/* slack every growth check keeps for the check itself and the call into fn */
#define EFF_SEG_MARGIN 256
#define EFF_SEG_CANARY ((uint64_t)0x9999999999999999ULL)
#define EFF_DEBUG_FILL 0x13

typedef struct eff_segment {
    struct eff_segment *prev;
    struct eff_segment *next;
    size_t size;
    uint64_t canary;
} eff_segment_t;

_Static_assert(sizeof(eff_segment_t) % 16 == 0, "segment header keeps 16-byte alignment");

typedef struct eff_seg_state {
    eff_segment_t *head;
    eff_segment_t *current;
    size_t min_segment_size;
    size_t allocations;   /* growth segments allocated (head excluded) */
} eff_seg_state_t;

typedef struct eff_region {
    char *base;
    size_t total_size;
    size_t allowed_size;
    size_t guard_size;
    _Atomic size_t committed_size;   /* user strategy: frontier distance from top */
    int kind;
    uint64_t id;
} eff_region_t;

typedef struct eff_frame {
    void *base;
    char *initial_sp;
    size_t size;
    eff_region_t *region;
    eff_seg_state_t seg;
} eff_frame_t;

typedef struct eff_strategy {
    const char *name;
    int kind;
    size_t default_frame_size;
    int (*init)(eff_frame_t *f, size_t size);
    void (*release)(eff_frame_t *f);
    size_t (*committed)(const eff_frame_t *f);
} eff_strategy_t;

extern const eff_strategy_t eff_strategies[EFF_NUM_STRATEGIES];
const eff_strategy_t *eff_strategy_by_name(const char *name);

extern int eff_debug;
size_t eff_page_size(void);
void eff_core_init(void);

/* segmented primitives */
eff_segment_t *eff_seg_init_segment(size_t frame_size);
char *eff_seg_allocate_growth_frame(eff_seg_state_t *st, size_t *frame_size, const void *old_stack,
                                    size_t param_size);
char *eff_seg_release_growth_frame(eff_seg_state_t *st);
void eff_seg_free_chain(eff_seg_state_t *st);
int eff_seg_check_chain(const eff_seg_state_t *st, size_t *count);

/* overcommit regions, registry and the fault handler */
typedef enum {
    EFF_FAULT_COMMIT = 0,
    EFF_FAULT_ALREADY_COMMITTED = 1,
    EFF_FAULT_OVERFLOW = 2,
    EFF_FAULT_FOREIGN = 3,
} eff_fault_action_t;

eff_fault_action_t eff_fault_decide(const eff_region_t *r, uintptr_t addr, uintptr_t *commit_start,
                                    size_t *commit_len);
eff_region_t *eff_registry_lookup(uintptr_t addr);
size_t eff_registry_count(void);
int eff_handler_installed(void);
int eff_ensure_altstack(void);
int eff_altstack_ready(void);
void eff_registry_dump(int fd);
size_t eff_resident_bytes(const void *addr, size_t len);
typedef void (*eff_fatal_hook_t)(void);
void eff_set_fatal_hook(eff_fatal_hook_t hook);
__attribute__((noreturn)) void eff_fatal(const char *msg);

/* ------------------------------------------------------------ coroutine */

typedef struct eff_coroutine {
    eff_ctx_t resume_point;           /* where execution continues on resume */
    eff_ctx_t return_point;           /* where the resumer waits */
    struct eff_coroutine *parent;
    struct eff_coroutine *leaf;       /* innermost coroutine executing at resume_point */
    struct eff_coroutine *captured;   /* set while suspended inside an ancestor's capture */
    eff_state_t state;
    int needs_altstack;
    eff_set_t handled;
    eff_request_t request;            /* delivered to the resumer */
    const eff_strategy_t *strategy;
    eff_frame_t frame;
    void *(*entry)(void *);
    void *arg;
    void *user;
} eff_coroutine_t;

typedef void (*eff_default_handler_t)(eff_id_t effect, uint64_t payload);

eff_coroutine_t *eff_coroutine_new(void *(*entry)(void *), void *arg, const eff_strategy_t *s,
                                   int *err);
eff_coroutine_t *eff_coroutine_new_sized(void *(*entry)(void *), void *arg, const eff_strategy_t *s,
                                         size_t frame_size, int *err);
int eff_coroutine_delete(eff_coroutine_t *k);
eff_request_t eff_resume(eff_coroutine_t *k, uint64_t reply, eff_set_t handled);
eff_request_t eff_resume_handling_all(eff_coroutine_t *k, uint64_t reply);
uint64_t eff_yield(eff_coroutine_t *target, eff_id_t effect, uint64_t payload);
__attribute__((noreturn)) void eff_exit(eff_coroutine_t *target, uint64_t payload);
eff_coroutine_t *eff_locate_handler(eff_id_t effect);
uint64_t eff_perform(eff_id_t effect, uint64_t payload);
__attribute__((noreturn)) void eff_throw(eff_id_t effect, uint64_t payload);
/* Variants used once the handler is already known (no lookup, no checks). */
uint64_t eff_yield_to(eff_coroutine_t *target, eff_id_t effect, uint64_t payload);
__attribute__((noreturn)) void eff_finish_to(eff_coroutine_t *target, eff_id_t effect, uint64_t payload);
int eff_check_resume(const eff_coroutine_t *k);
int eff_on_chain(const eff_coroutine_t *target);
eff_coroutine_t *eff_current(void);
void eff_set_default_handler(eff_default_handler_t h);
void eff_register_effect_name(eff_id_t id, const char *name);
const char *eff_effect_name(eff_id_t id);
size_t eff_committed_bytes(const eff_coroutine_t *k);

/* Call fn(arg) with at least `need` bytes of stack available (segmented growth check). */
void *eff_stack_call(size_t need, void *(*fn)(void *), void *arg);
/* Call library code: on segmented stacks it runs on a segment of at least 8 KiB. */
void *eff_foreign_call(void *(*fn)(void *), void *arg);

/* ----------------------------------------------------- benchmark kernels */

typedef struct eff_sample {
    int64_t duration_ns;
    int64_t output;
    int64_t aux;
    int error;
} eff_sample_t;

int64_t eff_now_ns(void);
eff_sample_t eff_kernel_switch(const eff_strategy_t *s, size_t frame_size);
eff_sample_t eff_kernel_complex(const eff_strategy_t *s, size_t frame_size, int64_t iterations);
eff_sample_t eff_kernel_expand(const eff_strategy_t *s, size_t frame_size, int max_depth);
eff_sample_t eff_kernel_mt(const eff_strategy_t *s, size_t frame_size, int threads, int64_t iterations,
                           int runs_per_thread);
int64_t eff_run_async(const eff_strategy_t *s, size_t frame_size, int64_t iterations, int thread_id,
                      int *err);

typedef struct eff_ad_result {
    double value;
    double derivative;
    int64_t forward_effects;
    int64_t reverse_effects;
    int64_t max_handle_depth;
    int64_t duration_ns;
    int error;
} eff_ad_result_t;

eff_ad_result_t eff_kernel_ad(const eff_strategy_t *s, size_t frame_size, size_t iters, double x0);
int eff_demo_read_file(const eff_strategy_t *s, size_t frame_size, const char *reply, char *seen_name,
                       size_t seen_cap, char *received, size_t received_cap);

/* ------------------------------------------------------------- harnesses */

typedef struct eff_salt_report {
    uint64_t host_mismatch;
    uint64_t coro_mismatch;
    uint64_t sp_changes;
    uint64_t roundtrips;
    void *first_sp;
} eff_salt_report_t;

eff_salt_report_t eff_harness_salt(uint64_t roundtrips);
int eff_harness_bootstrap(uint64_t arg, uint64_t *seen_arg, uintptr_t *local_addr, uintptr_t *base,
                          uintptr_t *top);
int eff_harness_bootstrap_misaligned(void);
int eff_harness_double_switch(void);
int eff_harness_pingpong(uint64_t first, uint64_t second, uint64_t *a_got, uint64_t *b_got);
int eff_harness_hot_split(const eff_strategy_t *s, size_t iterations, size_t crossing_need,
                          size_t *allocations, size_t *chain_len);
int eff_harness_locate(const eff_set_t *masks, int depth, eff_id_t effect, int *found);
__attribute__((noreturn)) void eff_harness_overflow(const eff_strategy_t *s, size_t frame_size,
                                                    int place_canary);
__attribute__((noreturn)) void eff_harness_unhandled(eff_id_t effect);

#endif
