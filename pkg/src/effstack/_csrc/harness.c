/* Probes used by the test-suite to exercise the core from Python. */
#define _GNU_SOURCE
#include "effstack.h"

#include <stdio.h>
#include <stdlib.h>
#include <string.h>
#include <sys/mman.h>
#include <unistd.h>

#define PROBE_STACK (64 * 1024)

/* ------------------------------------------------------- register salting */

typedef struct salt_state {
    eff_ctx_t host;
    eff_ctx_t coro;
    uint64_t rounds;
    uint64_t coro_mismatch;
} salt_state_t;

static uint64_t splitmix(uint64_t *s)
{
    uint64_t z = (*s += 0x9E3779B97F4A7C15ULL);
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
}

static void *salt_coro(void *p)
{
    salt_state_t *st = p;
    uint64_t seed = 0xC0FFEEULL;
    for (uint64_t i = 0; i < st->rounds; i++)
        st->coro_mismatch |= effstack_salt_probe(&st->coro, &st->host, splitmix(&seed));
    effstack_ctx_jump(&st->host, 0);
}

eff_salt_report_t eff_harness_salt(uint64_t roundtrips)
{
    eff_salt_report_t rep = {0};
    salt_state_t *st = calloc(1, sizeof(*st));
    char *stack = malloc(PROBE_STACK);
    if (!st || !stack) {
        free(st);
        free(stack);
        rep.host_mismatch = ~0ULL;
        return rep;
    }
    st->rounds = roundtrips;
    char *top = (char *)(((uintptr_t)stack + PROBE_STACK) & ~(uintptr_t)0xF);
    eff_ctx_bootstrap(&st->coro, salt_coro, st, top);
    uint64_t seed = 0x5EEDULL;
    /* The first probe starts the coroutine; every later one is a round trip. */
    for (uint64_t i = 0; i <= roundtrips; i++) {
        rep.host_mismatch |= effstack_salt_probe(&st->host, &st->coro, splitmix(&seed));
        if (i == 0)
            rep.first_sp = st->coro.rsp;
        else if (st->coro.rsp != rep.first_sp && i < roundtrips)
            rep.sp_changes++;
        if (i < roundtrips)
            rep.roundtrips = i + 1;
    }
    rep.coro_mismatch = st->coro_mismatch;
    free(stack);
    free(st);
    return rep;
}

/* ------------------------------------------------------------ bootstrap */

typedef struct boot_state {
    eff_ctx_t host;
    eff_ctx_t coro;
    uint64_t seen;
    uintptr_t local;
} boot_state_t;

static boot_state_t *g_boot;

static void *boot_entry(void *arg)
{
    volatile char local = 1;
    g_boot->seen = (uint64_t)(uintptr_t)arg;
    g_boot->local = (uintptr_t)&local;
    effstack_ctx_jump(&g_boot->host, 0);
}

int eff_harness_bootstrap(uint64_t arg, uint64_t *seen_arg, uintptr_t *local_addr, uintptr_t *base,
                          uintptr_t *top)
{
    boot_state_t st;
    memset(&st, 0, sizeof(st));
    char *stack = malloc(PROBE_STACK);
    if (!stack)
        return EFF_ERR_NOMEM;
    char *sp = (char *)(((uintptr_t)stack + PROBE_STACK) & ~(uintptr_t)0xF);
    int rc = eff_ctx_bootstrap(&st.coro, boot_entry, (void *)(uintptr_t)arg, sp);
    if (rc == EFF_OK) {
        g_boot = &st;
        rc = eff_ctx_switch_checked(&st.host, &st.coro, 0, NULL);
        g_boot = NULL;
    }
    *seen_arg = st.seen;
    *local_addr = st.local;
    *base = (uintptr_t)stack;
    *top = (uintptr_t)sp;
    free(stack);
    return rc;
}

int eff_harness_bootstrap_misaligned(void)
{
    eff_ctx_t c;
    char *stack = malloc(PROBE_STACK);
    if (!stack)
        return EFF_ERR_NOMEM;
    char *sp = (char *)(((uintptr_t)stack + PROBE_STACK) & ~(uintptr_t)0xF) - 8;
    int rc = eff_ctx_bootstrap(&c, boot_entry, NULL, sp);
    free(stack);
    return rc;
}

/* Switch into a bootstrapped context twice without it ever saving itself. */
int eff_harness_double_switch(void)
{
    boot_state_t st;
    memset(&st, 0, sizeof(st));
    char *stack = malloc(PROBE_STACK);
    if (!stack)
        return EFF_ERR_NOMEM;
    char *sp = (char *)(((uintptr_t)stack + PROBE_STACK) & ~(uintptr_t)0xF);
    eff_ctx_bootstrap(&st.coro, boot_entry, NULL, sp);
    g_boot = &st;
    int first = eff_ctx_switch_checked(&st.host, &st.coro, 0, NULL);
    int second = first == EFF_OK ? eff_ctx_switch_checked(&st.host, &st.coro, 0, NULL) : first;
    g_boot = NULL;
    free(stack);
    return second;
}

/* ------------------------------------------------------------ ping-pong */

typedef struct pp_state {
    eff_ctx_t a;
    eff_ctx_t b;
    uint64_t b_got;
} pp_state_t;

static void *pp_entry(void *arg)
{
    pp_state_t *st = arg;
    /* B's first switch back carries 9; whatever A sends next is B's result. */
    st->b_got = effstack_ctx_switch(&st->b, &st->a, 9);
    effstack_ctx_jump(&st->a, 0);
}

int eff_harness_pingpong(uint64_t first, uint64_t second, uint64_t *a_got, uint64_t *b_got)
{
    pp_state_t st;
    memset(&st, 0, sizeof(st));
    char *stack = malloc(PROBE_STACK);
    if (!stack)
        return EFF_ERR_NOMEM;
    char *sp = (char *)(((uintptr_t)stack + PROBE_STACK) & ~(uintptr_t)0xF);
    eff_ctx_bootstrap(&st.b, pp_entry, &st, sp);
    *a_got = effstack_ctx_switch(&st.a, &st.b, first);
    effstack_ctx_switch(&st.a, &st.b, second);
    *b_got = st.b_got;
    free(stack);
    return EFF_OK;
}

/* ------------------------------------------------------------ hot split */

typedef struct split_state {
    size_t iterations;
    size_t need;
    volatile uint64_t sink;
} split_state_t;

static void *split_leaf(void *p)
{
    split_state_t *st = p;
    volatile char pad[64];
    pad[0] = (char)st->sink;
    st->sink += (uint64_t)pad[0] + 1;
    return NULL;
}

static void *split_body(void *p)
{
    split_state_t *st = p;
    for (size_t i = 0; i < st->iterations; i++)
        eff_stack_call(st->need, split_leaf, st);
    return NULL;
}

int eff_harness_hot_split(const eff_strategy_t *s, size_t iterations, size_t crossing_need,
                          size_t *allocations, size_t *chain_len)
{
    int err;
    split_state_t st = {iterations, crossing_need, 0};
    eff_coroutine_t *k = eff_coroutine_new(split_body, &st, s, &err);
    if (!k)
        return err;
    eff_request_t req = eff_resume_handling_all(k, 0);
    int rc = req.effect == EFF_RETURN ? EFF_OK : EFF_ERR_STATE;
    *allocations = k->frame.seg.allocations;
    *chain_len = 0;
    if (s->kind == EFF_SEGMENTED && eff_seg_check_chain(&k->frame.seg, chain_len) != EFF_OK)
        rc = EFF_ERR_CHAIN;
    eff_coroutine_delete(k);
    return rc;
}

/* ------------------------------------------------------- handler lookup */

typedef struct nest_state {
    const eff_set_t *masks;
    int depth;
    eff_id_t effect;
    eff_coroutine_t *chain[8];
    int found;
    int error;
} nest_state_t;

typedef struct nest_level {
    nest_state_t *st;
    int level;
} nest_level_t;

static void *nest_entry(void *p)
{
    nest_level_t *lv = p;
    nest_state_t *st = lv->st;
    if (lv->level + 1 < st->depth) {
        nest_level_t next = {st, lv->level + 1};
        int err;
        eff_coroutine_t *k = eff_coroutine_new_sized(nest_entry, &next, &eff_strategies[EFF_FIXED], 16 * 1024, &err);
        if (!k) {
            st->error = err;
            return NULL;
        }
        st->chain[next.level] = k;
        eff_request_t req = eff_resume(k, 0, st->masks[next.level]);
        if (req.effect != EFF_RETURN)
            st->error = EFF_ERR_STATE;
        eff_coroutine_delete(k);
        return NULL;
    }
    eff_coroutine_t *h = eff_locate_handler(st->effect);
    st->found = -1;
    for (int i = 0; i < st->depth; i++)
        if (st->chain[i] == h)
            st->found = i;
    if (h && st->found < 0)
        st->error = EFF_ERR_CHAIN;
    return NULL;
}

int eff_harness_locate(const eff_set_t *masks, int depth, eff_id_t effect, int *found)
{
    if (depth < 1 || depth > 8)
        return EFF_ERR_SIZE;
    nest_state_t st;
    memset(&st, 0, sizeof(st));
    st.masks = masks;
    st.depth = depth;
    st.effect = effect;
    nest_level_t root = {&st, 0};
    int err;
    eff_coroutine_t *k = eff_coroutine_new_sized(nest_entry, &root, &eff_strategies[EFF_FIXED], 16 * 1024, &err);
    if (!k)
        return err;
    st.chain[0] = k;
    eff_request_t req = eff_resume(k, 0, masks[0]);
    if (req.effect != EFF_RETURN)
        st.error = EFF_ERR_STATE;
    eff_coroutine_delete(k);
    *found = st.found;
    return st.error;
}

/* ------------------------------------------------------------- overflow */

#define CANARY_WORD 0x5AFEC0DE5AFEC0DEULL

static volatile uint64_t *g_canary;

static void report_canary(void)
{
    if (!g_canary)
        return;
    const char *msg = *g_canary == CANARY_WORD ? "effstack: canary intact\n" : "effstack: canary CORRUPTED\n";
    ssize_t r = write(2, msg, strlen(msg));
    (void)r;
}

static volatile uint64_t g_overflow_sink;

static void *overflow_rec(void *p)
{
    volatile char buffer[1024];
    for (size_t i = 0; i < sizeof(buffer); i++)
        buffer[i] = (char)i;
    overflow_rec(p);
    g_overflow_sink += buffer[(uintptr_t)p & 1023];
    return NULL;
}

void eff_harness_overflow(const eff_strategy_t *s, size_t frame_size, int place_canary)
{
    int err;
    eff_coroutine_t *k = NULL;
    size_t page = eff_page_size();
    /* The page below a fresh region may already be mapped; failed attempts
       stay mapped so the next region lands somewhere else. */
    for (int attempt = 0; attempt < 16; attempt++) {
        k = eff_coroutine_new_sized(overflow_rec, NULL, s, frame_size, &err);
        if (!k) {
            fprintf(stderr, "effstack: overflow harness could not create coroutine (%d)\n", err);
            fflush(stderr);
            _exit(3);
        }
        if (!place_canary)
            break;
        void *want = (char *)k->frame.base - page;
        void *p = mmap(want, page, PROT_READ | PROT_WRITE, MAP_PRIVATE | MAP_ANONYMOUS | MAP_FIXED_NOREPLACE,
                       -1, 0);
        if (p == want) {
            g_canary = p;
            *g_canary = CANARY_WORD;
            eff_set_fatal_hook(report_canary);
            break;
        }
        if (p != MAP_FAILED)
            munmap(p, page);
    }
    if (place_canary && !g_canary)
        fprintf(stderr, "effstack: canary page unavailable below region\n");
    fflush(stderr);
    eff_resume_handling_all(k, 0);
    fprintf(stderr, "effstack: overflow harness returned without a fault\n");
    fflush(stderr);
    _exit(4);
}

static void *unhandled_body(void *p)
{
    eff_perform((eff_id_t)(uintptr_t)p, 0);
    return NULL;
}

void eff_harness_unhandled(eff_id_t effect)
{
    int err;
    eff_coroutine_t *k = eff_coroutine_new_sized(unhandled_body, (void *)(uintptr_t)effect,
                                                 &eff_strategies[EFF_FIXED], 64 * 1024, &err);
    if (k)
        eff_resume(k, 0, 0);
    fprintf(stderr, "effstack: unhandled effect was not reported\n");
    fflush(stderr);
    _exit(4);
}
