/* Benchmark kernels: switch, complex, expand, mt, ad, and the read_file demo. */
#define _GNU_SOURCE
#include "effstack.h"

#include <pthread.h>
#include <stdlib.h>
#include <string.h>
#include <time.h>

int64_t eff_now_ns(void)
{
    struct timespec ts;
    clock_gettime(CLOCK_MONOTONIC, &ts);
    return (int64_t)ts.tv_sec * 1000000000LL + ts.tv_nsec;
}

/* A library call the compiler cannot inline, routed like any foreign call. */
static void *(*volatile g_memset)(void *, int, size_t) = memset;

/* --------------------------------------------------------------- switch */

static void *switch_body(void *arg)
{
    (void)arg;
    eff_yield(eff_current(), EFF_YIELD, 0);
    return NULL;
}

eff_sample_t eff_kernel_switch(const eff_strategy_t *s, size_t frame_size)
{
    eff_sample_t out = {0};
    int err;
    eff_coroutine_t *k = eff_coroutine_new_sized(switch_body, NULL, s, frame_size, &err);
    if (!k) {
        out.error = err;
        return out;
    }
    int64_t t0 = eff_now_ns();
    eff_request_t a = eff_resume_handling_all(k, 0);
    eff_request_t b = eff_resume_handling_all(k, 0);
    int64_t t1 = eff_now_ns();
    out.duration_ns = t1 - t0;
    if (a.effect != EFF_YIELD || b.effect != EFF_RETURN || k->state != EFF_FINISHED)
        out.error = EFF_ERR_STATE;
    out.aux = (int64_t)eff_committed_bytes(k);
    eff_coroutine_delete(k);
    return out;
}

/* -------------------------------------------------------------- complex */

enum { COMPLEX_YIELD = 0 };

static pthread_mutex_t g_sync_mutex = PTHREAD_MUTEX_INITIALIZER;
static volatile int64_t g_complex_global;

static inline void extra_work(void)
{
    int sum = 0;
    for (int i = 0; i < 100; i++)
        sum += i;
    g_complex_global += sum;
}

static void *complex_body(void *arg)
{
    int64_t iterations = *(int64_t *)arg;
    for (int64_t i = 0; i < iterations; i++) {
        volatile int cal = (int)(i * 2);
        (void)cal;
        eff_perform(COMPLEX_YIELD, 0);
    }
    return (void *)(intptr_t)iterations;
}

eff_sample_t eff_kernel_complex(const eff_strategy_t *s, size_t frame_size, int64_t iterations)
{
    eff_sample_t out = {0};
    int err;
    eff_coroutine_t *k = eff_coroutine_new_sized(complex_body, &iterations, s, frame_size, &err);
    if (!k) {
        out.error = err;
        return out;
    }
    int64_t before = g_complex_global;
    int64_t t0 = eff_now_ns();
    eff_request_t req = eff_resume(k, 0, EFF_HANDLES(COMPLEX_YIELD));
    while (req.effect != EFF_RETURN) {
        if (req.effect != COMPLEX_YIELD) {
            out.error = EFF_ERR_STATE;
            break;
        }
        pthread_mutex_lock(&g_sync_mutex);
        extra_work();
        pthread_mutex_unlock(&g_sync_mutex);
        req = eff_resume(k, 0, EFF_HANDLES(COMPLEX_YIELD));
    }
    int64_t t1 = eff_now_ns();
    out.duration_ns = t1 - t0;
    out.output = (int64_t)req.payload;
    out.aux = g_complex_global - before;
    eff_coroutine_delete(k);
    return out;
}

/* --------------------------------------------------------------- expand */

enum { FILL_STACK = 0 };

typedef struct fill_args {
    int depth;
    int max_depth;
} fill_args_t;

typedef struct memset_args {
    void *p;
    size_t n;
} memset_args_t;

static void *memset_thunk(void *p)
{
    memset_args_t *a = p;
    g_memset(a->p, 0, a->n);
    return NULL;
}

static volatile char g_fill_sink;

static void *fill_stack_rec(void *p)
{
    fill_args_t *a = p;
    char buffer[1024];
    memset_args_t m = {buffer, sizeof(buffer)};
    eff_foreign_call(memset_thunk, &m);
    if (a->depth < a->max_depth) {
        fill_args_t next = {a->depth + 1, a->max_depth};
        eff_stack_call(sizeof(buffer) + 128, fill_stack_rec, &next);
    } else {
        eff_perform(FILL_STACK, 0);
    }
    g_fill_sink = buffer[a->depth & 1023];
    return NULL;
}

static void *fill_fn(void *arg)
{
    fill_args_t a = {0, *(int *)arg};
    eff_stack_call(1024 + 128, fill_stack_rec, &a);
    return NULL;
}

eff_sample_t eff_kernel_expand(const eff_strategy_t *s, size_t frame_size, int max_depth)
{
    eff_sample_t out = {0};
    int err;
    eff_coroutine_t *k = eff_coroutine_new_sized(fill_fn, &max_depth, s, frame_size, &err);
    if (!k) {
        out.error = err;
        return out;
    }
    int64_t t0 = eff_now_ns();
    eff_request_t req = eff_resume_handling_all(k, 0);
    int64_t t1 = eff_now_ns();
    out.duration_ns = t1 - t0;
    if (req.effect != FILL_STACK)
        out.error = EFF_ERR_STATE;
    out.output = max_depth;
    out.aux = (int64_t)eff_committed_bytes(k);
    eff_coroutine_delete(k);
    return out;
}

/* ------------------------------------------------------------------- mt */

enum { ASYNC_OP = 0 };

typedef struct thread_args {
    int64_t iterations;
    int thread_id;
    const eff_strategy_t *s;
    size_t frame_size;
    int runs;
    int64_t result;
    int error;
} thread_args_t;

static inline int64_t concurrent_operation(int64_t x, int64_t y) { return (x + y) ^ 0xABCDEF; }

static int64_t handle_async_op_rec(eff_coroutine_t *k)
{
    eff_request_t req = eff_resume(k, 0, EFF_HANDLES(ASYNC_OP));
    switch (req.effect) {
    case ASYNC_OP: {
        int64_t x = *(int64_t *)(uintptr_t)req.payload;
        return concurrent_operation(x, handle_async_op_rec(k));
    }
    case EFF_RETURN:
        return (int64_t)req.payload;
    }
    return -1;
}

static void *async_loop(void *arg)
{
    thread_args_t *a = arg;
    for (int64_t i = a->iterations; i > 0; i--) {
        int64_t x = i;
        eff_perform(ASYNC_OP, (uint64_t)(uintptr_t)&x);
    }
    return (void *)(intptr_t)a->thread_id;
}

int64_t eff_run_async(const eff_strategy_t *s, size_t frame_size, int64_t iterations, int thread_id, int *err)
{
    thread_args_t a = {.iterations = iterations, .thread_id = thread_id};
    eff_coroutine_t *k = eff_coroutine_new_sized(async_loop, &a, s, frame_size, err);
    if (!k)
        return 0;
    int64_t result = handle_async_op_rec(k);
    eff_coroutine_delete(k);
    return result;
}

static void *thread_func(void *arg)
{
    thread_args_t *a = arg;
    int64_t local = 0;
    for (int i = 0; i < a->runs; i++) {
        int err = EFF_OK;
        local += eff_run_async(a->s, a->frame_size, a->iterations, a->thread_id, &err);
        if (err != EFF_OK) {
            a->error = err;
            break;
        }
    }
    a->result = local;
    return NULL;
}

eff_sample_t eff_kernel_mt(const eff_strategy_t *s, size_t frame_size, int threads, int64_t iterations,
                           int runs_per_thread)
{
    eff_sample_t out = {0};
    if (threads < 1) {
        out.error = EFF_ERR_SIZE;
        return out;
    }
    pthread_t *tids = calloc((size_t)threads, sizeof(pthread_t));
    thread_args_t *targs = calloc((size_t)threads, sizeof(thread_args_t));
    if (!tids || !targs) {
        free(tids);
        free(targs);
        out.error = EFF_ERR_NOMEM;
        return out;
    }
    /* handle_async_op_rec recurses once per iteration on the thread stack. */
    size_t stack = 8u << 20;
    size_t want = (size_t)(iterations > 0 ? iterations : 0) * 256 + (1u << 20);
    if (want > stack)
        stack = want;
    pthread_attr_t attr;
    pthread_attr_init(&attr);
    pthread_attr_setstacksize(&attr, stack);
    int started = 0;
    int64_t t0 = eff_now_ns();
    for (int i = 0; i < threads; i++) {
        targs[i].iterations = iterations;
        targs[i].thread_id = i + 1;
        targs[i].s = s;
        targs[i].frame_size = frame_size;
        targs[i].runs = runs_per_thread;
        if (pthread_create(&tids[i], &attr, thread_func, &targs[i]) != 0) {
            out.error = EFF_ERR_OS;
            break;
        }
        started++;
    }
    int64_t total = 0;
    for (int i = 0; i < started; i++) {
        pthread_join(tids[i], NULL);
        total += targs[i].result;
        if (targs[i].error && !out.error)
            out.error = targs[i].error;
    }
    int64_t t1 = eff_now_ns();
    pthread_attr_destroy(&attr);
    out.duration_ns = t1 - t0;
    out.output = total;
    free(tids);
    free(targs);
    return out;
}

/* ------------------------------------------------------------------- ad */

typedef enum { NEGATE_OP } op1_t;
typedef enum { ADD_OP, MULTIPLY_OP } op2_t;

enum { E_AP0 = 0, E_AP1 = 1, E_AP2 = 2, R_AP0 = 3, R_AP1 = 4, R_AP2 = 5 };

#define E_SMOOTH (EFF_HANDLES(E_AP0) | EFF_HANDLES(E_AP1) | EFF_HANDLES(E_AP2))
#define R_SMOOTH (EFF_HANDLES(R_AP0) | EFF_HANDLES(R_AP1) | EFF_HANDLES(R_AP2))

typedef struct { double value; } e_ap0_t;
typedef struct { op1_t op; double arg1; } e_ap1_t;
typedef struct { op2_t op; double arg1; double arg2; } e_ap2_t;

typedef struct {
    double v;
    double *dv;
} prop_t;

typedef struct { double value; } r_ap0_t;
typedef struct { op1_t op; prop_t arg1; } r_ap1_t;
typedef struct { op2_t op; prop_t arg1; prop_t arg2; } r_ap2_t;

typedef struct ad_state {
    size_t iters;
    double x0;
    prop_t x;
    prop_t result;
    double derivative;
    const eff_strategy_t *s;
    size_t frame_size;
    int64_t forward;
    int64_t reverse;
    int64_t depth;
    int64_t max_depth;
    int error;
} ad_state_t;

/* The reverse coroutine owns the run state; reached from its own stack. */
static EFF_TLS ad_state_t *g_ad;

static double e_c(double x)
{
    e_ap0_t p = {x};
    return *(double *)(uintptr_t)eff_perform(E_AP0, (uint64_t)(uintptr_t)&p);
}

static double e_n(double x)
{
    e_ap1_t p = {NEGATE_OP, x};
    return *(double *)(uintptr_t)eff_perform(E_AP1, (uint64_t)(uintptr_t)&p);
}

static double e_a(double x, double y)
{
    e_ap2_t p = {ADD_OP, x, y};
    return *(double *)(uintptr_t)eff_perform(E_AP2, (uint64_t)(uintptr_t)&p);
}

static double e_m(double x, double y)
{
    e_ap2_t p = {MULTIPLY_OP, x, y};
    return *(double *)(uintptr_t)eff_perform(E_AP2, (uint64_t)(uintptr_t)&p);
}

static prop_t r_c(double x)
{
    r_ap0_t p = {x};
    return *(prop_t *)(uintptr_t)eff_perform(R_AP0, (uint64_t)(uintptr_t)&p);
}

static prop_t r_n(prop_t x)
{
    r_ap1_t p = {NEGATE_OP, x};
    return *(prop_t *)(uintptr_t)eff_perform(R_AP1, (uint64_t)(uintptr_t)&p);
}

static prop_t r_a(prop_t x, prop_t y)
{
    r_ap2_t p = {ADD_OP, x, y};
    return *(prop_t *)(uintptr_t)eff_perform(R_AP2, (uint64_t)(uintptr_t)&p);
}

static prop_t r_m(prop_t x, prop_t y)
{
    r_ap2_t p = {MULTIPLY_OP, x, y};
    return *(prop_t *)(uintptr_t)eff_perform(R_AP2, (uint64_t)(uintptr_t)&p);
}

typedef struct example_args {
    ad_state_t *st;
    double dx;
} example_args_t;

static void *example(void *arg)
{
    example_args_t *ea = arg;
    ad_state_t *st = ea->st;
    /* dx lives in the caller's frame: it is read after example returns. */
    ea->dx = 0.0;
    st->x = (prop_t){st->x0, &ea->dx};
    prop_t acc = r_c(1.0);
    prop_t prev = r_c(1.0);
    for (size_t i = 0; i < st->iters; i++) {
        prev = r_m(prev, r_n(r_a(st->x, r_c(-1.0))));
        acc = r_a(acc, prev);
    }
    st->result = acc;
    return NULL;
}

typedef struct handle_args {
    eff_coroutine_t *k;
    prop_t *response;
} handle_args_t;

static void *handle(void *p);

static void handle_rec(eff_coroutine_t *k, prop_t *response)
{
    handle_args_t a = {k, response};
    eff_stack_call(1024, handle, &a);
}

static void *handle(void *p)
{
    handle_args_t *ha = p;
    eff_coroutine_t *k = ha->k;
    ad_state_t *st = g_ad;
    if (++st->depth > st->max_depth)
        st->max_depth = st->depth;
    eff_request_t request = eff_resume(k, (uint64_t)(uintptr_t)ha->response, R_SMOOTH);
    if (k->state == EFF_FINISHED) {
        *st->result.dv = 1.0;
        st->depth--;
        return NULL;
    }
    st->reverse++;
    switch (request.effect) {
    case R_AP0: {
        r_ap0_t payload = *(r_ap0_t *)(uintptr_t)request.payload;
        double v = e_c(payload.value);
        double dv = 0.0;
        prop_t r = {v, &dv};
        handle_rec(k, &r);
        break;
    }
    case R_AP1: {
        r_ap1_t payload = *(r_ap1_t *)(uintptr_t)request.payload;
        double v = 0.0;
        switch (payload.op) {
        case NEGATE_OP:
            v = e_n(payload.arg1.v);
            break;
        }
        double dv = 0.0;
        prop_t r = {v, &dv};
        handle_rec(k, &r);
        double *dx = payload.arg1.dv;
        switch (payload.op) {
        case NEGATE_OP:
            *dx = e_a(*dx, e_n(dv));
            break;
        }
        break;
    }
    case R_AP2: {
        r_ap2_t payload = *(r_ap2_t *)(uintptr_t)request.payload;
        double v = 0.0;
        switch (payload.op) {
        case ADD_OP:
            v = e_a(payload.arg1.v, payload.arg2.v);
            break;
        case MULTIPLY_OP:
            v = e_m(payload.arg1.v, payload.arg2.v);
            break;
        }
        double dv = 0.0;
        prop_t r = {v, &dv};
        handle_rec(k, &r);
        double x = payload.arg1.v;
        double y = payload.arg2.v;
        double *dx = payload.arg1.dv;
        double *dy = payload.arg2.dv;
        switch (payload.op) {
        case ADD_OP:
            *dx = e_a(*dx, dv);
            *dy = e_a(*dy, dv);
            break;
        case MULTIPLY_OP:
            *dx = e_a(*dx, e_m(y, dv));
            *dy = e_a(*dy, e_m(x, dv));
            break;
        }
        break;
    }
    default:
        st->error = EFF_ERR_STATE;
        break;
    }
    st->depth--;
    return NULL;
}

typedef struct new_args {
    ad_state_t *st;
    example_args_t *ea;
    eff_coroutine_t *k;
    int err;
} new_args_t;

static void *new_child_thunk(void *p)
{
    new_args_t *n = p;
    n->k = eff_coroutine_new_sized(example, n->ea, n->st->s, n->st->frame_size, &n->err);
    return NULL;
}

static void *delete_thunk(void *p)
{
    eff_coroutine_delete(p);
    return NULL;
}

static void *reverse(void *arg)
{
    ad_state_t *st = arg;
    g_ad = st;
    example_args_t ea = {st, 0.0};
    new_args_t n = {st, &ea, NULL, EFF_OK};
    eff_foreign_call(new_child_thunk, &n);
    if (!n.k) {
        st->error = n.err;
        return NULL;
    }
    handle_rec(n.k, NULL);
    st->derivative = *st->x.dv;
    eff_foreign_call(delete_thunk, n.k);
    g_ad = NULL;
    return NULL;
}

static void evaluate(eff_coroutine_t *k, ad_state_t *st)
{
    double value = 0.0;
    eff_request_t request = eff_resume(k, 0, E_SMOOTH);
    for (;;) {
        switch (request.effect) {
        case E_AP0: {
            e_ap0_t payload = *(e_ap0_t *)(uintptr_t)request.payload;
            value = payload.value;
            break;
        }
        case E_AP1: {
            e_ap1_t payload = *(e_ap1_t *)(uintptr_t)request.payload;
            switch (payload.op) {
            case NEGATE_OP:
                value = -payload.arg1;
                break;
            }
            break;
        }
        case E_AP2: {
            e_ap2_t payload = *(e_ap2_t *)(uintptr_t)request.payload;
            switch (payload.op) {
            case ADD_OP:
                value = payload.arg1 + payload.arg2;
                break;
            case MULTIPLY_OP:
                value = payload.arg1 * payload.arg2;
                break;
            }
            break;
        }
        case EFF_RETURN:
            return;
        default:
            st->error = EFF_ERR_STATE;
            return;
        }
        st->forward++;
        request = eff_resume(k, (uint64_t)(uintptr_t)&value, E_SMOOTH);
    }
}

eff_ad_result_t eff_kernel_ad(const eff_strategy_t *s, size_t frame_size, size_t iters, double x0)
{
    eff_ad_result_t out = {0};
    ad_state_t st;
    memset(&st, 0, sizeof(st));
    st.iters = iters;
    st.x0 = x0;
    st.s = s;
    st.frame_size = frame_size;
    int err;
    eff_coroutine_t *k = eff_coroutine_new_sized(reverse, &st, s, frame_size, &err);
    if (!k) {
        out.error = err;
        return out;
    }
    int64_t t0 = eff_now_ns();
    evaluate(k, &st);
    int64_t t1 = eff_now_ns();
    eff_coroutine_delete(k);
    out.duration_ns = t1 - t0;
    out.value = st.result.v;
    out.derivative = st.derivative;
    out.forward_effects = st.forward;
    out.reverse_effects = st.reverse;
    out.max_handle_depth = st.max_depth;
    out.error = st.error;
    return out;
}

/* ------------------------------------------------------------ read_file */

enum { READ_FILE = 0 };

typedef struct read_file_args {
    char *received;
    size_t cap;
} read_file_args_t;

static void *read_file_body(void *arg)
{
    read_file_args_t *a = arg;
    const char *filename = "example.txt";
    const char *text = (const char *)(uintptr_t)eff_perform(READ_FILE, (uint64_t)(uintptr_t)&filename);
    size_t n = strlen(text);
    if (n >= a->cap)
        n = a->cap - 1;
    memcpy(a->received, text, n);
    a->received[n] = 0;
    return (void *)(uintptr_t)n;
}

int eff_demo_read_file(const eff_strategy_t *s, size_t frame_size, const char *reply, char *seen_name,
                       size_t seen_cap, char *received, size_t received_cap)
{
    int err;
    read_file_args_t a = {received, received_cap};
    eff_coroutine_t *k = eff_coroutine_new_sized(read_file_body, &a, s, frame_size, &err);
    if (!k)
        return err;
    eff_request_t req = eff_resume(k, 0, EFF_HANDLES(READ_FILE));
    if (req.effect != READ_FILE) {
        eff_coroutine_delete(k);
        return EFF_ERR_STATE;
    }
    const char *name = *(const char **)(uintptr_t)req.payload;
    size_t n = strlen(name);
    if (n >= seen_cap)
        n = seen_cap - 1;
    memcpy(seen_name, name, n);
    seen_name[n] = 0;
    req = eff_resume(k, (uint64_t)(uintptr_t)reply, EFF_HANDLES(READ_FILE));
    int rc = (req.effect == EFF_RETURN && k->state == EFF_FINISHED) ? EFF_OK : EFF_ERR_STATE;
    eff_coroutine_delete(k);
    return rc;
}
