/* Coroutines and the effect primitives. */
#define _GNU_SOURCE
#include "effstack.h"

#include <stdio.h>
#include <stdlib.h>
#include <string.h>
#include <unistd.h>

static EFF_TLS eff_coroutine_t *g_current;

static const char *g_effect_names[EFF_ID_MAX + 1];

static void default_abort_handler(eff_id_t effect, uint64_t payload);
static eff_default_handler_t g_default_handler = default_abort_handler;

eff_coroutine_t *eff_current(void) { return g_current; }

void eff_set_default_handler(eff_default_handler_t h)
{
    g_default_handler = h ? h : default_abort_handler;
}

void eff_register_effect_name(eff_id_t id, const char *name)
{
    if (id <= EFF_ID_MAX)
        g_effect_names[id] = name;
}

const char *eff_effect_name(eff_id_t id)
{
    if (id == EFF_RETURN)
        return "return";
    if (id == EFF_YIELD)
        return "yield";
    if (id <= EFF_ID_MAX && g_effect_names[id])
        return g_effect_names[id];
    return NULL;
}

static const char *state_name(eff_state_t s)
{
    switch (s) {
    case EFF_SUSPENDED: return "SUSPENDED";
    case EFF_RUNNING: return "RUNNING";
    case EFF_FINISHED: return "FINISHED";
    }
    return "?";
}

static void default_abort_handler(eff_id_t effect, uint64_t payload)
{
    (void)payload;
    const char *name = eff_effect_name(effect);
    fprintf(stderr, "effstack: unhandled effect %s (id %llu)\n", name ? name : "<unnamed>",
            (unsigned long long)effect);
    int depth = 0;
    for (eff_coroutine_t *c = g_current; c; c = c->parent, depth++)
        fprintf(stderr, "  #%d coroutine %p state=%s handles=0x%016llx strategy=%s\n", depth, (void *)c,
                state_name(c->state), (unsigned long long)c->handled, c->strategy->name);
    fprintf(stderr, "  #%d <root>\n", depth);
    fflush(stderr);
    abort();
}

/* ------------------------------------------------------------ lifecycle */

eff_coroutine_t *eff_coroutine_new_sized(void *(*entry)(void *), void *arg, const eff_strategy_t *s,
                                         size_t frame_size, int *err)
{
    int e = EFF_OK;
    eff_coroutine_t *k = NULL;
    if (!s) {
        e = EFF_ERR_STATE;
        goto out;
    }
    if (frame_size < EFF_MIN_FRAME_SIZE) {
        e = EFF_ERR_SIZE;
        goto out;
    }
    k = calloc(1, sizeof(*k));
    if (!k) {
        e = EFF_ERR_NOMEM;
        goto out;
    }
    k->strategy = s;
    k->entry = entry;
    k->arg = arg;
    k->state = EFF_SUSPENDED;
    k->leaf = k;
    k->needs_altstack = s->kind == EFF_OVERCOMMIT_KERNEL || s->kind == EFF_OVERCOMMIT_USER;
    e = s->init(&k->frame, frame_size);
    if (e != EFF_OK) {
        free(k);
        k = NULL;
        goto out;
    }
    e = eff_ctx_bootstrap(&k->resume_point, entry, arg, k->frame.initial_sp);
    if (e != EFF_OK) {
        s->release(&k->frame);
        free(k);
        k = NULL;
    }
out:
    if (err)
        *err = e;
    return k;
}

eff_coroutine_t *eff_coroutine_new(void *(*entry)(void *), void *arg, const eff_strategy_t *s, int *err)
{
    return eff_coroutine_new_sized(entry, arg, s, s ? s->default_frame_size : 0, err);
}

int eff_coroutine_delete(eff_coroutine_t *k)
{
    if (!k)
        return EFF_ERR_STATE;
    if (k->state == EFF_RUNNING)
        return EFF_ERR_STATE;
    /* Frame release is exactly-once: the frame is cleared afterwards. */
    if (k->frame.base || k->frame.seg.head)
        k->strategy->release(&k->frame);
    memset(k, 0, sizeof(*k));
    free(k);
    return EFF_OK;
}

size_t eff_committed_bytes(const eff_coroutine_t *k)
{
    return k->strategy->committed(&k->frame);
}

/* ---------------------------------------------------------- primitives */

int eff_check_resume(const eff_coroutine_t *k)
{
    if (!k || k->state != EFF_SUSPENDED || k->captured)
        return EFF_ERR_STATE;
    return EFF_OK;
}

eff_request_t eff_resume(eff_coroutine_t *k, uint64_t reply, eff_set_t handled)
{
    if (EFF_UNLIKELY(eff_debug) && eff_check_resume(k) != EFF_OK)
        eff_fatal("resume of a coroutine that is not SUSPENDED");
    k->parent = g_current;
    k->handled = handled;
    eff_coroutine_t *c = k->leaf;
    for (;;) {
        c->state = EFF_RUNNING;
        c->captured = NULL;
        if (c->needs_altstack && EFF_UNLIKELY(!eff_altstack_ready()))
            eff_ensure_altstack();
        if (c == k)
            break;
        c = c->parent;
    }
    g_current = k->leaf;
    effstack_ctx_switch(&k->return_point, &k->resume_point, reply);
    return k->request;
}

eff_request_t eff_resume_handling_all(eff_coroutine_t *k, uint64_t reply)
{
    return eff_resume(k, reply, EFF_ALL);
}

int eff_on_chain(const eff_coroutine_t *target)
{
    for (const eff_coroutine_t *c = g_current; c; c = c->parent)
        if (c == target)
            return 1;
    return 0;
}

uint64_t eff_yield_to(eff_coroutine_t *target, eff_id_t effect, uint64_t payload)
{
    eff_coroutine_t *self = g_current;
    for (eff_coroutine_t *c = self;; c = c->parent) {
        c->state = EFF_SUSPENDED;
        if (c == target)
            break;
        c->captured = target;
    }
    target->leaf = self;
    target->request.effect = effect;
    target->request.payload = payload;
    g_current = target->parent;
    return effstack_ctx_switch(&target->resume_point, &target->return_point, 0);
}

void eff_finish_to(eff_coroutine_t *target, eff_id_t effect, uint64_t payload)
{
    for (eff_coroutine_t *c = g_current;; c = c->parent) {
        c->state = EFF_FINISHED;
        c->captured = NULL;
        if (c == target)
            break;
    }
    target->leaf = target;
    target->request.effect = effect;
    target->request.payload = payload;
    g_current = target->parent;
    effstack_ctx_jump(&target->return_point, 0);
}

uint64_t eff_yield(eff_coroutine_t *target, eff_id_t effect, uint64_t payload)
{
    if (EFF_UNLIKELY(eff_debug) && !eff_on_chain(target))
        eff_fatal("yield target is not the current coroutine or an ancestor");
    return eff_yield_to(target, effect, payload);
}

void eff_exit(eff_coroutine_t *target, uint64_t payload)
{
    if (EFF_UNLIKELY(eff_debug) && !eff_on_chain(target))
        eff_fatal("exit target is not the current coroutine or an ancestor");
    eff_finish_to(target, EFF_RETURN, payload);
}

void effstack_ctx_entry_returned(uint64_t value)
{
    if (!g_current)
        eff_fatal("coroutine entry returned with no current coroutine");
    eff_finish_to(g_current, EFF_RETURN, value);
}

eff_coroutine_t *eff_locate_handler(eff_id_t effect)
{
    eff_set_t bit = EFF_HANDLES(effect);
    for (eff_coroutine_t *c = g_current; c; c = c->parent)
        if (c->handled & bit)
            return c;
    return NULL;
}

static eff_coroutine_t *find_or_default(eff_id_t effect, uint64_t payload)
{
    if (EFF_UNLIKELY(!g_current))
        eff_fatal("perform outside of any coroutine");
    eff_coroutine_t *target = eff_locate_handler(effect);
    if (EFF_UNLIKELY(!target)) {
        g_default_handler(effect, payload);
        eff_fatal("default effect handler returned");
    }
    return target;
}

uint64_t eff_perform(eff_id_t effect, uint64_t payload)
{
    return eff_yield_to(find_or_default(effect, payload), effect, payload);
}

void eff_throw(eff_id_t effect, uint64_t payload)
{
    eff_finish_to(find_or_default(effect, payload), effect, payload);
}

/* --------------------------------------------------- stack growth checks */

typedef struct grow_req {
    eff_seg_state_t *st;
    size_t need;
    char *old_sp;
    char *new_sp;
} grow_req_t;

/* Segment allocation goes through malloc, which needs more stack than a
 * nearly exhausted segment can offer, so it runs on a per-thread scratch. */
#define EFF_SCRATCH_SIZE (64 * 1024)
static EFF_TLS char *g_scratch;

static void *grow_on_scratch(void *p)
{
    grow_req_t *r = p;
    size_t size = r->need;
    r->new_sp = eff_seg_allocate_growth_frame(r->st, &size, r->old_sp, 0);
    return NULL;
}

static char *scratch_top(void)
{
    if (EFF_UNLIKELY(!g_scratch)) {
        g_scratch = malloc(EFF_SCRATCH_SIZE);
        if (!g_scratch)
            eff_fatal("cannot allocate growth scratch stack");
    }
    return (char *)(((uintptr_t)g_scratch + EFF_SCRATCH_SIZE) & ~(uintptr_t)0xF);
}

void *eff_stack_call(size_t need, void *(*fn)(void *), void *arg)
{
    eff_coroutine_t *k = g_current;
    if (!k)
        return fn(arg);
    char *sp = effstack_current_sp();
    int kind = k->strategy->kind;
    if (kind == EFF_SEGMENTED) {
        eff_seg_state_t *st = &k->frame.seg;
        char *low = (char *)(st->current + 1);
        if (EFF_LIKELY(sp >= low && (size_t)(sp - low) >= need + EFF_SEG_MARGIN))
            return fn(arg);
        grow_req_t r = {st, need + EFF_SEG_MARGIN, sp, NULL};
        effstack_call_on_stack(grow_on_scratch, &r, scratch_top());
        void *ret = effstack_call_on_stack(fn, arg, r.new_sp);
        eff_seg_release_growth_frame(st);
        return ret;
    }
    if (kind == EFF_FIXED && eff_debug) {
        char *low = k->frame.base;
        if (sp < low || (size_t)(sp - low) < need)
            eff_fatal("stack overflow in fixed-size frame");
    }
    return fn(arg);
}

void *eff_foreign_call(void *(*fn)(void *), void *arg)
{
    return eff_stack_call(EFF_SEG_SYSCALL_SEGMENT, fn, arg);
}
