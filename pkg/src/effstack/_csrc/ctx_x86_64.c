/*
 * x86-64 System V context switching.
 *
 * A context holds the callee-saved integer registers, the stack and frame
 * pointers, the resume address and the two floating-point control words the
 * ABI designates callee-saved (MXCSR control bits, x87 control word).
 * Nothing is read or written below the current stack pointer.
 */
#include "effstack.h"

#include <string.h>

__asm__(
    ".text\n"
    ".p2align 4\n"
    ".globl effstack_ctx_switch\n"
    ".hidden effstack_ctx_switch\n"
    ".type effstack_ctx_switch,@function\n"
    "effstack_ctx_switch:\n"
    "    .cfi_startproc\n"
    "    movq (%rsp), %rax\n"
    "    movq %rax, 0(%rdi)\n"
    "    leaq 8(%rsp), %rax\n"
    "    movq %rax, 8(%rdi)\n"
    "    movq %rbp, 16(%rdi)\n"
    "    movq %rbx, 24(%rdi)\n"
    "    movq %r12, 32(%rdi)\n"
    "    movq %r13, 40(%rdi)\n"
    "    movq %r14, 48(%rdi)\n"
    "    movq %r15, 56(%rdi)\n"
    "    stmxcsr 64(%rdi)\n"
    "    fnstcw 68(%rdi)\n"
    "    movw $1, 70(%rdi)\n"
    "    movq %rsi, %rdi\n"
    "    jmp effstack_restore_common\n"
    "    .cfi_endproc\n"
    ".size effstack_ctx_switch, .-effstack_ctx_switch\n"

    ".p2align 4\n"
    ".globl effstack_ctx_jump\n"
    ".hidden effstack_ctx_jump\n"
    ".type effstack_ctx_jump,@function\n"
    "effstack_ctx_jump:\n"
    "    .cfi_startproc\n"
    "    movq %rsi, %rdx\n"
    "effstack_restore_common:\n"
    "    movw $0, 70(%rdi)\n"
    "    movq 16(%rdi), %rbp\n"
    "    movq 24(%rdi), %rbx\n"
    "    movq 32(%rdi), %r12\n"
    "    movq 40(%rdi), %r13\n"
    "    movq 48(%rdi), %r14\n"
    "    movq 56(%rdi), %r15\n"
    "    ldmxcsr 64(%rdi)\n"
    "    fldcw 68(%rdi)\n"
    "    movq %rdx, %rax\n"
    "    movq 8(%rdi), %rsp\n"
    "    jmpq *0(%rdi)\n"
    "    .cfi_endproc\n"
    ".size effstack_ctx_jump, .-effstack_ctx_jump\n"

    /* First code run on a fresh stack: rbx = entry, r12 = argument. */
    ".p2align 4\n"
    ".globl effstack_ctx_trampoline\n"
    ".hidden effstack_ctx_trampoline\n"
    ".type effstack_ctx_trampoline,@function\n"
    "effstack_ctx_trampoline:\n"
    "    .cfi_startproc\n"
    "    .cfi_undefined rip\n"
    "    xorl %ebp, %ebp\n"
    "    movq %r12, %rdi\n"
    "    callq *%rbx\n"
    "    movq %rax, %rdi\n"
    "    callq effstack_ctx_entry_returned\n"
    "    ud2\n"
    "    .cfi_endproc\n"
    ".size effstack_ctx_trampoline, .-effstack_ctx_trampoline\n"

    /* void *effstack_call_on_stack(fn, arg, sp) */
    ".p2align 4\n"
    ".globl effstack_call_on_stack\n"
    ".hidden effstack_call_on_stack\n"
    ".type effstack_call_on_stack,@function\n"
    "effstack_call_on_stack:\n"
    "    .cfi_startproc\n"
    "    pushq %rbp\n"
    "    .cfi_def_cfa_offset 16\n"
    "    .cfi_offset rbp, -16\n"
    "    movq %rsp, %rbp\n"
    "    .cfi_def_cfa_register rbp\n"
    "    movq %rdx, %rsp\n"
    "    movq %rdi, %rax\n"
    "    movq %rsi, %rdi\n"
    "    callq *%rax\n"
    "    movq %rbp, %rsp\n"
    "    popq %rbp\n"
    "    .cfi_def_cfa rsp, 8\n"
    "    ret\n"
    "    .cfi_endproc\n"
    ".size effstack_call_on_stack, .-effstack_call_on_stack\n"

    ".p2align 4\n"
    ".globl effstack_current_sp\n"
    ".hidden effstack_current_sp\n"
    ".type effstack_current_sp,@function\n"
    "effstack_current_sp:\n"
    "    leaq 8(%rsp), %rax\n"
    "    ret\n"
    ".size effstack_current_sp, .-effstack_current_sp\n"

    /*
     * uint64_t effstack_salt_probe(save, restore, salt)
     * Loads values derived from salt into every callee-saved register and
     * the MXCSR rounding field, switches away, and once resumed reports a
     * bitmask of registers whose value no longer matches.
     */
    ".p2align 4\n"
    ".globl effstack_salt_probe\n"
    ".hidden effstack_salt_probe\n"
    ".type effstack_salt_probe,@function\n"
    "effstack_salt_probe:\n"
    "    .cfi_startproc\n"
    "    pushq %rbp\n"
    "    pushq %rbx\n"
    "    pushq %r12\n"
    "    pushq %r13\n"
    "    pushq %r14\n"
    "    pushq %r15\n"
    "    subq $24, %rsp\n"
    "    .cfi_def_cfa_offset 80\n"
    "    movq %rdx, 0(%rsp)\n"
    "    stmxcsr 8(%rsp)\n"
    "    movq %rdx, %rbx\n"
    "    movq %rdx, %rbp\n"
    "    rolq $8, %rbp\n"
    "    movq %rdx, %r12\n"
    "    rolq $16, %r12\n"
    "    movq %rdx, %r13\n"
    "    rolq $24, %r13\n"
    "    movq %rdx, %r14\n"
    "    rolq $32, %r14\n"
    "    movq %rdx, %r15\n"
    "    rolq $40, %r15\n"
    "    movl 8(%rsp), %eax\n"
    "    andl $0xFFFF9FFF, %eax\n"
    "    movl %edx, %ecx\n"
    "    andl $3, %ecx\n"
    "    shll $13, %ecx\n"
    "    orl %ecx, %eax\n"
    "    movl %eax, 16(%rsp)\n"
    "    ldmxcsr 16(%rsp)\n"
    "    callq effstack_ctx_switch\n"
    "    movq 0(%rsp), %rdx\n"
    "    xorl %eax, %eax\n"
    "    cmpq %rdx, %rbx\n"
    "    je 1f\n"
    "    orq $1, %rax\n"
    "1:  movq %rdx, %rcx\n"
    "    rolq $8, %rcx\n"
    "    cmpq %rcx, %rbp\n"
    "    je 2f\n"
    "    orq $2, %rax\n"
    "2:  movq %rdx, %rcx\n"
    "    rolq $16, %rcx\n"
    "    cmpq %rcx, %r12\n"
    "    je 3f\n"
    "    orq $4, %rax\n"
    "3:  movq %rdx, %rcx\n"
    "    rolq $24, %rcx\n"
    "    cmpq %rcx, %r13\n"
    "    je 4f\n"
    "    orq $8, %rax\n"
    "4:  movq %rdx, %rcx\n"
    "    rolq $32, %rcx\n"
    "    cmpq %rcx, %r14\n"
    "    je 5f\n"
    "    orq $16, %rax\n"
    "5:  movq %rdx, %rcx\n"
    "    rolq $40, %rcx\n"
    "    cmpq %rcx, %r15\n"
    "    je 6f\n"
    "    orq $32, %rax\n"
    "6:  stmxcsr 16(%rsp)\n"
    "    movl 16(%rsp), %ecx\n"
    "    andl $0x6000, %ecx\n"
    "    movl %edx, %r8d\n"
    "    andl $3, %r8d\n"
    "    shll $13, %r8d\n"
    "    cmpl %r8d, %ecx\n"
    "    je 7f\n"
    "    orq $64, %rax\n"
    "7:  ldmxcsr 8(%rsp)\n"
    "    addq $24, %rsp\n"
    "    popq %r15\n"
    "    popq %r14\n"
    "    popq %r13\n"
    "    popq %r12\n"
    "    popq %rbx\n"
    "    popq %rbp\n"
    "    .cfi_def_cfa_offset 8\n"
    "    ret\n"
    "    .cfi_endproc\n"
    ".size effstack_salt_probe, .-effstack_salt_probe\n");

extern char effstack_ctx_trampoline[];

int eff_ctx_bootstrap(eff_ctx_t *ctx, void *(*entry)(void *), void *arg, void *initial_sp)
{
    if (eff_debug && ((uintptr_t)initial_sp & 0xF) != 0)
        return EFF_ERR_ALIGN;
    memset(ctx, 0, sizeof(*ctx));
    ctx->rip = (void *)effstack_ctx_trampoline;
    ctx->rsp = initial_sp;
    ctx->rbx = (uint64_t)(uintptr_t)entry;
    ctx->r12 = (uint64_t)(uintptr_t)arg;
    uint32_t mxcsr;
    uint16_t fpucw;
    __asm__ volatile("stmxcsr %0" : "=m"(mxcsr));
    __asm__ volatile("fnstcw %0" : "=m"(fpucw));
    ctx->mxcsr = mxcsr;
    ctx->fpucw = fpucw;
    ctx->live = 1;
    return EFF_OK;
}

int eff_ctx_switch_checked(eff_ctx_t *save, eff_ctx_t *restore, uint64_t payload, uint64_t *out)
{
    if (!restore->live)
        return EFF_ERR_STALE;
    if (((uintptr_t)restore->rsp & 0xF) != 0)
        return EFF_ERR_ALIGN;
    uint64_t r = effstack_ctx_switch(save, restore, payload);
    if (out)
        *out = r;
    return EFF_OK;
}
