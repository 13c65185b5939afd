"""Stackful-coroutine effect handlers over four stack strategies.

The compiled core is used when it is importable; otherwise a pure-Python
backend is selected (``EFFSTACK_BACKEND=python`` forces it).
"""
from ._backend import NAME as BACKEND
from .effects import (
    ALL,
    DEFAULT_HANDLER,
    HANDLES,
    RETURN,
    YIELD,
    Coroutine,
    CoroutineKilled,
    CoroutineState,
    CoroutineStateError,
    EffectDecl,
    EffectError,
    EffectRegistry,
    Request,
    StalePayloadError,
    UnhandledEffectError,
    coroutine_delete,
    coroutine_new,
    coroutine_new_sized,
    current_coroutine,
    define_effect,
    effect_set,
    exit_,
    locate_handler,
    perform,
    resume,
    resume_handling_all,
    set_default_handler,
    stack_call,
    throw,
    yield_,
    yield_to,
)
from .stacks import (
    STRATEGIES,
    ShadowStack,
    StackOverflowError,
    default_frame_size,
    default_strategy,
    new_frame,
    set_default_strategy,
)

__version__ = "0.1.0"

__all__ = [
    "ALL", "BACKEND", "DEFAULT_HANDLER", "HANDLES", "RETURN", "STRATEGIES", "YIELD",
    "Coroutine", "CoroutineKilled", "CoroutineState", "CoroutineStateError", "EffectDecl", "EffectError",
    "EffectRegistry", "Request", "ShadowStack", "StackOverflowError", "StalePayloadError",
    "UnhandledEffectError", "coroutine_delete", "coroutine_new", "coroutine_new_sized", "current_coroutine",
    "default_frame_size", "default_strategy", "define_effect", "effect_set", "exit_", "locate_handler",
    "new_frame", "perform", "resume", "resume_handling_all", "set_default_handler", "set_default_strategy",
    "stack_call", "throw", "yield_", "yield_to",
]
