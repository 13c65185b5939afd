"""Benchmark workloads from the active backend (compiled or Python)."""
from ._backend import NATIVE, impl

if NATIVE:
    kernel_switch = impl.kernel_switch
    kernel_complex = impl.kernel_complex
    kernel_expand = impl.kernel_expand
    kernel_mt = impl.kernel_mt
    kernel_ad = impl.kernel_ad
    run_async = impl.run_async
    demo_read_file = impl.demo_read_file
else:
    from ._pure.kernels import (  # noqa: F401
        demo_read_file, kernel_ad, kernel_complex, kernel_expand, kernel_mt, kernel_switch, run_async,
    )

__all__ = ["kernel_switch", "kernel_complex", "kernel_expand", "kernel_mt", "kernel_ad", "run_async",
           "demo_read_file"]
