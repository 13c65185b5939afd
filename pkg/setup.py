import platform

from setuptools import Extension, setup

ext_modules = []
if platform.machine() in ("x86_64", "AMD64") and platform.system() == "Linux":
    from Cython.Build import cythonize

    native = Extension(
        "effstack._native",
        [
            "src/effstack/_native.pyx",
            "src/effstack/_csrc/ctx_x86_64.c",
            "src/effstack/_csrc/runtime.c",
            "src/effstack/_csrc/stacks.c",
            "src/effstack/_csrc/workloads.c",
            "src/effstack/_csrc/harness.c",
        ],
        include_dirs=["src/effstack"],
        extra_compile_args=["-O2", "-std=gnu11", "-fvisibility=hidden", "-fno-omit-frame-pointer"],
        libraries=["pthread"],
        # the pure-Python backend takes over if this cannot be built
        optional=True,
    )
    ext_modules = cythonize([native], language_level=3)

setup(ext_modules=ext_modules)
