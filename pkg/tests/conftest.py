import os
import subprocess
import sys

import pytest

from effstack import STRATEGIES
from effstack._backend import native_module

native = native_module()
needs_native = pytest.mark.skipif(native is None, reason="compiled core not built")


@pytest.fixture(params=STRATEGIES)
def strategy(request):
    return request.param


def run_python(code, env=None, timeout=120):
    """Run code in a fresh interpreter; returns the CompletedProcess."""
    full_env = dict(os.environ)
    full_env.update(env or {})
    return subprocess.run([sys.executable, "-c", code], capture_output=True, text=True, env=full_env,
                          timeout=timeout, check=False)
