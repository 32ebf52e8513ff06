"""Single-threaded BLAS scoping shared by the solvers.

Solver results must be reproducible bit-for-bit regardless of the host's
BLAS thread configuration, so every solve runs under a limits(1) scope.
The controller is built once and cached: constructing a ThreadpoolController
re-scans the process's loaded libraries, which costs milliseconds and would
dominate small solves. numpy/scipy load their BLAS at import time, so a
snapshot taken on first use stays valid; forked workers inherit the cache.
"""

from __future__ import annotations

from threadpoolctl import ThreadpoolController

_controller: ThreadpoolController | None = None


def single_thread_blas():
    """Context manager pinning all BLAS pools to one thread."""
    global _controller
    if _controller is None:
        _controller = ThreadpoolController()
    return _controller.limit(limits=1)
