"""Numba switch for the hot kernels.

Every accelerated kernel in the package has a pure-numpy twin.  The compiled
path is used when numba imports cleanly and ``SATSTEREO_DISABLE_NUMBA`` is
unset (or ``0``); set it to ``1`` to force the numpy path, e.g. for
debugging or on platforms without an LLVM build.
"""
import os

try:
    import numba
    HAS_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None
    HAS_NUMBA = False


def numba_enabled():
    """True when the compiled kernels should be dispatched to."""
    flag = os.environ.get("SATSTEREO_DISABLE_NUMBA", "0").strip().lower()
    return HAS_NUMBA and flag in ("", "0", "false", "no")


def njit(*args, **kwargs):
    """``numba.njit`` when available, identity decorator otherwise."""
    kwargs.setdefault("cache", True)
    if not HAS_NUMBA:
        if len(args) == 1 and callable(args[0]):
            return args[0]
        return lambda f: f
    return numba.njit(*args, **kwargs)


def dispatch(jit_impl, numpy_impl):
    """Return a callable picking the kernel at call time from the env flag."""

    def run(*args, **kwargs):
        if numba_enabled():
            return jit_impl(*args, **kwargs)
        return numpy_impl(*args, **kwargs)

    run.jit = jit_impl
    run.numpy = numpy_impl
    run.__name__ = numpy_impl.__name__
    run.__doc__ = numpy_impl.__doc__
    return run
