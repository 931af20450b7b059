"""Optional numba acceleration.

Set ``MASKED_NTK_DISABLE_NUMBA=1`` to run every kernel as plain Python/numpy.
The same kernel source is used on both paths, so results agree to rounding.
"""
import os

_DISABLED = os.environ.get("MASKED_NTK_DISABLE_NUMBA", "0").strip().lower() in ("1", "true", "yes")

try:
    if _DISABLED:
        raise ImportError
    import numba

    NUMBA_ENABLED = True
    prange = numba.prange
    # the system TBB is too old for numba; pick a layer that needs nothing extra
    numba.config.THREADING_LAYER = os.environ.get("NUMBA_THREADING_LAYER", "workqueue")

    def njit(fn=None, **kwargs):
        opts = {"cache": True, "nogil": True}
        opts.update(kwargs)
        if fn is None:
            return lambda f: numba.njit(**opts)(f)
        return numba.njit(**opts)(fn)

except ImportError:
    NUMBA_ENABLED = False
    prange = range

    def njit(fn=None, **kwargs):
        if fn is None:
            return lambda f: f
        return fn


def thread_cap():
    """Worker cap from ``MASKED_NTK_THREADS`` (defaults to the core count)."""
    raw = os.environ.get("MASKED_NTK_THREADS", "")
    try:
        cap = int(raw)
    except ValueError:
        cap = os.cpu_count() or 1
    return max(1, cap)


def apply_thread_cap():
    if NUMBA_ENABLED:
        numba.set_num_threads(min(thread_cap(), numba.config.NUMBA_NUM_THREADS))


apply_thread_cap()
