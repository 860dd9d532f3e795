"""Optional numba import.

Kernels are written in the subset numba compiles in nopython mode. When numba
is not installed they run as plain Python with the same arithmetic.
"""

try:
    import numba
    from numba import njit

    HAS_NUMBA = True
except ImportError:
    numba = None
    HAS_NUMBA = False

    def njit(*args, **kwargs):
        # bare @njit or @njit(cache=True, ...)
        if len(args) == 1 and callable(args[0]) and not kwargs:
            return args[0]

        def wrap(fn):
            return fn

        return wrap


def set_worker_count(count: int) -> int:
    """Pin numba's thread pool; returns the count actually in effect."""
    if HAS_NUMBA:
        try:
            numba.set_num_threads(max(1, min(count, numba.config.NUMBA_NUM_THREADS)))
            return numba.get_num_threads()
        except Exception:
            return 1
    return 1
