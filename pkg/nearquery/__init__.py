"""
nearquery - offset-adjusted mask-transformer segmentation at desk scale
"""
import os


def _apply_thread_cap() -> None:
    """Cap BLAS/OpenMP pools from NEARQUERY_THREADS before numpy is imported.

    0 (the default) is the sequential reference mode.
    """
    raw = os.environ.get("NEARQUERY_THREADS", "0").strip() or "0"
    try:
        threads = max(int(raw), 1)
    except ValueError:
        threads = 1
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ.setdefault(var, str(threads))


_apply_thread_cap()

__version__ = "1.0.0"
