import os


def n_threads() -> int:
    """Worker cap from ``IVLAB_THREADS`` (default 1, i.e. serial)."""
    try:
        return max(1, int(os.environ.get("IVLAB_THREADS", "1")))
    except ValueError:
        return 1
