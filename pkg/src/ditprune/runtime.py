"""Process-level performance knobs."""

from __future__ import annotations

import ctypes
import sys

_M_TRIM_THRESHOLD = -1
_M_MMAP_THRESHOLD = -3


def tune_allocator(threshold: int = 1 << 30) -> bool:
    """Raise glibc's mmap/trim thresholds so large arrays reuse heap pages.

    The training loop allocates and frees many MB-sized arrays per step;
    without this, glibc serves them with mmap/munmap and page-fault costs
    dominate. Safe no-op on non-glibc platforms.
    """
    if not sys.platform.startswith("linux"):
        return False
    try:
        libc = ctypes.CDLL("libc.so.6")
        libc.mallopt(_M_MMAP_THRESHOLD, threshold)
        libc.mallopt(_M_TRIM_THRESHOLD, threshold)
        return True
    except OSError:
        return False
