"""Federated GCAE training, latent SMOTE personalisation and HAR data tools."""
import ctypes
import sys

if sys.platform.startswith("linux"):
    # keep large temporaries on the heap: repeated mmap/page-fault of
    # per-step activations otherwise dominates the small-batch step time
    try:
        _libc = ctypes.CDLL("libc.so.6")
        _libc.mallopt(-3, 256 << 20)  # M_MMAP_THRESHOLD
        _libc.mallopt(-1, 1 << 30)  # M_TRIM_THRESHOLD
    except OSError:
        pass

__version__ = "0.1.0"
