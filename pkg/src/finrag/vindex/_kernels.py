"""Pick the HNSW kernel backend once, at import time."""

import logging
import os

logger = logging.getLogger(__name__)

if os.environ.get("FINRAG_PURE_PYTHON") == "1":
    from . import _hnsw_py as kernels

    BACKEND = "python"
else:
    try:
        from . import _hnsw_ext as kernels

        BACKEND = "cython"
    except ImportError:  # extension not built
        from . import _hnsw_py as kernels

        BACKEND = "python"
        logger.info("compiled HNSW kernels unavailable, using pure-Python fallback")

__all__ = ["BACKEND", "kernels"]
