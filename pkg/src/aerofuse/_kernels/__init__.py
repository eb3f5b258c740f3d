"""Hot-kernel backend selection.

Two interchangeable implementations of the per-pixel IDW fill and the
per-voxel TSDF update live here: a Cython extension (``_core``) and a
numpy fallback (``pyimpl``).  The extension is preferred when it built;
``AEROFUSE_KERNELS=python|compiled|auto`` overrides the choice.  With
``compiled`` an ImportError propagates instead of silently falling back.

``benchmarks/bench_kernels.py`` in the repository compares the two.
"""

from __future__ import annotations

import os

_choice = os.environ.get("AEROFUSE_KERNELS", "auto").lower()
if _choice not in ("auto", "compiled", "python"):
    raise ImportError(f"AEROFUSE_KERNELS must be auto, compiled or python, got {_choice!r}")

if _choice == "python":
    from . import pyimpl as _impl

    BACKEND = "python"
elif _choice == "compiled":
    from . import _core as _impl  # type: ignore[attr-defined]

    BACKEND = "compiled"
else:
    try:
        from . import _core as _impl  # type: ignore[attr-defined]

        BACKEND = "compiled"
    except ImportError:
        from . import pyimpl as _impl

        BACKEND = "python"

idw_fill = _impl.idw_fill
tsdf_integrate = _impl.tsdf_integrate


def backend_name() -> str:
    """Which kernel backend this process is using."""
    return BACKEND
