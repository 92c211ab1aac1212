"""Kernel backend selection.

The compiled extension is used when it was built; otherwise (or when
``PRUNESIM_PURE_PYTHON=1`` is set) the numpy implementations are used.  Both
expose the same functions with the same results.
"""

import os

from . import _pykernels

BACKEND = "python"
_impl = _pykernels

if not os.environ.get("PRUNESIM_PURE_PYTHON"):
    try:
        from . import _ckernels as _impl  # type: ignore[no-redef]

        BACKEND = "cython"
    except ImportError:  # extension not built
        _impl = _pykernels

conv_nodrop = _impl.conv_nodrop
conv_drop = _impl.conv_drop
chance_fast = _impl.chance_fast
chance_matrix = _impl.chance_matrix
compact = _impl.compact
list_schedule = _impl.list_schedule
insertion_completions = _impl.insertion_completions

__all__ = [
    "BACKEND",
    "chance_fast",
    "chance_matrix",
    "compact",
    "conv_drop",
    "conv_nodrop",
    "insertion_completions",
    "list_schedule",
]
