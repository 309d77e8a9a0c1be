"""Hot-kernel dispatch: the compiled extension when importable, numpy otherwise.

Set ``PRVRLAB_KERNELS=python`` to force the numpy fallback.
"""

import os

from . import _kernels_py

python = _kernels_py

if os.environ.get("PRVRLAB_KERNELS", "").lower() == "python":
    compiled = None
else:
    try:
        from . import _kernels_c as compiled
    except ImportError:
        compiled = None

_impl = compiled if compiled is not None else _kernels_py
BACKEND = "cython" if compiled is not None else "python"

optome_merge = _impl.optome_merge
pair_match = _impl.pair_match
segment_max = _impl.segment_max
count_above = _impl.count_above
