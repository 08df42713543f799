"""Loss kernels with analytic gradients.

The compiled extension is used when it was built; otherwise the numpy
implementation is loaded. Set ``TODCL_PURE_PYTHON=1`` to force the fallback.
"""

import os

from . import _pykernels as python_backend

compiled_backend = None
if os.environ.get("TODCL_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _ckernels as compiled_backend
    except ImportError:
        compiled_backend = None

_active = compiled_backend or python_backend
BACKEND = "cython" if compiled_backend is not None else "python"

contrastive = _active.contrastive
variant = _active.variant
token_nll = _active.token_nll

__all__ = ["BACKEND", "contrastive", "variant", "token_nll", "python_backend", "compiled_backend"]
