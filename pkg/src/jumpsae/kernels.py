"""Kernel backend selection.

The compiled extension is used when it was built and ``JUMPSAE_PURE`` is not
set; otherwise the numpy implementations are used. Both expose the same three
functions with identical semantics.
"""

import os

from . import _kernels_py

BACKEND = "python"
_impl = _kernels_py

if not os.environ.get("JUMPSAE_PURE"):
    try:
        from . import _ext as _impl  # noqa: F811

        BACKEND = "compiled"
    except ImportError:
        pass

jumprelu_forward = _impl.jumprelu_forward
jumprelu_backward = _impl.jumprelu_backward
bf16_round_bits = _impl.bf16_round_bits
