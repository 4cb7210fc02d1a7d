"""Kernel dispatch: compiled extension when importable, numpy otherwise.

Set ``BULKCREDAL_PURE=1`` to force the numpy path.
"""
import os

from . import _kernels_py

BACKEND = "python"
_impl = _kernels_py
if os.environ.get("BULKCREDAL_PURE") != "1":
    try:
        from . import _kernels as _impl  # type: ignore[no-redef]

        BACKEND = "cython"
    except ImportError:
        _impl = _kernels_py

newsvendor_losses = _impl.newsvendor_losses
newsvendor_grad = _impl.newsvendor_grad
lad_grad = _impl.lad_grad
kl_dual_inner = _impl.kl_dual_inner

__all__ = ["BACKEND", "newsvendor_losses", "newsvendor_grad", "lad_grad", "kl_dual_inner"]
