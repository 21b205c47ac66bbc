"""Selects the compiled kernels when available, otherwise the numpy ones.

Set GBPKIT_PURE_PYTHON=1 to force the numpy implementation.
"""
import os

from . import _kernels_py

BACKEND = "python"
_impl = _kernels_py
if os.environ.get("GBPKIT_PURE_PYTHON") != "1":
    try:
        from . import _kernels as _impl  # noqa: F811

        BACKEND = "compiled"
    except ImportError:
        _impl = _kernels_py

prox = _impl.prox
regularizer = _impl.regularizer
residual = _impl.residual
fista_batch = _impl.fista_batch


def get_backend(name=None):
    """Return the kernel module by name ('compiled' or 'python'); default is the active one."""
    if name is None:
        return _impl
    if name == "python":
        return _kernels_py
    if name == "compiled":
        from . import _kernels

        return _kernels
    raise ValueError(f"unknown backend {name!r}")
