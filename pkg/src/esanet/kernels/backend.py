"""Selects the compiled or the numpy implementation of the hot loops.

The compiled extension is used when it imports cleanly, unless the
``ESANET_PURE_PYTHON`` environment variable is set to a non-empty value.
"""
import os

from . import _numpy_impl

python_impl = _numpy_impl

try:
    from . import _ckernels as compiled_impl
except ImportError:  # extension not built
    compiled_impl = None

if compiled_impl is not None and not os.environ.get("ESANET_PURE_PYTHON"):
    impl = compiled_impl
    NAME = "compiled"
else:
    impl = python_impl
    NAME = "python"


def use(name: str) -> None:
    """Switch backend at runtime (``"compiled"`` or ``"python"``)."""
    global impl, NAME
    if name == "compiled":
        if compiled_impl is None:
            raise RuntimeError("compiled kernels are not built")
        impl = compiled_impl
    elif name == "python":
        impl = python_impl
    else:
        raise ValueError(f"unknown backend {name!r}")
    NAME = name
