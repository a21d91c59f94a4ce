"""Select the compiled kernel module when available, else the pure-Python one."""
import os

from sifa import _pykernels

python_kernels = _pykernels

if os.environ.get("SIFA_PURE_PYTHON", "") not in ("", "0"):
    kernels = _pykernels
    compiled_kernels = None
else:
    try:
        from sifa import _ckernels as compiled_kernels
    except ImportError:  # extension not built
        compiled_kernels = None
    kernels = compiled_kernels if compiled_kernels is not None else _pykernels

COMPILED = kernels is not _pykernels
