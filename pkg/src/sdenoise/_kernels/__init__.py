"""Kernel backend selection.

The hot per-step kernels exist twice: a Cython extension (``_core``) and a
pure-numpy fallback (``_numpy``). The compiled core is preferred when the
extension built; ``SDENOISE_KERNELS=numpy|compiled|auto`` overrides, and
:func:`set_backend` switches at runtime (used by the backend benchmark and
by tests). Consumers access kernels as module attributes so a switch takes
effect everywhere::

    from sdenoise import _kernels as K
    K.em_update(...)

Repeated runs on one backend are bit-identical; across backends results
agree only to float rounding (BLAS vs numpy reductions), which is why the
active backend is recorded in every resolved run config.
"""

import os

from . import _numpy

ACT_TANH = _numpy.ACT_TANH
ACT_SILU = _numpy.ACT_SILU

_KERNEL_FUNCS = (
    "mlp_forward",
    "mlp_input_vjp",
    "mlp_param_grads",
    "em_update",
    "tweedie_combine",
    "diag_gaussian_score",
)

try:
    from . import _core
except ImportError:
    _core = None

_backend_name = None


def available_backends():
    """Names of importable backends, preferred first."""
    return ("compiled", "numpy") if _core is not None else ("numpy",)


def backend_module(name):
    if name == "numpy":
        return _numpy
    if name == "compiled":
        if _core is None:
            raise RuntimeError("compiled kernel core is not available (extension not built)")
        return _core
    raise ValueError(f"unknown kernel backend {name!r}; expected 'compiled' or 'numpy'")


def set_backend(name):
    """Select the active kernel backend ('auto', 'compiled' or 'numpy')."""
    global _backend_name
    if name == "auto":
        name = "compiled" if _core is not None else "numpy"
    mod = backend_module(name)
    for fn in _KERNEL_FUNCS:
        globals()[fn] = getattr(mod, fn)
    _backend_name = name
    return name


def get_backend():
    """Name of the active backend."""
    return _backend_name


set_backend(os.environ.get("SDENOISE_KERNELS", "auto"))
