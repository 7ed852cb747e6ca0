"""Hot loops behind the tensor engine.

The compiled core (``_ckernels``, Cython) is preferred when it was built; the
numpy implementation in ``_reference`` is the fallback. ``MSGAN_KERNELS`` may
be set to ``numpy`` or ``cython`` to force one.
"""
import os

from . import _reference

try:
    from . import _ckernels
except ImportError:  # extension not built
    _ckernels = None

_BACKENDS = {"numpy": _reference}
if _ckernels is not None:
    _BACKENDS["cython"] = _ckernels

_active = None


def available():
    return sorted(_BACKENDS)


def use(name):
    """Select the kernel backend by name (``numpy`` or ``cython``)."""
    global _active
    if name not in _BACKENDS:
        raise ValueError(f"kernel backend {name!r} unavailable; have {available()}")
    _active = name


def backend():
    return _active


def get():
    return _BACKENDS[_active]


_requested = os.environ.get("MSGAN_KERNELS", "auto").lower()
if _requested == "auto":
    use("cython" if _ckernels is not None else "numpy")
else:
    use(_requested)
