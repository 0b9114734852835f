"""Backend selection for the voxel-walk kernel.

The compiled extension is used when it imports; otherwise the numpy fallback.
``set_backend`` switches explicitly (tests and the benchmark exercise both).
"""
from . import _pykernels

try:
    from . import _ckernels
except ImportError:  # extension not built
    _ckernels = None

_BACKENDS = {"python": _pykernels}
if _ckernels is not None:
    _BACKENDS["cython"] = _ckernels

_active = _BACKENDS.get("cython", _pykernels)


def available_backends():
    return sorted(_BACKENDS)


def backend():
    return "cython" if _active is _ckernels and _ckernels is not None else "python"


def set_backend(name):
    global _active
    try:
        _active = _BACKENDS[name]
    except KeyError:
        raise ValueError(f"backend {name!r} unavailable; have {available_backends()}") from None


def band_walk(points, origins, voxel_size, truncation):
    return _active.band_walk(points, origins, voxel_size, truncation)
