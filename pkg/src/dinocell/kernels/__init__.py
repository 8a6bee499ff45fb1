"""Hot numeric kernels with two interchangeable backends.

The backend is chosen once at import from ``DINOCELL_BACKEND`` (``numba`` or
``numpy``; default ``numba`` when importable) and can be switched at runtime
with :func:`set_backend`. Callers always go through the module-level names
below, never through ``_numba``/``_numpy`` directly.
"""

import logging
import os

from . import _numpy

log = logging.getLogger(__name__)

KERNELS = (
    "softmax_rows",
    "softmax_rows_backward",
    "layernorm_rows",
    "layernorm_rows_backward",
    "gelu",
    "gelu_backward",
    "resize_bilinear",
    "cosine_matrix",
    "rank_neighbors",
    "soft_vote",
)

# exp/tanh-bound kernels: numba only vectorizes these with SVML; without it
# numpy's SIMD ufuncs are several times faster, so the numba backend keeps
# the numpy versions for them.
TRANSCENDENTAL = ("softmax_rows", "gelu", "gelu_backward")

_active = None


def available_backends():
    out = ["numpy"]
    try:
        import numba  # noqa: F401
    except ImportError:
        return out
    return out + ["numba"]


def _svml():
    import numba

    return bool(getattr(numba.config, "USING_SVML", False))


def set_backend(name, strict=False):
    """Rebind every kernel name in this module to the chosen backend.

    ``strict=True`` uses the numba version of every kernel even where the
    numpy one is known to be faster (benchmarks, parity tests).
    """
    global _active
    if name == "numba":
        from . import _numba as impl

        keep_numpy = () if strict or _svml() else TRANSCENDENTAL
    elif name == "numpy":
        impl = _numpy
        keep_numpy = ()
    else:
        raise ValueError(f"unknown kernel backend {name!r}")
    g = globals()
    for k in KERNELS:
        g[k] = getattr(_numpy if k in keep_numpy else impl, k)
    _active = name
    return name


def implementation(kernel):
    """Module that currently provides ``kernel`` (for logs and benchmarks)."""
    return globals()[kernel].__module__.rsplit(".", 1)[-1].lstrip("_")


def backend():
    return _active


def _initial():
    want = os.environ.get("DINOCELL_BACKEND", "").strip().lower()
    if want in ("numpy", "numba"):
        return want
    if want:
        log.warning("ignoring DINOCELL_BACKEND=%r", want)
    return "numba" if "numba" in available_backends() else "numpy"


set_backend(_initial())
