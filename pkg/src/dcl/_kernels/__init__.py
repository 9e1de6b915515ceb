"""Convolution kernel backend: compiled Cython when built, numpy otherwise.

``im2col`` / ``col2im`` are rebound by :func:`set_backend`; the engine looks
them up through this module on every call, so benchmarks and parity tests can
switch backends at runtime.
"""

from . import _convnp

_BACKENDS = {"numpy": (_convnp.im2col, _convnp.col2im)}

try:
    from . import _convcy

    _BACKENDS["cython"] = (_convcy.im2col, _convcy.col2im)
    BACKEND = "cython"
except ImportError:
    BACKEND = "numpy"

im2col, col2im = _BACKENDS[BACKEND]


def available_backends():
    return tuple(sorted(_BACKENDS))


def set_backend(name):
    """Select a kernel backend by name; returns the previously active one."""
    global im2col, col2im, BACKEND
    if name not in _BACKENDS:
        raise ValueError(f"unknown kernel backend {name!r}; have {available_backends()}")
    previous = BACKEND
    im2col, col2im = _BACKENDS[name]
    BACKEND = name
    return previous
