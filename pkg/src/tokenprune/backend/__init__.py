"""Kernel backend selection.

Two interchangeable implementations of the fused numerical kernels exist:

* ``reference`` — vectorized numpy, always available.
* ``_fused``    — Cython extension compiled at install time.

The active backend is chosen once at import: the compiled extension when
importable, otherwise the reference module. The environment variable
``TOKENPRUNE_KERNELS`` (``python`` / ``cython`` / ``auto``) overrides the
choice, and :func:`use_backend` switches it at runtime (used by the
cross-backend tests and the benchmark).
"""

import os

from . import reference

_impls = {"python": reference}

try:
    from . import _fused

    _impls["cython"] = _fused
except ImportError:
    _fused = None

impl = reference


def available_backends():
    return sorted(_impls)


def use_backend(name: str):
    """Select the kernel implementation by name ('python' or 'cython')."""
    global impl
    if name not in _impls:
        raise ValueError(f"unknown backend {name!r}; available: {available_backends()}")
    impl = _impls[name]
    return impl


def active_backend() -> str:
    return impl.NAME


def _init_from_env():
    choice = os.environ.get("TOKENPRUNE_KERNELS", "auto").lower()
    if choice == "auto":
        choice = "cython" if "cython" in _impls else "python"
    use_backend(choice)


_init_from_env()
