"""Backend selection for the training hot kernels.

The compiled extension is preferred when it imported cleanly; otherwise the
NumPy implementation is used. ``FOGSIM_BACKEND=python`` or
``FOGSIM_BACKEND=cython`` forces a specific backend (forcing the compiled one
raises if the extension is missing). Both backends are deterministic; results
agree to floating-point accumulation order.
"""

from __future__ import annotations

import os

from fogsim import _kernels_py

try:
    from fogsim import _kernels  # type: ignore[attr-defined]
except ImportError:
    _kernels = None

_BACKENDS = {"python": _kernels_py}
if _kernels is not None:
    _BACKENDS["cython"] = _kernels


def available_backends() -> list[str]:
    return sorted(_BACKENDS)


def get_backend(name: str):
    """Return the kernel module for an explicit backend name."""
    try:
        return _BACKENDS[name]
    except KeyError:
        raise ValueError(
            f"unknown or unavailable backend {name!r}; available: {available_backends()}"
        ) from None


def _select_default():
    forced = os.environ.get("FOGSIM_BACKEND", "").strip().lower()
    if forced:
        return get_backend(forced)
    return _BACKENDS.get("cython", _kernels_py)


_impl = _select_default()

BACKEND = _impl.BACKEND_NAME
softmax_loss_grad = _impl.softmax_loss_grad
gd_steps = _impl.gd_steps
eval_loss_correct = _impl.eval_loss_correct
