"""Backend selection for the element kernels.

The compiled extension is used when it was built; set ``PUMROM_KERNELS=python``
to force the numpy fallback (``PUMROM_KERNELS=compiled`` makes a missing
extension an error instead of a silent fallback).
"""
import os

import numpy as np

from . import _pykernels

_choice = os.environ.get("PUMROM_KERNELS", "auto").lower()

_compiled = None
if _choice != "python":
    try:
        from . import _ckernels as _compiled
    except ImportError:
        if _choice == "compiled":
            raise

BACKEND = "compiled" if _compiled is not None else "python"


def available_backends():
    return ["compiled", "python"] if _compiled is not None else ["python"]


def get_backend(name=None):
    name = name or BACKEND
    if name == "compiled":
        if _compiled is None:
            raise ImportError("compiled kernels were not built")
        return _compiled
    if name == "python":
        return _pykernels
    raise ValueError(f"unknown kernel backend {name!r}")


def kappa(u, mu1, mu2, backend=None):
    """Vectorized permeability and its derivative with respect to ``u``."""
    mod = get_backend(backend)
    u, mu1, mu2 = np.broadcast_arrays(np.asarray(u, float), mu1, mu2)
    shape = u.shape
    val, dval = mod.kappa(np.ascontiguousarray(u.ravel(), dtype=float),
                          np.ascontiguousarray(mu1.ravel(), dtype=float),
                          np.ascontiguousarray(mu2.ravel(), dtype=float))
    return np.reshape(val, shape), np.reshape(dval, shape)


def element_kernel(ue, ref, hx, hy, coeffs, want_jac=True, backend=None):
    """Element residual vectors and (optionally) Jacobian matrices.

    ``ref`` is a :class:`pumrom.fem.ReferenceElement`; ``coeffs`` a
    :class:`pumrom.models.Coefficients` with arrays matching the element count.
    """
    mod = get_backend(backend)
    c = coeffs
    return mod.element_kernel(
        np.ascontiguousarray(ue, dtype=float), ref.N, ref.Dxi, ref.Deta, ref.wq,
        hx, hy, bool(c.nonlinear), c.mu1, c.mu2, c.diffusion,
        c.advection_x, c.advection_y, c.reaction, c.source, bool(want_jac))
