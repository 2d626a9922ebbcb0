"""Backend selection for the hot kernels.

The compiled extension ``amlab._ckernels`` is used when it was built; the
numpy implementation in ``amlab._pykernels`` is the fallback.  Set
``AMLAB_PURE_PYTHON=1`` to force the fallback.
"""
import os

from amlab import _pykernels
from amlab._pykernels import PSI_ADDITIVE, PSI_ANGULAR, PSI_IDENTITY  # noqa: F401

_impl = _pykernels
BACKEND = "python"

if os.environ.get("AMLAB_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from amlab import _ckernels as _impl  # type: ignore[no-redef]

        BACKEND = "cython"
    except ImportError:
        _impl = _pykernels


def backend_module(name=None):
    """Return the kernel module for ``name`` ("python" / "cython"), default active."""
    if name is None:
        return _impl
    if name == "python":
        return _pykernels
    if name == "cython":
        from amlab import _ckernels

        return _ckernels
    raise ValueError(f"unknown kernel backend {name!r}")


def xoshiro_next(state):
    return _impl.xoshiro_next(state)


def fill_normals(state, out, mean, stddev):
    _impl.fill_normals(state, out, mean, stddev)


def margin_softmax_rows(cos, labels, scale, psi_kind, m_add=0.0, m_mult=1, lam=0.0):
    return _impl.margin_softmax_rows(cos, labels, scale, int(psi_kind), float(m_add), int(m_mult), float(lam))


def count_greater(scores, mate):
    return _impl.count_greater(scores, mate)
