"""Row-wise kernel backend, chosen once at import.

The compiled ``_ckernels`` extension is used when it was built; otherwise the
numpy versions in ``_kernels_py`` are used. Set ``VMTLAB_KERNELS=python`` to
force the fallback (used by the benchmark and by the cross-backend tests).
"""
import os

import numpy as np

from . import _kernels_py

LOG_FLOOR = _kernels_py.LOG_FLOOR



def _load_compiled():
    if os.environ.get("VMTLAB_KERNELS", "").lower() == "python":
        return None
    try:
        from . import _ckernels
    except ImportError:
        return None
    return _ckernels


_compiled = _load_compiled()
BACKEND = "cython" if _compiled is not None else "python"


def _contig(a):
    return np.ascontiguousarray(a, dtype=np.float64)


if _compiled is not None:

    def softmax_rows(z):
        return _compiled.softmax_rows(_contig(z))

    def softmax_rows_vjp(s, g):
        return _compiled.softmax_rows_vjp(_contig(s), _contig(g))

    def kl_rows(p, q):
        return _compiled.kl_rows(_contig(p), _contig(q))

    def kl_rows_vjp(p, q, g):
        return _compiled.kl_rows_vjp(_contig(p), _contig(q), _contig(g))

    def entropy_rows(p):
        return _compiled.entropy_rows(_contig(p))

    def entropy_rows_vjp(p, g):
        return _compiled.entropy_rows_vjp(_contig(p), _contig(g))

    def bias_act_(z, b, relu):
        _compiled.bias_act_(z, _contig(b), bool(relu))
        return z

    def bias_act_vjp(out, g, relu):
        return _compiled.bias_act_vjp(_contig(out), _contig(g), bool(relu))

else:
    softmax_rows = _kernels_py.softmax_rows
    softmax_rows_vjp = _kernels_py.softmax_rows_vjp
    kl_rows = _kernels_py.kl_rows
    kl_rows_vjp = _kernels_py.kl_rows_vjp
    entropy_rows = _kernels_py.entropy_rows
    entropy_rows_vjp = _kernels_py.entropy_rows_vjp
    bias_act_ = _kernels_py.bias_act_
    bias_act_vjp = _kernels_py.bias_act_vjp


def backends():
    """Map backend name -> module of kernels, for cross-checking and benchmarks."""
    out = {"python": _kernels_py}
    if _compiled is not None:
        out["cython"] = _compiled
    else:
        try:
            from . import _ckernels

            out["cython"] = _ckernels
        except ImportError:
            pass
    return out
