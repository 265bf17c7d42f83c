"""Backend selection for the hot loops.

The compiled extension is used when it imports; setting the environment
variable GAUGELAB_BACKEND=python forces the numpy implementation.
"""
import os

from . import _kernels_py

BACKEND = "python"
_impl = _kernels_py

if os.environ.get("GAUGELAB_BACKEND", "").lower() != "python":
    try:
        from . import _kernels as _compiled  # type: ignore[attr-defined]
    except ImportError:  # pragma: no cover - depends on the build
        _compiled = None
    if _compiled is not None:
        _impl = _compiled
        BACKEND = "compiled"


def get_backend(name=None):
    """Module implementing the kernels: 'compiled', 'python', or the default."""
    if name is None:
        return _impl
    if name == "python":
        return _kernels_py
    if name == "compiled":
        from . import _kernels  # noqa: F401
        return _kernels
    raise ValueError(f"unknown backend {name!r}")


def polar_weights(px, py, dr, n_r, n_phi):
    import numpy as np
    return _impl.polar_weights(np.ascontiguousarray(px, dtype=float),
                               np.ascontiguousarray(py, dtype=float),
                               float(dr), int(n_r), int(n_phi))


def accumulate(row, weight, idx, w, out):
    import numpy as np
    _impl.accumulate(np.ascontiguousarray(row, dtype=np.int64),
                     np.ascontiguousarray(weight, dtype=float),
                     np.ascontiguousarray(idx, dtype=np.int64),
                     np.ascontiguousarray(w, dtype=float), out)


def single_scatter_block(*args):
    import numpy as np
    conv = []
    for a in args:
        a = np.asarray(a)
        if a.dtype.kind in "iu":
            conv.append(np.ascontiguousarray(a, dtype=np.int64))
        else:
            conv.append(np.ascontiguousarray(a, dtype=float))
    return _impl.single_scatter_block(*conv)


def _conv(args):
    import numpy as np
    out = []
    for a in args:
        if isinstance(a, (int, np.integer)):
            out.append(int(a))
        elif isinstance(a, (float, np.floating)):
            out.append(float(a))
        else:
            a = np.asarray(a)
            out.append(np.ascontiguousarray(a, dtype=np.int64 if a.dtype.kind in "iub"
                                            else float))
    return out


def lookup_rows(tab, t0, h, n, rows, t):
    return _impl.lookup_rows(*_conv((tab, t0, h, n, rows, t)))


def cell_depths(y, u, pos, aj, sj, da, ds, n_sub, cx, cy, radius, sub_p, sub_u, tab, t0, h, n):
    return _impl.cell_depths(*_conv((y, u, pos, aj, sj, float(da), float(ds), int(n_sub),
                                     float(cx), float(cy), float(radius), sub_p, sub_u, tab,
                                     t0, h, n)))


def window_points(xo, vo, ri, sig_lo, sig_hi, pos, aj, sj, dl, wl, xs, ws, da, ds, n_sub,
                  cx, cy, radius, otab, o0, oh, on_, sub_p, sub_u, tab, t0, h, n):
    args = _conv((xo, vo, ri, sig_lo, sig_hi, pos, aj, sj, dl, wl, xs, ws))
    args += [float(da), float(ds), int(n_sub), float(cx), float(cy), float(radius)]
    args += _conv((otab, o0, oh, on_, sub_p, sub_u, tab, t0, h, n))
    return _impl.window_points(*args)
