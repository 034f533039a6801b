"""Hot inner loops, dispatched to numba or numpy per ``CHROMAPRED_BACKEND``."""
from __future__ import annotations

from . import _kernels_numpy
from ._backend import BACKEND

if BACKEND == "numba":
    from . import _kernels_numba as _impl
else:
    _impl = _kernels_numpy

im2col = _impl.im2col
col2im = _impl.col2im
int_conv = _impl.int_conv
int_softmax_rows = _impl.int_softmax_rows
xoshiro_fill = _impl.xoshiro_fill

__all__ = ["BACKEND", "im2col", "col2im", "int_conv", "int_softmax_rows", "xoshiro_fill"]
