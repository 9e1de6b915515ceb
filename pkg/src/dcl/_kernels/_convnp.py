"""Pure-numpy im2col / col2im, the fallback when the compiled kernels are absent.

Layout contract (shared with the Cython backend):

    im2col(xp, kh, kw, sh, sw, oh, ow) : (N, C, Hp, Wp) -> (N, oh, ow, C, kh, kw)
    col2im(cols, hp, wp, sh, sw)       : inverse scatter-add back to (N, C, hp, wp)

Inputs are already padded; both functions accumulate in a fixed order so
results are bit-reproducible.
"""

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def im2col(xp, kh, kw, sh, sw, oh, ow):
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))
    win = win[:, :, ::sh, ::sw][:, :, :oh, :ow]
    # (N, C, oh, ow, kh, kw) -> (N, oh, ow, C, kh, kw), contiguous for the GEMM reshape
    return np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5))


def col2im(cols, hp, wp, sh, sw):
    n, oh, ow, c, kh, kw = cols.shape
    out = np.zeros((n, c, hp, wp), dtype=cols.dtype)
    patches = cols.transpose(0, 3, 4, 5, 1, 2)  # (N, C, kh, kw, oh, ow)
    for i in range(kh):
        for j in range(kw):
            out[:, :, i : i + sh * oh : sh, j : j + sw * ow : sw] += patches[:, :, i, j]
    return out
