"""Pure-Python fallback for the point-iteration kernel.

Kept operation-for-operation identical to ``_ifs_kernel.pyx`` so that the
compiled and interpreted paths produce bit-identical float64 streams.
"""

import numpy as np


def iterate_points(a, b, choices, x0, y0, n_skip, limit):
    a = [[float(a[k, 0, 0]), float(a[k, 0, 1]),
          float(a[k, 1, 0]), float(a[k, 1, 1])] for k in range(a.shape[0])]
    b = [[float(b[k, 0]), float(b[k, 1])] for k in range(b.shape[0])]
    n_total = len(choices)
    out = np.empty((n_total - n_skip, 2), dtype=np.float64)
    x, y = x0, y0
    for i in range(n_total):
        ak = a[choices[i]]
        bk = b[choices[i]]
        nx = ak[0] * x + ak[1] * y + bk[0]
        ny = ak[2] * x + ak[3] * y + bk[1]
        x = nx
        y = ny
        if x > limit or x < -limit or y > limit or y < -limit:
            return out, i
        if i >= n_skip:
            out[i - n_skip, 0] = x
            out[i - n_skip, 1] = y
    return out, -1
