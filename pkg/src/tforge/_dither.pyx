# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Floyd-Steinberg error diffusion, one independent plane at a time."""
import numpy as np
cimport numpy as cnp
from libc.math cimport floor

cnp.import_array()


def floyd_steinberg(cnp.float64_t[:, :, ::1] planes, int levels):
    """Quantize ``planes`` (P, H, W) in place to ``levels`` evenly spaced values in [0, 1].

    Rows are scanned serpentine: even rows left to right, odd rows right to left.
    """
    cdef Py_ssize_t n = planes.shape[0], h = planes.shape[1], w = planes.shape[2]
    cdef Py_ssize_t p, i, j, jj, step
    cdef double scale = levels - 1
    cdef double old, new, err, q
    with nogil:
        for p in range(n):
            for i in range(h):
                step = 1 if i % 2 == 0 else -1
                for jj in range(w):
                    j = jj if step == 1 else w - 1 - jj
                    old = planes[p, i, j]
                    q = floor(old * scale + 0.5)
                    if q < 0:
                        q = 0
                    elif q > scale:
                        q = scale
                    new = q / scale
                    planes[p, i, j] = new
                    err = old - new
                    if 0 <= j + step < w:
                        planes[p, i, j + step] += err * 0.4375
                    if i + 1 < h:
                        if 0 <= j - step < w:
                            planes[p, i + 1, j - step] += err * 0.1875
                        planes[p, i + 1, j] += err * 0.3125
                        if 0 <= j + step < w:
                            planes[p, i + 1, j + step] += err * 0.0625
    return np.asarray(planes)
