# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled inner loops: polygon fill, line drawing, noise-operator response.

Each function mirrors one in ``_fallback.py`` and must produce bit-identical
results; the intersection arithmetic is written in the same operation order.
"""
import numpy as np
cimport numpy as cnp
from libc.math cimport floor

cnp.import_array()


def fill_polygon(double[::1] xs, double[::1] ys, Py_ssize_t height, Py_ssize_t width):
    cdef Py_ssize_t n = xs.shape[0]
    out = np.zeros((height, width), dtype=np.uint8)
    cdef unsigned char[:, ::1] grid = out
    if n < 3 or height <= 0 or width <= 0:
        return out
    cdef double[::1] nodes = np.empty(n, dtype=np.float64)
    cdef Py_ssize_t row, i, j, k, m, col, c0, c1
    cdef double yc, xc, xi, yi, xj, yj, tmp, xa, xb
    cdef double ymin = ys[0], ymax = ys[0]
    for i in range(1, n):
        if ys[i] < ymin:
            ymin = ys[i]
        if ys[i] > ymax:
            ymax = ys[i]
    cdef Py_ssize_t r0 = <Py_ssize_t>floor(ymin - 0.5)
    cdef Py_ssize_t r1 = <Py_ssize_t>floor(ymax - 0.5) + 1
    if r0 < 0:
        r0 = 0
    if r1 > height - 1:
        r1 = height - 1
    for row in range(r0, r1 + 1):
        yc = row + 0.5
        m = 0
        j = n - 1
        for i in range(n):
            xi = xs[i]
            yi = ys[i]
            xj = xs[j]
            yj = ys[j]
            if (yi > yc) != (yj > yc):
                nodes[m] = (xj - xi) * (yc - yi) / (yj - yi) + xi
                m += 1
            j = i
        # insertion sort; m is small
        for i in range(1, m):
            tmp = nodes[i]
            k = i - 1
            while k >= 0 and nodes[k] > tmp:
                nodes[k + 1] = nodes[k]
                k -= 1
            nodes[k + 1] = tmp
        for k in range(0, m - 1, 2):
            xa = nodes[k]
            xb = nodes[k + 1]
            if xb <= 0.0 or xa >= width:
                continue
            c0 = <Py_ssize_t>floor(xa - 0.5)
            if c0 < 0:
                c0 = 0
            c1 = <Py_ssize_t>floor(xb - 0.5) + 1
            if c1 > width - 1:
                c1 = width - 1
            for col in range(c0, c1 + 1):
                xc = col + 0.5
                if xc >= xa and xc < xb:
                    grid[row, col] = 1
    return out


def draw_line(double[:, ::1] image, Py_ssize_t r0, Py_ssize_t c0,
              Py_ssize_t r1, Py_ssize_t c1, double value):
    cdef Py_ssize_t h = image.shape[0], w = image.shape[1]
    cdef Py_ssize_t dc = c1 - c0 if c1 >= c0 else c0 - c1
    cdef Py_ssize_t dr = -(r1 - r0 if r1 >= r0 else r0 - r1)
    cdef Py_ssize_t sc = 1 if c0 < c1 else -1
    cdef Py_ssize_t sr = 1 if r0 < r1 else -1
    cdef Py_ssize_t err = dc + dr, e2
    while True:
        if 0 <= r0 < h and 0 <= c0 < w:
            image[r0, c0] = value
        if r0 == r1 and c0 == c1:
            break
        e2 = 2 * err
        if e2 >= dr:
            err += dr
            c0 += sc
        if e2 <= dc:
            err += dc
            r0 += sr


def noise_response_sumsq(double[:, ::1] image):
    cdef Py_ssize_t h = image.shape[0], w = image.shape[1], r, c
    cdef double acc = 0.0, v
    for r in range(1, h - 1):
        for c in range(1, w - 1):
            v = (image[r - 1, c - 1] - 2.0 * image[r - 1, c] + image[r - 1, c + 1]
                 - 2.0 * image[r, c - 1] + 4.0 * image[r, c] - 2.0 * image[r, c + 1]
                 + image[r + 1, c - 1] - 2.0 * image[r + 1, c] + image[r + 1, c + 1])
            acc += v * v
    return acc
