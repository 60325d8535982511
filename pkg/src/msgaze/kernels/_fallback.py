"""Pure numpy/Python versions of the compiled kernels."""
import numpy as np


def fill_polygon(xs, ys, height, width):
    xs = np.ascontiguousarray(xs, dtype=np.float64)
    ys = np.ascontiguousarray(ys, dtype=np.float64)
    out = np.zeros((height, width), dtype=np.uint8)
    n = xs.shape[0]
    if n < 3 or height <= 0 or width <= 0:
        return out
    # edge i joins vertex i to its predecessor j = i - 1
    xi, yi = xs, ys
    xj, yj = np.roll(xs, 1), np.roll(ys, 1)
    r0 = max(int(np.floor(ys.min() - 0.5)), 0)
    r1 = min(int(np.floor(ys.max() - 0.5)) + 1, height - 1)
    centers = np.arange(width, dtype=np.float64) + 0.5
    with np.errstate(divide="ignore", invalid="ignore"):
        for row in range(r0, r1 + 1):
            yc = row + 0.5
            hit = (yi > yc) != (yj > yc)
            if not hit.any():
                continue
            a, b = xi[hit], yi[hit]
            nodes = np.sort((xj[hit] - a) * (yc - b) / (yj[hit] - b) + a)
            for xa, xb in zip(nodes[0::2], nodes[1::2]):
                out[row] |= ((centers >= xa) & (centers < xb)).astype(np.uint8)
    return out


def draw_line(image, r0, c0, r1, c1, value):
    h, w = image.shape
    dc = abs(c1 - c0)
    dr = -abs(r1 - r0)
    sc = 1 if c0 < c1 else -1
    sr = 1 if r0 < r1 else -1
    err = dc + dr
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


def noise_response_sumsq(image):
    im = np.asarray(image, dtype=np.float64)
    resp = (im[:-2, :-2] - 2.0 * im[:-2, 1:-1] + im[:-2, 2:]
            - 2.0 * im[1:-1, :-2] + 4.0 * im[1:-1, 1:-1] - 2.0 * im[1:-1, 2:]
            + im[2:, :-2] - 2.0 * im[2:, 1:-1] + im[2:, 2:])
    return float(np.sum(resp * resp))
