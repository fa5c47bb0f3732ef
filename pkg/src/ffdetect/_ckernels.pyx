# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled versions of the loop-heavy image kernels (see _pykernels.py)."""

import numpy as np
cimport numpy as cnp
from libc.math cimport exp, fabs, sqrt
from libc.stdlib cimport malloc, free

cnp.import_array()

cdef double TAN_22_5 = 0.41421356237309503
cdef double TAN_67_5 = 2.414213562373095


def nms(mag, gx, gy):
    cdef double[:, ::1] m = np.ascontiguousarray(mag, dtype=np.float64)
    cdef double[:, ::1] ggx = np.ascontiguousarray(gx, dtype=np.float64)
    cdef double[:, ::1] ggy = np.ascontiguousarray(gy, dtype=np.float64)
    cdef Py_ssize_t h = m.shape[0], w = m.shape[1], r, c
    out_arr = np.zeros((h, w), dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    cdef double ax, ay, v, ahead, behind
    cdef int dr, dc
    if h < 3 or w < 3:
        return out_arr
    for r in range(1, h - 1):
        for c in range(1, w - 1):
            ax = fabs(ggx[r, c])
            ay = fabs(ggy[r, c])
            if ay <= TAN_22_5 * ax:
                dr = 0; dc = 1
            elif ay >= TAN_67_5 * ax:
                dr = 1; dc = 0
            elif ggx[r, c] * ggy[r, c] > 0:
                dr = 1; dc = 1
            else:
                dr = 1; dc = -1
            v = m[r, c]
            ahead = m[r + dr, c + dc]
            behind = m[r - dr, c - dc]
            if v > behind and v >= ahead:
                out[r, c] = v
    return out_arr


def hysteresis(strength, double low, double high):
    cdef double[:, ::1] s = np.ascontiguousarray(strength, dtype=np.float64)
    cdef Py_ssize_t h = s.shape[0], w = s.shape[1]
    out_arr = np.zeros((h, w), dtype=np.uint8)
    cdef unsigned char[:, ::1] out = out_arr
    cdef Py_ssize_t n = h * w
    cdef Py_ssize_t *queue = <Py_ssize_t *> malloc(n * sizeof(Py_ssize_t))
    cdef Py_ssize_t head, tail, r, c, cr, cc, nr, nc, p
    cdef int dr, dc
    if queue == NULL:
        raise MemoryError()
    try:
        for r in range(h):
            for c in range(w):
                if out[r, c] or s[r, c] <= 0 or s[r, c] < low or s[r, c] < high:
                    continue
                out[r, c] = 1
                head = 0
                tail = 0
                queue[tail] = r * w + c
                tail += 1
                while head < tail:
                    p = queue[head]
                    head += 1
                    cr = p // w
                    cc = p - cr * w
                    for dr in range(-1, 2):
                        for dc in range(-1, 2):
                            if dr == 0 and dc == 0:
                                continue
                            nr = cr + dr
                            nc = cc + dc
                            if nr < 0 or nr >= h or nc < 0 or nc >= w:
                                continue
                            if out[nr, nc] or s[nr, nc] <= 0 or s[nr, nc] < low:
                                continue
                            out[nr, nc] = 1
                            queue[tail] = nr * w + nc
                            tail += 1
    finally:
        free(queue)
    return out_arr


def label_components(mask, int connectivity=4):
    cdef unsigned char[:, ::1] m = np.ascontiguousarray(np.asarray(mask).astype(bool), dtype=np.uint8)
    cdef Py_ssize_t h = m.shape[0], w = m.shape[1]
    labels_arr = np.zeros((h, w), dtype=np.int64)
    cdef long long[:, ::1] labels = labels_arr
    cdef Py_ssize_t *queue = <Py_ssize_t *> malloc(h * w * sizeof(Py_ssize_t) + 1)
    cdef Py_ssize_t head, tail, r, c, cr, cc, nr, nc, p
    cdef int dr, dc
    cdef long long n = 0
    if queue == NULL:
        raise MemoryError()
    try:
        for r in range(h):
            for c in range(w):
                if not m[r, c] or labels[r, c] != 0:
                    continue
                n += 1
                labels[r, c] = n
                head = 0
                tail = 0
                queue[tail] = r * w + c
                tail += 1
                while head < tail:
                    p = queue[head]
                    head += 1
                    cr = p // w
                    cc = p - cr * w
                    for dr in range(-1, 2):
                        for dc in range(-1, 2):
                            if dr == 0 and dc == 0:
                                continue
                            if connectivity == 4 and dr != 0 and dc != 0:
                                continue
                            nr = cr + dr
                            nc = cc + dc
                            if nr < 0 or nr >= h or nc < 0 or nc >= w:
                                continue
                            if not m[nr, nc] or labels[nr, nc] != 0:
                                continue
                            labels[nr, nc] = n
                            queue[tail] = nr * w + nc
                            tail += 1
    finally:
        free(queue)
    return labels_arr, int(n)


def kmeans_assign(points, centers):
    cdef double[:, ::1] x = np.ascontiguousarray(points, dtype=np.float64)
    cdef double[:, ::1] cen = np.ascontiguousarray(centers, dtype=np.float64)
    cdef Py_ssize_t n = x.shape[0], k = cen.shape[0], dim = x.shape[1], i, j, d
    out_arr = np.zeros(n, dtype=np.int64)
    cdef long long[::1] out = out_arr
    cdef double best, dist, diff
    for i in range(n):
        best = 0.0
        for j in range(k):
            dist = 0.0
            for d in range(dim):
                diff = x[i, d] - cen[j, d]
                dist += diff * diff
            if j == 0 or dist < best:
                best = dist
                out[i] = j
    return out_arr


def window_max(plane, int radius):
    cdef double[:, ::1] p = np.ascontiguousarray(plane, dtype=np.float64)
    cdef Py_ssize_t h = p.shape[0], w = p.shape[1], r, c, rr, cc, r0, r1, c0, c1
    out_arr = np.empty((h, w), dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    cdef double best
    for r in range(h):
        r0 = r - radius if r - radius > 0 else 0
        r1 = r + radius if r + radius < h - 1 else h - 1
        for c in range(w):
            c0 = c - radius if c - radius > 0 else 0
            c1 = c + radius if c + radius < w - 1 else w - 1
            best = p[r0, c0]
            for rr in range(r0, r1 + 1):
                for cc in range(c0, c1 + 1):
                    if p[rr, cc] > best:
                        best = p[rr, cc]
            out[r, c] = best
    return out_arr


cdef double GELU_C = 0.7978845608028654
cdef double GELU_A = 0.044715


def gelu_forward(x):
    arr = np.ascontiguousarray(x, dtype=np.float64)
    cdef double[::1] xv = arr.reshape(-1)
    y_arr = np.empty(arr.shape, dtype=np.float64)
    t_arr = np.empty(arr.shape, dtype=np.float64)
    cdef double[::1] yv = y_arr.reshape(-1)
    cdef double[::1] tv = t_arr.reshape(-1)
    cdef Py_ssize_t i, n = xv.shape[0]
    cdef double v, t
    for i in range(n):
        v = xv[i]
        # tanh(u) = 1 - 2 / (exp(2u) + 1); exp is much cheaper than libm tanh
        t = 1.0 - 2.0 / (exp(2.0 * GELU_C * (v + GELU_A * v * v * v)) + 1.0)
        tv[i] = t
        yv[i] = 0.5 * v * (1.0 + t)
    return y_arr, t_arr


def gelu_backward(x, t, g):
    xa = np.ascontiguousarray(x, dtype=np.float64)
    cdef double[::1] xv = xa.reshape(-1)
    cdef double[::1] tv = np.ascontiguousarray(t, dtype=np.float64).reshape(-1)
    cdef double[::1] gv = np.ascontiguousarray(g, dtype=np.float64).reshape(-1)
    out = np.empty(xa.shape, dtype=np.float64)
    cdef double[::1] ov = out.reshape(-1)
    cdef Py_ssize_t i, n = xv.shape[0]
    cdef double v, tt
    for i in range(n):
        v = xv[i]
        tt = tv[i]
        ov[i] = gv[i] * (0.5 * (1.0 + tt)
                         + 0.5 * v * (1.0 - tt * tt) * GELU_C * (1.0 + 3.0 * GELU_A * v * v))
    return out


def adamw_update(w, g, m, v, double lr, double beta1, double beta2, double eps, double wd,
                 long step):
    cdef double[::1] wv = w.reshape(-1)
    cdef double[::1] gv = np.ascontiguousarray(g, dtype=np.float64).reshape(-1)
    cdef double[::1] mv = m.reshape(-1)
    cdef double[::1] vv = v.reshape(-1)
    cdef double bc1 = 1.0 - beta1 ** step
    cdef double bc2 = 1.0 - beta2 ** step
    cdef double decay = 1.0 - lr * wd
    cdef Py_ssize_t i, n = wv.shape[0]
    cdef double gi, m_hat, v_hat
    for i in range(n):
        gi = gv[i]
        mv[i] = beta1 * mv[i] + (1.0 - beta1) * gi
        vv[i] = beta2 * vv[i] + (1.0 - beta2) * (gi * gi)
        m_hat = mv[i] / bc1
        v_hat = vv[i] / bc2
        wv[i] = wv[i] * decay - lr * (m_hat / (sqrt(v_hat) + eps))
