# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled superpixel assignment sweep (see _slic_py for the contract)."""

from libc.math cimport floor

import numpy as np


def slic_assign(double[:, :, ::1] lab, double[::1] cy, double[::1] cx,
                double[:, ::1] ccol, int win, double alpha,
                int[:, ::1] labels, double[:, ::1] dist):
    cdef Py_ssize_t H = lab.shape[0]
    cdef Py_ssize_t W = lab.shape[1]
    cdef Py_ssize_t K = cy.shape[0]
    cdef Py_ssize_t k, y, x, y0, y1, x0, x1, yc, xc
    cdef double dl, da, db, dy, dx, t, s, d, cl0, cl1, cl2, ky, kx

    for k in range(K):
        yc = <Py_ssize_t>floor(cy[k] + 0.5)
        xc = <Py_ssize_t>floor(cx[k] + 0.5)
        y0 = yc - win
        if y0 < 0:
            y0 = 0
        y1 = yc + win + 1
        if y1 > H:
            y1 = H
        x0 = xc - win
        if x0 < 0:
            x0 = 0
        x1 = xc + win + 1
        if x1 > W:
            x1 = W
        cl0 = ccol[k, 0]
        cl1 = ccol[k, 1]
        cl2 = ccol[k, 2]
        ky = cy[k]
        kx = cx[k]
        for y in range(y0, y1):
            dy = <double>y - ky
            for x in range(x0, x1):
                dl = lab[y, x, 0] - cl0
                da = lab[y, x, 1] - cl1
                db = lab[y, x, 2] - cl2
                t = dl * dl + da * da + db * db
                dx = <double>x - kx
                s = dy * dy + dx * dx
                d = t + s * alpha
                if d < dist[y, x]:
                    dist[y, x] = d
                    labels[y, x] = <int>k
    return np.asarray(labels), np.asarray(dist)
