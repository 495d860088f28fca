# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled PAM (BUILD + SWAP) medoid selection (see _pam_py for the contract)."""

import numpy as np

cimport numpy as cnp

cdef double REL_TOL = 1e-12


def pam(D_in, Py_ssize_t k):
    D_arr = np.ascontiguousarray(D_in, dtype=np.float64)
    cdef double[:, ::1] D = D_arr
    cdef Py_ssize_t n = D.shape[0]

    medoids_arr = np.empty(k, dtype=np.int64)
    cdef cnp.int64_t[::1] medoids = medoids_arr
    d1_arr = np.empty(n, dtype=np.float64)
    d2_arr = np.empty(n, dtype=np.float64)
    n1_arr = np.empty(n, dtype=np.int64)
    diff_arr = np.empty(k, dtype=np.float64)
    cdef double[::1] d1 = d1_arr
    cdef double[::1] d2 = d2_arr
    cdef cnp.int64_t[::1] n1 = n1_arr
    cdef double[::1] diffsum = diff_arr
    is_med_arr = np.zeros(n, dtype=np.uint8)
    cdef unsigned char[::1] is_medoid = is_med_arr

    cdef double INF = np.inf
    cdef Py_ssize_t i, j, m, h, best, best_h, best_m
    cdef double total, best_total, gain, g, cost, tol
    cdef double base_sum, dh, base, special, delta, best_delta

    # BUILD: first medoid minimizes the total distance to all points.
    best = 0
    best_total = INF
    for i in range(n):
        total = 0.0
        for j in range(n):
            total += D[i, j]
        if total < best_total:
            best_total = total
            best = i
    medoids[0] = best
    is_medoid[best] = 1
    for i in range(n):
        d1[i] = D[best, i]

    cdef Py_ssize_t count = 1
    while count < k:
        best = -1
        best_total = -1.0
        for h in range(n):
            if is_medoid[h]:
                continue
            gain = 0.0
            for i in range(n):
                g = d1[i] - D[i, h]
                if g > 0.0:
                    gain += g
            if gain > best_total:
                best_total = gain
                best = h
        medoids[count] = best
        is_medoid[best] = 1
        for i in range(n):
            if D[best, i] < d1[i]:
                d1[i] = D[best, i]
        count += 1

    if k == n:
        return medoids_arr

    # SWAP
    while True:
        cost = 0.0
        for i in range(n):
            d1[i] = INF
            d2[i] = INF
            n1[i] = 0
            for m in range(k):
                g = D[i, medoids[m]]
                if g < d1[i]:
                    d2[i] = d1[i]
                    d1[i] = g
                    n1[i] = m
                elif g < d2[i]:
                    d2[i] = g
            cost += d1[i]
        tol = REL_TOL * (1.0 if cost < 1.0 else cost)

        best_delta = 0.0
        best_h = -1
        best_m = -1
        for h in range(n):
            if is_medoid[h]:
                continue
            base_sum = 0.0
            for m in range(k):
                diffsum[m] = 0.0
            for i in range(n):
                dh = D[i, h]
                base = (dh if dh < d1[i] else d1[i]) - d1[i]
                special = (dh if dh < d2[i] else d2[i]) - d1[i]
                base_sum += base
                diffsum[n1[i]] += special - base
            for m in range(k):
                delta = base_sum + diffsum[m]
                if best_h < 0:
                    if delta < -tol:
                        best_delta = delta
                        best_h = h
                        best_m = m
                elif delta < best_delta:
                    best_delta = delta
                    best_h = h
                    best_m = m
        if best_h < 0:
            break
        is_medoid[medoids[best_m]] = 0
        is_medoid[best_h] = 1
        medoids[best_m] = best_h
    return medoids_arr
