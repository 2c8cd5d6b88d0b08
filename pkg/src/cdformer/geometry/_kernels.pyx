# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled geometry kernels: farthest point sampling and exact KNN.

Semantics are pinned to the numpy fallback (`_kernels_py`): float64 squared
Euclidean distances evaluated as dx*dx + dy*dy + dz*dz, neighbor rows sorted
ascending by (distance, index), FPS ties broken toward the lowest index.
The grid-accelerated KNN prunes by cell rings but returns bit-identical
results to the brute kernel; it exists so distribute/collect stay near-linear
in point count at benchmark sizes.
"""

import numpy as np

cimport numpy as cnp
from libc.math cimport floor, sqrt, cbrt
from libc.stdlib cimport malloc, free

cnp.import_array()


def fps_kernel(double[:, ::1] coords, Py_ssize_t m):
    cdef Py_ssize_t n = coords.shape[0]
    cdef cnp.ndarray[cnp.int64_t, ndim=1] out_arr = np.empty(m, dtype=np.int64)
    cdef long long[::1] out = out_arr
    cdef cnp.ndarray[cnp.float64_t, ndim=1] d2_arr = np.empty(n, dtype=np.float64)
    cdef double[::1] d2 = d2_arr
    cdef Py_ssize_t i, j, seed, nxt
    cdef double dx, dy, dz, nd, best

    # lexicographically smallest coordinate triple, lowest index on full ties
    seed = 0
    for j in range(1, n):
        if coords[j, 0] < coords[seed, 0] or (
            coords[j, 0] == coords[seed, 0]
            and (
                coords[j, 1] < coords[seed, 1]
                or (coords[j, 1] == coords[seed, 1] and coords[j, 2] < coords[seed, 2])
            )
        ):
            seed = j
    out[0] = seed
    for j in range(n):
        dx = coords[j, 0] - coords[seed, 0]
        dy = coords[j, 1] - coords[seed, 1]
        dz = coords[j, 2] - coords[seed, 2]
        d2[j] = dx * dx + dy * dy + dz * dz
    d2[seed] = -1.0

    for i in range(1, m):
        nxt = 0
        best = d2[0]
        for j in range(1, n):
            if d2[j] > best:
                best = d2[j]
                nxt = j
        out[i] = nxt
        for j in range(n):
            dx = coords[j, 0] - coords[nxt, 0]
            dy = coords[j, 1] - coords[nxt, 1]
            dz = coords[j, 2] - coords[nxt, 2]
            nd = dx * dx + dy * dy + dz * dz
            if nd < d2[j]:
                d2[j] = nd
        d2[nxt] = -1.0
    return out_arr


cdef inline void _topk_insert(
    double* kd2, long long* kidx, Py_ssize_t* cnt, Py_ssize_t k, double d2, Py_ssize_t j
) noexcept nogil:
    """Insert (d2, j) into a list kept ascending by (distance, index)."""
    cdef Py_ssize_t pos
    if cnt[0] < k:
        pos = cnt[0]
        cnt[0] += 1
    else:
        if d2 > kd2[k - 1] or (d2 == kd2[k - 1] and j > kidx[k - 1]):
            return
        pos = k - 1
    while pos > 0 and (d2 < kd2[pos - 1] or (d2 == kd2[pos - 1] and j < kidx[pos - 1])):
        kd2[pos] = kd2[pos - 1]
        kidx[pos] = kidx[pos - 1]
        pos -= 1
    kd2[pos] = d2
    kidx[pos] = j


def knn_brute_kernel(double[:, ::1] queries, double[:, ::1] points, Py_ssize_t k):
    cdef Py_ssize_t mq = queries.shape[0]
    cdef Py_ssize_t n = points.shape[0]
    cdef cnp.ndarray[cnp.int64_t, ndim=2] out_arr = np.empty((mq, k), dtype=np.int64)
    cdef long long[:, ::1] out = out_arr
    cdef double* kd2 = <double*> malloc(k * sizeof(double))
    cdef long long* kidx = <long long*> malloc(k * sizeof(long long))
    cdef Py_ssize_t qi, j, cnt
    cdef double dx, dy, dz, d2
    if kd2 == NULL or kidx == NULL:
        free(kd2); free(kidx)
        raise MemoryError()
    try:
        for qi in range(mq):
            cnt = 0
            for j in range(n):
                dx = points[j, 0] - queries[qi, 0]
                dy = points[j, 1] - queries[qi, 1]
                dz = points[j, 2] - queries[qi, 2]
                d2 = dx * dx + dy * dy + dz * dz
                _topk_insert(kd2, kidx, &cnt, k, d2, j)
            for j in range(k):
                out[qi, j] = kidx[j]
    finally:
        free(kd2)
        free(kidx)
    return out_arr


def knn_grid_kernel(double[:, ::1] queries, double[:, ::1] points, Py_ssize_t k):
    """Exact KNN via a uniform cell grid with ring expansion.

    After finishing ring r, any unscanned point is at squared distance
    >= bound(r+1)^2 from the query, so the search stops only once the current
    k-th neighbor strictly beats that bound; ties at the boundary keep
    expanding, preserving the (distance, index) order of the brute kernel.
    """
    cdef Py_ssize_t mq = queries.shape[0]
    cdef Py_ssize_t n = points.shape[0]
    cdef cnp.ndarray[cnp.int64_t, ndim=2] out_arr = np.empty((mq, k), dtype=np.int64)
    cdef long long[:, ::1] out = out_arr

    cdef double lox = points[0, 0], loy = points[0, 1], loz = points[0, 2]
    cdef double hix = lox, hiy = loy, hiz = loz
    cdef Py_ssize_t j, qi
    for j in range(1, n):
        if points[j, 0] < lox: lox = points[j, 0]
        if points[j, 0] > hix: hix = points[j, 0]
        if points[j, 1] < loy: loy = points[j, 1]
        if points[j, 1] > hiy: hiy = points[j, 1]
        if points[j, 2] < loz: loz = points[j, 2]
        if points[j, 2] > hiz: hiz = points[j, 2]

    cdef double ext = hix - lox
    if hiy - loy > ext: ext = hiy - loy
    if hiz - loz > ext: ext = hiz - loz
    cdef double ncand = cbrt(n / 2.0)
    if ncand < 1.0: ncand = 1.0
    cdef double h = ext / ncand
    if h <= 0.0: h = 1.0

    cdef Py_ssize_t nx = <Py_ssize_t>((hix - lox) / h) + 1
    cdef Py_ssize_t ny = <Py_ssize_t>((hiy - loy) / h) + 1
    cdef Py_ssize_t nz = <Py_ssize_t>((hiz - loz) / h) + 1
    if nx > 1024: nx = 1024
    if ny > 1024: ny = 1024
    if nz > 1024: nz = 1024
    cdef Py_ssize_t ncells = nx * ny * nz

    cdef cnp.ndarray[cnp.int64_t, ndim=1] start_arr = np.zeros(ncells + 1, dtype=np.int64)
    cdef long long[::1] start = start_arr
    cdef cnp.ndarray[cnp.int64_t, ndim=1] ids_arr = np.empty(n, dtype=np.int64)
    cdef long long[::1] ids = ids_arr
    cdef cnp.ndarray[cnp.int64_t, ndim=1] cell_arr = np.empty(n, dtype=np.int64)
    cdef long long[::1] cell = cell_arr
    cdef cnp.ndarray[cnp.int64_t, ndim=1] fill_arr = np.empty(ncells, dtype=np.int64)
    cdef long long[::1] fill = fill_arr

    cdef Py_ssize_t cx, cy, cz, c
    for j in range(n):
        cx = <Py_ssize_t>((points[j, 0] - lox) / h)
        cy = <Py_ssize_t>((points[j, 1] - loy) / h)
        cz = <Py_ssize_t>((points[j, 2] - loz) / h)
        if cx >= nx: cx = nx - 1
        if cy >= ny: cy = ny - 1
        if cz >= nz: cz = nz - 1
        c = (cx * ny + cy) * nz + cz
        cell[j] = c
        start[c + 1] += 1
    for c in range(ncells):
        start[c + 1] += start[c]
        fill[c] = start[c]
    for j in range(n):  # ascending j keeps ids sorted inside each cell
        c = cell[j]
        ids[fill[c]] = j
        fill[c] += 1

    cdef double* kd2 = <double*> malloc(k * sizeof(double))
    cdef long long* kidx = <long long*> malloc(k * sizeof(long long))
    if kd2 == NULL or kidx == NULL:
        free(kd2); free(kidx)
        raise MemoryError()

    cdef Py_ssize_t cnt, r, rmax, ix, iy, iz, lo_ix, hi_ix, lo_iy, hi_iy, lo_iz, hi_iz
    cdef Py_ssize_t p, s_, e_
    cdef double qx, qy, qz, dx, dy, dz, d2, gap, bound
    cdef bint done

    try:
        for qi in range(mq):
            qx = queries[qi, 0]; qy = queries[qi, 1]; qz = queries[qi, 2]
            cx = <Py_ssize_t>floor((qx - lox) / h)
            cy = <Py_ssize_t>floor((qy - loy) / h)
            cz = <Py_ssize_t>floor((qz - loz) / h)
            if cx < 0: cx = 0
            if cx >= nx: cx = nx - 1
            if cy < 0: cy = 0
            if cy >= ny: cy = ny - 1
            if cz < 0: cz = 0
            if cz >= nz: cz = nz - 1

            rmax = cx
            if nx - 1 - cx > rmax: rmax = nx - 1 - cx
            if cy > rmax: rmax = cy
            if ny - 1 - cy > rmax: rmax = ny - 1 - cy
            if cz > rmax: rmax = cz
            if nz - 1 - cz > rmax: rmax = nz - 1 - cz

            cnt = 0
            r = 0
            done = False
            while not done:
                lo_ix = cx - r
                hi_ix = cx + r
                if lo_ix < 0: lo_ix = 0
                if hi_ix > nx - 1: hi_ix = nx - 1
                lo_iy = cy - r
                hi_iy = cy + r
                if lo_iy < 0: lo_iy = 0
                if hi_iy > ny - 1: hi_iy = ny - 1
                lo_iz = cz - r
                hi_iz = cz + r
                if lo_iz < 0: lo_iz = 0
                if hi_iz > nz - 1: hi_iz = nz - 1
                for ix in range(lo_ix, hi_ix + 1):
                    for iy in range(lo_iy, hi_iy + 1):
                        for iz in range(lo_iz, hi_iz + 1):
                            # shell only: interior cells were scanned at smaller r
                            if r > 0 and (
                                ix != cx - r and ix != cx + r
                                and iy != cy - r and iy != cy + r
                                and iz != cz - r and iz != cz + r
                            ):
                                continue
                            c = (ix * ny + iy) * nz + iz
                            s_ = start[c]
                            e_ = start[c + 1]
                            for p in range(s_, e_):
                                j = ids[p]
                                dx = points[j, 0] - qx
                                dy = points[j, 1] - qy
                                dz = points[j, 2] - qz
                                d2 = dx * dx + dy * dy + dz * dz
                                _topk_insert(kd2, kidx, &cnt, k, d2, j)

                if r >= rmax:
                    done = True
                elif cnt == k:
                    # smallest possible gap to any cell in ring r+1
                    bound = (lox + (cx + r + 1) * h) - qx
                    gap = qx - (lox + (cx - r) * h)
                    if gap < bound: bound = gap
                    gap = (loy + (cy + r + 1) * h) - qy
                    if gap < bound: bound = gap
                    gap = qy - (loy + (cy - r) * h)
                    if gap < bound: bound = gap
                    gap = (loz + (cz + r + 1) * h) - qz
                    if gap < bound: bound = gap
                    gap = qz - (loz + (cz - r) * h)
                    if gap < bound: bound = gap
                    if bound < 0.0: bound = 0.0
                    if kd2[k - 1] < bound * bound:
                        done = True
                r += 1
            for j in range(k):
                out[qi, j] = kidx[j]
    finally:
        free(kd2)
        free(kidx)
    return out_arr
