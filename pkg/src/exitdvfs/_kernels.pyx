# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled schedule kernels.  Same accumulation order as ``_pykernels``."""
import numpy as np
cimport numpy as cnp
from libc.math cimport INFINITY

cnp.import_array()


cdef inline void _cost(const long[:] idx, const double[:, :] lat, const double[:, :] en,
                       double overhead, double* e_out, double* l_out) noexcept nogil:
    cdef Py_ssize_t i, L = idx.shape[0]
    cdef double energy = 0.0, latency = 0.0
    cdef long switches = 0, p, prev = -1
    for i in range(L):
        p = idx[i]
        energy += en[i, p]
        latency += lat[i, p]
        if i > 0 and p != prev:
            switches += 1
        prev = p
    e_out[0] = energy
    l_out[0] = latency + switches * overhead


def schedule_cost(idx, lat_table, en_table, double overhead):
    cdef long[:] iv = np.ascontiguousarray(idx, dtype=np.int_)
    cdef const double[:, :] lt = np.ascontiguousarray(lat_table, dtype=np.float64)
    cdef const double[:, :] et = np.ascontiguousarray(en_table, dtype=np.float64)
    cdef double e, l
    _cost(iv, lt, et, overhead, &e, &l)
    return e, l


def batch_cost(schedules, lat_table, en_table, double overhead):
    cdef const long[:, :] sv = np.ascontiguousarray(schedules, dtype=np.int_)
    cdef const double[:, :] lt = np.ascontiguousarray(lat_table, dtype=np.float64)
    cdef const double[:, :] et = np.ascontiguousarray(en_table, dtype=np.float64)
    cdef Py_ssize_t s, S = sv.shape[0]
    energies = np.empty(S, dtype=np.float64)
    latencies = np.empty(S, dtype=np.float64)
    cdef double[:] ev = energies
    cdef double[:] lv = latencies
    cdef double e, l
    for s in range(S):
        _cost(sv[s], lt, et, overhead, &e, &l)
        ev[s] = e
        lv[s] = l
    return energies.tolist(), latencies.tolist()


def brute_force(lat_table, en_table, pair_rank, double overhead, double budget):
    cdef const double[:, :] lt = np.ascontiguousarray(lat_table, dtype=np.float64)
    cdef const double[:, :] et = np.ascontiguousarray(en_table, dtype=np.float64)
    cdef const long[:] rank = np.ascontiguousarray(pair_rank, dtype=np.int_)
    cdef Py_ssize_t L = lt.shape[0]
    if L == 0:
        return [], 0.0, 0.0, 1
    cdef Py_ssize_t P = lt.shape[1], k, i
    idx_arr = np.zeros(L, dtype=np.int_)
    best_arr = np.zeros(L, dtype=np.int_)
    cdef long[:] idx = idx_arr
    cdef long[:] best = best_arr
    cdef double e, l, best_e = INFINITY, best_l = INFINITY
    cdef long r, best_r = 0, n_feasible = 0
    cdef bint found = False
    with nogil:
        while True:
            _cost(idx, lt, et, overhead, &e, &l)
            if l <= budget:
                n_feasible += 1
                r = 0
                for i in range(L):
                    r += rank[idx[i]]
                if e < best_e or (e == best_e and r < best_r):
                    best[:] = idx
                    best_e = e
                    best_l = l
                    best_r = r
                    found = True
            k = L - 1
            while k >= 0:
                idx[k] += 1
                if idx[k] < P:
                    break
                idx[k] = 0
                k -= 1
            if k < 0:
                break
    if not found:
        return None, best_e, best_l, n_feasible
    return best_arr.tolist(), best_e, best_l, n_feasible
