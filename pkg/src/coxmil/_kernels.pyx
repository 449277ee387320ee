# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled inner loops: pair counting, Breslow risk-set sums, logrank split scan.

Every function here has a drop-in twin in ``_kernels_py``; ``coxmil.kernels``
picks one at import time.
"""
import numpy as np
cimport numpy as cnp
from libc.math cimport exp, log
from libc.stdlib cimport calloc, free

cnp.import_array()


def concordance_counts(const double[::1] times, const cnp.int8_t[::1] events,
                       const double[::1] risks):
    """Return (concordant, discordant, tied_risk, permissible) in O(n log n).

    Walks time groups from latest to earliest; a Fenwick tree over risk ranks
    holds every patient with a strictly later time.
    """
    cdef Py_ssize_t n = times.shape[0]
    order_arr = np.argsort(np.asarray(times), kind="mergesort")[::-1].astype(np.intp)
    _, rank_arr = np.unique(np.asarray(risks), return_inverse=True)
    rank_arr = (rank_arr.reshape(-1) + 1).astype(np.intp)
    cdef cnp.intp_t[::1] order = np.ascontiguousarray(order_arr)
    cdef cnp.intp_t[::1] rank = rank_arr
    cdef Py_ssize_t K = int(rank_arr.max()) if n else 0
    cdef long long *tree = <long long *> calloc(K + 1, sizeof(long long))
    if tree == NULL:
        raise MemoryError()
    cdef Py_ssize_t a = 0, b, g, i, r
    cdef long long conc = 0, disc = 0, tied = 0, inserted = 0, less, leq
    with nogil:
        while a < n:
            b = a
            while b + 1 < n and times[order[b + 1]] == times[order[a]]:
                b += 1
            for g in range(a, b + 1):
                i = order[g]
                if events[i] == 0:
                    continue
                less = 0
                r = rank[i] - 1
                while r > 0:
                    less += tree[r]
                    r -= r & -r
                leq = 0
                r = rank[i]
                while r > 0:
                    leq += tree[r]
                    r -= r & -r
                conc += less
                tied += leq - less
                disc += inserted - leq
            for g in range(a, b + 1):
                r = rank[order[g]]
                while r <= K:
                    tree[r] += 1
                    r += r & -r
                inserted += 1
            a = b + 1
    free(tree)
    return int(conc), int(disc), int(tied), int(conc + disc + tied)


def breslow_loglik(const double[::1] times, const cnp.int8_t[::1] events,
                   const double[::1] eta, const cnp.intp_t[::1] order):
    """Breslow partial log-likelihood and its gradient with respect to ``eta``.

    ``order`` sorts ``times`` ascending. Risk sets are inclusive of ties.
    """
    cdef Py_ssize_t n = times.shape[0]
    cdef Py_ssize_t a, b, g, k, idx
    cdef double m = eta[0]
    cdef double s = 0.0, logs, acc, ll = 0.0
    cdef Py_ssize_t ngroups = 0
    grad_arr = np.empty(n, dtype=np.float64)
    cdef double[::1] grad = grad_arr
    cdef double *w = <double *> calloc(n, sizeof(double))
    cdef double *gsum = <double *> calloc(n, sizeof(double))
    cdef double *gdeaths = <double *> calloc(n, sizeof(double))
    cdef Py_ssize_t *gstart = <Py_ssize_t *> calloc(n + 1, sizeof(Py_ssize_t))
    if w == NULL or gsum == NULL or gdeaths == NULL or gstart == NULL:
        free(w); free(gsum); free(gdeaths); free(gstart)
        raise MemoryError()
    try:
        with nogil:
            for k in range(n):
                if eta[k] > m:
                    m = eta[k]
            for k in range(n):
                w[k] = exp(eta[k] - m)
            # tie groups over the ascending order
            a = 0
            while a < n:
                b = a
                while b + 1 < n and times[order[b + 1]] == times[order[a]]:
                    b += 1
                gstart[ngroups] = a
                ngroups += 1
                a = b + 1
            gstart[ngroups] = n
            # risk-set sums, largest time first
            for g in range(ngroups - 1, -1, -1):
                for k in range(gstart[g], gstart[g + 1]):
                    idx = order[k]
                    s += w[idx]
                    gdeaths[g] += events[idx]
                gsum[g] = s
            for g in range(ngroups):
                if gdeaths[g] > 0:
                    logs = log(gsum[g]) + m
                    for k in range(gstart[g], gstart[g + 1]):
                        idx = order[k]
                        if events[idx]:
                            ll += eta[idx] - logs
            # grad_k = delta_k - w_k * sum_{g: t_g <= t_k} d_g / S_g
            acc = 0.0
            for g in range(ngroups):
                acc += gdeaths[g] / gsum[g]
                for k in range(gstart[g], gstart[g + 1]):
                    idx = order[k]
                    grad[idx] = events[idx] - w[idx] * acc
    finally:
        free(w); free(gsum); free(gdeaths); free(gstart)
    return ll, grad_arr


def logrank_best_split(const double[::1] x, const cnp.intp_t[::1] at_risk_upto,
                       const cnp.int8_t[::1] events, Py_ssize_t n_times):
    """Scan every midpoint threshold of ``x`` for the largest two-sample logrank statistic.

    Sample ``s`` is at risk at node event times ``0 .. at_risk_upto[s]-1``; an event
    sample dies at index ``at_risk_upto[s]-1``. Returns ``(best_stat, threshold)``;
    ``best_stat`` is 0.0 and ``threshold`` NaN when no split has positive variance.
    """
    cdef Py_ssize_t n = x.shape[0]
    cdef Py_ssize_t i, k, s, r
    cdef double num, var, nk, dk, nl, frac, stat
    cdef double best = 0.0
    cdef double thr = np.nan
    cdef cnp.intp_t[::1] order = np.argsort(np.asarray(x), kind="mergesort")
    if n_times == 0 or n < 2:
        return 0.0, thr
    cdef double *ntot = <double *> calloc(n_times, sizeof(double))
    cdef double *dtot = <double *> calloc(n_times, sizeof(double))
    cdef double *nleft = <double *> calloc(n_times, sizeof(double))
    cdef double *dleft = <double *> calloc(n_times, sizeof(double))
    if ntot == NULL or dtot == NULL or nleft == NULL or dleft == NULL:
        free(ntot); free(dtot); free(nleft); free(dleft)
        raise MemoryError()
    try:
        with nogil:
            for s in range(n):
                r = at_risk_upto[s]
                for k in range(r):
                    ntot[k] += 1.0
                if events[s] and r > 0:
                    dtot[r - 1] += 1.0
            for i in range(n - 1):
                s = order[i]
                r = at_risk_upto[s]
                for k in range(r):
                    nleft[k] += 1.0
                if events[s] and r > 0:
                    dleft[r - 1] += 1.0
                if x[order[i]] == x[order[i + 1]]:
                    continue
                num = 0.0
                var = 0.0
                for k in range(n_times):
                    nk = ntot[k]
                    dk = dtot[k]
                    if dk == 0.0 or nk == 0.0:
                        continue
                    nl = nleft[k]
                    frac = nl / nk
                    num += dleft[k] - frac * dk
                    if nk > 1.0:
                        var += frac * (1.0 - frac) * dk * (nk - dk) / (nk - 1.0)
                if var > 1e-12:
                    stat = num * num / var
                    if stat > best:
                        best = stat
                        thr = 0.5 * (x[order[i]] + x[order[i + 1]])
    finally:
        free(ntot); free(dtot); free(nleft); free(dleft)
    return best, thr
