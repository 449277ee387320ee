"""NumPy implementations of the compiled kernels, same signatures and results."""
import numpy as np


def concordance_counts(times, events, risks):
    times = np.asarray(times, dtype=np.float64)
    events = np.asarray(events).astype(bool)
    risks = np.asarray(risks, dtype=np.float64)
    conc = disc = tied = 0
    # row blocks keep the pair matrix small for large cohorts
    idx = np.flatnonzero(events)
    for start in range(0, idx.size, 256):
        rows = idx[start:start + 256]
        later = times[rows, None] < times[None, :]
        diff = risks[rows, None] - risks[None, :]
        conc += int(np.count_nonzero(later & (diff > 0)))
        disc += int(np.count_nonzero(later & (diff < 0)))
        tied += int(np.count_nonzero(later & (diff == 0)))
    return conc, disc, tied, conc + disc + tied


def breslow_loglik(times, events, eta, order):
    times = np.asarray(times, dtype=np.float64)
    events = np.asarray(events, dtype=np.float64)
    eta = np.asarray(eta, dtype=np.float64)
    m = eta.max()
    w = np.exp(eta - m)
    t_sorted = times[order]
    # group id of each sorted position, ties share a group
    new_group = np.r_[True, t_sorted[1:] != t_sorted[:-1]]
    gid = np.cumsum(new_group) - 1
    ngroups = gid[-1] + 1
    gw = np.bincount(gid, weights=w[order], minlength=ngroups)
    gd = np.bincount(gid, weights=events[order], minlength=ngroups)
    risk_sum = np.cumsum(gw[::-1])[::-1]
    log_risk = np.log(risk_sum) + m
    ll = float(np.sum(events[order] * (eta[order] - log_risk[gid])))
    hazard_acc = np.cumsum(gd / risk_sum)
    grad = np.empty_like(eta)
    grad[order] = events[order] - w[order] * hazard_acc[gid]
    return ll, grad


def logrank_best_split(x, at_risk_upto, events, n_times):
    x = np.asarray(x, dtype=np.float64)
    n = x.size
    if n_times == 0 or n < 2:
        return 0.0, float("nan")
    order = np.argsort(x, kind="mergesort")
    r = np.asarray(at_risk_upto)[order]
    ev = np.asarray(events)[order].astype(np.float64)
    grid = np.arange(n_times)
    at_risk = (grid[None, :] < r[:, None]).astype(np.float64)
    died = ((grid[None, :] == r[:, None] - 1) & (ev[:, None] > 0)).astype(np.float64)
    ntot = at_risk.sum(axis=0)
    dtot = died.sum(axis=0)
    nleft = np.cumsum(at_risk, axis=0)[:-1]
    dleft = np.cumsum(died, axis=0)[:-1]
    keep = (dtot > 0) & (ntot > 0)
    nk, dk = ntot[keep], dtot[keep]
    frac = nleft[:, keep] / nk
    num = np.sum(dleft[:, keep] - frac * dk, axis=1)
    with np.errstate(invalid="ignore", divide="ignore"):
        vterm = np.where(nk > 1, frac * (1 - frac) * dk * (nk - dk) / np.maximum(nk - 1, 1), 0.0)
    var = vterm.sum(axis=1)
    xs = x[order]
    valid = (xs[:-1] != xs[1:]) & (var > 1e-12)
    if not valid.any():
        return 0.0, float("nan")
    stat = np.zeros(n - 1)
    stat[valid] = num[valid] ** 2 / var[valid]
    best = int(np.argmax(stat))
    if stat[best] <= 0.0:
        return 0.0, float("nan")
    return float(stat[best]), 0.5 * (xs[best] + xs[best + 1])
