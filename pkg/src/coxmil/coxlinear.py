"""Linear Cox proportional hazards model fitted by Newton-Raphson (Breslow ties)."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .survcore import Cohort


class SingularHessianError(np.linalg.LinAlgError):
    pass


@dataclass(frozen=True)
class CoxModel:
    """Fitted coefficients live in standardized covariate space.

    ``predict_risk`` applies ``(x - center) / scale`` before the dot product, so a
    model built by hand with the default center/scale is a plain ``x @ beta``.
    """

    beta: np.ndarray
    log_likelihood: float = 0.0
    n_iterations: int = 0
    converged: bool = True
    center: np.ndarray | None = None
    scale: np.ndarray | None = None
    history: tuple[float, ...] = field(default=(), repr=False)

    @property
    def coef(self) -> np.ndarray:
        """Coefficients per original covariate unit."""
        scale = np.ones_like(self.beta) if self.scale is None else self.scale
        return self.beta / scale

    def standardize(self, x) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        if x.shape[1] != self.beta.size:
            raise ValueError(f"covariate width {x.shape[1]} does not match model width {self.beta.size}")
        if self.center is not None:
            x = x - self.center
        if self.scale is not None:
            x = x / self.scale
        return x


@dataclass(frozen=True)
class BaselineHazard:
    times: np.ndarray
    cumulative_hazard: np.ndarray

    @property
    def points(self) -> list[tuple[float, float]]:
        return list(zip(self.times.tolist(), self.cumulative_hazard.tolist()))


def partial_log_likelihood(beta, times, events, x) -> float:
    """Breslow log partial likelihood of ``x @ beta`` (not averaged)."""
    eta = np.asarray(x, dtype=float) @ np.asarray(beta, dtype=float)
    return kernels.breslow_loglik(times, events, eta)[0]


def score_vector(beta, times, events, x) -> np.ndarray:
    """Gradient of ``partial_log_likelihood`` with respect to beta."""
    x = np.asarray(x, dtype=float)
    _, grad_eta = kernels.breslow_loglik(times, events, x @ np.asarray(beta, dtype=float))
    return x.T @ grad_eta


def observed_information(beta, times, events, x) -> np.ndarray:
    """Negative Hessian of the Breslow log partial likelihood."""
    x = np.asarray(x, dtype=float)
    times = np.asarray(times, dtype=float)
    events = np.asarray(events, dtype=float)
    eta = x @ beta
    w = np.exp(eta - eta.max())
    order = np.argsort(-times, kind="mergesort")
    ts = times[order]
    xs, ws, es = x[order], w[order], events[order]
    # cumulative risk-set sums with ties closed to the last tied index
    s0 = np.cumsum(ws)
    s1 = np.cumsum(ws[:, None] * xs, axis=0)
    s2 = np.cumsum(ws[:, None, None] * xs[:, :, None] * xs[:, None, :], axis=0)
    last = np.searchsorted(-ts, -ts, side="right") - 1
    info = np.zeros((x.shape[1], x.shape[1]))
    for i in np.flatnonzero(es):
        j = last[i]
        mean = s1[j] / s0[j]
        info += s2[j] / s0[j] - np.outer(mean, mean)
    return info


def fit_cox(cohort: Cohort | None = None, tol: float = 1e-9, max_iter: int = 100, *,
            times=None, events=None, covariates=None, max_halving: int = 10,
            standardize: bool = True) -> CoxModel:
    """Newton-Raphson with step halving on the Breslow partial likelihood.

    Constant columns carry no information about risk ordering; their coefficient is
    held at zero. Singular information among the remaining columns raises
    ``SingularHessianError``.
    """
    if cohort is not None:
        times, events, covariates = cohort.times, cohort.events, cohort.covariates
    times = np.asarray(times, dtype=float)
    events = np.asarray(events, dtype=int)
    x = np.atleast_2d(np.asarray(covariates, dtype=float))
    if events.sum() == 0:
        raise ValueError("cannot fit Cox model: cohort has no events")
    p = x.shape[1]
    if standardize:
        center = x.mean(axis=0)
        scale = x.std(axis=0)
        scale = np.where(scale > 0, scale, 1.0)
    else:
        center, scale = np.zeros(p), np.ones(p)
    z = (x - center) / scale
    active = np.ptp(z, axis=0) > 0
    za = z[:, active]

    beta_a = np.zeros(active.sum())
    ll = partial_log_likelihood(beta_a, times, events, za)
    history = [ll]
    converged = active.sum() == 0
    n_iter = 0
    while not converged and n_iter < max_iter:
        n_iter += 1
        grad = score_vector(beta_a, times, events, za)
        info = observed_information(beta_a, times, events, za)
        try:
            if np.linalg.cond(info) > 1e12:
                raise np.linalg.LinAlgError
            step = np.linalg.solve(info, grad)
        except np.linalg.LinAlgError:
            raise SingularHessianError(
                "Hessian is singular; check covariates for collinearity or perfect separation"
            ) from None
        new_ll = partial_log_likelihood(beta_a + step, times, events, za)
        halvings = 0
        while (not np.isfinite(new_ll) or new_ll < ll) and halvings < max_halving:
            step = step / 2
            new_ll = partial_log_likelihood(beta_a + step, times, events, za)
            halvings += 1
        if not np.isfinite(new_ll) or new_ll < ll:
            break
        beta_a = beta_a + step
        delta = new_ll - ll
        ll = new_ll
        history.append(ll)
        if abs(delta) < tol:
            converged = True

    beta = np.zeros(p)
    beta[active] = beta_a
    return CoxModel(beta=beta, log_likelihood=float(ll), n_iterations=n_iter,
                    converged=bool(converged), center=center, scale=scale,
                    history=tuple(history))


def predict_risk(model: CoxModel, covariates) -> np.ndarray:
    """Log-risk ``beta . x`` per row (after the model's standardization)."""
    return model.standardize(covariates) @ model.beta


def breslow_baseline(model: CoxModel, cohort: Cohort | None = None, *, times=None,
                     events=None, covariates=None) -> BaselineHazard:
    """Breslow cumulative baseline hazard at each distinct event time."""
    if cohort is not None:
        times, events, covariates = cohort.times, cohort.events, cohort.covariates
    times = np.asarray(times, dtype=float)
    events = np.asarray(events, dtype=int)
    risk = np.exp(predict_risk(model, covariates))
    ev_times = np.unique(times[events == 1])
    increments = np.array([
        events[times == t].sum() / risk[times >= t].sum() for t in ev_times
    ])
    return BaselineHazard(ev_times, np.cumsum(increments) if increments.size else np.zeros(0))
