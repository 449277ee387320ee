"""Survival statistics: risk sets, Kaplan-Meier, logrank, Harrell's C-index."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from . import kernels


class UndefinedCIndexError(ValueError):
    """Raised when a cohort has no permissible pair to compare."""


@dataclass(frozen=True)
class SurvivalRecord:
    patient_id: str
    time: float
    event: int
    covariates: tuple[float, ...] | None = None

    def __post_init__(self):
        if not (self.time >= 0 and math.isfinite(self.time)):
            raise ValueError(f"{self.patient_id}: time must be finite and >= 0, got {self.time}")
        if self.event not in (0, 1):
            raise ValueError(f"{self.patient_id}: event must be 0 or 1, got {self.event}")


@dataclass
class Cohort:
    records: list[SurvivalRecord]

    def __post_init__(self):
        self.records = list(self.records)
        if not self.records:
            raise ValueError("cohort is empty")
        seen = set()
        for r in self.records:
            if r.patient_id in seen:
                raise ValueError(f"duplicate patient_id {r.patient_id!r}")
            seen.add(r.patient_id)
        widths = {None if r.covariates is None else len(r.covariates) for r in self.records}
        if len(widths) > 1:
            raise ValueError(f"inconsistent covariate lengths across cohort: {sorted(map(str, widths))}")

    @classmethod
    def from_arrays(cls, times, events, covariates=None, ids=None) -> "Cohort":
        times = np.asarray(times, dtype=float)
        events = np.asarray(events, dtype=int)
        if ids is None:
            ids = [f"p{i}" for i in range(len(times))]
        recs = []
        for i, pid in enumerate(ids):
            cov = None if covariates is None else tuple(float(v) for v in np.asarray(covariates)[i])
            recs.append(SurvivalRecord(str(pid), float(times[i]), int(events[i]), cov))
        return cls(recs)

    def __len__(self):
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    @property
    def ids(self) -> list[str]:
        return [r.patient_id for r in self.records]

    @property
    def times(self) -> np.ndarray:
        return np.array([r.time for r in self.records], dtype=float)

    @property
    def events(self) -> np.ndarray:
        return np.array([r.event for r in self.records], dtype=int)

    @property
    def covariates(self) -> np.ndarray:
        if self.records[0].covariates is None:
            raise ValueError("cohort has no tabular covariates")
        return np.array([r.covariates for r in self.records], dtype=float)

    @property
    def n_events(self) -> int:
        return int(sum(r.event for r in self.records))

    def subset(self, indices: Iterable[int]) -> "Cohort":
        return Cohort([self.records[i] for i in indices])


@dataclass(frozen=True)
class KmPoint:
    time: float
    survival: float
    at_risk: int
    events: int


@dataclass
class KmCurve:
    """Kaplan-Meier step function; S(t) = 1 before the first point."""

    points: list[KmPoint] = field(default_factory=list)

    @property
    def times(self) -> np.ndarray:
        return np.array([p.time for p in self.points], dtype=float)

    @property
    def survival(self) -> np.ndarray:
        return np.array([p.survival for p in self.points], dtype=float)

    def survival_at(self, t) -> np.ndarray | float:
        times = self.times
        surv = np.r_[1.0, self.survival]
        out = surv[np.searchsorted(times, t, side="right")]
        return float(out) if np.ndim(out) == 0 else out


@dataclass(frozen=True)
class LogrankResult:
    statistic: float
    p_value: float


@dataclass(frozen=True)
class CIndexResult:
    c_index: float
    concordant: int
    discordant: int
    tied_risk: int
    permissible: int


def _times_events(data) -> tuple[np.ndarray, np.ndarray]:
    if isinstance(data, Cohort):
        return data.times, data.events
    times, events = data
    return np.asarray(times, dtype=float), np.asarray(events, dtype=int)


def risk_set(cohort: Cohort, i: int) -> set[int]:
    """Indices j with t_j >= t_i (ties and i itself included)."""
    n = len(cohort)
    if not 0 <= i < n:
        raise IndexError(f"patient index {i} out of range for cohort of {n}")
    times = cohort.times
    return set(np.flatnonzero(times >= times[i]).tolist())


def kaplan_meier(data) -> KmCurve:
    """Product-limit estimate. Accepts a Cohort or a ``(times, events)`` pair."""
    times, events = _times_events(data)
    if times.size == 0:
        raise ValueError("cannot estimate Kaplan-Meier curve for an empty cohort")
    uniq, inverse = np.unique(times, return_inverse=True)
    removed = np.bincount(inverse, minlength=uniq.size)
    deaths = np.bincount(inverse, weights=events, minlength=uniq.size).astype(int)
    at_risk = times.size - np.r_[0, np.cumsum(removed)[:-1]]
    s = 1.0
    points = []
    for t, n, d in zip(uniq, at_risk, deaths):
        if d == 0:
            continue
        s *= 1.0 - d / n
        points.append(KmPoint(float(t), s, int(n), int(d)))
    return KmCurve(points)


def nelson_aalen(times, events, grid=None) -> tuple[np.ndarray, np.ndarray]:
    """Cumulative hazard at each distinct event time, or evaluated on ``grid``."""
    times = np.asarray(times, dtype=float)
    events = np.asarray(events, dtype=int)
    uniq, inverse = np.unique(times, return_inverse=True)
    removed = np.bincount(inverse, minlength=uniq.size)
    deaths = np.bincount(inverse, weights=events, minlength=uniq.size)
    at_risk = times.size - np.r_[0, np.cumsum(removed)[:-1]]
    mask = deaths > 0
    ev_times = uniq[mask]
    chf = np.cumsum(deaths[mask] / at_risk[mask])
    if grid is None:
        return ev_times, chf
    idx = np.searchsorted(ev_times, grid, side="right")
    return np.asarray(grid, dtype=float), np.r_[0.0, chf][idx]


def chi2_sf_1df(x: float) -> float:
    """Upper tail of chi-square with one degree of freedom."""
    if x <= 0:
        return 1.0
    return math.erfc(math.sqrt(x / 2.0))


def logrank_arrays(times, events, in_group_a) -> LogrankResult:
    times = np.asarray(times, dtype=float)
    events = np.asarray(events, dtype=int)
    in_a = np.asarray(in_group_a, dtype=bool)
    uniq, inverse = np.unique(times, return_inverse=True)
    removed = np.bincount(inverse, minlength=uniq.size)
    removed_a = np.bincount(inverse, weights=in_a, minlength=uniq.size)
    deaths = np.bincount(inverse, weights=events, minlength=uniq.size)
    deaths_a = np.bincount(inverse, weights=events * in_a, minlength=uniq.size)
    n = times.size - np.r_[0, np.cumsum(removed)[:-1]]
    n_a = in_a.sum() - np.r_[0, np.cumsum(removed_a)[:-1]]
    mask = deaths > 0
    n, n_a, d, d_a = n[mask], n_a[mask], deaths[mask], deaths_a[mask]
    observed_minus_expected = float(np.sum(d_a - n_a * d / n))
    multi = n > 1
    var = float(np.sum(n_a[multi] * (n[multi] - n_a[multi]) * d[multi] * (n[multi] - d[multi])
                       / (n[multi] ** 2 * (n[multi] - 1))))
    if var <= 1e-15:
        return LogrankResult(0.0, 1.0)
    stat = observed_minus_expected ** 2 / var
    return LogrankResult(stat, chi2_sf_1df(stat))


def logrank_test(group_a, group_b) -> LogrankResult:
    """Two-sample logrank test, no continuity correction.

    Groups are Cohorts or ``(times, events)`` pairs. Degenerate inputs (no events,
    zero variance) give statistic 0 and p 1.
    """
    ta, ea = _times_events(group_a)
    tb, eb = _times_events(group_b)
    times = np.r_[ta, tb]
    events = np.r_[ea, eb]
    in_a = np.r_[np.ones(ta.size, bool), np.zeros(tb.size, bool)]
    return logrank_arrays(times, events, in_a)


def c_index(times: Sequence[float], events: Sequence[int], risks: Sequence[float]) -> CIndexResult:
    """Harrell's C. Pairs with t_i < t_j and an event at i are permissible;
    tied risks score 0.5, tied times are skipped."""
    times = np.asarray(times, dtype=float)
    events = np.asarray(events, dtype=int)
    risks = np.asarray(risks, dtype=float)
    if not (times.shape == events.shape == risks.shape) or times.ndim != 1:
        raise ValueError(f"length mismatch: times {times.shape}, events {events.shape}, risks {risks.shape}")
    if not np.all(np.isfinite(risks)):
        raise ValueError("risk scores contain non-finite values")
    conc, disc, tied, perm = kernels.concordance_counts(times, events, risks)
    if perm == 0:
        raise UndefinedCIndexError("no permissible pairs: C-index undefined")
    return CIndexResult((conc + 0.5 * tied) / perm, conc, disc, tied, perm)
