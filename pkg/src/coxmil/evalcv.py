"""K-fold cross-validation, median-risk stratification and report files."""
from __future__ import annotations

import csv
import json
import logging
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import amil, coxlinear, rsf
from .amil import PackedBags, TrainConfig
from .data import Manifest
from .survcore import (
    Cohort,
    KmCurve,
    LogrankResult,
    UndefinedCIndexError,
    c_index,
    kaplan_meier,
    logrank_arrays,
)
from .svgplot import render_km_svg

log = logging.getLogger(__name__)

MODEL_KINDS = ("amil", "amil_per_core", "maxpool", "deepsurv", "cox", "rsf")
BAG_MODELS = ("amil", "amil_per_core", "maxpool")


@dataclass
class RiskScores:
    ids: list[str]
    values: np.ndarray
    folds: np.ndarray | None = None

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if len(self.ids) != self.values.size:
            raise ValueError("ids and risk values differ in length")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("risk scores contain non-finite values")

    def aligned_to(self, cohort: Cohort) -> np.ndarray:
        lookup = dict(zip(self.ids, self.values))
        missing = [pid for pid in cohort.ids if pid not in lookup]
        if missing or len(lookup) != len(cohort):
            raise ValueError(f"risk scores do not cover the cohort exactly (missing {missing[:5]})")
        return np.array([lookup[pid] for pid in cohort.ids])


@dataclass
class FoldPlan:
    k: int
    seed: int
    assignments: dict[str, int]

    def fold_indices(self, ids: list[str]) -> list[np.ndarray]:
        fold = np.array([self.assignments[i] for i in ids])
        return [np.flatnonzero(fold == f) for f in range(self.k)]


def make_folds(cohort: Cohort, k: int = 10, seed: int = 0, stratify: bool = False) -> FoldPlan:
    """Seeded shuffle, then round-robin. ``stratify`` deals events and censored separately."""
    n = len(cohort)
    if not 1 <= k <= n:
        raise ValueError(f"k={k} folds impossible for {n} patients")
    rng = np.random.default_rng(seed)
    if stratify:
        ev = cohort.events
        order = np.r_[rng.permutation(np.flatnonzero(ev == 1)), rng.permutation(np.flatnonzero(ev == 0))]
    else:
        order = rng.permutation(n)
    ids = cohort.ids
    return FoldPlan(k, seed, {ids[i]: pos % k for pos, i in enumerate(order)})


@dataclass
class CvConfig:
    k: int = 10
    seed: int = 0
    epochs: int = 200
    learning_rate: float = 1e-4
    l1_lambda: float = 1e-5
    proj_activation: str = "linear"
    n_trees: int = 100
    threads: int = 1
    stratify_folds: bool = False
    pooled_c: bool = False


@dataclass
class CvDataset:
    """A cohort plus lazily loaded feature bags (only touched by bag models)."""

    cohort: Cohort
    manifest: Manifest | None = None
    _bags: PackedBags | None = field(default=None, repr=False)
    _core_bags: list | None = field(default=None, repr=False)

    @classmethod
    def from_manifest(cls, manifest: Manifest) -> "CvDataset":
        return cls(manifest.cohort(), manifest)

    def bags(self) -> PackedBags:
        if self._bags is None:
            if self.manifest is None:
                raise ValueError("dataset has no feature bags")
            self._bags = PackedBags.from_bags(self.manifest.bags())
        return self._bags

    def core_bags(self) -> list:
        if self._core_bags is None:
            if self.manifest is None:
                raise ValueError("dataset has no feature bags")
            self._core_bags = self.manifest.core_bags()
        return self._core_bags


@dataclass
class FoldResult:
    fold: int
    c_index: float | None
    test_ids: list[str]
    test_risks: np.ndarray | None
    error: str | None = None


@dataclass
class CvReport:
    model_kind: str
    k: int
    seed: int
    folds: list[FoldResult]
    pooled: RiskScores
    km_high: KmCurve
    km_low: KmCurve
    logrank: LogrankResult
    degenerate: bool = False
    c_pooled: float | None = None
    t_max: float = 0.0

    @property
    def c_values(self) -> list[float]:
        return [f.c_index for f in self.folds if f.c_index is not None]

    @property
    def invalid_folds(self) -> int:
        return sum(f.c_index is None for f in self.folds)

    @property
    def c_mean(self) -> float:
        return float(np.mean(self.c_values)) if self.c_values else float("nan")

    @property
    def c_std(self) -> float:
        return float(np.std(self.c_values)) if self.c_values else float("nan")

    @property
    def c_median(self) -> float:
        return float(np.median(self.c_values)) if self.c_values else float("nan")

    def summary(self) -> dict:
        out = {"model_kind": self.model_kind, "k": self.k, "seed": self.seed,
               "c_mean": self.c_mean, "c_std": self.c_std, "c_median": self.c_median,
               "logrank_p": self.logrank.p_value, "invalid_folds": self.invalid_folds}
        if self.c_pooled is not None:
            out["c_pooled"] = self.c_pooled
        return out


def derive_seed(seed: int, *stream: int) -> int:
    return int(np.random.SeedSequence([seed, *stream]).generate_state(1)[0])


def _train_config(cfg: CvConfig, kind: str, seed: int) -> TrainConfig:
    return TrainConfig(epochs=cfg.epochs, learning_rate=cfg.learning_rate, l1_lambda=cfg.l1_lambda,
                       seed=seed, model_kind=kind, proj_activation=cfg.proj_activation)


def fit_predict(dataset: CvDataset, model_kind: str, train_idx, test_idx, cfg: CvConfig,
                seed: int) -> np.ndarray:
    """Fit ``model_kind`` on ``train_idx`` and return log-risk (or mortality) for ``test_idx``."""
    cohort = dataset.cohort
    train_c = cohort.subset(train_idx)
    if model_kind == "cox":
        model = coxlinear.fit_cox(train_c)
        return coxlinear.predict_risk(model, cohort.subset(test_idx).covariates)
    if model_kind == "rsf":
        forest = rsf.fit_forest(train_c, rsf.ForestConfig(n_trees=cfg.n_trees, seed=seed))
        return rsf.predict_mortality(forest, cohort.subset(test_idx).covariates)
    if model_kind == "deepsurv":
        res = amil.train(train_c.covariates, train_c, _train_config(cfg, "deepsurv", seed))
        return res.model.forward(cohort.subset(test_idx).covariates)
    if model_kind in ("amil", "maxpool"):
        bags = dataset.bags()
        res = amil.train(bags.subset(train_idx), train_c, _train_config(cfg, model_kind, seed))
        return res.model.forward(bags.subset(test_idx))
    if model_kind == "amil_per_core":
        cores = dataset.core_bags()
        train_bags, t, e = [], [], []
        for i in train_idx:
            rec = cohort.records[i]
            for b in cores[i]:
                train_bags.append(b)
                t.append(rec.time)
                e.append(rec.event)
        res = amil.train(train_bags, (np.array(t), np.array(e)), _train_config(cfg, "amil", seed))
        test_bags = [b for i in test_idx for b in cores[i]]
        per_core = res.model.forward(test_bags)
        counts = [len(cores[i]) for i in test_idx]
        return np.add.reduceat(per_core, np.r_[0, np.cumsum(counts)[:-1]]) / np.array(counts)
    raise ValueError(f"unknown model kind {model_kind!r}; expected one of {MODEL_KINDS}")


def stratify_and_compare(pooled: RiskScores, cohort: Cohort) -> tuple[KmCurve, KmCurve, LogrankResult]:
    """Split at the median risk (ties go low), KM per group, logrank between them."""
    risks = pooled.aligned_to(cohort)
    high = risks > np.median(risks)
    if not high.any():
        warnings.warn("all risk scores tie at the median; every patient falls in the low-risk group",
                      RuntimeWarning, stacklevel=2)
    times, events = cohort.times, cohort.events
    km_high = kaplan_meier((times[high], events[high])) if high.any() else KmCurve()
    km_low = kaplan_meier((times[~high], events[~high])) if (~high).any() else KmCurve()
    return km_high, km_low, logrank_arrays(times, events, high)


def run_cv(dataset: CvDataset | Cohort, model_kind: str, config: CvConfig | None = None) -> CvReport:
    cfg = config or CvConfig()
    if isinstance(dataset, Cohort):
        dataset = CvDataset(dataset)
    model_kind = model_kind.replace("-", "_")
    if model_kind not in MODEL_KINDS:
        raise ValueError(f"unknown model kind {model_kind!r}; expected one of {MODEL_KINDS}")
    cohort = dataset.cohort
    plan = make_folds(cohort, cfg.k, cfg.seed, stratify=cfg.stratify_folds)
    folds = plan.fold_indices(cohort.ids)
    ids, times, events = cohort.ids, cohort.times, cohort.events
    if model_kind in BAG_MODELS:
        # load once up front so worker threads share read-only data
        dataset.core_bags() if model_kind == "amil_per_core" else dataset.bags()

    def run_fold(f: int) -> FoldResult:
        test_idx = folds[f]
        train_idx = np.sort(np.concatenate([folds[g] for g in range(cfg.k) if g != f]))
        test_ids = [ids[i] for i in test_idx]
        if events[train_idx].sum() == 0:
            return FoldResult(f, None, test_ids, None, "no events in training folds")
        risks = fit_predict(dataset, model_kind, train_idx, test_idx, cfg, derive_seed(cfg.seed, f))
        try:
            c = c_index(times[test_idx], events[test_idx], risks).c_index
            err = None
        except UndefinedCIndexError as exc:
            c, err = None, str(exc)
        log.info("%s fold %d/%d: C=%s", model_kind, f + 1, cfg.k, "n/a" if c is None else f"{c:.4f}")
        return FoldResult(f, c, test_ids, np.asarray(risks, dtype=float), err)

    if cfg.threads > 1:
        with ThreadPoolExecutor(cfg.threads) as pool:
            results = list(pool.map(run_fold, range(cfg.k)))
    else:
        results = [run_fold(f) for f in range(cfg.k)]

    pooled_ids, pooled_vals, pooled_folds = [], [], []
    for r in results:
        if r.test_risks is None:
            continue
        pooled_ids += r.test_ids
        pooled_vals.append(r.test_risks)
        pooled_folds += [r.fold] * len(r.test_ids)
    pooled = RiskScores(pooled_ids, np.concatenate(pooled_vals) if pooled_vals else np.zeros(0),
                        np.array(pooled_folds))
    pooled_cohort = Cohort([rec for rec in cohort.records if rec.patient_id in set(pooled_ids)])
    degenerate = pooled.values.size > 0 and np.ptp(pooled.values) == 0
    if degenerate:
        warnings.warn(f"{model_kind}: every pooled risk score is identical (degenerate predictor)",
                      RuntimeWarning, stacklevel=2)
    km_high, km_low, lr = stratify_and_compare(pooled, pooled_cohort)
    c_pooled = None
    if cfg.pooled_c:
        c_pooled = c_index(pooled_cohort.times, pooled_cohort.events,
                           pooled.aligned_to(pooled_cohort)).c_index
    return CvReport(model_kind, cfg.k, cfg.seed, results, pooled, km_high, km_low, lr,
                    degenerate, c_pooled, float(times.max()))


def write_km_csv(path, curve: KmCurve) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["time", "survival", "at_risk", "events"])
        for p in curve.points:
            w.writerow([repr(float(p.time)), repr(float(p.survival)), int(p.at_risk), int(p.events)])


def write_predictions_csv(path, pooled: RiskScores, cohort: Cohort) -> None:
    rec = {r.patient_id: r for r in cohort.records}
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["patient_id", "time", "event", "risk", "fold"])
        for i, (pid, v) in enumerate(zip(pooled.ids, pooled.values)):
            fold = "" if pooled.folds is None else int(pooled.folds[i])
            w.writerow([pid, repr(float(rec[pid].time)), rec[pid].event, repr(float(v)), fold])


def read_predictions_csv(path) -> tuple[RiskScores, Cohort]:
    ids, risks, times, events = [], [], [], []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        missing = {"patient_id", "time", "event", "risk"} - set(reader.fieldnames or [])
        if missing:
            raise ValueError(f"{path}: predictions CSV lacks columns {sorted(missing)}")
        for row in reader:
            ids.append(row["patient_id"])
            times.append(float(row["time"]))
            events.append(int(row["event"]))
            risks.append(float(row["risk"]))
    return RiskScores(ids, np.array(risks)), Cohort.from_arrays(times, events, ids=ids)


def emit_km(out_dir, km_high: KmCurve, km_low: KmCurve, logrank: LogrankResult, t_max: float,
            title: str = "Kaplan-Meier by predicted risk") -> list[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = [out / "km_high.csv", out / "km_low.csv", out / "km.svg"]
    write_km_csv(paths[0], km_high)
    write_km_csv(paths[1], km_low)
    svg = render_km_svg({"high risk": km_high, "low risk": km_low}, t_max, logrank.p_value, title)
    paths[2].write_text(svg)
    return paths


def emit_report(report: CvReport, out_dir, cohort: Cohort | None = None) -> list[Path]:
    """Write cindex.csv, summary.json, km_high.csv, km_low.csv, km.svg (+ predictions.csv)."""
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        written = [out / "cindex.csv", out / "summary.json"]
        with open(written[0], "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["fold", "value"])
            for f in report.folds:
                if f.c_index is not None:
                    w.writerow([f.fold, repr(float(f.c_index))])
        written[1].write_text(json.dumps(report.summary(), indent=2) + "\n")
        written += emit_km(out, report.km_high, report.km_low, report.logrank, report.t_max,
                           f"{report.model_kind}: Kaplan-Meier by median predicted risk")
        if cohort is not None:
            p = out / "predictions.csv"
            write_predictions_csv(p, report.pooled, cohort)
            written.append(p)
    except OSError as exc:
        raise OSError(f"failed writing report to {out}: {exc}") from exc
    return written
