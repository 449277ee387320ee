import csv
import json
import xml.etree.ElementTree as ET

import numpy as np
import pytest

from coxmil import evalcv
from coxmil.evalcv import CvConfig, RiskScores, make_folds, run_cv, stratify_and_compare
from coxmil.survcore import Cohort

from conftest import random_cohort


def cohort_of(n, rng=None, p=3):
    rng = rng or np.random.default_rng(0)
    t, e = random_cohort(rng, n)
    e[0] = 1
    return Cohort.from_arrays(t, e, covariates=rng.normal(size=(n, p)))


class TestFolds:
    def test_leave_one_out(self):
        c = cohort_of(10)
        plan = make_folds(c, k=10, seed=0)
        folds = plan.fold_indices(c.ids)
        assert sorted(len(f) for f in folds) == [1] * 10
        assert sorted(np.concatenate(folds).tolist()) == list(range(10))

    def test_sizes_uneven(self):
        c = cohort_of(33)
        folds = make_folds(c, k=10, seed=5).fold_indices(c.ids)
        assert sorted(len(f) for f in folds) == [3] * 7 + [4] * 3

    def test_seeded(self):
        c = cohort_of(20)
        assert make_folds(c, 5, 1).assignments == make_folds(c, 5, 1).assignments
        assert make_folds(c, 5, 1).assignments != make_folds(c, 5, 2).assignments

    def test_stratified_balances_events(self, rng):
        t, e = random_cohort(rng, 40, censor_p=0.5)
        c = Cohort.from_arrays(t, e)
        folds = make_folds(c, 4, 0, stratify=True).fold_indices(c.ids)
        counts = [int(e[f].sum()) for f in folds]
        assert max(counts) - min(counts) <= 1

    def test_bad_k(self):
        with pytest.raises(ValueError):
            make_folds(cohort_of(5), k=6)


class TestStratify:
    def test_group_sizes(self, rng):
        c = cohort_of(20, rng)
        high, low, _ = stratify_and_compare(RiskScores(c.ids, rng.normal(size=20)), c)
        assert high.points[0].at_risk + low.points[0].at_risk <= 20
        n_high = sum(p.events for p in high.points) + 0
        assert n_high <= 10

    def test_ties_go_low(self):
        c = Cohort.from_arrays([1, 2, 3, 4], [1, 1, 1, 1])
        high, low, _ = stratify_and_compare(RiskScores(c.ids, [0.0, 1.0, 1.0, 2.0]), c)
        # median is 1.0; only the strictly larger score is high
        assert [p.time for p in high.points] == [4.0]
        assert [p.time for p in low.points] == [1.0, 2.0, 3.0]

    def test_all_tied_warns(self):
        c = Cohort.from_arrays([1, 2, 3], [1, 1, 1])
        with pytest.warns(RuntimeWarning, match="tie"):
            high, low, lr = stratify_and_compare(RiskScores(c.ids, [1.0, 1.0, 1.0]), c)
        assert high.points == [] and lr.p_value == 1.0

    def test_null_logrank_calibrated(self):
        rng = np.random.default_rng(2024)
        passes = 0
        for _ in range(50):
            t = rng.exponential(size=100)
            e = (rng.random(100) < 0.7).astype(int)
            c = Cohort.from_arrays(t, e)
            _, _, lr = stratify_and_compare(RiskScores(c.ids, rng.normal(size=100)), c)
            passes += lr.p_value > 0.05
        assert passes >= 45

    def test_misaligned_scores(self):
        c = Cohort.from_arrays([1, 2], [1, 1])
        with pytest.raises(ValueError):
            RiskScores(["p0"], [1.0]).aligned_to(c)
        with pytest.raises(ValueError):
            RiskScores(["p0", "p1"], [1.0, np.nan])


class TestRunCv:
    @pytest.mark.filterwarnings("ignore:all risk scores tie")
    def test_constant_predictor_flagged(self, monkeypatch):
        c = cohort_of(30)
        monkeypatch.setattr(evalcv, "fit_predict", lambda ds, kind, tr, te, cfg, seed: np.zeros(len(te)))
        with pytest.warns(RuntimeWarning, match="degenerate"):
            rep = run_cv(c, "cox", CvConfig(k=3))
        assert rep.degenerate
        assert all(v == 0.5 for v in rep.c_values)

    def test_cox_deterministic_and_summary(self, rng):
        c = cohort_of(60, rng)
        a = run_cv(c, "cox", CvConfig(k=5, seed=3))
        b = run_cv(c, "cox", CvConfig(k=5, seed=3, threads=3))
        assert a.summary() == b.summary()
        s = a.summary()
        assert set(s) == {"model_kind", "k", "seed", "c_mean", "c_std", "c_median", "logrank_p",
                          "invalid_folds"}
        assert s["c_std"] == pytest.approx(np.std(a.c_values))

    def test_cox_null_calibration(self):
        means = []
        for seed in range(5):
            rng = np.random.default_rng(seed)
            n = 150
            c = Cohort.from_arrays(rng.exponential(size=n), (rng.random(n) < 0.7).astype(int),
                                   covariates=rng.normal(size=(n, 4)))
            means.append(run_cv(c, "cox", CvConfig(k=5, seed=seed)).c_mean)
        assert abs(np.mean(means) - 0.5) < 0.05

    def test_invalid_folds_counted(self):
        # a single event: folds whose test set holds no comparable pair are invalid
        t = np.arange(1.0, 11.0)
        e = np.zeros(10, int)
        e[0] = 1
        c = Cohort.from_arrays(t, e, covariates=np.arange(10.0)[:, None])
        rep = run_cv(c, "cox", CvConfig(k=5))
        assert rep.invalid_folds >= 4
        assert rep.invalid_folds + len(rep.c_values) == 5

    def test_pooled_c(self, rng):
        rep = run_cv(cohort_of(40, rng), "rsf", CvConfig(k=4, n_trees=5, pooled_c=True))
        assert 0 <= rep.summary()["c_pooled"] <= 1

    def test_deepsurv_runs(self, rng):
        rep = run_cv(cohort_of(30, rng), "deepsurv", CvConfig(k=3, epochs=3, learning_rate=1e-3))
        assert len(rep.c_values) == 3

    def test_unknown_model(self):
        with pytest.raises(ValueError, match="unknown model"):
            run_cv(cohort_of(10), "svm", CvConfig(k=2))

    def test_bag_model_needs_bags(self):
        with pytest.raises(ValueError, match="no feature bags"):
            run_cv(cohort_of(10), "amil", CvConfig(k=2, epochs=1))


def test_emit_report(tmp_path, rng):
    c = cohort_of(50, rng)
    rep = run_cv(c, "cox", CvConfig(k=5))
    written = evalcv.emit_report(rep, tmp_path / "out", cohort=c)
    names = {p.name for p in written}
    assert names == {"cindex.csv", "summary.json", "km_high.csv", "km_low.csv", "km.svg", "predictions.csv"}
    rows = list(csv.DictReader(open(tmp_path / "out/cindex.csv")))
    assert len(rows) == 5 - rep.invalid_folds
    assert [float(r["value"]) for r in rows] == rep.c_values
    assert json.loads((tmp_path / "out/summary.json").read_text())["k"] == 5
    svg = ET.parse(tmp_path / "out/km.svg").getroot()
    lines = [el for el in svg.iter() if el.tag.endswith("polyline") and el.get("class") == "km-step"]
    assert len(lines) == 2
    scores, cohort = evalcv.read_predictions_csv(tmp_path / "out/predictions.csv")
    np.testing.assert_array_equal(scores.aligned_to(c), rep.pooled.aligned_to(c))
    assert cohort.times.tolist() == [c.records[c.ids.index(i)].time for i in cohort.ids]


def test_km_csv_matches_curve(tmp_path):
    c = Cohort.from_arrays([1, 2, 2, 3], [1, 1, 0, 1])
    high, low, lr = stratify_and_compare(RiskScores(c.ids, [3.0, 2.0, 1.0, 0.0]), c)
    evalcv.emit_km(tmp_path, high, low, lr, 3.0)
    rows = list(csv.DictReader(open(tmp_path / "km_high.csv")))
    assert [float(r["survival"]) for r in rows] == [p.survival for p in high.points]


def test_derive_seed_streams():
    assert evalcv.derive_seed(0, 1) == evalcv.derive_seed(0, 1)
    assert evalcv.derive_seed(0, 1) != evalcv.derive_seed(0, 2)
