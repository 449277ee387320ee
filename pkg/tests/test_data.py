import logging

import numpy as np
import pytest
from scipy import stats

from coxmil import data
from coxmil.data import ManifestError, SynthConfig, generate_synthetic, load_manifest

HEADER = ",".join(data.MANIFEST_COLUMNS)


def write_cores(tmp_path, rng, sizes):
    """sizes: {name: n_rows}; writes FBAG files of 4 features."""
    (tmp_path / "f").mkdir(exist_ok=True)
    out = {}
    for name, m in sizes.items():
        x = rng.normal(size=(m, 4))
        data.write_fbag(tmp_path / "f" / name, x)
        out[name] = x
    return out


def write_manifest_text(tmp_path, lines):
    p = tmp_path / "manifest.csv"
    p.write_text("\n".join([HEADER, *lines]) + "\n")
    return p


class TestManifest:
    def test_valid(self, tmp_path, rng):
        write_cores(tmp_path, rng, {"a0.fbag": 3, "a1.fbag": 2, "b0.fbag": 4})
        p = write_manifest_text(tmp_path, [
            "A,10.5,1,60,M,yes,IIIb,G2,f/a0.fbag;f/a1.fbag",
            "B,3,0,71.2,1,0,2,3,f/b0.fbag",
        ])
        manifest, cohort = load_manifest(p)
        assert cohort.ids == ["A", "B"]
        assert cohort.times.tolist() == [10.5, 3.0]
        assert cohort.events.tolist() == [1, 0]
        np.testing.assert_array_equal(cohort.covariates, [[60, 0, 1, 3, 2], [71.2, 1, 0, 2, 3]])
        assert [b.n_patches for b in manifest.bags()] == [5, 4]
        assert [[b.patient_id for b in bs] for bs in manifest.core_bags()] == [["A#0", "A#1"], ["B#0"]]

    def test_duplicate_id(self, tmp_path, rng):
        write_cores(tmp_path, rng, {"a.fbag": 2})
        p = write_manifest_text(tmp_path, ["A,1,1,60,0,0,1,1,f/a.fbag", "A,2,1,60,0,0,1,1,f/a.fbag"])
        with pytest.raises(ManifestError, match=r"manifest.csv:3: duplicate patient_id 'A'"):
            load_manifest(p)

    def test_missing_value(self, tmp_path, rng, caplog):
        write_cores(tmp_path, rng, {"a.fbag": 2})
        lines = ["A,1,1,60,0,0,1,1,f/a.fbag", "B,2,1,,0,0,1,1,f/a.fbag"]
        p = write_manifest_text(tmp_path, lines)
        with pytest.raises(ManifestError, match=r":3: missing value in \['age'\]"):
            load_manifest(p)
        with caplog.at_level(logging.WARNING):
            manifest, cohort = load_manifest(p, exclude_missing=True)
        assert cohort.ids == ["A"] and manifest.n_excluded == 1
        assert "excluded 1" in caplog.text

    @pytest.mark.parametrize("line,msg", [
        ("A,x,1,60,0,0,1,1,f/a.fbag", "non-numeric"),
        ("A,-1,1,60,0,0,1,1,f/a.fbag", "non-negative"),
        ("A,1,2,60,0,0,1,1,f/a.fbag", "event"),
        ("A,1,1,60,X,0,1,1,f/a.fbag", "sex"),
        ("A,1,1,60,0,0,V,1,f/a.fbag", "stage"),
        ("A,1,1,60,0,0,1,4,f/a.fbag", "grade"),
        ("A,1,1,60,0,0,1,1,f/nope.fbag", "not found"),
    ])
    def test_bad_rows(self, tmp_path, rng, line, msg):
        write_cores(tmp_path, rng, {"a.fbag": 2})
        with pytest.raises(ManifestError, match=msg):
            load_manifest(write_manifest_text(tmp_path, [line]))

    def test_missing_column(self, tmp_path):
        p = tmp_path / "m.csv"
        p.write_text("patient_id,time\nA,1\n")
        with pytest.raises(ManifestError, match="missing columns"):
            load_manifest(p)

    def test_unreadable(self, tmp_path):
        with pytest.raises(ManifestError, match="cannot read"):
            load_manifest(tmp_path / "absent.csv")


class TestBags:
    def test_row_counts_add(self, tmp_path, rng):
        x = write_cores(tmp_path, rng, {"a.fbag": 3, "b.fbag": 5})
        bag = data.load_bag([tmp_path / "f/a.fbag", tmp_path / "f/b.fbag"], "P")
        assert bag.n_patches == 8
        np.testing.assert_allclose(bag.features, np.r_[x["a.fbag"], x["b.fbag"]].astype(np.float32))

    def test_core_order_does_not_change_amil(self, tmp_path, rng):
        from coxmil.amil import AmilModel
        write_cores(tmp_path, rng, {"a.fbag": 3, "b.fbag": 5, "c.fbag": 2})
        paths = [tmp_path / "f" / n for n in ("a.fbag", "b.fbag", "c.fbag")]
        m = AmilModel(4, seed=1)
        r1 = m.forward([data.load_bag(paths)])[0]
        r2 = m.forward([data.load_bag(paths[::-1])])[0]
        assert r1 == pytest.approx(r2, rel=1e-12, abs=1e-12)

    def test_dimension_mismatch(self, tmp_path, rng):
        (tmp_path / "f").mkdir()
        data.write_fbag(tmp_path / "f/a.fbag", np.zeros((2, 4)))
        data.write_fbag(tmp_path / "f/b.fbag", np.zeros((2, 5)))
        with pytest.raises(ValueError, match="a.fbag=4, b.fbag=5"):
            data.load_bag([tmp_path / "f/a.fbag", tmp_path / "f/b.fbag"], "P")

    def test_fbag_round_trip_bitwise(self, tmp_path, rng):
        x = rng.normal(size=(7, 3)).astype(np.float32)
        p = tmp_path / "x.fbag"
        data.write_fbag(p, x)
        raw = p.read_bytes()
        assert raw[:4] == b"FBAG" and len(raw) == 12 + 7 * 3 * 4
        assert data.read_features(p).astype(np.float32).tobytes() == x.tobytes()

    def test_fbag_truncated(self, tmp_path):
        p = tmp_path / "x.fbag"
        data.write_fbag(p, np.zeros((3, 3)))
        p.write_bytes(p.read_bytes()[:-4])
        with pytest.raises(ValueError, match="header says"):
            data.read_features(p)

    def test_csv_fallback(self, tmp_path):
        p = tmp_path / "x.csv"
        p.write_text("1,2,3\n4,5,6\n")
        np.testing.assert_array_equal(data.read_features(p), [[1, 2, 3], [4, 5, 6]])
        p.write_text("1,2,3\n")
        assert data.read_features(p).shape == (1, 3)
        p.write_bytes(b"\xff\xfe garbage")
        with pytest.raises(ValueError):
            data.read_features(p)


class TestSynthetic:
    def test_manifest_round_trip(self, tmp_path):
        ds = generate_synthetic(SynthConfig(n_patients=12, patches_per_core=(2, 4), feature_dim=5), tmp_path)
        manifest, cohort = load_manifest(tmp_path / "manifest.csv")
        assert cohort.ids == ds.cohort.ids
        np.testing.assert_array_equal(cohort.times, ds.cohort.times)
        np.testing.assert_array_equal(cohort.covariates, ds.cohort.covariates)
        assert len(list((tmp_path / "features").glob("*.fbag"))) == 36
        for a, b in zip(manifest.bags(), ds.manifest.bags()):
            np.testing.assert_array_equal(a.features, b.features)
        lat = data.read_latent(tmp_path / "latent.csv")
        np.testing.assert_array_equal([lat[i] for i in cohort.ids], ds.latent)

    def test_deterministic_bytes(self, tmp_path):
        cfg = SynthConfig(n_patients=10, patches_per_core=(2, 3), feature_dim=4, seed=9)
        generate_synthetic(cfg, tmp_path / "a")
        generate_synthetic(cfg, tmp_path / "b")
        files = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*") if p.is_file())
        assert files
        for f in files:
            assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()

    def test_no_censoring(self, tmp_path):
        ds = generate_synthetic(SynthConfig(n_patients=50, patches_per_core=(1, 2), feature_dim=3,
                                            censoring_rate=0.0), tmp_path)
        assert ds.cohort.events.all()

    def test_censoring_rate_hits_target(self, tmp_path):
        ds = generate_synthetic(SynthConfig(n_patients=2000, cores_per_patient=1, patches_per_core=(1, 1),
                                            feature_dim=2, censoring_rate=0.3), tmp_path)
        assert abs(1 - ds.cohort.events.mean() - 0.3) < 0.04

    def test_latent_drives_time(self, tmp_path):
        ds = generate_synthetic(SynthConfig(n_patients=200, patches_per_core=(1, 2), feature_dim=3), tmp_path)
        ev = ds.cohort.events == 1
        tau, _ = stats.kendalltau(ds.latent[ev], ds.cohort.times[ev])
        assert tau < 0

    def test_tabular_correlation(self, tmp_path):
        ds = generate_synthetic(SynthConfig(n_patients=1000, cores_per_patient=1, patches_per_core=(1, 1),
                                            feature_dim=2), tmp_path)
        stage = ds.cohort.covariates[:, 3]
        rho, _ = stats.spearmanr(ds.latent, stage)
        assert 0.4 < rho < 0.65
        assert set(stage) == {1, 2, 3, 4}

    def test_censoring_rate_for(self):
        assert data.censoring_rate_for(0.0) == 0.0
        # effect 0: share = c / (c + 1)
        assert data.censoring_rate_for(0.25, effect_size=0.0) == pytest.approx(1 / 3, rel=1e-9)

    def test_config_validation(self):
        with pytest.raises(ValueError):
            SynthConfig(censoring_rate=1.5)
        with pytest.raises(ValueError):
            SynthConfig(patches_per_core=(5, 2))
        with pytest.raises(ValueError):
            SynthConfig(signal_cores=4)
