"""Cohort manifests, FBAG feature files, core stitching and the synthetic generator.

Manifest CSV header::

    patient_id,time,event,age,sex,smoking,stage,grade,core_paths

``core_paths`` is a ``;``-separated list of feature files relative to the manifest.

FBAG file: ``b"FBAG"``, u32 LE rows, u32 LE cols, then rows*cols f32 LE row-major.
Headerless numeric CSV grids are accepted as feature files too.
"""
from __future__ import annotations

import csv
import io
import logging
import math
import re
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import optimize, stats

from .amil import FeatureBag
from .survcore import Cohort, SurvivalRecord

log = logging.getLogger(__name__)

FBAG_MAGIC = b"FBAG"
MANIFEST_COLUMNS = ["patient_id", "time", "event", "age", "sex", "smoking", "stage", "grade", "core_paths"]
COVARIATE_NAMES = ["age", "sex", "smoking", "stage", "grade"]


class ManifestError(ValueError):
    pass


@dataclass
class ManifestRow:
    patient_id: str
    time: float
    event: int
    age: float
    sex: int
    smoking: int
    stage: int
    grade: int
    core_paths: list[Path]

    @property
    def covariates(self) -> tuple[float, ...]:
        return (self.age, float(self.sex), float(self.smoking), float(self.stage), float(self.grade))


@dataclass
class Manifest:
    rows: list[ManifestRow]
    path: Path | None = None
    n_excluded: int = 0

    def cohort(self) -> Cohort:
        return Cohort([SurvivalRecord(r.patient_id, r.time, r.event, r.covariates) for r in self.rows])

    def bags(self) -> list[FeatureBag]:
        return [load_bag(r.core_paths, patient_id=r.patient_id) for r in self.rows]

    def core_bags(self) -> list[list[FeatureBag]]:
        """One bag per core, grouped by patient."""
        return [[load_bag([p], patient_id=f"{r.patient_id}#{k}") for k, p in enumerate(r.core_paths)]
                for r in self.rows]


_SEX = {"0": 0, "1": 1, "m": 0, "male": 0, "f": 1, "female": 1}
_BOOL = {"0": 0, "1": 1, "no": 0, "yes": 1, "false": 0, "true": 1, "n": 0, "y": 1,
         "never": 0, "current": 1, "former": 1}
_ROMAN = {"i": 1, "ii": 2, "iii": 3, "iv": 4}


def _code_sex(v):
    return _SEX[v.lower()]


def _code_smoking(v):
    return _BOOL[v.lower()]


def _code_stage(v):
    v = v.strip().lower()
    m = re.fullmatch(r"(?:stage\s*)?([1-4]|iv|i{1,3})[abc]?", v)
    if not m:
        raise KeyError(v)
    tok = m.group(1)
    return int(tok) if tok.isdigit() else _ROMAN[tok]


def _code_grade(v):
    m = re.fullmatch(r"g?([1-3])", v.strip().lower())
    if not m:
        raise KeyError(v)
    return int(m.group(1))


def load_manifest(path, exclude_missing: bool = False, check_paths: bool = True) -> tuple[Manifest, Cohort]:
    """Parse and validate a manifest CSV.

    Rows with an empty field are an error unless ``exclude_missing`` is set, in
    which case they are dropped and counted in ``Manifest.n_excluded``.
    """
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ManifestError(f"{path}: cannot read manifest: {exc}") from exc
    reader = csv.DictReader(io.StringIO(text))
    missing_cols = [c for c in MANIFEST_COLUMNS if c not in (reader.fieldnames or [])]
    if missing_cols:
        raise ManifestError(f"{path}: missing columns {missing_cols}")
    base = path.parent
    rows, seen, excluded = [], set(), 0
    for lineno, raw in enumerate(reader, start=2):
        raw = {k: (v or "").strip() for k, v in raw.items() if k is not None}
        empty = [c for c in MANIFEST_COLUMNS[:-1] if raw.get(c, "") == ""]
        if empty:
            if exclude_missing:
                excluded += 1
                continue
            raise ManifestError(f"{path}:{lineno}: missing value in {empty}")
        pid = raw["patient_id"]
        if pid in seen:
            raise ManifestError(f"{path}:{lineno}: duplicate patient_id {pid!r}")
        seen.add(pid)
        try:
            time = float(raw["time"])
            age = float(raw["age"])
        except ValueError:
            raise ManifestError(f"{path}:{lineno}: non-numeric time or age") from None
        if not (math.isfinite(time) and time >= 0):
            raise ManifestError(f"{path}:{lineno}: time must be a finite non-negative number")
        if raw["event"] not in ("0", "1"):
            raise ManifestError(f"{path}:{lineno}: event must be 0 or 1, got {raw['event']!r}")
        coded = {}
        for name, fn in (("sex", _code_sex), ("smoking", _code_smoking),
                         ("stage", _code_stage), ("grade", _code_grade)):
            try:
                coded[name] = fn(raw[name])
            except (KeyError, ValueError):
                raise ManifestError(f"{path}:{lineno}: unrecognised {name} value {raw[name]!r}") from None
        cores = [base / p.strip() for p in raw.get("core_paths", "").split(";") if p.strip()]
        if check_paths:
            if not cores:
                raise ManifestError(f"{path}:{lineno}: no core_paths for {pid!r}")
            for c in cores:
                if not c.is_file():
                    raise ManifestError(f"{path}:{lineno}: feature file not found: {c}")
        rows.append(ManifestRow(pid, time, int(raw["event"]), age, coded["sex"], coded["smoking"],
                                coded["stage"], coded["grade"], cores))
    if not rows:
        raise ManifestError(f"{path}: no usable rows")
    if excluded:
        log.warning("%s: excluded %d row(s) with missing values", path, excluded)
    manifest = Manifest(rows, path, excluded)
    return manifest, manifest.cohort()


def write_manifest(path, rows: list[ManifestRow]) -> None:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(MANIFEST_COLUMNS)
        for r in rows:
            rel = ";".join(Path(p).relative_to(path.parent).as_posix() if Path(p).is_absolute() else str(p)
                           for p in r.core_paths)
            w.writerow([r.patient_id, repr(float(r.time)), r.event, repr(float(r.age)), r.sex, r.smoking,
                        r.stage, r.grade, rel])


def write_fbag(path, features) -> None:
    m = np.atleast_2d(np.asarray(features, dtype="<f4"))
    with open(path, "wb") as fh:
        fh.write(FBAG_MAGIC + struct.pack("<II", *m.shape))
        fh.write(np.ascontiguousarray(m).tobytes())


def read_features(path) -> np.ndarray:
    """Read an FBAG or headerless CSV feature file into a float64 matrix."""
    path = Path(path)
    raw = path.read_bytes()
    if raw[:4] == FBAG_MAGIC:
        if len(raw) < 12:
            raise ValueError(f"{path}: truncated FBAG header")
        rows, cols = struct.unpack_from("<II", raw, 4)
        if len(raw) != 12 + 4 * rows * cols:
            raise ValueError(f"{path}: FBAG payload is {len(raw) - 12} bytes, header says {4 * rows * cols}")
        m = np.frombuffer(raw, dtype="<f4", offset=12).reshape(rows, cols).astype(np.float64)
    else:
        try:
            m = np.loadtxt(io.StringIO(raw.decode()), delimiter=",", ndmin=2, dtype=np.float64)
        except (UnicodeDecodeError, ValueError) as exc:
            raise ValueError(f"{path}: neither FBAG nor numeric CSV ({exc})") from None
    if m.shape[0] == 0 or m.size == 0:
        raise ValueError(f"{path}: feature file holds no patches")
    return m


def load_bag(paths, patient_id: str = "") -> FeatureBag:
    """Stack per-core patch matrices row-wise into one bag."""
    paths = [Path(p) for p in paths]
    if not paths:
        raise ValueError(f"no feature files for {patient_id!r}")
    mats = [read_features(p) for p in paths]
    dims = {m.shape[1] for m in mats}
    if len(dims) != 1:
        detail = ", ".join(f"{p.name}={m.shape[1]}" for p, m in zip(paths, mats))
        raise ValueError(f"feature dimension differs across cores of {patient_id!r}: {detail}")
    return FeatureBag(patient_id, np.concatenate(mats, axis=0))


@dataclass
class SynthConfig:
    n_patients: int = 200
    cores_per_patient: int = 3
    patches_per_core: tuple[int, int] = (20, 60)
    feature_dim: int = 64
    signal_fraction: float = 0.5
    effect_size: float = 3.0
    censoring_rate: float = 0.3
    seed: int = 0
    signal_cores: int | None = None
    tabular_correlation: float = 0.55

    def __post_init__(self):
        self.patches_per_core = tuple(self.patches_per_core)
        lo, hi = self.patches_per_core
        if min(self.n_patients, self.cores_per_patient, self.feature_dim, lo) < 1 or hi < lo:
            raise ValueError("SynthConfig counts must be >= 1 and patch range ordered")
        for name in ("signal_fraction", "censoring_rate", "tabular_correlation"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {v}")
        if self.effect_size < 0:
            raise ValueError("effect_size must be >= 0")
        if self.signal_cores is not None and not 1 <= self.signal_cores <= self.cores_per_patient:
            raise ValueError("signal_cores must be between 1 and cores_per_patient")


@dataclass
class SynthDataset:
    manifest: Manifest
    cohort: Cohort
    latent: np.ndarray
    config: SynthConfig = field(repr=False)


def censoring_rate_for(target: float, effect_size: float = 1.0, nodes: int = 80) -> float:
    """Exponential censoring rate c with E_u[c / (c + exp(effect_size * u))] = target."""
    if target <= 0:
        return 0.0
    x, w = np.polynomial.hermite_e.hermegauss(nodes)
    w = w / w.sum()
    hazard = np.exp(effect_size * x)

    def share(log_c):
        c = math.exp(log_c)
        return float(np.sum(w * c / (c + hazard))) - target

    return math.exp(optimize.brentq(share, -40.0, 40.0, xtol=1e-13))


def _ordinal(latent: np.ndarray, levels: int) -> np.ndarray:
    """Cut a continuous score into equal-probability normal quantile bins 1..levels."""
    cuts = stats.norm.ppf(np.arange(1, levels) / levels)
    return np.searchsorted(cuts, latent) + 1


def generate_synthetic(config: SynthConfig, out_dir) -> SynthDataset:
    """Write ``manifest.csv``, ``latent.csv`` and ``features/*.fbag`` under ``out_dir``.

    With latent ``u ~ N(0, 1)`` per patient, survival ~ Exp(rate=exp(effect_size * u))
    and censoring ~ Exp(rate tuned so the expected censored share is ``censoring_rate``).
    Signal patches add ``effect_size * u`` along a fixed unit direction; stage and
    grade are rank-correlated with ``u``. ``effect_size == 0`` makes every hazard equal,
    so neither modality carries information about survival.
    """
    cfg = config
    rng = np.random.default_rng(cfg.seed)
    out = Path(out_dir)
    (out / "features").mkdir(parents=True, exist_ok=True)

    direction = rng.normal(size=cfg.feature_dim)
    direction /= np.linalg.norm(direction)
    u = rng.normal(size=cfg.n_patients)
    t_event = rng.exponential(1.0 / np.exp(cfg.effect_size * u))
    c_rate = censoring_rate_for(cfg.censoring_rate, cfg.effect_size) if cfg.censoring_rate < 1 else math.inf
    if c_rate == 0.0:
        t_obs, event = t_event, np.ones(cfg.n_patients, dtype=int)
    else:
        t_cens = rng.exponential(1.0 / c_rate, size=cfg.n_patients) if math.isfinite(c_rate) \
            else np.zeros(cfg.n_patients)
        event = (t_event <= t_cens).astype(int)
        t_obs = np.minimum(t_event, t_cens)

    rho = cfg.tabular_correlation
    noise = rng.normal(size=(2, cfg.n_patients))
    stage = _ordinal(rho * u + math.sqrt(1 - rho ** 2) * noise[0], 4)
    grade = _ordinal(rho * u + math.sqrt(1 - rho ** 2) * noise[1], 3)
    age = np.round(rng.normal(65.0, 9.0, size=cfg.n_patients), 1)
    sex = rng.integers(0, 2, size=cfg.n_patients)
    smoking = (rng.random(cfg.n_patients) < 0.7).astype(int)

    n_signal_cores = cfg.cores_per_patient if cfg.signal_cores is None else cfg.signal_cores
    lo, hi = cfg.patches_per_core
    width = len(str(cfg.n_patients - 1))
    rows = []
    for i in range(cfg.n_patients):
        pid = f"P{i:0{width}d}"
        signal_set = set(rng.permutation(cfg.cores_per_patient)[:n_signal_cores].tolist())
        paths = []
        for k in range(cfg.cores_per_patient):
            m = int(rng.integers(lo, hi + 1))
            feats = rng.normal(size=(m, cfg.feature_dim))
            if k in signal_set:
                carrier = rng.random(m) < cfg.signal_fraction
                feats[carrier] += cfg.effect_size * u[i] * direction
            rel = Path("features") / f"{pid}_core{k}.fbag"
            write_fbag(out / rel, feats)
            paths.append(rel)
        rows.append(ManifestRow(pid, float(t_obs[i]), int(event[i]), float(age[i]), int(sex[i]),
                                int(smoking[i]), int(stage[i]), int(grade[i]), paths))

    write_manifest(out / "manifest.csv", rows)
    with open(out / "latent.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["patient_id", "u"])
        for r, ui in zip(rows, u):
            w.writerow([r.patient_id, repr(float(ui))])
    manifest = Manifest([ManifestRow(**{**r.__dict__, "core_paths": [out / p for p in r.core_paths]})
                         for r in rows], out / "manifest.csv")
    return SynthDataset(manifest, manifest.cohort(), u, cfg)


def read_latent(path) -> dict[str, float]:
    with open(path, newline="") as fh:
        return {row["patient_id"]: float(row["u"]) for row in csv.DictReader(fh)}
