"""Command-line entry point: ``coxmil {synth,train,eval,cv,km}``.

Results go to files under ``--out``; progress goes to stderr. Exit codes: 0 success,
1 invalid usage or input, 2 runtime failure. Errors print one ``error: ...`` line.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import struct
import sys
from pathlib import Path

import numpy as np

from . import amil, coxlinear
from .data import ManifestError, SynthConfig, generate_synthetic, load_manifest
from .evalcv import (
    CvConfig,
    CvDataset,
    RiskScores,
    emit_km,
    emit_report,
    read_predictions_csv,
    run_cv,
    stratify_and_compare,
    write_predictions_csv,
)
from .ndgrad import dump_tensors, load_tensors
from .survcore import UndefinedCIndexError, c_index

log = logging.getLogger("coxmil")

MODEL_CHOICES = ["amil", "amil-per-core", "maxpool", "deepsurv", "cox", "rsf"]
TRAINABLE = ["amil", "amil-per-core", "maxpool", "deepsurv", "cox"]


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _positive_int(v):
    try:
        n = int(v)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer, got {v!r}") from None
    if n < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {n}")
    return n


def _add_training_flags(p, epochs=200):
    p.add_argument("--epochs", type=int, default=epochs, help="optimizer steps (full-cohort) per model")
    p.add_argument("--lr", type=float, default=1e-4, help="Adam learning rate")
    p.add_argument("--l1", type=float, default=1e-5, help="L1 penalty weight on all network parameters")
    p.add_argument("--proj-activation", choices=["linear", "relu"], default="linear",
                   help="nonlinearity after the patch projection layer")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="coxmil", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging to stderr")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth", help="generate a synthetic planted-signal dataset")
    s.add_argument("--out", required=True, help="output directory")
    s.add_argument("--n", type=_positive_int, default=200, help="number of patients")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--cores", type=_positive_int, default=3, help="cores per patient")
    s.add_argument("--patches-min", type=_positive_int, default=20)
    s.add_argument("--patches-max", type=_positive_int, default=60)
    s.add_argument("--feature-dim", type=_positive_int, default=64)
    s.add_argument("--signal-fraction", type=float, default=0.5)
    s.add_argument("--effect-size", type=float, default=3.0)
    s.add_argument("--censoring-rate", type=float, default=0.3)
    s.add_argument("--signal-cores", type=_positive_int, default=None,
                   help="number of cores per patient that carry signal (default: all)")
    s.add_argument("--tabular-correlation", type=float, default=0.55,
                   help="latent normal correlation of stage and grade with the risk factor")

    t = sub.add_parser("train", help="train one model on a manifest and write a checkpoint")
    t.add_argument("--manifest", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--model", choices=TRAINABLE, default="amil")
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--feature-dim", type=_positive_int, default=None,
                   help="expected feature dimension of the bags (checked)")
    _add_training_flags(t)

    e = sub.add_parser("eval", help="score a manifest with a checkpoint and report the C-index")
    e.add_argument("--manifest", required=True)
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--out", required=True)

    c = sub.add_parser("cv", help="k-fold cross-validation with full report")
    c.add_argument("--manifest", required=True)
    c.add_argument("--out", required=True)
    c.add_argument("--model", choices=MODEL_CHOICES, default="amil")
    c.add_argument("--k", type=_positive_int, default=10)
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--feature-dim", type=_positive_int, default=None)
    c.add_argument("--threads", type=_positive_int, default=os.cpu_count() or 1,
                   help="folds trained concurrently")
    c.add_argument("--n-trees", type=_positive_int, default=100, help="trees for --model rsf")
    c.add_argument("--stratify", action="store_true", help="stratify folds by event status")
    c.add_argument("--pooled-c", action="store_true", help="also report C-index of pooled predictions")
    _add_training_flags(c)

    k = sub.add_parser("km", help="median-risk Kaplan-Meier plot from a predictions CSV")
    k.add_argument("--predictions", required=True, help="CSV with patient_id,time,event,risk")
    k.add_argument("--out", required=True)
    return parser


def _check_training_flags(args):
    if args.epochs < 1:
        raise UsageError(f"--epochs must be >= 1, got {args.epochs}")
    if args.lr < 0 or args.l1 < 0:
        raise UsageError("--lr and --l1 must be non-negative")


def _load(manifest_path, needs_bags: bool, feature_dim=None):
    manifest, cohort = load_manifest(manifest_path, check_paths=needs_bags)
    if needs_bags and feature_dim is not None:
        dim = manifest.bags()[0].feature_dim if manifest.rows else None
        if dim != feature_dim:
            raise UsageError(f"--feature-dim {feature_dim} does not match bag dimension {dim}")
    return manifest, cohort


def cmd_synth(args) -> int:
    cfg = SynthConfig(n_patients=args.n, cores_per_patient=args.cores,
                      patches_per_core=(args.patches_min, args.patches_max),
                      feature_dim=args.feature_dim, signal_fraction=args.signal_fraction,
                      effect_size=args.effect_size, censoring_rate=args.censoring_rate,
                      seed=args.seed, signal_cores=args.signal_cores,
                      tabular_correlation=args.tabular_correlation)
    ds = generate_synthetic(cfg, args.out)
    n, events = len(ds.cohort), ds.cohort.n_events
    print(json.dumps({"n": n, "events": events, "censored": n - events,
                      "censoring_share": (n - events) / n,
                      "manifest": str(Path(args.out) / "manifest.csv")}))
    return 0


def _save_cox(path, model: coxlinear.CoxModel, header: dict):
    head = json.dumps({"model_kind": "cox", "feature_dim": int(model.beta.size), **header},
                      sort_keys=True).encode()
    blob = dump_tensors([model.beta, model.center, model.scale])
    Path(path).write_bytes(amil.CHECKPOINT_MAGIC + struct.pack("<I", len(head)) + head + blob)


def _load_any(path):
    raw = Path(path).read_bytes()
    if raw[:4] != amil.CHECKPOINT_MAGIC:
        raise UsageError(f"{path}: not a coxmil checkpoint")
    (n,) = struct.unpack_from("<I", raw, 4)
    meta = json.loads(raw[8:8 + n])
    if meta["model_kind"] == "cox":
        beta, center, scale = (t.reshape(-1) for t in load_tensors(raw[8 + n:]))
        return coxlinear.CoxModel(beta, center=center, scale=scale), meta
    return amil.load_checkpoint(path)


def _score(model, meta, manifest, cohort) -> np.ndarray:
    kind = meta["model_kind"]
    if kind == "cox":
        return coxlinear.predict_risk(model, cohort.covariates)
    if kind == "deepsurv":
        return model.forward(cohort.covariates)
    if meta.get("per_core"):
        out = []
        for cores in manifest.core_bags():
            out.append(float(np.mean(model.forward(cores))))
        return np.array(out)
    return model.forward(manifest.bags())


def cmd_train(args) -> int:
    _check_training_flags(args)
    kind = args.model
    needs_bags = kind in ("amil", "amil-per-core", "maxpool")
    manifest, cohort = _load(args.manifest, needs_bags, args.feature_dim)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    header = {"seed": args.seed}
    if kind == "cox":
        model = coxlinear.fit_cox(cohort)
        _save_cox(out / "model.ckpt", model, {**header, "epoch": model.n_iterations})
        trace = list(model.history)
    else:
        base_kind = {"amil-per-core": "amil"}.get(kind, kind)
        cfg = amil.TrainConfig(epochs=args.epochs, learning_rate=args.lr, l1_lambda=args.l1,
                               seed=args.seed, model_kind=base_kind, proj_activation=args.proj_activation)
        if kind == "deepsurv":
            res = amil.train(cohort.covariates, cohort, cfg)
        elif kind == "amil-per-core":
            bags, t, e = [], [], []
            for rec, cores in zip(cohort.records, manifest.core_bags()):
                bags += cores
                t += [rec.time] * len(cores)
                e += [rec.event] * len(cores)
            res = amil.train(bags, (np.array(t), np.array(e)), cfg)
            header["per_core"] = True
        else:
            res = amil.train(manifest.bags(), cohort, cfg)
        amil.save_checkpoint(out / "model.ckpt", res.model, **header, epoch=args.epochs)
        trace = res.loss_trace
    with open(out / "loss_trace.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "loss"])
        for i, v in enumerate(trace):
            w.writerow([i, repr(float(v))])
    log.info("wrote %s", out / "model.ckpt")
    return 0


def cmd_eval(args) -> int:
    model, meta = _load_any(args.checkpoint)
    needs_bags = meta["model_kind"] in ("amil", "maxpool")
    manifest, cohort = _load(args.manifest, needs_bags)
    risks = _score(model, meta, manifest, cohort)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    res = c_index(cohort.times, cohort.events, risks)
    (out / "eval.json").write_text(json.dumps({
        "model_kind": meta["model_kind"], "c_index": res.c_index, "concordant": res.concordant,
        "discordant": res.discordant, "tied_risk": res.tied_risk, "permissible": res.permissible,
    }, indent=2) + "\n")
    write_predictions_csv(out / "predictions.csv", RiskScores(cohort.ids, risks), cohort)
    return 0


def cmd_cv(args) -> int:
    _check_training_flags(args)
    kind = args.model.replace("-", "_")
    needs_bags = kind in ("amil", "amil_per_core", "maxpool")
    manifest, cohort = _load(args.manifest, needs_bags, args.feature_dim)
    if args.k > len(cohort):
        raise UsageError(f"--k {args.k} exceeds the number of patients ({len(cohort)})")
    cfg = CvConfig(k=args.k, seed=args.seed, epochs=args.epochs, learning_rate=args.lr,
                   l1_lambda=args.l1, proj_activation=args.proj_activation, n_trees=args.n_trees,
                   threads=args.threads, stratify_folds=args.stratify, pooled_c=args.pooled_c)
    report = run_cv(CvDataset(cohort, manifest), kind, cfg)
    emit_report(report, args.out, cohort)
    s = report.summary()
    log.info("%s: C = %.4f +/- %.4f (median %.4f), logrank p = %.3g", kind, s["c_mean"], s["c_std"],
             s["c_median"], s["logrank_p"])
    return 0


def cmd_km(args) -> int:
    pooled, cohort = read_predictions_csv(args.predictions)
    high, low, lr = stratify_and_compare(pooled, cohort)
    emit_km(args.out, high, low, lr, float(cohort.times.max()))
    return 0


COMMANDS = {"synth": cmd_synth, "train": cmd_train, "eval": cmd_eval, "cv": cmd_cv, "km": cmd_km}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (UsageError, ManifestError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (ValueError, UndefinedCIndexError) as exc:
        print(f"error: {' '.join(str(exc).split())}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - reported as a runtime failure
        print(f"error: {type(exc).__name__}: {' '.join(str(exc).split())}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
