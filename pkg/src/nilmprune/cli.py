"""The ``nilmprune`` command line: reproducible experiments end to end.

    nilmprune synth      --config c.json --out runs/data
    nilmprune preprocess --in runs/data --out runs/clean
    nilmprune train      --config c.json --out runs/base
    nilmprune prune      --config c.json --out runs/p90 --strategy opt-nilm --threshold 0.9
    nilmprune sweep      --config c.json --out runs/sweep --grid 0.05:0.95:0.05
    nilmprune eval       --config c.json --out runs/eval --model runs/p90/model.nprm
    nilmprune report     --out runs/summary runs/base runs/p90

Every artifact directory receives a manifest (resolved config, seed, input
digests, outputs) sufficient to re-run the command bit-identically. Exit
codes: 0 success, 1 usage/config error, 2 data error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import config as C
from . import data as D
from . import experiment as E
from . import kernels
from . import metrics as X
from . import model as M
from . import sweep as S
from .errors import ConfigError, DataError, NilmpruneError, NumericError

log = logging.getLogger("nilmprune")

REPORT_NAME = "report.json"


def _write_json(path, obj) -> Path:
    path = Path(path)
    with open(path, "w") as f:
        json.dump(obj, f, indent=2, sort_keys=True)
        f.write("\n")
    return path


def _report_payload(appliance, strategy, threshold, model, rep: X.MetricReport,
                    extra=None) -> dict:
    out = {
        "appliance": appliance,
        "strategy": strategy,
        "threshold": threshold,
        "params": M.count_params(model)["nonzero"],
        "macs": M.count_macs(model),
        "size_bytes": M.size_on_disk_bytes(model),
        "metrics": json.loads(rep.to_json()),
    }
    if extra:
        out["prune"] = extra
    return out


# ---------------------------------------------------------------------------
# dataset loading
# ---------------------------------------------------------------------------

def _synthetic_houses(cfg):
    ds = cfg["dataset"]
    houses = {}
    metas = None
    for h in range(1, int(ds["houses"]) + 1):
        series, metas = D.synth_generate(ds["synthetic"], seed=int(ds["seed"]) + h)
        houses[h] = series
    return houses, metas


def _plegma_houses(cfg):
    ds = cfg["dataset"]
    root = Path(ds["plegma_dir"] or "")
    if not root.is_dir():
        raise ConfigError(f"dataset.plegma_dir is not a directory: {root}")
    meta_path = root / "appliances_metadata.csv"
    if not meta_path.exists():
        raise DataError(f"missing appliances_metadata.csv in {root}")
    metas = D.read_appliance_metadata(meta_path)
    houses = {}
    inputs = [meta_path]
    for k, path in enumerate(sorted(root.glob("house_*.csv")), start=1):
        series = D.parse_plegma_csv(path)
        cleaned, _ = D.preprocess_series(series, metas)
        houses[k] = cleaned
        inputs.append(path)
    if not houses:
        raise DataError(f"no house_*.csv files in {root}")
    return houses, metas, inputs


def _build_experiment(cfg):
    ds, mc = cfg["dataset"], cfg["model"]
    inputs = []
    if ds["source"] == "synthetic":
        houses, metas = _synthetic_houses(cfg)
    else:
        houses, metas, inputs = _plegma_houses(cfg)
    test_id = int(ds["test_house"])
    if test_id not in houses:
        raise ConfigError(f"test_house {test_id} not among houses {sorted(houses)}")
    appliance = ds["appliance"]
    if appliance not in metas:
        raise ConfigError(f"appliance {appliance!r} has no metadata entry")
    train_series = [s for h, s in sorted(houses.items()) if h != test_id]
    if not train_series:
        raise ConfigError("need at least one non-test house for training")
    exp = E.from_series(train_series, houses[test_id], appliance, metas[appliance],
                        int(mc["window"]), int(mc["stride"]),
                        preset=mc["preset"], dtype=mc["dtype"])
    return exp, inputs


def _train_cfg(cfg) -> M.TrainConfig:
    t = cfg["train"]
    return M.TrainConfig(epochs=int(t["epochs"]), batch_size=int(t["batch_size"]),
                         learning_rate=float(t["learning_rate"]), seed=int(t["seed"]),
                         loss=t["loss"], optimizer=t["optimizer"],
                         patience=t["patience"])


def _prune_opts(cfg) -> E.PruneOptions:
    p = cfg["prune"]
    return E.PruneOptions(strategy=p["strategy"], threshold=float(p["threshold"]),
                          rounds=int(p["rounds"]), scope=p["scope"],
                          alpha=float(p["alpha"]), sparse_epochs=int(p["sparse_epochs"]),
                          fine_tune=bool(p["fine_tune"]),
                          fine_tune_epochs=p["fine_tune_epochs"])


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_synth(args) -> int:
    cfg = C.load_config(args.config)
    if args.seed is not None:
        cfg["dataset"]["seed"] = args.seed
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    start = time.perf_counter()
    with C.OutputLock(out):
        houses, metas = _synthetic_houses(cfg)
        outputs = []
        for h, series in sorted(houses.items()):
            path = out / f"house_{h}.csv"
            D.write_plegma_csv(path, series)
            outputs.append(path)
        meta_path = out / "appliances_metadata.csv"
        D.write_appliance_metadata(meta_path, metas)
        outputs.append(meta_path)
        outputs.append(_write_json(out / "synth_config.json", cfg["dataset"]))
        C.write_manifest(out, "synth", cfg, cfg["dataset"]["seed"], [],
                         outputs, time.perf_counter() - start)
    print(f"wrote {len(houses)} houses to {out}")
    return 0


def cmd_preprocess(args) -> int:
    cfg = C.load_config(args.config)
    src = Path(args.in_dir)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    start = time.perf_counter()
    meta_path = src / "appliances_metadata.csv"
    metas = D.read_appliance_metadata(meta_path) if meta_path.exists() else None
    files = sorted(p for p in src.glob("*.csv") if p.name != "appliances_metadata.csv")
    if not files:
        raise DataError(f"no CSV files to preprocess in {src}")
    with C.OutputLock(out):
        stats = {}
        failures = {}
        outputs = []
        inputs = []
        for path in files:
            try:
                series = D.parse_plegma_csv(path)
                cleaned, file_stats = D.preprocess_series(series, metas)
            except (DataError, ConfigError) as e:
                failures[path.name] = str(e)
                continue
            dest = out / path.name
            D.write_plegma_csv(dest, cleaned)
            outputs.append(dest)
            inputs.append(path)
            stats[path.name] = file_stats
        if failures and not stats:
            raise DataError(f"every input failed schema checks: {failures}")
        if metas is not None:
            dest = out / "appliances_metadata.csv"
            D.write_appliance_metadata(dest, metas)
            outputs.append(dest)
            inputs.append(meta_path)
        provenance = {
            "pipeline": {"grid_period_s": D.ELECTRIC_PERIOD_S,
                         "max_gap_samples": D.ELECTRIC_MAX_GAP},
            "files": stats,
            "failures": failures,
        }
        outputs.append(_write_json(out / "provenance.json", provenance))
        C.write_manifest(out, "preprocess", cfg, 0, inputs, outputs,
                         time.perf_counter() - start)
    for name, s in stats.items():
        print(f"{name}: {s['samples']} samples, {s['nan_pct']:.2f}% NaN, "
              f"{s['issues_pct']:.2f}% issues, {s['abnormal_replaced']} abnormal replaced")
    for name, err in failures.items():
        print(f"{name}: FAILED ({err})", file=sys.stderr)
    return 0


def cmd_train(args) -> int:
    cfg = C.load_config(args.config)
    if args.seed is not None:
        cfg["train"]["seed"] = args.seed
    if args.resume:
        cfg["train"]["resume"] = True
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    start = time.perf_counter()
    with C.OutputLock(out):
        exp, inputs = _build_experiment(cfg)
        tc = _train_cfg(cfg)
        model_path = out / "model.nprm"
        if cfg["train"]["resume"] and model_path.exists():
            model = M.deserialize(model_path)
            remaining = tc.epochs - model.epochs_trained
            if remaining <= 0:
                print(f"model already trained {model.epochs_trained} epochs; nothing to do")
                return 0
            log.info("resuming at epoch %d", model.epochs_trained)
            tc.epochs = remaining
            history = M.train(model, exp.train, tc)
        else:
            model, history = E.train_baseline(exp, tc)
        rep = E.evaluate(model, exp)
        M.serialize(model, model_path)
        outputs = [model_path,
                   _write_json(out / "history.json", {"loss": history}),
                   _write_json(out / REPORT_NAME,
                               _report_payload(cfg["dataset"]["appliance"], "baseline",
                                               0.0, model, rep))]
        C.write_manifest(out, "train", cfg, tc.seed, inputs, outputs,
                         time.perf_counter() - start)
    print(f"trained {model.epochs_trained} epochs; held-out F1 {rep.f1:.3f}, "
          f"MAE {rep.mae:.2f} W -> {model_path}")
    return 0


def cmd_prune(args) -> int:
    cfg = C.load_config(args.config)
    if args.strategy:
        cfg["prune"]["strategy"] = args.strategy
    if args.threshold is not None:
        cfg["prune"]["threshold"] = args.threshold
    if args.seed is not None:
        cfg["train"]["seed"] = args.seed
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    start = time.perf_counter()
    with C.OutputLock(out):
        exp, inputs = _build_experiment(cfg)
        tc = _train_cfg(cfg)
        opts = _prune_opts(cfg).validate()
        baseline = None
        base_path = cfg["prune"]["baseline_model"]
        if base_path and opts.strategy != "opt-nilm":
            baseline = M.deserialize(base_path)
            inputs = list(inputs) + [base_path]
        model, report = E.run_strategy(exp, opts, tc, tc.seed, baseline=baseline)
        rep = E.evaluate(model, exp)
        model_path = out / "model.nprm"
        M.serialize(model, model_path)
        outputs = [model_path,
                   _write_json(out / "prune_report.json", report),
                   _write_json(out / REPORT_NAME,
                               _report_payload(cfg["dataset"]["appliance"],
                                               opts.strategy, opts.threshold,
                                               model, rep, extra=report))]
        C.write_manifest(out, "prune", cfg, tc.seed, inputs, outputs,
                         time.perf_counter() - start)
    print(f"{opts.strategy} @ {opts.threshold:.2f}: params "
          f"{report['params_before']} -> {report['params_after']}, "
          f"MACs {report['macs_before']} -> {report['macs_after']}, "
          f"F1 {rep.f1:.3f} -> {model_path}")
    return 0


def cmd_sweep(args) -> int:
    cfg = C.load_config(args.config)
    if args.strategy:
        cfg["prune"]["strategy"] = args.strategy
    if args.grid:
        cfg["prune"]["grid"] = args.grid
    if args.seed is not None:
        cfg["train"]["seed"] = args.seed
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    start = time.perf_counter()
    with C.OutputLock(out):
        exp, inputs = _build_experiment(cfg)
        tc = _train_cfg(cfg)
        opts = _prune_opts(cfg).validate()
        grid = C.parse_grid(cfg["prune"]["grid"])
        curve = E.sweep_experiment(exp, opts, tc, grid, cfg["dataset"]["appliance"])
        p_opt, dist = S.optimal_threshold(curve)
        csv_path = out / "curve.csv"
        csv_path.write_text(curve.to_csv())
        plot_path = out / "plot_f1.dat"
        plot_path.write_text("".join(f"{p.threshold:g} {p.f1:.6f}\n"
                                     for p in curve.points if p.error is None))
        outputs = [csv_path, plot_path,
                   _write_json(out / "curve.json", json.loads(curve.to_json())),
                   _write_json(out / "selection.json",
                               {"threshold": p_opt, "distance": dist,
                                "axis": S.PRUNED_FRACTION})]
        C.write_manifest(out, "sweep", cfg, tc.seed, inputs, outputs,
                         time.perf_counter() - start)
    print(f"swept {len(curve.points)} points; optimal threshold {p_opt:.2f} "
          f"(distance {dist:.4f}) -> {csv_path}")
    return 0


def cmd_eval(args) -> int:
    cfg = C.load_config(args.config)
    model_path = args.model or cfg["eval"]["model"]
    if not model_path:
        raise ConfigError("eval needs --model or eval.model in the config")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    start = time.perf_counter()
    with C.OutputLock(out):
        exp, inputs = _build_experiment(cfg)
        model = M.deserialize(model_path)
        rep = E.evaluate(model, exp)
        outputs = [_write_json(out / REPORT_NAME,
                               _report_payload(cfg["dataset"]["appliance"], "eval",
                                               0.0, model, rep))]
        C.write_manifest(out, "eval", cfg, cfg["train"]["seed"],
                         list(inputs) + [model_path], outputs,
                         time.perf_counter() - start)
    print(f"F1 {rep.f1:.3f}  MAE {rep.mae:.2f} W  SMAPE {rep.smape:.4f}")
    return 0


TABLE_COLUMNS = ("Appliance", "Approach", "Pruning %", "Trainable Params",
                 "MACs", "F1", "MAE", "SMAPE")


def _table_rows(run_dirs):
    rows = []
    missing = []
    for d in run_dirs:
        path = Path(d) / REPORT_NAME
        if not path.exists():
            missing.append(str(path))
            continue
        with open(path) as f:
            r = json.load(f)
        rows.append({
            "appliance": r["appliance"], "approach": r["strategy"],
            "pruning_pct": 100.0 * float(r["threshold"]),
            "params": int(r["params"]), "macs": int(r["macs"]),
            "f1": float(r["metrics"]["f1"]), "mae": float(r["metrics"]["mae"]),
            "smape": float(r["metrics"]["smape"]),
            "path": str(path),
        })
    return rows, missing


def cmd_report(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    start = time.perf_counter()
    rows, missing = _table_rows(args.run_dirs)
    for path in missing:
        print(f"missing report: {path}", file=sys.stderr)
    if not rows:
        raise DataError("no usable run reports found")
    rows.sort(key=lambda r: (r["appliance"], r["approach"], r["pruning_pct"]))

    with C.OutputLock(out):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(TABLE_COLUMNS)
        for r in rows:
            w.writerow([r["appliance"], r["approach"], f"{r['pruning_pct']:g}",
                        r["params"], r["macs"], f"{r['f1']:.4f}",
                        f"{r['mae']:.4f}", f"{r['smape']:.6f}"])
        (out / "table.csv").write_text(buf.getvalue())

        widths = [10, 22, 10, 16, 12, 8, 10, 10]
        lines = ["".join(c.ljust(w) for c, w in zip(TABLE_COLUMNS, widths))]
        for r in rows:
            cells = [r["appliance"], r["approach"], f"{r['pruning_pct']:g}",
                     str(r["params"]), str(r["macs"]), f"{r['f1']:.3f}",
                     f"{r['mae']:.2f}", f"{r['smape']:.5f}"]
            lines.append("".join(c.ljust(w) for c, w in zip(cells, widths)))
        (out / "table.txt").write_text("\n".join(lines) + "\n")

        # improvement vs the same appliance's baseline row
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["Appliance", "Approach", "Params improvement %", "MACs improvement %"])
        baselines = {r["appliance"]: r for r in rows if r["approach"] == "baseline"}
        for r in rows:
            base = baselines.get(r["appliance"])
            if base is None or r["approach"] == "baseline":
                continue
            w.writerow([r["appliance"], r["approach"],
                        f"{100.0 * (1 - r['params'] / base['params']):.2f}",
                        f"{100.0 * (1 - r['macs'] / base['macs']):.2f}"])
        (out / "improvement.csv").write_text(buf.getvalue())

        C.write_manifest(out, "report", {"run_dirs": [str(d) for d in args.run_dirs]},
                         0, [r["path"] for r in rows],
                         [out / "table.csv", out / "table.txt", out / "improvement.csv"],
                         time.perf_counter() - start)
    print((out / "table.txt").read_text(), end="")
    return 0


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="nilmprune",
        description="energy disaggregation model compression workbench")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, out_required=True):
        p.add_argument("--config", help="JSON experiment config")
        p.add_argument("--out", required=out_required, help="output directory")
        p.add_argument("--seed", type=int, help="override the config seed")

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    common(p)
    p.set_defaults(fn=cmd_synth)

    p = sub.add_parser("preprocess", help="clean household CSVs")
    p.add_argument("--in", dest="in_dir", required=True, help="input directory")
    p.add_argument("--out", required=True)
    p.add_argument("--config", help="JSON experiment config")
    p.set_defaults(fn=cmd_preprocess)

    p = sub.add_parser("train", help="train the dense baseline")
    common(p)
    p.add_argument("--resume", action="store_true",
                   help="continue from an existing model file")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("prune", help="apply one pruning strategy")
    common(p)
    p.add_argument("--strategy", choices=S.STRATEGIES)
    p.add_argument("--threshold", type=float)
    p.set_defaults(fn=cmd_prune)

    p = sub.add_parser("sweep", help="sweep thresholds and select the best")
    common(p)
    p.add_argument("--strategy", choices=S.STRATEGIES)
    p.add_argument("--grid", help="A:B:STEP threshold grid")
    p.set_defaults(fn=cmd_sweep)

    p = sub.add_parser("eval", help="evaluate a model file on the config dataset")
    common(p)
    p.add_argument("--model", help="model file to evaluate")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("report", help="comparative tables from finished runs")
    p.add_argument("run_dirs", nargs="+", help="run directories with report.json")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_report)
    return parser


def _apply_thread_cap() -> None:
    raw = os.environ.get("NILMPRUNE_THREADS", "").strip()
    if not raw:
        return
    try:
        kernels.set_thread_cap(int(raw))
    except ValueError:
        log.warning("ignoring non-integer NILMPRUNE_THREADS=%r", raw)


def main(argv=None) -> int:
    logging.basicConfig(level=os.environ.get("NILMPRUNE_LOGLEVEL", "WARNING"))
    _apply_thread_cap()
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return 0 if e.code == 0 else 1
    try:
        return args.fn(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 1
    except DataError as e:
        print(f"data error: {e}", file=sys.stderr)
        return 2
    except (NumericError, NilmpruneError) as e:
        print(f"numeric error: {e}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
