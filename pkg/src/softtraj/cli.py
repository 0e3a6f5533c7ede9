"""``softtraj`` command line interface.

Exit codes: 0 success, 1 internal or numerical failure, 2 user or config error.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np
import yaml

from . import config as rc
from .data import gen_synthetic, ingest_csv, make_windows, split_series, write_csv
from .decoding import DecodeConfig, forecast_trajectory, write_forecast_csv, write_forecast_json
from .exceptions import (ConfigurationError, ContractError, DomainError, GridValidationError,
                         ParseError)
from .metrics import evaluate_forecasts, mean_risk, rmse, risky_pct, write_calibration_csv
from .model import ModelConfig, load_checkpoint
from .quantizer import TokenSpec
from .riskgrid import resolve_grid
from .training import TrainConfig, run_curriculum, write_report

logger = logging.getLogger("softtraj")

USER_ERRORS = (ConfigurationError, ParseError, GridValidationError, DomainError,
               FileNotFoundError, yaml.YAMLError)


# ---------------------------------------------------------------------------
# pipeline helpers

def _schema(cfg):
    d = cfg["data"]
    return {"id": d["id_column"], "timestamp": d["timestamp_column"], "value": d["value_column"]}


def _load_series(cfg):
    path = cfg["paths"]["data"]
    if not path:
        raise ConfigurationError("paths.data is not set")
    d = cfg["data"]
    bounds = (d["value_min"], d["value_max"])
    return ingest_csv(path, _schema(cfg), bounds if any(b is not None for b in bounds) else None)


def _horizon(cfg):
    return max(cfg["eval"]["horizons"])


def _split_windows(cfg, series):
    d = cfg["data"]
    split = split_series([s.series_id for s in series], d["val_fraction"], d["test_fraction"],
                         d["split_seed"], d["stride"])
    T, L = d["history"], _horizon(cfg)
    eval_stride = d["eval_stride"] or L
    out = {"train": [], "val": [], "test": []}
    for s in series:
        if s.series_id in split.train_ids:
            out["train"] += make_windows(s, T, L, d["stride"], d["max_gap"])
        elif s.series_id in split.val_ids:
            out["val"] += make_windows(s, T, L, eval_stride, d["max_gap"])
        else:
            out["test"] += make_windows(s, T, L, eval_stride, d["max_gap"])
    return split, out


def _cap(windows, n):
    if not n or len(windows) <= n:
        return windows
    idx = np.linspace(0, len(windows) - 1, n).round().astype(int)
    return [windows[i] for i in idx]


def _out_dir(cfg):
    p = Path(cfg["paths"]["out_dir"])
    p.mkdir(parents=True, exist_ok=True)
    return p


def _load_model(cfg):
    path = rc.checkpoint_path(cfg)
    if not path.exists():
        raise FileNotFoundError(path)
    params, spec, mu_range, sigma_range, meta = load_checkpoint(path)
    m = cfg["model"]
    if spec.V != m["n_bins"] or spec.hi != m["clamp"]:
        raise ConfigurationError(
            f"checkpoint {path} token spec (V={spec.V}, clamp={spec.hi}) is incompatible with "
            f"config (n_bins={m['n_bins']}, clamp={m['clamp']})")
    T, L = cfg["data"]["history"], _horizon(cfg)
    if T + L + 2 > params.config.max_len:
        raise ConfigurationError(
            f"checkpoint max_len={params.config.max_len} cannot hold history {T} + horizon {L}")
    return params, {"spec": spec, "mu_range": mu_range, "sigma_range": sigma_range}, meta


def _test_arrays(cfg):
    series = _load_series(cfg)
    _, w = _split_windows(cfg, series)
    test = _cap(w["test"], cfg["eval"]["max_windows"])
    if not test:
        raise ConfigurationError("no test windows (series too short or too few series)")
    X = np.stack([x.history for x in test])
    y = np.stack([x.target for x in test])
    ids = [f"{x.series_id}@{x.origin_index}" for x in test]
    return X, y, ids


def _forecast(cfg, params, ctx, grid, X, ids, lam=None):
    dc = DecodeConfig(lam=rc.effective_lambda(cfg) if lam is None else lam,
                      mode=rc.decode_mode(cfg), sample_count=cfg["decode"]["sample_count"],
                      seed=cfg["decode"]["seed"])
    return forecast_trajectory(X, params, ctx, grid, dc, _horizon(cfg), window_ids=ids)


# ---------------------------------------------------------------------------
# commands

def cmd_gen_synthetic(args):
    series = gen_synthetic(args.kind, args.n_series, args.length, args.seed)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_csv(series, out)
    print(f"wrote {len(series)} series x {args.length} samples to {out}")


def cmd_ingest(args, cfg):
    res = _load_series(cfg)
    T, L = cfg["data"]["history"], _horizon(cfg)
    n_windows = sum(len(make_windows(s, T, L, cfg["data"]["stride"], cfg["data"]["max_gap"]))
                    for s in res)
    summary = {
        "series": len(res), "rows": int(sum(len(s) for s in res)),
        "dropped_nonfinite": res.dropped_rows, "duplicates": res.duplicate_rows,
        "implausible": res.implausible_rows, "windows": n_windows,
    }
    print(json.dumps(summary, indent=2))
    if args.out:
        write_csv(res.series, args.out, _schema(cfg))


def cmd_train(args, cfg):
    out = _out_dir(cfg)
    rc.dump_config(cfg, out / "config.yaml")
    series = _load_series(cfg)
    split, w = _split_windows(cfg, series)
    if not w["train"] or not w["val"]:
        raise ConfigurationError("not enough windows for training and validation")
    m, t = cfg["model"], cfg["train"]
    mcfg = ModelConfig(V=m["n_bins"], d=m["d_model"], n_layers=m["n_layers"],
                       n_heads=m["n_heads"], max_len=m["max_len"])
    tcfg = TrainConfig(batch_size=t["batch_size"], lr_stage1=t["lr_stage1"],
                       lr_stage2=t["lr_stage2"], clip_norm=t["clip_norm"],
                       patience=t["patience"], max_epochs=t["max_epochs"],
                       max_epochs_stage2=t["max_epochs_stage2"], horizon=_horizon(cfg),
                       seed=t["seed"], trajectory_training=t["trajectory_training"],
                       max_batches_per_epoch=t["max_batches_per_epoch"],
                       max_val_windows=t["max_val_windows"])
    (out / "split.json").write_text(json.dumps(
        {k: sorted(getattr(split, f"{k}_ids")) for k in ("train", "val", "test")}, indent=2))
    ck = rc.checkpoint_path(cfg)
    ck.parent.mkdir(parents=True, exist_ok=True)
    _, report, _ = run_curriculum(w["train"], w["val"], tcfg, mcfg,
                                  spec=TokenSpec(m["n_bins"], -m["clamp"], m["clamp"]),
                                  checkpoint_path=ck, log_path=out / "train_log.jsonl")
    write_report(report, out / "train_report.json")
    print(f"checkpoint: {ck}")
    for stage, v in sorted(report.best_val.items()):
        print(f"{stage}: best val loss {v:.5f} (stopped at epoch {report.stopped_epoch[stage]})")


def cmd_forecast(args, cfg):
    out = _out_dir(cfg)
    rc.dump_config(cfg, out / "config.yaml")
    params, ctx, _ = _load_model(cfg)
    grid = resolve_grid(cfg["eval"]["grid"])
    X, y, ids = _test_arrays(cfg)
    res = _forecast(cfg, params, ctx, grid, X, ids)
    target = Path(args.out) if args.out else out / "forecast.csv"
    write_forecast_csv(res, target, y, grid)
    write_forecast_json(res, target.with_suffix(".json"), y)
    print(f"wrote {len(ids)} windows x {res.points.shape[1]} steps to {target}")


def _eval_report(cfg, params, ctx, grid, X, y, ids):
    res = _forecast(cfg, params, ctx, grid, X, ids)
    report = evaluate_forecasts(res, y, grid, cfg["eval"]["horizons"],
                                lam=rc.effective_lambda(cfg), mode=rc.decode_mode(cfg),
                                levels=cfg["eval"]["levels"])
    return res, report


def cmd_evaluate(args, cfg):
    out = _out_dir(cfg)
    rc.dump_config(cfg, out / "config.yaml")
    params, ctx, _ = _load_model(cfg)
    grid = resolve_grid(cfg["eval"]["grid"])
    X, y, ids = _test_arrays(cfg)
    res, report = _eval_report(cfg, params, ctx, grid, X, y, ids)
    report.write(out / "eval_report.json")
    (out / "eval_table.txt").write_text(report.table() + "\n")
    write_forecast_csv(res, out / "scatter.csv", y, grid)
    write_calibration_csv(report.calibration, out / "calibration.csv")
    print(report.table())


def expected_model_risk(result, grid) -> float:
    """Mean over windows and steps of the model-expected risk of the decoded point."""
    total = 0.0
    for i in range(result.points.shape[0]):
        c = grid.clamp(result.centers(i))
        R = grid.risk(c[:, None], c[None, :])
        P = result.distributions[i]
        total += float(np.sum(P * R[:, result.tokens[i]].T))
    return total / result.points.size


def cmd_sweep_lambda(args, cfg):
    out = _out_dir(cfg)
    lambdas = ([float(v) for v in args.lambdas.split(",")] if args.lambdas
               else [float(v) for v in cfg["eval"]["lambdas"]])
    if any(v < 0 for v in lambdas):
        raise ConfigurationError("lambdas must be >= 0")
    rc.dump_config(cfg, out / "config.yaml")
    params, ctx, _ = _load_model(cfg)
    grid = resolve_grid(cfg["eval"]["grid"])
    X, y, ids = _test_arrays(cfg)
    base = _forecast(cfg, params, ctx, grid, X, ids, lam=0.0)
    pc = lambda a: grid.clamp(a)  # noqa: E731
    rows = []
    for lam in lambdas:
        r = base.redecode(grid, lam)
        rows.append({"lambda": lam, "rmse": rmse(r.points, y),
                     "mean_risk": mean_risk(pc(r.points), pc(y), grid),
                     "risky_pct": risky_pct(pc(r.points), pc(y), grid),
                     "expected_model_risk": expected_model_risk(r, grid)})
    with (out / "sweep.csv").open("w", newline="") as fh:
        wr = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
        wr.writeheader()
        for row in rows:
            wr.writerow({k: repr(v) for k, v in row.items()})
    (out / "tradeoff.json").write_text(json.dumps(
        {"x_rmse": [r["rmse"] for r in rows], "y_mean_risk": [r["mean_risk"] for r in rows],
         "lambda": lambdas}, indent=2))
    print(f"{'lambda':>8} {'rmse':>10} {'risk':>10} {'risky%':>8} {'E[risk]':>10}")
    for r in rows:
        print(f"{r['lambda']:8.3g} {r['rmse']:10.4f} {r['mean_risk']:10.4f} "
              f"{r['risky_pct']:8.3f} {r['expected_model_risk']:10.4f}")


# ---------------------------------------------------------------------------
# SVG error-grid plot

ZONE_COLORS = ["#2ca02c", "#1f77b4", "#ff7f0e", "#d62728", "#9467bd", "#8c564b",
               "#e377c2", "#7f7f7f"]


def read_forecast_pairs(path):
    """``(truth, point)`` pairs from a forecast CSV; ParseError with line numbers."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    pairs = []
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            return pairs
        try:
            it, ip = header.index("truth"), header.index("point_forecast")
        except ValueError:
            raise ParseError("forecast CSV needs 'truth' and 'point_forecast' columns",
                             line=1) from None
        for row in reader:
            if not row:
                continue
            try:
                pairs.append((float(row[it]), float(row[ip])))
            except (ValueError, IndexError):
                raise ParseError(f"bad forecast row {row!r}", line=reader.line_num) from None
    return pairs


def render_grid_svg(grid, pairs, size=520, margin=48) -> str:
    lo, hi = grid.domain
    lo = min(lo, 0.0)
    span = hi - lo
    inner = size - 2 * margin

    def sx(v):
        return f"{margin + (v - lo) / span * inner:.2f}"

    def sy(v):
        return f"{size - margin - (v - lo) / span * inner:.2f}"

    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}" '
           f'viewBox="0 0 {size} {size}">']
    css = " ".join(f".zone-{lab}{{fill:{ZONE_COLORS[i % len(ZONE_COLORS)]};}}"
                   for i, lab in enumerate(grid.labels))
    out.append(f"<style>{css} .boundary{{fill:none;stroke:#444;stroke-width:1;}}</style>")
    out.append(f'<rect class="axes" x="{margin}" y="{margin}" width="{inner}" height="{inner}" '
               'fill="none" stroke="#000"/>')
    for k in range(6):
        v = lo + span * k / 5
        out.append(f'<text x="{sx(v)}" y="{size - margin + 16}" font-size="10" '
                   f'text-anchor="middle">{v:g}</text>')
        out.append(f'<text x="{margin - 6}" y="{sy(v)}" font-size="10" '
                   f'text-anchor="end">{v:g}</text>')
    out.append(f'<text x="{size / 2:.0f}" y="{size - 8}" font-size="12" '
               'text-anchor="middle">reference</text>')
    out.append(f'<text x="14" y="{size / 2:.0f}" font-size="12" text-anchor="middle" '
               f'transform="rotate(-90 14 {size / 2:.0f})">prediction</text>')
    for line in grid.boundaries():
        pts = " ".join(f"{sx(min(max(t, lo), hi))},{sy(min(max(p, lo), hi))}" for t, p in line)
        out.append(f'<polyline class="boundary" points="{pts}"/>')
    for t, p in pairs:
        tc, pc = float(grid.clamp(t)), float(grid.clamp(p))
        zone = grid.zone(tc, pc)
        out.append(f'<circle class="marker zone-{zone}" cx="{sx(tc)}" cy="{sy(pc)}" r="2"/>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def cmd_plot_grid(args, cfg):
    grid = resolve_grid(args.grid or cfg["eval"]["grid"])
    pairs = read_forecast_pairs(args.forecast)
    Path(args.out).write_text(render_grid_svg(grid, pairs))
    print(f"wrote {len(pairs)} markers to {args.out}")


# ---------------------------------------------------------------------------
# entry point

def build_parser():
    ap = argparse.ArgumentParser(prog="softtraj", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    def with_config(p):
        p.add_argument("-c", "--config", help=f"YAML run config (default ${rc.ENV_VAR})")
        p.add_argument("--set", dest="overrides", action="append", default=[],
                       metavar="SECTION.KEY=VALUE", help="override one config scalar")
        return p

    g = sub.add_parser("gen-synthetic", help="write synthetic series as CSV")
    g.add_argument("--kind", choices=["ar2", "seasonal", "regime-switch"], default="regime-switch")
    g.add_argument("--n-series", type=int, default=10)
    g.add_argument("--length", type=int, default=2000)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)

    p = with_config(sub.add_parser("ingest", help="validate a CSV and summarize it"))
    p.add_argument("--out", help="write the cleaned series here")
    with_config(sub.add_parser("train", help="run the training curriculum"))
    p = with_config(sub.add_parser("forecast", help="forecast the test windows"))
    p.add_argument("--out", help="forecast CSV path (default <out_dir>/forecast.csv)")
    with_config(sub.add_parser("evaluate", help="metrics per horizon plus Avg"))
    p = with_config(sub.add_parser("sweep-lambda", help="evaluate a list of lambdas"))
    p.add_argument("--lambdas", help="comma separated (default eval.lambdas)")
    p = with_config(sub.add_parser("plot-grid", help="SVG error-grid scatter"))
    p.add_argument("--forecast", required=True, help="forecast CSV with truth column")
    p.add_argument("--grid", help="builtin name or polygon file (default eval.grid)")
    p.add_argument("--out", required=True)
    return ap


COMMANDS = {
    "ingest": cmd_ingest, "train": cmd_train, "forecast": cmd_forecast,
    "evaluate": cmd_evaluate, "sweep-lambda": cmd_sweep_lambda, "plot-grid": cmd_plot_grid,
}


def main(argv=None) -> int:
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "gen-synthetic":
            cmd_gen_synthetic(args)
        else:
            cfg = rc.load_config(args.config, args.overrides)
            COMMANDS[args.command](args, cfg)
    except FileNotFoundError as exc:
        print(f"error: file not found: {exc.filename or exc.args[0]}", file=sys.stderr)
        return 2
    except USER_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except ContractError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001
        logger.debug("internal failure", exc_info=True)
        print(f"internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
