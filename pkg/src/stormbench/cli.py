"""Command-line entry point: generate | train | sweep | eval | report | bench.

Exit codes: 0 success, 1 unexpected error, 2 configuration error,
3 solver blow-up during generation, 4 every seed of a sweep cell blew up,
5 missing checkpoints or report inputs.
"""

import argparse
import csv
import dataclasses
import hashlib
import json
import multiprocessing
import os
import pathlib
import sys

import numpy as np
import scipy.fft as sfft

from . import __version__
from . import evaluate as E
from . import models as M
from . import simulate as S
from . import storage as St
from . import trainer as Tr

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_CONFIG = 2
EXIT_BLOWUP = 3
EXIT_ALL_BLOWN = 4
EXIT_MISSING = 5


def parse_budget(text):
    """Parameter budget with k/M suffixes: '5k' -> 5000, '1M' -> 1000000."""
    text = str(text).strip()
    scale = 1
    if text.endswith(("k", "K")):
        scale, text = 1_000, text[:-1]
    elif text.endswith(("m", "M")):
        scale, text = 1_000_000, text[:-1]
    try:
        value = int(float(text) * scale)
    except ValueError as exc:
        raise St.ConfigError(f"cannot parse budget {text!r}") from exc
    if value < 1:
        raise St.ConfigError(f"budget must be positive, got {value}")
    return value


def _load_config(path):
    if path is None:
        return St.parse_config("")
    return St.parse_config(pathlib.Path(path).read_text())


def _sha256(path):
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def _model_kwargs(cfg, family=None, seed=None):
    """ModelConfig keyword dict (sans width) from the [model] section plus overrides."""
    m = cfg.model or {}
    family = family or m.get("family")
    if family is None:
        raise St.ConfigError("no model family: pass --model or a [model] section")
    modes = m.get("modes", 12)
    return {
        "family": family,
        "n_layers": m.get("depth", 4),
        "modes": (modes, modes),
        "tucker_rank_fraction": m.get("tucker_rank", 0.5),
        "history_len": m.get("context_frames", 10),
        "lift_dim": m.get("lift_dim", 256),
        "seed": m.get("seed", 0) if seed is None else seed,
    }


def _resolve_model_config(cfg, family=None, seed=None, budget=None):
    """Final ModelConfig: fit the width to a budget or take it from the config."""
    kwargs = _model_kwargs(cfg, family=family, seed=seed)
    if kwargs["family"] == "persistence":
        return M.ModelConfig(**kwargs)
    if budget is not None:
        fam = kwargs.pop("family")
        return M.fit_width_to_budget(fam, budget, **kwargs)
    return M.ModelConfig(width=(cfg.model or {}).get("width", 0), **kwargs)


def _train_config(cfg, n_train, seed=None, updates=None):
    t = cfg.training
    total = updates or t["epochs"] * Tr.updates_per_epoch(n_train, t["batch_size"])
    return Tr.TrainConfig(
        lr0=t["lr"], batch_size=t["batch_size"], total_updates=total,
        clip_norm=t["clip_norm"] or None, seed=t["seed"] if seed is None else seed,
        beta1=t["beta1"], beta2=t["beta2"], eps=t["eps"],
        train_rollout_steps=t["rollout_steps"] or None,
    )


def _save_checkpoint(path, model, seed, budget=None):
    St.write_checkpoint(path, model.export_params(), seed=seed)
    c = model.config
    meta = {"family": c.family, "width": c.width, "n_layers": c.n_layers,
            "modes": list(c.modes), "tucker_rank_fraction": c.tucker_rank_fraction,
            "history_len": c.history_len, "lift_dim": c.lift_dim,
            "seed": seed, "budget": budget, "version": __version__}
    pathlib.Path(str(path) + ".json").write_text(json.dumps(meta, indent=2) + "\n")


def _load_checkpoint(path):
    meta = json.loads(pathlib.Path(str(path) + ".json").read_text())
    config = M.ModelConfig(
        family=meta["family"], width=meta["width"], n_layers=meta["n_layers"],
        modes=tuple(meta["modes"]), tucker_rank_fraction=meta["tucker_rank_fraction"],
        history_len=meta["history_len"], lift_dim=meta["lift_dim"], seed=meta["seed"])
    model = M.build_model(config)
    model.load_params(St.read_checkpoint(path))
    return model, meta


# ---------------------------------------------------------------------------
# generate
# ---------------------------------------------------------------------------

def cmd_generate(args):
    cfg = _load_config(args.config)
    sim = cfg.sim_config()
    samples = args.samples if args.samples is not None else sim.n_samples
    seed = args.seed if args.seed is not None else sim.seed
    try:
        sim = dataclasses.replace(sim, n_samples=samples, seed=seed)
    except ValueError as exc:
        raise St.ConfigError(str(exc)) from exc

    out = pathlib.Path(args.out)
    if out.exists():
        try:
            header, _ = St.read_dataset(out)
        except St.StorageError:
            header = None
        if header is not None and header.seed == seed and header.n_samples == samples:
            print(f"{out}: exists with matching seed/size, skipping")
            return EXIT_OK

    data = S.generate_dataset(sim)
    St.write_dataset(out, data, seed=seed)
    ens = S.enstrophy(data)
    u, v = S.vorticity_to_velocity(sfft.fft2(data[0, -1].astype(np.float64)))
    div = S.spectral_divergence(u, v)
    print(f"wrote {out}: {data.shape[0]}x{data.shape[1]}x{data.shape[2]}x{data.shape[3]} "
          f"float32, seed {seed}")
    print(f"sanity: mean enstrophy {ens:.6f}, max spectral divergence {div:.3e}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# train / sweep
# ---------------------------------------------------------------------------

def _run_cell(job):
    """Train one (budget, seed) cell; returns a manifest record. Pool-safe."""
    (data_path, config_text, family, budget, seed, out_dir, updates) = job
    cfg = St.parse_config(config_text)
    _, lazy = St.read_dataset(data_path)
    train_split, val_split, _ = St.split(lazy, cfg.split_spec())
    record = {"budget": budget, "seed": seed, "status": "done"}
    try:
        mc = _resolve_model_config(cfg, family=family, seed=seed, budget=budget)
    except ValueError as exc:
        record.update(status="unreachable", error=str(exc))
        return record
    model = M.build_model(mc)
    record["width"] = mc.width
    record["params"] = M.count_params(model)
    tc = _train_config(cfg, len(train_split), seed=seed, updates=updates)
    history = Tr.train(model, np.asarray(train_split), np.asarray(val_split), tc)

    out_dir = pathlib.Path(out_dir)
    stem = f"{mc.family}_{budget or mc.width}_s{seed}"
    ckpt = out_dir / f"{stem}.dwb"
    _save_checkpoint(ckpt, model, seed, budget=budget)
    Tr.write_history_csv(history, out_dir / f"{stem}_updates.csv",
                         out_dir / f"{stem}_epochs.csv")
    record.update(checkpoint=str(ckpt),
                  history_updates=str(out_dir / f"{stem}_updates.csv"),
                  history_epochs=str(out_dir / f"{stem}_epochs.csv"),
                  best_val_rmse=history.best_val_rmse)
    if history.unstable:
        record.update(status="unstable", blowup_step=history.blowup_step)
    return record


def _manifest_path(out_dir):
    return pathlib.Path(out_dir) / "manifest.json"


def _load_manifest(out_dir):
    path = _manifest_path(out_dir)
    if path.exists():
        return json.loads(path.read_text())
    return None


def _save_manifest(out_dir, manifest):
    _manifest_path(out_dir).write_text(json.dumps(manifest, indent=2) + "\n")


def _new_manifest(cfg, data_path, seeds):
    return {"version": __version__, "config": St.dump_config(cfg),
            "data": str(data_path), "data_sha256": _sha256(data_path),
            "seeds": seeds, "cells": {}, "reports": []}


def _cell_done(record):
    if record is None or record["status"] not in ("done", "unstable", "unreachable"):
        return False
    ckpt = record.get("checkpoint")
    return ckpt is None or pathlib.Path(ckpt).exists()


def _run_cells(cfg, args, budgets, seeds, updates):
    out_dir = pathlib.Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = _load_manifest(out_dir) or _new_manifest(cfg, args.data, seeds)
    config_text = St.dump_config(cfg)

    jobs = {}
    for budget in budgets:
        for seed in seeds:
            key = f"{budget if budget is not None else 'cfg'}/{seed}"
            if _cell_done(manifest["cells"].get(key)):
                print(f"cell {key}: already complete, skipping")
                continue
            jobs[key] = (args.data, config_text, args.model, budget, seed,
                         str(out_dir), updates)

    workers = int(os.environ.get("STORMBENCH_WORKERS", "1"))
    items = list(jobs.items())
    if workers > 1 and len(items) > 1:
        ctx = multiprocessing.get_context("fork")
        with ctx.Pool(min(workers, len(items))) as pool:
            results = pool.map(_run_cell, [job for _, job in items])
    else:
        results = [_run_cell(job) for _, job in items]
    for (key, _), record in zip(items, results):
        manifest["cells"][key] = record
        print(f"cell {key}: {record['status']}"
              + (f", params {record['params']}" if "params" in record else ""))
    _save_manifest(out_dir, manifest)

    for budget in budgets:
        prefix = f"{budget if budget is not None else 'cfg'}/"
        statuses = [r["status"] for k, r in manifest["cells"].items()
                    if k.startswith(prefix)]
        if statuses and all(s == "unstable" for s in statuses):
            print(f"error: every seed of budget cell {prefix[:-1]} blew up",
                  file=sys.stderr)
            return EXIT_ALL_BLOWN
    return EXIT_OK


def cmd_train(args):
    cfg = _load_config(args.config)
    budget = parse_budget(args.budget) if args.budget else None
    return _run_cells(cfg, args, [budget], [args.seed], args.updates)


def cmd_sweep(args):
    cfg = _load_config(args.config)
    budgets = [parse_budget(b) for b in args.budgets.split(",") if b.strip()]
    if not budgets:
        raise St.ConfigError("--budgets lists no budgets")
    if args.seeds < 1:
        raise St.ConfigError("--seeds must be >= 1")
    return _run_cells(cfg, args, budgets, list(range(args.seeds)), args.updates)


# ---------------------------------------------------------------------------
# eval / report
# ---------------------------------------------------------------------------

def _eval_one(name, model, test, clim, seed, cfg):
    ev = cfg.evaluation
    report = E.score_rollout(name, model, test, clim, seed=seed)
    if model.params:
        train_max = float(np.abs(test).max())  # stand-in scale for the sweep
        steps = ev["max_steps"] or test.shape[1] - model.config.history_len
        report.blowup_step = E.stability_sweep(
            model, test[0, :model.config.history_len], steps,
            ev["blowup_factor"] * train_max)
    return report


def cmd_eval(args):
    cfg = _load_config(args.config)
    _, lazy = St.read_dataset(args.data)
    train_split, _, test_split = St.split(lazy, cfg.split_spec())
    test = np.asarray(test_split, dtype=np.float32)
    clim = E.climatology(np.asarray(train_split))

    reports = []
    if args.model == "persistence":
        hlen = (cfg.model or {}).get("context_frames", 10)
        model = M.build_model(M.ModelConfig(family="persistence", history_len=hlen))
        reports.append(_eval_one("persistence", model, test, clim, 0, cfg))
    ckpts = []
    if args.ckpt:
        ckpts.append(pathlib.Path(args.ckpt))
    if args.sweep_dir:
        manifest = _load_manifest(args.sweep_dir)
        if manifest is None:
            print(f"error: no manifest in {args.sweep_dir}", file=sys.stderr)
            return EXIT_MISSING
        for record in manifest["cells"].values():
            if record.get("checkpoint"):
                ckpts.append(pathlib.Path(record["checkpoint"]))
    if not ckpts and not reports:
        print("error: nothing to evaluate: pass --ckpt, --sweep-dir, "
              "or --model persistence", file=sys.stderr)
        return EXIT_MISSING
    for ckpt in ckpts:
        if not ckpt.exists() or not pathlib.Path(str(ckpt) + ".json").exists():
            print(f"error: missing checkpoint {ckpt}", file=sys.stderr)
            return EXIT_MISSING
        model, meta = _load_checkpoint(ckpt)
        reports.append(_eval_one(ckpt.stem, model, test, clim, meta["seed"], cfg))

    report_dir = pathlib.Path(args.report)
    report_dir.mkdir(parents=True, exist_ok=True)
    E.write_lead_csv(reports, report_dir / "lead.csv")
    E.write_summary_csv(reports, report_dir / "summary.csv")
    for r in reports:
        print(f"{r.model}: params {r.params}, mean RMSE {r.mean_rmse:.4f}, "
              f"final RMSE {r.final_rmse:.4f}")
    return EXIT_OK


def _reports_from_csvs(report_dir):
    lead_path = pathlib.Path(report_dir) / "lead.csv"
    summary_path = pathlib.Path(report_dir) / "summary.csv"
    if not lead_path.exists() or not summary_path.exists():
        return None
    rows = {}
    with open(lead_path, newline="") as fh:
        for row in csv.DictReader(fh):
            key = (row["model"], int(row["seed"]))
            entry = rows.setdefault(key, {"family": row["family"],
                                          "params": int(row["params"]),
                                          "rmse": [], "acc": []})
            entry["rmse"].append(float(row["rmse"]))
            entry["acc"].append(float(row["acc"]))
    summary = {}
    with open(summary_path, newline="") as fh:
        for row in csv.DictReader(fh):
            summary[row["model"]] = row
    reports = []
    for (model, seed), entry in rows.items():
        extra = summary.get(model, {})
        blow = extra.get("blowup_step") or None
        per_lead = np.asarray(entry["rmse"])
        reports.append(E.ScoreReport(
            model=model, family=entry["family"], params=entry["params"], seed=seed,
            rmse_per_lead=per_lead, acc_per_lead=np.asarray(entry["acc"]),
            mean_rmse=float(per_lead.mean()), final_rmse=float(per_lead[-1]),
            seconds_per_epoch=float(extra.get("seconds_per_epoch", "nan")),
            peak_mem_bytes=int(extra.get("peak_mem_bytes", 0)),
            blowup_step=None if blow is None else int(blow)))
    return reports


def cmd_report(args):
    report_dir = pathlib.Path(args.sweep_dir) / "report"
    reports = _reports_from_csvs(report_dir)
    if not reports:
        print(f"error: no evaluation CSVs in {report_dir} (run eval first)",
              file=sys.stderr)
        return EXIT_MISSING
    p1 = report_dir / "rmse_vs_params.svg"
    p2 = report_dir / "rmse_vs_lead.svg"
    E.plot_rmse_vs_params(reports, p1)
    E.plot_rmse_vs_lead(reports, p2)
    print(f"wrote {p1}")
    print(f"wrote {p2}")
    for flag in E.ranking_flags(reports):
        print(f"warning: {flag}")
    manifest = _load_manifest(args.sweep_dir)
    if manifest is not None:
        manifest["reports"] = sorted({*manifest.get("reports", []),
                                      str(p1), str(p2)})
        _save_manifest(args.sweep_dir, manifest)
    return EXIT_OK


# ---------------------------------------------------------------------------
# bench
# ---------------------------------------------------------------------------

def cmd_bench(args):
    cfg = _load_config(args.config)
    _, lazy = St.read_dataset(args.data)
    data = np.asarray(lazy[:min(len(lazy), 8)])
    budget = parse_budget(args.budget) if args.budget else None
    model = M.build_model(_resolve_model_config(cfg, family=args.model, budget=budget))
    record = E.bench(model, data, batch_size=args.batch_size)
    for key in ("params", "batch_size", "seconds_per_epoch", "param_bytes",
                "adam_bytes", "activation_bytes", "peak_mem_bytes"):
        print(f"{key} = {record[key]}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument wiring
# ---------------------------------------------------------------------------

def build_parser():
    parser = argparse.ArgumentParser(
        prog="stormbench",
        description="Parameter-budget forecasting benchmark on 2D Navier-Stokes data")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="simulate a vorticity dataset")
    p.add_argument("--config", default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--samples", type=int, default=None)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("train", help="train one model")
    p.add_argument("--config", default=None)
    p.add_argument("--data", required=True)
    p.add_argument("--model", default=None)
    p.add_argument("--budget", default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--updates", type=int, default=None,
                   help="override the total update count")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("sweep", help="train a budget x seed grid")
    p.add_argument("--config", default=None)
    p.add_argument("--data", required=True)
    p.add_argument("--model", default=None)
    p.add_argument("--budgets", required=True, help="comma list, e.g. 5k,50k,500k")
    p.add_argument("--seeds", type=int, default=3)
    p.add_argument("--out", required=True)
    p.add_argument("--updates", type=int, default=None)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("eval", help="score checkpoints on the test split")
    p.add_argument("--config", default=None)
    p.add_argument("--data", required=True)
    p.add_argument("--ckpt", default=None)
    p.add_argument("--sweep-dir", default=None)
    p.add_argument("--model", default=None, help="'persistence' adds the baseline")
    p.add_argument("--report", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("report", help="render charts from evaluation CSVs")
    p.add_argument("--sweep-dir", required=True)
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("bench", help="runtime/memory benchmark of one model")
    p.add_argument("--config", default=None)
    p.add_argument("--data", required=True)
    p.add_argument("--model", default=None)
    p.add_argument("--budget", default=None)
    p.add_argument("--batch-size", type=int, default=4)
    p.set_defaults(func=cmd_bench)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (St.ConfigError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except S.BlowUpError as exc:
        print(f"error: solver blow-up at internal step {exc.step_index}", file=sys.stderr)
        return EXIT_BLOWUP
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_MISSING


if __name__ == "__main__":
    sys.exit(main())
