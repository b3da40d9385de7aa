"""Command-line front end: ``gen``, ``train``, ``eval`` and ``report``.

Exit codes:
  0  all requested outputs written
  1  runtime failure (e.g. training diverged)
  2  invalid config key/value, unknown method or bad arguments
  3  missing predecessor checkpoint or weights
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import os
import sys
from collections import defaultdict
from pathlib import Path

import numpy as np
import torch

from .classical import CovarianceBank
from .config import ConfigError, RunConfig, load_config
from .dataset import calibration_bank, read_dataset, split_by_trajectory, write_dataset
from .estimator import PfmCe
from .evaluation import METHODS, NEURAL, grid, read_rows, sweep, write_rows
from .numeric import load_weights, save_weights
from .trainer import STAGES, TrainConfig, TrainingDiverged, load_checkpoint, save_checkpoint, train_stage

THREADS_ENV = "PFMCE_THREADS"
EXIT_RUNTIME, EXIT_CONFIG, EXIT_MISSING = 1, 2, 3
PREDECESSOR = {"adapt": None, "phase1": "adapt", "phase2": "phase1"}

log = logging.getLogger("pfmce")


class CliError(Exception):
    def __init__(self, message: str, code: int):
        super().__init__(message)
        self.code = code


def build_model(cfg: RunConfig) -> PfmCe:
    torch.manual_seed(cfg.train.seed)
    return PfmCe(cfg.pfm, cfg.vit)


def bank_path(dataset_path: str | Path) -> Path:
    return Path(str(dataset_path) + ".bank")


def _load_bank(path: str | None, cfg: RunConfig) -> CovarianceBank:
    if path:
        if not Path(path).exists():
            raise CliError(f"covariance bank {path} not found", EXIT_MISSING)
        return CovarianceBank.from_weights(load_weights(path))
    return calibration_bank(cfg.channel, cfg.seed)


# --------------------------------------------------------------------------- commands


def cmd_gen(cfg: RunConfig, out: str) -> int:
    bank = calibration_bank(cfg.channel, cfg.seed)
    count = write_dataset(out, cfg.channel, cfg.seed, bank)
    save_weights(bank_path(out), bank.to_weights())
    Path(out + ".ini").write_text(cfg.to_text())
    print(f"records {count}")
    print(f"digest {cfg.channel.digest(cfg.seed).hex()}")
    return 0


def _default_init(out: Path, stage: str) -> Path | None:
    prev = PREDECESSOR[stage]
    return None if prev is None else out.with_name(f"{prev}.pfmw")


def cmd_train(cfg: RunConfig, data: str, stage: str, out: str, init: str | None = None) -> int:
    out_p = Path(out)
    init_p = Path(init) if init else _default_init(out_p, stage)
    if PREDECESSOR[stage] is not None and (init_p is None or not init_p.exists()):
        raise CliError(f"{stage} needs the {PREDECESSOR[stage]} checkpoint ({init_p})", EXIT_MISSING)
    if not Path(data).exists():
        raise CliError(f"dataset {data} not found", EXIT_MISSING)
    ds = read_dataset(data)
    if (ds.n_t, ds.k, ds.t) != (cfg.channel.n_t, cfg.channel.k, cfg.channel.t):
        raise CliError("dataset grid does not match the [channel] config", EXIT_CONFIG)
    model = build_model(cfg)
    if init_p is not None:
        load_checkpoint(model, init_p)
    tr, va = split_by_trajectory(ds, cfg.channel.n_slots, cfg.train.val_fraction, cfg.train.seed)
    lr, wd = cfg.train.stage_params(stage)
    tcfg = TrainConfig(
        stage=stage,
        lr=lr,
        weight_decay=wd,
        epochs=cfg.train.epochs,
        batch_size=cfg.train.batch_size,
        seed=cfg.train.seed,
        checkpoint_every=cfg.train.checkpoint_every,
        checkpoint_dir=str(out_p.parent),
    )
    report = train_stage(model, ds.subset(tr), tcfg, ds.subset(va) if len(va) else None)
    save_checkpoint(model, out_p)
    report.write_csv(out_p.with_suffix(".loss.csv"))
    out_p.with_suffix(".ini").write_text(f"# digest {cfg.digest()}\n" + cfg.to_text())
    last = report.rows[-1]
    print(f"{stage} epochs {len(report.rows)} final {json.dumps({k: round(v, 6) for k, v in last.items()})}")
    return 0


def cmd_eval(cfg: RunConfig, out: str, weights: str | None = None, bank: str | None = None) -> int:
    methods = list(cfg.eval.methods)
    unknown = sorted(set(methods) - set(METHODS))
    if unknown:
        raise CliError(f"unknown method(s): {', '.join(unknown)}", EXIT_CONFIG)
    model = None
    if any(m in NEURAL for m in methods):
        if not weights or not Path(weights).exists():
            raise CliError(f"neural methods need weights (got {weights})", EXIT_MISSING)
        model = build_model(cfg)
        load_checkpoint(model, weights)
    points = grid(cfg.eval.snrs_db, cfg.eval.speeds_kmh, cfg.eval.patterns, cfg.eval.profiles)
    rows = sweep(
        cfg.channel,
        _load_bank(bank, cfg),
        points,
        methods,
        model,
        n_traj=cfg.eval.n_trajectories,
        seed=cfg.eval.seed,
        interpolation=cfg.eval.interpolation,
    )
    if not all(np.isfinite(r.nmse_db) for r in rows):
        raise CliError("non-finite NMSE in sweep", EXIT_RUNTIME)
    write_rows(rows, out, cfg.digest())
    for r in rows:
        if r.slot == 0:
            print(f"{r.method:7s} snr {r.snr_db:g} speed {r.speed_kmh:g} {r.pattern} {r.profile}: {r.nmse_db:.2f} dB")
    return 0


def cmd_report(inputs: list[str], out_dir: str) -> int:
    """Aggregate sweep CSVs into an SNR table (mean NMSE) and a per-slot table."""
    rows, digests = [], []
    for path in inputs:
        if not Path(path).exists():
            raise CliError(f"{path} not found", EXIT_MISSING)
        rows.extend(read_rows(path))
        mirror = Path(path).with_suffix(".json")
        if mirror.exists():
            digests.append(json.loads(mirror.read_text()).get("config_digest", ""))
    digest = hashlib.sha256("|".join(digests).encode()).hexdigest()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)

    snr = defaultdict(dict)
    slots = defaultdict(dict)
    for r in rows:
        if r.slot == 0:
            snr[(r.method, r.speed_kmh, r.pattern, r.profile)][r.snr_db] = r.nmse_db
        else:
            slots[(r.method, r.snr_db, r.speed_kmh, r.pattern, r.profile)][r.slot] = r.nmse_db
    snr_axis = sorted({s for v in snr.values() for s in v})
    slot_axis = sorted({s for v in slots.values() for s in v})
    tables = {
        "snr_table": (["method", "speed_kmh", "pattern", "profile"] + [f"snr_{s:g}" for s in snr_axis], snr, snr_axis),
        "slot_table": (["method", "snr_db", "speed_kmh", "pattern", "profile"] + [f"slot_{s}" for s in slot_axis], slots, slot_axis),
    }
    for name, (header, table, axis) in tables.items():
        body = []
        for key in sorted(table):
            body.append([*(f"{v:.6g}" if isinstance(v, float) else v for v in key)] + [
                f"{table[key][a]:.6g}" if a in table[key] else "" for a in axis
            ])
        with open(out / f"{name}.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(header)
            w.writerows(body)
        (out / f"{name}.json").write_text(json.dumps({"config_digest": digest, "columns": header, "rows": body}, indent=1))
        print(f"{name}: {len(body)} rows")
    return 0


# --------------------------------------------------------------------------- entry point


def _parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="pfmce", description="PFM-aided channel estimation toolkit")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="INI run config; defaults apply to missing keys")
        p.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE", help="override a config value")

    g = sub.add_parser("gen", help="generate a training dataset")
    common(g)
    g.add_argument("--out", required=True)
    g.add_argument("--slots", type=int)
    g.add_argument("--trajectories", type=int)
    g.add_argument("--seed", type=int)

    t = sub.add_parser("train", help="run one training stage")
    common(t)
    t.add_argument("--data", required=True)
    t.add_argument("--stage", required=True, choices=STAGES)
    t.add_argument("--out", required=True, help="output weights (.pfmw)")
    t.add_argument("--init", help="predecessor checkpoint (default: <out dir>/<previous stage>.pfmw)")
    t.add_argument("--epochs", type=int)

    e = sub.add_parser("eval", help="NMSE sweep over SNR/speed/pattern/profile")
    common(e)
    e.add_argument("--out", required=True, help="output CSV (JSON mirror written alongside)")
    e.add_argument("--weights")
    e.add_argument("--bank", help="covariance bank written by gen (default: recompute from config)")
    e.add_argument("--methods", help="comma-separated subset of " + ",".join(METHODS))

    r = sub.add_parser("report", help="aggregate sweep CSVs into per-figure tables")
    r.add_argument("inputs", nargs="+")
    r.add_argument("--out", required=True, help="output directory")
    return ap


def main(argv: list[str] | None = None) -> int:
    threads = os.environ.get(THREADS_ENV)
    if threads:
        torch.set_num_threads(int(threads))
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(asctime)s %(message)s")
    try:
        if args.command == "report":
            return cmd_report(args.inputs, args.out)
        overrides = list(args.set)
        for flag, key in (("slots", "channel.n_slots"), ("trajectories", "channel.n_trajectories"), ("seed", "channel.seed"), ("epochs", "train.epochs"), ("methods", "eval.methods")):
            value = getattr(args, flag, None)
            if value is not None:
                overrides.append(f"{key}={value}")
        if args.config and not Path(args.config).exists():
            raise CliError(f"config {args.config} not found", EXIT_CONFIG)
        cfg = load_config(args.config, overrides)
        if args.command == "gen":
            return cmd_gen(cfg, args.out)
        if args.command == "train":
            return cmd_train(cfg, args.data, args.stage, args.out, args.init)
        return cmd_eval(cfg, args.out, args.weights, args.bank)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except TrainingDiverged as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
