"""NMSE sweeps of LMMSE, linear, the standalone pilot network and the joint estimator."""
from __future__ import annotations

import csv
import itertools
import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch

from .channel import complex_to_stacked
from .classical import CovarianceBank
from .dataset import ChannelConfig, TrajectoryParams, draw_params, simulate
from .estimator import Estimator, PfmCe, nmse

METHODS = ("lmmse", "linear", "vit", "pfm-ce")
NEURAL = ("vit", "pfm-ce")
CSV_COLUMNS = ("method", "snr_db", "speed_kmh", "pattern", "profile", "slot", "nmse_db", "n")
MIXED = "mixed"


@dataclass(frozen=True)
class SweepRow:
    method: str
    snr_db: float
    speed_kmh: float
    pattern: str
    profile: str
    slot: int  # 0 = mean over all slots
    nmse_db: float
    n: int


@dataclass
class GridPoint:
    snr_db: float
    speed_kmh: float
    pattern: str
    profile: str = MIXED


def _stack_z(h: np.ndarray) -> np.ndarray:
    s = complex_to_stacked(h)
    return s.reshape(s.shape[:-3] + (-1, s.shape[-1]))


def simulate_point(cfg: ChannelConfig, bank: CovarianceBank, point: GridPoint, n_traj: int, seed: int):
    rng = np.random.default_rng([seed, 21])
    trajs = []
    for j in range(n_traj):
        base = draw_params(cfg, rng)
        profile = base.profile if point.profile == MIXED else point.profile
        p = TrajectoryParams(profile, point.speed_kmh, base.scs_khz, base.correlation, point.snr_db, point.pattern)
        trajs.append(simulate(cfg, p, bank, [seed, 22, j]))
    return trajs


@torch.no_grad()
def evaluate_point(
    trajs,
    methods,
    model: PfmCe | None,
    bank: CovarianceBank,
    interpolation: str = "lmmse",
) -> dict[str, list[float]]:
    """Per-slot NMSE (linear scale, averaged over trajectories) for each method."""
    truth = np.stack([_stack_z(t.truth) for t in trajs])  # (N, slots, Q, T)
    n_slots = truth.shape[1]
    out: dict[str, list[float]] = {}
    if "lmmse" in methods:
        est = np.stack([_stack_z(t.lmmse) for t in trajs])
        out["lmmse"] = [nmse(est[:, i], truth[:, i], batch=True) for i in range(n_slots)]
    if "linear" in methods:
        est = np.stack([_stack_z(t.linear) for t in trajs])
        out["linear"] = [nmse(est[:, i], truth[:, i], batch=True) for i in range(n_slots)]
    if any(m in methods for m in NEURAL):
        if model is None:
            raise ValueError("neural methods need model weights")
        model.eval()
        dtype = next(model.parameters()).dtype
        coarse_src = "lmmse" if interpolation == "lmmse" else "linear"
        coarse = torch.as_tensor(
            np.stack([complex_to_stacked(getattr(t, coarse_src)) for t in trajs]), dtype=dtype
        )  # (N, slots, 2n_t, k, t)
        nv = torch.full((len(trajs),), trajs[0].noise_var, dtype=dtype)
        if "vit" in methods:
            out["vit"] = [nmse(model.pilot_only(coarse[:, i], nv), truth[:, i], batch=True) for i in range(n_slots)]
        if "pfm-ce" in methods:
            scores = []
            hist = None
            for i in range(n_slots):
                if hist is None:
                    z = model.pilot_only(coarse[:, i], nv)
                else:
                    z = model(hist, coarse[:, i], nv)[0]
                scores.append(nmse(z, truth[:, i], batch=True))
                hist = z
            out["pfm-ce"] = scores
    return out


def sweep(
    cfg: ChannelConfig,
    bank: CovarianceBank,
    points,
    methods,
    model: PfmCe | None = None,
    n_traj: int = 200,
    seed: int = 1234,
    interpolation: str = "lmmse",
) -> list[SweepRow]:
    unknown = set(methods) - set(METHODS)
    if unknown:
        raise ValueError(f"unknown method(s): {sorted(unknown)}")
    rows = []
    for point in points:
        trajs = simulate_point(cfg, bank, point, n_traj, seed)
        res = evaluate_point(trajs, methods, model, bank, interpolation)
        for method, per_slot in res.items():
            for i, v in enumerate(per_slot, start=1):
                rows.append(SweepRow(method, point.snr_db, point.speed_kmh, point.pattern, point.profile, i, 10 * np.log10(v), n_traj))
            rows.append(
                SweepRow(method, point.snr_db, point.speed_kmh, point.pattern, point.profile, 0, 10 * np.log10(np.mean(per_slot)), n_traj * len(per_slot))
            )
    rows.sort(key=lambda r: (r.method, r.snr_db, r.speed_kmh, r.pattern, r.profile, r.slot))
    return rows


def grid(snrs, speeds, patterns, profiles=(MIXED,)) -> list[GridPoint]:
    return [GridPoint(*p) for p in itertools.product(snrs, speeds, patterns, profiles)]


def write_rows(rows: list[SweepRow], csv_path: str | Path, digest: str = "") -> None:
    """CSV plus a JSON mirror next to it (same stem, ``.json``)."""
    csv_path = Path(csv_path)
    with open(csv_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(CSV_COLUMNS)
        for r in rows:
            w.writerow([r.method, f"{r.snr_db:.6g}", f"{r.speed_kmh:.6g}", r.pattern, r.profile, r.slot, f"{r.nmse_db:.6g}", r.n])
    payload = {"config_digest": digest, "columns": list(CSV_COLUMNS), "rows": [asdict(r) for r in rows]}
    csv_path.with_suffix(".json").write_text(json.dumps(payload, indent=1))


def read_rows(csv_path: str | Path) -> list[SweepRow]:
    with open(csv_path, newline="") as fh:
        rd = csv.DictReader(fh)
        if tuple(rd.fieldnames or ()) != CSV_COLUMNS:
            raise ValueError(f"{csv_path}: unexpected header {rd.fieldnames}")
        return [
            SweepRow(r["method"], float(r["snr_db"]), float(r["speed_kmh"]), r["pattern"], r["profile"], int(r["slot"]), float(r["nmse_db"]), int(r["n"]))
            for r in rd
        ]
