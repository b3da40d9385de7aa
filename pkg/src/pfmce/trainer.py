"""PFM adaptation and two-phase estimator training.

Stages:
  adapt   - PFM alone on MSE(z_pfm, z), lr 1e-5, decay 1e-2
  phase1  - whole estimator on MSE(z_hat, z) + MSE(z_p, z), lr 1e-5, decay 1e-2
  phase2  - backbone layers frozen, MSE(z_hat, z) only, lr 1e-4, decay 1e-4
"""
from __future__ import annotations

import csv
import logging
import math
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
import torch

from .dataset import Dataset
from .estimator import PfmCe, nmse
from .numeric import Adam, load_weights, save_weights

log = logging.getLogger(__name__)

STAGES = ("adapt", "phase1", "phase2")
STAGE_DEFAULTS = {
    "adapt": (1e-5, 1e-2),
    "phase1": (1e-5, 1e-2),
    "phase2": (1e-4, 1e-4),
}
BACKBONE = "pfm/layer"
# parameter groups that feed the estimator output during phase 1
ESTIMATOR_GROUPS = ("pfm/in_res", "pfm/layer", "fusion", "vit/embed", "vit/layer", "vit/decoder")


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    stage: str = "adapt"
    lr: float | None = None
    weight_decay: float | None = None
    epochs: int = 20
    batch_size: int = 64
    seed: int = 0
    checkpoint_every: int = 0
    checkpoint_dir: str | None = None

    def __post_init__(self):
        if self.stage not in STAGES:
            raise ValueError(f"unknown stage {self.stage!r}")
        lr, wd = STAGE_DEFAULTS[self.stage]
        if self.lr is None:
            self.lr = lr
        if self.weight_decay is None:
            self.weight_decay = wd

    @property
    def freeze(self) -> tuple[str, ...]:
        return (BACKBONE,) if self.stage == "phase2" else ()


@dataclass
class LossReport:
    stage: str
    rows: list[dict] = field(default_factory=list)
    batch_losses: list[list[dict]] = field(default_factory=list)
    grad_audit: dict[str, float] = field(default_factory=dict)

    @property
    def loss_names(self) -> list[str]:
        return ["loss_pfm"] if self.stage == "adapt" else (["main", "aux", "tot"] if self.stage == "phase1" else ["main"])

    def write_csv(self, path: str | Path) -> None:
        cols = ["epoch", *self.loss_names, "val_nmse_db"]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(cols)
            for row in self.rows:
                w.writerow([row["epoch"]] + [f"{row[c]:.6g}" for c in cols[1:]])


# --------------------------------------------------------------------------- weight naming


def container_name(torch_name: str) -> str:
    """``pfm.layers.0.attn.wq.weight`` → ``pfm/layer0/wq/weight``."""
    name = re.sub(r"layers\.(\d+)\.", r"layer\1.", torch_name)
    if name.startswith("pfm."):
        name = name.replace(".attn.", ".")
    return name.replace(".", "/")


def model_weights(model: torch.nn.Module) -> dict[str, torch.Tensor]:
    return {container_name(n): p.detach() for n, p in model.named_parameters()}


def load_model_weights(model: torch.nn.Module, weights: dict[str, np.ndarray], strict: bool = True) -> list[str]:
    """Copy container tensors into ``model``; returns the names that were loaded."""
    params = {container_name(n): p for n, p in model.named_parameters()}
    loaded = []
    with torch.no_grad():
        for name, p in params.items():
            if name not in weights:
                if strict:
                    raise KeyError(f"weight {name!r} missing from container")
                continue
            arr = torch.as_tensor(np.asarray(weights[name]), dtype=p.dtype)
            if tuple(arr.shape) != tuple(p.shape):
                raise ValueError(f"{name}: shape {tuple(arr.shape)} != {tuple(p.shape)}")
            p.copy_(arr)
            loaded.append(name)
    if strict:
        extra = set(weights) - set(params)
        if extra:
            raise KeyError(f"unknown weights in container: {sorted(extra)[:5]}")
    return loaded


def save_checkpoint(model: torch.nn.Module, path: str | Path) -> None:
    save_weights(path, model_weights(model))


def load_checkpoint(model: torch.nn.Module, path: str | Path) -> None:
    load_model_weights(model, load_weights(path))


# --------------------------------------------------------------------------- batches


def _batch(ds: Dataset, idx: np.ndarray, dtype) -> dict[str, torch.Tensor]:
    r = ds.records[idx]
    return {
        # packed records are unaligned; copy before handing to torch
        "coarse": torch.as_tensor(np.array(r["coarse"], dtype=np.float32), dtype=dtype),
        "z_his": torch.as_tensor(np.array(r["z_his"], dtype=np.float32), dtype=dtype),
        "z": torch.as_tensor(np.array(r["z"], dtype=np.float32), dtype=dtype),
        "noise_var": torch.as_tensor(10.0 ** (-r["snr_db"].astype(np.float64) / 10), dtype=dtype),
    }


def iterate_batches(ds: Dataset, batch_size: int, rng: np.random.Generator | None, dtype=torch.float32):
    order = rng.permutation(len(ds)) if rng is not None else np.arange(len(ds))
    for start in range(0, len(ds), batch_size):
        yield _batch(ds, order[start : start + batch_size], dtype)


def stage_losses(model: PfmCe, stage: str, batch: dict[str, torch.Tensor]) -> dict[str, torch.Tensor]:
    z = batch["z"]
    if stage == "adapt":
        z_pfm, _ = model.pfm(batch["z_his"])
        return {"loss_pfm": torch.mean((z_pfm - z) ** 2)}
    z_hat, z_p, _ = model(batch["z_his"], batch["coarse"], batch["noise_var"])
    main = torch.mean((z_hat - z) ** 2)
    if stage == "phase2":
        return {"main": main}
    aux = torch.mean((z_p - z) ** 2)
    return {"main": main, "aux": aux, "tot": main + aux}


@torch.no_grad()
def validate(model: PfmCe, stage: str, ds: Dataset, batch_size: int = 256, dtype=torch.float32) -> float:
    """Mean per-record NMSE (dB) of the stage's output on ``ds``."""
    if len(ds) == 0:
        return float("nan")
    model.eval()
    num = []
    for b in iterate_batches(ds, batch_size, None, dtype):
        if stage == "adapt":
            out = model.pfm(b["z_his"])[0]
        else:
            out = model(b["z_his"], b["coarse"], b["noise_var"])[0]
        err = ((out - b["z"]) ** 2).sum(dim=(1, 2)) / (b["z"] ** 2).sum(dim=(1, 2))
        num.append(err.double())
    return 10 * math.log10(torch.cat(num).mean().item())


def _group(name: str) -> str:
    for g in ESTIMATOR_GROUPS + ("pfm/out_res",):
        if name.startswith(g):
            return g
    return name.split("/")[0]


def train_stage(
    model: PfmCe,
    train: Dataset,
    cfg: TrainConfig,
    val: Dataset | None = None,
    on_epoch: Callable[[int, PfmCe], None] | None = None,
) -> LossReport:
    """Run one stage in place on ``model``; returns its loss report."""
    torch.manual_seed(cfg.seed)
    dtype = next(model.parameters()).dtype
    if cfg.stage == "phase1":
        model.init_fusion_from_pfm()
    named = {container_name(n): p for n, p in model.named_parameters()}
    for name, p in named.items():
        if cfg.stage == "adapt":
            p.requires_grad_(name.startswith("pfm/"))
        elif name.startswith("pfm/out_res"):
            # repurposed as the fusion head; not on the estimator's path
            p.requires_grad_(False)
        else:
            p.requires_grad_(not any(name.startswith(f) for f in cfg.freeze))
    opt = Adam(named, lr=cfg.lr, weight_decay=cfg.weight_decay)
    report = LossReport(cfg.stage)
    rng = np.random.default_rng([cfg.seed, 5])
    for epoch in range(1, cfg.epochs + 1):
        model.train()
        batch_rows = []
        for batch in iterate_batches(train, cfg.batch_size, rng, dtype):
            opt.zero_grad()
            losses = stage_losses(model, cfg.stage, batch)
            total = losses["tot"] if "tot" in losses else next(iter(losses.values()))
            if not torch.isfinite(total):
                if cfg.checkpoint_dir:
                    save_checkpoint(model, Path(cfg.checkpoint_dir) / f"{cfg.stage}_diverged.pfmw")
                raise TrainingDiverged(f"{cfg.stage}: non-finite loss at epoch {epoch}")
            total.backward()
            if epoch == 1:
                for name, p in named.items():
                    if p.grad is not None and p.requires_grad:
                        g = _group(name)
                        report.grad_audit[g] = report.grad_audit.get(g, 0.0) + p.grad.abs().sum().item()
            opt.step()
            batch_rows.append({k: v.item() for k, v in losses.items()})
        row = {"epoch": epoch}
        for key in batch_rows[0]:
            row[key] = float(np.mean([b[key] for b in batch_rows]))
        row["val_nmse_db"] = validate(model, cfg.stage, val, dtype=dtype) if val is not None else float("nan")
        report.rows.append(row)
        report.batch_losses.append(batch_rows)
        log.info("%s epoch %d %s", cfg.stage, epoch, {k: round(v, 6) for k, v in row.items() if k != "epoch"})
        if cfg.checkpoint_every and cfg.checkpoint_dir and epoch % cfg.checkpoint_every == 0:
            save_checkpoint(model, Path(cfg.checkpoint_dir) / f"{cfg.stage}_epoch{epoch}.pfmw")
        if on_epoch is not None:
            on_epoch(epoch, model)
    for p in model.parameters():
        p.requires_grad_(True)
    return report


def adapt_pfm(model: PfmCe, train: Dataset, cfg: TrainConfig, val: Dataset | None = None) -> LossReport:
    if cfg.stage != "adapt":
        raise ValueError("adapt_pfm needs an 'adapt' config")
    return train_stage(model, train, cfg, val)


def train_phase1(model: PfmCe, train: Dataset, cfg: TrainConfig, val: Dataset | None = None) -> LossReport:
    if cfg.stage != "phase1":
        raise ValueError("train_phase1 needs a 'phase1' config")
    return train_stage(model, train, cfg, val)


def train_phase2(model: PfmCe, train: Dataset, cfg: TrainConfig, val: Dataset | None = None) -> LossReport:
    if cfg.stage != "phase2":
        raise ValueError("train_phase2 needs a 'phase2' config")
    return train_stage(model, train, cfg, val)
