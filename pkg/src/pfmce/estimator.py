"""Joint PFM + pilot-network estimator and the slot-recursive workflow.

Slot 1 has no history and uses the pilot network alone. From slot 2 on, the
previous slot's estimate is the PFM's context; the PFM's last-patch states and
the pilot encoder's states are concatenated row-wise and projected to the
slot estimate by the fusion head. Only one slot of history is ever kept.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn

from .channel import PilotPattern, complex_to_stacked
from .classical import POOLED, CovarianceBank, interpolate_linear, lmmse_interpolate, ls_at_pilots
from .pfm import PFM, PfmConfig, ResidualBlock, SequenceStats, denormalize
from .pilot_net import PilotNet, VitConfig


def nmse(h_hat, h, db: bool = False, batch: bool = False):
    """``||h_hat - h||^2 / ||h||^2`` for real or complex arrays/tensors.

    With ``batch`` the leading axis indexes samples and the per-sample ratios
    are averaged.
    """
    if tuple(h_hat.shape) != tuple(h.shape):
        raise ValueError(f"shape mismatch {tuple(h_hat.shape)} vs {tuple(h.shape)}")
    if isinstance(h, torch.Tensor):
        h = h.detach().cpu().numpy()
    if isinstance(h_hat, torch.Tensor):
        h_hat = h_hat.detach().cpu().numpy()
    h = np.asarray(h)
    h_hat = np.asarray(h_hat)
    if not batch:
        h, h_hat = h[None], h_hat[None]
    axes = tuple(range(1, h.ndim))
    den = np.sum(np.abs(h) ** 2, axis=axes)
    if np.any(den == 0):
        raise ZeroDivisionError("ground truth has zero norm")
    val = float(np.mean(np.sum(np.abs(h_hat - h) ** 2, axis=axes) / den))
    return 10 * np.log10(val) if db else val


def nmse_db(h_hat, h) -> float:
    return nmse(h_hat, h, db=True)


class PfmCe(nn.Module):
    """Parameters ``Theta``: the PFM, the pilot network and the fusion head."""

    def __init__(self, pfm_cfg: PfmConfig, vit_cfg: VitConfig):
        super().__init__()
        if pfm_cfg.horizon != vit_cfg.t:
            raise ValueError("PFM horizon and pilot-network slot length differ")
        self.pfm = PFM(pfm_cfg)
        self.vit = PilotNet(vit_cfg)
        d, dm = pfm_cfg.d_model, vit_cfg.d_model
        self.fusion = ResidualBlock(d + dm, d, pfm_cfg.horizon)

    def init_fusion_from_pfm(self) -> None:
        """Copy the PFM output block into the fusion head, zero on the ``R`` columns.

        Afterwards ``fuse(u, r) == pfm.out_res(u)`` for any ``r``. With
        ``fusion_residual`` only the hidden layer is copied and the output
        layers are zeroed, so the fused estimate starts at ``z_p``.
        """
        d = self.pfm.cfg.d_model
        src, dst = self.pfm.out_res, self.fusion
        with torch.no_grad():
            dst.fc1.weight.zero_()
            dst.fc1.weight[:, :d] = src.fc1.weight
            dst.fc1.bias.copy_(src.fc1.bias)
            if self.pfm.cfg.fusion_residual:
                for p in (dst.fc2.weight, dst.fc2.bias, dst.skip.weight, dst.skip.bias):
                    p.zero_()
                return
            dst.fc2.weight.copy_(src.fc2.weight)
            dst.fc2.bias.copy_(src.fc2.bias)
            dst.skip.weight.zero_()
            dst.skip.weight[:, :d] = src.skip.weight
            dst.skip.bias.copy_(src.skip.bias)

    def fuse(self, u: torch.Tensor, r: torch.Tensor) -> torch.Tensor:
        if u.shape[:-1] != r.shape[:-1]:
            raise ValueError(f"row mismatch: {tuple(u.shape)} vs {tuple(r.shape)}")
        return self.fusion(torch.cat([u, r], dim=-1))

    def fused_estimate(self, u: torch.Tensor, r: torch.Tensor, stats: SequenceStats | None) -> torch.Tensor:
        """Fusion output, denormalized with the history statistics if so configured."""
        y = self.fuse(u, r)
        return denormalize(y, stats) if self.pfm.cfg.fusion_denorm else y

    def pilot_only(self, h_p: torch.Tensor, noise_var) -> torch.Tensor:
        return self.vit(h_p, noise_var)[0]

    def forward(self, z_his: torch.Tensor, h_p: torch.Tensor, noise_var) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        """``(z_hat, z_p, z_pfm)`` for slots that have a history."""
        hidden, stats = self.pfm.hidden(z_his)
        u = hidden[..., -1, :]
        z_pfm = denormalize(self.pfm.out_res(u), stats)
        z_p, r = self.vit(h_p, noise_var)
        z_hat = self.fused_estimate(u, r, stats)
        if self.pfm.cfg.fusion_residual:
            z_hat = z_hat + z_p
        return z_hat, z_p, z_pfm


@dataclass
class SlotContext:
    """Inputs of one slot. ``received`` is ``(k, t)`` or batched ``(B, k, t)``."""

    index: int
    history: torch.Tensor | None
    received: np.ndarray
    pattern: PilotPattern
    noise_var: float
    bucket: str = POOLED

    def __post_init__(self):
        if self.index < 1:
            raise ValueError("slot index starts at 1")
        if (self.history is None) != (self.index == 1):
            raise ValueError("history must be present exactly for slots after the first")


@dataclass
class Estimator:
    """Runs ``PfmCe`` on raw pilot observations.

    ``interpolation`` picks the classical coarse estimate fed to the pilot
    network ("lmmse" needs ``bank``).
    """

    model: PfmCe
    bank: CovarianceBank | None = None
    interpolation: str = "lmmse"
    dtype: torch.dtype = field(default=torch.float32)

    def coarse(self, ctx: SlotContext) -> torch.Tensor:
        est = ls_at_pilots(ctx.received, ctx.pattern)
        k, t = ctx.pattern.k, ctx.pattern.t
        if self.interpolation == "lmmse":
            if self.bank is None:
                raise ValueError("LMMSE interpolation needs a covariance bank")
            h = lmmse_interpolate(est, ctx.pattern, self.bank, ctx.noise_var, ctx.bucket)
        elif self.interpolation == "linear":
            h = interpolate_linear(est, ctx.pattern, k, t)
        else:
            raise ValueError(f"unknown interpolation {self.interpolation!r}")
        return torch.as_tensor(complex_to_stacked(h), dtype=self.dtype)

    @torch.no_grad()
    def estimate_slot(self, ctx: SlotContext) -> torch.Tensor:
        h_p = self.coarse(ctx)
        batched = h_p.dim() == 4
        if not batched:
            h_p = h_p.unsqueeze(0)
        nv = torch.full((h_p.shape[0],), ctx.noise_var, dtype=self.dtype)
        if ctx.index == 1:
            z = self.model.pilot_only(h_p, nv)
        else:
            hist = ctx.history if batched else ctx.history.unsqueeze(0)
            z = self.model(hist.to(self.dtype), h_p, nv)[0]
        return z if batched else z[0]

    def run_trajectory(
        self,
        received: Sequence[np.ndarray],
        pattern: PilotPattern,
        noise_var: float,
        truth: Sequence[np.ndarray] | None = None,
        bucket: str = POOLED,
    ) -> tuple[list[torch.Tensor], list[float] | None]:
        """Estimate consecutive slots, each fed the previous slot's estimate.

        ``truth`` (row-stacked ``(Q, T)`` per slot, batched like ``received``)
        enables per-slot NMSE.
        """
        if len(received) < 1:
            raise ValueError("need at least one slot")
        estimates, scores = [], []
        history = None
        for i, y in enumerate(received, start=1):
            z = self.estimate_slot(SlotContext(i, history, y, pattern, noise_var, bucket))
            estimates.append(z)
            if truth is not None:
                scores.append(nmse(z, np.asarray(truth[i - 1]), batch=z.dim() == 3))
            history = z
        return estimates, (scores if truth is not None else None)
