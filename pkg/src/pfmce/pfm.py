"""Decoder-only patch transformer that predicts a slot of CSI from the previous one.

Every row of the ``(Q, T)`` history is an independent univariate series:
it is standardized, left-padded to a whole number of patches, embedded, run
through a causal transformer, and only the last patch state is projected to
the ``T``-point forecast, which is then de-standardized.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .numeric import VAR_EPS, causal_mask, masked_softmax, sinusoidal_encoding, standardize


@dataclass
class PfmConfig:
    n_layers: int = 2
    d_model: int = 1280
    n_heads: int = 16
    patch_len: int = 32
    ffn_dim: int | None = None
    context_len: int = 14
    horizon: int = 14
    # rescale the fusion head output with the history's row statistics
    fusion_denorm: bool = False
    # add the pilot network estimate to the fusion head output
    fusion_residual: bool = False

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ValueError("d_model must be divisible by n_heads")
        if self.patch_len < 1:
            raise ValueError("patch_len must be positive")

    @property
    def ffn_hidden(self) -> int:
        return self.ffn_dim or 4 * self.d_model

    @property
    def n_patches(self) -> int:
        return -(-self.context_len // self.patch_len)


@dataclass
class SequenceStats:
    mean: torch.Tensor
    std: torch.Tensor


@dataclass
class PatchBatch:
    patches: torch.Tensor  # (..., n_pat, patch_len)
    index: torch.Tensor  # (n_pat,)
    pad: int


class ResidualBlock(nn.Module):
    """dense -> GELU -> dense, plus a linear skip when widths differ."""

    def __init__(self, d_in: int, d_hidden: int, d_out: int):
        super().__init__()
        self.fc1 = nn.Linear(d_in, d_hidden)
        self.fc2 = nn.Linear(d_hidden, d_out)
        self.skip = nn.Linear(d_in, d_out) if d_in != d_out else None

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        y = self.fc2(F.gelu(self.fc1(x)))
        return y + (self.skip(x) if self.skip is not None else x)

    def zero_(self) -> "ResidualBlock":
        for p in self.parameters():
            nn.init.zeros_(p)
        return self


class LayerNorm(nn.Module):
    """Standardization with variance floor and learned per-channel affine."""

    def __init__(self, d: int):
        super().__init__()
        self.weight = nn.Parameter(torch.ones(d))
        self.bias = nn.Parameter(torch.zeros(d))

    def forward(self, x):
        return standardize(x) * self.weight + self.bias


class MultiHeadAttention(nn.Module):
    def __init__(self, d: int, n_heads: int):
        super().__init__()
        self.n_heads = n_heads
        self.d_head = d // n_heads
        self.wq = nn.Linear(d, d, bias=False)
        self.wk = nn.Linear(d, d, bias=False)
        self.wv = nn.Linear(d, d, bias=False)
        self.wo = nn.Linear(d, d, bias=False)

    def forward(self, x: torch.Tensor, mask: torch.Tensor | None = None) -> torch.Tensor:
        *lead, n, d = x.shape
        split = lambda t: t.reshape(*lead, n, self.n_heads, self.d_head).transpose(-2, -3)  # noqa: E731
        q, k, v = split(self.wq(x)), split(self.wk(x)), split(self.wv(x))
        scores = q @ k.transpose(-1, -2) / math.sqrt(self.d_head)
        heads = masked_softmax(scores, mask) @ v
        return self.wo(heads.transpose(-2, -3).reshape(*lead, n, d))


class TransformerLayer(nn.Module):
    """Pre-norm causal self-attention and FFN, each with a residual add."""

    def __init__(self, d: int, n_heads: int, ffn_hidden: int):
        super().__init__()
        self.ln1 = LayerNorm(d)
        self.attn = MultiHeadAttention(d, n_heads)
        self.ln2 = LayerNorm(d)
        self.ffn1 = nn.Linear(d, ffn_hidden)
        self.ffn2 = nn.Linear(ffn_hidden, d)

    def forward(self, x, mask=None):
        x = x + self.attn(self.ln1(x), mask)
        return x + self.ffn2(F.gelu(self.ffn1(self.ln2(x))))


def normalize(z: torch.Tensor) -> tuple[torch.Tensor, SequenceStats]:
    mean = z.mean(dim=-1, keepdim=True)
    var = ((z - mean) ** 2).mean(dim=-1, keepdim=True)
    std = torch.sqrt(torch.clamp(var, min=VAR_EPS))
    return (z - mean) / std, SequenceStats(mean, std)


def denormalize(z: torch.Tensor, stats: SequenceStats) -> torch.Tensor:
    return z * stats.std + stats.mean


def patchify(z_norm: torch.Tensor, patch_len: int) -> PatchBatch:
    """Left zero-pad to a multiple of ``patch_len`` and cut non-overlapping patches."""
    t = z_norm.shape[-1]
    n_pat = -(-t // patch_len)
    pad = n_pat * patch_len - t
    padded = F.pad(z_norm, (pad, 0))
    patches = padded.reshape(z_norm.shape[:-1] + (n_pat, patch_len))
    return PatchBatch(patches, torch.arange(n_pat), pad)


def preprocess(z_his: torch.Tensor, patch_len: int) -> tuple[PatchBatch, SequenceStats]:
    z_norm, stats = normalize(z_his)
    return patchify(z_norm, patch_len), stats


class PFM(nn.Module):
    def __init__(self, cfg: PfmConfig):
        super().__init__()
        self.cfg = cfg
        d = cfg.d_model
        self.in_res = ResidualBlock(cfg.patch_len, d, d)
        self.layers = nn.ModuleList(TransformerLayer(d, cfg.n_heads, cfg.ffn_hidden) for _ in range(cfg.n_layers))
        self.out_res = ResidualBlock(d, d, cfg.horizon)

    def input_project(self, batch: PatchBatch) -> torch.Tensor:
        e = self.in_res(batch.patches)
        pe = sinusoidal_encoding(e.shape[-2], e.shape[-1], dtype=e.dtype)
        return e + pe

    def backbone(self, e: torch.Tensor, causal: bool = True) -> torch.Tensor:
        mask = causal_mask(e.shape[-2], dtype=e.dtype) if causal else None
        for layer in self.layers:
            e = layer(e, mask)
        return e

    def hidden(self, z_his: torch.Tensor) -> tuple[torch.Tensor, SequenceStats]:
        """All patch states ``U`` ``(..., Q, n_pat, d)`` and the row statistics."""
        batch, stats = preprocess(z_his, self.cfg.patch_len)
        return self.backbone(self.input_project(batch)), stats

    def forward(self, z_his: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """``(z_pfm, u_last)``: ``(..., Q, T)`` forecast and ``(..., Q, d)`` last-patch states."""
        u, stats = self.hidden(z_his)
        u_last = u[..., -1, :]
        return denormalize(self.out_res(u_last), stats), u_last

    predict = forward
