"""ViT-style pilot processing network.

Coarse estimate ``(2N_t, K, T)`` → despread features → one token per
(subcarrier, real/imag antenna row) → encoder layers whose attention runs per
subcarrier and whose FFN mixes neighbouring tokens with a 3x3 depthwise
convolution on the ``K x 2N_t`` grid → convolutional decoder → ``(Q, T)``.

No parameter depends on ``N_t`` or ``K``, so one weight set serves any grid.
"""
from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .numeric import AdaLayerNorm, conv2d, depthwise_conv2d, sinusoidal_encoding
from .pfm import MultiHeadAttention


@dataclass
class VitConfig:
    n_layers: int = 10
    n_heads: int = 4
    d_model: int = 128
    d_ffn: int = 256
    despread_t: int = 2
    despread_f: int = 6
    dec_channels: int = 32
    t: int = 14
    adaptive_norm: bool = True
    # add the coarse estimate to the decoder output (global residual)
    input_skip: bool = False

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ValueError("d_model must be divisible by n_heads")

    @property
    def feature_len(self) -> int:
        return self.t + self.t // self.despread_t


def despread_torch(x: torch.Tensor, r_t: int, r_f: int) -> torch.Tensor:
    k, t = x.shape[-2:]
    if t % r_t or k % r_f:
        raise ValueError(f"despreading factors ({r_f}, {r_t}) do not divide grid ({k}, {t})")
    lead = x.shape[:-2]
    tiles = x.reshape(lead + (k // r_f, r_f, t // r_t, r_t)).mean(dim=(-3, -1))
    return tiles.repeat_interleave(r_f, dim=-2)


class EncoderLayer(nn.Module):
    def __init__(self, cfg: VitConfig):
        super().__init__()
        d, d2 = cfg.d_model, cfg.d_ffn
        ada = cfg.adaptive_norm
        self.norm_attn = AdaLayerNorm(d, adaptive=ada)
        self.attn = MultiHeadAttention(d, cfg.n_heads)
        self.linear1 = nn.Linear(d, d2)
        self.norm1 = AdaLayerNorm(d2, adaptive=ada)
        self.dw_kernel = nn.Parameter(torch.randn(3, 3, d2) / 3.0)
        self.dw_bias = nn.Parameter(torch.zeros(d2))
        self.norm2 = AdaLayerNorm(d2, adaptive=ada)
        self.linear2 = nn.Linear(d2, d)
        self.norm3 = AdaLayerNorm(d, adaptive=ada)
        self.use_attention = True
        self.use_ffn = True

    def attention(self, x, noise_var):
        # x: (B, K, W, d); attention mixes only the W tokens of one subcarrier
        return x + self.attn(self.norm_attn(x, noise_var))

    def ffn(self, x, noise_var):
        r1 = F.gelu(self.norm1(self.linear1(x), noise_var))
        rd = F.gelu(self.norm2(depthwise_conv2d(r1, self.dw_kernel, self.dw_bias), noise_var))
        return self.norm3(self.linear2(rd), noise_var) + x

    def forward(self, x, noise_var):
        if self.use_attention:
            x = self.attention(x, noise_var)
        if self.use_ffn:
            x = self.ffn(x, noise_var)
        return x


class ConvDecoder(nn.Module):
    """5x5 conv, two residual conv blocks, position-wise FC to ``T``, final 5x5 conv."""

    def __init__(self, cfg: VitConfig, kernel: int = 5):
        super().__init__()
        c = cfg.dec_channels

        def kern(cin, cout):
            return nn.Parameter(torch.randn(kernel, kernel, cin, cout) * (2.0 / (kernel * kernel * cin)) ** 0.5)

        self.conv_in = kern(cfg.d_model, c)
        self.bias_in = nn.Parameter(torch.zeros(c))
        self.blocks = nn.ParameterList()
        self.block_bias = nn.ParameterList()
        for _ in range(2):
            for _ in range(2):
                self.blocks.append(kern(c, c))
                self.block_bias.append(nn.Parameter(torch.zeros(c)))
        self.fc = nn.Linear(c, cfg.t)
        out = torch.zeros(kernel, kernel, 1, 1)
        out[kernel // 2, kernel // 2] = 1.0
        self.conv_out = nn.Parameter(out)
        self.bias_out = nn.Parameter(torch.zeros(1))

    def forward(self, r: torch.Tensor) -> torch.Tensor:
        """``r``: ``(B, K, W, d)`` → ``(B, W, K, T)``."""
        h = F.relu(conv2d(r, self.conv_in, self.bias_in))
        for b in range(2):
            a = F.relu(conv2d(h, self.blocks[2 * b], self.block_bias[2 * b]))
            h = h + conv2d(a, self.blocks[2 * b + 1], self.block_bias[2 * b + 1])
        y = self.fc(h)  # (B, K, W, T)
        y = y.permute(0, 2, 1, 3).unsqueeze(-1)  # (B, W, K, T, 1): conv over the (K, T) plane
        return conv2d(y, self.conv_out, self.bias_out).squeeze(-1)


class PilotNet(nn.Module):
    def __init__(self, cfg: VitConfig):
        super().__init__()
        self.cfg = cfg
        self.embed = nn.Linear(cfg.feature_len, cfg.d_model)
        self.layers = nn.ModuleList(EncoderLayer(cfg) for _ in range(cfg.n_layers))
        self.decoder = ConvDecoder(cfg)

    def features(self, h_p: torch.Tensor) -> torch.Tensor:
        """``A``: coarse estimate and its despread version side by side, ``(B, 2N_t, K, L_f)``."""
        cfg = self.cfg
        if h_p.shape[-1] != cfg.t:
            raise ValueError(f"expected {cfg.t} symbols, got {h_p.shape[-1]}")
        return torch.cat([h_p, despread_torch(h_p, cfg.despread_t, cfg.despread_f)], dim=-1)

    def prepare_features(self, h_p: torch.Tensor) -> torch.Tensor:
        """Per-subcarrier patch embeddings ``F`` of shape ``(B, K, 2N_t, d_m)``."""
        a = self.features(h_p)
        return self.embed(a.transpose(-2, -3))

    def encode(self, f: torch.Tensor, noise_var: torch.Tensor) -> torch.Tensor:
        """``(B, K, W, d_m)`` token grid → encoder state on the same grid."""
        w = f.shape[-2]
        x = f + sinusoidal_encoding(w, f.shape[-1], dtype=f.dtype)
        for layer in self.layers:
            x = layer(x, noise_var)
        return x

    def forward(self, h_p: torch.Tensor, noise_var: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """Returns ``(z_p, R)``: ``(B, Q, T)`` estimate and ``(B, Q, d_m)`` hidden states.

        Row ``q = w * K + k`` matches the row-stacked CSI layout.
        """
        squeeze = h_p.dim() == 3
        if squeeze:
            h_p = h_p.unsqueeze(0)
        noise_var = torch.as_tensor(noise_var, dtype=h_p.dtype).reshape(-1).expand(h_p.shape[0])
        grid = self.encode(self.prepare_features(h_p), noise_var)
        z = self.decoder(grid)
        b, w, k, t = z.shape
        z = z.reshape(b, w * k, t)
        if self.cfg.input_skip:
            z = z + h_p.reshape(b, w * k, t)
        r = grid.transpose(1, 2).reshape(b, w * k, -1)
        if squeeze:
            return z[0], r[0]
        return z, r
