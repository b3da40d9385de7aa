"""Dense-tensor kernels, Adam and weight-container I/O shared by all networks.

Tensors are ``torch.Tensor``; reverse-mode differentiation is torch autograd.
Kernels here are thin and explicit so that each one can be checked against a
brute-force loop oracle in the test-suite.
"""
from __future__ import annotations

import io
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Mapping

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

NEG_INF = -1e30
VAR_EPS = 1e-6
COND_EPS = 1e-12
WEIGHTS_MAGIC = b"PFMW1\n"


class DimensionError(ValueError):
    """Raised when tensor extents are incompatible."""


def matmul(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    if a.dim() != 2 or b.dim() != 2:
        raise DimensionError(f"matmul expects 2-D operands, got {tuple(a.shape)} and {tuple(b.shape)}")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"inner dimensions differ: {a.shape[1]} vs {b.shape[0]}")
    return a @ b


def causal_mask(n: int, dtype=torch.float64, device=None) -> torch.Tensor:
    """Additive mask with 0 where ``row >= col`` and ``NEG_INF`` elsewhere."""
    idx = torch.arange(n, device=device)
    allowed = idx[:, None] >= idx[None, :]
    mask = torch.zeros(n, n, dtype=dtype, device=device)
    return mask.masked_fill(~allowed, NEG_INF)


def masked_softmax(logits: torch.Tensor, mask: torch.Tensor | None = None) -> torch.Tensor:
    """Row-wise softmax of ``logits + mask`` over the last axis.

    Masked entries (mask <= NEG_INF / 2) get exactly zero weight. A row with
    every entry masked has no defined distribution and raises ``ValueError``.
    """
    if mask is None:
        z = logits
    else:
        if mask.shape[-2:] != logits.shape[-2:]:
            raise DimensionError(f"mask {tuple(mask.shape)} does not match logits {tuple(logits.shape)}")
        blocked = mask <= NEG_INF / 2
        if bool(blocked.all(dim=-1).any()):
            raise ValueError("masked_softmax: a row is entirely masked")
        z = logits + mask.to(logits.dtype)
    z = z - z.amax(dim=-1, keepdim=True).detach()
    w = torch.exp(z)
    w = w / w.sum(dim=-1, keepdim=True)
    if mask is not None:
        w = w.masked_fill(blocked, 0.0)
    return w


def standardize(x: torch.Tensor, eps: float = VAR_EPS) -> torch.Tensor:
    """Zero-mean, unit-variance over the last axis; variance floored at ``eps``."""
    mean = x.mean(dim=-1, keepdim=True)
    var = ((x - mean) ** 2).mean(dim=-1, keepdim=True)
    return (x - mean) / torch.sqrt(torch.clamp(var, min=eps))


def ada_layer_norm(x: torch.Tensor, gamma: torch.Tensor, beta: torch.Tensor) -> torch.Tensor:
    """``standardize(x) * gamma + beta`` with per-channel ``gamma``/``beta``."""
    return standardize(x) * gamma + beta


class AdaLayerNorm(nn.Module):
    """Layer norm whose per-channel scale and shift come from a scalar condition.

    The condition (a noise variance) is mapped through ``ln(c + 1e-12)`` and a
    16-unit GELU network to ``(gamma - 1, beta)``. The last layer starts at zero,
    so a freshly built layer is plain standardization.

    With ``adaptive=False`` the layer degrades to a conventional layer norm
    with learned, condition-independent ``gamma``/``beta``.
    """

    def __init__(self, channels: int, hidden: int = 16, adaptive: bool = True):
        super().__init__()
        self.channels = channels
        self.adaptive = adaptive
        if adaptive:
            self.cond1 = nn.Linear(1, hidden)
            self.cond2 = nn.Linear(hidden, 2 * channels)
            nn.init.zeros_(self.cond2.weight)
            nn.init.zeros_(self.cond2.bias)
        else:
            self.weight = nn.Parameter(torch.ones(channels))
            self.bias = nn.Parameter(torch.zeros(channels))

    def modulation(self, noise_var: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """Return ``(gamma, beta)`` of shape ``(B, channels)``."""
        c = torch.log(noise_var.reshape(-1, 1).to(self.cond1.weight.dtype) + COND_EPS)
        out = self.cond2(F.gelu(self.cond1(c)))
        dgamma, beta = out.split(self.channels, dim=-1)
        return 1.0 + dgamma, beta

    def forward(self, x: torch.Tensor, noise_var: torch.Tensor | None = None) -> torch.Tensor:
        if x.shape[-1] != self.channels:
            raise DimensionError(f"expected {self.channels} channels, got {x.shape[-1]}")
        if not self.adaptive:
            return ada_layer_norm(x, self.weight, self.bias)
        if noise_var is None:
            raise ValueError("AdaLayerNorm needs a condition")
        gamma, beta = self.modulation(noise_var)
        shape = (gamma.shape[0],) + (1,) * (x.dim() - 2) + (self.channels,)
        return ada_layer_norm(x, gamma.reshape(shape), beta.reshape(shape))


def depthwise_conv2d(x: torch.Tensor, kernels: torch.Tensor, bias: torch.Tensor | None = None) -> torch.Tensor:
    """Per-channel 3x3 convolution (cross-correlation form), stride 1, zero "same" padding.

    ``x`` is channels-last ``(..., h, w, c)``; ``kernels`` is ``(3, 3, c)``.
    """
    c = x.shape[-1]
    if kernels.dim() != 3 or kernels.shape[-1] != c:
        raise DimensionError(f"kernel shape {tuple(kernels.shape)} does not match {c} channels")
    kh, kw = kernels.shape[:2]
    lead = x.shape[:-3]
    xb = x.reshape((-1,) + tuple(x.shape[-3:])).permute(0, 3, 1, 2)
    w = kernels.permute(2, 0, 1).unsqueeze(1)  # (c, 1, kh, kw)
    y = F.conv2d(xb, w, bias, padding=(kh // 2, kw // 2), groups=c)
    return y.permute(0, 2, 3, 1).reshape(lead + tuple(y.shape[2:]) + (c,))


def conv2d(x: torch.Tensor, kernels: torch.Tensor, bias: torch.Tensor | None = None) -> torch.Tensor:
    """Full cross-channel convolution, stride 1, zero "same" padding.

    ``x`` is ``(..., h, w, c_in)``; ``kernels`` is ``(kh, kw, c_in, c_out)``.
    """
    if kernels.dim() != 4 or kernels.shape[2] != x.shape[-1]:
        raise DimensionError(f"kernel shape {tuple(kernels.shape)} does not match {x.shape[-1]} input channels")
    kh, kw, _, c_out = kernels.shape
    lead = x.shape[:-3]
    xb = x.reshape((-1,) + tuple(x.shape[-3:])).permute(0, 3, 1, 2)
    w = kernels.permute(3, 2, 0, 1)
    y = F.conv2d(xb, w, bias, padding=(kh // 2, kw // 2))
    return y.permute(0, 2, 3, 1).reshape(lead + tuple(y.shape[2:]) + (c_out,))


def sinusoidal_encoding(n: int, d: int, dtype=torch.float64) -> torch.Tensor:
    """Transformer positional table: ``PE[p, 2i] = sin(p / 10000^(2i/d))``, cosine on odd columns."""
    pos = torch.arange(n, dtype=torch.float64)[:, None]
    i2 = torch.arange(0, d, 2, dtype=torch.float64)
    angle = pos / torch.pow(10000.0, i2 / d)
    pe = torch.zeros(n, d, dtype=torch.float64)
    pe[:, 0::2] = torch.sin(angle)
    pe[:, 1::2] = torch.cos(angle[:, : d // 2])
    return pe.to(dtype)


# --------------------------------------------------------------------------- Adam


@dataclass
class AdamState:
    exp_avg: torch.Tensor
    exp_avg_sq: torch.Tensor
    step: int = 0


@dataclass
class Adam:
    """Adam with decoupled weight decay over a named parameter set.

    Parameters with ``requires_grad=False`` are frozen and never touched.
    """

    params: Mapping[str, nn.Parameter]
    lr: float = 1e-3
    weight_decay: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    state: dict[str, AdamState] = field(default_factory=dict)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    @torch.no_grad()
    def step(self) -> None:
        live = [(n, p) for n, p in self.params.items() if p.requires_grad and p.grad is not None]
        for name, p in live:
            if not bool(torch.isfinite(p.grad).all()):
                raise FloatingPointError(f"non-finite gradient in parameter {name!r}")
        for name, p in live:
            st = self.state.get(name)
            if st is None:
                st = self.state[name] = AdamState(torch.zeros_like(p), torch.zeros_like(p))
            st.step += 1
            g = p.grad
            st.exp_avg.mul_(self.beta1).add_(g, alpha=1 - self.beta1)
            st.exp_avg_sq.mul_(self.beta2).addcmul_(g, g, value=1 - self.beta2)
            if self.weight_decay:
                p.mul_(1 - self.lr * self.weight_decay)
            m_hat = st.exp_avg / (1 - self.beta1**st.step)
            v_hat = st.exp_avg_sq / (1 - self.beta2**st.step)
            p.sub_(self.lr * m_hat / (v_hat.sqrt() + self.eps))


def adam_step(params: Mapping[str, nn.Parameter], opt: Adam) -> None:
    opt.step()


# --------------------------------------------------------------------------- grad check


def grad_check(
    f: Callable[[], torch.Tensor],
    params: Iterable[torch.Tensor],
    step: float = 1e-5,
    max_entries: int | None = None,
    seed: int = 0,
) -> float:
    """Max relative error between autograd and central finite differences.

    ``f`` takes no arguments and closes over ``params`` (float64 leaves with
    ``requires_grad``). The error of each tensor is ``max|a - n| / max(max|a|, max|n|)``;
    the worst tensor is returned. ``max_entries`` samples that many coordinates
    per tensor to keep large networks cheap.
    """
    params = list(params)
    for p in params:
        p.grad = None
    loss = f()
    grads = torch.autograd.grad(loss, params, allow_unused=True)
    rng = np.random.default_rng(seed)
    worst = 0.0
    with torch.no_grad():
        for p, g in zip(params, grads):
            if g is None:
                g = torch.zeros_like(p)
            flat = p.view(-1)
            n = flat.numel()
            idx = np.arange(n) if max_entries is None or n <= max_entries else rng.choice(n, max_entries, replace=False)
            ana = g.reshape(-1)[torch.as_tensor(idx)].double()
            num = torch.empty_like(ana)
            for j, i in enumerate(idx):
                orig = flat[i].item()
                flat[i] = orig + step
                fp = f().item()
                flat[i] = orig - step
                fm = f().item()
                flat[i] = orig
                num[j] = (fp - fm) / (2 * step)
            scale = max(ana.abs().max().item(), num.abs().max().item())
            if scale == 0.0:
                continue
            worst = max(worst, (ana - num).abs().max().item() / scale)
    return worst


# --------------------------------------------------------------------------- weight container


def dump_weights(tensors: Mapping[str, np.ndarray | torch.Tensor]) -> bytes:
    buf = io.BytesIO()
    buf.write(WEIGHTS_MAGIC)
    for name, value in tensors.items():
        arr = value.detach().cpu().numpy() if isinstance(value, torch.Tensor) else np.asarray(value)
        arr = np.array(arr, dtype="<f4", order="C")  # keeps rank 0, unlike ascontiguousarray
        raw = name.encode("utf-8")
        buf.write(struct.pack("<I", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<I", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(arr.tobytes(order="C"))
    return buf.getvalue()


def parse_weights(data: bytes) -> dict[str, np.ndarray]:
    if not data.startswith(WEIGHTS_MAGIC):
        raise ValueError("not a PFMW1 weight container")
    out: dict[str, np.ndarray] = {}
    pos = len(WEIGHTS_MAGIC)
    while pos < len(data):
        (nlen,) = struct.unpack_from("<I", data, pos)
        pos += 4
        name = data[pos : pos + nlen].decode("utf-8")
        pos += nlen
        (rank,) = struct.unpack_from("<I", data, pos)
        pos += 4
        shape = struct.unpack_from(f"<{rank}I", data, pos)
        pos += 4 * rank
        count = math.prod(shape)
        if pos + 4 * count > len(data):
            raise ValueError(f"truncated payload for {name!r}")
        out[name] = np.frombuffer(data, dtype="<f4", count=count, offset=pos).reshape(shape).copy()
        pos += 4 * count
    return out


def save_weights(path: str | Path, tensors: Mapping[str, np.ndarray | torch.Tensor]) -> None:
    Path(path).write_bytes(dump_weights(tensors))


def load_weights(path: str | Path) -> dict[str, np.ndarray]:
    return parse_weights(Path(path).read_bytes())
