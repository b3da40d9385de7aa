"""LS pilot estimation, linear and separable LMMSE interpolation, despreading.

All interpolators are linear in the pilot values, so they are built as small
matrices once per (pattern, statistics, noise level) and applied with einsum to
any number of leading batch axes.
"""
from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass, field
from typing import Iterable

import numpy as np

from .channel import PilotPattern
from .numeric import VAR_EPS

POOLED = "pooled"


@dataclass
class PilotEstimate:
    """LS values per antenna, each ``(..., n_sub, n_sym)`` at ``subcarriers[n] x symbols``."""

    values: list[np.ndarray]
    subcarriers: list[np.ndarray]
    symbols: np.ndarray

    @property
    def n_t(self) -> int:
        return len(self.values)


def ls_at_pilots(y_p: np.ndarray, pattern: PilotPattern) -> PilotEstimate:
    """Divide the received pilot REs by each antenna's own pilot symbols."""
    if y_p.shape[-2:] != (pattern.k, pattern.t):
        raise ValueError(f"observation grid {y_p.shape[-2:]} does not match pattern {(pattern.k, pattern.t)}")
    sym = np.asarray(pattern.symbols)
    values, subs = [], []
    for n in range(pattern.n_t):
        kk = pattern.subcarriers(n)
        x = pattern.values[n, : len(kk)]
        values.append(y_p[..., kk[:, None], sym[None, :]] / x)
        subs.append(kk)
    return PilotEstimate(values, subs, sym)


def linear_matrix(positions: np.ndarray, n: int) -> np.ndarray:
    """``(n, len(positions))`` matrix of 1-D linear interpolation with flat edges."""
    positions = np.asarray(positions, dtype=float)
    if len(positions) == 0:
        raise ValueError("empty pilot set")
    grid = np.arange(n, dtype=float)
    if len(positions) == 1:
        return np.ones((n, 1))
    eye = np.eye(len(positions))
    return np.stack([np.interp(grid, positions, eye[j]) for j in range(len(positions))], axis=1)


def interpolate_linear(est: PilotEstimate, pattern: PilotPattern, k: int, t: int) -> np.ndarray:
    """Frequency pass then time pass of linear interpolation; returns complex ``(..., n_t, k, t)``."""
    a_t = linear_matrix(est.symbols, t)
    out = []
    for n in range(est.n_t):
        if len(est.subcarriers[n]) < 1:
            raise ValueError(f"antenna {n} has no pilots")
        a_f = linear_matrix(est.subcarriers[n], k)
        out.append(np.einsum("kp,...ps,ts->...kt", a_f, est.values[n], a_t))
    return np.stack(out, axis=-3)


# --------------------------------------------------------------------------- covariances


@dataclass
class CovarianceBank:
    """Frequency and time covariances per bucket (``profile/speed/pattern``)."""

    freq: dict[str, np.ndarray] = field(default_factory=dict)
    time: dict[str, np.ndarray] = field(default_factory=dict)
    counts: dict[str, int] = field(default_factory=dict)

    def get(self, key: str) -> tuple[np.ndarray, np.ndarray]:
        if key not in self.freq:
            if POOLED in self.freq:
                key = POOLED
            else:
                raise KeyError(f"no covariance bucket {key!r}")
        return self.freq[key], self.time[key]

    def to_weights(self) -> dict[str, np.ndarray]:
        out = {}
        for key in sorted(self.freq):
            for tag, mats in (("cov_f", self.freq), ("cov_t", self.time)):
                c = mats[key]
                out[f"{tag}/{key}"] = np.stack([c.real, c.imag], axis=-1)
        return out

    @classmethod
    def from_weights(cls, weights: dict[str, np.ndarray]) -> "CovarianceBank":
        bank = cls()
        for name, arr in weights.items():
            tag, _, key = name.partition("/")
            c = arr[..., 0].astype(float) + 1j * arr[..., 1].astype(float)
            if tag == "cov_f":
                bank.freq[key] = c
            elif tag == "cov_t":
                bank.time[key] = c
        for key in bank.freq:
            bank.counts[key] = 0
        return bank


def bucket_key(profile: str, speed_kmh: float, pattern: str) -> str:
    return f"{profile}/{speed_kmh:g}/{pattern}"


def estimate_covariances(
    samples: Iterable[tuple[str, np.ndarray]], min_samples: int = 100, pooled: bool = True
) -> CovarianceBank:
    """Sample covariances from ``(bucket, H)`` pairs, ``H`` complex ``(n_t, k, t)``.

    ``C_f`` averages ``h h^H`` over antennas and symbols, ``C_t`` over antennas
    and subcarriers; both get ``1e-6`` diagonal loading. Buckets with fewer than
    ``min_samples`` slots raise. With ``pooled`` an extra all-bucket entry is kept.
    """
    acc_f: dict[str, np.ndarray] = {}
    acc_t: dict[str, np.ndarray] = {}
    n_vec_f: dict[str, int] = defaultdict(int)
    n_vec_t: dict[str, int] = defaultdict(int)
    counts: dict[str, int] = defaultdict(int)
    for key, h in samples:
        n_t, k, t = h.shape[-3:]
        hf = np.moveaxis(h, -2, -1).reshape(-1, k)  # rows are frequency vectors
        ht = h.reshape(-1, t)
        cf = hf.T @ hf.conj()
        ct = ht.T @ ht.conj()
        for b in (key, POOLED) if pooled else (key,):
            acc_f[b] = acc_f.get(b, 0) + cf
            acc_t[b] = acc_t.get(b, 0) + ct
            n_vec_f[b] += hf.shape[0]
            n_vec_t[b] += ht.shape[0]
            counts[b] += h.size // (n_t * k * t)
    bank = CovarianceBank()
    for b in acc_f:
        if counts[b] < min_samples:
            raise ValueError(f"bucket {b!r} has {counts[b]} samples, need {min_samples}")
        cf = acc_f[b] / n_vec_f[b]
        ct = acc_t[b] / n_vec_t[b]
        bank.freq[b] = 0.5 * (cf + cf.conj().T) + VAR_EPS * np.eye(cf.shape[0])
        bank.time[b] = 0.5 * (ct + ct.conj().T) + VAR_EPS * np.eye(ct.shape[0])
        bank.counts[b] = counts[b]
    if not bank.freq:
        raise ValueError("empty dataset: no covariance bucket")
    return bank


# --------------------------------------------------------------------------- LMMSE


def lmmse_filters(
    c_f: np.ndarray, c_t: np.ndarray, subcarriers: np.ndarray, symbols: np.ndarray, noise_var: float
) -> tuple[np.ndarray, np.ndarray]:
    """Separable Wiener filters for one antenna.

    Returns ``w_f`` ``(k, n_sub)`` (frequency stage at each pilot symbol) and
    ``g_t`` ``(k, t, n_sym)`` (per-subcarrier time stage applied to the
    frequency-stage output, using that output's exact second-order statistics).
    """
    p = np.asarray(subcarriers)
    s = np.asarray(symbols)
    c_t = c_t / np.real(np.trace(c_t) / c_t.shape[0])
    c_pp = c_f[np.ix_(p, p)]
    w_f = np.linalg.solve((c_pp + noise_var * np.eye(len(p))).T, c_f[:, p].T).T
    a = np.real(np.einsum("kp,pq,kq->k", w_f, c_pp, w_f.conj()))
    b = noise_var * np.real(np.einsum("kp,kp->k", w_f, w_f.conj()))
    c = np.real(np.einsum("kp,kp->k", c_f[:, p], w_f.conj()))
    c_ss = c_t[np.ix_(s, s)]
    eye = np.eye(len(s))
    lhs = a[:, None, None] * c_ss[None] + b[:, None, None] * eye[None]  # (k, S, S)
    rhs = c[:, None, None] * c_t[:, s][None]  # (k, t, S)
    g_t = np.swapaxes(np.linalg.solve(np.swapaxes(lhs, -1, -2), np.swapaxes(rhs, -1, -2)), -1, -2)
    return w_f, g_t


def lmmse_interpolate(
    est: PilotEstimate, pattern: PilotPattern, bank: CovarianceBank, noise_var: float, bucket: str = POOLED
) -> np.ndarray:
    """Frequency-then-time LMMSE interpolation; complex ``(..., n_t, k, t)``."""
    if noise_var < 0:
        raise ValueError("noise variance must be nonnegative")
    c_f, c_t = bank.get(bucket)
    out = []
    for n in range(est.n_t):
        w_f, g_t = lmmse_filters(c_f, c_t, est.subcarriers[n], est.symbols, noise_var)
        x = np.einsum("kp,...ps->...ks", w_f, est.values[n])
        out.append(np.einsum("kts,...ks->...kt", g_t, x))
    return np.stack(out, axis=-3)


# --------------------------------------------------------------------------- despreading


def despread(est: np.ndarray, r_t: int, r_f: int) -> np.ndarray:
    """Mean over non-overlapping ``r_f x r_t`` tiles of ``(..., k, t)``.

    The time axis shrinks to ``t / r_t``; each frequency mean is repeated over
    its ``r_f`` subcarriers so the result keeps ``k`` rows.
    """
    k, t = est.shape[-2:]
    if t % r_t or k % r_f:
        raise ValueError(f"despreading factors ({r_f}, {r_t}) do not divide grid ({k}, {t})")
    lead = est.shape[:-2]
    tiles = est.reshape(lead + (k // r_f, r_f, t // r_t, r_t)).mean(axis=(-3, -1))
    return np.repeat(tiles, r_f, axis=-2)
