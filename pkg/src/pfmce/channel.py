"""Time/frequency/space-correlated OFDM fading channels and FDM pilot patterns.

Channels are tapped delay lines whose taps fade with a sum-of-sinusoids Jakes
process sampled at OFDM symbol instants. Slots of one trajectory are cut from
a single continuous time axis, so there is no jump at slot boundaries.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

SPEED_OF_LIGHT = 299_792_458.0
N_SINUSOIDS = 32
N_TAPS = 12
# last tap of the exponential profile sits 20 dB below the first
TAP_DECAY = np.log(100.0) / (N_TAPS - 1)

PROFILE_IDS = {"TDL-A30": 0, "TDL-B100": 1, "TDL-C300": 2, "TDL-D30": 3}
PATTERN_IDS = {"2P": 0, "4P": 1}
CORRELATION_RHO = {"Low": 0.0, "Medium": 0.3, "Medium-A": 0.6, "High": 0.9}
PILOT_SYMBOLS = {"2P": (2, 11), "4P": (2, 5, 8, 11)}


@dataclass(frozen=True)
class TdlProfile:
    name: str
    delays: np.ndarray
    powers: np.ndarray
    k_factors: np.ndarray
    rms_delay_spread: float

    def __post_init__(self):
        if np.any(self.delays < 0) or np.any(np.diff(self.delays) < 0):
            raise ValueError("tap delays must be nonnegative and ascending")
        if abs(float(np.sum(self.powers)) - 1.0) > 1e-9:
            raise ValueError("tap powers must sum to 1")


def exponential_profile(name: str, rms_delay_spread: float, los_k_db: float | None = None) -> TdlProfile:
    """12-tap exponential power-delay profile with the requested rms delay spread.

    ``los_k_db`` turns the first tap into a Rician (line-of-sight) tap.
    """
    idx = np.arange(N_TAPS, dtype=float)
    p = np.exp(-TAP_DECAY * idx)
    p /= p.sum()
    # rms spread is linear in the tap spacing; solve for the spacing on unit grid
    mean = np.sum(p * idx)
    unit_rms = np.sqrt(np.sum(p * idx**2) - mean**2)
    if rms_delay_spread > 0:
        delays = idx * (rms_delay_spread / unit_rms)
    else:
        delays = np.zeros(N_TAPS)
    k = np.zeros(N_TAPS)
    if los_k_db is not None:
        k[0] = 10 ** (los_k_db / 10)
    return TdlProfile(name, delays, p, k, rms_delay_spread)


def single_tap_profile(name: str = "flat") -> TdlProfile:
    return TdlProfile(name, np.zeros(1), np.ones(1), np.zeros(1), 0.0)


PROFILES = {
    "TDL-A30": exponential_profile("TDL-A30", 30e-9),
    "TDL-B100": exponential_profile("TDL-B100", 100e-9),
    "TDL-C300": exponential_profile("TDL-C300", 300e-9),
    "TDL-D30": exponential_profile("TDL-D30", 30e-9, los_k_db=9.0),
}


@dataclass(frozen=True)
class MobilityConfig:
    speed: float  # m/s
    carrier_frequency: float = 3.5e9
    subcarrier_spacing: float = 30e3

    @property
    def doppler(self) -> float:
        return self.speed * self.carrier_frequency / SPEED_OF_LIGHT

    @property
    def symbol_duration(self) -> float:
        # normal cyclic prefix, averaged over the slot
        return (1.0 + 1.0 / 14.0) / self.subcarrier_spacing

    @classmethod
    def from_kmh(cls, kmh: float, **kw) -> "MobilityConfig":
        return cls(kmh / 3.6, **kw)


@dataclass(frozen=True)
class SpatialCorrelation:
    label: str
    matrix: np.ndarray

    @classmethod
    def exponential(cls, label: str, n_t: int) -> "SpatialCorrelation":
        rho = CORRELATION_RHO[label]
        i = np.arange(n_t)
        return cls(label, rho ** np.abs(i[:, None] - i[None, :]))

    def sqrt(self) -> np.ndarray:
        r = np.asarray(self.matrix)
        if not np.allclose(r, r.conj().T, atol=1e-9):
            raise ValueError("correlation matrix is not Hermitian")
        w, v = np.linalg.eigh(r)
        if w.min() < -1e-9:
            raise ValueError(f"correlation matrix is not PSD (min eigenvalue {w.min():.3g})")
        return (v * np.sqrt(np.clip(w, 0, None))) @ v.conj().T


@dataclass
class ChannelRealization:
    """One slot of CSI, complex ``(n_t, k, t)``."""

    h: np.ndarray

    @property
    def real(self) -> np.ndarray:
        return self.h.real

    @property
    def imag(self) -> np.ndarray:
        return self.h.imag

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.h.shape

    def stacked(self) -> np.ndarray:
        """Real/imag concatenated along the antenna axis: ``(2 n_t, k, t)``."""
        return np.concatenate([self.h.real, self.h.imag], axis=0)

    def as_z(self) -> np.ndarray:
        """Row-stacked real tensor ``(2 n_t k, t)``."""
        s = self.stacked()
        return s.reshape(-1, s.shape[-1])


def z_to_complex(z: np.ndarray, n_t: int, k: int) -> np.ndarray:
    """Inverse of ``ChannelRealization.as_z`` (works on leading batch axes)."""
    t = z.shape[-1]
    s = z.reshape(z.shape[:-2] + (2 * n_t, k, t))
    return s[..., :n_t, :, :] + 1j * s[..., n_t:, :, :]


def complex_to_stacked(h: np.ndarray) -> np.ndarray:
    """Complex ``(..., n_t, k, t)`` → real ``(..., 2 n_t, k, t)``."""
    return np.concatenate([h.real, h.imag], axis=-3)


# --------------------------------------------------------------------------- pilots


@dataclass(frozen=True)
class PilotPattern:
    """FDM comb pilots: antenna ``n`` owns subcarriers ``offset[n] + stride * j``."""

    label: str
    symbols: tuple[int, ...]
    offsets: tuple[int, ...]
    stride: int
    values: np.ndarray = field(repr=False)  # complex (n_t, k_per_antenna, n_symbols)
    k: int = 0
    t: int = 14

    def __post_init__(self):
        if len(set(self.offsets)) != len(self.offsets) or any(o >= self.stride for o in self.offsets):
            raise ValueError("antenna comb offsets must be distinct and below the stride")
        if not self.symbols or any(s >= self.t or s < 0 for s in self.symbols):
            raise ValueError("pilot symbols outside the slot")
        for n in range(self.n_t):
            if len(self.subcarriers(n)) == 0:
                raise ValueError(f"antenna {n} has no pilot subcarrier")
        if np.any(np.abs(self.values) == 0):
            raise ValueError("pilot symbols must be nonzero")

    @property
    def n_t(self) -> int:
        return len(self.offsets)

    def subcarriers(self, n: int) -> np.ndarray:
        return np.arange(self.offsets[n], self.k, self.stride)

    @property
    def n_per_antenna(self) -> int:
        return min(len(self.subcarriers(n)) for n in range(self.n_t))

    def mask(self) -> np.ndarray:
        """Boolean ``(n_t, k, t)``: where antenna ``n`` transmits a pilot."""
        m = np.zeros((self.n_t, self.k, self.t), dtype=bool)
        for n in range(self.n_t):
            m[n][np.ix_(self.subcarriers(n), list(self.symbols))] = True
        return m

    def grid(self) -> np.ndarray:
        """Complex ``(n_t, k, t)`` transmitted pilot grid, zero off-comb."""
        x = np.zeros((self.n_t, self.k, self.t), dtype=complex)
        for n in range(self.n_t):
            kk = self.subcarriers(n)
            x[n][np.ix_(kk, list(self.symbols))] = self.values[n, : len(kk)]
        return x


def make_pattern(
    label: str,
    n_t: int,
    k: int,
    t: int = 14,
    seed: int = 0,
    symbols: tuple[int, ...] | None = None,
    stride: int | None = None,
) -> PilotPattern:
    """Default comb: stride ``max(4, n_t)``, antenna ``n`` at offset ``n``; seeded QPSK values."""
    stride = stride or max(4, n_t)
    symbols = tuple(symbols if symbols is not None else PILOT_SYMBOLS[label])
    rng = np.random.default_rng([seed, 0x9170])
    n_k = -(-k // stride)
    bits = rng.integers(0, 2, size=(2, n_t, n_k, len(symbols)))
    values = ((2 * bits[0] - 1) + 1j * (2 * bits[1] - 1)) / np.sqrt(2)
    return PilotPattern(label, symbols, tuple(range(n_t)), stride, values, k, t)


def dense_pattern(n_t: int, k: int, t: int = 14, seed: int = 0) -> PilotPattern:
    """Every RE is a pilot (single antenna only, since combs cannot overlap)."""
    if n_t != 1:
        raise ValueError("a fully dense pattern exists only for one antenna")
    return make_pattern("dense", 1, k, t, seed, symbols=tuple(range(t)), stride=1)


# --------------------------------------------------------------------------- fading


def _tap_gains(
    profile: TdlProfile,
    mobility: MobilityConfig,
    n_t: int,
    times: np.ndarray,
    rng: np.random.Generator,
) -> np.ndarray:
    """Unit-power Jakes gains per (antenna, tap, time), scaled by tap power."""
    n_taps = len(profile.delays)
    m = np.arange(N_SINUSOIDS)
    # stratified arrival angles keep the ensemble autocorrelation at J0
    alpha = 2 * np.pi * (m + rng.random((n_t, n_taps, N_SINUSOIDS))) / N_SINUSOIDS
    phi = 2 * np.pi * rng.random((n_t, n_taps, N_SINUSOIDS))
    wd = 2 * np.pi * mobility.doppler
    phase = wd * np.cos(alpha)[..., None] * times + phi[..., None]
    g = np.exp(1j * phase).sum(axis=2) / np.sqrt(N_SINUSOIDS)
    k = profile.k_factors[None, :, None]
    if np.any(profile.k_factors > 0):
        theta0 = 2 * np.pi * rng.random((n_t, n_taps, 1))
        phi0 = 2 * np.pi * rng.random((n_t, n_taps, 1))
        los = np.exp(1j * (wd * np.cos(theta0) * times + phi0))
        g = np.sqrt(k / (k + 1)) * los + np.sqrt(1 / (k + 1)) * g
    return g * np.sqrt(profile.powers)[None, :, None]


def generate_trajectory(
    profile: TdlProfile,
    mobility: MobilityConfig,
    correlation: SpatialCorrelation | None,
    n_t: int,
    k: int,
    t: int,
    n_slots: int,
    seed,
) -> list[ChannelRealization]:
    """Consecutive slots of one user's channel; ``E|H|^2 = 1`` per RE."""
    if k < 1 or t < 1:
        raise ValueError("k and t must be at least 1")
    if n_slots < 1:
        raise ValueError("need at least one slot")
    rng = np.random.default_rng(seed)
    times = np.arange(n_slots * t) * mobility.symbol_duration
    g = _tap_gains(profile, mobility, n_t, times, rng)  # (n_t, taps, time)
    if correlation is not None:
        g = np.einsum("pq,qlt->plt", correlation.sqrt(), g)
    f_k = np.arange(k) * mobility.subcarrier_spacing
    steer = np.exp(-2j * np.pi * f_k[:, None] * profile.delays[None, :])  # (k, taps)
    h = np.einsum("kl,nlt->nkt", steer, g)
    return [ChannelRealization(h[:, :, i * t : (i + 1) * t]) for i in range(n_slots)]


def noise_variance(snr_db: float) -> float:
    """Per-RE noise variance for unit signal power; ``inf`` dB disables noise."""
    return 0.0 if np.isposinf(snr_db) else float(10 ** (-snr_db / 10))


def apply_pilots(
    h: ChannelRealization, pattern: PilotPattern, snr_db: float, rng: np.random.Generator | None = None
) -> tuple[np.ndarray, float]:
    """Received grid at pilot REs (zero elsewhere) and the noise variance.

    Every pilot RE carries exactly one antenna's symbol, so the sum over
    antennas reduces to that antenna's ``H * X`` plus noise.
    """
    n_t, k, t = h.shape
    if (pattern.n_t, pattern.k, pattern.t) != (n_t, k, t):
        raise ValueError(f"pattern grid {(pattern.n_t, pattern.k, pattern.t)} does not match channel {h.shape}")
    sigma2 = noise_variance(snr_db)
    x = pattern.grid()
    y = (h.h * x).sum(axis=0)
    occupied = pattern.mask().any(axis=0)
    if sigma2 > 0:
        rng = rng if rng is not None else np.random.default_rng()
        noise = np.sqrt(sigma2 / 2) * (rng.standard_normal((k, t)) + 1j * rng.standard_normal((k, t)))
        y = y + noise
    return np.where(occupied, y, 0), sigma2
