"""Training/evaluation data: trajectory simulation and the CHDS1 dataset file.

Each record is a triplet (coarse pilot estimate of the current slot, LMMSE
estimate of the previous slot, ground truth of the current slot) plus the
draw that produced it.
"""
from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import BinaryIO, Iterator

import numpy as np

from . import channel as ch
from .classical import (
    CovarianceBank,
    bucket_key,
    estimate_covariances,
    interpolate_linear,
    lmmse_interpolate,
    ls_at_pilots,
)

DATASET_MAGIC = b"CHDS1\n"
PROFILE_NAMES = {v: k for k, v in ch.PROFILE_IDS.items()}
PATTERN_NAMES = {v: k for k, v in ch.PATTERN_IDS.items()}


@dataclass
class ChannelConfig:
    """Ranges a dataset draws from, one draw per trajectory (Table-I shaped)."""

    n_t: int = 4
    k: int = 24
    t: int = 14
    n_slots: int = 10
    n_trajectories: int = 100
    carrier_frequency: float = 3.5e9
    profiles: list[str] = field(default_factory=lambda: ["TDL-A30", "TDL-B100", "TDL-C300"])
    speeds_kmh: list[float] = field(default_factory=lambda: [30.0, 90.0, 300.0])
    scs_khz: list[float] = field(default_factory=lambda: [15.0, 30.0])
    correlations: list[str] = field(default_factory=lambda: ["Low", "Medium", "Medium-A", "High"])
    snrs_db: list[float] = field(default_factory=lambda: [5.0, 10.0, 15.0, 20.0, 25.0])
    patterns: list[str] = field(default_factory=lambda: ["2P", "4P"])
    calibration_trajectories: int = 20
    pilot_seed: int = 0
    pilot_stride: int = 0  # 0: max(4, n_t)
    pilot_symbols_2p: list[int] = field(default_factory=lambda: list(ch.PILOT_SYMBOLS["2P"]))
    pilot_symbols_4p: list[int] = field(default_factory=lambda: list(ch.PILOT_SYMBOLS["4P"]))

    def pattern(self, label: str, n_t: int | None = None, k: int | None = None) -> ch.PilotPattern:
        symbols = {"2P": self.pilot_symbols_2p, "4P": self.pilot_symbols_4p}[label]
        return ch.make_pattern(
            label, n_t or self.n_t, k or self.k, self.t, self.pilot_seed, tuple(symbols), self.pilot_stride or None
        )

    def digest(self, seed: int) -> bytes:
        text = json.dumps({"config": asdict(self), "seed": int(seed)}, sort_keys=True)
        return hashlib.sha256(text.encode()).digest()


@dataclass(frozen=True)
class TrajectoryParams:
    profile: str
    speed_kmh: float
    scs_khz: float
    correlation: str
    snr_db: float
    pattern: str

    @property
    def bucket(self) -> str:
        return bucket_key(self.profile, self.speed_kmh, self.pattern)


@dataclass
class SimulatedTrajectory:
    params: TrajectoryParams
    pattern: ch.PilotPattern
    noise_var: float
    truth: np.ndarray  # complex (slots, n_t, k, t)
    received: np.ndarray  # complex (slots, k, t), zero off-pilot
    linear: np.ndarray  # complex (slots, n_t, k, t)
    lmmse: np.ndarray  # complex (slots, n_t, k, t)


@dataclass
class SlotDatasetRecord:
    snr_db: float
    pattern: str
    profile: str
    speed_kmh: float
    coarse: np.ndarray  # (2 n_t, k, t)
    z_his: np.ndarray  # (2 n_t k, t)
    z: np.ndarray  # (2 n_t k, t)


def draw_params(cfg: ChannelConfig, rng: np.random.Generator) -> TrajectoryParams:
    pick = lambda xs: xs[int(rng.integers(len(xs)))]  # noqa: E731
    return TrajectoryParams(
        pick(cfg.profiles),
        float(pick(cfg.speeds_kmh)),
        float(pick(cfg.scs_khz)),
        pick(cfg.correlations),
        float(pick(cfg.snrs_db)),
        pick(cfg.patterns),
    )


def channel_slots(cfg: ChannelConfig, params: TrajectoryParams, seed, n_t: int | None = None, k: int | None = None) -> np.ndarray:
    n_t = n_t or cfg.n_t
    k = k or cfg.k
    mob = ch.MobilityConfig.from_kmh(
        params.speed_kmh, carrier_frequency=cfg.carrier_frequency, subcarrier_spacing=params.scs_khz * 1e3
    )
    corr = ch.SpatialCorrelation.exponential(params.correlation, n_t)
    slots = ch.generate_trajectory(ch.PROFILES[params.profile], mob, corr, n_t, k, cfg.t, cfg.n_slots, seed)
    return np.stack([s.h for s in slots])


def calibration_bank(cfg: ChannelConfig, seed: int) -> CovarianceBank:
    """Covariances from a dedicated, seed-derived set of ground-truth slots.

    Truth statistics do not depend on the pilot pattern, so every pattern key
    of a (profile, speed) pair shares the same samples.
    """
    rng = np.random.default_rng([seed, 1])

    def samples():
        for profile in cfg.profiles:
            for speed in cfg.speeds_kmh:
                for j in range(cfg.calibration_trajectories):
                    base = draw_params(cfg, rng)
                    p = TrajectoryParams(profile, speed, base.scs_khz, base.correlation, base.snr_db, base.pattern)
                    h = channel_slots(cfg, p, [seed, 1, j, ch.PROFILE_IDS[profile], int(speed * 10)])
                    for pattern in cfg.patterns:
                        key = bucket_key(profile, speed, pattern)
                        for slot in h:
                            yield key, slot

    return estimate_covariances(samples(), min_samples=min(100, cfg.calibration_trajectories * cfg.n_slots))


def simulate(
    cfg: ChannelConfig,
    params: TrajectoryParams,
    bank: CovarianceBank,
    seed,
    n_t: int | None = None,
    k: int | None = None,
) -> SimulatedTrajectory:
    """Channel trajectory, noisy pilot observations and both classical estimates."""
    n_t = n_t or cfg.n_t
    k = k or cfg.k
    truth = channel_slots(cfg, params, seed, n_t, k)
    pattern = cfg.pattern(params.pattern, n_t, k)
    rng = np.random.default_rng([*np.atleast_1d(seed).tolist(), 7])
    received = []
    noise_var = ch.noise_variance(params.snr_db)
    for h in truth:
        y, noise_var = ch.apply_pilots(ch.ChannelRealization(h), pattern, params.snr_db, rng)
        received.append(y)
    received = np.stack(received)
    est = ls_at_pilots(received, pattern)
    lin = interpolate_linear(est, pattern, k, cfg.t)
    lm = lmmse_interpolate(est, pattern, bank, noise_var, params.bucket)
    return SimulatedTrajectory(params, pattern, noise_var, truth, received, lin, lm)


def _as_z(h: np.ndarray) -> np.ndarray:
    s = ch.complex_to_stacked(h)
    return s.reshape(s.shape[:-3] + (-1, s.shape[-1]))


def build_dataset(cfg: ChannelConfig, seed: int, bank: CovarianceBank | None = None) -> Iterator[SlotDatasetRecord]:
    """Records in trajectory order; ``n_trajectories * (n_slots - 1)`` of them.

    The coarse estimate alternates between linear and LMMSE interpolation by
    record index; the history is always the LMMSE estimate of the previous slot.
    """
    bank = bank if bank is not None else calibration_bank(cfg, seed)
    rng = np.random.default_rng([seed, 2])
    index = 0
    for j in range(cfg.n_trajectories):
        params = draw_params(cfg, rng)
        traj = simulate(cfg, params, bank, [seed, 3, j])
        for i in range(1, cfg.n_slots):
            coarse = traj.linear[i] if index % 2 == 0 else traj.lmmse[i]
            yield SlotDatasetRecord(
                params.snr_db,
                params.pattern,
                params.profile,
                params.speed_kmh,
                ch.complex_to_stacked(coarse).astype(np.float32),
                _as_z(traj.lmmse[i - 1]).astype(np.float32),
                _as_z(traj.truth[i]).astype(np.float32),
            )
            index += 1


# --------------------------------------------------------------------------- file format

_HEADER = struct.Struct("<3IQ32s")


def _record_dtype(n_t: int, k: int, t: int) -> np.dtype:
    q = 2 * n_t * k
    return np.dtype(
        [
            ("snr_db", "<f4"),
            ("pattern", "u1"),
            ("profile", "u1"),
            ("speed", "<f4"),
            ("coarse", "<f4", (2 * n_t, k, t)),
            ("z_his", "<f4", (q, t)),
            ("z", "<f4", (q, t)),
        ]
    )


def write_dataset(path: str | Path, cfg: ChannelConfig, seed: int, bank: CovarianceBank | None = None) -> int:
    """Write the CHDS1 file; returns the record count."""
    count = cfg.n_trajectories * (cfg.n_slots - 1)
    dt = _record_dtype(cfg.n_t, cfg.k, cfg.t)
    with open(path, "wb") as fh:
        fh.write(DATASET_MAGIC)
        fh.write(_HEADER.pack(cfg.n_t, cfg.k, cfg.t, count, cfg.digest(seed)))
        written = 0
        for rec in build_dataset(cfg, seed, bank):
            _write_record(fh, dt, rec)
            written += 1
    assert written == count
    return count


def _write_record(fh: BinaryIO, dt: np.dtype, rec: SlotDatasetRecord) -> None:
    row = np.zeros(1, dtype=dt)
    row["snr_db"] = rec.snr_db
    row["pattern"] = ch.PATTERN_IDS[rec.pattern]
    row["profile"] = ch.PROFILE_IDS[rec.profile]
    row["speed"] = rec.speed_kmh
    row["coarse"] = rec.coarse
    row["z_his"] = rec.z_his
    row["z"] = rec.z
    fh.write(row.tobytes())


@dataclass
class Dataset:
    """In-memory view of a CHDS1 file."""

    n_t: int
    k: int
    t: int
    digest: bytes
    records: np.ndarray  # structured array

    def __len__(self) -> int:
        return len(self.records)

    @property
    def noise_var(self) -> np.ndarray:
        return (10.0 ** (-self.records["snr_db"].astype(np.float64) / 10)).astype(np.float32)

    def buckets(self) -> list[str]:
        return [
            bucket_key(PROFILE_NAMES[int(p)], float(s), PATTERN_NAMES[int(a)])
            for p, s, a in zip(self.records["profile"], self.records["speed"], self.records["pattern"])
        ]

    def subset(self, idx) -> "Dataset":
        return Dataset(self.n_t, self.k, self.t, self.digest, self.records[idx])

    def truth_samples(self) -> Iterator[tuple[str, np.ndarray]]:
        for key, z in zip(self.buckets(), self.records["z"]):
            yield key, ch.z_to_complex(z.astype(np.float64), self.n_t, self.k)


def read_dataset(path: str | Path) -> Dataset:
    data = Path(path).read_bytes()
    if not data.startswith(DATASET_MAGIC):
        raise ValueError(f"{path}: not a CHDS1 dataset")
    n_t, k, t, count, digest = _HEADER.unpack_from(data, len(DATASET_MAGIC))
    dt = _record_dtype(n_t, k, t)
    offset = len(DATASET_MAGIC) + _HEADER.size
    if len(data) - offset != count * dt.itemsize:
        raise ValueError(f"{path}: expected {count} records")
    records = np.frombuffer(data, dtype=dt, count=count, offset=offset).copy()
    return Dataset(n_t, k, t, digest, records)


def split_by_trajectory(ds: Dataset, slots_per_trajectory: int, val_fraction: float = 0.1, seed: int = 0):
    """Train/validation index arrays; whole trajectories go to one side."""
    per = slots_per_trajectory - 1
    n_traj = len(ds) // per
    rng = np.random.default_rng([seed, 11])
    order = rng.permutation(n_traj)
    n_val = max(1, int(round(val_fraction * n_traj))) if n_traj > 1 else 0
    val_traj = np.sort(order[:n_val])
    train_traj = np.sort(order[n_val:])
    expand = lambda tr: (tr[:, None] * per + np.arange(per)[None, :]).reshape(-1)  # noqa: E731
    return expand(train_traj), expand(val_traj)
