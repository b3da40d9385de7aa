import numpy as np
import pytest
from scipy.special import j0

from pfmce import channel as ch
from pfmce.channel import (
    PROFILES,
    ChannelRealization,
    MobilityConfig,
    SpatialCorrelation,
    apply_pilots,
    complex_to_stacked,
    generate_trajectory,
    make_pattern,
    noise_variance,
    single_tap_profile,
    z_to_complex,
)


def test_profiles_valid():
    for p in PROFILES.values():
        assert abs(p.powers.sum() - 1) < 1e-9
        assert np.all(p.delays >= 0) and np.all(np.diff(p.delays) >= 0)
        assert len(p.delays) == 12


def test_profile_rms_delay_spread():
    for name, target in (("TDL-A30", 30e-9), ("TDL-B100", 100e-9), ("TDL-C300", 300e-9)):
        p = PROFILES[name]
        mean = np.sum(p.powers * p.delays)
        rms = np.sqrt(np.sum(p.powers * p.delays**2) - mean**2)
        assert rms == pytest.approx(target, rel=1e-9)


def test_los_profile_has_rician_first_tap():
    p = PROFILES["TDL-D30"]
    assert p.k_factors[0] == pytest.approx(10 ** 0.9)
    assert np.all(p.k_factors[1:] == 0)


def test_doppler_and_symbol_duration():
    m = MobilityConfig.from_kmh(90, carrier_frequency=3.5e9, subcarrier_spacing=30e3)
    assert m.doppler == pytest.approx(25 * 3.5e9 / 299_792_458.0)
    assert m.symbol_duration == pytest.approx((1 + 1 / 14) / 30e3)


@pytest.mark.parametrize("label,rho", [("Low", 0.0), ("Medium", 0.3), ("Medium-A", 0.6), ("High", 0.9)])
def test_spatial_correlation(label, rho):
    c = SpatialCorrelation.exponential(label, 4)
    assert np.allclose(np.diag(c.matrix), 1)
    assert c.matrix[0, 3] == pytest.approx(rho**3)
    assert np.linalg.eigvalsh(c.matrix).min() >= -1e-9
    s = c.sqrt()
    assert np.allclose(s @ s, c.matrix, atol=1e-12)


def test_non_psd_correlation_rejected():
    bad = SpatialCorrelation("bad", np.array([[1.0, 2.0], [2.0, 1.0]]))
    with pytest.raises(ValueError):
        generate_trajectory(PROFILES["TDL-A30"], MobilityConfig(1.0), bad, 2, 4, 14, 1, 0)


def test_bad_grid_rejected():
    with pytest.raises(ValueError):
        generate_trajectory(PROFILES["TDL-A30"], MobilityConfig(1.0), None, 1, 0, 14, 1, 0)
    with pytest.raises(ValueError):
        generate_trajectory(PROFILES["TDL-A30"], MobilityConfig(1.0), None, 1, 4, 0, 1, 0)


def test_zero_doppler_constant_across_slots():
    slots = generate_trajectory(PROFILES["TDL-C300"], MobilityConfig(0.0), None, 2, 12, 14, 3, 5)
    h = np.concatenate([s.h for s in slots], axis=-1)
    assert np.max(np.abs(h - h[..., :1])) < 1e-9


def test_single_tap_is_flat():
    slots = generate_trajectory(single_tap_profile(), MobilityConfig(30.0), None, 2, 16, 14, 2, 1)
    for s in slots:
        assert np.max(np.abs(s.h - s.h[:, :1, :])) < 1e-9


def test_jakes_autocorrelation_matches_bessel():
    mob = MobilityConfig.from_kmh(120)
    n_traj, t = 10_000, 14
    rng = np.random.default_rng(0)
    times = np.arange(t) * mob.symbol_duration
    g = ch._tap_gains(single_tap_profile(), mob, n_traj, times, rng)[:, 0, :]  # (traj, time)
    for lag in (1, 4, 8, 13):
        emp = np.mean(g[:, lag:] * g[:, :-lag].conj()).real / np.mean(np.abs(g) ** 2)
        oracle = j0(2 * np.pi * mob.doppler * lag * mob.symbol_duration)
        assert abs(emp - oracle) < 0.05


def test_power_normalisation_large_ensemble():
    # independent fades: one slot per seed
    h = np.stack(
        [generate_trajectory(PROFILES["TDL-B100"], MobilityConfig.from_kmh(30), None, 1, 12, 1, 1, s)[0].h for s in range(6000)]
    )
    assert np.mean(np.abs(h) ** 2) == pytest.approx(1.0, abs=0.02)


def test_frequency_correlation_decreases_with_delay_spread():
    mob = MobilityConfig.from_kmh(30)

    def corr(name):
        acc = 0
        for s in range(400):
            h = generate_trajectory(PROFILES[name], mob, None, 1, 24, 1, 1, s)[0].h[0, :, 0]
            acc += h[6] * np.conj(h[0])
        return abs(acc) / 400

    a, b, c = corr("TDL-A30"), corr("TDL-B100"), corr("TDL-C300")
    assert a > b > c


def test_slot_boundary_continuity():
    mob = MobilityConfig.from_kmh(90)
    inner, boundary = [], []
    for s in range(400):
        sl = generate_trajectory(PROFILES["TDL-A30"], mob, None, 1, 4, 14, 2, s)
        a, b = sl[0].h[0, 0], sl[1].h[0, 0]
        inner.append(a[13] * np.conj(a[12]))
        boundary.append(b[0] * np.conj(a[13]))
    assert abs(np.mean(boundary).real - np.mean(inner).real) < 0.05


def test_spatial_correlation_applied():
    mob = MobilityConfig.from_kmh(30)
    corr = SpatialCorrelation.exponential("High", 2)
    acc = []
    for s in range(1500):
        h = generate_trajectory(PROFILES["TDL-A30"], mob, corr, 2, 1, 1, 1, s)[0].h[:, 0, 0]
        acc.append(h[1] * np.conj(h[0]))
    assert np.mean(acc).real == pytest.approx(0.9, abs=0.07)


def test_trajectory_deterministic():
    a = generate_trajectory(PROFILES["TDL-B100"], MobilityConfig(10.0), None, 2, 8, 14, 2, [3, 4])
    b = generate_trajectory(PROFILES["TDL-B100"], MobilityConfig(10.0), None, 2, 8, 14, 2, [3, 4])
    assert all(np.array_equal(x.h, y.h) for x, y in zip(a, b))


def test_stacking_round_trip():
    rng = np.random.default_rng(0)
    h = rng.standard_normal((3, 5, 14)) + 1j * rng.standard_normal((3, 5, 14))
    r = ChannelRealization(h)
    z = r.as_z()
    assert z.shape == (30, 14)
    # row q = w * K + k: first K rows are Re of antenna 0, rows 3K.. are Im of antenna 0
    assert np.array_equal(z[2], h[0, 2].real) and np.array_equal(z[3 * 5 + 1], h[0, 1].imag)
    assert np.array_equal(z_to_complex(z, 3, 5), h)
    assert np.array_equal(complex_to_stacked(h), r.stacked())


# --------------------------------------------------------------------------- pilots


@pytest.mark.parametrize("label,symbols", [("2P", (2, 11)), ("4P", (2, 5, 8, 11))])
def test_pattern_layout(label, symbols):
    p = make_pattern(label, 4, 24, 14, seed=0)
    assert p.symbols == symbols
    assert np.allclose(np.abs(p.values), 1)
    m = p.mask()
    # FDM orthogonality: exactly one antenna per pilot RE
    occupied = m.any(axis=0)
    assert np.all(m.sum(axis=0)[occupied] == 1)
    for n in range(4):
        assert list(p.subcarriers(n)) == list(range(n, 24, 4))
        for s in symbols:
            assert m[n, :, s].any()


def test_pattern_rejects_colliding_offsets():
    with pytest.raises(ValueError):
        ch.PilotPattern("x", (2,), (0, 0), 4, np.ones((2, 1, 1)), 4, 14)


def test_snr_to_noise_variance():
    assert noise_variance(5) == pytest.approx(0.31622776601683794, abs=1e-12)
    assert noise_variance(float("inf")) == 0.0


def test_apply_pilots_noiseless():
    h = generate_trajectory(PROFILES["TDL-B100"], MobilityConfig(5.0), None, 4, 24, 14, 1, 0)[0]
    p = make_pattern("4P", 4, 24)
    y, nv = apply_pilots(h, p, float("inf"))
    assert nv == 0
    for n in range(4):
        kk = p.subcarriers(n)
        sym = list(p.symbols)
        assert np.allclose(y[np.ix_(kk, sym)], h.h[n][np.ix_(kk, sym)] * p.values[n], atol=1e-14)
    assert np.all(y[~p.mask().any(axis=0)] == 0)


def test_apply_pilots_pure_noise_variance():
    p = make_pattern("4P", 1, 96)
    rng = np.random.default_rng(1)
    zero = ChannelRealization(np.zeros((1, 96, 14), dtype=complex))
    samples = np.concatenate([apply_pilots(zero, p, 5.0, rng)[0][p.mask()[0]] for _ in range(1100)])
    assert samples.size >= 100_000
    assert np.var(samples) == pytest.approx(10 ** -0.5, rel=0.05)


def test_apply_pilots_grid_mismatch():
    with pytest.raises(ValueError):
        apply_pilots(ChannelRealization(np.zeros((2, 8, 14), complex)), make_pattern("2P", 2, 12), 10.0)
