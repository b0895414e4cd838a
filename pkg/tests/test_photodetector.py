import math

import numpy as np
import pytest
from scipy import stats

from sipmtwin import EasySipm
from sipmtwin.config import LaserConfig, SipmConfig
from sipmtwin.errors import InvalidArgumentError
from sipmtwin.photodetector import (
    PhotonEvent,
    PhotonEventList,
    PhotonOrigin,
    apply_transit_jitter,
    avalanche_current,
    detect_photons,
    expected_dark_count,
    generate_dark_events,
    generate_laser_events,
    merge_events,
    poisson_counts,
    unit_pulse,
)


def get_sipm(**overrides):
    return SipmConfig(**overrides)


def get_incident(n, spacing=1e-9):
    return PhotonEventList(np.arange(n) * spacing, PhotonOrigin.LASER_PULSE)


# dark counts
def test_expected_dark_count_of_the_device():
    assert expected_dark_count(get_sipm(), 30.0) == 15_000_000


def test_zero_rate_gives_no_dark_counts():
    events = generate_dark_events(get_sipm(dark_rate_density=0.0), 1.0, seed=3)
    assert len(events) == 0


def test_dark_counts_reject_non_positive_duration():
    with pytest.raises(InvalidArgumentError):
        generate_dark_events(get_sipm(), 0.0, seed=1)
    with pytest.raises(ValueError):
        generate_dark_events(get_sipm(), -1.0, seed=1)


def test_dark_counts_are_sorted_and_deterministic():
    cfg = get_sipm()
    a = generate_dark_events(cfg, 1e-3, seed=11)
    b = generate_dark_events(cfg, 1e-3, seed=11)
    assert a == b
    assert a.is_sorted()
    assert all(e.origin == PhotonOrigin.DARK_COUNT for e in a[:10])


def test_dark_count_totals_follow_poisson():
    # λt = 10,000
    cfg = get_sipm()
    duration = 1e4 / cfg.dark_rate
    counts = np.array(poisson_counts(cfg, duration, 100, seed=5))
    assert np.all(np.abs(counts - 1e4) <= 5 * math.sqrt(1e4))
    assert abs(counts.mean() - 1e4) <= 5 * math.sqrt(1e4) / math.sqrt(counts.size)


def test_dark_inter_arrival_times_are_exponential():
    cfg = get_sipm()
    events = generate_dark_events(cfg, 2e4 / cfg.dark_rate, seed=2)
    gaps = np.diff(events.time)
    _, p_value = stats.kstest(gaps, "expon", args=(0.0, 1.0 / cfg.dark_rate))
    assert p_value > 0.01


# PDE thinning
def test_detect_with_unit_pde_is_identity():
    incident = get_incident(100)
    assert detect_photons(get_sipm(pde=1.0), incident, seed=1) == incident


def test_detect_with_zero_pde_is_empty():
    assert len(detect_photons(get_sipm(pde=0.0), get_incident(100), seed=1)) == 0


def test_detect_follows_binomial_statistics():
    incident = get_incident(40_000)
    sigma = math.sqrt(40_000 * 0.25 * 0.75)
    for seed in range(10):
        kept = detect_photons(get_sipm(pde=0.25), incident, seed=seed)
        assert abs(len(kept) - 10_000) <= 5 * sigma
        assert kept.is_sorted()


def test_thinning_then_merging_preserves_order():
    cfg = get_sipm(pde=0.5)
    laser = detect_photons(cfg, get_incident(1000, spacing=3.3e-9), seed=4)
    dark = generate_dark_events(cfg, 3.3e-6, seed=4)
    merged = merge_events(laser, dark)
    assert merged.is_sorted()
    assert len(merged) == len(laser) + len(dark)


# avalanche current
def test_empty_fires_give_empty_train():
    assert len(avalanche_current(get_sipm(), PhotonEventList.empty())) == 0


def test_peak_current_is_linear_in_cells():
    fires = PhotonEventList([1e-9, 5e-7], n_cells=[1, 2])
    train = avalanche_current(get_sipm(), fires)
    assert train.peak_currents[1] / train.peak_currents[0] == 2.0


def test_peak_current_is_linear_in_overvoltage():
    fires = [PhotonEvent(1e-9, PhotonOrigin.LASER_PULSE)]
    low = avalanche_current(get_sipm(bias_voltage=32.5 + 7.5), fires)
    high = avalanche_current(get_sipm(bias_voltage=32.5 + 15.0), fires)
    assert high.peak_currents[0] / low.peak_currents[0] == pytest.approx(2.0, rel=1e-12)


def test_bias_below_breakdown_is_rejected():
    with pytest.raises(ValueError):
        SipmConfig(bias_voltage=30.0)


def test_unit_pulse_peaks_at_one():
    t = np.linspace(0, 200e-9, 200_001)
    shape = unit_pulse(t, 1e-9, 50e-9)
    assert shape.max() == pytest.approx(1.0, rel=1e-6)
    assert shape[0] == 0.0


def test_train_charge_matches_numeric_integral():
    fires = PhotonEventList([0.0])
    train = avalanche_current(get_sipm(), fires)
    current = train.sample(0.0, 10e-12, 100_000)
    assert current.sum() * 10e-12 == pytest.approx(train.charge, rel=1e-3)


def test_photon_event_rejects_negative_time():
    with pytest.raises(InvalidArgumentError):
        PhotonEvent(-1.0, PhotonOrigin.DARK_COUNT)


# laser
def test_laser_pulses_sit_on_the_repetition_grid():
    laser = LaserConfig(jitter_fwhm=0.0, rep_rate=1e6, mean_photons_per_pulse=2.0)
    sync, incident = generate_laser_events(laser, 100, seed=8)
    assert np.allclose(sync, (np.arange(100) + 0.5) * 1e-6)
    assert set(np.round(incident.time / 1e-6 - 0.5).astype(int)) <= set(range(100))


def test_transit_jitter_spread_matches_fwhm():
    cfg = get_sipm(intrinsic_transit_jitter_fwhm=200e-12)
    events = PhotonEventList(np.full(50_000, 1e-6), PhotonOrigin.LASER_PULSE)
    jittered = apply_transit_jitter(cfg, events, seed=9)
    assert jittered.is_sorted()
    assert np.std(jittered.time) == pytest.approx(200e-12 / 2.3548, rel=0.03)


def test_easy_sipm_laser_fires():
    sipm = EasySipm(get_sipm(), seed=1)
    sync, fires = sipm.laser_fires(LaserConfig(), 1000)
    assert sync.size == 1000
    assert fires.is_sorted()
    assert len(fires) < 1000
