import math

import numpy as np
import pytest
from scipy import integrate

from sipmtwin import EasySptrAnalysis, EasyTofCt
from sipmtwin.config import (
    AnalysisConfig,
    GeometryConfig,
    ScintillatorConfig,
    SipmConfig,
    TofCtConfig,
    XraySourceConfig,
)
from sipmtwin.errors import InvalidArgumentError, UndefinedRatioError
from sipmtwin.tdc import Histogram
from sipmtwin.tofct import (
    TofEvent,
    TofEvents,
    bremsstrahlung_density,
    first_photon_time,
    flight_time,
    sample_bremsstrahlung,
    scintillate,
    scintillation_photons,
    simulate_event,
    simulate_events,
    spr,
    spr_reduction,
    tof_filter,
    window_for_acceptance,
)


def get_events(n_primary, n_scattered, primary_time=1e-9, scatter_time=2e-9):
    times = [primary_time] * n_primary + [scatter_time] * n_scattered
    flags = [False] * n_primary + [True] * n_scattered
    return TofEvents(times, np.full(len(times), 60.0), flags)


def get_source(**overrides):
    return XraySourceConfig(**overrides)


# source spectrum
def test_samples_stay_inside_the_spectrum():
    cfg = get_source()
    energies = sample_bremsstrahlung(cfg, seed=1, n=100_000)
    assert energies.max() <= cfg.kvp
    assert energies.min() >= cfg.e_min
    assert isinstance(sample_bremsstrahlung(cfg, seed=1), float)


def test_sample_mean_matches_the_density():
    cfg = get_source()
    expected, _ = integrate.quad(lambda e: e * bremsstrahlung_density(e, cfg), cfg.e_min, cfg.kvp)
    energies = sample_bremsstrahlung(cfg, seed=2, n=1_000_000)
    assert energies.mean() == pytest.approx(expected, rel=0.01)


def test_density_is_normalized():
    cfg = get_source()
    total, _ = integrate.quad(lambda e: bremsstrahlung_density(e, cfg), cfg.e_min, cfg.kvp)
    assert total == pytest.approx(1.0, rel=1e-8)
    assert bremsstrahlung_density(5.0, cfg) == 0.0


def test_kramers_density_ratio():
    cfg = get_source(kvp=120.0, e_min=10.0)
    ratio = bremsstrahlung_density(20.0, cfg) / bremsstrahlung_density(100.0, cfg)
    assert ratio == pytest.approx(25.0)


# phantom
def test_no_scatter_gives_only_primaries():
    events = simulate_events(GeometryConfig(scatter_fraction=0.0), get_source(), 10_000, seed=3)
    assert events.n_scattered == 0
    assert events.n_primary == 10_000


def test_extra_path_delay():
    g = GeometryConfig(
        scatter_fraction=1.0,
        extra_path_distribution="uniform",
        extra_path_mean=0.3,
        extra_path_spread=0.0,
    )
    src = get_source(pulse_fwhm=1e-18)
    scattered = simulate_event(g, src, seed=4)
    assert scattered.scattered
    delay = scattered.arrival_time - flight_time(g.source_detector_distance)
    assert delay == pytest.approx(1.00069e-9, abs=1e-14)


def test_arrival_spread_is_the_source_pulse():
    g = GeometryConfig(scatter_fraction=0.0)
    events = simulate_events(g, get_source(pulse_fwhm=100e-12), 100_000, seed=5)
    offset = events.arrival_time - flight_time(g.source_detector_distance)
    h = Histogram.uniform(-500e-12, 5e-12, 200)
    h.fill(offset)
    result = EasySptrAnalysis(AnalysisConfig(rebin=1)).sptr(h)
    assert result.fwhm == pytest.approx(100e-12, rel=0.05)


def test_scatter_never_gains_energy():
    src = get_source()
    direct = simulate_events(GeometryConfig(scatter_fraction=0.0), src, 5000, seed=6)
    scattered = simulate_events(GeometryConfig(scatter_fraction=1.0), src, 5000, seed=6)
    assert np.all(scattered.energy <= direct.energy)
    assert np.all(scattered.arrival_time >= direct.arrival_time)


def test_events_are_deterministic():
    a = simulate_events(GeometryConfig(), get_source(), 1000, seed=7)
    b = simulate_events(GeometryConfig(), get_source(), 1000, seed=7)
    assert np.array_equal(a.arrival_time, b.arrival_time)
    assert np.array_equal(a.energy, b.energy)


# scintillator
def test_zero_light_yield_emits_nothing():
    event = TofEvent(3e-9, 60.0, False, 3e-9)
    assert len(scintillate(event, ScintillatorConfig(light_yield=0.0), seed=1)) == 0


def test_photon_count_is_poisson():
    s = ScintillatorConfig(light_yield=30.0, collection_efficiency=0.1)
    events = TofEvents(np.zeros(4000), np.full(4000, 100.0), np.zeros(4000, dtype=bool))
    _, owner = scintillation_photons(events, s, seed=2)
    counts = np.bincount(owner, minlength=len(events))
    mean = 30.0 * 100.0 * 0.1
    assert abs(counts.mean() - mean) <= 3 * math.sqrt(mean / counts.size)


def test_photons_follow_the_event():
    event = TofEvent(3e-9, 60.0, False, 3e-9)
    photons = scintillate(event, ScintillatorConfig(), seed=3)
    assert photons.is_sorted()
    assert np.all(photons.time >= event.arrival_time)


def test_first_photon_tightens_with_more_photons():
    s = ScintillatorConfig(light_yield=1.0, collection_efficiency=1.0)
    medians = []
    for energy in (10.0, 100.0):
        events = TofEvents(np.zeros(10_000), np.full(10_000, energy), np.zeros(10_000, dtype=bool))
        times, owner = scintillation_photons(events, s, seed=4)
        first = np.full(len(events), np.inf)
        np.minimum.at(first, owner, times)
        medians.append(np.median(first))
    assert medians[1] < medians[0]


def test_first_photon_through_the_sipm():
    event = TofEvent(3e-9, 60.0, False, 3e-9)
    t = first_photon_time(event, ScintillatorConfig(), SipmConfig(), seed=5)
    assert t is not None and t > 2.5e-9
    assert first_photon_time(event, ScintillatorConfig(), SipmConfig(pde=0.0), seed=5) is None


def test_scintillation_rejects_non_positive_energy():
    with pytest.raises(InvalidArgumentError):
        scintillate(TofEvent(0.0, 0.0, False, 0.0), ScintillatorConfig(), seed=1)


# time window
def test_infinite_window_is_identity():
    events = get_events(10, 5)
    assert len(tof_filter(events, (-math.inf, math.inf))) == 15


def test_window_excluding_everything_is_empty():
    assert len(tof_filter(get_events(10, 5), (5e-9, 6e-9))) == 0


def test_window_membership():
    times = np.array([0.5, 1.0, 1.5, 2.0, 2.5]) * 1e-9
    events = TofEvents(times, np.full(5, 60.0), np.zeros(5, dtype=bool))
    kept = tof_filter(events, (1.0e-9, 2.0e-9))
    assert list(kept.measured_time) == [t for t in times if 1.0e-9 <= t <= 2.0e-9]


def test_window_must_be_ordered():
    with pytest.raises(InvalidArgumentError):
        tof_filter(get_events(1, 1), (2e-9, 1e-9))


def test_window_for_acceptance_keeps_the_primaries():
    events = simulate_events(GeometryConfig(), get_source(), 20_000, seed=8)
    lo, hi = window_for_acceptance(events, 0.95)
    kept = tof_filter(events, (lo, hi))
    assert kept.n_primary / events.n_primary >= 0.95
    with pytest.raises(UndefinedRatioError):
        window_for_acceptance(get_events(0, 3), 0.95)


# scatter-to-primary ratio
def test_spr_without_scatter_is_zero():
    assert spr(get_events(10, 0)) == 0.0


def test_spr_reduction_example():
    assert spr_reduction(50 / 100, 20 / 100) == pytest.approx(60.0)
    before, after = get_events(100, 50), get_events(100, 20)
    assert spr_reduction(before, after) == pytest.approx(60.0)


def test_wide_window_removes_no_scatter():
    events = get_events(100, 50)
    assert spr_reduction(events, tof_filter(events, (0.0, 1.0))) == 0.0


def test_spr_needs_primaries():
    with pytest.raises(UndefinedRatioError):
        spr(get_events(0, 3))
    with pytest.raises(UndefinedRatioError):
        spr_reduction(0.0, 0.0)


def test_tighter_late_edge_never_admits_more_scatter():
    events = simulate_events(GeometryConfig(), get_source(), 20_000, seed=9)
    t_lo = events.measured_time.min()
    last_primary = events.measured_time[~events.scattered].max()
    reductions = [
        spr_reduction(events, tof_filter(events, (t_lo, t_hi)))
        for t_hi in np.linspace(events.measured_time.max(), last_primary, 20)
    ]
    assert all(b >= a for a, b in zip(reductions, reductions[1:]))


# facade
def test_worse_timing_rejects_less_scatter():
    config = TofCtConfig(timing_grid=[50e-12, 100e-12, 200e-12, 400e-12], acceptance_grid=[0.95])
    tofct = EasyTofCt(get_source(), GeometryConfig(), config, seed=10)
    results = tofct.grid(tofct.simulate(100_000))
    reductions = [r.reduction_pct for r in results]
    assert all(b < a for a, b in zip(reductions, reductions[1:]))
    assert all(r.primary_acceptance >= 0.95 for r in results)


def test_rejection_record():
    tofct = EasyTofCt(get_source(), GeometryConfig(), TofCtConfig(), seed=11)
    record = tofct.reject(tofct.simulate(10_000)).to_record()
    assert record["timing_fwhm_ps"] == pytest.approx(200.0)
    assert len(record["window_ps"]) == 2
    assert record["spr_after"] <= record["spr_before"]


def test_chain_mode_timestamps_with_the_first_photon():
    config = TofCtConfig(mode="chain")
    tofct = EasyTofCt(get_source(), GeometryConfig(), config, seed=12)
    events = tofct.simulate(2000)
    assert 0 < len(events) <= 2000
    assert np.all(np.isfinite(events.measured_time))
    assert np.median(events.measured_time - events.arrival_time) > 0
