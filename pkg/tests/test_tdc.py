import numpy as np
import pytest

from sipmtwin import EasyTdc
from sipmtwin.config import TdcConfig
from sipmtwin.errors import InvalidArgumentError
from sipmtwin.frontend import DigitalHits
from sipmtwin.tdc import (
    Histogram,
    TdcRecord,
    TdcRecords,
    accumulate,
    classify_energy,
    default_energy_edges,
    digitize,
    measure_delta_t,
    n_delta_t_codes,
    tot_code,
    tot_window,
)

EDGES = [10e-9, 20e-9, 30e-9, 40e-9, 50e-9, 60e-9, 70e-9]


def get_config(**overrides):
    overrides.setdefault("energy_bin_edges", EDGES)
    return TdcConfig(**overrides)


def get_records(n, seed=0):
    rng = np.random.default_rng(seed)
    return TdcRecords(
        rng.integers(0, 2000, n), rng.integers(0, 300, n), rng.integers(0, 8, n)
    )


# ΔT quantization
def test_equal_start_and_stop_is_code_zero():
    assert measure_delta_t(1e-6, 1e-6, get_config()) == 0


def test_delta_t_code_of_five_nanoseconds():
    assert measure_delta_t(0.0, 5.004e-9, get_config()) == 500


def test_delta_t_outside_window():
    cfg = get_config()
    assert measure_delta_t(0.0, 25e-9, cfg) is None
    assert measure_delta_t(0.0, 20e-9, cfg) is None
    assert measure_delta_t(1e-9, 0.0, cfg) is None


def test_quantization_error_within_one_lsb():
    cfg = get_config()
    rng = np.random.default_rng(1)
    starts = rng.uniform(0.0, 1e-6, 10_000)
    stops = starts + rng.uniform(0.0, 19.99e-9, 10_000)
    for start, stop in zip(starts, stops):
        code = measure_delta_t(start, stop, cfg)
        error = (stop - start) - code * cfg.delta_t_lsb
        assert 0.0 <= error < cfg.delta_t_lsb


def test_sub_picosecond_intervals_are_floored():
    cfg = get_config()
    assert measure_delta_t(0.0, 9.9996e-12, cfg) == 0
    assert measure_delta_t(0.0, 10.0004e-12, cfg) == 1
    assert measure_delta_t(0.0, 19.9996e-9, cfg) == 1999
    assert tot_code(0.9996e-9, cfg) == 0


def test_code_count_of_default_window():
    assert n_delta_t_codes(get_config()) == 2000


def test_tot_code_floors():
    cfg = get_config()
    assert tot_code(3.999e-9, cfg) == 3
    assert tot_code(4e-9, cfg) == 4
    assert list(tot_code(np.array([0.0, 1.5e-9]), cfg)) == [0, 1]


def test_easy_tdc_counts_out_of_window():
    tdc = EasyTdc(get_config())
    assert tdc.measure(0.0, 1.0004e-9) == 100
    assert tdc.measure(0.0, 30e-9) is None
    assert tdc.out_of_window == 1


# energy bins
def test_classify_below_and_above_edges():
    cfg = get_config()
    assert classify_energy(1e-9, cfg) == 0
    assert classify_energy(100e-9, cfg) == 7


def test_edge_value_belongs_to_upper_bin():
    cfg = get_config()
    for k, edge in enumerate(EDGES):
        assert classify_energy(edge, cfg) == k + 1


def test_classify_matches_linear_scan():
    cfg = get_config()
    tots = np.concatenate([np.linspace(0.0, 80e-9, 801), np.array(EDGES)])
    bins = classify_energy(tots, cfg)
    oracle = [sum(1 for e in EDGES if e <= t) for t in tots]
    assert list(bins) == oracle
    assert np.all(np.diff(classify_energy(np.sort(tots), cfg)) >= 0)


def test_classify_without_edges_is_rejected():
    with pytest.raises(InvalidArgumentError):
        classify_energy(1e-9, TdcConfig())


def test_default_edges_are_uniform():
    edges = default_energy_edges(np.array([0.0, 80e-9]))
    assert np.allclose(edges, EDGES)


def test_config_rejects_bad_edges():
    with pytest.raises(ValueError):
        TdcConfig(energy_bin_edges=[1e-9, 2e-9])
    with pytest.raises(ValueError):
        TdcConfig(energy_bin_edges=[1e-9, 1e-9, 3e-9, 4e-9, 5e-9, 6e-9, 7e-9])
    with pytest.raises(ValueError):
        TdcConfig(delta_t_lsb=30e-9)


# accumulation
def test_empty_stream_gives_zero_histograms():
    hists = accumulate([], get_config())
    assert hists.delta_t.total == 0
    assert hists.tot.total == 0
    assert all(h.total == 0 for h in hists.delta_t_per_bin)


def test_single_energy_bin_stream():
    records = [TdcRecord(k % 2000, 5, 3) for k in range(1000)]
    hists = accumulate(records, get_config())
    assert [h.total for h in hists.delta_t_per_bin] == [0, 0, 0, 1000, 0, 0, 0, 0]
    assert hists.delta_t.total == 1000


def test_per_bin_histograms_partition_the_global_one():
    records = get_records(1_000_000)
    hists = accumulate(records, get_config())
    summed = np.sum([h.counts for h in hists.delta_t_per_bin], axis=0)
    assert np.array_equal(summed, hists.delta_t.counts)
    recount = np.zeros((8, 2000), dtype=np.int64)
    np.add.at(recount, (records.energy_bin, records.delta_t_code), 1)
    assert np.array_equal(recount.sum(axis=0), hists.delta_t.counts)
    for k, h in enumerate(hists.delta_t_per_bin):
        assert np.array_equal(recount[k], h.counts)
    assert hists.delta_t.total == 1_000_000


def test_accumulate_is_order_independent():
    records = get_records(3000, seed=4)
    order = np.random.default_rng(5).permutation(len(records))
    shuffled = TdcRecords(
        records.delta_t_code[order], records.tot_code[order], records.energy_bin[order]
    )
    a, b = accumulate(records, get_config()), accumulate(shuffled, get_config())
    assert a.delta_t == b.delta_t
    assert a.tot == b.tot


def test_long_tot_lands_in_last_bin():
    hists = accumulate([TdcRecord(0, 10_000, 0)], get_config())
    assert hists.tot.counts[-1] == 1


def test_accumulate_rejects_out_of_window_codes():
    with pytest.raises(InvalidArgumentError):
        accumulate([TdcRecord(2000, 0, 0)], get_config())


def test_sharded_histograms_merge_exactly():
    cfg = get_config()
    records = get_records(4000, seed=2)
    whole = accumulate(records, cfg)
    first = TdcRecords(
        records.delta_t_code[:1500], records.tot_code[:1500], records.energy_bin[:1500]
    )
    second = TdcRecords(
        records.delta_t_code[1500:], records.tot_code[1500:], records.energy_bin[1500:]
    )
    merged = accumulate(second, cfg).merge(accumulate(first, cfg))
    assert merged.delta_t == whole.delta_t
    assert merged.tot == whole.tot
    assert all(a == b for a, b in zip(merged.delta_t_per_bin, whole.delta_t_per_bin))


# digitize
def test_digitize_takes_first_stop_after_each_start():
    hits = DigitalHits(
        np.array([5.0004e-9, 6e-9, 1.0050004e-6]),
        np.array([15.5e-9, 25.5e-9, 35.5e-9]),
        np.ones(3),
    )
    starts = np.array([0.0, 1e-6, 2e-6])
    records, missed = digitize(starts, hits, get_config())
    assert list(records.delta_t_code) == [500, 500]
    assert list(records.tot_code) == [15, 35]
    assert list(records.energy_bin) == [1, 3]
    assert missed == 1


def test_acquire_derives_edges_when_unconfigured():
    tdc = EasyTdc(TdcConfig())
    hits = DigitalHits(np.array([1e-9, 1.001e-6]), np.array([10e-9, 90e-9]), np.ones(2))
    hists = tdc.acquire(np.array([0.0, 1e-6]), hits)
    assert len(tdc.edges) == 7
    assert hists.delta_t_per_bin[0].total == 1
    assert hists.delta_t_per_bin[7].total == 1


def test_acquire_keeps_the_records():
    tdc = EasyTdc(get_config())
    hits = DigitalHits(np.array([1e-9, 1.001e-6]), np.array([15.5e-9, 35.5e-9]), np.ones(2))
    tdc.acquire(np.array([0.0, 1e-6]), hits)
    assert list(tdc.records.tot_code) == [15, 35]


def test_tot_window_selects_by_bin_center():
    records = TdcRecords([100, 200, 300, 400], [14, 15, 16, 30], [1, 1, 1, 3])
    gated = tot_window(records, 15e-9, 17e-9, get_config())
    assert list(gated.delta_t_code) == [200, 300]
    assert list(gated.energy_bin) == [1, 1]
    assert len(tot_window(records, 40e-9, 50e-9, get_config())) == 0
    with pytest.raises(InvalidArgumentError):
        tot_window(records, 17e-9, 15e-9, get_config())


# histogram plumbing
def test_fill_uses_right_closed_bins():
    h = Histogram.uniform(0.0, 1.0, 4)
    h.fill(np.array([0.0, 1.0, 3.5, 4.0, -0.1]))
    assert list(h.counts) == [1, 1, 0, 1]
    h.fill(np.array([4.0, -0.1]), clamp=True)
    assert list(h.counts) == [2, 1, 0, 2]


def test_rebin_keeps_total_and_short_tail():
    h = Histogram.uniform(0.0, 1.0, 5)
    h.counts[:] = [1, 2, 3, 4, 5]
    coarse = h.rebin(2)
    assert list(coarse.counts) == [3, 7, 5]
    assert list(coarse.bin_edges) == [0.0, 2.0, 4.0, 5.0]


def test_merge_requires_identical_edges():
    with pytest.raises(InvalidArgumentError):
        Histogram.uniform(0.0, 1.0, 4).merge(Histogram.uniform(0.0, 2.0, 4))


def test_histogram_rejects_bad_edges():
    with pytest.raises(InvalidArgumentError):
        Histogram([0.0, 1.0, 1.0])
    with pytest.raises(InvalidArgumentError):
        Histogram([0.0, 1.0], counts=[1, 2])


def test_histogram_csv(tmp_path):
    h = Histogram.uniform(0.0, 10e-12, 2000)
    h.fill(np.array([5.004e-9, 5.0e-9, 19.99e-9]))
    path = h.to_csv(tmp_path / "delta_t.csv")
    assert path.read_text().splitlines()[0] == "bin_low,bin_high,count"
    restored = Histogram.from_csv(path)
    assert np.array_equal(restored.counts, h.counts)
    assert restored.total == 3


def test_write_csv_writes_every_histogram(tmp_path):
    hists = accumulate(get_records(100), get_config())
    paths = hists.write_csv(tmp_path)
    assert len(paths) == 10
    assert all(p.exists() for p in paths)
