import csv

import numpy as np
import pytest

from afc.spectrum import (NoPeakError, SpectrumError, analyse, periodogram, read_column,
                          write_spectrum_csv)


@pytest.mark.parametrize("n", [64, 257, 1000])
def test_parseval(n):
    x = np.random.default_rng(n).standard_normal(n) * 3 + 7
    _, p = periodogram(x, 0.1)
    assert abs(p.sum() - x.var()) <= 1e-8 * x.var()


@pytest.mark.parametrize("f0", [0.17, 0.5, 1.234])
def test_pure_sine_within_one_bin(f0):
    dt = 0.05
    t = np.arange(2000) * dt
    res = analyse(t, 0.3 + np.sin(2 * np.pi * f0 * t + 0.4), chord=2.0, u_inf=4.0)
    bin_width = 1 / (t.size * dt)
    assert abs(res.peak_frequency - f0) <= bin_width
    assert res.strouhal == pytest.approx(res.peak_frequency * 0.5)
    assert res.dominance > 3 and res.prominence >= 30


def test_two_tones_dominance_tracks_power_ratio():
    t = np.arange(4096) * 0.05
    x = 2 * np.sin(2 * np.pi * 0.5 * t) + np.sin(2 * np.pi * 2.0 * t)
    res = analyse(t, x)
    assert abs(res.peak_frequency - 0.5) < 1 / (4096 * 0.05)
    assert 2.5 < res.dominance < 5.5


@pytest.mark.parametrize("seed", range(5))
def test_white_noise_has_no_peak(seed):
    x = np.random.default_rng(seed).standard_normal(2048)
    with pytest.raises(NoPeakError):
        analyse(np.arange(x.size) * 0.1, x)


def test_constant_signal_has_no_peak():
    with pytest.raises(NoPeakError):
        analyse(np.arange(100.0), np.full(100, 2.5))


def test_input_errors():
    with pytest.raises(SpectrumError):
        analyse(np.arange(63.0), np.zeros(63))
    t = np.arange(100.0)
    t[50] += 0.3
    with pytest.raises(SpectrumError):
        analyse(t, np.sin(t))
    x = np.sin(np.arange(100.0))
    x[3] = np.nan
    with pytest.raises(SpectrumError):
        analyse(np.arange(100.0), x)


def test_csv_helpers(tmp_path):
    src = tmp_path / "s.csv"
    t = np.arange(256) * 0.1
    with open(src, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t", "cl"])
        for a, b in zip(t, np.sin(2 * np.pi * 0.8 * t)):
            w.writerow([repr(float(a)), repr(float(b))])
    tt, x = read_column(src, "cl")
    assert np.array_equal(tt, t)
    res = analyse(tt, x)
    out = tmp_path / "spec.csv"
    write_spectrum_csv(out, res)
    rows = list(csv.DictReader(open(out)))
    assert len(rows) == res.frequencies.size
    assert np.array_equal([float(r["power"]) for r in rows], res.power)
    with pytest.raises(SpectrumError):
        read_column(src, "cd")
    with open(src, "a") as fh:
        fh.write("oops,1\n")
    with pytest.raises(SpectrumError):
        read_column(src, "cl")
