import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra import numpy as hnp

from uwbdar import domainmaps as dm
from uwbdar.uwbsim import PulseMatrix

from oracles import naive_dft


def pm(data, rate=100.0):
    return PulseMatrix(np.asarray(data, dtype=np.float64), frame_rate=rate, label="Nod", subject_id=4)


def test_range_map_shapes_and_values(rng):
    m = pm(rng.standard_normal((178, 500)))
    r = dm.range_map(m)
    assert r.kind == dm.RANGE_TIME and r.shape == (178, 500)
    np.testing.assert_array_equal(r.data, np.abs(m.data))
    assert (r.label, r.subject_id) == ("Nod", 4)
    np.testing.assert_array_equal(dm.range_map(m, signed=True).data, m.data)
    assert not dm.range_map(pm(np.zeros((5, 6)))).data.any()


def test_range_map_single_impulse():
    x = np.zeros((10, 20))
    x[5, 9] = -2.0
    r = dm.range_map(pm(x)).data
    assert np.argwhere(r).tolist() == [[5, 9]]


@pytest.mark.parametrize("n", [7, 178, 500])
def test_frequency_map_against_naive_dft(rng, n):
    x = rng.standard_normal((n, 6))
    got = dm.frequency_map(pm(x)).data
    ref = np.abs(naive_dft(x))
    np.testing.assert_allclose(got, ref, rtol=1e-5, atol=1e-9 * np.abs(ref).max())


@pytest.mark.parametrize("n", [7, 178, 500])
def test_range_doppler_against_naive_dft(rng, n):
    x = rng.standard_normal((3, n))
    got = dm.range_doppler_map(pm(x)).data
    ref = np.abs(naive_dft(x.T)).T
    # zero Doppler sits at column n // 2
    ref = np.roll(ref, n // 2, axis=1)
    np.testing.assert_allclose(got, ref, rtol=1e-5, atol=1e-9 * np.abs(ref).max())


@given(hnp.arrays(np.float64, st.tuples(st.integers(2, 60), st.integers(1, 4)),
                  elements=st.floats(-100, 100, allow_nan=False)))
def test_parseval(x):
    x = x + 1e-3  # keep the energy away from zero
    spec = dm.frequency_map(pm(x)).data
    n = x.shape[0]
    lhs = (x**2).sum(axis=0)
    rhs = (spec**2).sum(axis=0) / n
    np.testing.assert_allclose(lhs, rhs, rtol=1e-6)


def test_frequency_map_dc_and_cosine():
    c = 0.7
    f = dm.frequency_map(pm(np.full((178, 3), c))).data
    np.testing.assert_allclose(f[0], 178 * c, rtol=1e-12)
    assert np.abs(f[1:]).max() < 1e-9
    k = np.arange(178)
    col = np.cos(2 * np.pi * 7 * k / 178)
    f = dm.frequency_map(pm(col[:, None])).data[:, 0]
    assert sorted(np.argsort(f)[-2:].tolist()) == [7, 171]
    np.testing.assert_allclose(f[[7, 171]], 89.0, rtol=1e-9)


def test_frequency_map_default_shape(rng):
    f = dm.frequency_map(pm(rng.standard_normal((178, 500))))
    assert f.kind == dm.FREQUENCY_TIME and f.shape == (178, 500)


def test_range_doppler_static_and_tone():
    static = dm.range_doppler_map(pm(np.ones((2, 500)))).data
    assert np.argmax(static[0]) == 250
    assert static[0, 250] == pytest.approx(500.0)
    t = np.arange(500) / 100.0
    tone = dm.range_doppler_map(pm(np.cos(2 * np.pi * 10 * t)[None])).data[0]
    assert sorted(np.argsort(tone)[-2:].tolist()) == [200, 300]
    rd = dm.range_doppler_map(pm(np.ones((178, 500))))
    assert rd.shape == (178, 500)
    assert rd.col_axis.start == -250


def test_crop_examples(rng):
    r = dm.range_map(pm(rng.standard_normal((178, 500))))
    roi = dm.crop(r, dm.CropSpec(8, 59))
    assert roi.shape == (51, 500)
    assert roi.row_axis.start == 8
    same = dm.crop(r, dm.CropSpec(0, 178, 0, 500))
    np.testing.assert_array_equal(same.data, r.data)
    np.testing.assert_array_equal(dm.crop(r, dm.CropSpec(0, 2)).data, r.data[:2])
    f = dm.frequency_map(pm(rng.standard_normal((178, 500))))
    assert dm.crop(f, dm.CropSpec(*dm.ALERT_FREQ_ROWS)).shape == (89, 500)
    for bad in (dm.CropSpec(5, 5), dm.CropSpec(-1, 4), dm.CropSpec(0, 179), dm.CropSpec(0, 4, 10, 501)):
        with pytest.raises(ValueError):
            dm.crop(r, bad)


@given(st.integers(0, 20), st.integers(1, 20), st.integers(0, 10), st.integers(1, 10))
def test_crop_commutes_with_range_map(r0, dr, c0, dc):
    x = np.random.default_rng(r0 * 31 + c0).standard_normal((40, 20))
    spec = dm.CropSpec(r0, r0 + dr, c0, c0 + dc)
    a = dm.crop(dm.range_map(pm(x)), spec).data
    b = dm.range_map(pm(x[r0:r0 + dr, c0:c0 + dc])).data
    np.testing.assert_array_equal(a, b)


def test_window_slices():
    m = pm(np.arange(10 * 500, dtype=float).reshape(10, 500))
    one = dm.window_slices(m, 1.0, 1.0)
    assert len(one) == 5 and all(s.slow_bins == 100 for s in one)
    np.testing.assert_array_equal(one[2].data, m.data[:, 200:300])
    assert len(dm.window_slices(m, 5.0)) == 1
    assert dm.window_slices(m, 10.0) == []
    assert len(dm.window_slices(m, 2.0, 1.0)) == 4
    with pytest.raises(ValueError):
        dm.window_slices(m, 0.001)


def test_maps_are_deterministic_and_unnormalized(rng):
    x = rng.standard_normal((30, 40))
    for fn in (dm.range_map, dm.frequency_map, dm.range_doppler_map):
        a, b = fn(pm(x)), fn(pm(x))
        assert a.data.tobytes() == b.data.tobytes()
        # scaling the input scales every map linearly: nothing data-dependent
        np.testing.assert_allclose(fn(pm(3.0 * x)).data, 3.0 * a.data, rtol=1e-12, atol=1e-12)


def test_band_rows_and_axis_validation():
    assert dm.band_rows("higher", 178) == (89, 178)
    assert dm.band_rows("lower", 178) == (0, 89)
    assert dm.band_rows("full", 178) == (0, 178)
    with pytest.raises(ValueError):
        dm.band_rows("middle", 178)
    with pytest.raises(ValueError):
        dm.DomainMap(dm.RANGE_TIME, np.zeros((2, 2)), dm.Axis("frequency"), dm.Axis("slow_time"))


def test_slow_axis_alternative(rng):
    f = dm.frequency_map(pm(rng.standard_normal((20, 300))), axis="slow", nperseg=64)
    assert f.shape == (33, 300)
    with pytest.raises(ValueError):
        dm.frequency_map(pm(rng.standard_normal((20, 30))), axis="diagonal")
