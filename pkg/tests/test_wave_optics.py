import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ergoholo.evalsuite import dft_oracle
from ergoholo.wave_optics import (ComplexField, FrequencyGrid, KernelCache, OpticsSettings, PupilSpec,
                                  band_limit, coherent_kernel, fold_orders, high_order_spectrum,
                                  propagate, pupil_mask, reconstruct_plane, sinc_envelope)

LAM = 520e-9
P = 8e-6


def random_field(rng, n=32, pitch=P, lam=LAM):
    return ComplexField(rng.normal(size=(n, n)) + 1j * rng.normal(size=(n, n)), pitch, lam)


def test_kernel_identity_at_zero_distance():
    grid = FrequencyGrid((16, 16), 0.2e-6)  # fine pitch so part of the grid is evanescent
    k = coherent_kernel(grid, LAM, 0.0).values
    fx, fy = grid.mesh()
    band = fx ** 2 + fy ** 2 < 1 / LAM ** 2
    assert (~band).any()
    np.testing.assert_array_equal(k[band], 1.0)
    np.testing.assert_array_equal(k[~band], 0.0)


def test_kernel_on_axis_phase():
    d = 1.234e-3
    k = coherent_kernel(FrequencyGrid((8, 8), P), LAM, d).values
    assert k[0, 0] == pytest.approx(np.exp(1j * 2 * np.pi * d / LAM), abs=1e-12)


def test_kernel_zero_outside_band():
    # pitch chosen so fftfreq sample 4 of 16 sits at |f| = 1.01 / lambda
    n = 16
    grid = FrequencyGrid((n, n), 4.0 / (n * 1.01 / LAM))
    assert grid.fx[4] == pytest.approx(1.01 / LAM)
    k = coherent_kernel(grid, LAM, 1e-3).values
    assert k[0, 4] == 0


def test_kernel_unit_modulus_in_band():
    grid = FrequencyGrid((32, 32), P)
    k = coherent_kernel(grid, LAM, 3e-3).values
    np.testing.assert_allclose(np.abs(k), 1.0, atol=1e-14)


def test_propagate_roundtrip_is_band_limit():
    rng = np.random.default_rng(1)
    f = random_field(rng, 32, pitch=0.3e-6)
    back = propagate(propagate(f, 2e-6), -2e-6)
    assert np.max(np.abs(back.data - band_limit(f).data)) < 1e-10


def test_plane_wave_eigenfunction():
    d = 0.7e-3
    f = ComplexField(np.full((16, 16), 2.0 + 0j), P, LAM)
    out = propagate(f, d)
    np.testing.assert_allclose(out.data, 2.0 * np.exp(1j * 2 * np.pi * d / LAM), atol=1e-12)


def test_propagate_conserves_band_energy():
    rng = np.random.default_rng(2)
    f = random_field(rng, 32)
    assert propagate(f, 5e-3).energy() == pytest.approx(band_limit(f).energy(), rel=1e-12)


def test_propagate_matches_dft_oracle():
    rng = np.random.default_rng(3)
    f = random_field(rng, 8)
    assert np.max(np.abs(propagate(f, 1e-3).data - dft_oracle(f, 1e-3).data)) < 1e-10


def test_padded_propagation_matches_padded_oracle():
    rng = np.random.default_rng(4)
    f = random_field(rng, 6)
    diff = propagate(f, 1e-3, pad=True).data - dft_oracle(f, 1e-3, pad=True).data
    assert np.max(np.abs(diff)) < 1e-10


def test_propagate_rejects_non_finite():
    data = np.zeros((8, 8), complex)
    data[2, 3] = np.nan
    with pytest.raises(ValueError):
        propagate(ComplexField(data, P, LAM), 1e-3)


def test_orders_one_is_base_spectrum():
    phase = np.random.default_rng(5).uniform(0, 2 * np.pi, (16, 16))
    np.testing.assert_allclose(high_order_spectrum(phase, 1), np.fft.fft2(np.exp(1j * phase)))


def test_even_orders_rejected():
    with pytest.raises(ValueError):
        high_order_spectrum(np.zeros((4, 4)), 2)


def test_flat_phase_diffracts_into_replica_centers():
    spec = high_order_spectrum(np.zeros((16, 16)), 3)
    energy = np.abs(spec) ** 2
    peaks = np.zeros_like(energy, bool)
    peaks[::16, ::16] = True
    assert peaks.sum() == 9
    assert energy[~peaks].max() == 0
    np.testing.assert_allclose(energy[peaks], 256.0 ** 2)


def test_tiled_energy_is_nine_times_base():
    phase = np.random.default_rng(6).uniform(0, 2 * np.pi, (16, 16))
    base = np.sum(np.abs(high_order_spectrum(phase, 1)) ** 2)
    assert np.sum(np.abs(high_order_spectrum(phase, 3)) ** 2) == pytest.approx(9 * base, rel=1e-12)


def test_tiled_spectrum_matches_direct_shift_sum():
    # the sum of replicas shifted by multiples of 1/p equals the periodic
    # discrete-space transform evaluated directly at the supersampled frequencies
    n = 8
    phase = np.random.default_rng(7).uniform(0, 2 * np.pi, (n, n))
    u = np.exp(1j * phase)
    f = np.fft.fftfreq(3 * n, d=P / 3)
    x = np.arange(n) * P
    e = np.exp(-2j * np.pi * np.outer(f, x))
    expected = e @ u @ e.T
    np.testing.assert_allclose(high_order_spectrum(phase, 3), expected, atol=1e-10)


def test_tiled_spectrum_is_periodic_in_one_over_pitch():
    phase = np.random.default_rng(8).uniform(0, 2 * np.pi, (12, 12))
    s = high_order_spectrum(phase, 3)
    np.testing.assert_array_equal(s[12:24, :], s[:12, :])
    np.testing.assert_array_equal(s[:, 24:], s[:, :12])


def test_fold_is_adjoint_of_tiling():
    rng = np.random.default_rng(9)
    a = rng.normal(size=(3, 6, 6)) + 1j * rng.normal(size=(3, 6, 6))
    b = rng.normal(size=(3, 18, 18)) + 1j * rng.normal(size=(3, 18, 18))
    lhs = np.vdot(np.tile(a, (1, 3, 3)), b)
    rhs = np.vdot(a, fold_orders(b, 3))
    assert lhs == pytest.approx(rhs, rel=1e-12)


def test_sinc_envelope_values():
    n = 16
    grid = FrequencyGrid((n, n), P, supersample=3)
    env = sinc_envelope(grid, P)
    assert env[0, 0] == 1.0
    i_first = int(np.argmin(np.abs(grid.fx - 1 / P)))
    assert grid.fx[i_first] == pytest.approx(1 / P)
    assert abs(env[0, i_first]) < 1e-15
    i_half = int(np.argmin(np.abs(grid.fx - 1 / (2 * P))))
    assert env[0, i_half] == pytest.approx(2 / np.pi, abs=1e-12)


def test_sinc_envelope_symmetry():
    grid = FrequencyGrid((10, 10), P, supersample=3)
    env = sinc_envelope(grid, P)
    neg = np.roll(env[::-1, ::-1], 1, axis=(0, 1))
    np.testing.assert_allclose(env, neg, atol=1e-15)
    np.testing.assert_allclose(env, env.T, atol=1e-15)
    assert np.isrealobj(env)


def test_pupil_covering_grid_is_all_ones():
    grid = FrequencyGrid((16, 16), P, supersample=3)
    with warnings.catch_warnings(record=True) as w:
        warnings.simplefilter("always")
        mask = pupil_mask(PupilSpec(0, 0, 1.0), LAM, 0.08, grid)
    assert mask.all()
    assert any(issubclass(x.category, RuntimeWarning) for x in w)
    assert pupil_mask(None, LAM, 0.08, grid).all()


def test_tiny_pupil_selects_single_sample():
    grid = FrequencyGrid((16, 16), P, supersample=3)
    assert pupil_mask(PupilSpec(1e-4, 0, 1e-12), LAM, 0.08, grid).sum() == 1


def test_pupil_center_maps_through_lambda_f():
    grid = FrequencyGrid((64, 64), P)
    lam, f = 632e-9, 0.08
    fx = grid.fx[5]
    mask = pupil_mask(PupilSpec(fx * lam * f, 0, 0.2e-3), lam, f, grid)
    assert mask[0, 5]
    assert not mask[0, 0]


def test_central_order_band_pupil():
    # a 6.32 mm-wide iris spans exactly the central-order frequency band 1/p for red
    lam, f = 632e-9, 0.08
    width = lam * f / P
    assert width == pytest.approx(6.32e-3)
    grid = FrequencyGrid((32, 32), P, supersample=3)
    mask = pupil_mask(PupilSpec(0, 0, width / 2), lam, f, grid)
    fx, fy = grid.mesh()
    inside = np.hypot(fx, fy)[mask]
    assert inside.max() <= (1 + 1e-12) / (2 * P)
    assert inside.max() > 0.9 / (2 * P)


def test_identity_reconstruction():
    phase = np.random.default_rng(10).uniform(0, 2 * np.pi, (16, 16))
    s = OpticsSettings(orders=1, use_sinc=False)
    out = reconstruct_plane(phase, None, 0.0, s)
    np.testing.assert_allclose(out.data, np.exp(1j * phase), atol=1e-12)


def test_flat_phase_far_field_lattice():
    # without the envelope a flat SLM diffracts into the 3x3 grating orders
    out = reconstruct_plane(np.zeros((16, 16)), None, 0.0, OpticsSettings(orders=3, use_sinc=False))
    spec = np.abs(np.fft.fft2(out.data))
    nz = {tuple(i) for i in np.argwhere(spec > 1e-9 * spec.max())}
    assert nz == {(i, j) for i in (0, 16, 32) for j in (0, 16, 32)}
    # a fill-factor-one pixel aperture nulls every replica centre
    out = reconstruct_plane(np.zeros((16, 16)), None, 0.0, OpticsSettings(orders=3, use_sinc=True))
    spec = np.abs(np.fft.fft2(out.data))
    assert np.argwhere(spec > 1e-9 * spec.max()).tolist() == [[0, 0]]


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2 ** 31), st.floats(-5e-3, 5e-3))
def test_reconstruction_intensity_non_negative(seed, d):
    phase = np.random.default_rng(seed).uniform(0, 2 * np.pi, (8, 8))
    out = reconstruct_plane(phase, PupilSpec(0, 0, 2e-3), d, OpticsSettings())
    assert (out.intensity >= 0).all()


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 2 ** 31), st.floats(0.3e-3, 3e-3), st.floats(1.01, 2.0))
def test_pupil_monotonicity(seed, r, grow):
    rng = np.random.default_rng(seed)
    phase = rng.uniform(0, 2 * np.pi, (12, 12))
    s = OpticsSettings()
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        small = reconstruct_plane(phase, PupilSpec(1e-3, -0.5e-3, r), 1e-3, s).energy()
        big = reconstruct_plane(phase, PupilSpec(1e-3, -0.5e-3, r * grow), 1e-3, s).energy()
    assert big >= small - 1e-9 * max(big, 1)


def test_kernel_cache_roundtrip(tmp_path):
    cache = KernelCache()
    calls = []

    def make():
        calls.append(1)
        return np.arange(6.0).reshape(2, 3)

    a = cache.get_or_compute(("k", 1.0, 2), make)
    b = cache.get_or_compute(("k", 1.0, 2), make)
    assert a is b and len(calls) == 1
    assert not a.flags.writeable
    cache.save(tmp_path / "cache.npz")
    loaded = KernelCache.load(tmp_path / "cache.npz")
    np.testing.assert_array_equal(loaded.get_or_compute(("k", 1.0, 2), make), a)
    assert len(calls) == 1


def test_field_validation():
    with pytest.raises(ValueError):
        ComplexField(np.zeros(4), P, LAM)
    with pytest.raises(ValueError):
        ComplexField(np.zeros((4, 4)), -1.0, LAM)
    with pytest.raises(ValueError):
        PupilSpec(0, 0, 0.0)
    assert PupilSpec(2e-3, 2e-3, 2e-3).inside((-4e-3, -4e-3, 4e-3, 4e-3))
    assert not PupilSpec(3e-3, 0, 2e-3).inside((-4e-3, -4e-3, 4e-3, 4e-3))
    assert math.isclose(ComplexField(np.ones((2, 2)), P, LAM).energy(), 4.0)
