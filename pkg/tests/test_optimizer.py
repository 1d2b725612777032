import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.optimize import minimize_scalar

from ergoholo.evalsuite import finite_difference_check
from ergoholo.incoherent_render import FocalStack
from ergoholo.optimizer import (Adam, HologramBatch, HologramModel, LossHistory, NonFiniteLossError,
                                OptimizerConfig, PhasePattern, ScaleSet, default_plane_indices,
                                fixed_pupils, forward_loss, gradient, load_laser_profile, optimize,
                                pupil_normalization, sample_pupils)
from ergoholo.wave_optics import FrequencyGrid, PupilSpec, pupil_mask

LAM = 520e-9
EYEBOX = (-4e-3, -4e-3, 4e-3, 4e-3)


def small_model(orders=3, frames=2, mode="amplitude", norm="l2", shape=(16, 16), seed=0, **kw):
    cfg = OptimizerConfig(frames=frames, orders=orders, n_fixed=1, n_random=1, seed=seed,
                          scale_mode=mode, loss_norm=norm, **kw)
    return HologramModel(shape, [1e-3, 2.5e-3], LAM, cfg), cfg


# ---------------------------------------------------------------- pupils

def test_default_fixed_grid_centres():
    pupils = fixed_pupils(OptimizerConfig())
    xs = sorted({round(p.center_x * 1e3, 9) for p in pupils})
    ys = sorted({round(p.center_y * 1e3, 9) for p in pupils})
    assert xs == [-2.0, 0.0, 2.0] and ys == [-2.0, 0.0, 2.0]
    assert all(p.radius == 2e-3 for p in pupils)


def test_no_random_pupils_is_seed_independent():
    a = sample_pupils(OptimizerConfig(n_random=0, seed=1), 5)
    b = sample_pupils(OptimizerConfig(n_random=0, seed=99), 17)
    assert a == b == fixed_pupils(OptimizerConfig(n_random=0))


def test_pupils_deterministic_per_seed_and_iteration():
    cfg = OptimizerConfig(seed=3)
    assert sample_pupils(cfg, 4) == sample_pupils(cfg, 4)
    assert sample_pupils(cfg, 4) != sample_pupils(cfg, 5)
    assert sample_pupils(cfg, 4)[:9] == sample_pupils(cfg, 5)[:9]


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10 ** 6), st.integers(0, 1000), st.floats(0.5e-3, 4e-3),
       st.sampled_from(["uniform", "log-uniform"]))
def test_pupils_stay_inside_eyebox(seed, it, r, law):
    cfg = OptimizerConfig(seed=seed, base_radius=r, random_radius=law)
    pupils = sample_pupils(cfg, it)
    assert len(pupils) == cfg.n_pupils
    for p in pupils:
        assert p.inside(EYEBOX, tol=1e-12)
        if p.kind == "random":
            assert min(0.5 * r, 4e-3) - 1e-15 <= p.radius <= min(2 * r, 4e-3) + 1e-15


def test_eyebox_too_small_for_pupil():
    with pytest.raises(ValueError):
        OptimizerConfig(base_radius=5e-3)
    with pytest.raises(ValueError):
        OptimizerConfig(n_fixed=8)


def test_ablation_flags_resolve():
    assert sample_pupils(OptimizerConfig(disable_pupils=True), 0) == [None]
    center = sample_pupils(OptimizerConfig(center_pupil_only=True), 0)
    assert center == [PupilSpec(0.0, 0.0, 2e-3)]
    r = OptimizerConfig(disable_time_multiplexing=True, disable_high_orders=True).resolved()
    assert (r.frames, r.orders) == (1, 1)


def test_pupil_normalization_rule():
    assert pupil_normalization(2e-3, 2e-3) == 1.0
    assert pupil_normalization(4e-3, 2e-3) == 2.0
    assert pupil_normalization(4e-3, 2e-3, enabled=False) == 1.0


def test_pupil_normalization_on_flat_spectrum():
    # flat spectrum (an impulse) through pupils of radius r and 2r
    n = 256
    grid = FrequencyGrid((n, n), 8e-6)
    spec = np.ones((n, n))
    amps = []
    for r in (1e-3, 2e-3):
        field = np.fft.ifft2(spec * pupil_mask(PupilSpec(0, 0, r), LAM, 0.08, grid))
        amps.append(np.sqrt(np.mean(np.abs(field) ** 2)))
    assert amps[1] / amps[0] == pytest.approx(2.0, rel=0.02)


# ---------------------------------------------------------------- loss and gradient

def test_exact_targets_give_zero_loss_and_gradient():
    model, cfg = small_model()
    rng = np.random.default_rng(0)
    phases = rng.uniform(0, 2 * np.pi, (2, 16, 16))
    pupils = sample_pupils(cfg, 0)
    # one plane, one pupil so the target can be met exactly
    targets = model.amplitudes(phases, 0.8, pupils[0], 0)[None]
    single = HologramModel((16, 16), [1e-3], LAM, cfg)
    report, gp, gs = single.evaluate(phases, 0.8, pupils[:1], targets)
    assert report.loss == pytest.approx(0.0, abs=1e-20)
    assert np.max(np.abs(gp)) < 1e-12 and abs(gs) < 1e-12


@pytest.mark.parametrize("orders,mode,norm,seed", [
    (1, "amplitude", "l2", 0), (3, "amplitude", "l2", 1), (3, "phase", "l2", 2),
    (3, "amplitude", "l1", 3), (1, "phase", "l1", 4), (3, "amplitude", "l2", 5),
])
def test_gradient_matches_finite_differences(orders, mode, norm, seed):
    model, cfg = small_model(orders, mode=mode, norm=norm, seed=seed)
    rng = np.random.default_rng(seed)
    phases = rng.uniform(0, 2 * np.pi, (2, 16, 16))
    targets = rng.uniform(0.2, 1.0, (2, 16, 16))
    # one eccentric pupil alongside the centre
    pupils = [PupilSpec(0, 0, 2e-3), PupilSpec(1.7e-3, -1.1e-3, 1.3e-3, "random")]
    idx = [tuple(int(v) for v in rng.integers(0, [2, 16, 16])) for _ in range(12)]
    err = finite_difference_check(model, phases, 0.9, pupils, targets, indices=idx)
    assert err < 1e-4


def test_scale_gradient_vanishes_at_optimum():
    model, cfg = small_model()
    rng = np.random.default_rng(7)
    phases = rng.uniform(0, 2 * np.pi, (2, 16, 16))
    targets = model.prepare_targets(rng.uniform(0.2, 1.0, (2, 16, 16)))
    pupils = sample_pupils(cfg, 0)
    res = minimize_scalar(lambda s: model.evaluate(phases, s, pupils, targets, grad=False)[0].loss,
                          bounds=(1e-3, 10.0), method="bounded", options={"xatol": 1e-10})
    _, _, gs = model.evaluate(phases, res.x, pupils, targets)
    _, _, gs_off = model.evaluate(phases, 1.5 * res.x, pupils, targets)
    assert abs(gs) < 1e-6 * abs(gs_off)


def test_batch_level_loss_and_gradient_agree_with_model():
    cfg = OptimizerConfig(frames=2, orders=3, n_fixed=1, n_random=0)
    rng = np.random.default_rng(8)
    batch = HologramBatch(rng.uniform(0, 2 * np.pi, (2, 2, 8, 8)), [0.7, 1.1], (632e-9, 450e-9))
    targets = FocalStack([1e-3, 2e-3], rng.uniform(0.1, 1, (2, 8, 8, 2)), (632e-9, 450e-9))
    pupils = sample_pupils(cfg, 0)
    rep = forward_loss(batch, pupils, targets, None, cfg)
    gp, gs, rep2 = gradient(batch, pupils, targets, None, cfg)
    assert rep.loss == pytest.approx(rep2.loss)
    assert gp.shape == batch.phases.shape and gs.shape == (2,)
    per_channel = []
    for c, lam in enumerate(targets.wavelengths):
        m = HologramModel((8, 8), targets.plane_depths, lam, cfg)
        per_channel.append(m.evaluate(batch.phases[c], batch.global_scale[c], pupils,
                                      m.prepare_targets(targets.planes[..., c]), grad=False)[0].loss)
    assert rep.loss == pytest.approx(np.mean(per_channel))
    with pytest.raises(ValueError):
        forward_loss(batch, pupils, FocalStack([1e-3], np.ones((1, 5, 5, 2)), (632e-9, 450e-9)), None, cfg)


def test_phase_scaling_cannot_absorb_exposure():
    # full band, one order, no envelope: a phase-only field keeps its energy for every sigma
    cfg = OptimizerConfig(frames=1, orders=1, disable_pupils=True, use_sinc=False, scale_mode="phase")
    model = HologramModel((16, 16), [1e-3], LAM, cfg)
    phases = np.random.default_rng(9).uniform(0, 2 * np.pi, (1, 16, 16))
    amp = model.amplitudes(phases, 1.0, None, 0)[None]
    floor = float(np.mean(amp ** 2))
    for s in np.linspace(0.25, 4.0, 16):
        loss = model.evaluate(phases, s, [None], 2 * amp, grad=False)[0].loss
        assert loss >= floor * (1 - 1e-9)
    amp_cfg = OptimizerConfig(frames=1, orders=1, disable_pupils=True, use_sinc=False)
    amp_model = HologramModel((16, 16), [1e-3], LAM, amp_cfg)
    assert amp_model.evaluate(phases, 2.0, [None], 2 * amp, grad=False)[0].loss < 1e-20


def test_global_scale_absorbs_target_doubling():
    cfg = OptimizerConfig(frames=2, orders=1, n_fixed=1, n_random=2, iterations=40, num_planes=2)
    rng = np.random.default_rng(10)
    inten = rng.uniform(0.1, 1.0, (2, 16, 16, 1))
    base = FocalStack([1e-3, 2e-3], inten, (LAM,))
    doubled = FocalStack([1e-3, 2e-3], 4 * inten, (LAM,))
    b1, h1 = optimize(cfg, base)
    b2, h2 = optimize(cfg, doubled)
    assert b2.global_scale[0] / b1.global_scale[0] == pytest.approx(2.0, rel=1e-3)
    assert min(h2[0].loss) / min(h1[0].loss) == pytest.approx(4.0, rel=1e-3)


# ---------------------------------------------------------------- optimize

def test_zero_iterations_returns_initialisation():
    cfg = OptimizerConfig(frames=2, orders=1, iterations=0, n_fixed=1, n_random=0, num_planes=1)
    fs = FocalStack([1e-3], np.ones((1, 8, 8, 1)), (LAM,))
    init = HologramBatch(np.random.default_rng(0).uniform(0, 6, (1, 2, 8, 8)), [0.5], (LAM,))
    batch, hist = optimize(cfg, fs, initial=init)
    np.testing.assert_array_equal(batch.phases, init.phases)
    assert batch.global_scale[0] == 0.5
    assert hist[0].rows is not None and len(hist[0].loss) == 0


def test_flat_white_target_converges():
    cfg = OptimizerConfig(frames=1, orders=1, disable_pupils=True, iterations=200, num_planes=1)
    fs = FocalStack([1e-3], np.ones((1, 64, 64, 1)), (LAM,))
    _, hist = optimize(cfg, fs)
    assert hist[0].best_loss[-1] < 0.1 * hist[0].loss[0]


def test_best_loss_is_monotone_and_deterministic():
    cfg = OptimizerConfig(frames=2, orders=3, n_fixed=4, n_random=2, iterations=15, num_planes=2)
    inten = np.random.default_rng(11).uniform(0, 1, (3, 12, 12, 1))
    fs = FocalStack([1e-3, 2e-3, 3e-3], inten, (LAM,))
    b1, h1 = optimize(cfg, fs)
    b2, h2 = optimize(cfg, fs)
    assert np.all(np.diff(h1[0].best_loss) <= 0)
    np.testing.assert_array_equal(b1.phases, b2.phases)
    assert h1[0].loss == h2[0].loss


def test_non_finite_loss_aborts_with_checkpoint(monkeypatch):
    cfg = OptimizerConfig(frames=1, orders=1, n_fixed=1, n_random=0, iterations=8, num_planes=1)
    fs = FocalStack([1e-3], np.ones((1, 8, 8, 1)), (LAM,))
    original = HologramModel.evaluate
    calls = []

    def failing(self, *args, **kwargs):
        report, gp, gs = original(self, *args, **kwargs)
        calls.append(1)
        if len(calls) > 3:
            report.loss = math.nan
        return report, gp, gs

    monkeypatch.setattr(HologramModel, "evaluate", failing)
    with pytest.raises(NonFiniteLossError) as info:
        optimize(cfg, fs)
    assert info.value.batch.phases.shape == (1, 1, 8, 8)
    assert len(info.value.history[0].loss) == 3
    assert np.all(np.isfinite(info.value.batch.phases))


def test_default_plane_indices():
    assert default_plane_indices(32, 6) == (0, 6, 12, 19, 25, 31)
    assert default_plane_indices(4, 6) == (0, 1, 2, 3)


# ---------------------------------------------------------------- scales and export

def test_laser_profile_defaults_and_normalisation(tmp_path):
    np.testing.assert_array_equal(load_laser_profile(None, (4, 5)), np.ones((4, 5)))
    yy, xx = np.mgrid[-8:8, -8:8]
    gauss = np.exp(-(xx ** 2 + yy ** 2) / 40.0)
    np.save(tmp_path / "beam.npy", gauss)
    prof = load_laser_profile(tmp_path / "beam.npy", (16, 16))
    assert prof.mean() == pytest.approx(1.0, abs=1e-15)
    np.save(tmp_path / "bad.npy", gauss - 0.5)
    with pytest.raises(ValueError):
        load_laser_profile(tmp_path / "bad.npy")
    with pytest.raises(ValueError):
        load_laser_profile(tmp_path / "beam.npy", (8, 8))


def test_laser_profile_scales_reconstructed_energy():
    cfg = OptimizerConfig(frames=1, orders=1, disable_pupils=True, use_sinc=False)
    yy, xx = np.mgrid[-8:8, -8:8]
    prof = np.exp(-(xx ** 2 + yy ** 2) / 40.0)
    prof /= prof.mean()
    flat = np.zeros((1, 16, 16))
    plain = HologramModel((16, 16), [1e-3], LAM, cfg)
    lit = HologramModel((16, 16), [1e-3], LAM, cfg, laser_profile=prof)
    e0 = np.sum(np.abs(plain.fields(flat, 1.0, None, 0)) ** 2)
    e1 = np.sum(np.abs(lit.fields(flat, 1.0, None, 0)) ** 2)
    assert e1 / e0 == pytest.approx(np.mean(prof ** 2), rel=1e-12)


def test_scale_set_validation():
    with pytest.raises(ValueError):
        ScaleSet(laser_profile=np.zeros((2, 2)))
    with pytest.raises(ValueError):
        ScaleSet(pupil_scales=[1.0, -1.0])


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10 ** 6))
def test_quantisation_error_bound(seed):
    phase = np.random.default_rng(seed).uniform(-20, 20, (8, 8))
    pat = PhasePattern(phase)
    back = PhasePattern.from_levels(pat.quantize()).phase
    d = np.angle(np.exp(1j * (back - phase)))
    assert np.max(np.abs(d)) <= np.pi / 256 + 1e-12
    b = HologramBatch(phase[None, None], [1.0], (LAM,))
    np.testing.assert_allclose(b.quantized().phases[0, 0], back)


def test_config_roundtrip_and_validation():
    cfg = OptimizerConfig(frames=5, planes=(1, 3), seed=4)
    assert OptimizerConfig.from_dict(cfg.to_dict()) == cfg
    with pytest.raises(ValueError):
        OptimizerConfig.from_dict({"frames": 2, "bogus": 1})
    for bad in ({"orders": 2}, {"frames": 0}, {"loss_norm": "l3"}, {"scale_mode": "x"}, {"step_size": 0}):
        with pytest.raises(ValueError):
            OptimizerConfig(**bad)


def test_adam_first_step_moves_by_step_size():
    adam = Adam(0.02)
    x = adam.step(np.zeros(3), np.array([3.0, -1e-3, 0.0]))
    np.testing.assert_allclose(x[:2], [-0.02, 0.02], rtol=1e-5)
    assert x[2] == 0.0


def test_loss_history_rows():
    h = LossHistory()
    h.append(0, 2.0, 2.0, 1.5)
    h.append(1, 3.0, 2.0, 3.0)
    assert list(h.rows()) == [(0, 2.0, 2.0, 1.5), (1, 3.0, 2.0, 3.0)]
    assert math.isfinite(h.best_loss[-1])
