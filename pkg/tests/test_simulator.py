import math

import numpy as np
import pytest

from helpers import static_profile
from fluoroforge.imaging import Image
from fluoroforge.photophysics import (
    CalibrationProfile,
    FluorophoreState,
    PhotonModel,
    PsfModel,
    TransferTable,
    default_profile,
    fwhm_to_sigma,
    render_psf,
    sample_photon_intensity,
    sample_psf_width,
)
from fluoroforge.simulator import (
    Fluorophore,
    SimulationConfig,
    add_background,
    curve_phantom,
    populate_fluorophores,
    simulate_frame,
    simulate_stack,
)

E = FluorophoreState.EMITTING


def test_populate_zero_density(rng):
    assert populate_fluorophores(Image(np.zeros((4, 4))), 1.0, rng) == []


def test_populate_poisson_mean(rng):
    counts = [len(populate_fluorophores(Image(np.ones((1, 1))), 5.0, rng)) for _ in range(10_000)]
    assert abs(np.mean(counts) - 5.0) < 0.15


def test_populate_ratio_and_positions(rng):
    density = Image(np.array([[1.0, 3.0]]))
    left = right = 0
    for _ in range(4000):
        for f in populate_fluorophores(density, 1.0, rng):
            assert 0 <= f.y < 1
            if f.x < 1:
                left += 1
            else:
                assert 1 <= f.x < 2
                right += 1
    assert right / left == pytest.approx(3.0, rel=0.05)


def test_populate_initial_states(rng):
    pop = populate_fluorophores(Image(np.full((10, 10), 100.0)), 1.0, rng, (0.25, 0.75, 0.0))
    frac = np.mean([f.state == E for f in pop])
    assert abs(frac - 0.25) < 0.03


def test_simulate_frame_all_bleached(rng):
    pop = [Fluorophore(3.0, 3.0, FluorophoreState.BLEACHED)]
    img, nxt = simulate_frame(pop, default_profile(), (8, 8), rng)
    assert not img.pixels.any()
    assert nxt[0].state == FluorophoreState.BLEACHED


def test_simulate_frame_single_spot(rng, static):
    pop = [Fluorophore(10.5, 12.5, E)]
    img, nxt = simulate_frame(pop, static, (24, 24), rng)
    expected = np.zeros((24, 24))
    render_psf(expected, 10.5, 12.5, 0.6, fwhm_to_sigma(7.0))
    assert abs(img.pixels.max() - 0.6) < 1e-9
    np.testing.assert_allclose(img.pixels, expected, atol=1e-12)
    assert nxt[0].state == E


def test_simulate_frame_superposition():
    prof = default_profile()
    a = [Fluorophore(5.2, 6.1, E)]
    b = [Fluorophore(9.7, 3.3, E)]
    # one emitter per call draws (sigma, i0) in that order
    fa, _ = simulate_frame(a, prof, (16, 16), np.random.default_rng(1))
    fb, _ = simulate_frame(b, prof, (16, 16), np.random.default_rng(2))
    ra, rb = np.random.default_rng(1), np.random.default_rng(2)
    canvas = np.zeros((16, 16))
    for f, r in ((a[0], ra), (b[0], rb)):
        s = sample_psf_width(prof.psf, r)
        i0 = sample_photon_intensity(prof.photon, r)
        render_psf(canvas, f.x, f.y, i0, s)
    np.testing.assert_allclose(fa.pixels + fb.pixels, canvas, atol=1e-12)


def test_render_then_advance():
    # p1 = 0: an emitter shows in the current frame, then goes dark
    prof = CalibrationProfile(TransferTable(0.0, 1.0, 0.0, 1.0, 0.0), PsfModel(((4.0, 1.0),)),
                              PhotonModel(0.0, 0.0), (0.0, 0.0), 0.0, (1.0, 0.0, 0.0))
    img, nxt = simulate_frame([Fluorophore(4.0, 4.0, E)], prof, (8, 8), np.random.default_rng(0))
    assert img.pixels.max() > 0
    assert nxt[0].state == FluorophoreState.DARK
    img2, _ = simulate_frame(nxt, prof, (8, 8), np.random.default_rng(0))
    assert not img2.pixels.any()


def test_add_background():
    img = Image(np.full((3, 3), 0.2))
    assert np.array_equal(add_background(img, 0.0).pixels, img.pixels)
    np.testing.assert_allclose(add_background(img, 0.1).pixels, 0.22, atol=1e-15)
    assert not add_background(Image(np.zeros((3, 3))), 0.5).pixels.any()
    with pytest.raises(ValueError):
        add_background(img, -0.1)


def test_simulate_stack_default_geometry():
    density = curve_phantom(480, 480, seed=2)
    stack, truth = simulate_stack(density, default_profile(), SimulationConfig(rng_seed=7))
    assert stack.frame_count == 200
    assert (stack.width, stack.height) == (60, 60)
    assert stack.scale_factor == 8
    assert stack.profile_digest == default_profile().digest()
    assert truth == []


def test_simulate_stack_deterministic():
    density = curve_phantom(64, 64, seed=1)
    cfg = SimulationConfig(frames=20, rng_seed=3)
    a, ta = simulate_stack(density, default_profile(), cfg, keep_ground_truth=True)
    b, tb = simulate_stack(density, default_profile(), cfg, keep_ground_truth=True)
    np.testing.assert_array_equal(a.as_array(), b.as_array())
    assert len(ta) == 20 and all(np.array_equal(x.pixels, y.pixels) for x, y in zip(ta, tb))
    c, _ = simulate_stack(density, default_profile(), SimulationConfig(frames=20, rng_seed=4))
    assert not np.array_equal(a.as_array(), c.as_array())


def test_simulate_stack_zero_everything():
    prof = static_profile()
    stack, _ = simulate_stack(Image(np.zeros((16, 16))), prof, SimulationConfig(frames=3, rng_seed=0))
    assert not stack.as_array().any()


def test_simulate_stack_dimension_error():
    with pytest.raises(ValueError):
        simulate_stack(Image(np.ones((20, 20))), default_profile(), SimulationConfig(frames=1))


def test_config_validation():
    with pytest.raises(ValueError):
        SimulationConfig(frames=0)
    with pytest.raises(ValueError):
        SimulationConfig(scale=0)
    with pytest.raises(ValueError):
        SimulationConfig(count_scale=0)


def test_background_floor():
    prof = default_profile().to_json()
    prof["noise_sigma"] = 0.0
    prof["background_factor_range"] = [0.1, 0.1]
    prof = CalibrationProfile.from_json(prof)
    density = curve_phantom(64, 64, seed=5)
    stack, truth = simulate_stack(density, prof, SimulationConfig(frames=10, rng_seed=1),
                                  keep_ground_truth=True)
    for lr, hr in zip(stack.frames, truth):
        assert lr.pixels.mean() >= 0.1 * hr.pixels.mean() - 1e-15
        assert lr.pixels.mean() == pytest.approx(1.1 * hr.pixels.mean(), rel=1e-12, abs=1e-15)


def test_ground_truth_is_sum_of_renders():
    prof = static_profile()
    density = Image(np.pad(np.ones((2, 2)), 7))
    rng = np.random.default_rng(4)
    pop = populate_fluorophores(density, 2.0, rng, prof.initial_state_probs)
    img, _ = simulate_frame(pop, prof, (16, 16), np.random.default_rng(0))
    canvas = np.zeros((16, 16))
    for f in pop:
        render_psf(canvas, f.x, f.y, 0.6, fwhm_to_sigma(7.0))
    np.testing.assert_allclose(img.pixels, canvas, atol=1e-9)


def test_occupancy_nonincreasing():
    prof = default_profile()
    rng = np.random.default_rng(0)
    pop = [Fluorophore(1.0, 1.0, FluorophoreState(int(s))) for s in rng.choice(3, 10_000, p=[0.1, 0.9, 0.0])]
    alive = []
    for _ in range(15):
        _, pop = simulate_frame(pop, CalibrationProfile(prof.transfer, PsfModel(((1.0, 1.0),)), prof.photon,
                                                        (0, 0), 0.0, prof.initial_state_probs),
                                (2, 2), rng)
        alive.append(sum(f.state != FluorophoreState.BLEACHED for f in pop))
    assert all(b <= a for a, b in zip(alive, alive[1:]))


def test_curve_phantom_range():
    p = curve_phantom(96, 96, seed=0)
    assert p.pixels.max() == 1.0 and p.pixels.min() == 0.0
    assert 0.01 < p.pixels.mean() < 0.3
