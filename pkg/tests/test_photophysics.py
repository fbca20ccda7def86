import json
import math

import numpy as np
import pytest

from fluoroforge.photophysics import (
    CalibrationProfile,
    FluorophoreState,
    PhotonModel,
    PsfModel,
    TransferTable,
    default_profile,
    fwhm_to_sigma,
    load_profile,
    render_psf,
    sample_photon_intensity,
    sample_psf_width,
    sigma_to_fwhm,
    step_state,
    step_states,
)

E, D, B = FluorophoreState.EMITTING, FluorophoreState.DARK, FluorophoreState.BLEACHED


def test_transfer_matrix_rows():
    t = default_profile().transfer
    m = t.matrix()
    np.testing.assert_allclose(m.sum(axis=1), 1.0, atol=1e-9)
    np.testing.assert_array_equal(m[B], [0.0, 0.0, 1.0])
    assert m[E, B] == pytest.approx(1 - t.p1 - t.p2)


def test_transfer_validation():
    with pytest.raises(ValueError):
        TransferTable(0.7, 0.5, 0.1, 0.8, 0.1)
    with pytest.raises(ValueError):
        TransferTable(0.5, 0.5, 0.2, 0.2, 0.2)
    with pytest.raises(ValueError):
        TransferTable(-0.1, 0.5, 0.1, 0.8, 0.1)


def test_step_state_examples(rng):
    t = TransferTable(1.0, 0.0, 0.3, 0.6, 0.1)
    assert all(step_state(B, t, rng) == B for _ in range(100))
    assert all(step_state(E, t, rng) == E for _ in range(100))
    draws = np.array([step_state(D, t, rng) for _ in range(100_000)])
    freqs = np.bincount(draws, minlength=3) / draws.size
    np.testing.assert_allclose(freqs, [0.3, 0.6, 0.1], atol=0.01)


def test_step_states_vectorized(rng):
    t = TransferTable(0.2, 0.5, 0.3, 0.6, 0.1)
    states = np.full(100_000, int(E), dtype=np.int8)
    freqs = np.bincount(step_states(states, t, rng), minlength=3) / states.size
    np.testing.assert_allclose(freqs, [0.2, 0.5, 0.3], atol=0.01)
    assert np.all(step_states(np.full(10, int(B), dtype=np.int8), t, rng) == B)


def test_chain_occupancy_matches_matrix_power(rng):
    t = default_profile().transfer
    n, steps = 10_000, 30
    states = rng.choice(3, size=n, p=[0.1, 0.9, 0.0]).astype(np.int8)
    for _ in range(steps):
        states = step_states(states, t, rng)
    expected = np.array([0.1, 0.9, 0.0]) @ np.linalg.matrix_power(t.matrix(), steps)
    freqs = np.bincount(states, minlength=3) / n
    # 4 standard errors of a binomial proportion
    tol = 4 * np.sqrt(expected * (1 - expected) / n) + 1e-3
    assert np.all(np.abs(freqs - expected) <= tol)


def test_fwhm_sigma_conversion(rng):
    assert fwhm_to_sigma(2.3548200450309493) == pytest.approx(1.0, abs=1e-12)
    assert fwhm_to_sigma(2 * math.sqrt(2 * math.log(2))) == pytest.approx(1.0, abs=1e-12)
    assert fwhm_to_sigma(4.709640090061899) == pytest.approx(2.0, abs=1e-12)
    for f in rng.uniform(0.1, 50, 1000):
        assert fwhm_to_sigma(sigma_to_fwhm(f)) == pytest.approx(f, rel=1e-12)
    for bad in (0.0, -1.0):
        with pytest.raises(ValueError):
            fwhm_to_sigma(bad)


def test_sample_psf_width(rng):
    one = PsfModel(((3.0, 1.0),))
    assert all(sample_psf_width(one, rng) == 3.0 / 2.3548200450309493 for _ in range(10))
    two = PsfModel(((4.0, 0.5), (6.0, 0.5)))
    draws = np.array([sample_psf_width(two, rng) for _ in range(100_000)])
    assert abs(np.mean(draws == fwhm_to_sigma(4.0)) - 0.5) < 0.01
    a = [sample_psf_width(two, np.random.default_rng(9)) for _ in range(3)]
    b = [sample_psf_width(two, np.random.default_rng(9)) for _ in range(3)]
    assert a == b
    with pytest.raises(ValueError):
        PsfModel(())


def test_sample_photon_intensity(rng):
    degenerate = PhotonModel(math.log(0.8), 0.0)
    assert all(sample_photon_intensity(degenerate, rng) == pytest.approx(0.8, abs=1e-15) for _ in range(10))
    draws = np.array([sample_photon_intensity(PhotonModel(0.0, 0.5), rng) for _ in range(100_000)])
    assert np.all(draws > 0)
    assert abs(np.median(draws) - 1.0) < 0.02


def test_render_psf_center_and_half_max():
    sigma = 2.0
    canvas = np.zeros((41, 41))
    render_psf(canvas, 20.5, 20.5, 0.7, sigma)
    assert canvas[20, 20] == pytest.approx(0.7, abs=1e-15)
    # place the spot so that pixel (20, 20) sits exactly one half-width away
    canvas[:] = 0
    r = math.sqrt(2 * math.log(2)) * sigma
    render_psf(canvas, 20.5 + r, 20.5, 1.0, sigma)
    assert canvas[20, 20] == pytest.approx(0.5, abs=1e-9)


@pytest.mark.parametrize("sigma", [1.5, 2.5, 5.0])
def test_render_psf_integral(sigma):
    canvas = np.zeros((101, 101))
    render_psf(canvas, 50.3, 49.8, 0.9, sigma)
    expected = 2 * math.pi * sigma**2 * 0.9
    assert abs(canvas.sum() - expected) / expected < 1e-3


def test_render_psf_truncation_and_edges():
    canvas = np.zeros((40, 40))
    render_psf(canvas, 20.5, 20.5, 1.0, 2.0)
    assert canvas[20, 29] == 0.0  # 9 px > 4 sigma
    assert canvas[20, 28] > 0.0  # 8 px == 4 sigma
    edge = np.zeros((10, 10))
    render_psf(edge, -1.0, 5.0, 1.0, 1.5)
    assert edge[:, 0].max() > 0
    far = np.zeros((10, 10))
    render_psf(far, 100.0, 100.0, 1.0, 1.0)
    assert not far.any()
    with pytest.raises(ValueError):
        render_psf(far, 1, 1, 1.0, 0.0)


def test_render_psf_additive(rng):
    a, b = np.zeros((30, 30)), np.zeros((30, 30))
    spots = [(10.2, 11.7, 0.4, 1.8), (13.9, 12.1, 0.9, 2.3)]
    for s in spots:
        render_psf(a, *s)
    for s in reversed(spots):
        render_psf(b, *s)
    assert np.max(np.abs(a - b)) < 1e-12


def test_profile_json_roundtrip(tmp_path):
    prof = default_profile()
    assert prof.transfer.p1 == 0.3 and prof.transfer.p5 == 0.015
    assert prof.photon.log_mu == pytest.approx(math.log(0.6))
    path = tmp_path / "p.json"
    path.write_text(json.dumps(prof.to_json()))
    again = load_profile(path)
    assert again == prof and again.digest() == prof.digest()
    data = prof.to_json()
    del data["noise_sigma"]
    with pytest.raises(ValueError):
        CalibrationProfile.from_json(data)


def test_profile_validation():
    prof = default_profile().to_json()
    prof["initial_state_probs"] = [0.5, 0.6, 0.0]
    with pytest.raises(ValueError):
        CalibrationProfile.from_json(prof)
    prof = default_profile().to_json()
    prof["background_factor_range"] = [0.2, 0.1]
    with pytest.raises(ValueError):
        CalibrationProfile.from_json(prof)
