import numpy as np
import pytest

from src.config import DdstConfig
from src.errors import CalibrationError, ConfigError, UndefinedInputError
from src.frame import build_training_sequence
from src.impairments import (
    ChannelRealization,
    NoiseSpec,
    SalehHpa,
    apply_hpa,
    calibrate_drive_level,
    complex_noise,
    draw_channel,
    draw_taps,
    exponential_pdp,
    linear_gain,
    measure_evm,
    noise_variance,
    transmit,
)
from src.link import reference_frames

CONFIG = DdstConfig()
LINEAR = SalehHpa(alpha_a=1.0, beta_a=0.0, alpha_phi=0.0, beta_phi=0.0)


def _frames(count, seed=0):
    rng = np.random.default_rng(seed)
    return reference_frames(CONFIG, build_training_sequence(CONFIG, rng), count, rng)


def test_apply_hpa_zero_and_unit_drive():
    """Test A(0)=0 and the amplitude and phase at r=1 with the default parameters."""
    hpa = SalehHpa()
    out = apply_hpa(np.array([0.0, 1.0 + 0j]), hpa)
    assert out[0] == 0
    assert abs(abs(out[1]) - 1.96 / 1.99) < 1e-12
    assert abs(np.angle(out[1]) - 2.53 / 3.82) < 1e-12


def test_apply_hpa_keeps_input_phase():
    """Test that the AM/PM shift adds to the input phase."""
    hpa = SalehHpa()
    x = np.exp(1j * 0.3)
    assert abs(np.angle(apply_hpa(np.array([x]), hpa)[0]) - (0.3 + 2.53 / 3.82)) < 1e-12


def test_apply_hpa_asymptotics():
    """Test the large-drive magnitude decay and the phase limit."""
    hpa = SalehHpa()
    r = 1e6
    out = apply_hpa(np.array([r + 0j]), hpa)[0]
    assert abs(abs(out) * r - 1.96 / 0.99) < 1e-5
    assert abs(hpa.am_pm(r) - 2.53 / 2.82) < 1e-9


def test_am_am_peak():
    """Test that A peaks at 1/sqrt(beta_a) with value alpha_a / (2 sqrt(beta_a)) and is unimodal."""
    hpa = SalehHpa()
    r = np.linspace(0, 5, 500001)
    a = hpa.am_am(r)
    peak = np.argmax(a)
    assert abs(r[peak] - 1 / np.sqrt(0.99)) < 1e-4
    assert abs(a[peak] - 1.96 / (2 * np.sqrt(0.99))) < 1e-6
    assert np.all(np.diff(a[: peak + 1]) > 0)
    assert np.all(np.diff(a[peak + 1 :]) < 0)


def test_measure_evm_linear_and_small_signal():
    """Test zero EVM for a linear amplifier and vanishing EVM at a small drive level."""
    x = _frames(4)
    assert measure_evm(x, LINEAR) < 1e-10
    assert measure_evm(x, SalehHpa(input_scale=1e-4)) < 1e-3


def test_measure_evm_zero_input():
    """Test that an all-zero input is rejected."""
    with pytest.raises(UndefinedInputError):
        measure_evm(np.zeros(8), SalehHpa())


def test_calibrate_drive_level_targets():
    """Test that every EVM target is hit within 0.5 pp with strictly increasing drive levels."""
    frames = _frames(50)
    hpa = SalehHpa()
    scales = []
    for target in (45.0, 50.0, 55.0, 60.0, 65.0):
        scale = calibrate_drive_level(target, hpa, frames)
        assert abs(measure_evm(frames, hpa.with_input_scale(scale)) - target) <= 0.5
        scales.append(scale)
    assert all(a < b for a, b in zip(scales, scales[1:]))


def test_calibrate_drive_level_tiny_target():
    """Test that a near-zero target needs a near-zero drive level."""
    scale = calibrate_drive_level(0.01, SalehHpa(), _frames(10))
    assert scale < 0.02


def test_calibrate_drive_level_unreachable():
    """Test that an amplifier whose EVM saturates below the target fails calibration."""
    mild = SalehHpa(alpha_a=1.0, beta_a=0.0, alpha_phi=0.1, beta_phi=1.0)
    with pytest.raises(CalibrationError, match='30'):
        calibrate_drive_level(30.0, mild, _frames(5))


@pytest.mark.parametrize('target', [0.0, 90.0, -5.0])
def test_calibrate_drive_level_out_of_range(target):
    """Test that targets outside (0, 90) percent are config errors."""
    with pytest.raises(ConfigError):
        calibrate_drive_level(target, SalehHpa(), _frames(2))


def test_exponential_pdp():
    """Test the 3 dB per tap decay and the unit sum."""
    pdp = exponential_pdp(4)
    assert abs(pdp.sum() - 1) < 1e-12
    np.testing.assert_allclose(pdp[1:] / pdp[:-1], 10 ** (-0.3), rtol=1e-12)


@pytest.mark.parametrize('num_paths', [1, 4, 12])
def test_draw_channel(num_paths):
    """Test unit energy, length and the frequency response convention."""
    channel = draw_channel(num_paths, CONFIG, num_paths)
    assert channel.num_paths == num_paths
    assert abs(np.sum(np.abs(channel.taps) ** 2) - 1) < 1e-12
    m = np.arange(CONFIG.n)[:, None]
    expected = np.exp(-2j * np.pi * m * np.arange(num_paths) / CONFIG.n) @ channel.taps
    np.testing.assert_allclose(channel.freq_response, expected, atol=1e-10)
    if num_paths == 1:
        assert abs(abs(channel.taps[0]) - 1) < 1e-12


def test_draw_channel_deterministic_and_bounds():
    """Test seeding and the L <= P limit."""
    np.testing.assert_array_equal(draw_channel(6, CONFIG, 3).taps, draw_channel(6, CONFIG, 3).taps)
    with pytest.raises(ConfigError):
        draw_channel(CONFIG.p + 1, CONFIG, 0)
    with pytest.raises(ConfigError):
        draw_taps(0, CONFIG, 0)


def test_draw_channel_batch():
    """Test that a batch of realizations has one unit-energy row per frame and a response per row."""
    channel = draw_channel(4, CONFIG, 5, count=6)
    assert channel.taps.shape == (6, 4)
    assert channel.num_paths == 4
    np.testing.assert_allclose(np.sum(np.abs(channel.taps) ** 2, axis=1), 1, rtol=1e-12)
    assert channel.freq_response.shape == (6, CONFIG.n)
    for taps, response in zip(channel.taps, channel.freq_response):
        np.testing.assert_allclose(ChannelRealization(taps, CONFIG.n).freq_response, response, atol=1e-12)


def test_transmit_per_frame_channels_and_noise():
    """Test a batch with its own channel per frame and a noiseless last frame."""
    x = _frames(3)
    hpa = SalehHpa(alpha_a=1.0, beta_a=0.0, alpha_phi=0.0, beta_phi=0.0, input_scale=0.5)
    channel = draw_channel(4, CONFIG, 2, count=3)
    noise = NoiseSpec(np.array([0.0, 10.0, np.inf]), 0.25)
    np.testing.assert_allclose(noise.variance, [0.25, 0.025, 0.0])
    y = transmit(x, hpa, channel, noise, 4)
    clean = np.fft.ifft(channel.freq_response * np.fft.fft(0.5 * x, axis=-1), axis=-1)
    np.testing.assert_allclose(y[2], clean[2], atol=1e-12)
    assert np.mean(np.abs(y[0] - clean[0]) ** 2) > np.mean(np.abs(y[1] - clean[1]) ** 2) > 0


def test_noise_variance():
    """Test the SNR definition against the distorted power, including the noiseless case."""
    assert NoiseSpec(10.0, 2.0).variance == pytest.approx(0.2)
    assert NoiseSpec(float('inf'), 2.0).variance == 0
    np.testing.assert_allclose(noise_variance(np.array([0.0, 20.0]), 1.0), [1.0, 0.01])


def test_complex_noise_variance():
    """Test the empirical variance of drawn noise."""
    v = complex_noise((100000,), 0.3, 0)
    assert abs(np.mean(np.abs(v) ** 2) / 0.3 - 1) < 0.02


def test_transmit_identity():
    """Test that a unit-gain linear amplifier, identity channel and no noise pass the frame through."""
    x = _frames(1)[0]
    y = transmit(x, LINEAR, ChannelRealization.identity(CONFIG.n), NoiseSpec(float('inf')), 0)
    np.testing.assert_allclose(y, x, atol=1e-12)


def test_transmit_linear_gain_and_spectrum():
    """Test that a linear amplifier and random channel give Y = g H X."""
    x = _frames(1)[0]
    hpa = SalehHpa(alpha_a=1.96, beta_a=0.0, alpha_phi=0.0, beta_phi=0.0, input_scale=0.5)
    identity = transmit(x, hpa, ChannelRealization.identity(CONFIG.n), NoiseSpec(float('inf')), 0)
    np.testing.assert_allclose(identity, 0.98 * x, atol=1e-12)
    channel = draw_channel(12, CONFIG, 1)
    y = transmit(x, hpa, channel, NoiseSpec(float('inf')), 0)
    np.testing.assert_allclose(np.fft.fft(y), 0.98 * channel.freq_response * np.fft.fft(x), atol=1e-9)


def test_transmit_noise_at_zero_db():
    """Test that noise power equals the distorted power at 0 dB."""
    x = _frames(200)
    hpa = SalehHpa(input_scale=0.5)
    channel = ChannelRealization.identity(CONFIG.n)
    distorted_power = np.mean(np.abs(apply_hpa(x, hpa)) ** 2)
    noisy = transmit(x, hpa, channel, NoiseSpec(0.0, distorted_power), 1)
    noise = noisy - apply_hpa(x, hpa)
    assert abs(np.mean(np.abs(noise) ** 2) / distorted_power - 1) < 0.03


def test_linear_gain():
    """Test the least-squares gain of a scaled copy and the zero-input error."""
    x = _frames(2)
    assert linear_gain(x, (0.5 - 0.2j) * x) == pytest.approx(0.5 - 0.2j)
    with pytest.raises(UndefinedInputError):
        linear_gain(np.zeros(4), np.zeros(4))
