import numpy as np
import pytest

from src.config import DdstConfig
from src.impairments import ChannelRealization, NoiseSpec, SalehHpa, apply_channel, transmit
from src.link import build_link

CONFIG = DdstConfig(n=48, p=6)
LINEAR = SalehHpa(alpha_a=1.0, beta_a=0.0, alpha_phi=0.0, beta_phi=0.0, input_scale=0.5)


def test_build_link_linear_amplifier():
    """Test the gain, power and EVM of an uncalibrated linear amplifier."""
    link = build_link(CONFIG, LINEAR, None, 6, 0, reference_count=50)
    assert link.gain == pytest.approx(0.5)
    assert link.distorted_power == pytest.approx(0.25, rel=0.05)
    assert link.evm < 1e-10
    assert link.hpa.input_scale == 0.5
    assert link.target_evm is None


def test_build_link_calibrates_drive_level():
    """Test that a target EVM sets the drive level and the gain picks up the AM/PM rotation."""
    link = build_link(CONFIG, SalehHpa(), 50.0, 6, 1, reference_count=50)
    assert abs(link.evm - 50.0) <= 0.5
    assert link.target_evm == 50.0
    assert np.angle(link.gain) > 0


def test_build_link_is_seeded():
    """Test that the training sequence and the calibration depend only on the seed."""
    first = build_link(CONFIG, SalehHpa(), 55.0, 6, 2, reference_count=20)
    second = build_link(CONFIG, SalehHpa(), 55.0, 6, 2, reference_count=20)
    np.testing.assert_array_equal(first.training, second.training)
    assert first.hpa.input_scale == second.hpa.input_scale


def test_channel_statistics():
    """Test that the tap prior follows the PDP, scaled by |g|^2 and padded to P."""
    link = build_link(CONFIG, LINEAR, None, 3, 0, reference_count=20)
    powers = link.channel_statistics().tap_powers
    assert powers.shape == (CONFIG.p,)
    assert powers.sum() == pytest.approx(abs(link.gain) ** 2)
    np.testing.assert_array_equal(powers[3:], 0)
    shorter = link.with_num_paths(1)
    assert shorter.num_paths == 1
    np.testing.assert_array_equal(shorter.training, link.training)
    assert shorter.channel_statistics().tap_powers[0] == pytest.approx(abs(link.gain) ** 2)


def test_simulate_shapes_and_stages():
    """Test batch shapes, per-frame SNRs and the consistency of the stages."""
    link = build_link(CONFIG, LINEAR, None, 4, 0, reference_count=20)
    batch = link.simulate(5, np.array([0.0, 10.0, 20.0, 30.0, np.inf]), 3)
    assert len(batch) == 5
    assert batch.bits.shape == (5, 2 * CONFIG.n)
    assert batch.taps.shape == (5, 4)
    np.testing.assert_allclose(batch.transmitted, batch.projected + link.training, atol=1e-12)
    np.testing.assert_allclose(batch.distorted, 0.5 * batch.transmitted, atol=1e-12)
    np.testing.assert_allclose(batch.effective_response, link.gain * batch.freq_response)
    assert batch.noise_variance[-1] == 0
    assert np.all(np.diff(batch.noise_variance[:-1]) < 0)
    again = link.simulate(5, np.array([0.0, 10.0, 20.0, 30.0, np.inf]), 3)
    np.testing.assert_array_equal(again.received, batch.received)


def test_simulate_goes_through_the_channel_model():
    """Test that a noiseless batch is the stored per-frame channel applied to the amplified frames."""
    link = build_link(CONFIG, LINEAR, None, 4, 0, reference_count=20)
    batch = link.simulate(3, np.inf, 6)
    channel = ChannelRealization(batch.taps, CONFIG.n)
    np.testing.assert_allclose(batch.freq_response, channel.freq_response, atol=1e-12)
    expected = transmit(batch.transmitted, link.hpa, channel, NoiseSpec(np.inf), None)
    np.testing.assert_allclose(batch.received, expected, atol=1e-12)
    np.testing.assert_allclose(batch.received, apply_channel(batch.taps, 0.5 * batch.transmitted), atol=1e-12)
    np.testing.assert_array_equal(batch.noise_variance, 0)
