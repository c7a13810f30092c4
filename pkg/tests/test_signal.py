import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vcaug import signal as sig


def tone(freq_hz, duration_s=1.0, rate=16000, amp=0.5):
    t = np.arange(int(duration_s * rate)) / rate
    return sig.Waveform(samples=amp * np.sin(2 * np.pi * freq_hz * t), sample_rate_hz=rate)


def test_silence_hits_log_floor():
    wave = sig.Waveform(samples=np.zeros(16000), sample_rate_hz=16000)
    mel = sig.compute_log_mel(wave)
    assert mel.data.shape == (98, 80)
    np.testing.assert_allclose(mel.data, np.log(1e-10), rtol=1e-6)


def test_one_second_gives_98_frames():
    # 1 + floor((16000 - 400) / 160) computed independently of the frontend
    assert 1 + (16000 - 400) // 160 == 98
    mel = sig.compute_log_mel(tone(440.0))
    assert mel.n_frames == 98 and mel.n_mels == 80


@settings(max_examples=50, deadline=None)
@given(n=st.integers(min_value=400, max_value=40000))
def test_framing_arithmetic_property(n):
    wave = sig.Waveform(samples=np.zeros(n), sample_rate_hz=16000)
    mel = sig.compute_log_mel(wave)
    assert mel.n_frames == 1 + (n - 400) // 160


def test_short_wave_rejected():
    wave = sig.Waveform(samples=np.zeros(399), sample_rate_hz=16000)
    with pytest.raises(ValueError, match="shorter than one"):
        sig.compute_log_mel(wave)


def test_pure_tone_peaks_at_bracketing_filter():
    mel = sig.compute_log_mel(tone(1000.0))
    # independent center-frequency oracle from the HTK mel formula
    def to_mel(hz):
        return 2595.0 * np.log10(1.0 + hz / 700.0)

    def to_hz(m):
        return 700.0 * (10.0 ** (m / 2595.0) - 1.0)

    centers = to_hz(np.linspace(to_mel(125.0), to_mel(7600.0), 82))[1:-1]
    below = int(np.searchsorted(centers, 1000.0)) - 1
    bracketing = {below, below + 1}
    for frame in mel.data:
        assert int(np.argmax(frame)) in bracketing


def test_log_floor_invariant():
    mel = sig.compute_log_mel(tone(3000.0, duration_s=0.2))
    assert (mel.data >= np.log(1e-10) - 1e-6).all()


def test_filterbank_has_no_empty_filters():
    fbank = sig.mel_filterbank(16000, 512, 80)
    assert (fbank.sum(axis=1) > 0).all()


def rand_mel(rng, t=40, m=80):
    return sig.MelSpectrogram(data=rng.normal(size=(t, m)).astype(np.float32))


def test_spec_augment_zero_masks_is_identity():
    rng = np.random.default_rng(0)
    mel = rand_mel(rng)
    out = sig.spec_augment(mel, sig.SpecAugmentPolicy(), np.random.default_rng(1))
    assert np.array_equal(out.data, mel.data)
    assert out.data is not mel.data


def test_spec_augment_single_freq_mask_band():
    rng = np.random.default_rng(2)
    mel = rand_mel(rng)
    policy = sig.SpecAugmentPolicy(n_freq_masks=1, max_freq_width=8)
    out = sig.spec_augment(mel, policy, np.random.default_rng(3))
    changed = np.any(out.data != mel.data, axis=0)
    cols = np.flatnonzero(changed)
    assert len(cols) <= 8
    if len(cols):
        assert np.array_equal(cols, np.arange(cols[0], cols[-1] + 1))  # contiguous
        assert (out.data[:, cols] == 0.0).all()
    untouched = ~changed
    assert np.array_equal(out.data[:, untouched], mel.data[:, untouched])


def test_spec_augment_full_time_mask_allowed():
    rng = np.random.default_rng(4)
    mel = rand_mel(rng, t=12)
    policy = sig.SpecAugmentPolicy(n_time_masks=1, max_time_width=12)
    out = sig.spec_augment(mel, policy, np.random.default_rng(5))
    changed_rows = np.any(out.data != mel.data, axis=1)
    rows = np.flatnonzero(changed_rows)
    if len(rows):
        assert np.array_equal(rows, np.arange(rows[0], rows[-1] + 1))
    assert np.array_equal(out.data[~changed_rows], mel.data[~changed_rows])


def test_spec_augment_input_untouched_and_seeded():
    rng = np.random.default_rng(6)
    mel = rand_mel(rng)
    before = mel.data.copy()
    policy = sig.SpecAugmentPolicy(n_freq_masks=2, max_freq_width=10, n_time_masks=2, max_time_width=5)
    a = sig.spec_augment(mel, policy, np.random.default_rng(42))
    b = sig.spec_augment(mel, policy, np.random.default_rng(42))
    assert np.array_equal(mel.data, before)
    assert np.array_equal(a.data, b.data)


@settings(max_examples=30, deadline=None)
@given(
    t=st.integers(min_value=1, max_value=30),
    m=st.integers(min_value=1, max_value=40),
    n_f=st.integers(min_value=0, max_value=3),
    w_f=st.integers(min_value=0, max_value=50),
    n_t=st.integers(min_value=0, max_value=3),
    w_t=st.integers(min_value=0, max_value=50),
    seed=st.integers(min_value=0, max_value=2**31),
)
def test_spec_augment_shape_and_idempotence(t, m, n_f, w_f, n_t, w_t, seed):
    mel = sig.MelSpectrogram(data=np.random.default_rng(seed).normal(size=(t, m)))
    policy = sig.SpecAugmentPolicy(n_f, w_f, n_t, w_t)
    out = sig.spec_augment(mel, policy, np.random.default_rng(seed))
    assert out.data.shape == mel.data.shape
    # masking already-masked regions with the same draws changes nothing
    again = sig.spec_augment(out, policy, np.random.default_rng(seed))
    assert np.array_equal(again.data, out.data)


def test_melf_round_trip_bit_exact(tmp_path):
    rng = np.random.default_rng(7)
    mel = rand_mel(rng, t=7, m=80)
    path = tmp_path / "x.melf"
    sig.write_melf(path, mel)
    back = sig.read_melf(path)
    assert np.array_equal(back.data, mel.data)


def test_melf_header_size(tmp_path):
    mel = rand_mel(np.random.default_rng(8), t=98, m=80)
    path = tmp_path / "x.melf"
    sig.write_melf(path, mel)
    assert path.stat().st_size == 16 + 98 * 80 * 4


def test_melf_bad_magic_rejected(tmp_path):
    path = tmp_path / "x.melf"
    sig.write_melf(path, rand_mel(np.random.default_rng(9), t=3, m=4))
    blob = bytearray(path.read_bytes())
    blob[0] = ord("X")
    path.write_bytes(bytes(blob))
    with pytest.raises(sig.MelfFormatError, match="offset 0"):
        sig.read_melf(path)


def test_melf_truncated_rejected(tmp_path):
    path = tmp_path / "x.melf"
    sig.write_melf(path, rand_mel(np.random.default_rng(10), t=3, m=4))
    path.write_bytes(path.read_bytes()[:-5])
    with pytest.raises(sig.MelfFormatError, match="offset"):
        sig.read_melf(path)


def test_wav_round_trip_and_scaling(tmp_path):
    pcm = np.array([-32768, -1, 0, 1, 32767], dtype=np.int16)
    path = tmp_path / "x.wav"
    import wave as wave_mod

    with wave_mod.open(str(path), "wb") as f:
        f.setnchannels(1)
        f.setsampwidth(2)
        f.setframerate(16000)
        f.writeframes(pcm.tobytes())
    wav = sig.read_wav(path)
    assert wav.sample_rate_hz == 16000
    np.testing.assert_allclose(
        wav.samples, [-1.0, -1 / 32768, 0.0, 1 / 32768, 32767 / 32768]
    )


def test_wav_stereo_rejected(tmp_path):
    import wave as wave_mod

    path = tmp_path / "stereo.wav"
    with wave_mod.open(str(path), "wb") as f:
        f.setnchannels(2)
        f.setsampwidth(2)
        f.setframerate(16000)
        f.writeframes(np.zeros(100, dtype=np.int16).tobytes())
    with pytest.raises(sig.WavFormatError, match="mono"):
        sig.read_wav(path)


def test_write_wav_read_wav_round_trip(tmp_path):
    wave_out = tone(500.0, duration_s=0.05)
    path = tmp_path / "t.wav"
    sig.write_wav(path, wave_out)
    back = sig.read_wav(path)
    np.testing.assert_allclose(back.samples, wave_out.samples, atol=1.0 / 32768)
