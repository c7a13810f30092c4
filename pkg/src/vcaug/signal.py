"""Waveform I/O, the log-mel frontend, and time/frequency masking.

The frontend is fixed to the conventions used throughout this package:
Hann window, HTK-style mel scale over 125-7600 Hz, natural log with a
1e-10 floor, and no tail padding (the trailing remainder of a waveform
that does not fill a whole frame is dropped).
"""

from __future__ import annotations

import struct
import wave
from dataclasses import dataclass, field

import numpy as np

LOG_FLOOR = 1e-10
MEL_FMIN_HZ = 125.0
MEL_FMAX_HZ = 7600.0

MELF_MAGIC = b"MELF"
MELF_VERSION = 1


class WavFormatError(ValueError):
    """Unsupported or malformed WAV input."""


class MelfFormatError(ValueError):
    """Malformed MELF feature file; message carries the byte offset."""


@dataclass(frozen=True)
class Waveform:
    """Mono audio, amplitudes in [-1, 1]."""

    samples: np.ndarray
    sample_rate_hz: int

    def __post_init__(self):
        samples = np.asarray(self.samples, dtype=np.float64)
        if samples.ndim != 1:
            raise ValueError(f"waveform must be 1-d, got shape {samples.shape}")
        if not np.isfinite(samples).all():
            raise ValueError("waveform contains non-finite samples")
        if self.sample_rate_hz <= 0:
            raise ValueError(f"sample_rate_hz must be positive, got {self.sample_rate_hz}")
        object.__setattr__(self, "samples", samples)

    @property
    def duration_s(self) -> float:
        return len(self.samples) / self.sample_rate_hz


@dataclass(frozen=True)
class MelSpectrogram:
    """T x M matrix of natural-log mel magnitudes."""

    data: np.ndarray
    frame_size_ms: float = 25.0
    frame_shift_ms: float = 10.0

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float32)
        if data.ndim != 2:
            raise ValueError(f"mel data must be 2-d, got shape {data.shape}")
        if not np.isfinite(data).all():
            raise ValueError("mel data contains non-finite entries")
        object.__setattr__(self, "data", data)

    @property
    def n_frames(self) -> int:
        return self.data.shape[0]

    @property
    def n_mels(self) -> int:
        return self.data.shape[1]


@dataclass(frozen=True)
class SpecAugmentPolicy:
    """Mask counts and maximum widths; zero-mask policies are the identity."""

    n_freq_masks: int = 0
    max_freq_width: int = 0
    n_time_masks: int = 0
    max_time_width: int = 0
    mask_value: float = 0.0

    def __post_init__(self):
        for name in ("n_freq_masks", "max_freq_width", "n_time_masks", "max_time_width"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")


def hz_to_mel(hz):
    """HTK mel scale."""
    return 2595.0 * np.log10(1.0 + np.asarray(hz, dtype=np.float64) / 700.0)


def mel_to_hz(mel):
    return 700.0 * (10.0 ** (np.asarray(mel, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(
    sample_rate_hz: int,
    n_fft: int,
    n_mels: int,
    fmin_hz: float = MEL_FMIN_HZ,
    fmax_hz: float = MEL_FMAX_HZ,
) -> np.ndarray:
    """Triangular filters (peak 1.0) on mel-spaced centers, [n_mels, n_fft//2+1]."""
    n_bins = n_fft // 2 + 1
    fft_freqs = np.arange(n_bins) * sample_rate_hz / n_fft
    edges_hz = mel_to_hz(np.linspace(hz_to_mel(fmin_hz), hz_to_mel(fmax_hz), n_mels + 2))
    weights = np.zeros((n_mels, n_bins))
    for i in range(n_mels):
        lo, center, hi = edges_hz[i], edges_hz[i + 1], edges_hz[i + 2]
        up = (fft_freqs - lo) / (center - lo)
        down = (hi - fft_freqs) / (hi - center)
        weights[i] = np.clip(np.minimum(up, down), 0.0, None)
    return weights


def mel_filter_centers_hz(n_mels: int, fmin_hz: float = MEL_FMIN_HZ, fmax_hz: float = MEL_FMAX_HZ) -> np.ndarray:
    """Center frequency of each triangular filter."""
    return mel_to_hz(np.linspace(hz_to_mel(fmin_hz), hz_to_mel(fmax_hz), n_mels + 2))[1:-1]


def frame_count(n_samples: int, window: int, hop: int) -> int:
    """Frames produced without padding: 1 + floor((N - window) / hop)."""
    if n_samples < window:
        raise ValueError(f"waveform of {n_samples} samples is shorter than one {window}-sample window")
    return 1 + (n_samples - window) // hop


def compute_log_mel(
    wave_in: Waveform,
    n_mels: int = 80,
    frame_size_ms: float = 25.0,
    frame_shift_ms: float = 10.0,
) -> MelSpectrogram:
    """Frame, Hann-window, and project a waveform onto log mel magnitudes."""
    window = int(round(wave_in.sample_rate_hz * frame_size_ms / 1000.0))
    hop = int(round(wave_in.sample_rate_hz * frame_shift_ms / 1000.0))
    n = len(wave_in.samples)
    t = frame_count(n, window, hop)

    n_fft = 1
    while n_fft < window:
        n_fft *= 2
    hann = 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(window) / window)
    fbank = mel_filterbank(wave_in.sample_rate_hz, n_fft, n_mels)

    starts = np.arange(t) * hop
    frames = wave_in.samples[starts[:, None] + np.arange(window)] * hann
    mag = np.abs(np.fft.rfft(frames, n=n_fft, axis=1))
    mel = mag @ fbank.T
    data = np.log(np.maximum(mel, LOG_FLOOR))
    return MelSpectrogram(data=data, frame_size_ms=frame_size_ms, frame_shift_ms=frame_shift_ms)


def spec_augment(
    mel: MelSpectrogram, policy: SpecAugmentPolicy, rng: np.random.Generator
) -> MelSpectrogram:
    """Return a masked copy of `mel`; the input is untouched.

    Each mask draws a width uniformly from [0, max_width] (clamped to the
    axis extent) and a start uniformly over the positions where it fits.
    Frequency masks are drawn before time masks, so a given seed always
    produces the same output.
    """
    data = mel.data.copy()
    t, m = data.shape

    def draw(n_masks: int, max_width: int, extent: int):
        spans = []
        max_width = min(max_width, extent)
        for _ in range(n_masks):
            width = int(rng.integers(0, max_width + 1))
            start = int(rng.integers(0, extent - width + 1))
            spans.append((start, width))
        return spans

    if t > 0 and m > 0:
        for start, width in draw(policy.n_freq_masks, policy.max_freq_width, m):
            data[:, start : start + width] = policy.mask_value
        for start, width in draw(policy.n_time_masks, policy.max_time_width, t):
            data[start : start + width, :] = policy.mask_value
    return MelSpectrogram(data=data, frame_size_ms=mel.frame_size_ms, frame_shift_ms=mel.frame_shift_ms)


def read_wav(path) -> Waveform:
    """Read a RIFF PCM-16 mono file; samples scaled by 1/32768."""
    try:
        with wave.open(str(path), "rb") as f:
            n_channels = f.getnchannels()
            sampwidth = f.getsampwidth()
            rate = f.getframerate()
            n_frames = f.getnframes()
            if n_channels != 1:
                raise WavFormatError(f"{path}: expected mono, got {n_channels} channels")
            if sampwidth != 2:
                raise WavFormatError(f"{path}: expected 16-bit PCM, got {8 * sampwidth}-bit")
            raw = f.readframes(n_frames)
    except wave.Error as e:
        raise WavFormatError(f"{path}: {e}") from None
    samples = np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32768.0
    return Waveform(samples=samples, sample_rate_hz=rate)


def write_wav(path, wave_out: Waveform) -> None:
    """Write PCM-16 mono; values clipped to the representable range."""
    pcm = np.clip(np.round(wave_out.samples * 32768.0), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as f:
        f.setnchannels(1)
        f.setsampwidth(2)
        f.setframerate(wave_out.sample_rate_hz)
        f.writeframes(pcm.tobytes())


def write_melf(path, mel: MelSpectrogram) -> None:
    """MELF layout: magic | version u32 | T u32 | M u32 | row-major f32 LE."""
    t, m = mel.data.shape
    with open(path, "wb") as f:
        f.write(MELF_MAGIC)
        f.write(struct.pack("<III", MELF_VERSION, t, m))
        f.write(np.ascontiguousarray(mel.data, dtype="<f4").tobytes())


def read_melf(path) -> MelSpectrogram:
    with open(path, "rb") as f:
        blob = f.read()
    if len(blob) < 16:
        raise MelfFormatError(f"{path}: truncated header, {len(blob)} bytes at offset 0")
    if blob[:4] != MELF_MAGIC:
        raise MelfFormatError(f"{path}: bad magic {blob[:4]!r} at offset 0")
    version, t, m = struct.unpack("<III", blob[4:16])
    if version != MELF_VERSION:
        raise MelfFormatError(f"{path}: unsupported version {version} at offset 4")
    expected = 16 + t * m * 4
    if len(blob) != expected:
        raise MelfFormatError(
            f"{path}: payload ends at offset {len(blob)}, expected {expected}"
        )
    data = np.frombuffer(blob, dtype="<f4", offset=16).reshape(t, m)
    return MelSpectrogram(data=data.copy())
