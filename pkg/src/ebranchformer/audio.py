"""Waveform to 80-dim log-Mel features, plus SpecAugment masking.

Frames use a 32 ms Hann window with a 10 ms hop and no centering, so the
frame count is ``1 + floor((num_samples - window) / hop)``.  Filterbank
energies are floored at 1e-10 before the natural log.
"""

from __future__ import annotations

import wave
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import ConfigError, Rng

LOG_FLOOR = 1e-10
NUM_MELS = 80
WINDOW_MS = 32
HOP_MS = 10


@dataclass
class Waveform:
    samples: np.ndarray  # floats in [-1, 1]
    sample_rate: int = 16000

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.sample_rate <= 0:
            raise ConfigError(f"sample_rate must be positive, got {self.sample_rate}")


@dataclass
class MelSpectrogram:
    frames: np.ndarray  # (T, 80) natural-log energies
    frame_shift_ms: int = HOP_MS
    frame_length_ms: int = WINDOW_MS

    @property
    def num_frames(self) -> int:
        return self.frames.shape[0]


@dataclass
class SpecAugmentConfig:
    num_freq_masks: int = 2
    freq_param: int = 27
    num_time_masks: int = 10
    time_param: float = 0.05

    def __post_init__(self):
        if self.freq_param > NUM_MELS:
            raise ConfigError(f"freq_param={self.freq_param} exceeds {NUM_MELS} mel bins")
        if not 0.0 <= self.time_param <= 1.0:
            raise ConfigError(f"time_param={self.time_param} outside [0, 1]")


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(n_mels: int, n_fft: int, sample_rate: int) -> np.ndarray:
    """Triangular filters (peak 1) uniform on the mel scale, 0 Hz to Nyquist.

    Returns an ``(n_mels, n_fft // 2 + 1)`` weight matrix.
    """
    nyquist = sample_rate / 2.0
    mel_points = np.linspace(hz_to_mel(0.0), hz_to_mel(nyquist), n_mels + 2)
    hz_points = mel_to_hz(mel_points)
    bin_freqs = np.arange(n_fft // 2 + 1) * sample_rate / n_fft
    fb = np.zeros((n_mels, bin_freqs.size))
    for m in range(n_mels):
        lo, center, hi = hz_points[m], hz_points[m + 1], hz_points[m + 2]
        rising = (bin_freqs - lo) / (center - lo)
        falling = (hi - bin_freqs) / (hi - center)
        fb[m] = np.maximum(0.0, np.minimum(rising, falling))
    return fb


def filterbank_center_freqs(n_mels: int = NUM_MELS, sample_rate: int = 16000) -> np.ndarray:
    mel_points = np.linspace(hz_to_mel(0.0), hz_to_mel(sample_rate / 2.0), n_mels + 2)
    return mel_to_hz(mel_points[1:-1])


def log_mel(w: Waveform, n_mels: int = NUM_MELS) -> MelSpectrogram:
    sr = w.sample_rate
    window = sr * WINDOW_MS // 1000
    hop = sr * HOP_MS // 1000
    if w.samples.size < window:
        raise ConfigError(
            f"waveform of {w.samples.size} samples is shorter than one {WINDOW_MS} ms window ({window} samples)"
        )
    n_fft = 1
    while n_fft < window:
        n_fft *= 2
    frames = sliding_window_view(w.samples, window)[::hop]
    windowed = frames * np.hanning(window)
    spectrum = np.abs(np.fft.rfft(windowed, n=n_fft, axis=-1))
    fb = mel_filterbank(n_mels, n_fft, sr)
    energies = spectrum @ fb.T
    return MelSpectrogram(frames=np.log(np.maximum(energies, LOG_FLOOR)))


def spec_augment(m: MelSpectrogram, cfg: SpecAugmentConfig, rng: Rng) -> MelSpectrogram:
    """Zero out random frequency bands and time spans; the input is untouched.

    Width draws are inclusive-uniform: ``f ~ U[0, F]`` per frequency mask and
    ``w ~ U[0, floor(p*T)]`` per time mask.  Masks are sampled independently
    and may overlap.
    """
    out = m.frames.copy()
    t, n_mels = out.shape
    for _ in range(cfg.num_freq_masks):
        f = int(rng.integers(0, cfg.freq_param + 1))
        start = int(rng.integers(0, n_mels - f + 1))
        out[:, start : start + f] = 0.0
    max_width = int(np.floor(cfg.time_param * t))
    for _ in range(cfg.num_time_masks):
        width = int(rng.integers(0, max_width + 1))
        start = int(rng.integers(0, t - width + 1))
        out[start : start + width, :] = 0.0
    return MelSpectrogram(frames=out, frame_shift_ms=m.frame_shift_ms, frame_length_ms=m.frame_length_ms)


def read_wav(path) -> Waveform:
    """Read a mono 16-bit PCM RIFF file."""
    with wave.open(str(path), "rb") as f:
        if f.getnchannels() != 1:
            raise ConfigError(f"{path}: expected mono audio, got {f.getnchannels()} channels")
        if f.getsampwidth() != 2:
            raise ConfigError(f"{path}: expected 16-bit PCM, got sample width {f.getsampwidth()}")
        raw = f.readframes(f.getnframes())
        sr = f.getframerate()
    samples = np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32768.0
    return Waveform(samples=samples, sample_rate=sr)


def write_wav(path, w: Waveform) -> None:
    data = np.clip(w.samples, -1.0, 1.0)
    pcm = (data * 32767.0).astype("<i2")
    with wave.open(str(path), "wb") as f:
        f.setnchannels(1)
        f.setsampwidth(2)
        f.setframerate(w.sample_rate)
        f.writeframes(pcm.tobytes())
