"""Audio buffers, WAV I/O and the STFT/ISTFT pair used by the codec and the metrics."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.io import wavfile

DEFAULT_SAMPLE_RATE = 16000


class AudioFormatError(ValueError):
    pass


@dataclass
class AudioBuffer:
    """M-channel real signal, stored as an (M, N) float64 array."""

    samples: np.ndarray
    sample_rate: int = DEFAULT_SAMPLE_RATE

    def __post_init__(self):
        x = np.asarray(self.samples, dtype=np.float64)
        if x.ndim == 1:
            x = x[None, :]
        if x.ndim != 2 or x.shape[0] < 1:
            raise ValueError(f"samples must be (channels, samples), got shape {x.shape}")
        if self.sample_rate <= 0:
            raise ValueError("sample_rate must be positive")
        self.samples = x

    @property
    def channels(self) -> int:
        return self.samples.shape[0]

    @property
    def num_samples(self) -> int:
        return self.samples.shape[1]

    @property
    def duration(self) -> float:
        return self.num_samples / self.sample_rate

    def channel(self, i: int) -> "AudioBuffer":
        return AudioBuffer(self.samples[i : i + 1].copy(), self.sample_rate)


@dataclass(frozen=True)
class WindowSpec:
    fft_size: int = 640
    hop_size: int = 320

    def __post_init__(self):
        if self.fft_size <= 0 or self.hop_size <= 0:
            raise ValueError("fft_size and hop_size must be positive")
        if self.fft_size % 2:
            raise ValueError("fft_size must be even")
        if self.fft_size % self.hop_size or 2 * self.hop_size > self.fft_size:
            raise ValueError("hop_size must divide fft_size with at least 50% overlap")

    @property
    def num_bins(self) -> int:
        return self.fft_size // 2 + 1

    @property
    def pad(self) -> int:
        return self.fft_size - self.hop_size

    def window(self) -> np.ndarray:
        # periodic Hann: exact COLA at 50% and 75% overlap
        n = np.arange(self.fft_size)
        return 0.5 - 0.5 * np.cos(2.0 * np.pi * n / self.fft_size)

    def frequencies(self, sample_rate: int) -> np.ndarray:
        return np.arange(self.num_bins) * sample_rate / self.fft_size

    def num_frames(self, length: int) -> int:
        padded = length + 2 * self.pad
        return -(-(padded - self.fft_size) // self.hop_size) + 1


CODEC_WINDOW = WindowSpec(640, 320)
METRIC_WINDOW = WindowSpec(2048, 512)


@dataclass
class SpectrogramTensor:
    """Complex (M, T, F) spectrogram plus what is needed to invert it."""

    values: np.ndarray
    spec: WindowSpec
    length: int
    sample_rate: int = DEFAULT_SAMPLE_RATE
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        v = np.asarray(self.values)
        if v.ndim == 2:
            v = v[None]
        if v.ndim != 3:
            raise ValueError(f"spectrogram must be (channels, frames, bins), got {v.shape}")
        if v.shape[2] != self.spec.num_bins:
            raise ValueError(f"{v.shape[2]} bins inconsistent with fft_size {self.spec.fft_size}")
        if v.shape[1] != self.spec.num_frames(self.length):
            raise ValueError(
                f"{v.shape[1]} frames inconsistent with signal length {self.length}"
            )
        self.values = v.astype(np.complex128, copy=False)

    @property
    def channels(self) -> int:
        return self.values.shape[0]

    @property
    def frames(self) -> int:
        return self.values.shape[1]

    @property
    def bins(self) -> int:
        return self.values.shape[2]

    def select(self, channels) -> "SpectrogramTensor":
        idx = np.atleast_1d(channels)
        return SpectrogramTensor(self.values[idx], self.spec, self.length, self.sample_rate)

    def with_values(self, values: np.ndarray) -> "SpectrogramTensor":
        return SpectrogramTensor(values, self.spec, self.length, self.sample_rate)


def stft(x: AudioBuffer, spec: WindowSpec = CODEC_WINDOW) -> SpectrogramTensor:
    """One-sided STFT with ``fft_size - hop_size`` zeros at both ends.

    The tail is padded further so the last frame is complete; ``istft``
    strips all padding using the stored signal length.
    """
    if not isinstance(x, AudioBuffer):
        x = AudioBuffer(np.asarray(x))
    n = x.num_samples
    if n == 0:
        raise ValueError("cannot transform an empty signal")
    frames = spec.num_frames(n)
    total = spec.fft_size + (frames - 1) * spec.hop_size
    padded = np.zeros((x.channels, total))
    padded[:, spec.pad : spec.pad + n] = x.samples
    blocks = sliding_window_view(padded, spec.fft_size, axis=1)[:, :: spec.hop_size]
    values = np.fft.rfft(blocks * spec.window(), axis=-1)
    return SpectrogramTensor(values, spec, n, x.sample_rate)


def istft(S: SpectrogramTensor) -> AudioBuffer:
    """Weighted overlap-add inverse of :func:`stft` (least-squares ISTFT)."""
    spec = S.spec
    M, T, F = S.values.shape
    if F != spec.num_bins or T != spec.num_frames(S.length):
        raise ValueError("spectrogram dimensions inconsistent with its window spec")
    win = spec.window()
    frames = np.fft.irfft(S.values, n=spec.fft_size, axis=-1) * win
    total = spec.fft_size + (T - 1) * spec.hop_size
    out = np.zeros((M, total))
    norm = np.zeros(total)
    for t in range(T):
        start = t * spec.hop_size
        out[:, start : start + spec.fft_size] += frames[:, t]
        norm[start : start + spec.fft_size] += win**2
    sl = slice(spec.pad, spec.pad + S.length)
    return AudioBuffer(out[:, sl] / norm[sl], S.sample_rate)


def frame_energy(x: np.ndarray, spec: WindowSpec) -> tuple[np.ndarray, np.ndarray]:
    """Per-frame windowed energy in time and in the one-sided spectrum.

    Returns ``(time_energy, spectral_energy)``, both shaped (M, T); they agree
    by Parseval when interior bins are counted twice.
    """
    buf = x if isinstance(x, AudioBuffer) else AudioBuffer(x)
    n = buf.num_samples
    frames = spec.num_frames(n)
    total = spec.fft_size + (frames - 1) * spec.hop_size
    padded = np.zeros((buf.channels, total))
    padded[:, spec.pad : spec.pad + n] = buf.samples
    blocks = sliding_window_view(padded, spec.fft_size, axis=1)[:, :: spec.hop_size] * spec.window()
    time_energy = np.sum(blocks**2, axis=-1)
    X = stft(buf, spec).values
    p = np.abs(X) ** 2
    spectral = (p[..., 0] + p[..., -1] + 2.0 * p[..., 1:-1].sum(-1)) / spec.fft_size
    return time_energy, spectral


def read_audio(path, sample_rate: int | None = DEFAULT_SAMPLE_RATE) -> AudioBuffer:
    """Read a PCM16 or float32 WAV file.

    A file whose rate differs from ``sample_rate`` is rejected (pass
    ``sample_rate=None`` to accept any rate). Nothing is resampled.
    """
    path = Path(path)
    try:
        rate, data = wavfile.read(path)
    except ValueError as err:
        raise AudioFormatError(f"{path}: {err}") from err
    if sample_rate is not None and rate != sample_rate:
        raise AudioFormatError(f"{path}: sample rate {rate} Hz, expected {sample_rate} Hz")
    if data.dtype == np.int16:
        x = data.astype(np.float64) / 32768.0
    elif data.dtype == np.float32:
        x = data.astype(np.float64)
    else:
        raise AudioFormatError(f"{path}: unsupported sample format {data.dtype}")
    if x.size == 0:
        raise AudioFormatError(f"{path}: file has no samples")
    x = x.reshape(len(x), -1).T
    return AudioBuffer(x, rate)


def write_audio(path, x: AudioBuffer, subtype: str = "PCM_16") -> None:
    """Write ``x`` as WAV; ``subtype`` is ``"PCM_16"`` or ``"FLOAT"``."""
    data = x.samples.T
    if subtype == "PCM_16":
        data = np.clip(np.round(data * 32768.0), -32768, 32767).astype("<i2")
    elif subtype == "FLOAT":
        data = data.astype("<f4")
    else:
        raise AudioFormatError(f"unsupported subtype {subtype!r}")
    if data.shape[1] == 1:
        data = data[:, 0]
    wavfile.write(Path(path), x.sample_rate, np.ascontiguousarray(data))
