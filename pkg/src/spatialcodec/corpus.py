"""Synthetic speech-like utterances for desk-scale experiments.

Voiced segments are glottal pulse trains with a drifting pitch, shaped by
three formant resonators; unvoiced segments are filtered noise bursts;
short pauses separate syllables.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
from scipy.signal import lfilter

from .signal import DEFAULT_SAMPLE_RATE, AudioBuffer, write_audio

# (F1, F2, F3) in Hz for a handful of vowels
VOWELS = np.array([
    [730, 1090, 2440],
    [270, 2290, 3010],
    [530, 1840, 2480],
    [570, 840, 2410],
    [300, 870, 2240],
    [660, 1720, 2410],
])


def _resonator(freq: float, bw: float, fs: int) -> tuple[np.ndarray, np.ndarray]:
    r = np.exp(-np.pi * bw / fs)
    a = [1.0, -2.0 * r * np.cos(2 * np.pi * freq / fs), r * r]
    return np.array([1.0 - r]), np.array(a)


def _voiced(rng: np.random.Generator, n: int, fs: int) -> np.ndarray:
    f0 = rng.uniform(95.0, 220.0) * (1.0 + 0.15 * np.sin(2 * np.pi * rng.uniform(1, 4) * np.arange(n) / fs))
    phase = np.cumsum(f0 / fs)
    pulses = np.diff(np.floor(phase), prepend=0.0)
    src = lfilter([1.0], [1.0, -0.97], pulses) + 0.02 * rng.normal(size=n)
    y = np.zeros(n)
    for f, bw, g in zip(VOWELS[rng.integers(len(VOWELS))], (80, 100, 140), (1.0, 0.6, 0.3)):
        b, a = _resonator(f * rng.uniform(0.92, 1.08), bw, fs)
        y += g * lfilter(b, a, src)
    return y * np.hanning(n)


def _unvoiced(rng: np.random.Generator, n: int, fs: int) -> np.ndarray:
    b, a = _resonator(rng.uniform(2500, 6000), 1500, fs)
    return 0.3 * lfilter(b, a, rng.normal(size=n)) * np.hanning(n)


def synth_utterance(rng: np.random.Generator, duration: float = 3.0, fs: int = DEFAULT_SAMPLE_RATE) -> np.ndarray:
    n_total = int(duration * fs)
    out = np.zeros(n_total)
    pos = int(rng.uniform(0.05, 0.2) * fs)
    while pos < n_total:
        n = int(rng.uniform(0.08, 0.3) * fs)
        seg = _voiced(rng, n, fs) if rng.random() < 0.75 else _unvoiced(rng, n, fs)
        end = min(n_total, pos + n)
        out[pos:end] += seg[: end - pos]
        pos = end + int(rng.uniform(0.0, 0.12) * fs)
    peak = np.max(np.abs(out))
    return out * (0.5 / peak) if peak > 0 else out


def make_corpus(out_dir, n: int, seed: int = 0, duration=(2.0, 4.0), fs: int = DEFAULT_SAMPLE_RATE) -> list[Path]:
    """Write ``n`` mono PCM16 utterances to ``out_dir``; returns their paths."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for i in range(n):
        rng = np.random.default_rng([seed, i])
        y = synth_utterance(rng, float(rng.uniform(*duration)), fs)
        p = out_dir / f"spk{i:04d}.wav"
        write_audio(p, AudioBuffer(y, fs))
        paths.append(p)
    return paths
