"""Spatial and spectral fidelity metrics for multichannel reconstructions.

All metrics run on a 2048-point Hann STFT with 512-sample hop. Directions
are angles to the array axis in [0, 180] degrees; steering vectors are
far-field and phase-referenced to the array center.
"""

from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass

import numpy as np

from .roomsim import SPEED_OF_SOUND, ArrayGeometry
from .signal import DEFAULT_SAMPLE_RATE, METRIC_WINDOW, AudioBuffer, WindowSpec, istft, stft
from .spatial import rtf_extract

SNR_CLAMP_DB = 100.0
MUSIC_BAND_HZ = (300.0, 3500.0)
FEATURE_FREQS_HZ = (1000.0, 3000.0)


def beam_directions(B: int = 50) -> np.ndarray:
    """theta_b = arccos(1 - 2b/B) for b = 1..B, in radians (uniform in cos theta)."""
    b = np.arange(1, B + 1)
    return np.arccos(np.clip(1.0 - 2.0 * b / B, -1.0, 1.0))


def steering_vectors(array: ArrayGeometry, thetas, freqs, c: float = SPEED_OF_SOUND) -> np.ndarray:
    """(n_theta, F, M) plane-wave responses exp(j 2 pi f p_m cos(theta) / c)."""
    p = array.axial_positions()
    cos = np.cos(np.atleast_1d(thetas))
    phase = 2.0 * np.pi * np.asarray(freqs)[None, :, None] * p[None, None, :] * cos[:, None, None] / c
    return np.exp(1j * phase)


def diffuse_coherence(array: ArrayGeometry, freqs, c: float = SPEED_OF_SOUND) -> np.ndarray:
    """(F, M, M) spherically isotropic coherence sin(2 pi f d / c) / (2 pi f d / c)."""
    d = np.linalg.norm(array.positions[:, None] - array.positions[None], axis=-1)
    return np.sinc(2.0 * np.asarray(freqs)[:, None, None] * d[None] / c)


def superdirective_weights(array: ArrayGeometry, thetas, freqs, delta: float = 1e-2,
                           c: float = SPEED_OF_SOUND) -> np.ndarray:
    """MVDR weights against diffuse noise with diagonal loading, shaped (n_theta, F, M)."""
    if delta <= 0:
        raise ValueError("diagonal loading must be positive")
    G = diffuse_coherence(array, freqs, c) + delta * np.eye(array.num_mics)
    d = steering_vectors(array, thetas, freqs, c)
    Gi_d = np.linalg.solve(G[None], d[..., None])[..., 0]
    denom = np.einsum("bfm,bfm->bf", d.conj(), Gi_d)
    return Gi_d / denom[..., None]


@dataclass
class BeamformerBank:
    directions: np.ndarray  # (B,) radians
    weights: np.ndarray  # (B, F, M)
    diagonal_loading: float
    spec: WindowSpec
    sample_rate: int
    array: ArrayGeometry

    @property
    def B(self) -> int:
        return len(self.directions)

    @property
    def frequencies(self) -> np.ndarray:
        return self.spec.frequencies(self.sample_rate)


def design_beam_bank(array: ArrayGeometry, B: int = 50, delta: float = 1e-2, spec: WindowSpec = METRIC_WINDOW,
                     sample_rate: int = DEFAULT_SAMPLE_RATE, c: float = SPEED_OF_SOUND) -> BeamformerBank:
    thetas = beam_directions(B)
    freqs = spec.frequencies(sample_rate)
    w = superdirective_weights(array, thetas, freqs, delta, c)
    return BeamformerBank(thetas, w, delta, spec, sample_rate, array)


def spatial_feature(x: AudioBuffer, bank: BeamformerBank) -> np.ndarray:
    """(B, F) time-averaged beam output magnitudes |w_b(f)^H X(t, f)|."""
    if x.channels != bank.weights.shape[-1]:
        raise ValueError(f"{x.channels} channels, beam bank built for {bank.weights.shape[-1]}")
    X = stft(x, bank.spec).values
    Y = np.einsum("bfm,mtf->btf", bank.weights.conj(), X)
    return np.abs(Y).mean(axis=1)


def _align(x: AudioBuffer, y: AudioBuffer, hop: int) -> tuple[AudioBuffer, AudioBuffer]:
    if abs(x.num_samples - y.num_samples) > hop:
        raise ValueError(f"lengths {x.num_samples} and {y.num_samples} differ by more than one frame")
    n = min(x.num_samples, y.num_samples)
    return AudioBuffer(x.samples[:, :n], x.sample_rate), AudioBuffer(y.samples[:, :n], y.sample_rate)


def feature_similarity(S: np.ndarray, S_hat: np.ndarray) -> float:
    """Mean over frequencies of the cosine between beamspace feature columns."""
    ns = np.linalg.norm(S, axis=0)
    nh = np.linalg.norm(S_hat, axis=0)
    ok = (ns > 0) & (nh > 0)
    if not ok.any():
        raise ValueError("no frequency with a non-zero spatial feature")
    cos = np.sum(S[:, ok] * S_hat[:, ok], axis=0) / (ns[ok] * nh[ok])
    return float(np.mean(cos))


def spatial_similarity(x: AudioBuffer, x_hat: AudioBuffer, bank: BeamformerBank) -> float:
    x, x_hat = _align(x, x_hat, bank.spec.hop_size)
    return feature_similarity(spatial_feature(x, bank), spatial_feature(x_hat, bank))


def rtf_angle(a: np.ndarray, a_hat: np.ndarray) -> np.ndarray:
    """Per-frequency arccos Re(a_hat^H a / (|a_hat| |a|)) for (F, M) RTFs."""
    inner = np.einsum("fm,fm->f", a_hat.conj(), a)
    cos = np.real(inner) / (np.linalg.norm(a_hat, axis=1) * np.linalg.norm(a, axis=1))
    return np.arccos(np.clip(cos, -1.0, 1.0))


def rtf_error(x: AudioBuffer, x_hat: AudioBuffer, ref: int = 0, spec: WindowSpec = METRIC_WINDOW) -> float:
    if x.channels < 2:
        raise ValueError("RTF error needs at least two channels")
    x, x_hat = _align(x, x_hat, spec.hop_size)
    a = rtf_extract(stft(x, spec), ref)
    a_hat = rtf_extract(stft(x_hat, spec), ref)
    ok = a.valid & a_hat.valid
    if not ok.any():
        raise ValueError("no frequency bin with energy in both signals")
    return float(np.mean(rtf_angle(a.values[ok], a_hat.values[ok])))


def music_pseudospectrum(R: np.ndarray, freqs, array: ArrayGeometry, grid_deg, num_sources: int = 1,
                         c: float = SPEED_OF_SOUND) -> np.ndarray:
    """(F, G) MUSIC pseudospectrum 1 / ||E_n^H d(theta, f)||^2 from (F, M, M) covariances."""
    _, vecs = np.linalg.eigh(R)
    En = vecs[:, :, : R.shape[-1] - num_sources]
    d = steering_vectors(array, np.radians(grid_deg), freqs, c)  # G, F, M
    proj = np.einsum("fmk,gfm->fgk", En.conj(), d)
    den = np.sum(np.abs(proj) ** 2, axis=-1)
    return 1.0 / np.maximum(den, 1e-12)


def music_doa(x: AudioBuffer, array: ArrayGeometry, grid_step: float = 1.0, freq_range=MUSIC_BAND_HZ,
              spec: WindowSpec = METRIC_WINDOW, c: float = SPEED_OF_SOUND) -> float:
    """Single-source MUSIC with incoherent averaging of per-bin pseudospectra."""
    if x.channels != array.num_mics:
        raise ValueError("channel count does not match the array")
    X = stft(x, spec).values
    if X.shape[1] < x.channels:
        raise ValueError(f"{X.shape[1]} frames are too few for a {x.channels}-channel covariance")
    freqs = spec.frequencies(x.sample_rate)
    sel = (freqs >= freq_range[0]) & (freqs <= freq_range[1])
    Xs = X[:, :, sel]
    R = np.einsum("mtf,ntf->fmn", Xs, Xs.conj()) / X.shape[1]
    grid = np.arange(0.0, 180.0 + 1e-9, grid_step)
    P = music_pseudospectrum(R, freqs[sel], array, grid, c=c)
    return float(grid[np.argmax(P.mean(axis=0))])


def doa_error(theta_hat: float, theta: float) -> float:
    return abs(float(theta_hat) - float(theta))


def snr(x, x_hat) -> float:
    """10 log10(||x||^2 / ||x - x_hat||^2) in dB, averaged over channels, clamped at 100 dB."""
    a = x.samples if isinstance(x, AudioBuffer) else np.atleast_2d(np.asarray(x, dtype=np.float64))
    b = x_hat.samples if isinstance(x_hat, AudioBuffer) else np.atleast_2d(np.asarray(x_hat, dtype=np.float64))
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    out = []
    for s, e in zip(a, a - b):
        ps = float(np.sum(s**2))
        pe = float(np.sum(e**2))
        if ps == 0:
            raise ValueError("reference signal is all zeros")
        out.append(SNR_CLAMP_DB if pe < 1e-20 * ps else min(SNR_CLAMP_DB, 10.0 * math.log10(ps / pe)))
    return float(np.mean(out))


def beamform_to(x: AudioBuffer, theta_deg: float, array: ArrayGeometry, delta: float = 1e-2,
                spec: WindowSpec = METRIC_WINDOW, c: float = SPEED_OF_SOUND) -> AudioBuffer:
    """Superdirective beam towards ``theta_deg``, back to a mono waveform."""
    if not 0.0 <= theta_deg <= 180.0:
        raise ValueError("direction must be within [0, 180] degrees")
    S = stft(x, spec)
    w = superdirective_weights(array, [math.radians(theta_deg)], spec.frequencies(x.sample_rate), delta, c)[0]
    Y = np.einsum("fm,mtf->tf", w.conj(), S.values)
    return istft(S.with_values(Y[None]))


def beamformed_snr(x: AudioBuffer, x_hat: AudioBuffer, theta_deg: float, array: ArrayGeometry,
                   delta: float = 1e-2) -> float:
    x, x_hat = _align(x, x_hat, METRIC_WINDOW.hop_size)
    return snr(beamform_to(x, theta_deg, array, delta), beamform_to(x_hat, theta_deg, array, delta))


@dataclass
class MetricReport:
    utt_id: str
    spatial_similarity: float
    rtf_error: float
    doa_error: float
    snr: float
    beamformed_snr: float


REPORT_COLUMNS = ("id", "spatial_similarity", "rtf_error", "doa_error", "snr", "beamformed_snr")


def evaluate_pair(utt_id: str, x: AudioBuffer, x_hat: AudioBuffer, array: ArrayGeometry,
                  bank: BeamformerBank | None = None, doa_true: float | None = None,
                  ref: int = 0, grid_step: float = 1.0) -> MetricReport:
    """Every metric for one utterance.

    DoA error compares MUSIC on the reconstruction with MUSIC on the
    original; the beam for beamformed SNR points at ``doa_true`` when given.
    """
    bank = bank or design_beam_bank(array, sample_rate=x.sample_rate)
    x, x_hat = _align(x, x_hat, bank.spec.hop_size)
    theta_x = music_doa(x, array, grid_step)
    theta_hat = music_doa(x_hat, array, grid_step)
    beam = doa_true if doa_true is not None else theta_x
    return MetricReport(
        utt_id,
        spatial_similarity(x, x_hat, bank),
        rtf_error(x, x_hat, ref),
        doa_error(theta_hat, theta_x),
        snr(x, x_hat),
        beamformed_snr(x, x_hat, beam, array),
    )


def summarize(reports) -> MetricReport:
    rows = [asdict(r) for r in reports]
    means = {k: float(np.mean([r[k] for r in rows])) for k in rows[0] if k != "utt_id"}
    return MetricReport("mean", **means)


def write_report_csv(path, reports) -> None:
    reports = list(reports)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(REPORT_COLUMNS)
        for r in reports + ([summarize(reports)] if reports else []):
            w.writerow([r.utt_id] + [f"{v:.6f}" for v in list(asdict(r).values())[1:]])


def read_report_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def feature_rows(utt_id: str, label: str, feature: np.ndarray, bank: BeamformerBank,
                 freqs_hz=FEATURE_FREQS_HZ) -> list[list]:
    """CSV rows (id, signal, freq_hz, beam, theta_deg, value) at the bins nearest ``freqs_hz``."""
    grid = bank.frequencies
    rows = []
    for f in freqs_hz:
        k = int(np.argmin(np.abs(grid - f)))
        for b in range(bank.B):
            rows.append([utt_id, label, f"{grid[k]:.3f}", b + 1, f"{math.degrees(bank.directions[b]):.4f}",
                         f"{feature[b, k]:.9g}"])
    return rows


FEATURE_COLUMNS = ("id", "signal", "freq_hz", "beam", "theta_deg", "value")
