"""Spatial covariance, relative transfer functions and complex ratio filters.

A complex ratio filter (CRF) predicts a non-reference channel from a
(2L+1) x (2K+1) neighbourhood of the reference spectrogram:

    X_m(t, f) ~= sum_{l, k} W_m(l, k) X_ref(t + l, f + k)

Taps are shared by all bins of one frequency band within one block of
frames and are fit by ridge-regularized least squares.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .signal import SpectrogramTensor

log = logging.getLogger(__name__)


def _values(X) -> np.ndarray:
    return X.values if isinstance(X, SpectrogramTensor) else np.asarray(X)


def default_band_map(num_bins: int = 321, num_bands: int = 6) -> np.ndarray:
    """Contiguous bands, larger ones first (321 bins -> 54, 54, 54, 53, 53, 53)."""
    sizes = [len(a) for a in np.array_split(np.arange(num_bins), num_bands)]
    return np.repeat(np.arange(num_bands), sizes)


def band_slices(band_map: np.ndarray) -> list[slice]:
    band_map = np.asarray(band_map)
    out = []
    for b in range(int(band_map.max()) + 1):
        idx = np.nonzero(band_map == b)[0]
        if len(idx) == 0 or idx[-1] - idx[0] + 1 != len(idx):
            raise ValueError(f"band {b} is empty or not contiguous")
        out.append(slice(int(idx[0]), int(idx[-1]) + 1))
    return out


def covariance(X) -> np.ndarray:
    """Per-bin outer product X(t,f) X(t,f)^H, shaped (T, F, M, M)."""
    v = _values(X)
    if v.shape[0] < 2:
        raise ValueError("spatial covariance needs at least two channels")
    return np.einsum("mtf,ntf->tfmn", v, v.conj())


def input_feature(X, ref: int = 0) -> np.ndarray:
    """Real (T, F, 2(M^2 + 1)) feature: [Re Phi, Im Phi, Re X_ref, Im X_ref]."""
    v = _values(X)
    phi = covariance(v)
    T, F, M, _ = phi.shape
    flat = phi.reshape(T, F, M * M)
    return np.concatenate(
        [flat.real, flat.imag, v[ref].real[..., None], v[ref].imag[..., None]], axis=-1
    )


def ref_patches(x_ref: np.ndarray, L: int, K: int) -> np.ndarray:
    """View of shape (T, F, 2L+1, 2K+1) with [t, f, i, j] = X_ref(t+i-L, f+j-K), zero outside."""
    padded = np.pad(x_ref, ((L, L), (K, K)))
    return sliding_window_view(padded, (2 * L + 1, 2 * K + 1))


@dataclass
class CRFTensor:
    taps: np.ndarray  # (M-1, blocks, bands, 2L+1, 2K+1)
    L: int
    K: int
    block_len: int
    band_map: np.ndarray
    num_frames: int
    channels: tuple = ()
    degenerate: np.ndarray | None = None  # (blocks, bands)

    def __post_init__(self):
        self.taps = np.asarray(self.taps, dtype=np.complex128)
        self.band_map = np.asarray(self.band_map)
        n_out, n_blocks, n_bands, nl, nk = self.taps.shape
        if (nl, nk) != (2 * self.L + 1, 2 * self.K + 1):
            raise ValueError("tap grid does not match L, K")
        if n_blocks != num_blocks(self.num_frames, self.block_len):
            raise ValueError("block count does not match num_frames / block_len")
        if n_bands != int(self.band_map.max()) + 1:
            raise ValueError("band count does not match band_map")
        if not np.all(np.isfinite(self.taps)):
            raise ValueError("CRF taps must be finite")
        if not self.channels:
            self.channels = tuple(range(1, n_out + 1))

    @property
    def num_outputs(self) -> int:
        return self.taps.shape[0]

    @property
    def num_blocks(self) -> int:
        return self.taps.shape[1]

    @property
    def num_bands(self) -> int:
        return self.taps.shape[2]


def num_blocks(frames: int, block_len: int) -> int:
    return -(-frames // block_len)


def estimate_crf(X, ref: int = 0, L: int = 4, K: int = 1, block_len: int = 50,
                 band_map=None, lam: float | None = None, rel_reg: float = 1e-3) -> CRFTensor:
    """Least-squares CRFs mapping the reference channel onto every other channel.

    For each (block, band) solves ``(A^H A + lam I) w = A^H y`` with the
    (2L+1)(2K+1) neighbourhood of X_ref as regressors. ``lam=None`` uses
    ``rel_reg * trace(A^H A) / dim``. With ``lam=0`` a singular system is
    flagged degenerate and solved with ``1e-6 * trace / dim`` instead.
    """
    v = _values(X)
    M, T, F = v.shape
    if M < 2:
        raise ValueError("need at least two channels")
    if block_len < 1:
        raise ValueError("block_len must be >= 1")
    if lam is not None and lam < 0:
        raise ValueError("lam must be non-negative")
    band_map = default_band_map(F) if band_map is None else np.asarray(band_map)
    if len(band_map) != F:
        raise ValueError("band_map length must equal the bin count")
    bands = band_slices(band_map)
    others = [m for m in range(M) if m != ref]
    patches = ref_patches(v[ref], L, K)
    dim = (2 * L + 1) * (2 * K + 1)
    nb = num_blocks(T, block_len)
    taps = np.zeros((M - 1, nb, len(bands), 2 * L + 1, 2 * K + 1), dtype=np.complex128)
    degenerate = np.zeros((nb, len(bands)), dtype=bool)
    target = v[others]
    for j in range(nb):
        ts = slice(j * block_len, min(T, (j + 1) * block_len))
        for b, fs in enumerate(bands):
            A = patches[ts, fs].reshape(-1, dim)
            Y = target[:, ts, fs].reshape(M - 1, -1)
            G = A.conj().T @ A
            trace = float(np.real(np.trace(G)))
            if trace == 0.0:
                degenerate[j, b] = True
                continue
            reg = rel_reg * trace / dim if lam is None else lam
            if reg == 0.0 and np.linalg.matrix_rank(G) < dim:
                degenerate[j, b] = True
                reg = 1e-6 * trace / dim
            W = np.linalg.solve(G + reg * np.eye(dim), A.conj().T @ Y.T)
            taps[:, j, b] = W.T.reshape(M - 1, 2 * L + 1, 2 * K + 1)
    if degenerate.any():
        log.warning("CRF estimation degenerate in %d (block, band) cells", int(degenerate.sum()))
    return CRFTensor(taps, L, K, block_len, band_map, T, tuple(others), degenerate)


def apply_crf(W: CRFTensor, x_ref) -> SpectrogramTensor | np.ndarray:
    """Synthesize the M-1 non-reference spectrograms from a reference spectrogram.

    Accepts a one-channel SpectrogramTensor (returned type matches) or a
    bare (T, F) array.
    """
    v = _values(x_ref)
    if v.ndim == 3:
        if v.shape[0] != 1:
            raise ValueError("apply_crf takes a single reference channel")
        v = v[0]
    T, F = v.shape
    if len(W.band_map) != F:
        raise ValueError(f"band_map covers {len(W.band_map)} bins, spectrogram has {F}")
    if num_blocks(T, W.block_len) != W.num_blocks:
        raise ValueError(f"{T} frames do not match {W.num_blocks} blocks of {W.block_len}")
    patches = ref_patches(v, W.L, W.K)
    out = np.zeros((W.num_outputs, T, F), dtype=np.complex128)
    for j in range(W.num_blocks):
        ts = slice(j * W.block_len, min(T, (j + 1) * W.block_len))
        for b, fs in enumerate(band_slices(W.band_map)):
            out[:, ts, fs] = np.einsum("tfij,mij->mtf", patches[ts, fs], W.taps[:, j, b])
    if isinstance(x_ref, SpectrogramTensor):
        return x_ref.with_values(out)
    return out


def assemble_channels(x_ref: np.ndarray, others: np.ndarray, ref: int = 0) -> np.ndarray:
    """Insert the reference spectrogram at position ``ref`` among the synthesized ones."""
    x_ref = np.asarray(x_ref)
    if x_ref.ndim == 2:
        x_ref = x_ref[None]
    return np.concatenate([others[:ref], x_ref, others[ref:]], axis=0)


@dataclass
class RelativeTransferFunction:
    values: np.ndarray  # (F, M)
    valid: np.ndarray  # (F,) False for all-zero bins
    fallback: np.ndarray  # (F,) True where a non-reference entry was used to normalize
    ref: int = 0


def rtf_extract(X, ref: int = 0) -> RelativeTransferFunction:
    """Principal left singular vector of each M x T slice, normalized to the reference mic."""
    v = _values(X)
    M = v.shape[0]
    if M < 2:
        raise ValueError("RTF needs at least two channels")
    R = np.einsum("mtf,ntf->fmn", v, v.conj())
    trace = np.real(np.einsum("fmm->f", R))
    valid = trace > 0
    _, vecs = np.linalg.eigh(R)
    u = vecs[:, :, -1]
    norm = np.linalg.norm(u, axis=1)
    pivot = np.full(len(u), ref)
    weak = np.abs(u[:, ref]) < 1e-8 * norm
    pivot[weak] = np.argmax(np.abs(u[weak]), axis=1)
    a = u / u[np.arange(len(u)), pivot][:, None]
    a[np.arange(len(u)), pivot] = 1.0
    a[~valid] = np.nan
    return RelativeTransferFunction(a, valid, weak & valid, ref)
