"""Two-branch multichannel codec.

Branch 1 codes the reference channel per frame and sub-band; branch 2 codes
least-squares complex ratio filters per (block, band). The decoder applies
the filters to the *decoded* reference to rebuild the other channels.

Bitstream layout (little-endian unless noted)::

    "SCBS" | version u16 | M u8 | sample_rate u32 | config block |
    codebook fingerprint 16 B | frame count u32 | payload

Each payload frame holds the reference section followed, on frames that
start a block, by the spatial section. Index sections are 10-bit (or
log2(codebook_size)-bit) indices packed MSB-first and zero-padded to a
byte boundary. Passthrough / bypass sections hold raw complex128 values.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field

import numpy as np

from . import quantizer as q
from .signal import DEFAULT_SAMPLE_RATE, AudioBuffer, SpectrogramTensor, WindowSpec, istft, stft
from .spatial import CRFTensor, apply_crf, assemble_channels, band_slices, default_band_map, estimate_crf, num_blocks

BITSTREAM_MAGIC = b"SCBS"
BITSTREAM_VERSION = 1
BUNDLE_MAGIC = b"SCCB"
BUNDLE_VERSION = 1
REF_MODES = ("subband_rvq", "passthrough")
SPATIAL_MODES = ("rvq", "bypass")
NO_FINGERPRINT = bytes(16)

_HEAD = struct.Struct("<4sHBI")
_CONFIG = struct.Struct("<HHBBBBBHBBBBHI")
_TAIL = struct.Struct("<16sI")
_BUNDLE_HEAD = struct.Struct("<4sHBBBBHHBB")
_MATRIX_HEAD = struct.Struct("<II")


class BitstreamError(ValueError):
    pass


class CodebookMismatch(ValueError):
    pass


@dataclass
class CodecConfig:
    fft_size: int = 640
    hop_size: int = 320
    bands: int = 6
    rvq_stages: int = 2
    codebook_size: int = 1024
    L: int = 4
    K: int = 1
    block_len: int = 1
    ref_mode: str = "subband_rvq"
    spatial_mode: str = "rvq"
    ref_index: int = 0
    ref_dim: int = 32
    rel_reg: float = 1e-3
    sample_rate: int = DEFAULT_SAMPLE_RATE

    def __post_init__(self):
        if self.ref_mode not in REF_MODES:
            raise ValueError(f"ref_mode must be one of {REF_MODES}")
        if self.spatial_mode not in SPATIAL_MODES:
            raise ValueError(f"spatial_mode must be one of {SPATIAL_MODES}")
        bits = math.log2(self.codebook_size)
        if self.codebook_size < 2 or bits != int(bits):
            raise ValueError("codebook_size must be a power of two")
        if self.block_len < 1 or self.rvq_stages < 1 or self.bands < 1:
            raise ValueError("block_len, rvq_stages and bands must be >= 1")
        if self.bands > self.spec.num_bins:
            raise ValueError("more bands than frequency bins")
        if 2 * (self.spec.num_bins // self.bands) < self.ref_dim:
            raise ValueError("ref_dim exceeds the real dimension of the narrowest band")

    @property
    def spec(self) -> WindowSpec:
        return WindowSpec(self.fft_size, self.hop_size)

    @property
    def bits_per_index(self) -> int:
        return int(math.log2(self.codebook_size))

    @property
    def frames_per_second(self) -> float:
        return self.sample_rate / self.hop_size

    @property
    def band_map(self) -> np.ndarray:
        return default_band_map(self.spec.num_bins, self.bands)

    @property
    def lossless_reference(self) -> bool:
        return self.ref_mode == "passthrough"

    def ref_bits_per_second(self) -> float:
        return self.frames_per_second * self.bands * self.rvq_stages * self.bits_per_index

    def spatial_bits_per_second(self) -> float:
        return self.frames_per_second / self.block_len * self.bands * self.rvq_stages * self.bits_per_index


# --- codebooks ---------------------------------------------------------------


@dataclass
class CodebookSet:
    """Everything the quantized branches need: per-band projections and RVQ coders."""

    num_channels: int
    fft_size: int
    bands: int
    L: int
    K: int
    ref_dim: int
    ref_projections: list = field(default_factory=list)  # (ref_dim, 2 * band_bins) float32
    ref_coders: list = field(default_factory=list)
    spatial_coders: list = field(default_factory=list)

    def __post_init__(self):
        self.ref_projections = [np.asarray(p, dtype=np.float32) for p in self.ref_projections]

    @property
    def codebook_size(self) -> int:
        coders = self.ref_coders or self.spatial_coders
        return coders[0].size if coders else 0

    @property
    def rvq_stages(self) -> int:
        coders = self.ref_coders or self.spatial_coders
        return coders[0].num_stages if coders else 0

    def to_bytes(self) -> bytes:
        head = _BUNDLE_HEAD.pack(
            BUNDLE_MAGIC, BUNDLE_VERSION, self.num_channels, self.bands, self.L, self.K,
            self.fft_size, self.ref_dim, int(bool(self.ref_coders)), int(bool(self.spatial_coders)),
        )
        parts = [head]
        if self.ref_coders:
            for P, coder in zip(self.ref_projections, self.ref_coders):
                parts.append(_MATRIX_HEAD.pack(*P.shape) + P.astype("<f4").tobytes())
                parts.append(q.rvq_to_bytes(coder))
        for coder in self.spatial_coders:
            parts.append(q.rvq_to_bytes(coder))
        return b"".join(parts)

    @classmethod
    def from_bytes(cls, buf: bytes) -> "CodebookSet":
        if len(buf) < _BUNDLE_HEAD.size:
            raise ValueError("truncated codebook bundle")
        magic, version, M, bands, L, K, fft, ref_dim, has_ref, has_sp = _BUNDLE_HEAD.unpack_from(buf)
        if magic != BUNDLE_MAGIC or version != BUNDLE_VERSION:
            raise ValueError("not a codebook bundle")
        pos = _BUNDLE_HEAD.size
        projections, ref_coders, spatial_coders = [], [], []
        if has_ref:
            for _ in range(bands):
                rows, cols = _MATRIX_HEAD.unpack_from(buf, pos)
                pos += _MATRIX_HEAD.size
                P = np.frombuffer(buf, "<f4", rows * cols, pos).reshape(rows, cols).copy()
                pos += rows * cols * 4
                projections.append(P)
                coder, pos = q.rvq_from_bytes(buf, pos)
                ref_coders.append(coder)
        if has_sp:
            for _ in range(bands):
                coder, pos = q.rvq_from_bytes(buf, pos)
                spatial_coders.append(coder)
        if pos != len(buf):
            raise ValueError("trailing bytes in codebook bundle")
        return cls(M, fft, bands, L, K, ref_dim, projections, ref_coders, spatial_coders)

    @property
    def fingerprint(self) -> bytes:
        return q.fingerprint(self.to_bytes())

    def save(self, path) -> None:
        with open(path, "wb") as fh:
            fh.write(self.to_bytes())

    @classmethod
    def load(cls, path) -> "CodebookSet":
        with open(path, "rb") as fh:
            return cls.from_bytes(fh.read())

    def check(self, config: CodecConfig, num_channels: int | None = None) -> None:
        if config.ref_mode == "subband_rvq" and not self.ref_coders:
            raise CodebookMismatch("codebooks carry no reference-branch coders")
        if config.spatial_mode == "rvq" and not self.spatial_coders:
            raise CodebookMismatch("codebooks carry no spatial-branch coders")
        expect = dict(fft_size=config.fft_size, bands=config.bands, L=config.L, K=config.K,
                      codebook_size=config.codebook_size, rvq_stages=config.rvq_stages)
        for key, val in expect.items():
            if getattr(self, key) != val:
                raise CodebookMismatch(f"codebooks trained with {key}={getattr(self, key)}, config has {val}")
        if config.ref_mode == "subband_rvq" and self.ref_dim != config.ref_dim:
            raise CodebookMismatch("reference projection dimension differs from config")
        if num_channels is not None and config.spatial_mode == "rvq" and num_channels != self.num_channels:
            raise CodebookMismatch(f"codebooks trained for {self.num_channels} channels, input has {num_channels}")


# --- branch 1: reference channel -------------------------------------------


def ref_band_vectors(x_ref: np.ndarray, fs: slice) -> np.ndarray:
    """(T, 2 * band_bins) real vectors: [Re bins, Im bins] per frame."""
    band = x_ref[:, fs]
    return np.concatenate([band.real, band.imag], axis=1)


def train_projection(vectors: np.ndarray, dim: int) -> np.ndarray:
    """Top-``dim`` principal directions of the (uncentered) band vectors, as rows."""
    v = np.asarray(vectors, dtype=np.float64)
    C = v.T @ v / max(len(v), 1)
    _, vecs = np.linalg.eigh(C)
    P = vecs[:, ::-1][:, :dim].T
    # sign convention: largest-magnitude coefficient positive
    sign = np.sign(P[np.arange(dim), np.argmax(np.abs(P), axis=1)])
    return (P * sign[:, None]).astype(np.float32)


def encode_reference(x_ref: np.ndarray, config: CodecConfig, codebooks: CodebookSet | None = None) -> np.ndarray:
    """Per-frame, per-band RVQ indices (T, bands, stages); passthrough returns the bins."""
    x_ref = np.asarray(x_ref)
    if x_ref.shape[-1] != config.spec.num_bins:
        raise ValueError(f"reference has {x_ref.shape[-1]} bins, config expects {config.spec.num_bins}")
    if config.ref_mode == "passthrough":
        return x_ref.astype(np.complex128, copy=True)
    T = x_ref.shape[0]
    out = np.empty((T, config.bands, config.rvq_stages), dtype=np.int64)
    for b, fs in enumerate(band_slices(config.band_map)):
        P = codebooks.ref_projections[b].astype(np.float64)
        out[:, b] = codebooks.ref_coders[b].encode(ref_band_vectors(x_ref, fs) @ P.T)
    return out


def decode_reference(payload: np.ndarray, config: CodecConfig, codebooks: CodebookSet | None = None) -> np.ndarray:
    if config.ref_mode == "passthrough":
        return np.asarray(payload, dtype=np.complex128)
    T = payload.shape[0]
    x = np.zeros((T, config.spec.num_bins), dtype=np.complex128)
    for b, fs in enumerate(band_slices(config.band_map)):
        P = codebooks.ref_projections[b].astype(np.float64)
        v = codebooks.ref_coders[b].decode(payload[:, b]) @ P
        n = fs.stop - fs.start
        x[:, fs] = v[:, :n] + 1j * v[:, n:]
    return x


# --- branch 2: spatial -------------------------------------------------------


def crf_vectors(W: CRFTensor) -> np.ndarray:
    """(blocks, bands, D) real vectors [Re taps | Im taps] over all output channels."""
    t = np.moveaxis(W.taps, 0, 2)  # blocks, bands, M-1, 2L+1, 2K+1
    flat = t.reshape(t.shape[0], t.shape[1], -1)
    return np.concatenate([flat.real, flat.imag], axis=-1)


def crf_from_vectors(v: np.ndarray, like: dict) -> CRFTensor:
    nb, nbands, D = v.shape
    half = D // 2
    c = (v[..., :half] + 1j * v[..., half:]).reshape(
        nb, nbands, like["outputs"], 2 * like["L"] + 1, 2 * like["K"] + 1
    )
    return CRFTensor(np.moveaxis(c, 2, 0), like["L"], like["K"], like["block_len"],
                     like["band_map"], like["num_frames"], like.get("channels", ()))


def analyze_spatial(X: np.ndarray, config: CodecConfig) -> CRFTensor:
    return estimate_crf(X, config.ref_index, config.L, config.K, config.block_len,
                        config.band_map, rel_reg=config.rel_reg)


def encode_spatial(X, config: CodecConfig, codebooks: CodebookSet | None = None):
    """Spatial payload: (blocks, bands, stages) indices, or raw taps in bypass mode."""
    v = X.values if isinstance(X, SpectrogramTensor) else np.asarray(X)
    W = analyze_spatial(v, config)
    if config.spatial_mode == "bypass":
        return W.taps.copy()
    vec = crf_vectors(W)
    out = np.empty((W.num_blocks, config.bands, config.rvq_stages), dtype=np.int64)
    for b in range(config.bands):
        out[:, b] = codebooks.spatial_coders[b].encode(vec[:, b])
    return out


def decode_spatial(payload: np.ndarray, config: CodecConfig, num_channels: int, num_frames: int,
                   codebooks: CodebookSet | None = None) -> CRFTensor:
    others = tuple(m for m in range(num_channels) if m != config.ref_index)
    if config.spatial_mode == "bypass":
        return CRFTensor(payload, config.L, config.K, config.block_len, config.band_map, num_frames, others)
    vec = np.stack([codebooks.spatial_coders[b].decode(payload[:, b]) for b in range(config.bands)], axis=1)
    like = dict(outputs=num_channels - 1, L=config.L, K=config.K, block_len=config.block_len,
                band_map=config.band_map, num_frames=num_frames, channels=others)
    return crf_from_vectors(vec, like)


# --- bitstream ---------------------------------------------------------------


@dataclass
class Bitstream:
    config: CodecConfig
    num_channels: int
    num_samples: int
    fingerprint: bytes
    ref_payload: np.ndarray  # (T, bands, S) int or (T, F) complex
    spatial_payload: np.ndarray  # (blocks, bands, S) int or (M-1, blocks, bands, 2L+1, 2K+1) complex

    @property
    def num_frames(self) -> int:
        return self.ref_payload.shape[0]

    def frame_layout(self) -> tuple[int, int]:
        """Bytes per frame of the reference section and of a spatial section."""
        c = self.config
        if c.ref_mode == "subband_rvq":
            ref = -(-c.bands * c.rvq_stages * c.bits_per_index // 8)
        else:
            ref = c.spec.num_bins * 16
        if c.spatial_mode == "rvq":
            sp = -(-c.bands * c.rvq_stages * c.bits_per_index // 8)
        else:
            sp = (self.num_channels - 1) * c.bands * (2 * c.L + 1) * (2 * c.K + 1) * 16
        return ref, sp

    def payload_bits(self) -> tuple[int, int]:
        ref, sp = self.frame_layout()
        return 8 * ref * self.num_frames, 8 * sp * num_blocks(self.num_frames, self.config.block_len)

    def payload_rate(self) -> dict:
        """Payload bits per second of each branch, measured over the coded frames."""
        seconds = self.num_frames * self.config.hop_size / self.config.sample_rate
        ref, sp = self.payload_bits()
        return {"reference": ref / seconds, "spatial": sp / seconds, "total": (ref + sp) / seconds}

    def header_bytes(self) -> bytes:
        c = self.config
        flags = 1 if c.lossless_reference else 0
        return (
            _HEAD.pack(BITSTREAM_MAGIC, BITSTREAM_VERSION, self.num_channels, c.sample_rate)
            + _CONFIG.pack(
                c.fft_size, c.hop_size, c.bands, c.rvq_stages, c.bits_per_index, c.L, c.K, c.block_len,
                REF_MODES.index(c.ref_mode), SPATIAL_MODES.index(c.spatial_mode), c.ref_index, flags,
                c.ref_dim, self.num_samples,
            )
            + _TAIL.pack(self.fingerprint, self.num_frames)
        )

    def to_bytes(self) -> bytes:
        c = self.config
        parts = [self.header_bytes()]
        for t in range(self.num_frames):
            if c.ref_mode == "subband_rvq":
                parts.append(pack_indices(self.ref_payload[t].ravel(), c.bits_per_index))
            else:
                parts.append(self.ref_payload[t].astype("<c16").tobytes())
            if t % c.block_len == 0:
                j = t // c.block_len
                if c.spatial_mode == "rvq":
                    parts.append(pack_indices(self.spatial_payload[j].ravel(), c.bits_per_index))
                else:
                    parts.append(self.spatial_payload[:, j].astype("<c16").tobytes())
        return b"".join(parts)

    @classmethod
    def from_bytes(cls, buf: bytes) -> "Bitstream":
        hsize = _HEAD.size + _CONFIG.size + _TAIL.size
        if len(buf) < hsize:
            raise BitstreamError("truncated header")
        magic, version, M, rate = _HEAD.unpack_from(buf, 0)
        if magic != BITSTREAM_MAGIC:
            raise BitstreamError(f"bad magic {magic!r}")
        if version != BITSTREAM_VERSION:
            raise BitstreamError(f"unsupported bitstream version {version}")
        (fft, hop, bands, stages, bits, L, K, block_len, ref_mode, sp_mode, ref_index, _flags,
         ref_dim, n_samples) = _CONFIG.unpack_from(buf, _HEAD.size)
        fp, T = _TAIL.unpack_from(buf, _HEAD.size + _CONFIG.size)
        config = CodecConfig(fft, hop, bands, stages, 1 << bits, L, K, block_len, REF_MODES[ref_mode],
                             SPATIAL_MODES[sp_mode], ref_index, ref_dim, sample_rate=rate)
        bs = cls(config, M, n_samples, fp, np.empty((T, 0)), np.empty((0,)))
        ref_bytes, sp_bytes = bs.frame_layout()
        pos = hsize
        n_idx = bands * stages
        ref_list, sp_list = [], []
        for t in range(T):
            size = ref_bytes + (sp_bytes if t % block_len == 0 else 0)
            if len(buf) - pos < size:
                last = t - 1
                raise BitstreamError(
                    f"payload truncated: {t} of {T} frames recovered (last complete frame {last})"
                )
            chunk = buf[pos : pos + ref_bytes]
            if config.ref_mode == "subband_rvq":
                ref_list.append(unpack_indices(chunk, n_idx, bits).reshape(bands, stages))
            else:
                ref_list.append(np.frombuffer(chunk, "<c16").copy())
            if t % block_len == 0:
                chunk = buf[pos + ref_bytes : pos + size]
                if config.spatial_mode == "rvq":
                    sp_list.append(unpack_indices(chunk, n_idx, bits).reshape(bands, stages))
                else:
                    sp_list.append(np.frombuffer(chunk, "<c16").reshape(M - 1, bands, 2 * L + 1, 2 * K + 1))
            pos += size
        if pos != len(buf):
            raise BitstreamError(f"{len(buf) - pos} trailing bytes after the last frame")
        bs.ref_payload = np.stack(ref_list) if ref_list else bs.ref_payload
        if config.spatial_mode == "rvq":
            bs.spatial_payload = np.stack(sp_list)
        else:
            bs.spatial_payload = np.stack(sp_list, axis=1)
        return bs


def pack_indices(indices: np.ndarray, bits: int) -> bytes:
    """Pack unsigned ints MSB-first into ``bits`` bits each, zero-padded to whole bytes."""
    idx = np.asarray(indices, dtype=np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= 1 << bits):
        raise ValueError(f"index outside [0, {1 << bits})")
    shifts = np.arange(bits - 1, -1, -1)
    bitarr = ((idx[:, None] >> shifts) & 1).astype(np.uint8).ravel()
    return np.packbits(bitarr).tobytes()


def unpack_indices(data: bytes, count: int, bits: int) -> np.ndarray:
    bitarr = np.unpackbits(np.frombuffer(data, dtype=np.uint8))[: count * bits].reshape(count, bits)
    weights = 1 << np.arange(bits - 1, -1, -1)
    return bitarr.astype(np.int64) @ weights


# --- top level ---------------------------------------------------------------


def _required_codebooks(config: CodecConfig) -> bool:
    return config.ref_mode == "subband_rvq" or config.spatial_mode == "rvq"


def encode(x: AudioBuffer, config: CodecConfig | None = None, codebooks: CodebookSet | None = None) -> Bitstream:
    config = config or CodecConfig()
    if x.sample_rate != config.sample_rate:
        raise ValueError(f"input at {x.sample_rate} Hz, codec runs at {config.sample_rate} Hz")
    if x.channels < 2:
        raise ValueError("the codec needs a multichannel input")
    if not 0 <= config.ref_index < x.channels:
        raise ValueError("ref_index outside the channel range")
    if _required_codebooks(config):
        if codebooks is None:
            raise CodebookMismatch(f"{config.ref_mode}/{config.spatial_mode} mode needs codebooks")
        codebooks.check(config, x.channels)
    X = stft(x, config.spec).values
    ref_payload = encode_reference(X[config.ref_index], config, codebooks)
    spatial_payload = encode_spatial(X, config, codebooks)
    fp = codebooks.fingerprint if _required_codebooks(config) else NO_FINGERPRINT
    return Bitstream(config, x.channels, x.num_samples, fp, ref_payload, spatial_payload)


def decode(bs: Bitstream, codebooks: CodebookSet | None = None) -> AudioBuffer:
    config = bs.config
    if _required_codebooks(config):
        if codebooks is None:
            raise CodebookMismatch("this bitstream needs codebooks to decode")
        if codebooks.fingerprint != bs.fingerprint:
            raise CodebookMismatch("codebook fingerprint does not match the bitstream header")
        codebooks.check(config, bs.num_channels)
    x_ref = decode_reference(bs.ref_payload, config, codebooks)
    W = decode_spatial(bs.spatial_payload, config, bs.num_channels, bs.num_frames, codebooks)
    X = assemble_channels(x_ref, apply_crf(W, x_ref), config.ref_index)
    S = SpectrogramTensor(X, config.spec, bs.num_samples, config.sample_rate)
    return istft(S)


def oracle_reconstruction(x: AudioBuffer, config: CodecConfig | None = None) -> AudioBuffer:
    """Least-squares CRFs applied to the original reference, without any coding."""
    config = config or CodecConfig(ref_mode="passthrough", spatial_mode="bypass")
    S = stft(x, config.spec)
    W = analyze_spatial(S.values, config)
    X = assemble_channels(S.values[config.ref_index], apply_crf(W, S.values[config.ref_index]), config.ref_index)
    return istft(S.with_values(X))


def replicate_reference(x: AudioBuffer, ref: int = 0) -> AudioBuffer:
    """Baseline: the reference channel copied to every output channel."""
    return AudioBuffer(np.repeat(x.samples[ref : ref + 1], x.channels, axis=0), x.sample_rate)


# --- training ----------------------------------------------------------------


def collect_training_vectors(signals, config: CodecConfig) -> tuple[list, list]:
    """Per-band reference vectors and spatial CRF vectors from a list of AudioBuffers."""
    bands = band_slices(config.band_map)
    ref_vecs = [[] for _ in bands]
    sp_vecs = [[] for _ in bands]
    for x in signals:
        X = stft(x, config.spec).values
        for b, fs in enumerate(bands):
            ref_vecs[b].append(ref_band_vectors(X[config.ref_index], fs))
        vec = crf_vectors(analyze_spatial(X, config))
        for b in range(len(bands)):
            sp_vecs[b].append(vec[:, b])
    return [np.concatenate(v) for v in ref_vecs], [np.concatenate(v) for v in sp_vecs]


def train_codebooks(signals, config: CodecConfig | None = None, seed: int = 0, max_iters: int = 100,
                    tol: float = 1e-6) -> CodebookSet:
    """Fit reference projections plus one RVQ coder per band for each branch."""
    config = config or CodecConfig()
    signals = list(signals)
    if not signals:
        raise ValueError("no training signals")
    M = signals[0].channels
    if any(x.channels != M for x in signals):
        raise ValueError("all training signals must have the same channel count")
    ref_vecs, sp_vecs = collect_training_vectors(signals, config)
    seeds = np.random.SeedSequence(seed).spawn(2 * config.bands)
    projections, ref_coders, sp_coders = [], [], []
    for b in range(config.bands):
        P = train_projection(ref_vecs[b], config.ref_dim)
        projections.append(P)
        y = ref_vecs[b] @ P.astype(np.float64).T
        ref_coders.append(q.train_rvq(y, config.rvq_stages, config.codebook_size, seeds[b], max_iters, tol))
        sp_coders.append(q.train_rvq(sp_vecs[b], config.rvq_stages, config.codebook_size,
                                     seeds[config.bands + b], max_iters, tol))
    return CodebookSet(M, config.fft_size, config.bands, config.L, config.K, config.ref_dim,
                       projections, ref_coders, sp_coders)
