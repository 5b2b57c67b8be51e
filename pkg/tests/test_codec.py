import dataclasses

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from spatialcodec import codec
from spatialcodec.codec import (
    Bitstream,
    BitstreamError,
    CodebookMismatch,
    CodebookSet,
    CodecConfig,
    decode,
    decode_reference,
    encode,
    encode_reference,
    oracle_reconstruction,
    pack_indices,
    train_codebooks,
    unpack_indices,
)
from spatialcodec.metrics import snr
from spatialcodec.signal import AudioBuffer, stft
from spatialcodec.spatial import band_slices, estimate_crf

SMALL = CodecConfig(codebook_size=64)
LOSSLESS = CodecConfig(ref_mode="passthrough", spatial_mode="bypass")
TRAIN = slice(0, 14)
HELD_OUT = slice(14, 20)


@pytest.fixture(scope="module")
def small_books(desk_set):
    return train_codebooks(desk_set.signals[TRAIN], SMALL, seed=3, max_iters=30)


def non_ref_snr(x, y, ref=0):
    keep = [m for m in range(x.channels) if m != ref]
    return snr(x.samples[keep], y.samples[keep])


class TestConfig:
    def test_defaults(self):
        c = CodecConfig()
        assert (c.fft_size, c.hop_size, c.bands, c.rvq_stages, c.codebook_size, c.L, c.K) == (
            640, 320, 6, 2, 1024, 4, 1)
        assert c.frames_per_second == 50
        assert c.bits_per_index == 10
        assert c.ref_bits_per_second() == 50 * 6 * 2 * 10 == 6000
        assert c.spatial_bits_per_second() == 6000

    def test_block_len_rate(self):
        assert CodecConfig(block_len=10).spatial_bits_per_second() == 600

    def test_band_partition_covers_bins_once(self):
        covered = np.concatenate([np.arange(s.start, s.stop) for s in band_slices(CodecConfig().band_map)])
        assert covered.tolist() == list(range(321))

    @pytest.mark.parametrize("kw", [dict(codebook_size=1000), dict(ref_mode="x"), dict(spatial_mode="y"),
                                    dict(block_len=0), dict(ref_dim=200)])
    def test_invalid(self, kw):
        with pytest.raises(ValueError):
            CodecConfig(**kw)


class TestIndexPacking:
    def test_msb_first(self):
        assert pack_indices(np.array([1023, 0]), 10) == bytes([0xFF, 0xC0, 0x00])
        assert pack_indices(np.array([1, 2]), 10) == bytes([0x00, 0x40, 0x20])

    def test_out_of_range(self):
        with pytest.raises(ValueError):
            pack_indices(np.array([1024]), 10)

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.integers(0, 1023), min_size=0, max_size=40))
    def test_round_trip(self, values):
        data = pack_indices(np.array(values, dtype=np.int64), 10)
        assert len(data) == -(-10 * len(values) // 8)
        assert unpack_indices(data, len(values), 10).tolist() == values


class TestLosslessModes:
    def test_reference_passthrough_bit_exact(self, desk_set):
        X = stft(desk_set.signals[0], LOSSLESS.spec).values
        assert np.array_equal(decode_reference(encode_reference(X[0], LOSSLESS), LOSSLESS), X[0])

    def test_bypass_decodes_ls_estimate(self, desk_set):
        x = desk_set.signals[1]
        bs = Bitstream.from_bytes(encode(x, LOSSLESS).to_bytes())
        X = stft(x, LOSSLESS.spec).values
        W = estimate_crf(X, 0, 4, 1, LOSSLESS.block_len, LOSSLESS.band_map, rel_reg=LOSSLESS.rel_reg)
        assert np.array_equal(bs.spatial_payload, W.taps)

    def test_equals_oracle_pipeline(self, desk_set):
        x = desk_set.signals[2]
        bs = encode(x, LOSSLESS)
        assert bs.config.lossless_reference
        assert bs.fingerprint == codec.NO_FINGERPRINT
        y = decode(Bitstream.from_bytes(bs.to_bytes()))
        o = oracle_reconstruction(x, LOSSLESS)
        assert np.max(np.abs(y.samples - o.samples)) <= 1e-6 * np.max(np.abs(o.samples))
        np.testing.assert_allclose(y.samples[0], x.samples[0], atol=1e-10)


class TestQuantizedCodec:
    def test_deterministic_bytes(self, desk_set, small_books):
        x = desk_set.signals[15]
        assert encode(x, SMALL, small_books).to_bytes() == encode(x, SMALL, small_books).to_bytes()

    def test_serialize_round_trip(self, desk_set, small_books):
        data = encode(desk_set.signals[16], SMALL, small_books).to_bytes()
        assert Bitstream.from_bytes(data).to_bytes() == data

    def test_header_fields(self, desk_set, small_books):
        x = desk_set.signals[16]
        bs = encode(x, SMALL, small_books)
        data = bs.to_bytes()
        assert data[:4] == b"SCBS"
        assert int.from_bytes(data[4:6], "little") == 1
        assert data[6] == 8
        assert int.from_bytes(data[7:11], "little") == 16000
        assert bs.fingerprint == small_books.fingerprint
        assert bs.num_frames == SMALL.spec.num_frames(x.num_samples)

    def test_shape_and_duration(self, desk_set, small_books):
        x = desk_set.signals[17]
        y = decode(encode(x, SMALL, small_books), small_books)
        assert y.channels == x.channels
        assert y.num_samples == x.num_samples

    def test_payload_counts(self, desk_set, small_books):
        cfg = dataclasses.replace(SMALL, block_len=10)
        books = train_codebooks(desk_set.signals[:4], cfg, seed=1, max_iters=5)
        bs = encode(desk_set.signals[18], cfg, books)
        T = bs.num_frames
        assert bs.ref_payload.shape == (T, 6, 2)
        assert bs.spatial_payload.shape == (-(-T // 10), 6, 2)
        ref_bits, sp_bits = bs.payload_bits()
        assert len(bs.to_bytes()) - len(bs.header_bytes()) == (ref_bits + sp_bits) // 8

    def test_truncated_stream(self, desk_set, small_books):
        data = encode(desk_set.signals[15], SMALL, small_books).to_bytes()
        hdr = len(Bitstream.from_bytes(data).header_bytes())
        frame = (len(data) - hdr) // Bitstream.from_bytes(data).num_frames
        cut = data[: hdr + 3 * frame + frame // 2]
        with pytest.raises(BitstreamError, match="last complete frame 2"):
            Bitstream.from_bytes(cut)
        with pytest.raises(BitstreamError):
            Bitstream.from_bytes(data + b"\x00")
        with pytest.raises(BitstreamError):
            Bitstream.from_bytes(data[:10])

    def test_fingerprint_mismatch(self, desk_set, small_books):
        other = train_codebooks(desk_set.signals[:3], SMALL, seed=99, max_iters=3)
        bs = encode(desk_set.signals[15], SMALL, small_books)
        with pytest.raises(CodebookMismatch):
            decode(bs, other)
        with pytest.raises(CodebookMismatch):
            decode(bs, None)

    def test_missing_codebooks_and_channel_mismatch(self, desk_set, small_books):
        x = desk_set.signals[15]
        with pytest.raises(CodebookMismatch):
            encode(x, SMALL, None)
        with pytest.raises(CodebookMismatch):
            encode(AudioBuffer(x.samples[:4]), SMALL, small_books)
        with pytest.raises(CodebookMismatch):
            encode(x, CodecConfig(codebook_size=128), small_books)

    def test_branch_isolation(self, desk_set, small_books):
        bs = encode(desk_set.signals[19], SMALL, small_books)
        y = decode(bs, small_books)
        bs.spatial_payload = np.zeros_like(bs.spatial_payload)
        z = decode(bs, small_books)
        assert np.array_equal(y.samples[0], z.samples[0])
        assert not np.array_equal(y.samples[1:], z.samples[1:])

    def test_reference_snr_positive_held_out(self, desk_set, small_books):
        cfg = dataclasses.replace(SMALL, spatial_mode="bypass")
        for x in desk_set.signals[HELD_OUT]:
            y = decode(encode(x, cfg, small_books), small_books)
            assert snr(x.samples[:1], y.samples[:1]) > 0.0

    def test_quantized_not_better_than_bypass(self, desk_set, small_books):
        quant = CodecConfig(codebook_size=64, ref_mode="passthrough")
        for x in desk_set.signals[HELD_OUT]:
            q = decode(encode(x, quant, small_books), small_books)
            b = decode(encode(x, LOSSLESS))
            assert non_ref_snr(x, q) <= non_ref_snr(x, b)

    def test_codebook_bundle_round_trip(self, tmp_path, small_books):
        small_books.save(tmp_path / "b.sccb")
        back = CodebookSet.load(tmp_path / "b.sccb")
        assert back.to_bytes() == small_books.to_bytes()
        assert back.fingerprint == small_books.fingerprint
        assert (back.bands, back.rvq_stages, back.codebook_size) == (6, 2, 64)

    def test_training_deterministic(self, desk_set):
        a = train_codebooks(desk_set.signals[:3], SMALL, seed=4, max_iters=5)
        b = train_codebooks(desk_set.signals[:3], SMALL, seed=4, max_iters=5)
        assert a.to_bytes() == b.to_bytes()
        with pytest.raises(ValueError):
            train_codebooks([], SMALL)
