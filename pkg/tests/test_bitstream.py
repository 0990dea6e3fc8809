import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from sfxzip.bitstream import (
    HEADER_BYTES, SpzHeader, pack_codes, payload_bytes, read_spz, unpack_codes, write_spz,
)
from sfxzip.errors import CorruptStream, InvalidArgument
from sfxzip.quantizer import CodeGrid


def test_hand_packing():
    assert pack_codes(np.array([[3], [1], [2]]), 2) == bytes([0xD8])
    assert unpack_codes(bytes([0xD8]), 3, 2, 1).codes[:, 0].tolist() == [3, 1, 2]


def test_ultra_low_rate_payload():
    blob = pack_codes(np.zeros((8, 1), dtype=int), 12)
    assert blob == bytes(12)


def test_frame_major_order():
    grid = np.array([[1, 0], [0, 1]])  # stage x frame
    # frame 0: stages (1, 0); frame 1: stages (0, 1) -> bits 1 0 0 1 -> 0x90
    assert pack_codes(grid, 1) == bytes([0x90])


def test_rejects_out_of_range():
    with pytest.raises(InvalidArgument):
        pack_codes(np.array([[4]]), 2)
    with pytest.raises(InvalidArgument):
        pack_codes(np.array([[-1]]), 2)


@settings(max_examples=300, deadline=None)
@given(M=st.integers(1, 32), log2K=st.integers(1, 16), frames=st.integers(0, 64), seed=st.integers(0, 2**32 - 1))
def test_pack_round_trip_fuzz(M, log2K, frames, seed):
    codes = np.random.default_rng(seed).integers(0, 1 << log2K, size=(M, frames))
    blob = pack_codes(codes, log2K)
    assert len(blob) == payload_bytes(M, log2K, frames)
    back = unpack_codes(blob, M, log2K, frames)
    assert np.array_equal(back.codes, codes)


def test_corrupt_streams():
    blob = pack_codes(np.array([[3], [1], [2]]), 2)
    with pytest.raises(CorruptStream):
        unpack_codes(blob[:-1], 3, 2, 1)
    with pytest.raises(CorruptStream):
        unpack_codes(blob + b"\x00", 3, 2, 1)
    # 6 payload bits -> 2 padding bits
    with pytest.raises(CorruptStream):
        unpack_codes(bytes([0xD9]), 3, 2, 1)


def _header(**kw):
    h = dict(sample_rate=12800, hop=128, window_len=256, C=128, c=2, t=100, D=64, M=25, log2K=12,
             num_frames=5, seed=123456789012, num_samples=64000)
    h.update(kw)
    return SpzHeader(**h)


def test_header_round_trip_and_layout():
    h = _header()
    raw = h.pack()
    assert len(raw) == HEADER_BYTES == 42
    assert raw[:4] == b"SPZ1" and raw[4] == 1
    assert int.from_bytes(raw[5:9], "little") == 12800
    assert SpzHeader.unpack(raw) == h
    with pytest.raises(CorruptStream):
        SpzHeader.unpack(b"XPZ1" + raw[4:])
    with pytest.raises(CorruptStream):
        SpzHeader.unpack(raw[:4] + bytes([2]) + raw[5:])
    with pytest.raises(CorruptStream):
        SpzHeader.unpack(raw[:20])
    with pytest.raises(InvalidArgument):
        _header(D=60)


def test_file_round_trip(tmp_path):
    h = _header()
    codes = CodeGrid(np.random.default_rng(0).integers(0, 4096, size=(25, 5)), 4096)
    size = write_spz(tmp_path / "a.spz", h, codes)
    assert size == HEADER_BYTES + 188  # 1500 bits padded to a byte
    h2, c2 = read_spz(tmp_path / "a.spz")
    assert h2 == h and np.array_equal(c2.codes, codes.codes)
    raw = (tmp_path / "a.spz").read_bytes()
    (tmp_path / "t.spz").write_bytes(raw[:-3])
    with pytest.raises(CorruptStream):
        read_spz(tmp_path / "t.spz")
