"""The .spz container: a fixed little-endian header followed by fixed-length
codes, frame-major, each code MSB-first in log2K bits, zero-padded to a byte.

Header layout (struct "<4sBIHHHBHHBBIQ8s", 42 bytes):

    magic "SPZ1" | version u8 | sample_rate u32 | hop u16 | window_len u16 |
    C u16 | c u8 | t u16 | D u16 | M u8 | log2K u8 | num_frames u32 |
    seed u64 | reserved[8]

The first four reserved bytes carry the clip length in samples (u32, 0 when
unknown) so decoding can restore the exact duration; the rest are zero.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .errors import CorruptStream, InvalidArgument
from .quantizer import CodeGrid

MAGIC = b"SPZ1"
VERSION = 1
_HEADER = struct.Struct("<4sBIHHHBHHBBIQ8s")
HEADER_BYTES = _HEADER.size


@dataclass
class SpzHeader:
    sample_rate: int
    hop: int
    window_len: int
    C: int
    c: int
    t: int
    D: int
    M: int
    log2K: int
    num_frames: int
    seed: int
    num_samples: int = 0
    version: int = VERSION

    def __post_init__(self):
        if self.C != self.D * self.c:
            raise InvalidArgument(f"header geometry D*c = {self.D}*{self.c} != C = {self.C}")

    def pack(self) -> bytes:
        reserved = struct.pack("<I", self.num_samples) + bytes(4)
        return _HEADER.pack(MAGIC, self.version, self.sample_rate, self.hop, self.window_len, self.C, self.c,
                            self.t, self.D, self.M, self.log2K, self.num_frames, self.seed, reserved)

    @classmethod
    def unpack(cls, raw: bytes) -> "SpzHeader":
        if len(raw) < HEADER_BYTES:
            raise CorruptStream(f"stream too short for header ({len(raw)} < {HEADER_BYTES} bytes)")
        (magic, version, sr, hop, win, C, c, t, D, M, log2K, frames, seed, reserved) = _HEADER.unpack(raw[:HEADER_BYTES])
        if magic != MAGIC:
            raise CorruptStream(f"bad magic {magic!r}")
        if version != VERSION:
            raise CorruptStream(f"unsupported version {version}")
        try:
            return cls(sr, hop, win, C, c, t, D, M, log2K, frames, seed, struct.unpack("<I", reserved[:4])[0], version)
        except InvalidArgument as exc:
            raise CorruptStream(str(exc)) from exc

    @property
    def payload_bits(self) -> int:
        return self.M * self.log2K * self.num_frames


def payload_bytes(M: int, log2K: int, num_frames: int) -> int:
    return -(-M * log2K * num_frames // 8)


def pack_codes(codes, log2K: int) -> bytes:
    """Frame-major, MSB-first fixed-length packing of an M x T' code grid."""
    grid = np.asarray(getattr(codes, "codes", codes), dtype=np.int64)
    if grid.ndim != 2:
        raise InvalidArgument("codes must be an M x T' grid")
    if not 1 <= log2K <= 32:
        raise InvalidArgument("log2K must be in [1, 32]")
    if grid.size and (grid.min() < 0 or grid.max() >= (1 << log2K)):
        raise InvalidArgument(f"code out of range for {log2K}-bit packing")
    seq = grid.T.reshape(-1).astype(np.uint64)
    shifts = np.arange(log2K - 1, -1, -1, dtype=np.uint64)
    bits = ((seq[:, None] >> shifts[None, :]) & np.uint64(1)).astype(np.uint8).reshape(-1)
    return np.packbits(bits).tobytes()


def unpack_codes(data: bytes, M: int, log2K: int, num_frames: int) -> CodeGrid:
    n_bits = M * log2K * num_frames
    if len(data) != payload_bytes(M, log2K, num_frames):
        raise CorruptStream(f"payload is {len(data)} bytes, expected {payload_bytes(M, log2K, num_frames)}")
    bits = np.unpackbits(np.frombuffer(data, dtype=np.uint8))
    if np.any(bits[n_bits:]):
        raise CorruptStream("non-zero padding bits")
    bits = bits[:n_bits].reshape(-1, log2K).astype(np.uint64)
    weights = np.uint64(1) << np.arange(log2K - 1, -1, -1, dtype=np.uint64)
    vals = (bits * weights[None, :]).sum(axis=1).astype(np.int64)
    return CodeGrid(vals.reshape(num_frames, M).T, 1 << log2K)


def write_spz(path, header: SpzHeader, codes: CodeGrid) -> int:
    if codes.M != header.M or codes.codes.shape[1] != header.num_frames:
        raise InvalidArgument("code grid does not match header geometry")
    blob = header.pack() + pack_codes(codes, header.log2K)
    with open(path, "wb") as f:
        f.write(blob)
    return len(blob)


def read_spz(path) -> tuple[SpzHeader, CodeGrid]:
    with open(path, "rb") as f:
        raw = f.read()
    header = SpzHeader.unpack(raw)
    codes = unpack_codes(raw[HEADER_BYTES:], header.M, header.log2K, header.num_frames)
    return header, codes
