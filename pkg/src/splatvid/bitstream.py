"""Serialized container for quantized splat video (.gsv files).

Layout (all fields little-endian, fixed width):

    magic       4 bytes  b"GSVC"
    version     u16      (currently 1)
    flags       u8       bit 0: body is zlib-compressed
    width       u32
    height      u32
    frame_count u32
    n_splats    u32      rate-control N
    chol_bits   u8
    rvq_stages  u8
    rvq_size    u32
    commitment  f32
    finetune    u32
    tile_size   u16
    cutoff      f32      support radius in sigmas (codec constant)
    kf_count    u32
    kf_table    kf_count * (u32 frame_index, u64 body_offset)
    body        frame records, offsets relative to body start

Each frame record is a u32 payload length followed by the payload, so a
reader can skip or resynchronize and any truncation is detectable.  The
key-frame table allows decoding to start at any key-frame without
touching earlier records.
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass

import numpy as np

from .codec import QuantizedFrame, reconstruct_frame
from .quantize import QuantConfig
from .raster import TILE_SIZE, render
from .splats import CUTOFF_SIGMA, FRAME_I, FRAME_P

MAGIC = b"GSVC"
VERSION = 1
_FLAG_ZLIB = 1

_KIND_CODE = {FRAME_I: 0, FRAME_P: 1}
_CODE_KIND = {0: FRAME_I, 1: FRAME_P}


class BitstreamError(ValueError):
    """Base for malformed-stream diagnostics; carries a byte offset."""

    def __init__(self, message: str, offset: int | None = None):
        self.offset = offset
        if offset is not None:
            message = f"{message} (at byte {offset})"
        super().__init__(message)


class BadMagicError(BitstreamError):
    pass


class UnsupportedVersionError(BitstreamError):
    pass


class TruncatedStreamError(BitstreamError):
    pass


class CorruptStreamError(BitstreamError):
    pass


@dataclass
class StreamHeader:
    width: int
    height: int
    frame_count: int
    n_splats: int
    quant: QuantConfig
    tile_size: int = TILE_SIZE
    cutoff: float = CUTOFF_SIGMA
    keyframes: list = None          # 1-based frame indices
    zlib_body: bool = False

    def __post_init__(self):
        if self.keyframes is None:
            self.keyframes = [1]


def pack_bits(values: np.ndarray, bitwidth: int) -> bytes:
    """Pack unsigned integers < 2^bitwidth tightly, MSB-first per value."""
    values = np.ascontiguousarray(values, dtype=np.uint16).reshape(-1)
    if values.size == 0:
        return b""
    shifts = np.arange(bitwidth - 1, -1, -1, dtype=np.uint16)
    bits = ((values[:, None] >> shifts[None, :]) & 1).astype(np.uint8)
    return np.packbits(bits.reshape(-1)).tobytes()


def unpack_bits(data: bytes, count: int, bitwidth: int) -> np.ndarray:
    """Inverse of pack_bits for ``count`` values."""
    need = (count * bitwidth + 7) // 8
    if len(data) < need:
        raise TruncatedStreamError("bit-packed plane shorter than declared")
    bits = np.unpackbits(np.frombuffer(data[:need], dtype=np.uint8))
    bits = bits[:count * bitwidth].reshape(count, bitwidth).astype(np.uint16)
    weights = (1 << np.arange(bitwidth - 1, -1, -1)).astype(np.uint16)
    return (bits * weights).sum(axis=1).astype(np.uint16)


class _Reader:
    """Bounds-checked sequential reader with offset-bearing errors."""

    def __init__(self, data: bytes, base_offset: int = 0):
        self.data = data
        self.pos = 0
        self.base = base_offset

    @property
    def offset(self) -> int:
        return self.base + self.pos

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise TruncatedStreamError(
                f"needed {n} bytes, {len(self.data) - self.pos} remain",
                self.offset)
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack("<" + fmt, self.take(struct.calcsize("<" + fmt)))


def _bits_for(size: int) -> int:
    return max(int(size - 1).bit_length(), 1)


def _serialize_frame(qf: QuantizedFrame, quant: QuantConfig) -> bytes:
    idx_bits = _bits_for(quant.rvq_codebook_size)
    parts = [struct.pack("<BI", _KIND_CODE[qf.kind], qf.n)]
    parts.append(qf.chol_scale.astype("<f2").tobytes())
    parts.append(qf.chol_offset.astype("<f2").tobytes())
    parts.append(qf.codebooks.astype("<f2").tobytes())
    if qf.kind == FRAME_I:
        parts.append(qf.positions16.astype("<f2").tobytes())
        parts.append(pack_bits(qf.chol_codes, quant.cholesky_bits))
        parts.append(pack_bits(qf.color_indices, idx_bits))
    else:
        n_inh = qf.n_inherited
        parts.append(struct.pack("<I", n_inh))
        parts.append(np.packbits(qf.inherited_mask.astype(np.uint8)).tobytes())
        parts.append(qf.slot_map.astype("<u4").tobytes())
        parts.append(qf.pos_delta16.astype("<f2").tobytes())
        parts.append(pack_bits(qf.chol_delta_codes, quant.cholesky_bits))
        parts.append(pack_bits(qf.color_delta_indices, idx_bits))
        parts.append(qf.injected_pos16.astype("<f2").tobytes())
        parts.append(qf.injected_chol16.astype("<f2").tobytes())
        parts.append(qf.injected_color16.astype("<f2").tobytes())
    payload = b"".join(parts)
    return struct.pack("<I", len(payload)) + payload


def _f16_array(reader: _Reader, shape) -> np.ndarray:
    count = int(np.prod(shape))
    raw = reader.take(count * 2)
    return np.frombuffer(raw, dtype="<f2").reshape(shape)


def _parse_frame(reader: _Reader, header: StreamHeader) -> QuantizedFrame:
    quant = header.quant
    idx_bits = _bits_for(quant.rvq_codebook_size)
    m, b = quant.rvq_stages, quant.rvq_codebook_size
    (length,) = reader.unpack("I")
    start = reader.pos
    if reader.pos + length > len(reader.data):
        raise TruncatedStreamError(
            f"frame record declares {length} bytes", reader.offset)
    kind_code, n = reader.unpack("BI")
    if kind_code not in _CODE_KIND:
        raise CorruptStreamError(f"unknown frame kind {kind_code}",
                                 reader.offset)
    kind = _CODE_KIND[kind_code]
    chol_scale = _f16_array(reader, (3,))
    chol_offset = _f16_array(reader, (3,))
    codebooks = _f16_array(reader, (m, b, 3))
    if kind == FRAME_I:
        positions16 = _f16_array(reader, (n, 2))
        chol_codes = unpack_bits(reader.take((n * 3 * quant.cholesky_bits + 7) // 8),
                                 n * 3, quant.cholesky_bits).reshape(n, 3)
        color_indices = unpack_bits(reader.take((n * m * idx_bits + 7) // 8),
                                    n * m, idx_bits).reshape(n, m)
        qf = QuantizedFrame(kind=kind, n=n, chol_scale=chol_scale,
                            chol_offset=chol_offset, codebooks=codebooks,
                            positions16=positions16, chol_codes=chol_codes,
                            color_indices=color_indices)
    else:
        (n_inh,) = reader.unpack("I")
        if n_inh > n:
            raise CorruptStreamError(
                f"inherited count {n_inh} exceeds frame size {n}",
                reader.offset)
        mask_bytes = reader.take((n + 7) // 8)
        mask = np.unpackbits(np.frombuffer(mask_bytes, dtype=np.uint8))[:n] \
            .astype(bool)
        if int(mask.sum()) != n_inh:
            raise CorruptStreamError("inherited mask population mismatch",
                                     reader.offset)
        slot_map = np.frombuffer(reader.take(n_inh * 4), dtype="<u4")
        pos_delta16 = _f16_array(reader, (n_inh, 2))
        chol_delta_codes = unpack_bits(
            reader.take((n_inh * 3 * quant.cholesky_bits + 7) // 8),
            n_inh * 3, quant.cholesky_bits).reshape(n_inh, 3)
        color_delta_indices = unpack_bits(
            reader.take((n_inh * m * idx_bits + 7) // 8),
            n_inh * m, idx_bits).reshape(n_inh, m)
        n_inj = n - n_inh
        injected_pos16 = _f16_array(reader, (n_inj, 2))
        injected_chol16 = _f16_array(reader, (n_inj, 3))
        injected_color16 = _f16_array(reader, (n_inj, 3))
        qf = QuantizedFrame(kind=kind, n=n, chol_scale=chol_scale,
                            chol_offset=chol_offset, codebooks=codebooks,
                            inherited_mask=mask, slot_map=slot_map,
                            pos_delta16=pos_delta16,
                            chol_delta_codes=chol_delta_codes,
                            color_delta_indices=color_delta_indices,
                            injected_pos16=injected_pos16,
                            injected_chol16=injected_chol16,
                            injected_color16=injected_color16)
    consumed = reader.pos - start
    if consumed != length:
        raise CorruptStreamError(
            f"frame record length {length} but parsed {consumed} bytes",
            reader.offset)
    if not np.all(np.isfinite(qf.codebooks.astype(np.float64))):
        raise CorruptStreamError("non-finite codebook entry", reader.offset)
    return qf


def frame_plane_sizes(qf: QuantizedFrame, quant: QuantConfig) -> dict:
    """Byte counts per attribute plane; sums to the serialized record size."""
    idx_bits = _bits_for(quant.rvq_codebook_size)
    m, b = quant.rvq_stages, quant.rvq_codebook_size
    sizes = {"positions": 0, "cholesky": 12, "colors": 0,
             "codebooks": m * b * 3 * 2, "bookkeeping": 4 + 5}
    if qf.kind == FRAME_I:
        n = qf.n
        sizes["positions"] += n * 4
        sizes["cholesky"] += (n * 3 * quant.cholesky_bits + 7) // 8
        sizes["colors"] += (n * m * idx_bits + 7) // 8
    else:
        n_inh = qf.n_inherited
        n_inj = qf.n - n_inh
        sizes["bookkeeping"] += 4 + (qf.n + 7) // 8 + n_inh * 4
        sizes["positions"] += n_inh * 4 + n_inj * 4
        sizes["cholesky"] += (n_inh * 3 * quant.cholesky_bits + 7) // 8 + n_inj * 6
        sizes["colors"] += (n_inh * m * idx_bits + 7) // 8 + n_inj * 6
    return sizes


_HEADER_FIXED = "<4sHBIIIIBBIfIHfI"


def header_size(header: StreamHeader) -> int:
    return struct.calcsize(_HEADER_FIXED) + 12 * len(header.keyframes)


def write_bitstream(qframes: list, header: StreamHeader) -> bytes:
    """Serialize frames behind a header with a key-frame offset table."""
    records = []
    offsets = {}
    pos = 0
    for t, qf in enumerate(qframes, start=1):
        rec = _serialize_frame(qf, header.quant)
        if t in header.keyframes:
            offsets[t] = pos
        records.append(rec)
        pos += len(rec)
    body = b"".join(records)
    for t in header.keyframes:
        if qframes and t not in offsets:
            raise ValueError(f"key-frame {t} outside the frame list")
    if header.zlib_body:
        body = zlib.compress(body, 6)
    q = header.quant
    head = struct.pack(
        _HEADER_FIXED, MAGIC, VERSION,
        _FLAG_ZLIB if header.zlib_body else 0,
        header.width, header.height, header.frame_count, header.n_splats,
        q.cholesky_bits, q.rvq_stages, q.rvq_codebook_size,
        q.commitment_weight, q.finetune_iterations,
        header.tile_size, header.cutoff, len(header.keyframes))
    table = b"".join(struct.pack("<IQ", t, offsets.get(t, 0))
                     for t in header.keyframes)
    return head + table + body


def read_header(data: bytes) -> tuple[StreamHeader, dict, int]:
    """Parse the header; returns (header, keyframe offsets, body start)."""
    reader = _Reader(data)
    fixed_size = struct.calcsize(_HEADER_FIXED)
    if len(data) < 6:
        raise TruncatedStreamError("stream shorter than magic and version", 0)
    if data[:4] != MAGIC:
        raise BadMagicError(f"bad magic {data[:4]!r}", 0)
    version = struct.unpack_from("<H", data, 4)[0]
    if version != VERSION:
        raise UnsupportedVersionError(f"unsupported version {version}", 4)
    if len(data) < fixed_size:
        raise TruncatedStreamError("incomplete header", len(data))
    (_, _, flags, width, height, frame_count, n_splats, chol_bits, stages,
     book_size, commitment, finetune, tile_size, cutoff, kf_count) = \
        struct.unpack_from(_HEADER_FIXED, data, 0)
    reader.pos = fixed_size
    try:
        quant = QuantConfig(chol_bits, stages, book_size, commitment, finetune)
    except ValueError as exc:
        raise CorruptStreamError(f"invalid quantization parameters: {exc}",
                                 8) from exc
    offsets = {}
    kfs = []
    for _ in range(kf_count):
        t, off = reader.unpack("IQ")
        offsets[t] = off
        kfs.append(t)
    if not kfs or kfs[0] != 1:
        raise CorruptStreamError("key-frame table must start at frame 1",
                                 fixed_size)
    header = StreamHeader(width, height, frame_count, n_splats, quant,
                          tile_size, cutoff, kfs, bool(flags & _FLAG_ZLIB))
    return header, offsets, reader.pos


def _body_bytes(data: bytes, header: StreamHeader, body_start: int) -> bytes:
    body = data[body_start:]
    if header.zlib_body:
        try:
            body = zlib.decompress(body)
        except zlib.error as exc:
            raise TruncatedStreamError(f"compressed body unreadable: {exc}",
                                       body_start) from exc
    return body


def read_bitstream(data: bytes) -> tuple[StreamHeader, list]:
    """Parse a complete stream into its header and quantized frames."""
    header, _, body_start = read_header(data)
    body = _body_bytes(data, header, body_start)
    reader = _Reader(body, base_offset=body_start if not header.zlib_body else 0)
    qframes = []
    for _ in range(header.frame_count):
        qframes.append(_parse_frame(reader, header))
    if reader.pos != len(body):
        raise CorruptStreamError(
            f"{len(body) - reader.pos} trailing bytes after last frame",
            reader.offset)
    return header, qframes


def decode_frames(header: StreamHeader, qframes: list, start: int = 1,
                  workers: int = 1) -> list:
    """Render decoded images for frames start..T (1-based start)."""
    images = []
    prev = None
    for t, qf in enumerate(qframes, start=start):
        if qf.kind == FRAME_P and prev is None:
            raise CorruptStreamError(
                f"frame {t} is predicted but has no reference")
        try:
            frame = reconstruct_frame(qf, prev)
        except ValueError as exc:
            raise CorruptStreamError(f"frame {t}: {exc}") from exc
        prev = frame
        images.append(render(frame, header.width, header.height,
                             workers=workers, tile_size=header.tile_size))
    return images


def decode_sequence(data: bytes, workers: int = 1) -> tuple[StreamHeader, list]:
    """Decode a full stream to a list of float32 images."""
    header, qframes = read_bitstream(data)
    return header, decode_frames(header, qframes, start=1, workers=workers)


def decode_from_keyframe(data: bytes, keyframe: int,
                         workers: int = 1) -> tuple[StreamHeader, list]:
    """Decode starting at a key-frame using the offset table only."""
    header, offsets, body_start = read_header(data)
    if keyframe not in offsets:
        raise ValueError(
            f"frame {keyframe} is not a key-frame; valid: "
            f"{sorted(offsets)}")
    body = _body_bytes(data, header, body_start)
    reader = _Reader(body, base_offset=body_start if not header.zlib_body else 0)
    reader.pos = offsets[keyframe]
    qframes = []
    for _ in range(keyframe, header.frame_count + 1):
        qframes.append(_parse_frame(reader, header))
    return header, decode_frames(header, qframes, start=keyframe,
                                 workers=workers)


def bits_per_pixel(stream: bytes, header: StreamHeader) -> float:
    return len(stream) * 8.0 / (header.width * header.height
                                * header.frame_count)
