"""Parcel framing: argument splitting, bounded header frames, digests.

A parcel is one nonzero-copy chunk plus an ordered list of zero-copy
chunks.  The nonzero-copy chunk self-describes the action id, the small
arguments, and the sizes of the zero-copy chunks.

Wire layouts (little-endian, fixed-width, no varints):

    nonzero-copy chunk:
        u64 action_id | u32 n_small | n_small x (u32 len, bytes)
        | u32 n_zc | n_zc x u64 zc_len

    header frame:
        u32 magic 0x50504C42 | u32 tag | u32 source_rank | u8 device_index
        | u8 flags | u16 num_zc | u64 nzc_size
        | num_zc x u64 zc_len | nzc bytes iff flags bit 0 set

The header frame never exceeds HEADER_BOUND bytes, so a receiver can
pre-post fixed-size buffers for it.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from hashlib import blake2b
from typing import Optional, Sequence, Union

Buffer = Union[bytes, bytearray, memoryview]

HEADER_MAGIC = 0x50504C42
HEADER_BOUND = 4096
MAX_ZC = 255

DEFAULT_ZC_THRESHOLD = 8192
# Header bound minus 32 bytes of fixed fields and one zc table entry.
DEFAULT_PIGGYBACK_THRESHOLD = HEADER_BOUND - 32

FLAG_PIGGYBACK = 0x01
FLAG_MERGED = 0x02

_HEADER_FIXED = struct.Struct("<IIIBBHQ")  # magic, tag, source, dev, flags, num_zc, nzc_size
_U32 = struct.Struct("<I")
_U64 = struct.Struct("<Q")

HEADER_FIXED_SIZE = _HEADER_FIXED.size


class ParcelError(Exception):
    """Base error for parcel framing."""


class HeaderOverflowError(ParcelError):
    """Header metadata alone would exceed HEADER_BOUND (oversized zc table)."""


class DecodeError(ParcelError):
    """Malformed or truncated frame."""


@dataclass
class Parcel:
    """One nonzero-copy chunk plus zero or more zero-copy chunks."""

    nzc_chunk: Buffer
    zc_chunks: list = field(default_factory=list)

    @property
    def num_zc(self) -> int:
        return len(self.zc_chunks)


@dataclass
class NzcLayout:
    """Logical content of a nonzero-copy chunk."""

    action_id: int
    small_args: list
    zc_sizes: list

    def encode(self) -> bytes:
        parts = [_U64.pack(self.action_id), _U32.pack(len(self.small_args))]
        for arg in self.small_args:
            parts.append(_U32.pack(len(arg)))
            parts.append(bytes(arg))
        parts.append(_U32.pack(len(self.zc_sizes)))
        for size in self.zc_sizes:
            parts.append(_U64.pack(size))
        return b"".join(parts)

    @classmethod
    def decode(cls, data: Buffer) -> "NzcLayout":
        view = memoryview(data)
        try:
            (action_id,) = _U64.unpack_from(view, 0)
            offset = 8
            (n_small,) = _U32.unpack_from(view, offset)
            offset += 4
            small_args = []
            for _ in range(n_small):
                (length,) = _U32.unpack_from(view, offset)
                offset += 4
                if offset + length > len(view):
                    raise DecodeError("small argument truncated")
                small_args.append(bytes(view[offset : offset + length]))
                offset += length
            (n_zc,) = _U32.unpack_from(view, offset)
            offset += 4
            zc_sizes = []
            for _ in range(n_zc):
                (size,) = _U64.unpack_from(view, offset)
                offset += 8
                zc_sizes.append(size)
        except struct.error as exc:
            raise DecodeError(f"nonzero-copy chunk truncated: {exc}") from exc
        if offset != len(view):
            raise DecodeError(
                f"nonzero-copy chunk has {len(view) - offset} trailing bytes"
            )
        return cls(action_id, small_args, zc_sizes)


@dataclass
class HeaderFrame:
    """Decoded bounded control message announcing one parcel."""

    tag: int
    source_rank: int
    device_index: int
    flags: int
    num_zc: int
    nzc_size: int
    zc_sizes: list
    piggyback: Optional[bytes] = None

    @property
    def piggybacked(self) -> bool:
        return bool(self.flags & FLAG_PIGGYBACK)

    @property
    def merged(self) -> bool:
        return bool(self.flags & FLAG_MERGED)


def build_parcel(
    action_id: int,
    args: Sequence[Buffer],
    zc_threshold: int = DEFAULT_ZC_THRESHOLD,
) -> Parcel:
    """Split arguments by size into the nonzero-copy chunk and zc chunks.

    Arguments of at most ``zc_threshold`` bytes are embedded in the
    nonzero-copy chunk in order; larger ones become zero-copy chunks in
    order.
    """
    if zc_threshold <= 0:
        raise ValueError("zc_threshold must be positive")
    small_args = []
    zc_chunks = []
    for arg in args:
        if len(arg) <= zc_threshold:
            small_args.append(bytes(arg))
        else:
            zc_chunks.append(arg)
    if len(zc_chunks) > MAX_ZC:
        raise ParcelError(
            f"parcel has {len(zc_chunks)} zero-copy chunks, limit is {MAX_ZC}"
        )
    layout = NzcLayout(action_id, small_args, [len(c) for c in zc_chunks])
    return Parcel(layout.encode(), list(zc_chunks))


def will_piggyback(parcel: Parcel, piggyback_threshold: int) -> bool:
    """Whether encode_header would inline the nonzero-copy chunk.

    The nzc chunk rides in the header iff it is at most the piggyback
    threshold and the whole frame still fits in HEADER_BOUND.
    """
    nzc_size = len(parcel.nzc_chunk)
    meta = HEADER_FIXED_SIZE + 8 * parcel.num_zc
    return nzc_size <= piggyback_threshold and meta + nzc_size <= HEADER_BOUND


def encode_header(
    parcel: Parcel,
    tag: int,
    source_rank: int,
    device_index: int,
    piggyback_threshold: int = DEFAULT_PIGGYBACK_THRESHOLD,
    extra_flags: int = 0,
) -> bytes:
    """Encode the bounded header frame for a parcel."""
    num_zc = parcel.num_zc
    meta = HEADER_FIXED_SIZE + 8 * num_zc
    if meta > HEADER_BOUND:
        raise HeaderOverflowError(
            f"zc table of {num_zc} entries needs {meta} bytes, bound is {HEADER_BOUND}"
        )
    nzc_size = len(parcel.nzc_chunk)
    flags = extra_flags & ~FLAG_PIGGYBACK
    piggyback = will_piggyback(parcel, piggyback_threshold)
    if piggyback:
        flags |= FLAG_PIGGYBACK
    parts = [
        _HEADER_FIXED.pack(
            HEADER_MAGIC, tag, source_rank, device_index, flags, num_zc, nzc_size
        )
    ]
    for chunk in parcel.zc_chunks:
        parts.append(_U64.pack(len(chunk)))
    if piggyback:
        parts.append(bytes(parcel.nzc_chunk))
    frame = b"".join(parts)
    assert len(frame) <= HEADER_BOUND
    return frame


def decode_header(data: Buffer) -> HeaderFrame:
    """Field-level inverse of encode_header."""
    view = memoryview(data)
    if len(view) < HEADER_FIXED_SIZE:
        raise DecodeError(f"header frame of {len(view)} bytes is shorter than fixed fields")
    magic, tag, source_rank, device_index, flags, num_zc, nzc_size = _HEADER_FIXED.unpack_from(view, 0)
    if magic != HEADER_MAGIC:
        raise DecodeError(f"bad header magic {magic:#x}")
    offset = HEADER_FIXED_SIZE
    if offset + 8 * num_zc > len(view):
        raise DecodeError("zc size table truncated")
    zc_sizes = [_U64.unpack_from(view, offset + 8 * i)[0] for i in range(num_zc)]
    offset += 8 * num_zc
    piggyback = None
    if flags & FLAG_PIGGYBACK:
        if len(view) - offset != nzc_size:
            raise DecodeError(
                f"piggybacked nzc chunk is {len(view) - offset} bytes, header says {nzc_size}"
            )
        piggyback = bytes(view[offset:])
    elif offset != len(view):
        raise DecodeError(f"header frame has {len(view) - offset} trailing bytes")
    return HeaderFrame(tag, source_rank, device_index, flags, num_zc, nzc_size, zc_sizes, piggyback)


def parcel_digest(parcel: Parcel) -> int:
    """Order-sensitive 64-bit digest over action id, small args, and zc bytes."""
    layout = NzcLayout.decode(parcel.nzc_chunk)
    h = blake2b(digest_size=8)
    h.update(_U64.pack(layout.action_id))
    for arg in layout.small_args:
        h.update(_U32.pack(len(arg)))
        h.update(arg)
    for chunk in parcel.zc_chunks:
        h.update(_U64.pack(len(chunk)))
        h.update(chunk)
    return int.from_bytes(h.digest(), "little")


def messages_on_wire(parcel: Parcel, piggyback_threshold: int = DEFAULT_PIGGYBACK_THRESHOLD) -> int:
    """Frames a parcel occupies on the wire: header + nzc (unless inlined) + zc."""
    return 1 + (0 if will_piggyback(parcel, piggyback_threshold) else 1) + parcel.num_zc
