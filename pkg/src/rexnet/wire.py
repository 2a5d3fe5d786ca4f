"""Envelope framing shared by every transport.

Frame layout, all little-endian::

    u32 total_length   (includes these 4 bytes)
    u8  version
    u8  kind
    u32 sender
    u32 receiver
    u32 epoch
    ... body
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from enum import IntEnum

from .errors import CodecError

VERSION = 1
HEADER = struct.Struct("<IBBIII")
HEADER_SIZE = HEADER.size  # 18
DEFAULT_MAX_FRAME = 64 * 1024 * 1024


class Kind(IntEnum):
    ATTEST_REQ = 1
    ATTEST_RESP = 2
    ATTEST_ACK = 3
    PAYLOAD = 4
    TICK = 5


ATTEST_KINDS = frozenset({Kind.ATTEST_REQ, Kind.ATTEST_RESP, Kind.ATTEST_ACK})


@dataclass(frozen=True)
class Envelope:
    kind: Kind
    sender: int
    receiver: int
    epoch: int
    body: bytes = b""
    version: int = VERSION

    @property
    def frame_size(self) -> int:
        return HEADER_SIZE + len(self.body)

    def header_bytes(self) -> bytes:
        """Header without the length prefix; bound as AEAD associated data."""
        return HEADER.pack(0, self.version, self.kind, self.sender, self.receiver, self.epoch)[4:]


def encode_envelope(e: Envelope, max_frame: int = DEFAULT_MAX_FRAME) -> bytes:
    size = HEADER_SIZE + len(e.body)
    if size > max_frame:
        raise CodecError(f"frame of {size} bytes exceeds limit {max_frame}")
    return HEADER.pack(size, e.version, int(e.kind), e.sender, e.receiver, e.epoch) + e.body


def decode_envelope(frame: bytes, max_frame: int = DEFAULT_MAX_FRAME) -> Envelope:
    if len(frame) < HEADER_SIZE:
        raise CodecError(f"truncated frame: {len(frame)} bytes")
    size, version, kind, sender, receiver, epoch = HEADER.unpack_from(frame, 0)
    if size > max_frame:
        raise CodecError(f"frame length {size} exceeds limit {max_frame}")
    if size != len(frame):
        raise CodecError(f"length field says {size}, frame has {len(frame)}")
    if version != VERSION:
        raise CodecError(f"unsupported version {version}")
    try:
        kind = Kind(kind)
    except ValueError:
        raise CodecError(f"unknown envelope kind {kind}") from None
    return Envelope(kind, sender, receiver, epoch, bytes(frame[HEADER_SIZE:]), version)


def frame_length(prefix: bytes, max_frame: int = DEFAULT_MAX_FRAME) -> int:
    """Validate the 4-byte length prefix of a frame read from a stream."""
    (size,) = struct.unpack_from("<I", prefix, 0)
    if size < HEADER_SIZE:
        raise CodecError(f"frame length {size} below header size")
    if size > max_frame:
        raise CodecError(f"frame length {size} exceeds limit {max_frame}")
    return size
