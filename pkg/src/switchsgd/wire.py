"""Wire format and fixed-point codecs.

Everything that crosses the simulated network is a fixed-size packet:
an 8-byte header followed by a payload of signed 32-bit words. All
multi-byte fields are little-endian. Numeric values use Q16.16
two's-complement fixed point; quantized features use unsigned 0.8
fixed point (raw byte / 256).
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass

HEADER_LEN = 8

FLAG_IS_AGG = 0x01
FLAG_ACKED = 0x02

# Q16.16 constants
FX_FRAC_BITS = 16
FX_ONE = 1 << FX_FRAC_BITS
FX_MIN = -(1 << 31)
FX_MAX = (1 << 31) - 1

# unsigned 0.8 feature format
FEAT_BITS = 8
FEAT_SCALE = 1 << FEAT_BITS


class MalformedPacket(ValueError):
    """Raised when bytes on the wire do not decode to a valid packet."""


@dataclass(frozen=True)
class Packet:
    """One protocol packet.

    is_agg   True for aggregation traffic (partial/full sums), False for
             the acknowledgement round.
    acked    set by the aggregator on the final confirmation broadcast.
    seq      slot index, 16-bit.
    bm       worker bitmap, 32-bit; worker-originated packets carry
             exactly one set bit.
    payload  fixed-length tuple of signed 32-bit words; carries values
             on aggregation packets, is ignored (but still present) on
             ack/confirmation packets.
    """

    is_agg: bool
    acked: bool
    seq: int
    bm: int
    payload: tuple[int, ...]

    def size(self) -> int:
        return HEADER_LEN + 4 * len(self.payload)


def packet_size(payload_len: int) -> int:
    return HEADER_LEN + 4 * payload_len


def encode_packet(pkt: Packet) -> bytes:
    """Serialize a packet. Raises MalformedPacket on out-of-range fields."""
    if not 0 <= pkt.seq <= 0xFFFF:
        raise MalformedPacket(f"seq {pkt.seq} out of u16 range")
    if not 0 <= pkt.bm <= 0xFFFFFFFF:
        raise MalformedPacket(f"bm {pkt.bm:#x} out of u32 range")
    flags = (FLAG_IS_AGG if pkt.is_agg else 0) | (FLAG_ACKED if pkt.acked else 0)
    head = struct.pack("<BBHI", flags, 0, pkt.seq, pkt.bm)
    try:
        body = struct.pack(f"<{len(pkt.payload)}i", *pkt.payload)
    except struct.error as e:
        raise MalformedPacket(f"payload word out of i32 range: {e}") from None
    return head + body


def decode_packet(data: bytes, payload_len: int) -> Packet:
    """Parse bytes into a Packet; strict about length and reserved bits."""
    want = packet_size(payload_len)
    if len(data) != want:
        raise MalformedPacket(f"length {len(data)}, expected {want}")
    flags, reserved, seq, bm = struct.unpack_from("<BBHI", data)
    if reserved != 0:
        raise MalformedPacket(f"reserved byte nonzero: {reserved:#x}")
    if flags & ~(FLAG_IS_AGG | FLAG_ACKED):
        raise MalformedPacket(f"reserved flag bits set: {flags:#x}")
    payload = struct.unpack_from(f"<{payload_len}i", data, HEADER_LEN)
    return Packet(
        is_agg=bool(flags & FLAG_IS_AGG),
        acked=bool(flags & FLAG_ACKED),
        seq=seq,
        bm=bm,
        payload=payload,
    )


# --- Q16.16 scalar arithmetic -------------------------------------------
#
# All state-machine arithmetic wraps mod 2^32 (two's complement); there is
# deliberately no saturation anywhere, so sums commute and associate
# exactly no matter how they are split across workers.


def wrap32(x: int) -> int:
    """Reduce an integer to signed 32-bit two's complement."""
    return ((x + 0x80000000) & 0xFFFFFFFF) - 0x80000000


def fx_add(a: int, b: int) -> int:
    return wrap32(a + b)


def fx_sub(a: int, b: int) -> int:
    return wrap32(a - b)


def fx_mul(a: int, b: int) -> int:
    """Q16.16 product: full 64-bit intermediate, then arithmetic >>16.

    Truncates toward negative infinity (Python's >> is arithmetic).
    """
    return wrap32((a * b) >> FX_FRAC_BITS)


def fx_from_real(r: float) -> int:
    """Round a real to Q16.16 raw, ties away from zero.

    Raises OverflowError outside the representable range.
    """
    if math.isnan(r) or abs(r) >= 32768.0:
        raise OverflowError(f"{r!r} outside Q16.16 range")
    raw = math.floor(abs(r) * FX_ONE + 0.5)
    if r < 0:
        raw = -raw
    if raw < FX_MIN or raw > FX_MAX:
        raise OverflowError(f"{r!r} rounds outside Q16.16 range")
    return raw


def fx_to_real(raw: int) -> float:
    return raw / FX_ONE


def feat_to_real(raw: int) -> float:
    """Value of an unsigned 0.8 feature byte, in [0, 1 - 2^-8]."""
    return raw / FEAT_SCALE
