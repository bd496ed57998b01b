import math
import struct

import pytest
from hypothesis import given
from hypothesis import strategies as st

from switchsgd import wire
from switchsgd.wire import (
    FX_ONE,
    MalformedPacket,
    Packet,
    decode_packet,
    encode_packet,
    fx_add,
    fx_from_real,
    fx_mul,
    fx_to_real,
    packet_size,
    wrap32,
)

I32 = st.integers(-(2**31), 2**31 - 1)


def test_golden_bytes():
    # hand-encoded from the layout: flags, reserved, seq LE, bm LE, payload LE
    pkt = Packet(is_agg=True, acked=False, seq=5, bm=0x4, payload=(1,))
    assert encode_packet(pkt).hex(" ") == "01 00 05 00 04 00 00 00 01 00 00 00"


def test_golden_bytes_confirmation():
    pkt = Packet(is_agg=False, acked=True, seq=0x0102, bm=1 << 31, payload=(-1, 0))
    want = bytes([0x02, 0x00, 0x02, 0x01, 0x00, 0x00, 0x00, 0x80]) + struct.pack("<2i", -1, 0)
    assert encode_packet(pkt) == want


def test_size():
    assert packet_size(8) == 40
    assert Packet(True, False, 0, 1, (0,) * 8).size() == 40


def test_decode_length_mismatch():
    pkt = Packet(True, False, 0, 1, (0,) * 4)
    raw = encode_packet(pkt)
    with pytest.raises(MalformedPacket):
        decode_packet(raw, 8)
    with pytest.raises(MalformedPacket):
        decode_packet(raw[:-1], 4)


def test_decode_reserved_flag_bits():
    raw = bytearray(encode_packet(Packet(True, False, 0, 1, (0,))))
    raw[0] = 0x04
    with pytest.raises(MalformedPacket):
        decode_packet(bytes(raw), 1)


def test_decode_reserved_byte():
    raw = bytearray(encode_packet(Packet(True, False, 0, 1, (0,))))
    raw[1] = 0xFF
    with pytest.raises(MalformedPacket):
        decode_packet(bytes(raw), 1)


def test_encode_range_checks():
    with pytest.raises(MalformedPacket):
        encode_packet(Packet(True, False, 70000, 1, (0,)))
    with pytest.raises(MalformedPacket):
        encode_packet(Packet(True, False, 0, 1 << 32, (0,)))
    with pytest.raises(MalformedPacket):
        encode_packet(Packet(True, False, 0, 1, (2**31,)))


@given(
    is_agg=st.booleans(),
    acked=st.booleans(),
    seq=st.integers(0, 0xFFFF),
    bm=st.integers(0, 0xFFFFFFFF),
    payload=st.lists(I32, min_size=1, max_size=16),
)
def test_roundtrip(is_agg, acked, seq, bm, payload):
    pkt = Packet(is_agg, acked, seq, bm, tuple(payload))
    assert decode_packet(encode_packet(pkt), len(payload)) == pkt


# --- fixed point ---------------------------------------------------------


def test_fx_from_real_examples():
    assert fx_from_real(1.0) == 65536
    assert fx_from_real(-0.5) == -32768
    assert fx_from_real(0.1) == 6554
    assert fx_from_real(0.0) == 0


def test_fx_from_real_ties_away_from_zero():
    assert fx_from_real(1.5 / FX_ONE) == 2
    assert fx_from_real(-1.5 / FX_ONE) == -2


def test_fx_from_real_overflow():
    with pytest.raises(OverflowError):
        fx_from_real(32768.0)
    with pytest.raises(OverflowError):
        fx_from_real(-32768.0)
    with pytest.raises(OverflowError):
        fx_from_real(math.nan)
    # the largest value that rounds to a representable raw
    assert fx_from_real(32767.0) == 32767 * FX_ONE


@given(st.floats(min_value=-32767.9999, max_value=32767.9999, allow_nan=False))
def test_fx_from_real_error_bound(r):
    raw = fx_from_real(r)
    assert abs(fx_to_real(raw) - r) <= 0.5 / FX_ONE + 1e-12


def test_fx_mul_examples():
    assert fx_mul(fx_from_real(1.5), fx_from_real(-2.0)) == fx_from_real(-3.0)
    assert fx_mul(1, 1) == 0          # 2^-32 truncates to 0
    assert fx_mul(-1, 1) == -1        # truncation is toward -inf
    assert fx_mul(fx_from_real(0.5), fx_from_real(0.5)) == fx_from_real(0.25)


@given(I32, I32)
def test_wrap_add_commutes(a, b):
    assert fx_add(a, b) == fx_add(b, a)
    assert -(2**31) <= fx_add(a, b) <= 2**31 - 1


@given(I32, I32, I32)
def test_wrap_add_associates(a, b, c):
    assert fx_add(fx_add(a, b), c) == fx_add(a, fx_add(b, c))


@given(st.integers())
def test_wrap32_is_mod_2_32(x):
    assert wrap32(x) % (1 << 32) == x % (1 << 32)
    assert -(2**31) <= wrap32(x) <= 2**31 - 1
