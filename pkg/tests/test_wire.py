"""Wire protocol: framing, CRC-64, varints, links, disclosure counting."""

import socket
import struct
import threading
from collections import deque

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from qkdf import wire
from qkdf.wire import (LinkClosed, ProtocolError, crc64_ecma182,
                       decode_header, decode_index_deltas, decode_uvarints,
                       disclosed_bits_in, encode_frame, encode_index_deltas,
                       encode_uvarints, memory_link_pair, pack_bits,
                       tcp_connect, unpack_bits)


class TestCrc64:
    def test_check_value(self):
        # CRC-64/ECMA-182 catalogue check value
        assert crc64_ecma182(b"123456789") == 0x6C40DF5F0B497347

    def test_empty(self):
        assert crc64_ecma182(b"") == 0

    def test_sensitivity(self):
        assert crc64_ecma182(b"abc") != crc64_ecma182(b"abd")


class TestFraming:
    @given(st.integers(0, 255), st.binary(max_size=4096))
    @settings(max_examples=50, deadline=None)
    def test_round_trip(self, msg_type, payload):
        frame = encode_frame(msg_type, payload)
        got_type, length = decode_header(frame[:wire.HEADER.size])
        assert got_type == msg_type
        assert frame[wire.HEADER.size:] == payload
        assert length == len(payload)

    def test_bad_magic_rejected(self):
        frame = bytearray(encode_frame(0x01, b"x"))
        frame[0] = ord("X")
        with pytest.raises(ProtocolError):
            decode_header(bytes(frame[:wire.HEADER.size]))

    def test_version_mismatch_rejected(self):
        frame = bytearray(encode_frame(0x01, b"x"))
        frame[4] = 2
        with pytest.raises(ProtocolError):
            decode_header(bytes(frame[:wire.HEADER.size]))


class TestVarints:
    @given(st.lists(st.integers(0, 2**32 - 1), max_size=200))
    @settings(max_examples=50, deadline=None)
    def test_round_trip(self, values):
        data = encode_uvarints(values)
        got = decode_uvarints(data, len(values))
        assert got.tolist() == values

    def test_wide_values(self):
        values = [0, 1, 127, 128, 2**14, 2**21 - 1, 2**28, 2**35, 2**42]
        got = decode_uvarints(encode_uvarints(values), len(values))
        assert got.tolist() == values

    def test_count_mismatch_detected(self):
        data = encode_uvarints([1, 2, 3])
        with pytest.raises(ProtocolError):
            decode_uvarints(data, 2)

    @given(st.lists(st.integers(0, 2**40), min_size=1, max_size=100, unique=True))
    @settings(max_examples=50, deadline=None)
    def test_index_deltas(self, values):
        idx = sorted(values)
        got = decode_index_deltas(encode_index_deltas(idx), len(idx))
        assert got.tolist() == idx


class TestBitPacking:
    @given(st.lists(st.integers(0, 1), max_size=300))
    @settings(max_examples=50, deadline=None)
    def test_round_trip(self, bits):
        data = pack_bits(np.array(bits, dtype=np.uint8))
        assert unpack_bits(data, len(bits)).tolist() == bits

    def test_short_buffer_rejected(self):
        with pytest.raises(ProtocolError):
            unpack_bits(b"\x00", 9)


class TestMemoryLink:
    def test_round_trip_order(self):
        a, b = memory_link_pair()
        a.send(0x01, b"one")
        a.send(0x02, b"two")
        assert b.recv() == (0x01, b"one")
        assert b.recv() == (0x02, b"two")

    def test_interleaved_types_vs_queue_oracle(self):
        rng = np.random.default_rng(5)
        a, b = memory_link_pair()
        oracle = deque()
        for _ in range(500):
            msg_type = int(rng.integers(1, 5))
            payload = rng.bytes(int(rng.integers(0, 64)))
            oracle.append((msg_type, payload))
            a.send(msg_type, payload)
        for expected in oracle:
            assert b.recv() == expected

    def test_abort_propagates(self):
        a, b = memory_link_pair()
        a.abort("boom")
        with pytest.raises((ProtocolError, LinkClosed)):
            b.recv()

    def test_closed_recv(self):
        a, b = memory_link_pair()
        a.close()
        with pytest.raises(LinkClosed):
            b.recv()


class TestTcpLink:
    def test_round_trip_localhost(self):
        result = {}

        def server(port_holder, started):
            srv = socket.create_server(("127.0.0.1", 0))
            port_holder.append(srv.getsockname()[1])
            started.set()
            conn, _ = srv.accept()
            srv.close()
            link = wire.TcpLink(conn)
            result["got"] = [link.recv() for _ in range(3)]
            link.send(0x21, b"ack")
            link.close()

        ports, started = [], threading.Event()
        thread = threading.Thread(target=server, args=(ports, started), daemon=True)
        thread.start()
        started.wait(5)
        link = tcp_connect("127.0.0.1", ports[0])
        link.send(0x01, b"hello")
        link.send(0x02, b"")
        link.send(0x03, bytes(1_000_000))
        assert link.recv() == (0x21, b"ack")
        thread.join(5)
        link.close()
        assert result["got"][0] == (0x01, b"hello")
        assert result["got"][1] == (0x02, b"")
        assert result["got"][2][0] == 0x03
        assert len(result["got"][2][1]) == 1_000_000


class TestDisclosureSchema:
    def test_x_bits(self):
        payload = struct.pack("<BI", wire.XDISC_SIFT, 37) + bytes(5)
        assert disclosed_bits_in(wire.MSG_X_BITS_DISCLOSE, payload) == 37

    def test_frame_reveal(self):
        payload = struct.pack("<BII", wire.XDISC_FRAME_REVEAL, 4, 1024) + bytes(128)
        assert disclosed_bits_in(wire.MSG_X_BITS_DISCLOSE, payload) == 1024

    def test_parity_reply(self):
        payload = struct.pack("<IBI", 9, 1, 13) + bytes(2)
        assert disclosed_bits_in(wire.MSG_CASCADE_PARITY_REPLY, payload) == 13

    def test_crc_counts_64(self):
        assert disclosed_bits_in(wire.MSG_FRAME_CRC64, bytes(12)) == 64

    def test_quantum_sim_free(self):
        assert disclosed_bits_in(wire.MSG_QUANTUM_SIM, bytes(100)) == 0

    def test_counters_accumulate(self):
        a, b = memory_link_pair()
        a.send(wire.MSG_CASCADE_PARITY_REPLY, struct.pack("<IBI", 0, 0, 21) + bytes(3))
        b.recv()
        assert a.counters.disclosed_bits_sent == 21
        assert b.counters.disclosed_bits_received == 21
        assert b.counters.disclosed_received_by_type[wire.MSG_CASCADE_PARITY_REPLY] == 21
