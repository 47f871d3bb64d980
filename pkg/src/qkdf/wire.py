"""Framed wire protocol for the two-party post-processing link.

Frame layout, bit-exact:

    magic "QKDP" (4) | version u8 (=1) | msg_type u8 | payload_len u32 LE | payload

Message types cover sifting (0x01-0x04), Cascade (0x10-0x12), privacy
amplification (0x20-0x21), and abort (0xFF); 0x00 carries the simulated
quantum channel (detection records) and is never counted as classical
disclosure. CRC-64 uses the ECMA-182 polynomial.

Each endpoint keeps byte/frame counters plus a schema-aware tap that
counts disclosed key bits (X-basis reveals, Cascade parities, CRC values,
revealed frames) independently of any higher-level bookkeeping.
"""

from __future__ import annotations

import socket
import struct
import threading
from collections import defaultdict, deque

import numpy as np

MAGIC = b"QKDP"
VERSION = 1
HEADER = struct.Struct("<4sBBI")
MAX_PAYLOAD = 2**32 - 1

MSG_QUANTUM_SIM = 0x00
MSG_DETECTED_INDICES = 0x01
MSG_BASIS_REVEAL = 0x02
MSG_X_BITS_DISCLOSE = 0x03
MSG_TALLY_DIGEST = 0x04
MSG_CASCADE_PARITY_REQUEST = 0x10
MSG_CASCADE_PARITY_REPLY = 0x11
MSG_FRAME_CRC64 = 0x12
MSG_PA_SEED = 0x20
MSG_PA_CONFIRM = 0x21
MSG_ABORT = 0xFF

# purposes inside MSG_X_BITS_DISCLOSE payloads
XDISC_SIFT = 0
XDISC_QBER_SAMPLE = 1
XDISC_FRAME_REVEAL = 2


class ProtocolError(Exception):
    """Malformed frame or protocol violation; the connection is aborted."""


class LinkClosed(Exception):
    """The peer closed the link (or the transport failed)."""


# ---------------------------------------------------------------------------
# CRC-64/ECMA-182: poly 0x42F0E1EBA9EA3693, init 0, not reflected, xorout 0

_CRC64_POLY = 0x42F0E1EBA9EA3693
_CRC64_TABLE = []
for _b in range(256):
    _r = _b << 56
    for _ in range(8):
        _r = ((_r << 1) ^ _CRC64_POLY if _r & (1 << 63) else _r << 1) & 0xFFFFFFFFFFFFFFFF
    _CRC64_TABLE.append(_r)
_CRC64_TABLE = tuple(_CRC64_TABLE)


def crc64_ecma182(data: bytes) -> int:
    crc = 0
    table = _CRC64_TABLE
    for byte in data:
        crc = ((crc << 8) & 0xFFFFFFFFFFFFFFFF) ^ table[(crc >> 56) ^ byte]
    return crc


# ---------------------------------------------------------------------------
# bit packing and varints

def pack_bits(bits) -> bytes:
    """MSB-first packing of a 0/1 array."""
    return np.packbits(np.asarray(bits, dtype=np.uint8)).tobytes()


def unpack_bits(data: bytes, n: int) -> np.ndarray:
    if len(data) * 8 < n:
        raise ProtocolError(f"bit field too short: {len(data)*8} < {n}")
    return np.unpackbits(np.frombuffer(data, dtype=np.uint8), count=n)


def encode_uvarints(values) -> bytes:
    """LEB128 encoding of a u64 array (vectorized)."""
    vals = np.asarray(values, dtype=np.uint64)
    if vals.size == 0:
        return b""
    nbytes = np.ones(vals.size, dtype=np.int64)
    for shift in range(7, 63, 7):
        nbytes += (vals >= np.uint64(1 << shift)).astype(np.int64)
    offsets = np.concatenate(([0], np.cumsum(nbytes)[:-1]))
    out = np.zeros(int(nbytes.sum()), dtype=np.uint8)
    max_len = int(nbytes.max())
    for j in range(max_len):
        sel = nbytes > j
        byte = (vals[sel] >> np.uint64(7 * j)) & np.uint64(0x7F)
        cont = (nbytes[sel] > j + 1).astype(np.uint8) << 7
        out[offsets[sel] + j] = byte.astype(np.uint8) | cont
    return out.tobytes()


def decode_uvarints(data: bytes, count: int) -> np.ndarray:
    """Inverse of encode_uvarints; validates the terminator structure."""
    if count == 0:
        return np.zeros(0, dtype=np.uint64)
    raw = np.frombuffer(data, dtype=np.uint8)
    ends = np.nonzero((raw & 0x80) == 0)[0]
    if ends.size != count or ends[-1] != raw.size - 1:
        raise ProtocolError("varint stream does not match declared count")
    starts = np.concatenate(([0], ends[:-1] + 1))
    lengths = ends - starts + 1
    if lengths.max() > 10:
        raise ProtocolError("varint too long")
    vals = np.zeros(count, dtype=np.uint64)
    for j in range(int(lengths.max())):
        sel = lengths > j
        vals[sel] |= (raw[starts[sel] + j] & np.uint64(0x7F)).astype(np.uint64) << np.uint64(7 * j)
    return vals


def encode_index_deltas(indices) -> bytes:
    """Strictly increasing u64 indices as delta varints."""
    idx = np.asarray(indices, dtype=np.uint64)
    if idx.size == 0:
        return b""
    deltas = np.empty_like(idx)
    deltas[0] = idx[0]
    np.subtract(idx[1:], idx[:-1], out=deltas[1:])
    return encode_uvarints(deltas)


def decode_index_deltas(data: bytes, count: int) -> np.ndarray:
    return np.cumsum(decode_uvarints(data, count), dtype=np.uint64)


# ---------------------------------------------------------------------------
# frame encode/decode

def encode_frame(msg_type: int, payload: bytes) -> bytes:
    if len(payload) > MAX_PAYLOAD:
        raise ProtocolError("payload too large")
    return HEADER.pack(MAGIC, VERSION, msg_type, len(payload)) + payload


def decode_header(header: bytes):
    magic, version, msg_type, length = HEADER.unpack(header)
    if magic != MAGIC:
        raise ProtocolError(f"bad magic {magic!r}")
    if version != VERSION:
        raise ProtocolError(f"unsupported version {version}")
    return msg_type, length


def disclosed_bits_in(msg_type: int, payload: bytes) -> int:
    """Key bits a message reveals, derived purely from the wire schema.

    X-bit disclosures and parity replies carry an explicit count; a CRC
    exchange reveals its 64-bit checksum. Messages too short for their
    schema count zero here; the protocol handlers reject them anyway.
    """
    try:
        if msg_type == MSG_X_BITS_DISCLOSE:
            # purpose u8 | count u32 | ... (frame reveals carry frame_id first)
            purpose = payload[0]
            if purpose == XDISC_FRAME_REVEAL:
                return struct.unpack_from("<I", payload, 5)[0]
            return struct.unpack_from("<I", payload, 1)[0]
        if msg_type == MSG_CASCADE_PARITY_REPLY:
            # frame_id u32 | pass u8 | count u32 | packed parities
            return struct.unpack_from("<I", payload, 5)[0]
        if msg_type == MSG_FRAME_CRC64:
            return 64
    except (IndexError, struct.error):
        return 0
    return 0


class LinkCounters:
    def __init__(self):
        self.frames_sent = 0
        self.frames_received = 0
        self.payload_bytes_sent = defaultdict(int)
        self.payload_bytes_received = defaultdict(int)
        self.disclosed_sent_by_type = defaultdict(int)
        self.disclosed_received_by_type = defaultdict(int)

    @property
    def disclosed_bits_sent(self):
        return sum(self.disclosed_sent_by_type.values())

    @property
    def disclosed_bits_received(self):
        return sum(self.disclosed_received_by_type.values())

    def on_send(self, msg_type, payload):
        self.frames_sent += 1
        self.payload_bytes_sent[msg_type] += len(payload)
        self.disclosed_sent_by_type[msg_type] += disclosed_bits_in(msg_type, payload)

    def on_recv(self, msg_type, payload):
        self.frames_received += 1
        self.payload_bytes_received[msg_type] += len(payload)
        self.disclosed_received_by_type[msg_type] += disclosed_bits_in(msg_type, payload)


class Link:
    """Reliable, in-order framed messaging over some byte transport."""

    def __init__(self):
        self.counters = LinkCounters()

    def send(self, msg_type: int, payload: bytes = b""):
        self.counters.on_send(msg_type, payload)
        self._send_frame(msg_type, payload)

    def recv(self):
        msg_type, payload = self._recv_frame()
        self.counters.on_recv(msg_type, payload)
        if msg_type == MSG_ABORT:
            raise ProtocolError(f"peer abort: {payload[:200].decode('utf-8', 'replace')}")
        return msg_type, payload

    def recv_expect(self, expected: int):
        msg_type, payload = self.recv()
        if msg_type != expected:
            raise ProtocolError(f"expected msg 0x{expected:02x}, got 0x{msg_type:02x}")
        return payload

    def abort(self, reason: str):
        try:
            self.send(MSG_ABORT, reason.encode("utf-8"))
        except Exception:
            pass
        self.close()

    def _send_frame(self, msg_type, payload):
        raise NotImplementedError

    def _recv_frame(self):
        raise NotImplementedError

    def close(self):
        pass


class MemoryLink(Link):
    """One endpoint of an in-process duplex pair (thread-safe)."""

    def __init__(self):
        super().__init__()
        self._inbox = deque()
        self._cond = threading.Condition()
        self._closed = False
        self.peer = None

    def _send_frame(self, msg_type, payload):
        # round-trip through the byte encoding to exercise the real format
        frame = encode_frame(msg_type, bytes(payload))
        decoded = decode_header(frame[:HEADER.size])
        peer = self.peer
        with peer._cond:
            if peer._closed:
                raise LinkClosed("peer closed")
            peer._inbox.append((decoded[0], frame[HEADER.size:]))
            peer._cond.notify()

    def _recv_frame(self):
        with self._cond:
            while not self._inbox:
                if self._closed:
                    raise LinkClosed("link closed")
                if not self._cond.wait(timeout=60.0):
                    raise LinkClosed("recv timeout")
            return self._inbox.popleft()

    def close(self):
        for end in (self, self.peer):
            if end is None:
                continue
            with end._cond:
                end._closed = True
                end._cond.notify_all()


def memory_link_pair():
    a, b = MemoryLink(), MemoryLink()
    a.peer, b.peer = b, a
    return a, b


class TcpLink(Link):
    def __init__(self, sock: socket.socket):
        super().__init__()
        self._sock = sock
        self._sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)

    def _send_frame(self, msg_type, payload):
        try:
            self._sock.sendall(encode_frame(msg_type, bytes(payload)))
        except OSError as exc:
            raise LinkClosed(str(exc)) from exc

    def _read_exact(self, n: int) -> bytes:
        chunks = []
        while n:
            try:
                chunk = self._sock.recv(min(n, 1 << 20))
            except OSError as exc:
                raise LinkClosed(str(exc)) from exc
            if not chunk:
                raise LinkClosed("connection closed mid-frame")
            chunks.append(chunk)
            n -= len(chunk)
        return b"".join(chunks)

    def _recv_frame(self):
        msg_type, length = decode_header(self._read_exact(HEADER.size))
        return msg_type, self._read_exact(length)

    def close(self):
        try:
            self._sock.close()
        except OSError:
            pass


def tcp_listen(host: str, port: int) -> TcpLink:
    srv = socket.create_server((host, port))
    conn, _ = srv.accept()
    srv.close()
    return TcpLink(conn)


def tcp_connect(host: str, port: int, timeout: float = 30.0) -> TcpLink:
    return TcpLink(socket.create_connection((host, port), timeout=timeout))
