"""Two-party protocol engine: pulse generation, event-level detection,
sifting over the wire protocol, and the full post-processing pipeline.

The quantum channel is simulated on Alice's side and shipped to Bob as
msg 0x00 (never counted as classical disclosure); every classical step
runs over the real framed link, so the leakage ledger can be
cross-checked against the link's schema-aware disclosure counter.

Payload schemas (little-endian):

    0x00  flags u8 (bit0 = last) | count u32 | index-delta varints
          | packed bases (1=Z) | packed bits
    0x01  flags u8 | count u32 | index-delta varints          (Bob -> Alice)
    0x02  count u32 | packed bases (1=Z)                      (Bob -> Alice)
    0x03  purpose u8 | [frame_id u32, reveals only] | count u32 | packed bits
    0x04  subtype 0: count u32 | packed code hi bits | packed code lo bits
                     | n_noncalib u32 | packed intensity bits (1 = mu1)
          subtype 1: sent_z1 u64 sent_z2 u64 sent_x1 u64 sent_x2 u64
                     calib u64 n_pulses u64 t f64
          subtype 2: cascade phase complete
    0x20  out_len u64 | k u8 | e u32 | seed_len u8 | seed
    0x21  blake2b-128 digest of the 0x20 payload

Sift reply codes per detected index: 0 discard (calibration pulse),
1 Z-basis match (key bit), 2 X-basis match (Alice's bit disclosed),
3 basis mismatch.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from qkdf import wire
from qkdf.cascade import CascadeConfig, CascadeResponder, cascade_correct
from qkdf.channel import ChannelDetectorModel, corrected_yields
from qkdf.finitekey import (InsufficientStatistics, ObservedTallies,
                            ProtocolParams, estimate_decoy_bounds,
                            secret_key_length)
from qkdf.pa import PAConfig, mersenne_exponent_for, pa_compress
from qkdf.wire import (MSG_BASIS_REVEAL, MSG_DETECTED_INDICES, MSG_PA_CONFIRM,
                       MSG_PA_SEED, MSG_QUANTUM_SIM, MSG_TALLY_DIGEST,
                       MSG_X_BITS_DISCLOSE, XDISC_QBER_SAMPLE, XDISC_SIFT,
                       ProtocolError, decode_index_deltas, encode_index_deltas,
                       pack_bits, unpack_bits)

ROLE_ORDER = ("raw", "sifted", "reconciled", "secret")
KEYFILE_MAGIC = b"QKDK"
KEYFILE_HEADER = struct.Struct("<4sBBHQ16s")
DEFAULT_CALIB_RATIO = 1.0 / 256.0


@dataclass(frozen=True)
class PulseRecord:
    """One transmitted pulse (record view, small runs only)."""
    index: int
    bit: int
    basis: str
    intensity: int
    calib: bool = False


@dataclass(frozen=True)
class DetectionRecord:
    """One detection event on Bob's side."""
    index: int
    basis_measured: str
    bit_measured: int

    @property
    def detector_id(self) -> str:
        offset = 1 if self.basis_measured == "Z" else 3
        return f"D{offset + self.bit_measured}"


@dataclass
class PulseBatch:
    """Column view of a run of consecutive pulses."""
    index0: int
    bit: np.ndarray
    basis_z: np.ndarray
    intensity: np.ndarray
    calib: np.ndarray
    last: bool = False

    def __len__(self):
        return len(self.bit)

    def records(self):
        for i in range(len(self.bit)):
            yield PulseRecord(self.index0 + i, int(self.bit[i]),
                              "Z" if self.basis_z[i] else "X",
                              int(self.intensity[i]), bool(self.calib[i]))


@dataclass
class DetectionBatch:
    index: np.ndarray
    basis_z: np.ndarray
    bit: np.ndarray
    last: bool = False

    def __len__(self):
        return len(self.index)

    def records(self):
        for i in range(len(self.index)):
            yield DetectionRecord(int(self.index[i]),
                                  "Z" if self.basis_z[i] else "X",
                                  int(self.bit[i]))


@dataclass
class KeyBuffer:
    """A length-tagged bit string with role and leakage ledger."""

    role: str = "raw"
    bits: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.uint8))
    leak_bits: int = 0
    crc_ok: bool = True

    def __len__(self):
        return len(self.bits)

    def charge(self, n):
        if n < 0:
            raise ValueError("leak charge must be nonnegative")
        self.leak_bits += int(n)

    def advance(self, role: str, bits=None) -> "KeyBuffer":
        if ROLE_ORDER.index(role) < ROLE_ORDER.index(self.role):
            raise ValueError(f"role may not move backwards: {self.role} -> {role}")
        self.role = role
        if bits is not None:
            self.bits = np.asarray(bits, dtype=np.uint8)
        return self


def _seed_for(seed, tag) -> np.random.SeedSequence:
    return np.random.SeedSequence([int(seed), int(tag) & 0xFFFFFFFF])


# ---------------------------------------------------------------------------
# pulse generation and event-level detection


def alice_generate(params: ProtocolParams, n_pulses: int, seed,
                   calib_ratio: float = DEFAULT_CALIB_RATIO,
                   chunk: int = 1 << 22):
    """Stream i.i.d. pulse batches: P(Z)=p_z, P(mu1)=p_mu1, uniform bits.

    Calibration slots (polarization feedback) are flagged; they are later
    excluded from keys and tallies. Deterministic per seed.
    """
    if n_pulses <= 0:
        raise ValueError("n_pulses must be positive")
    rng = np.random.default_rng(_seed_for(seed, 0xA11CE))
    produced = 0
    while produced < n_pulses:
        n = int(min(chunk, n_pulses - produced))
        yield PulseBatch(
            index0=produced,
            bit=(rng.random(n) < 0.5).astype(np.uint8),
            basis_z=(rng.random(n) < params.p_z).astype(np.uint8),
            intensity=np.where(rng.random(n) < params.p_mu1, 1, 2).astype(np.uint8),
            calib=rng.random(n) < calib_ratio,
            last=produced + n >= n_pulses,
        )
        produced += n


class ChannelSampler:
    """Event-level detection consistent with the aggregate yield model.

    One uniform draw per pulse routes it: the passive-basis split is
    folded into the per-arm click probabilities so arm click rates equal
    the dead-time-corrected D_{B,k} exactly (dark counts and double-click
    squashing are part of those statistics). A matched-basis click flips
    the bit with E_{B,k}; a wrong-basis click yields a uniform bit.
    """

    def __init__(self, model: ChannelDetectorModel, params: ProtocolParams, seed):
        self.rng = np.random.default_rng(_seed_for(seed, 0xC4A71))
        y = corrected_yields(model, params)
        self.t_z = np.array([0.0, y[("Z", 1)][0], y[("Z", 2)][0]])
        self.t_x = np.array([0.0, y[("X", 1)][0], y[("X", 2)][0]])
        self.e_z = np.array([0.0, y[("Z", 1)][2], y[("Z", 2)][2]])
        self.e_x = np.array([0.0, y[("X", 1)][2], y[("X", 2)][2]])

    def detect(self, batch: PulseBatch) -> DetectionBatch:
        rng = self.rng
        u = rng.random(len(batch))
        pz_click = self.t_z[batch.intensity]
        click_z = u < pz_click
        click_x = (~click_z) & (u < pz_click + self.t_x[batch.intensity])
        idx = np.nonzero(click_z | click_x)[0]
        basis_z = click_z[idx].astype(np.uint8)

        err_p = np.where(basis_z == 1, self.e_z[batch.intensity[idx]],
                         self.e_x[batch.intensity[idx]])
        matched = batch.basis_z[idx] == basis_z
        flips = (rng.random(idx.size) < err_p).astype(np.uint8)
        uniform = (rng.random(idx.size) < 0.5).astype(np.uint8)
        bits = np.where(matched, batch.bit[idx] ^ flips, uniform)
        return DetectionBatch(index=(batch.index0 + idx).astype(np.uint64),
                              basis_z=basis_z, bit=bits.astype(np.uint8),
                              last=batch.last)


def channel_detect(batches, model: ChannelDetectorModel, params: ProtocolParams,
                   seed):
    """Generator form of ChannelSampler over a pulse-batch stream."""
    sampler = ChannelSampler(model, params, seed)
    for batch in batches:
        yield sampler.detect(batch)


# ---------------------------------------------------------------------------
# session configuration and result


@dataclass
class SessionConfig:
    params: ProtocolParams
    model: ChannelDetectorModel
    n_pulses: int
    seed_alice: int = 1
    seed_channel: int = 2
    seed_bob: int = 3
    seed_shared: int = 4
    calib_ratio: float = DEFAULT_CALIB_RATIO
    chunk: int = 1 << 22
    cascade: CascadeConfig = field(default_factory=CascadeConfig)
    f_fallback: float = 1.053   # used only if no errors were corrected
    pa_block_count: int = 2
    pa_exponent: int = None     # None -> smallest fitting Mersenne exponent
    bootstrap_fraction: float = 0.01


@dataclass
class SessionResult:
    role: str
    secret: KeyBuffer
    sifted_len: int
    reconciled_len: int
    tallies: ObservedTallies = None
    key_result: object = None
    reconcile_report: object = None
    qber_realized: float = None
    f_realized: float = None
    out_len: int = 0
    counters: object = None


# ---------------------------------------------------------------------------
# sifting, both roles


def _pack_codes(codes: np.ndarray) -> bytes:
    return pack_bits((codes >> 1) & 1) + pack_bits(codes & 1)


def _unpack_codes(data: bytes, n: int) -> np.ndarray:
    half = (n + 7) // 8
    return (unpack_bits(data[:half], n) << 1) | unpack_bits(data[half:half * 2], n)


def _quantum_payload(det: DetectionBatch) -> bytes:
    return (struct.pack("<BI", 1 if det.last else 0, len(det))
            + encode_index_deltas(det.index)
            + pack_bits(det.basis_z) + pack_bits(det.bit))


def _parse_quantum(payload: bytes) -> DetectionBatch:
    flags, count = struct.unpack_from("<BI", payload, 0)
    body = payload[5:]
    nbytes_bits = (count + 7) // 8
    varint_part = body[:len(body) - 2 * nbytes_bits]
    index = decode_index_deltas(varint_part, count)
    basis = unpack_bits(body[len(varint_part):len(varint_part) + nbytes_bits], count)
    bits = unpack_bits(body[len(varint_part) + nbytes_bits:], count)
    return DetectionBatch(index=index, basis_z=basis, bit=bits,
                          last=bool(flags & 1))


def alice_run_sift(link: wire.Link, cfg: SessionConfig):
    """Transmit, simulate the channel, and answer sift announcements.

    Returns (sifted KeyBuffer, sent-count digest dict).
    """
    params = cfg.params
    sampler = ChannelSampler(cfg.model, params, cfg.seed_channel)
    sent = {("Z", 1): 0, ("Z", 2): 0, ("X", 1): 0, ("X", 2): 0}
    calib_sent = 0
    key = KeyBuffer(role="raw")
    sifted_parts = []

    for batch in alice_generate(params, cfg.n_pulses, cfg.seed_alice,
                                cfg.calib_ratio, cfg.chunk):
        live = ~batch.calib
        calib_sent += int(batch.calib.sum())
        for k in (1, 2):
            sel = live & (batch.intensity == k)
            sent[("Z", k)] += int((sel & (batch.basis_z == 1)).sum())
            sent[("X", k)] += int((sel & (batch.basis_z == 0)).sum())

        det = sampler.detect(batch)
        link.send(MSG_QUANTUM_SIM, _quantum_payload(det))

        # Bob announces what he detected for this chunk
        payload = link.recv_expect(MSG_DETECTED_INDICES)
        _, count = struct.unpack_from("<BI", payload, 0)
        idx = decode_index_deltas(payload[5:], count)
        payload = link.recv_expect(MSG_BASIS_REVEAL)
        (count_b,) = struct.unpack_from("<I", payload, 0)
        bob_basis = unpack_bits(payload[4:], count_b)
        if count_b != count:
            raise ProtocolError("basis reveal count mismatch")
        rel = (idx - np.uint64(batch.index0)).astype(np.int64)
        if rel.size and (rel[0] < 0 or rel[-1] >= len(batch)):
            raise ProtocolError("detected index out of range")

        codes = np.full(count, 3, dtype=np.uint8)
        match = batch.basis_z[rel] == bob_basis
        codes[match & (bob_basis == 1)] = 1
        codes[match & (bob_basis == 0)] = 2
        codes[batch.calib[rel]] = 0
        noncalib = codes != 0
        reply = (struct.pack("<BI", 0, count) + _pack_codes(codes)
                 + struct.pack("<I", int(noncalib.sum()))
                 + pack_bits(batch.intensity[rel][noncalib] == 1))
        link.send(MSG_TALLY_DIGEST, reply)

        x_sel = codes == 2
        x_bits = batch.bit[rel[x_sel]]
        link.send(MSG_X_BITS_DISCLOSE,
                  struct.pack("<BI", XDISC_SIFT, x_bits.size) + pack_bits(x_bits))
        key.charge(int(x_bits.size))
        sifted_parts.append(batch.bit[rel[codes == 1]])

    digest = dict(sent)
    digest["calib"] = calib_sent
    digest["n_pulses"] = cfg.n_pulses
    digest["t"] = cfg.n_pulses / params.clock_hz
    link.send(MSG_TALLY_DIGEST, struct.pack(
        "<B6Qd", 1, sent[("Z", 1)], sent[("Z", 2)], sent[("X", 1)],
        sent[("X", 2)], calib_sent, cfg.n_pulses, digest["t"]))

    bits = np.concatenate(sifted_parts) if sifted_parts else np.zeros(0, np.uint8)
    key.advance("sifted", bits)
    return key, digest


@dataclass
class BobSiftState:
    key: KeyBuffer
    intensity_mu1: np.ndarray   # per sifted bit, True -> mu1
    det_z: np.ndarray
    det_x: np.ndarray
    err_x: np.ndarray
    sent: dict = None
    t: float = None
    n_pulses: int = 0


def bob_run_sift(link: wire.Link, cfg: SessionConfig) -> BobSiftState:
    """Receive detections, announce them, and assemble sifted key + tallies."""
    key = KeyBuffer(role="raw")
    sifted_parts, intens_parts = [], []
    det_z = np.zeros(2, dtype=np.int64)
    det_x = np.zeros(2, dtype=np.int64)
    err_x = np.zeros(2, dtype=np.int64)

    while True:
        det = _parse_quantum(link.recv_expect(MSG_QUANTUM_SIM))
        count = len(det)
        link.send(MSG_DETECTED_INDICES,
                  struct.pack("<BI", 1 if det.last else 0, count)
                  + encode_index_deltas(det.index))
        link.send(MSG_BASIS_REVEAL,
                  struct.pack("<I", count) + pack_bits(det.basis_z))

        payload = link.recv_expect(MSG_TALLY_DIGEST)
        subtype, count_r = struct.unpack_from("<BI", payload, 0)
        if subtype != 0 or count_r != count:
            raise ProtocolError("unexpected sift reply")
        codes = _unpack_codes(payload[5:], count)
        off = 5 + 2 * ((count + 7) // 8)
        (n_nc,) = struct.unpack_from("<I", payload, off)
        int_mu1 = unpack_bits(payload[off + 4:], n_nc).astype(bool)

        payload = link.recv_expect(MSG_X_BITS_DISCLOSE)
        purpose, n_x = struct.unpack_from("<BI", payload, 0)
        if purpose != XDISC_SIFT:
            raise ProtocolError("expected sift X-bit disclosure")
        alice_x = unpack_bits(payload[5:], n_x)
        key.charge(n_x)

        noncalib = codes != 0
        k_idx = np.where(int_mu1, 0, 1)  # tally index per non-calib detection
        codes_nc = codes[noncalib]
        np.add.at(det_z, k_idx[codes_nc == 1], 1)
        np.add.at(det_x, k_idx[codes_nc == 2], 1)

        x_mask_nc = codes_nc == 2
        bob_x = det.bit[noncalib][x_mask_nc]
        if n_x != bob_x.size:
            raise ProtocolError("X disclosure count mismatch")
        np.add.at(err_x, k_idx[x_mask_nc][alice_x != bob_x], 1)

        z_mask_nc = codes_nc == 1
        sifted_parts.append(det.bit[noncalib][z_mask_nc])
        intens_parts.append(int_mu1[z_mask_nc])

        if det.last:
            break

    payload = link.recv_expect(MSG_TALLY_DIGEST)
    vals = struct.unpack("<B6Qd", payload)
    if vals[0] != 1:
        raise ProtocolError("expected final tally digest")
    sent = {("Z", 1): vals[1], ("Z", 2): vals[2],
            ("X", 1): vals[3], ("X", 2): vals[4]}

    bits = np.concatenate(sifted_parts) if sifted_parts else np.zeros(0, np.uint8)
    key.advance("sifted", bits)
    return BobSiftState(
        key=key,
        intensity_mu1=(np.concatenate(intens_parts) if intens_parts
                       else np.zeros(0, dtype=bool)),
        det_z=det_z, det_x=det_x, err_x=err_x,
        sent=sent, t=vals[7], n_pulses=vals[6])


def sift(alice_link: wire.Link, bob_link: wire.Link, cfg: SessionConfig):
    """Run both sift roles over a link pair (threads), returning
    (alice KeyBuffer, bob KeyBuffer, ObservedTallies without Z errors).

    Z-basis error counts become known only after reconciliation; the
    returned tallies carry zeros there.
    """
    import threading

    alice_out = {}

    def alice_side():
        try:
            alice_out["key"], alice_out["digest"] = alice_run_sift(alice_link, cfg)
        except Exception as exc:  # unblock the peer promptly
            alice_out["error"] = exc
            alice_link.abort(f"alice sift failed: {exc}")

    thread = threading.Thread(target=alice_side, daemon=True)
    thread.start()
    state = bob_run_sift(bob_link, cfg)
    thread.join(timeout=600)
    if "error" in alice_out:
        raise alice_out["error"]
    if "key" not in alice_out:
        raise ProtocolError("alice sift did not complete")
    tallies = _tallies_from_state(state, err_z=np.zeros(2, dtype=np.int64))
    return alice_out["key"], state.key, tallies


def _tallies_from_state(state: BobSiftState, err_z) -> ObservedTallies:
    return ObservedTallies(
        sent_z=(state.sent[("Z", 1)], state.sent[("Z", 2)]),
        det_z=tuple(int(v) for v in state.det_z),
        err_z=tuple(int(v) for v in err_z),
        sent_x=(state.sent[("X", 1)], state.sent[("X", 2)]),
        det_x=tuple(int(v) for v in state.det_x),
        err_x=tuple(int(v) for v in state.err_x),
        t=state.t)


# ---------------------------------------------------------------------------
# full pipeline, both roles


def _sample_positions(n_sifted: int, fraction: float, seed_shared) -> np.ndarray:
    rng = np.random.default_rng(_seed_for(seed_shared, 0x5A3F1E))
    n_sample = int(n_sifted * fraction)
    if n_sample == 0:
        return np.zeros(0, dtype=np.int64)
    return np.sort(rng.choice(n_sifted, size=n_sample, replace=False))


def run_session_alice(link: wire.Link, cfg: SessionConfig) -> SessionResult:
    key, digest = alice_run_sift(link, cfg)
    n_sift = len(key)

    # QBER bootstrap: disclose shared-seed sample positions, then drop them
    pos = _sample_positions(n_sift, cfg.bootstrap_fraction, cfg.seed_shared)
    sample_bits = key.bits[pos]
    link.send(MSG_X_BITS_DISCLOSE,
              struct.pack("<BI", XDISC_QBER_SAMPLE, sample_bits.size)
              + pack_bits(sample_bits))
    key.charge(sample_bits.size)
    kept = np.ones(n_sift, dtype=bool)
    kept[pos] = False
    key.bits = key.bits[kept]

    cascade_cfg = replace(cfg.cascade, rng_seed=cfg.seed_shared)
    responder = CascadeResponder(key.bits, cascade_cfg)
    msg_type, payload = responder.serve(link)
    key.charge(responder.parities_sent + responder.crc_bits_sent
               + responder.revealed_bits)

    if msg_type != MSG_PA_SEED:
        raise ProtocolError(f"expected PA seed, got 0x{msg_type:02x}")
    out_len, k, e, seed_len = struct.unpack_from("<QBIB", payload, 0)
    seed = payload[14:14 + seed_len]
    link.send(MSG_PA_CONFIRM,
              hashlib.blake2b(payload, digest_size=16).digest())

    # drop frames Bob reported failed (revealed ones) exactly as he does
    surviving = _surviving_mask(len(key), cascade_cfg.frame_bits,
                                responder.failed_frames)
    key.crc_ok = not responder.failed_frames
    key.advance("reconciled", key.bits[surviving])

    secret_bits = _finish_pa(key, out_len, k, e, seed)
    return SessionResult(role="alice", secret=secret_bits, sifted_len=n_sift,
                         reconciled_len=len(key), out_len=out_len,
                         counters=link.counters)


def _surviving_mask(n_bits: int, frame_bits: int, failed_frames) -> np.ndarray:
    mask = np.ones(n_bits, dtype=bool)
    for fid in failed_frames:
        mask[fid * frame_bits:(fid + 1) * frame_bits] = False
    return mask


def _finish_pa(key: KeyBuffer, out_len: int, k: int, e: int, seed: bytes) -> KeyBuffer:
    config = PAConfig(block_count=k, prime_exponent=e, seed=seed)
    secret = pa_compress(key.bits, out_len, config)
    out = KeyBuffer(role=key.role, bits=key.bits, leak_bits=key.leak_bits,
                    crc_ok=key.crc_ok)
    out.advance("secret", secret)
    return out


def run_session_bob(link: wire.Link, cfg: SessionConfig,
                    f_override: float = None) -> SessionResult:
    state = bob_run_sift(link, cfg)
    key = state.key
    n_sift = len(key)

    # QBER bootstrap sample from Alice
    payload = link.recv_expect(MSG_X_BITS_DISCLOSE)
    purpose, n_sample = struct.unpack_from("<BI", payload, 0)
    if purpose != XDISC_QBER_SAMPLE:
        raise ProtocolError("expected QBER sample disclosure")
    alice_sample = unpack_bits(payload[5:], n_sample)
    pos = _sample_positions(n_sift, cfg.bootstrap_fraction, cfg.seed_shared)
    if pos.size != n_sample:
        raise ProtocolError("sample position count mismatch")
    sample_mismatch = alice_sample != key.bits[pos]
    qber_est = float(np.mean(sample_mismatch)) if n_sample else 0.01
    qber_est = min(max(qber_est, 1e-3), 0.25)
    key.charge(n_sample)
    kept = np.ones(n_sift, dtype=bool)
    kept[pos] = False
    key.bits = key.bits[kept]
    intensity_mu1 = state.intensity_mu1[kept]

    cascade_cfg = replace(cfg.cascade, rng_seed=cfg.seed_shared)
    outcome = cascade_correct(link, key.bits, cascade_cfg, qber_est)
    report = outcome.report
    report.sample_bits = n_sample  # already charged to the ledger above
    key.charge(report.disclosed_parities + report.crc_bits + report.revealed_bits)

    # exact Z error counts: flips in surviving frames, mismatches found in
    # revealed frames, and the disclosed sample's mismatches
    err_z = np.zeros(2, dtype=np.int64)
    for frame in outcome.frames:
        gpos = frame.frame_id * cascade_cfg.frame_bits + frame.error_positions
        np.add.at(err_z, np.where(intensity_mu1[gpos], 0, 1), 1)
    np.add.at(err_z, np.where(state.intensity_mu1[pos][sample_mismatch], 0, 1), 1)

    tallies = _tallies_from_state(state, err_z=err_z)
    key_result, secret_len, f_real = _evaluate_key_length(
        tallies, cfg, report, f_override)
    # bits removed before hashing (sample + failed frames) cannot carry key
    n_removed = n_sample + (len(key.bits) - len(outcome.surviving_bits))
    out_len = max(0, min(secret_len - n_removed,
                         len(outcome.surviving_bits) // cfg.pa_block_count))

    key.advance("reconciled", outcome.surviving_bits)
    key.crc_ok = report.crc_failures == 0

    e = cfg.pa_exponent or mersenne_exponent_for(
        max(len(key), 1), cfg.pa_block_count)
    seed = np.random.default_rng(_seed_for(cfg.seed_bob, 0x9A5EED)).bytes(32)
    payload = struct.pack("<QBIB", out_len, cfg.pa_block_count, e, len(seed)) + seed
    link.send(MSG_PA_SEED, payload)
    confirm = link.recv_expect(MSG_PA_CONFIRM)
    if confirm != hashlib.blake2b(payload, digest_size=16).digest():
        raise ProtocolError("PA seed confirmation mismatch")

    secret = _finish_pa(key, out_len, cfg.pa_block_count, e, seed)
    qber = (report.corrected_bits / report.total_bits) if report.total_bits else 0.0
    return SessionResult(role="bob", secret=secret, sifted_len=n_sift,
                         reconciled_len=len(key), tallies=tallies,
                         key_result=key_result, reconcile_report=report,
                         qber_realized=qber, f_realized=f_real,
                         out_len=out_len, counters=link.counters)


def _evaluate_key_length(tallies: ObservedTallies, cfg: SessionConfig, report,
                         f_override):
    """Finite-key length from the realized tallies and actual EC leakage."""
    try:
        bounds = estimate_decoy_bounds(tallies, cfg.params)
    except InsufficientStatistics:
        return None, 0, None
    if not bounds.feasible:
        return None, 0, None
    lam_ec = report.disclosed_parities + report.crc_bits + report.revealed_bits
    e_z = tallies.e_z
    if e_z > 0:
        f_real = lam_ec / (tallies.n_z * _h(e_z))
        f_eff = max(1.0, f_real)
    else:
        f_real, f_eff = None, cfg.f_fallback
    if f_override is not None:
        f_eff, f_real = f_override, f_override
    result = secret_key_length(tallies, bounds, f_eff, cfg.params)
    return result, result.secret_len, f_real


def _h(p):
    from qkdf.finitekey import binary_entropy
    return binary_entropy(p)


def run_loopback_session(cfg: SessionConfig, f_override: float = None):
    """Both roles in one process over a memory link pair."""
    import threading

    link_a, link_b = wire.memory_link_pair()
    out = {}

    def alice_side():
        try:
            out["alice"] = run_session_alice(link_a, cfg)
        except Exception as exc:
            out["error"] = exc
            link_a.abort(f"alice session failed: {exc}")

    thread = threading.Thread(target=alice_side, daemon=True)
    thread.start()
    bob = run_session_bob(link_b, cfg, f_override=f_override)
    thread.join(timeout=900)
    if "error" in out:
        raise out["error"]
    if "alice" not in out:
        raise ProtocolError("alice session did not complete")
    return out["alice"], bob


# ---------------------------------------------------------------------------
# key files


def write_key_file(path, key: KeyBuffer, seed_digest: bytes = b""):
    """32-byte header (magic, role, bit length, seed digest) + packed bits."""
    digest = (seed_digest + b"\x00" * 16)[:16]
    header = KEYFILE_HEADER.pack(KEYFILE_MAGIC, 1, ROLE_ORDER.index(key.role),
                                 0, len(key.bits), digest)
    Path(path).write_bytes(header + pack_bits(key.bits))


def read_key_file(path) -> KeyBuffer:
    raw = Path(path).read_bytes()
    magic, version, role_idx, _, n_bits, _ = KEYFILE_HEADER.unpack_from(raw, 0)
    if magic != KEYFILE_MAGIC or version != 1:
        raise ValueError("not a key file")
    bits = unpack_bits(raw[KEYFILE_HEADER.size:], n_bits)
    return KeyBuffer(role=ROLE_ORDER[role_idx], bits=bits)
