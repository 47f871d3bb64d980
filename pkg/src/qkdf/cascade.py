"""Interactive Cascade error reconciliation over the framed link.

Bob drives: for each 64-kb frame he syncs block parities with Alice pass
by pass, binary-searches odd-parity blocks (all blocks of a pass in
lockstep, so one message round serves every active search level), and
back-propagates each correction through the cached parities of earlier
passes. Frames are verified with CRC-64; a failing frame is revealed by
Alice, counted into the leakage ledger, and dropped from the key.

Block schedule: the first pass uses a power of two near 1/QBER and later
passes grow geometrically up to half the frame, which keeps the
disclosed-parity budget near the Shannon limit while leaving surviving
error pairs essentially no partition to hide in. The classic 0.73/QBER
first block is available through first_block_len.

Alice's side is a stateless-per-message responder; Bob's scheduler
multiplexes up to parallel_units frame workers over one ordered link with
frame-id-correlated requests, which keeps transcripts deterministic for
fixed seeds.
"""

from __future__ import annotations

import math
import struct
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from qkdf import wire
from qkdf.finitekey import binary_entropy
from qkdf.wire import (MSG_CASCADE_PARITY_REQUEST, MSG_CASCADE_PARITY_REPLY,
                       MSG_FRAME_CRC64, MSG_TALLY_DIGEST, MSG_X_BITS_DISCLOSE,
                       XDISC_FRAME_REVEAL, ProtocolError, pack_bits,
                       unpack_bits)

CASCADE_PHASE_DONE = 2  # 0x04 subtype marking the end of reconciliation


@dataclass(frozen=True)
class CascadeConfig:
    frame_bits: int = 65536
    passes: int = 8
    first_block_len: int = None      # None -> power-of-two auto rule
    block_growth: int = 4            # geometric growth, capped at frame/2
    parallel_units: int = 100
    rng_seed: int = 0
    bootstrap_fraction: float = 0.01

    def __post_init__(self):
        if self.passes < 2:
            raise ValueError("cascade needs at least 2 passes")
        if self.frame_bits < 8:
            raise ValueError("frame_bits too small")

    def schedule(self, qber_est: float, frame_len: int = None) -> list:
        """Block lengths per pass for one frame.

        Growth continues geometrically up to half the frame; the slow
        approach (rather than jumping straight to frame/2) keeps the
        chance that an error pair survives every partition negligible.
        """
        n = frame_len or self.frame_bits
        q = min(max(qber_est, 1e-4), 0.25)
        if self.first_block_len is not None:
            k1 = self.first_block_len
        else:
            k1 = 2 ** int(round(math.log2(1.0 / q)))
        k1 = int(min(max(k1, 2), max(n // 4, 2)))
        blocks = [k1]
        while len(blocks) < self.passes:
            blocks.append(int(min(blocks[-1] * self.block_growth, max(n // 2, 2))))
        return blocks


@dataclass
class ReconcileReport:
    """Aggregate reconciliation accounting.

    f_efficiency compares every disclosed error-correction bit (parities,
    CRC values, revealed frames) to the Shannon cost of the realized
    error rate; leak_bits is the same total, for the key ledger.
    """

    frames: int = 0
    corrected_bits: int = 0
    disclosed_parities: int = 0
    crc_bits: int = 0
    revealed_bits: int = 0
    sample_bits: int = 0
    crc_failures: int = 0
    total_bits: int = 0
    surviving_bits: int = 0
    per_frame: list = field(default_factory=list)

    @property
    def leak_bits(self) -> int:
        return (self.disclosed_parities + self.crc_bits + self.revealed_bits
                + self.sample_bits)

    @property
    def frame_error_rate(self) -> float:
        return self.crc_failures / self.frames if self.frames else 0.0

    @property
    def f_efficiency(self) -> float:
        if self.total_bits == 0 or self.corrected_bits == 0:
            return float("inf") if self.leak_bits else 0.0
        h = binary_entropy(self.corrected_bits / self.total_bits)
        return self.leak_bits / (self.total_bits * h)


def _frame_perm(seed: int, frame_id: int, pass_idx: int, n: int):
    if pass_idx == 0:
        return None  # identity
    ss = np.random.SeedSequence([seed & 0xFFFFFFFF, frame_id, pass_idx])
    return np.random.default_rng(ss).permutation(n)


def _block_parities(bits: np.ndarray, k: int) -> np.ndarray:
    n = len(bits)
    nb = (n + k - 1) // k
    padded = np.zeros(nb * k, dtype=np.uint8)
    padded[:n] = bits
    return np.bitwise_xor.reduce(padded.reshape(nb, k), axis=1)


# ---------------------------------------------------------------------------
# Alice: parity responder


class CascadeResponder:
    """Serves parity requests, CRC verification, and failure reveals."""

    def __init__(self, key_bits: np.ndarray, config: CascadeConfig):
        self.bits = np.asarray(key_bits, dtype=np.uint8)
        self.config = config
        self._prefix = {}  # (frame_id, pass) -> prefix-xor of permuted frame
        self.parities_sent = 0
        self.crc_bits_sent = 0
        self.revealed_bits = 0
        self.failed_frames = []

    def _frame(self, frame_id: int) -> np.ndarray:
        lo = frame_id * self.config.frame_bits
        hi = min(lo + self.config.frame_bits, len(self.bits))
        if lo >= len(self.bits):
            raise ProtocolError(f"frame {frame_id} out of range")
        return self.bits[lo:hi]

    def _prefix_xor(self, frame_id: int, pass_idx: int) -> np.ndarray:
        key = (frame_id, pass_idx)
        if key not in self._prefix:
            frame = self._frame(frame_id)
            perm = _frame_perm(self.config.rng_seed, frame_id, pass_idx, len(frame))
            permuted = frame if perm is None else frame[perm]
            self._prefix[key] = np.bitwise_xor.accumulate(permuted)
        return self._prefix[key]

    def handle(self, link: wire.Link, msg_type: int, payload: bytes) -> bool:
        """Process one cascade message; False if it belongs to another phase."""
        if msg_type == MSG_CASCADE_PARITY_REQUEST:
            frame_id, pass_idx = struct.unpack_from("<IB", payload, 0)
            if (len(payload) - 5) % 8:
                raise ProtocolError("malformed parity request")
            count = (len(payload) - 5) // 8
            ranges = np.frombuffer(payload, dtype="<u4", offset=5,
                                   count=2 * count).reshape(count, 2)
            prefix = self._prefix_xor(frame_id, pass_idx)
            pars = np.zeros(count, dtype=np.uint8)
            for i, (lo, hi) in enumerate(ranges):
                if not 0 <= lo < hi <= len(prefix):
                    raise ProtocolError("parity range out of bounds")
                pars[i] = prefix[hi - 1] ^ (prefix[lo - 1] if lo else 0)
            reply = struct.pack("<IBI", frame_id, pass_idx, count) + pack_bits(pars)
            link.send(MSG_CASCADE_PARITY_REPLY, reply)
            self.parities_sent += count
            return True
        if msg_type == MSG_FRAME_CRC64:
            frame_id, crc_bob = struct.unpack("<IQ", payload)
            frame = self._frame(frame_id)
            crc_alice = wire.crc64_ecma182(pack_bits(frame))
            link.send(MSG_FRAME_CRC64, struct.pack("<IQ", frame_id, crc_alice))
            self.crc_bits_sent += 64
            if crc_alice != crc_bob:
                reveal = (struct.pack("<BII", XDISC_FRAME_REVEAL, frame_id, len(frame))
                          + pack_bits(frame))
                link.send(MSG_X_BITS_DISCLOSE, reveal)
                self.revealed_bits += len(frame)
                self.failed_frames.append(frame_id)
            return True
        return False

    def serve(self, link: wire.Link):
        """Serve until a non-cascade message arrives; returns it."""
        while True:
            msg_type, payload = link.recv()
            if msg_type == MSG_TALLY_DIGEST and payload[:1] == bytes([CASCADE_PHASE_DONE]):
                return msg_type, payload
            if not self.handle(link, msg_type, payload):
                return msg_type, payload


# ---------------------------------------------------------------------------
# Bob: frame worker and scheduler


def _frame_worker(bits: np.ndarray, frame_id: int, schedule: list, seed: int):
    """Correct one frame; a generator yielding (pass_idx, ranges) parity
    requests and receiving parity bit arrays.

    Every parity query splits a known-parity interval in two (the second
    half's parity is inferred from the parent), and the per-block interval
    trail persists, so repeat searches triggered by back-propagation start
    from the finest known interval instead of the whole block.

    Returns (corrected bits, disclosed parity count, global flip positions).
    """
    n = len(bits)
    bits = bits.copy()
    n_passes = len(schedule)
    perms, invperms, permuted = [], [], []
    bob_par, alice_par, trails = [], [], []
    disclosed = 0
    flips = []

    def apply_flip(g: int, queue):
        bits[g] ^= 1
        flips.append(g)
        for j2 in range(len(permuted)):
            p2 = g if perms[j2] is None else int(invperms[j2][g])
            permuted[j2][p2] ^= 1
            blk = p2 // schedule[j2]
            bob_par[j2][blk] ^= 1
            if bob_par[j2][blk] != alice_par[j2][blk]:
                queue.append((j2, blk))

    def bob_xor(j, lo, hi):
        return int(np.bitwise_xor.reduce(permuted[j][lo:hi])) if hi > lo else 0

    queue = deque()
    for j in range(n_passes):
        k = schedule[j]
        perm = _frame_perm(seed, frame_id, j, n)
        perms.append(perm)
        invperms.append(None if perm is None else np.argsort(perm))
        permuted.append(bits.copy() if perm is None else bits[perm])
        bob_par.append(_block_parities(permuted[j], k))
        nb = len(bob_par[j])
        ranges = np.stack([np.arange(nb, dtype=np.uint32) * k,
                           np.minimum(np.arange(1, nb + 1, dtype=np.uint32) * k, n)],
                          axis=1)
        ap = yield (j, ranges)
        disclosed += nb
        alice_par.append(ap.astype(np.uint8))
        trails.append([[(int(r[0]), int(r[1]), int(p))] for r, p in zip(ranges, ap)])
        for b in np.nonzero(ap != bob_par[j])[0]:
            queue.append((j, int(b)))

        while queue:
            # drain the earliest pass first; its blocks are disjoint, so the
            # binary searches can run in lockstep sharing message rounds
            jj = min(item[0] for item in queue)
            blocks, rest = [], deque()
            seen = set()
            for item in queue:
                if item[0] != jj:
                    rest.append(item)
                elif item[1] not in seen and \
                        bob_par[jj][item[1]] != alice_par[jj][item[1]]:
                    seen.add(item[1])
                    blocks.append(item[1])
                # stale or duplicate entries of this pass are dropped
            queue = rest
            if not blocks:
                continue

            # one search per mismatching known interval of each odd block
            searches = []
            for b in blocks:
                for idx, (lo, hi, apar) in enumerate(trails[jj][b]):
                    if bob_xor(jj, lo, hi) != apar:
                        searches.append({"block": b, "idx": idx, "lo": lo,
                                         "hi": hi, "apar": apar, "pieces": []})
            while True:
                active = [s for s in searches if s["hi"] - s["lo"] > 1]
                if not active:
                    break
                ranges = np.array([[s["lo"], (s["lo"] + s["hi"]) // 2]
                                   for s in active], dtype=np.uint32)
                pars = yield (jj, ranges)
                disclosed += len(active)
                for s, a_left in zip(active, pars):
                    lo, hi = s["lo"], s["hi"]
                    mid = (lo + hi) // 2
                    a_left = int(a_left)
                    a_right = s["apar"] ^ a_left
                    if bob_xor(jj, lo, mid) != a_left:
                        s["pieces"].append((mid, hi, a_right))
                        s["hi"], s["apar"] = mid, a_left
                    else:
                        s["pieces"].append((lo, mid, a_left))
                        s["lo"], s["apar"] = mid, a_right

            rebuild = {}
            for s in searches:
                s["pieces"].append((s["lo"], s["hi"], s["apar"]))
                rebuild.setdefault(s["block"], []).append(s)
            for b, done in rebuild.items():
                trail = trails[jj][b]
                for s in sorted(done, key=lambda s: s["idx"], reverse=True):
                    trail[s["idx"]:s["idx"] + 1] = s["pieces"]
                trail.sort(key=lambda iv: iv[0])
            for s in searches:
                p = s["lo"]
                g = p if perms[jj] is None else int(perms[jj][p])
                apply_flip(g, queue)

    return bits, disclosed, flips


@dataclass
class FrameOutcome:
    frame_id: int
    bits: np.ndarray
    errors: int           # corrected flips, or mismatches found via reveal
    parities: int
    failed: bool
    error_positions: np.ndarray  # global within-frame positions


@dataclass
class CascadeOutcome:
    frames: list                  # FrameOutcome in frame order
    report: ReconcileReport

    @property
    def surviving_bits(self) -> np.ndarray:
        good = [f.bits for f in self.frames if not f.failed]
        return np.concatenate(good) if good else np.zeros(0, dtype=np.uint8)


def cascade_correct(link: wire.Link, key_bits: np.ndarray, config: CascadeConfig,
                    qber_est: float) -> CascadeOutcome:
    """Drive reconciliation of the whole key over the link (Bob side).

    Frames run concurrently in batches of parallel_units, multiplexed by
    frame id; the QBER estimate for block sizing starts from qber_est and
    tracks each previous frame's realized error rate.
    """
    key_bits = np.asarray(key_bits, dtype=np.uint8)
    n_frames = (len(key_bits) + config.frame_bits - 1) // config.frame_bits
    report = ReconcileReport(total_bits=len(key_bits))
    outcomes = []
    q_next = qber_est

    for start in range(0, n_frames, max(config.parallel_units, 1)):
        batch_ids = range(start, min(start + max(config.parallel_units, 1), n_frames))
        workers, pending = {}, {}
        for fid in batch_ids:
            frame = key_bits[fid * config.frame_bits:(fid + 1) * config.frame_bits]
            schedule = config.schedule(q_next, len(frame))
            w = _frame_worker(frame, fid, schedule, config.rng_seed)
            workers[fid] = w
            pending[fid] = w.send(None)

        results = {}
        while pending:
            for fid in sorted(pending):
                pass_idx, ranges = pending[fid]
                payload = (struct.pack("<IB", fid, pass_idx)
                           + np.asarray(ranges, dtype="<u4").tobytes())
                link.send(MSG_CASCADE_PARITY_REQUEST, payload)
            replies_due = sorted(pending)
            for _ in replies_due:
                payload = link.recv_expect(MSG_CASCADE_PARITY_REPLY)
                fid, pass_idx, count = struct.unpack_from("<IBI", payload, 0)
                if fid not in pending:
                    raise ProtocolError(f"unsolicited parity reply for frame {fid}")
                pars = unpack_bits(payload[9:], count)
                try:
                    pending[fid] = workers[fid].send(pars)
                except StopIteration as stop:
                    results[fid] = stop.value
                    del pending[fid], workers[fid]

        for fid in batch_ids:
            bits, disclosed, flips = results[fid]
            outcome = _verify_frame(link, fid, bits, disclosed, flips)
            report.frames += 1
            report.disclosed_parities += outcome.parities
            report.crc_bits += 64
            report.corrected_bits += outcome.errors
            if outcome.failed:
                report.crc_failures += 1
                report.revealed_bits += len(outcome.bits)
            else:
                report.surviving_bits += len(outcome.bits)
            report.per_frame.append({
                "frame_id": fid, "bits": len(outcome.bits),
                "errors": outcome.errors, "parities": outcome.parities,
                "failed": outcome.failed,
            })
            q_next = min(max(outcome.errors / max(len(outcome.bits), 1), 1e-4), 0.25)
            outcomes.append(outcome)

    return CascadeOutcome(frames=outcomes, report=report)


def _verify_frame(link, fid, bits, disclosed, flips) -> FrameOutcome:
    crc_bob = wire.crc64_ecma182(pack_bits(bits))
    link.send(MSG_FRAME_CRC64, struct.pack("<IQ", fid, crc_bob))
    payload = link.recv_expect(MSG_FRAME_CRC64)
    rfid, crc_alice = struct.unpack("<IQ", payload)
    if rfid != fid:
        raise ProtocolError("CRC reply for wrong frame")
    if crc_alice == crc_bob:
        return FrameOutcome(fid, bits, len(flips), disclosed, False,
                            np.asarray(sorted(flips), dtype=np.int64))
    payload = link.recv_expect(MSG_X_BITS_DISCLOSE)
    purpose, rfid, count = struct.unpack_from("<BII", payload, 0)
    if purpose != XDISC_FRAME_REVEAL or rfid != fid:
        raise ProtocolError("expected frame reveal after CRC mismatch")
    alice_bits = unpack_bits(payload[9:], count)
    # bits of the revealed frame are public: count its true errors and drop it
    orig = bits.copy()
    for g in flips:
        orig[g] ^= 1  # undo corrections to recover Bob's sifted frame
    mism = np.nonzero(alice_bits != orig)[0]
    return FrameOutcome(fid, alice_bits, int(mism.size), disclosed, True,
                        mism.astype(np.int64))


# ---------------------------------------------------------------------------
# in-process convenience wrappers (responder thread + corrector)


def _run_local(alice_bits, bob_bits, config: CascadeConfig, qber_est: float,
               links=None):
    import threading

    if links is None:
        links = wire.memory_link_pair()
    link_a, link_b = links
    responder = CascadeResponder(alice_bits, config)

    def serve():
        try:
            responder.serve(link_a)
        except (wire.LinkClosed, ProtocolError):
            pass
        except Exception as exc:  # fail the corrector fast, not by timeout
            link_a.abort(f"responder failed: {exc}")

    thread = threading.Thread(target=serve, daemon=True)
    thread.start()
    outcome = cascade_correct(link_b, bob_bits, config, qber_est)
    link_b.send(MSG_TALLY_DIGEST, bytes([CASCADE_PHASE_DONE]))
    thread.join(timeout=60)
    return outcome, responder, link_a, link_b


def reconcile_frame(alice_frame, bob_frame, link=None, config: CascadeConfig = None,
                    qber_est: float = None):
    """Reconcile a single frame in-process; returns (corrected, report).

    With qber_est omitted, a 1%% sample at shared-seed positions is
    disclosed for the estimate and charged to the parity ledger.
    """
    from dataclasses import replace

    alice_frame = np.asarray(alice_frame, dtype=np.uint8)
    bob_frame = np.asarray(bob_frame, dtype=np.uint8)
    if len(alice_frame) != len(bob_frame):
        raise ValueError("frames must have equal length")
    config = replace(config or CascadeConfig(), frame_bits=len(alice_frame),
                     parallel_units=1)
    sample_bits = 0
    if qber_est is None:
        rng = np.random.default_rng(np.random.SeedSequence([config.rng_seed, 0xB007]))
        n_sample = max(1, int(len(alice_frame) * config.bootstrap_fraction))
        pos = rng.choice(len(alice_frame), size=n_sample, replace=False)
        qber_est = float(np.mean(alice_frame[pos] != bob_frame[pos]))
        qber_est = min(max(qber_est, 1e-3), 0.25)
        sample_bits = n_sample
    outcome, responder, *_ = _run_local(alice_frame, bob_frame, config, qber_est)
    outcome.report.sample_bits += sample_bits
    return outcome.frames[0].bits, outcome.report


def reconcile_stream(alice_key, bob_key, link=None, config: CascadeConfig = None,
                     qber_est: float = 0.01):
    """Reconcile a full key in-process; returns (KeyBuffer-ready bits, report)."""
    config = config or CascadeConfig()
    outcome, responder, *_ = _run_local(
        np.asarray(alice_key, dtype=np.uint8),
        np.asarray(bob_key, dtype=np.uint8), config, qber_est)
    return outcome.surviving_bits, outcome.report
