"""Privacy amplification by hybrid universal hashing over Mersenne fields.

The reconciled key is split into k blocks of gamma = e bits (zero-padded)
and hashed in two seeded stages modulo the Mersenne prime p = 2^e - 1:

  1. multilinear stage: y = sum_i a_i * x_i  (mod p), a_i uniform in [1, p-1]
  2. modular-arithmetic stage: z = b*y + c    (mod p), b in [1, p-1],
     c in [0, p-1]; the secret key is the low out_len bits of z.

Distinct inputs collide with probability <= 1/p + (1 + 2^out_len/p)/2^out_len,
within a factor two of the ideal 2^-out_len for every supported geometry
(out_len <= e always holds because the compression ratio is capped at 1/k).
Both stages draw their coefficients from a BLAKE2b counter-mode stream
keyed by the link-exchanged seed, so the two parties compute identical
output from identical input and seed.

gmpy2 accelerates the big-integer arithmetic when present; plain Python
integers are used otherwise.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

try:
    import gmpy2
    _mpz = gmpy2.mpz
except ImportError:  # pragma: no cover - exercised only without gmpy2
    gmpy2 = None
    _mpz = int

# Mersenne prime exponents accepted for the modulus 2^e - 1.
MERSENNE_EXPONENTS = (
    13, 17, 19, 31, 61, 89, 107, 127, 521, 607, 1279, 2203, 2281, 3217,
    4253, 4423, 9689, 9941, 11213, 19937, 21701, 23209, 44497, 86243,
    110503, 132049, 216091, 756839, 859433, 1257787, 1398269, 2976221,
    3021377, 6972593, 13466917, 20996011, 24036583, 25964951, 30402457,
    32582657, 37156667, 42643801, 43112609, 57885161,
)
FULL_SCALE_GAMMA = 57885161
# exponents above this need an explicit opt-in (minutes of CPU, GBs of RAM)
FULL_SCALE_THRESHOLD = 13466917


class BadPrime(Exception):
    """Configured exponent is not in the validated Mersenne list."""


class RatioExceeded(Exception):
    """Requested output exceeds the supported compression ratio."""


@dataclass(frozen=True)
class PAConfig:
    """Hash geometry: k blocks of gamma = prime_exponent bits each."""

    block_count: int = 2
    prime_exponent: int = 521
    seed: bytes = b""
    allow_full_scale: bool = False

    def __post_init__(self):
        if self.block_count < 1:
            raise ValueError("block_count must be >= 1")
        if self.prime_exponent not in MERSENNE_EXPONENTS:
            raise BadPrime(f"2^{self.prime_exponent}-1 is not a validated Mersenne prime")
        if (self.prime_exponent >= FULL_SCALE_THRESHOLD
                and not self.allow_full_scale):
            raise ValueError(
                f"exponent {self.prime_exponent} needs a full-scale opt-in; "
                "pass allow_full_scale=True to enable")

    @property
    def gamma(self) -> int:
        return self.prime_exponent

    @property
    def input_capacity(self) -> int:
        return self.block_count * self.gamma

    @property
    def max_ratio(self) -> float:
        return 1.0 / self.block_count


def mersenne_exponent_for(input_bits: int, block_count: int = 2,
                          allow_full_scale: bool = False) -> int:
    """Smallest validated exponent with k*e >= input_bits."""
    for e in MERSENNE_EXPONENTS:
        if e >= FULL_SCALE_THRESHOLD and not allow_full_scale:
            break
        if block_count * e >= input_bits:
            return e
    raise ValueError(f"no supported exponent fits {input_bits} input bits")


class _SeedStream:
    """Deterministic bit stream: BLAKE2b in counter mode, keyed by the seed."""

    def __init__(self, seed: bytes, context: bytes = b"qkdf-pa"):
        self._key = hashlib.blake2b(context + seed, digest_size=32).digest()
        self._counter = 0
        self._buf = bytearray()

    def _refill(self, need_bytes: int):
        while len(self._buf) < need_bytes:
            block = hashlib.blake2b(
                self._counter.to_bytes(8, "little"), key=self._key,
                digest_size=64).digest()
            self._buf.extend(block)
            self._counter += 1

    def take_int(self, bits: int) -> int:
        nbytes = (bits + 7) // 8
        self._refill(nbytes)
        chunk = bytes(self._buf[:nbytes])
        del self._buf[:nbytes]
        val = int.from_bytes(chunk, "big")
        excess = nbytes * 8 - bits
        return val >> excess

    def uniform_mod(self, lo: int, hi: int, bits: int) -> int:
        """Uniform integer in [lo, hi] by rejection from bits-wide draws."""
        while True:
            v = self.take_int(bits)
            if lo <= v <= hi:
                return v


def _mod_mersenne(x, e: int, p):
    """x mod (2^e - 1) by shift-add folding."""
    while x > p:
        x = (x & p) + (x >> e)
    return 0 if x == p else x


def _bits_to_int(bits: np.ndarray):
    """MSB-first bit array to integer."""
    if len(bits) == 0:
        return _mpz(0)
    packed = int.from_bytes(np.packbits(bits).tobytes(), "big")
    return _mpz(packed) >> ((-len(bits)) % 8)  # drop packbits tail padding


def _int_to_bits(val: int, n: int) -> np.ndarray:
    if n == 0:
        return np.zeros(0, dtype=np.uint8)
    raw = int(val).to_bytes((n + 7) // 8, "big")
    bits = np.unpackbits(np.frombuffer(raw, dtype=np.uint8))
    return bits[len(bits) - n:]


def pa_coefficients(config: PAConfig):
    """Expand the seed into the MMH coefficients and the MH pair (b, c)."""
    e = config.prime_exponent
    p = (_mpz(1) << e) - 1
    stream = _SeedStream(config.seed)
    a = [_mpz(stream.uniform_mod(1, int(p) - 1, e)) for _ in range(config.block_count)]
    b = _mpz(stream.uniform_mod(1, int(p) - 1, e))
    c = _mpz(stream.uniform_mod(0, int(p) - 1, e))
    return a, b, c, p


def pa_compress(input_bits, out_len: int, config: PAConfig) -> np.ndarray:
    """Hash the reconciled key down to out_len secret bits.

    input_bits is a 0/1 array (or KeyBuffer-style .bits). Zero padding up
    to k*gamma is applied internally; out_len is still capped by the
    true input length times the max ratio, so padding never inflates the
    claimed output entropy.
    """
    bits = np.asarray(getattr(input_bits, "bits", input_bits), dtype=np.uint8)
    n_in = len(bits)
    if out_len == 0:
        return np.zeros(0, dtype=np.uint8)
    if out_len < 0:
        raise ValueError("out_len must be nonnegative")
    if out_len > n_in * config.max_ratio:
        raise RatioExceeded(
            f"out_len={out_len} exceeds {config.max_ratio:.0%} of {n_in} input bits")
    if n_in > config.input_capacity:
        raise ValueError(
            f"input of {n_in} bits exceeds capacity k*gamma = {config.input_capacity}")

    e, k = config.prime_exponent, config.block_count
    a, b, c, p = pa_coefficients(config)
    padded = np.zeros(config.input_capacity, dtype=np.uint8)
    padded[:n_in] = bits

    y = _mpz(0)
    for i in range(k):
        x_i = _bits_to_int(padded[i * e:(i + 1) * e])
        y += a[i] * x_i
    y = _mod_mersenne(y, e, p)
    z = _mod_mersenne(b * y + c, e, p)
    z &= (_mpz(1) << out_len) - 1
    return _int_to_bits(z, out_len)


def pa_throughput_bench(sizes, block_count: int = 2, seed: bytes = b"bench") -> list:
    """Wall-clock compression throughput per input size. Informational only."""
    import time

    rows = []
    rng = np.random.default_rng(1234)
    for n_bits in sizes:
        e = mersenne_exponent_for(n_bits, block_count)
        config = PAConfig(block_count=block_count, prime_exponent=e, seed=seed)
        bits = rng.integers(0, 2, size=n_bits, dtype=np.uint8)
        out_len = n_bits // block_count
        t0 = time.perf_counter()
        pa_compress(bits, out_len, config)
        dt = time.perf_counter() - t0
        rows.append({"input_bits": n_bits, "exponent": e, "seconds": dt,
                     "mbps": n_bits / dt / 1e6 if dt > 0 else float("inf")})
    return rows
