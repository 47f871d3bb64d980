"""Finite-key secret-key-rate evaluation for 1-decoy biased-basis BB84.

Pure numerical core. Detection statistics come in as per-basis,
per-intensity tallies; out come lower bounds on vacuum and single-photon
contributions, an upper bound on the single-photon phase-error rate, and
the secret key length

    l = s_z0_l + s_z1_l*(1 - h(phi_z_u)) - f*n_Z*h(E_Z)
        - 6*log2(19/eps_sec) - log2(2/eps_cor)

Bound estimation applies a Hoeffding correction with failure budget
eps_sec/19 per concentration-inequality use, matching the factor 19 in
the key-length formula, and the standard random-sampling gamma term when
transferring the X-basis error estimate to Z-basis phase errors.

All functions are pure; safe for concurrent use.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field


class InsufficientStatistics(Exception):
    """Tallies are too thin to run the decoy estimation at all."""


def binary_entropy(p: float) -> float:
    """Binary entropy h(p) in bits, with h(0) = h(1) = 0 by continuity.

    Raises ValueError outside [0, 1].
    """
    if not 0.0 <= p <= 1.0:
        raise ValueError(f"binary_entropy: p={p} outside [0, 1]")
    if p == 0.0 or p == 1.0:
        return 0.0
    return -p * math.log2(p) - (1.0 - p) * math.log2(1.0 - p)


def hoeffding_delta(n: float, eps: float) -> float:
    """One-sided Hoeffding fluctuation sqrt(n/2 * ln(1/eps)).

    Upper/lower corrected counts are n +/- delta; callers clamp the lower
    one at zero.
    """
    if n < 0:
        raise ValueError("hoeffding_delta: n must be nonnegative")
    if not 0.0 < eps < 1.0:
        raise ValueError("hoeffding_delta: eps must be in (0, 1)")
    return math.sqrt(n / 2.0 * math.log(1.0 / eps))


@dataclass(frozen=True)
class SecurityParams:
    """Composable-security failure budgets (secrecy, correctness)."""

    eps_sec: float = 1e-10
    eps_cor: float = 1e-15

    def __post_init__(self):
        if not 0.0 < self.eps_sec < 1.0:
            raise ValueError("eps_sec must be in (0, 1)")
        if not 0.0 < self.eps_cor < 1.0:
            raise ValueError("eps_cor must be in (0, 1)")


@dataclass(frozen=True)
class ProtocolParams:
    """Transmitter-side protocol choices.

    p_z / q_z are Alice's / Bob's Z-basis biases, mu1 > mu2 the signal and
    decoy mean photon numbers, p_mu1 the probability of sending mu1.
    """

    p_z: float
    q_z: float
    mu1: float
    mu2: float
    p_mu1: float
    clock_hz: float = 2.5e9
    security: SecurityParams = field(default_factory=SecurityParams)
    n_z_target: float = 1e8

    def __post_init__(self):
        if not 0.5 < self.p_z <= 1.0:
            raise ValueError("p_z must be in (0.5, 1] (Z-biased protocol)")
        if not 0.0 < self.q_z <= 1.0:
            raise ValueError("q_z must be in (0, 1]")
        if not self.mu1 > self.mu2 > 0.0:
            raise ValueError("need mu1 > mu2 > 0 (1-decoy ordering)")
        if not 0.0 < self.p_mu1 < 1.0:
            raise ValueError("p_mu1 must be in (0, 1)")
        if self.clock_hz <= 0:
            raise ValueError("clock_hz must be positive")
        if self.n_z_target < 1e5:
            raise ValueError("n_z_target must be at least 1e5")

    @property
    def p_mu2(self) -> float:
        return 1.0 - self.p_mu1

    @property
    def q_x(self) -> float:
        return 1.0 - self.q_z

    def intensity(self, k: int) -> float:
        return self.mu1 if k == 1 else self.mu2

    def p_intensity(self, k: int) -> float:
        return self.p_mu1 if k == 1 else self.p_mu2


def poisson_tau(n: int, params: ProtocolParams) -> float:
    """Probability tau_n that a sent pulse contains n photons.

    tau_n = sum_k P_muk * exp(-muk) * muk^n / n!, for n in {0, 1}.
    """
    if n not in (0, 1):
        raise ValueError("poisson_tau: only n in {0, 1} is needed here")
    tau = 0.0
    for k in (1, 2):
        mu = params.intensity(k)
        tau += params.p_intensity(k) * math.exp(-mu) * mu**n
    return tau


@dataclass(frozen=True)
class ObservedTallies:
    """Per-basis, per-intensity sent/detected/error counts over duration t.

    Each triple is indexed by intensity: element 0 for mu1, element 1 for
    mu2. Values are exact integers for sampled data; the analytic
    (expected-value) path stores reals.
    """

    sent_z: tuple
    det_z: tuple
    err_z: tuple
    sent_x: tuple
    det_x: tuple
    err_x: tuple
    t: float

    def __post_init__(self):
        for sent, det, err in ((self.sent_z, self.det_z, self.err_z),
                               (self.sent_x, self.det_x, self.err_x)):
            for k in (0, 1):
                if not 0 <= err[k] <= det[k] <= sent[k]:
                    raise ValueError(
                        f"tally ordering violated: err={err[k]} det={det[k]} sent={sent[k]}")
        if self.t <= 0:
            raise ValueError("duration t must be positive")

    @property
    def n_z(self):
        return self.det_z[0] + self.det_z[1]

    @property
    def m_z(self):
        return self.err_z[0] + self.err_z[1]

    @property
    def n_x(self):
        return self.det_x[0] + self.det_x[1]

    @property
    def m_x(self):
        return self.err_x[0] + self.err_x[1]

    @property
    def e_z(self) -> float:
        """Bit error rate in Z over both intensities."""
        if self.n_z == 0:
            raise InsufficientStatistics("no Z-basis detections")
        return self.m_z / self.n_z

    def to_dict(self) -> dict:
        return {
            "sent_z": list(self.sent_z), "det_z": list(self.det_z),
            "err_z": list(self.err_z), "sent_x": list(self.sent_x),
            "det_x": list(self.det_x), "err_x": list(self.err_x),
            "t": self.t,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ObservedTallies":
        return cls(
            sent_z=tuple(d["sent_z"]), det_z=tuple(d["det_z"]),
            err_z=tuple(d["err_z"]), sent_x=tuple(d["sent_x"]),
            det_x=tuple(d["det_x"]), err_x=tuple(d["err_x"]), t=d["t"],
        )


@dataclass(frozen=True)
class DecoyBounds:
    """1-decoy bound estimates with their Poisson weights.

    feasible is False when the single-photon lower bounds collapsed to
    zero (block too small or statistics too noisy for a meaningful key);
    clamped records whether any negative intermediate was floored.
    """

    s_z0_l: float
    s_z1_l: float
    s_x1_l: float
    v_x1_u: float
    phi_z_u: float
    tau0: float
    tau1: float
    feasible: bool = True
    clamped: bool = False


def _gamma_sampling(a: float, b: float, c: float, d: float) -> float:
    """Random-sampling correction between X-basis estimate and Z phase errors."""
    if b <= 0.0:
        return 0.0
    if b >= 1.0:
        return 1.0
    front = (c + d) * (1.0 - b) * b / (c * d * math.log(2.0))
    arg = (c + d) / (c * d * (1.0 - b) * b) * (21.0 / a) ** 2
    if arg <= 1.0:
        return 0.0
    return math.sqrt(front * math.log2(arg))


def estimate_decoy_bounds(tallies: ObservedTallies, params: ProtocolParams) -> DecoyBounds:
    """Estimate vacuum/single-photon bounds and the phase-error upper bound.

    Implements the standard two-intensity (1-decoy) estimators on
    Hoeffding-corrected counts:

    * n+/-_{B,k} = e^{mu_k}/p_k * (n_{B,k} +/- delta(n_B)), delta at budget
      eps_sec/19 per correction;
    * s_{B,0}^l = tau0 * (mu1*n-_{B,mu2} - mu2*n+_{B,mu1}) / (mu1 - mu2);
    * s_{B,0}^u = 2*(tau0*min_k m+_{B,k} + delta(n_B))  [vacuum gives a
      random bit, so errors upper-bound vacuum events];
    * s_{B,1}^l = tau1*mu1/(mu2*(mu1-mu2)) * (n-_{B,mu2}
          - (mu2^2/mu1^2)*n+_{B,mu1} - ((mu1^2-mu2^2)/mu1^2)*s_{B,0}^u/tau0);
    * v_{X,1}^u = tau1 * (m+_{X,mu1} - m-_{X,mu2}) / (mu1 - mu2);
    * phi_Z^u = v_{X,1}^u/s_{X,1}^l + gamma, clamped to [0, 0.5].

    Raises InsufficientStatistics when either basis has no detections.
    """
    mu1, mu2 = params.mu1, params.mu2
    if tallies.n_z <= 0 or tallies.n_x <= 0:
        raise InsufficientStatistics(
            f"empty basis: n_z={tallies.n_z}, n_x={tallies.n_x}")

    eps1 = params.security.eps_sec / 19.0
    tau0 = poisson_tau(0, params)
    tau1 = poisson_tau(1, params)

    def corrected(det, err):
        """Scaled counts e^{mu_k}/p_k * (count +/- delta) per intensity.

        Error counts are sums of indicators over the same detection
        sample, so their fluctuation term uses the full per-basis
        detection count as well (conservative Hoeffding range).
        """
        n_tot = det[0] + det[1]
        dn = hoeffding_delta(n_tot, eps1)
        dm = dn
        n_plus, n_minus, m_plus, m_minus = {}, {}, {}, {}
        for k in (1, 2):
            scale = math.exp(params.intensity(k)) / params.p_intensity(k)
            n_plus[k] = scale * (det[k - 1] + dn)
            n_minus[k] = scale * max(0.0, det[k - 1] - dn)
            m_plus[k] = scale * (err[k - 1] + dm)
            m_minus[k] = scale * max(0.0, err[k - 1] - dm)
        return n_plus, n_minus, m_plus, m_minus, dn

    clamped = False

    def vacuum_and_single(det, err):
        nonlocal clamped
        n_plus, n_minus, m_plus, m_minus, dn = corrected(det, err)
        n_tot = det[0] + det[1]
        s0_l = tau0 * (mu1 * n_minus[2] - mu2 * n_plus[1]) / (mu1 - mu2)
        if s0_l < 0.0:
            s0_l = 0.0
            clamped = True
        # errors upper-bound vacuum: every vacuum detection errs w.p. 1/2
        s0_u = 2.0 * (tau0 * min(m_plus[1], m_plus[2]) + dn)
        s0_u = min(s0_u, float(n_tot))
        s1_l = (tau1 * mu1 / (mu2 * (mu1 - mu2))) * (
            n_minus[2]
            - (mu2**2 / mu1**2) * n_plus[1]
            - ((mu1**2 - mu2**2) / mu1**2) * (s0_u / tau0)
        )
        if s1_l < 0.0:
            s1_l = 0.0
            clamped = True
        return s0_l, s0_u, s1_l, m_plus, m_minus

    s_z0_l, _, s_z1_l, _, _ = vacuum_and_single(tallies.det_z, tallies.err_z)
    _, _, s_x1_l, mx_plus, mx_minus = vacuum_and_single(tallies.det_x, tallies.err_x)

    v_x1_u = tau1 * (mx_plus[1] - mx_minus[2]) / (mu1 - mu2)
    if v_x1_u < 0.0:
        v_x1_u = 0.0
        clamped = True

    feasible = s_z1_l > 0.0 and s_x1_l > 0.0
    phi_z_u = 0.5
    if feasible:
        ratio = v_x1_u / s_x1_l
        phi = ratio + _gamma_sampling(params.security.eps_sec, ratio, s_z1_l, s_x1_l)
        phi_z_u = min(max(phi, 0.0), 0.5)
        if phi >= 0.5:
            # a coin-flip phase error means the statistics said nothing
            feasible = False

    return DecoyBounds(
        s_z0_l=s_z0_l, s_z1_l=s_z1_l, s_x1_l=s_x1_l, v_x1_u=v_x1_u,
        phi_z_u=phi_z_u, tau0=tau0, tau1=tau1,
        feasible=feasible, clamped=clamped,
    )


@dataclass(frozen=True)
class KeyRateResult:
    """Secret key length, rate, and the signed contribution of each term."""

    secret_len: int
    skr: float
    term_breakdown: dict

    @property
    def secret_fraction(self) -> float:
        nz = self.term_breakdown["n_z"]
        return self.secret_len / nz if nz else 0.0


def secret_key_length(tallies: ObservedTallies, bounds: DecoyBounds,
                      f: float, params: ProtocolParams) -> KeyRateResult:
    """Evaluate the finite-key secret key length and rate.

    f is the reconciliation efficiency (>= 1); E_Z is taken from the
    tallies over both intensities. Zero-length keys are a valid result;
    infeasible bounds are rejected (the caller should treat that case as
    "bad statistics", not "no key").
    """
    if not bounds.feasible:
        raise ValueError("secret_key_length: bounds are infeasible")
    if f < 1.0:
        raise ValueError("reconciliation efficiency f must be >= 1")
    if tallies.n_z <= 0:
        raise InsufficientStatistics("no Z detections")

    sec = params.security
    vacuum = bounds.s_z0_l
    single = bounds.s_z1_l * (1.0 - binary_entropy(bounds.phi_z_u))
    ec_cost = f * tallies.n_z * binary_entropy(tallies.e_z)
    eps_sec_cost = 6.0 * math.log2(19.0 / sec.eps_sec)
    eps_cor_cost = math.log2(2.0 / sec.eps_cor)

    raw = vacuum + single - ec_cost - eps_sec_cost - eps_cor_cost
    secret_len = max(0, math.floor(raw))
    return KeyRateResult(
        secret_len=secret_len,
        skr=secret_len / tallies.t,
        term_breakdown={
            "vacuum": vacuum,
            "single_photon": single,
            "error_correction": -ec_cost,
            "eps_sec_cost": -eps_sec_cost,
            "eps_cor_cost": -eps_cor_cost,
            "n_z": tallies.n_z,
            "e_z": tallies.e_z,
            "phi_z_u": bounds.phi_z_u,
        },
    )
