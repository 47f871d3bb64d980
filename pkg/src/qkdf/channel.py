"""Source, fibre, and detector statistics for the decoy-state link.

Expected per-pulse yields and error rates follow the standard
weak-coherent-pulse model

    D_{B,k}   = 1 - (1 - 2*p_dc) * exp(-mu_k * eta_sys * q_B)
    Q_{B,k}   = D_{B,k} * (1 + p_ap)
    Q_{B,k}*E_{B,k} = p_dc + e_mis*(1 - 2*p_dc)*(1 - exp(-mu_k*eta_sys*q_B))
                      + p_ap*D_{B,k}/2

with eta_sys = eta_ch * eta_bob. Detector saturation uses a
non-paralyzable dead-time model applied as a rate-dependent efficiency
rescaling per detector (two detectors per basis arm, each seeing half of
that arm's clicks).

Evaluation is pure; sampling takes a caller-owned seed.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from qkdf.finitekey import ObservedTallies, ProtocolParams


@dataclass(frozen=True)
class ChannelDetectorModel:
    """Physical-layer constants for fibre, receiver, and detectors."""

    fibre_km: float = 10.0
    alpha_db_per_km: float = 0.19
    extra_loss_db: float = 0.0
    eta_bob: float = 0.5608
    p_dc: float = 1e-8
    e_mis: float = 0.004
    p_ap: float = 0.0
    tau_dead_s: float = 0.7e-9
    eta0: float = 0.78

    def __post_init__(self):
        if self.fibre_km < 0 or self.alpha_db_per_km < 0 or self.extra_loss_db < 0:
            raise ValueError("losses must be nonnegative")
        for name in ("eta_bob", "p_dc", "e_mis", "p_ap", "eta0"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name}={v} outside [0, 1]")
        if self.tau_dead_s < 0:
            raise ValueError("tau_dead_s must be nonnegative")

    @property
    def total_loss_db(self) -> float:
        return self.alpha_db_per_km * self.fibre_km + self.extra_loss_db

    def with_total_loss_db(self, loss_db: float) -> "ChannelDetectorModel":
        """Same receiver, channel re-expressed as a lumped loss."""
        return replace(self, fibre_km=0.0, extra_loss_db=loss_db)


def load_model(path) -> ChannelDetectorModel:
    """Read a model preset from JSON or TOML; keys carry units (tau_dead_ns)."""
    path = Path(path)
    if path.suffix == ".toml":
        try:
            import tomllib
        except ImportError:
            import tomli as tomllib
        data = tomllib.loads(path.read_text())
    else:
        data = json.loads(path.read_text())
    return model_from_dict(data)


def model_from_dict(data: dict) -> ChannelDetectorModel:
    data = dict(data)
    if "tau_dead_ns" in data:
        data["tau_dead_s"] = data.pop("tau_dead_ns") * 1e-9
    return ChannelDetectorModel(**data)


def channel_transmittance(model: ChannelDetectorModel) -> float:
    """eta_ch = 10^(-(alpha*L + extra_loss)/10)."""
    return 10.0 ** (-model.total_loss_db / 10.0)


def eta_sys(model: ChannelDetectorModel) -> float:
    return channel_transmittance(model) * model.eta_bob


def expected_yield_error(model: ChannelDetectorModel, params: ProtocolParams,
                         basis: str, k: int) -> tuple:
    """(D, Q, E) for one basis arm and one intensity, before dead time."""
    mu = params.intensity(k)
    q_b = params.q_z if basis == "Z" else params.q_x
    x = -math.expm1(-mu * eta_sys(model) * q_b)  # 1 - exp(...)
    d = 1.0 - (1.0 - 2.0 * model.p_dc) * (1.0 - x)
    q = d * (1.0 + model.p_ap)
    qe = model.p_dc + model.e_mis * (1.0 - 2.0 * model.p_dc) * x + 0.5 * model.p_ap * d
    e = qe / q if q > 0 else 0.5
    return d, q, min(e, 0.5)


def deadtime_effective_rate(incident_rate: float, model: ChannelDetectorModel) -> float:
    """Saturated count rate R = r/(1 + r*tau) with r = incident_rate*eta0."""
    if incident_rate < 0:
        raise ValueError("incident_rate must be nonnegative")
    r = incident_rate * model.eta0
    return r / (1.0 + r * model.tau_dead_s)


def deadtime_factors(model: ChannelDetectorModel, params: ProtocolParams) -> tuple:
    """Per-basis yield rescaling 1/(1 + R_det*tau).

    R_det is the uncorrected click rate of one detector: each basis arm
    holds two detectors splitting that arm's clicks evenly, and every
    pulse reaches the arm regardless of Alice's basis.
    """
    factors = []
    for basis in ("Z", "X"):
        dbar = sum(params.p_intensity(k) * expected_yield_error(model, params, basis, k)[0]
                   for k in (1, 2))
        r_det = params.clock_hz * dbar / 2.0
        factors.append(1.0 / (1.0 + r_det * model.tau_dead_s))
    return tuple(factors)


def apply_deadtime_to_yield(model: ChannelDetectorModel, params: ProtocolParams,
                            d_z, d_x) -> tuple:
    """Scale per-basis detection probabilities by their dead-time factors.

    d_z / d_x may be scalars or per-intensity sequences.
    """
    f_z, f_x = deadtime_factors(model, params)
    scale = lambda d, f: tuple(v * f for v in d) if hasattr(d, "__len__") else d * f
    return scale(d_z, f_z), scale(d_x, f_x)


def corrected_yields(model: ChannelDetectorModel, params: ProtocolParams) -> dict:
    """Dead-time-corrected detection probability and error rate per (basis, k).

    Dead time thins clicks independently of their correctness, so E is
    unchanged while D and Q scale by the basis factor.
    """
    f_z, f_x = deadtime_factors(model, params)
    out = {}
    for basis, fac in (("Z", f_z), ("X", f_x)):
        for k in (1, 2):
            d, q, e = expected_yield_error(model, params, basis, k)
            out[(basis, k)] = (d * fac, q * fac, e)
    return out


def sifted_rate(model: ChannelDetectorModel, params: ProtocolParams) -> float:
    """Expected Z-sifted bits per second after dead time."""
    y = corrected_yields(model, params)
    dbar_z = sum(params.p_intensity(k) * y[("Z", k)][0] for k in (1, 2))
    return params.clock_hz * params.p_z * dbar_z


def expected_tallies(model: ChannelDetectorModel, params: ProtocolParams,
                     t: float = None) -> ObservedTallies:
    """Noise-free (expected-value) tallies.

    With t omitted, the duration is chosen so the expected Z-sifted count
    equals params.n_z_target.
    """
    if t is None:
        t = params.n_z_target / sifted_rate(model, params)
    n_pulses = params.clock_hz * t
    y = corrected_yields(model, params)
    cols = {}
    for basis, p_basis in (("Z", params.p_z), ("X", 1.0 - params.p_z)):
        sent, det, err = [], [], []
        for k in (1, 2):
            s = n_pulses * p_basis * params.p_intensity(k)
            d, _, e = y[(basis, k)]
            sent.append(s)
            det.append(s * d)
            err.append(s * d * e)
        cols[basis] = (tuple(sent), tuple(det), tuple(err))
    return ObservedTallies(
        sent_z=cols["Z"][0], det_z=cols["Z"][1], err_z=cols["Z"][2],
        sent_x=cols["X"][0], det_x=cols["X"][1], err_x=cols["X"][2], t=t)


def sample_tallies(model: ChannelDetectorModel, params: ProtocolParams,
                   t: float, rng_seed) -> ObservedTallies:
    """Draw integer tallies: multinomial sent counts, binomial detections
    and errors from the dead-time-corrected yields. Deterministic per seed.
    """
    if t <= 0:
        raise ValueError("duration t must be positive")
    rng = np.random.default_rng(rng_seed)
    n_pulses = int(round(params.clock_hz * t))
    probs = [params.p_z * params.p_mu1, params.p_z * params.p_mu2,
             (1 - params.p_z) * params.p_mu1, (1 - params.p_z) * params.p_mu2]
    sent = rng.multinomial(n_pulses, probs)
    y = corrected_yields(model, params)
    out = {}
    for i, (basis, k) in enumerate((("Z", 1), ("Z", 2), ("X", 1), ("X", 2))):
        d, _, e = y[(basis, k)]
        det = rng.binomial(sent[i], d)
        err = rng.binomial(det, e)
        out[(basis, k)] = (int(sent[i]), int(det), int(err))
    return ObservedTallies(
        sent_z=(out[("Z", 1)][0], out[("Z", 2)][0]),
        det_z=(out[("Z", 1)][1], out[("Z", 2)][1]),
        err_z=(out[("Z", 1)][2], out[("Z", 2)][2]),
        sent_x=(out[("X", 1)][0], out[("X", 2)][0]),
        det_x=(out[("X", 1)][1], out[("X", 2)][1]),
        err_x=(out[("X", 1)][2], out[("X", 2)][2]),
        t=t)
