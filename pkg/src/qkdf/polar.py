"""Closed-loop polarization compensation on the Poincare sphere.

Everything is real 3-vector (Stokes) calculus: the four signal states sit
on the S2/S3 great circle (Z key states along +/-S2, X states along
+/-S3), fibre birefringence drift is a random-axis rotation walk, and the
compensator is three fibre squeezers at 0/45/0 degrees, i.e. rotations
about S1, S2, S1 with retardance proportional to voltage.

The controller is stochastic parallel gradient descent on
J = w_z*E_Z + w_x*E_X measured from calibration pulses with binomial shot
noise; strong-pulse mode multiplies the calibration counts by 10^1.29.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

Z_PLUS = np.array([0.0, 1.0, 0.0])
Z_MINUS = np.array([0.0, -1.0, 0.0])
X_PLUS = np.array([0.0, 0.0, 1.0])
X_MINUS = np.array([0.0, 0.0, -1.0])
STATES = {"Z": (Z_PLUS, Z_MINUS), "X": (X_PLUS, X_MINUS)}

S1_AXIS = np.array([1.0, 0.0, 0.0])
S2_AXIS = np.array([0.0, 1.0, 0.0])
STRONG_PULSE_BOOST = 10 ** 1.29  # calibration pulses 12.9 dB above signal


def rotation_about(axis, angle: float) -> np.ndarray:
    """Rodrigues rotation matrix about a unit axis."""
    axis = np.asarray(axis, dtype=float)
    axis = axis / np.linalg.norm(axis)
    k = np.array([[0.0, -axis[2], axis[1]],
                  [axis[2], 0.0, -axis[0]],
                  [-axis[1], axis[0], 0.0]])
    return np.eye(3) + math.sin(angle) * k + (1.0 - math.cos(angle)) * (k @ k)


def random_rotation(rng, angle: float = None) -> np.ndarray:
    """Rotation about a uniformly random axis; random angle if not given."""
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    if angle is None:
        angle = rng.uniform(0.0, math.pi)
    return rotation_about(axis, angle)


def fibre_drift_step(state: np.ndarray, rate: float, dt: float, rng) -> np.ndarray:
    """Compose a small random birefringence kick onto the channel rotation.

    The kick angle is N(0, (rate*sqrt(dt))^2) about a uniform axis, so the
    accumulated rotation angle has variance rate^2 * t while small (a 3-D
    random walk in rotation-vector space); rate is rad/sqrt(s).
    """
    if rate == 0.0 or dt == 0.0:
        return state
    angle = rng.normal(0.0, rate * math.sqrt(dt))
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    return rotation_about(axis, angle) @ state


@dataclass
class EPCVoltages:
    """Three squeezer drive voltages; retardance = rad_per_volt * v."""

    v: np.ndarray = field(default_factory=lambda: np.zeros(3))
    v_max: float = 10.0
    rad_per_volt: float = 2.0 * math.pi / 10.0

    def __post_init__(self):
        self.v = np.asarray(self.v, dtype=float)
        if np.any(self.v < 0) or np.any(self.v > self.v_max):
            raise ValueError("voltages outside [0, v_max]")

    def matrix(self) -> np.ndarray:
        r = self.rad_per_volt * self.v
        return (rotation_about(S1_AXIS, r[2])
                @ rotation_about(S2_AXIS, r[1])
                @ rotation_about(S1_AXIS, r[0]))


def epc_apply(volts: EPCVoltages, state: np.ndarray) -> np.ndarray:
    """Apply the three-squeezer compensator to a Stokes vector or rotation."""
    return volts.matrix() @ state


def measure_qber(channel_rot: np.ndarray, volts: EPCVoltages,
                 e_floor: float = 0.002, counts: int = None, rng=None) -> tuple:
    """(E_Z, E_X) after channel + compensator.

    With counts given, each basis error rate is a binomial draw over that
    many calibration detections (split over the two states); otherwise the
    exact probabilities are returned. e_floor models residual transmitter
    extinction, reached when perfectly aligned.
    """
    total = volts.matrix() @ channel_rot
    out = []
    for basis in ("Z", "X"):
        p_err = 0.0
        for u in STATES[basis]:
            p_err += 0.5 * (1.0 - float(u @ (total @ u))) / 2.0
        p = e_floor + (1.0 - 2.0 * e_floor) * p_err
        if counts is None:
            out.append(p)
        else:
            n = max(int(counts), 1)
            out.append(rng.binomial(n, min(max(p, 0.0), 1.0)) / n)
    return tuple(out)


@dataclass
class SPGDConfig:
    """Controller and calibration-channel settings."""

    gain: float = 60.0
    delta: float = 0.12           # volts, perturbation amplitude
    max_iters: int = 500
    w_z: float = 0.5
    w_x: float = 0.5
    calib_ratio: float = 1.0 / 256.0
    t_acc: float = 0.5            # seconds per QBER accumulation
    calib_rate_hz: float = 2.2e5  # detectable calibration events/s at ratio 1
    strong_pulse: bool = False
    e_floor: float = 0.002
    v_max: float = 10.0
    rad_per_volt: float = 2.0 * math.pi / 10.0

    @property
    def counts_per_window(self) -> int:
        n = self.calib_rate_hz * self.calib_ratio * self.t_acc
        if self.strong_pulse:
            n *= STRONG_PULSE_BOOST
        return max(int(round(n)), 1)


def spgd_step(v: np.ndarray, objective, config: SPGDConfig, rng) -> np.ndarray:
    """One SPGD update: paired +/- perturbation, gradient-sign step, then
    projection into the voltage box.

    When the box spans exactly one retardance period (rad_per_volt * v_max
    = 2*pi, the default), the projection wraps: a 2*pi jump drives the
    identical rotation, which is how real trackers re-center a saturating
    squeezer. Otherwise the update clamps at the walls.
    """
    delta = config.delta * rng.choice((-1.0, 1.0), size=3)
    j_plus = objective(np.clip(v + delta, 0.0, config.v_max))
    j_minus = objective(np.clip(v - delta, 0.0, config.v_max))
    v_new = v - config.gain * (j_plus - j_minus) * delta
    if abs(config.rad_per_volt * config.v_max - 2.0 * math.pi) < 1e-9:
        return np.mod(v_new, config.v_max)
    return np.clip(v_new, 0.0, config.v_max)


@dataclass
class CompensationScenario:
    spgd: SPGDConfig = field(default_factory=SPGDConfig)
    steps: int = None             # None -> the controller's iteration cap
    drift_rate: float = 0.0       # rad/sqrt(s)
    spike_prob: float = 0.0       # per step, temperature-event kicks
    spike_angle: float = 0.2
    initial_angle: float = None   # None -> uniformly random rotation
    initial_volts: tuple = None   # None -> mid-range
    seed: int = 0


def run_compensation(scenario: CompensationScenario):
    """Interleave drift and SPGD steps; returns rows of
    (t_s, e_z, e_x, v1, v2, v3) with exact (shot-noise-free) QBERs.
    """
    cfg = scenario.spgd
    n_steps = scenario.steps if scenario.steps is not None else cfg.max_iters
    rng = np.random.default_rng(np.random.SeedSequence([scenario.seed, 0x901A7]))
    channel = random_rotation(rng, scenario.initial_angle)
    v0 = (np.full(3, cfg.v_max / 2.0) if scenario.initial_volts is None
          else np.asarray(scenario.initial_volts, dtype=float))
    volts = EPCVoltages(v0, cfg.v_max, cfg.rad_per_volt)
    counts = cfg.counts_per_window
    dt_step = 2.0 * cfg.t_acc  # two accumulation windows per update

    trace = np.zeros((n_steps, 6))
    for step in range(n_steps):
        channel = fibre_drift_step(channel, scenario.drift_rate, dt_step, rng)
        if scenario.spike_prob and rng.random() < scenario.spike_prob:
            channel = random_rotation(rng, scenario.spike_angle) @ channel

        def objective(v):
            e_z, e_x = measure_qber(
                channel, EPCVoltages(v, cfg.v_max, cfg.rad_per_volt),
                cfg.e_floor, counts, rng)
            return cfg.w_z * e_z + cfg.w_x * e_x

        volts.v = spgd_step(volts.v, objective, cfg, rng)
        e_z, e_x = measure_qber(channel, volts, cfg.e_floor)
        trace[step] = (dt_step * (step + 1), e_z, e_x, *volts.v)
    return trace


def steps_to_threshold(trace, threshold: float = 0.01,
                       w_z: float = 0.5, w_x: float = 0.5) -> int:
    """First step index whose combined QBER drops below threshold; -1 if never."""
    combined = w_z * trace[:, 1] + w_x * trace[:, 2]
    below = np.nonzero(combined < threshold)[0]
    return int(below[0]) if below.size else -1


# drift preset: 0.01 rad of typical accumulated drift per minute
LAB_SLOW_DRIFT = 0.01 / math.sqrt(60.0)


def scenario_preset(name: str, seed: int = 0, steps: int = 500,
                    strong_pulse: bool = None) -> CompensationScenario:
    """Named operating regimes.

    metro: abundant calibration light (short fibre), ratio 1/256, slow
    drift. long-haul: scarce detections (328-km-like rate), ratio 1/8,
    strong pulses by default. spike: metro with temperature-event kicks.
    """
    if name == "metro":
        spgd = SPGDConfig(calib_ratio=1.0 / 256.0, calib_rate_hz=2.2e5,
                          strong_pulse=bool(strong_pulse))
        return CompensationScenario(spgd=spgd, steps=steps, seed=seed,
                                    drift_rate=LAB_SLOW_DRIFT)
    if name == "long-haul":
        strong = True if strong_pulse is None else strong_pulse
        spgd = SPGDConfig(calib_ratio=1.0 / 8.0, calib_rate_hz=1.4e3,
                          strong_pulse=strong)
        return CompensationScenario(spgd=spgd, steps=steps, seed=seed,
                                    drift_rate=LAB_SLOW_DRIFT)
    if name == "spike":
        spgd = SPGDConfig(calib_ratio=1.0 / 256.0, calib_rate_hz=2.2e5,
                          strong_pulse=bool(strong_pulse))
        return CompensationScenario(spgd=spgd, steps=steps, seed=seed,
                                    drift_rate=LAB_SLOW_DRIFT,
                                    spike_prob=0.01, spike_angle=0.15)
    raise ValueError(f"unknown scenario preset {name!r}")
