"""SIR particle filter for planar range-only positioning from RSSI.

State per particle is ``[x, vx, y, vy]``; the receiver height is fixed.
Four measurement models are available: Gaussian or log-normal range
likelihood, each optionally gated by the LOS classifier grid.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .errors import ConfigError
from .loscache import LosGrid
from .pathloss import (PathLossParams, distance_from_rssi, lognormal_p_rand,
                       lognormal_range_density)
from .types import BeaconMap, RssiObservation

log = logging.getLogger(__name__)

MODES = ("gaussian", "gaussian+classifier", "lognormal", "lognormal+classifier")
MODE_ALIASES = {"pfg": "gaussian", "pfg-c": "gaussian+classifier",
                "pfl": "lognormal", "pfl-c": "lognormal+classifier"}

# filter defaults
N_PARTICLES = 100
N_THRESHOLD = 20
P_LOS_THRESHOLD = 0.4
SIGMA_N = 3.0  # m
SIGMA_LN = 0.4  # dBm
P_RAND_GAUSSIAN = 0.1
SIGMA_U = 0.1  # m
SIGMA_V = 0.05  # m/s


@dataclass(frozen=True, eq=False)
class FilterState:
    particles: np.ndarray  # (n_p, 4)
    weights: np.ndarray  # (n_p,)
    receiver_height: float = 0.0
    t: float = 0.0
    degenerate: bool = False  # last update hit all-zero likelihoods

    @property
    def n_p(self) -> int:
        return len(self.weights)

    @property
    def positions(self) -> np.ndarray:
        return self.particles[:, [0, 2]]


@dataclass(frozen=True)
class MotionParams:
    sigma_u: float = SIGMA_U
    sigma_v: float = SIGMA_V
    ts: float = 0.1

    def __post_init__(self):
        if not self.ts > 0:
            raise ConfigError("sampling time must be positive")
        if self.sigma_u < 0 or self.sigma_v < 0:
            raise ConfigError("motion noise must be non-negative")

    @property
    def F(self) -> np.ndarray:
        F = np.eye(4)
        F[0, 1] = F[2, 3] = self.ts
        return F

    @property
    def Q(self) -> np.ndarray:
        return np.diag([self.sigma_u ** 2, self.sigma_v ** 2, self.sigma_u ** 2, self.sigma_v ** 2])


@dataclass(frozen=True)
class MeasurementConfig:
    mode: str
    pathloss: PathLossParams
    sigma_n: float = SIGMA_N
    sigma_ln: float = SIGMA_LN
    p_los_threshold: float = P_LOS_THRESHOLD
    p_rand: float | None = None  # None: mode default
    grid: LosGrid | None = field(default=None, compare=False)

    def __post_init__(self):
        mode = MODE_ALIASES.get(self.mode, self.mode)
        if mode not in MODES:
            raise ConfigError(f"unknown measurement mode {self.mode!r}")
        object.__setattr__(self, "mode", mode)
        if self.uses_classifier != (self.grid is not None):
            raise ConfigError(f"mode {mode!r} " + ("needs a LOS grid" if self.uses_classifier
                                                    else "does not take a LOS grid"))
        if not 0 < self.p_los_threshold < 1:
            raise ConfigError("p_los threshold must lie in (0, 1)")
        if self.sigma_n <= 0 or self.sigma_ln <= 0:
            raise ConfigError("measurement noise must be positive")
        if self.p_rand is None:
            default = (lognormal_p_rand(self.pathloss, self.sigma_ln) if self.lognormal
                       else P_RAND_GAUSSIAN)
            object.__setattr__(self, "p_rand", default)

    @property
    def uses_classifier(self) -> bool:
        return self.mode.endswith("+classifier")

    @property
    def lognormal(self) -> bool:
        return self.mode.startswith("lognormal")


def init_particles(n_p: int, prior_region, seed=None, sigma_v: float = SIGMA_V,
                   receiver_height: float = 0.0, t: float = 0.0) -> FilterState:
    """Uniform positions over ``prior_region = ((x0, x1), (y0, y1))``, N(0, sigma_v) velocities."""
    if n_p < 2:
        raise ConfigError("need at least two particles")
    (x0, x1), (y0, y1) = prior_region
    if x1 < x0 or y1 < y0:
        raise ConfigError("prior region bounds are inverted")
    rng = np.random.default_rng(seed)
    p = np.empty((n_p, 4))
    p[:, 0] = rng.uniform(x0, x1, n_p)
    p[:, 2] = rng.uniform(y0, y1, n_p)
    p[:, 1] = rng.normal(0.0, sigma_v, n_p)
    p[:, 3] = rng.normal(0.0, sigma_v, n_p)
    return FilterState(p, np.full(n_p, 1.0 / n_p), float(receiver_height), float(t))


def predict(state: FilterState, motion: MotionParams, rng) -> FilterState:
    """Constant-velocity propagation with diagonal Gaussian process noise."""
    noise = rng.normal(size=state.particles.shape) * np.sqrt(np.diag(motion.Q))
    particles = state.particles @ motion.F.T + noise
    return replace(state, particles=particles, t=state.t + motion.ts)


def range_to_beacon(position, receiver_height: float, beacon) -> np.ndarray | float:
    """3-D range from planar position(s) at ``receiver_height`` to a beacon."""
    pos = np.asarray(position, dtype=float)
    b = np.asarray(beacon, dtype=float)
    dx = pos[..., 0] - b[0]
    dy = pos[..., 1] - b[1]
    dz = receiver_height - b[2]
    out = np.sqrt(dx * dx + dy * dy + dz * dz)
    return float(out) if out.ndim == 0 else out


def _normal_pdf(x, sigma):
    return np.exp(-0.5 * (x / sigma) ** 2) / (sigma * math.sqrt(2.0 * math.pi))


def likelihood(state: FilterState, obs: RssiObservation, beacons: BeaconMap,
               cfg: MeasurementConfig) -> np.ndarray:
    """Per-particle measurement likelihood of one RSSI observation."""
    z = distance_from_rssi(cfg.pathloss, obs.rssi)
    h = range_to_beacon(state.positions, state.receiver_height, beacons[obs.beacon_id])
    if cfg.lognormal:
        base = lognormal_range_density(cfg.pathloss, cfg.sigma_ln, np.maximum(h, 1e-9), z)
    else:
        base = _normal_pdf(z - h, cfg.sigma_n)
    if not cfg.uses_classifier:
        return base
    p = cfg.grid.query_many(h, np.full_like(h, obs.rssi))
    return np.where(p > cfg.p_los_threshold, p * base, cfg.p_rand)


def reweight(state: FilterState, lik) -> FilterState:
    """Multiply weights by ``lik`` and renormalise; uniform reset on total collapse."""
    w = state.weights * np.asarray(lik, dtype=float)
    total = w.sum()
    if not (total > 0 and np.isfinite(total)):
        log.debug("all particle likelihoods vanished; resetting weights to uniform")
        return replace(state, weights=np.full(state.n_p, 1.0 / state.n_p), degenerate=True)
    return replace(state, weights=w / total, degenerate=False)


def weight_update(state: FilterState, obs: RssiObservation, beacons: BeaconMap,
                  cfg: MeasurementConfig) -> FilterState:
    return reweight(state, likelihood(state, obs, beacons, cfg))


def effective_sample_size(state_or_weights) -> float:
    w = getattr(state_or_weights, "weights", state_or_weights)
    w = np.asarray(w, dtype=float)
    # 1 <= ESS <= n holds exactly for normalised weights; clip the round-off
    return float(np.clip(1.0 / np.dot(w, w), 1.0, len(w)))


def systematic_indices(weights, u: float) -> np.ndarray:
    """Offspring parent indices for a single offset ``u`` in [0, 1/n)."""
    w = np.asarray(weights, dtype=float)
    n = len(w)
    positions = u + np.arange(n) / n
    cum = np.cumsum(w)
    cum[-1] = 1.0  # guard against round-off leaving the last stride unmatched
    return np.searchsorted(cum, positions, side="right")


def systematic_resample(state: FilterState, rng) -> FilterState:
    n = state.n_p
    idx = systematic_indices(state.weights, rng.uniform(0.0, 1.0 / n))
    return replace(state, particles=state.particles[idx], weights=np.full(n, 1.0 / n))


def estimate(state: FilterState) -> np.ndarray:
    """Weighted mean planar position."""
    return state.weights @ state.positions


@dataclass(frozen=True, eq=False)
class StepResult:
    state: FilterState
    estimate: np.ndarray
    ess: float
    resampled: bool
    resets: int = 0


def step(state: FilterState, obs_batch: Sequence[RssiObservation], beacons: BeaconMap,
         motion: MotionParams, cfg: MeasurementConfig, n_thr: float, rng) -> StepResult:
    """predict, then one weight update per observation, then resample if ESS < n_thr."""
    state = predict(state, motion, rng)
    resets = 0
    for obs in obs_batch:
        state = weight_update(state, obs, beacons, cfg)
        resets += state.degenerate
    ess = effective_sample_size(state)
    est = estimate(state)
    resampled = ess < n_thr
    if resampled:
        state = systematic_resample(state, rng)
    return StepResult(state, est, ess, resampled, resets)


def batch_observations(observations: Sequence[RssiObservation], ts: float, t0: float | None = None):
    """Group a time-ordered stream into filter steps spaced ``ts`` apart.

    Step k sits at ``t0 + k ts`` and collects the observations within half a
    step of it. Yields ``(t_k, batch)`` for every step from the first
    observation to the last, including empty ones.
    """
    if not observations:
        return
    t0 = observations[0].t if t0 is None else t0

    def slot(t):
        return math.floor((t - t0) / ts + 0.5 + 1e-9)

    buckets = [[] for _ in range(slot(observations[-1].t) + 1)]
    for o in observations:
        k = slot(o.t)
        if k >= 0:
            buckets[k].append(o)
    for k, batch in enumerate(buckets):
        yield t0 + k * ts, batch


@dataclass(frozen=True, eq=False)
class Trace:
    t: np.ndarray
    est: np.ndarray  # (T, 2)
    ess: np.ndarray
    resampled: np.ndarray
    resets: int = 0  # updates where every likelihood vanished


def run_filter(observations: Sequence[RssiObservation], beacons: BeaconMap,
               motion: MotionParams, cfg: MeasurementConfig, prior_region,
               n_p: int = N_PARTICLES, n_thr: float = N_THRESHOLD, seed=None,
               receiver_height: float = 0.0) -> Trace:
    """Run the SIR filter over a whole RSSI stream, one step per ``motion.ts``."""
    rng = np.random.default_rng(seed)
    t0 = observations[0].t if observations else 0.0
    # the prior describes the step before the first batch
    state = init_particles(n_p, prior_region, rng, motion.sigma_v, receiver_height, t0 - motion.ts)
    ts, ests, esss, res = [], [], [], []
    resets = 0
    for t_end, batch in batch_observations(observations, motion.ts, t0):
        out = step(state, batch, beacons, motion, cfg, n_thr, rng)
        resets += out.resets
        state = out.state
        ts.append(t_end)
        ests.append(out.estimate)
        esss.append(out.ess)
        res.append(out.resampled)
    if resets:
        log.info("%s: %d updates reset to uniform weights", cfg.mode, resets)
    return Trace(np.array(ts), np.array(ests).reshape(-1, 2), np.array(esss),
                 np.array(res, dtype=bool), resets)
