"""Log-distance path-loss model.

    rssi = a_x + 10 * gamma * log10(d / d0) + eps,   eps ~ N(0, sigma^2)

The sign of ``gamma`` is taken as printed in the model; data with RSSI
falling off with distance therefore fits a negative exponent.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from scipy.optimize import least_squares

from .errors import DataError, DegenerateModelError, DomainError

LN10 = math.log(10.0)
FIT_SEEDS = (0, 1, 2, 3, 4)


@dataclass(frozen=True)
class PathLossParams:
    a_x: float  # dBm at the reference distance
    gamma: float  # path-loss exponent
    d0: float = 1.0  # m
    sigma: float = 0.0  # dBm

    def __post_init__(self):
        vals = (self.a_x, self.gamma, self.d0, self.sigma)
        if not all(math.isfinite(v) for v in vals):
            raise DomainError(f"path-loss parameters must be finite: {vals}")
        if self.d0 <= 0:
            raise DomainError("d0 must be positive")
        if self.sigma < 0:
            raise DomainError("sigma must be non-negative")

    @property
    def log_range_scale(self) -> float:
        """Std of ln(distance) implied by ``sigma`` dBm of RSSI noise."""
        return range_log_scale(self, self.sigma)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data) -> "PathLossParams":
        try:
            return cls(float(data["a_x"]), float(data["gamma"]),
                       float(data.get("d0", 1.0)), float(data.get("sigma", 0.0)))
        except (KeyError, TypeError, ValueError) as exc:
            raise DataError(f"malformed path-loss parameters: {exc}") from exc

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")

    @classmethod
    def load(cls, path) -> "PathLossParams":
        return cls.from_dict(json.loads(Path(path).read_text()))


def mean_rssi(params: PathLossParams, distance):
    """Noise-free RSSI (dBm) at ``distance`` metres. Accepts scalars or arrays."""
    d = np.asarray(distance, dtype=float)
    if np.any(~(d > 0)):
        raise DomainError("distance must be positive")
    out = params.a_x + 10.0 * params.gamma * np.log10(d / params.d0)
    return float(out) if out.ndim == 0 else out


def distance_from_rssi(params: PathLossParams, rssi):
    """Invert the mean model: the distance whose mean RSSI equals ``rssi``."""
    if params.gamma == 0:
        raise DegenerateModelError("gamma = 0: RSSI carries no range information")
    r = np.asarray(rssi, dtype=float)
    out = params.d0 * np.power(10.0, (r - params.a_x) / (10.0 * params.gamma))
    return float(out) if out.ndim == 0 else out


def range_log_scale(params: PathLossParams, sigma_dbm: float) -> float:
    """Map an RSSI std in dBm to the std of the natural-log range.

    A deviation of delta dBm scales the inverted range by
    10**(delta / (10 gamma)), i.e. shifts ln(range) by delta ln10 / (10 gamma).
    """
    if params.gamma == 0:
        raise DegenerateModelError("gamma = 0: RSSI carries no range information")
    return sigma_dbm * LN10 / (10.0 * abs(params.gamma))


def lognormal_range_density(params: PathLossParams, sigma_ln: float, predicted, measured):
    """Log-normal density of the ``measured`` range around the ``predicted`` median.

    Vectorised over ``predicted`` and ``measured``.
    """
    predicted = np.asarray(predicted, dtype=float)
    measured = np.asarray(measured, dtype=float)
    if not sigma_ln > 0:
        raise DomainError("sigma_ln must be positive")
    if np.any(~(predicted > 0)) or np.any(~(measured > 0)):
        raise DomainError("ranges must be positive")
    s = range_log_scale(params, sigma_ln)
    u = (np.log(measured) - np.log(predicted)) / s
    out = np.exp(-0.5 * u * u) / (measured * s * math.sqrt(2.0 * math.pi))
    return float(out) if out.ndim == 0 else out


def lognormal_p_rand(params: PathLossParams, sigma_ln: float) -> float:
    """Constant density assigned to rejected measurements under the log-normal model."""
    return 1.0 / (params.d0 * sigma_ln * math.sqrt(2.0 * math.pi))


def _residuals(theta, logd, rssi):
    a_x, gamma = theta
    return a_x + 10.0 * gamma * logd - rssi


def _jacobian(theta, logd, rssi):
    return np.column_stack([np.ones_like(logd), 10.0 * logd])


def fit_pathloss(distances, rssi, d0: float = 1.0) -> PathLossParams:
    """Least-squares fit of ``(a_x, gamma)`` with ``d0`` held fixed.

    Only ``a_x - 10 gamma log10(d0)`` is identifiable jointly with ``d0``, so
    the reference distance is a caller choice. The damped Gauss-Newton solver
    is restarted from a few fixed seeds; ``sigma`` is the RMS residual.
    """
    d = np.asarray(distances, dtype=float).ravel()
    r = np.asarray(rssi, dtype=float).ravel()
    if d.shape != r.shape:
        raise DataError("distances and rssi must have equal length")
    if d.size < 2:
        raise DataError("need at least two points to fit the path-loss model")
    if np.any(~(d > 0)) or not np.all(np.isfinite(r)):
        raise DataError("distances must be positive and RSSI finite")
    logd = np.log10(d / d0)
    if np.ptp(logd) == 0:
        raise DegenerateModelError("all samples at the same distance: fit is rank deficient")

    best = None
    for seed in FIT_SEEDS:
        rng = np.random.default_rng(seed)
        x0 = np.array([np.median(r) + rng.normal(0, 10), rng.uniform(-4, 4)])
        sol = least_squares(_residuals, x0, jac=_jacobian, method="lm",
                            args=(logd, r), xtol=1e-15, ftol=1e-15, gtol=1e-15)
        if best is None or sol.cost < best.cost:
            best = sol
    a_x, gamma = best.x
    resid = _residuals(best.x, logd, r)
    sigma = float(np.sqrt(np.mean(resid ** 2)))
    return PathLossParams(float(a_x), float(gamma), float(d0), sigma)
