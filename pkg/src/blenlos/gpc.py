"""Binary Gaussian-process classifier over (distance, RSSI) inputs.

Squared-exponential ARD covariance, constant prior mean, probit likelihood
and expectation propagation (EP) for approximate inference. Labels are +1
for LOS and -1 for NLOS.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np
from scipy.linalg import cho_solve, cholesky, solve_triangular
from scipy.linalg.blas import dger
from scipy.optimize import minimize
from scipy.special import log_ndtr, ndtr

from .errors import DataError, EPConvergenceError

log = logging.getLogger(__name__)

JITTER = 1e-8  # relative to signal variance
MODEL_FORMAT = "blenlos-gpc"
MODEL_VERSION = 1
_LOG_SQRT_2PI = 0.5 * math.log(2.0 * math.pi)


@dataclass(frozen=True)
class GpcHyperparams:
    lengthscales: tuple = (1.0, 5.0)  # (m, dBm)
    signal_variance: float = 1.0
    mean_constant: float = 0.0

    def __post_init__(self):
        ls = tuple(float(v) for v in self.lengthscales)
        object.__setattr__(self, "lengthscales", ls)
        object.__setattr__(self, "signal_variance", float(self.signal_variance))
        object.__setattr__(self, "mean_constant", float(self.mean_constant))
        if not all(v > 0 and math.isfinite(v) for v in ls):
            raise ValueError(f"lengthscales must be positive, got {ls}")
        if not (self.signal_variance > 0 and math.isfinite(self.signal_variance)):
            raise ValueError("signal_variance must be positive")
        if not math.isfinite(self.mean_constant):
            raise ValueError("mean_constant must be finite")

    def to_vector(self) -> np.ndarray:
        """Unconstrained parameterisation: log lengthscales, log variance, mean."""
        return np.array([*np.log(self.lengthscales), math.log(self.signal_variance),
                         self.mean_constant])

    @classmethod
    def from_vector(cls, v) -> "GpcHyperparams":
        v = np.asarray(v, dtype=float)
        return cls(tuple(np.exp(v[:-2])), float(np.exp(v[-2])), float(v[-1]))


def gram(hyper: GpcHyperparams, x1, x2) -> np.ndarray:
    """Cross-covariance matrix between the rows of ``x1`` and ``x2``."""
    ls = np.asarray(hyper.lengthscales)
    a = np.atleast_2d(np.asarray(x1, dtype=float)) / ls
    b = np.atleast_2d(np.asarray(x2, dtype=float)) / ls
    sq = (a * a).sum(1)[:, None] + (b * b).sum(1)[None, :] - 2.0 * a @ b.T
    np.maximum(sq, 0.0, out=sq)
    return hyper.signal_variance * np.exp(-0.5 * sq)


def kernel(hyper: GpcHyperparams, x1, x2) -> float:
    """Covariance between two single inputs."""
    d = (np.asarray(x1, dtype=float) - np.asarray(x2, dtype=float)) / np.asarray(hyper.lengthscales)
    return float(hyper.signal_variance * np.exp(-0.5 * np.dot(d, d)))


def _prior_cov(hyper, X):
    K = gram(hyper, X, X)
    K = 0.5 * (K + K.T)
    K[np.diag_indices_from(K)] += JITTER * hyper.signal_variance
    return K


def _probit_moments(y, m, v):
    """log Z and first two derivatives w.r.t. the cavity mean of log Z."""
    s = np.sqrt(1.0 + v)
    z = y * m / s
    lz = log_ndtr(z)
    ratio = np.exp(-0.5 * z * z - _LOG_SQRT_2PI - lz)
    dlz = y * ratio / s
    d2lz = -ratio * (z + ratio) / (1.0 + v)
    return lz, dlz, d2lz


@dataclass(frozen=True)
class EPPosterior:
    """EP fixed point: site natural parameters and the Gaussian posterior over f."""

    site_nu: np.ndarray
    site_tau: np.ndarray
    mean: np.ndarray
    cov: np.ndarray
    log_marginal: float
    sweeps: int


def _posterior(K, mvec, ttau, tnu):
    n = len(ttau)
    sw = np.sqrt(ttau)
    L = cholesky(np.eye(n) + sw[:, None] * K * sw[None, :], lower=True)
    V = solve_triangular(L, sw[:, None] * K, lower=True)
    Sigma = K - V.T @ V
    alpha = tnu - sw * cho_solve((L, True), sw * (K @ tnu + mvec))
    mu = K @ alpha + mvec
    return L, Sigma, mu


def _log_marginal(y, mvec, ttau, tnu, L, Sigma, mu):
    v = np.diag(Sigma).copy()
    tau_c = 1.0 / v - ttau
    nu_c = mu / v - tnu
    lz, _, _ = _probit_moments(y, nu_c / tau_c, 1.0 / tau_c)
    p = tnu - mvec * ttau
    q = nu_c - mvec * tau_c
    nlz = (np.log(np.diag(L)).sum() - lz.sum() - p @ Sigma @ p / 2.0 + v @ (p * p) / 2.0
           - q @ ((ttau / tau_c * q - 2.0 * p) * v) / 2.0
           - np.log1p(ttau / tau_c).sum() / 2.0)
    return -float(nlz)


def ep_infer(inputs, labels, hyper: GpcHyperparams, tol: float = 1e-6,
             max_sweeps: int = 100) -> EPPosterior:
    """Sequential EP for probit GP classification.

    Sites are visited in index order. Converged once no site parameter moved
    by more than ``tol`` during a sweep.
    """
    X = np.atleast_2d(np.asarray(inputs, dtype=float))
    y = np.asarray(labels, dtype=float).ravel()
    if X.shape[0] != y.size or y.size == 0:
        raise DataError("inputs and labels must be non-empty and of equal length")
    if not np.all(np.isin(y, (-1.0, 1.0))):
        raise DataError("labels must be +1 or -1")
    n = y.size
    K = _prior_cov(hyper, X)
    mvec = np.full(n, hyper.mean_constant)
    ttau = np.zeros(n)
    tnu = np.zeros(n)
    Sigma = np.array(K, order="F")  # dger writes in place; K must survive
    mu = mvec.copy()
    change = np.inf
    for sweep in range(1, max_sweeps + 1):
        ttau_old, tnu_old = ttau.copy(), tnu.copy()
        for i in range(n):
            sii = Sigma[i, i]
            tau_c = 1.0 / sii - ttau[i]
            nu_c = mu[i] / sii - tnu[i]
            m_c, v_c = nu_c / tau_c, 1.0 / tau_c
            s = math.sqrt(1.0 + v_c)
            z = y[i] * m_c / s
            ratio = math.exp(-0.5 * z * z - _LOG_SQRT_2PI - float(log_ndtr(z)))
            dlz = y[i] * ratio / s
            d2lz = -ratio * (z + ratio) / (1.0 + v_c)
            new_tau = max(-d2lz / (1.0 + d2lz / tau_c), 0.0)
            new_nu = (dlz - m_c * d2lz) / (1.0 + d2lz / tau_c)
            dtt = new_tau - ttau[i]
            dtn = new_nu - tnu[i]
            si = Sigma[:, i].copy()
            ci = dtt / (1.0 + dtt * sii)
            mu -= (ci * (mu[i] + sii * dtn) - dtn) * si
            Sigma = dger(-ci, si, si, a=Sigma, overwrite_a=True)
            ttau[i], tnu[i] = new_tau, new_nu
        # rank-one updates drift; refactor once per sweep
        L, Sigma, mu = _posterior(K, mvec, ttau, tnu)
        Sigma = np.asfortranarray(Sigma)
        change = max(np.max(np.abs(ttau - ttau_old)), np.max(np.abs(tnu - tnu_old)))
        if not np.isfinite(change):
            break
        if change < tol:
            lml = _log_marginal(y, mvec, ttau, tnu, L, Sigma, mu)
            return EPPosterior(tnu, ttau, mu, Sigma, lml, sweep)
    raise EPConvergenceError(
        f"EP did not converge in {max_sweeps} sweeps (last change {change:.3g})",
        {"site_nu": tnu, "site_tau": ttau, "last_change": change, "hyper": hyper},
    )


@dataclass(frozen=True)
class GpcModel:
    hyper: GpcHyperparams
    train_inputs: np.ndarray
    train_labels: np.ndarray
    site_nu: np.ndarray
    site_tau: np.ndarray
    log_marginal: float
    meta: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        if np.any(self.site_tau < 0):
            raise DataError("EP site precisions must be non-negative")
        if len(self.train_labels) < 1:
            raise DataError("model needs at least one training point")

    @cached_property
    def _factors(self):
        K = _prior_cov(self.hyper, self.train_inputs)
        mvec = np.full(len(self.train_labels), self.hyper.mean_constant)
        sw = np.sqrt(self.site_tau)
        L = cholesky(np.eye(len(sw)) + sw[:, None] * K * sw[None, :], lower=True)
        alpha = self.site_nu - sw * cho_solve((L, True), sw * (K @ self.site_nu + mvec))
        return L, sw, alpha

    def predict(self, queries, chunk: int = 4096):
        """Latent mean, latent variance and LOS probability at each query row."""
        Q = np.atleast_2d(np.asarray(queries, dtype=float))
        L, sw, alpha = self._factors
        means, variances = [], []
        for start in range(0, Q.shape[0], chunk):
            q = Q[start:start + chunk]
            ks = gram(self.hyper, self.train_inputs, q)
            means.append(self.hyper.mean_constant + ks.T @ alpha)
            V = solve_triangular(L, sw[:, None] * ks, lower=True)
            variances.append(np.maximum(self.hyper.signal_variance - (V * V).sum(0), 0.0))
        mean = np.concatenate(means)
        var = np.concatenate(variances)
        return mean, var, ndtr(mean / np.sqrt(1.0 + var))

    def p_los(self, queries) -> np.ndarray:
        return self.predict(queries)[2]

    def to_dict(self) -> dict:
        return {
            "format": MODEL_FORMAT,
            "version": MODEL_VERSION,
            "hyper": {
                "lengthscales": list(self.hyper.lengthscales),
                "signal_variance": self.hyper.signal_variance,
                "mean_constant": self.hyper.mean_constant,
            },
            "train_inputs": self.train_inputs.tolist(),
            "train_labels": self.train_labels.astype(int).tolist(),
            "site_nu": self.site_nu.tolist(),
            "site_tau": self.site_tau.tolist(),
            "log_marginal": self.log_marginal,
            "meta": self.meta,
        }

    @classmethod
    def from_dict(cls, data) -> "GpcModel":
        if data.get("format") != MODEL_FORMAT:
            raise DataError("not a GPC model file")
        if data.get("version") != MODEL_VERSION:
            raise DataError(f"unsupported model version {data.get('version')!r}")
        h = data["hyper"]
        return cls(
            GpcHyperparams(tuple(h["lengthscales"]), h["signal_variance"], h["mean_constant"]),
            np.asarray(data["train_inputs"], dtype=float).reshape(-1, 2),
            np.asarray(data["train_labels"], dtype=float),
            np.asarray(data["site_nu"], dtype=float),
            np.asarray(data["site_tau"], dtype=float),
            float(data["log_marginal"]),
            data.get("meta", {}),
        )

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()))

    @classmethod
    def load(cls, path) -> "GpcModel":
        try:
            return cls.from_dict(json.loads(Path(path).read_text()))
        except (KeyError, TypeError, ValueError) as exc:
            raise DataError(f"{path}: malformed model file ({exc})") from exc


def train(inputs, labels, hyper: GpcHyperparams, **ep_kwargs) -> GpcModel:
    """Run EP at fixed hyperparameters and package the result."""
    X = np.atleast_2d(np.asarray(inputs, dtype=float))
    y = np.asarray(labels, dtype=float).ravel()
    post = ep_infer(X, y, hyper, **ep_kwargs)
    return GpcModel(hyper, X.copy(), y.copy(), post.site_nu, post.site_tau, post.log_marginal)


def predict(model: GpcModel, query):
    """(latent_mean, latent_var, p_los) for a single (distance, rssi) query."""
    m, v, p = model.predict(np.asarray(query, dtype=float).reshape(1, -1))
    return float(m[0]), float(v[0]), float(p[0])


def log_marginal(inputs, labels, hyper: GpcHyperparams) -> float:
    return ep_infer(inputs, labels, hyper).log_marginal


def optimize_hyperparams(inputs, labels, init: GpcHyperparams | None = None,
                         restarts: int = 3, seed: int = 0, max_evals: int = 300,
                         restart_scale: float = 0.5) -> GpcHyperparams:
    """Maximise the EP log marginal likelihood by Nelder-Mead in log space.

    The first start is ``init``; further starts perturb it with seeded
    Gaussian noise. The best result never scores below ``init``.
    """
    init = init or GpcHyperparams()
    X = np.atleast_2d(np.asarray(inputs, dtype=float))
    y = np.asarray(labels, dtype=float).ravel()
    cache = {}

    def objective(v):
        key = tuple(np.round(v, 12))
        if np.any(np.abs(v[:-1]) > 25):  # exp() of these is numerically meaningless
            return np.inf
        if key not in cache:
            try:
                cache[key] = -ep_infer(X, y, GpcHyperparams.from_vector(v)).log_marginal
            except (EPConvergenceError, np.linalg.LinAlgError, ValueError):
                cache[key] = np.inf
        return cache[key]

    x0 = init.to_vector()
    rng = np.random.default_rng(seed)
    starts = [x0] + [x0 + rng.normal(0.0, restart_scale, x0.size) for _ in range(restarts - 1)]
    best_v, best_f = x0, objective(x0)
    for k, start in enumerate(starts):
        res = minimize(objective, start, method="Nelder-Mead",
                       options={"maxfev": max_evals, "xatol": 1e-4, "fatol": 1e-6})
        log.debug("restart %d: -lml=%.6f after %d evals", k, res.fun, res.nfev)
        if res.fun < best_f:
            best_v, best_f = res.x, res.fun
    if not np.isfinite(best_f):
        raise EPConvergenceError("EP failed to converge for every hyperparameter start")
    return GpcHyperparams.from_vector(best_v)


def fit(inputs, labels, init: GpcHyperparams | None = None, optimize: bool = True,
        **opt_kwargs) -> GpcModel:
    """Optimise hyperparameters (optionally) and train the final model."""
    y = np.asarray(labels, dtype=float).ravel()
    if np.unique(y).size < 2:
        raise DataError("training labels must contain both LOS and NLOS")
    hyper = init or GpcHyperparams()
    if optimize:
        hyper = optimize_hyperparams(inputs, y, hyper, **opt_kwargs)
    return train(inputs, y, hyper)
