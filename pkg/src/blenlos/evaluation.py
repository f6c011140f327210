"""Positioning metrics, classifier ROC analysis and the posterior CRLB."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import DataError, NumericalError
from .pathloss import range_log_scale


def rmse(estimates, groundtruth) -> float:
    """Root-mean-square planar error between two aligned (T, >=2) arrays."""
    e = np.atleast_2d(np.asarray(estimates, dtype=float))
    g = np.atleast_2d(np.asarray(groundtruth, dtype=float))
    if e.size == 0 or g.size == 0:
        raise DataError("rmse of an empty trajectory")
    if len(e) != len(g):
        raise DataError(f"length mismatch: {len(e)} estimates vs {len(g)} groundtruth")
    d = e[:, :2] - g[:, :2]
    return float(np.sqrt(np.mean((d * d).sum(1))))


def planar_errors(estimates, groundtruth) -> np.ndarray:
    d = np.asarray(estimates, dtype=float)[:, :2] - np.asarray(groundtruth, dtype=float)[:, :2]
    return np.hypot(d[:, 0], d[:, 1])


@dataclass(frozen=True)
class RunResult:
    seed: int
    errors: np.ndarray

    @property
    def rmse(self) -> float:
        return float(np.sqrt(np.mean(self.errors ** 2)))


class EmpiricalCDF:
    """Right-continuous step function F(x) = #{e <= x} / n."""

    def __init__(self, errors):
        e = np.sort(np.asarray(errors, dtype=float).ravel())
        if e.size == 0:
            raise DataError("empirical CDF of an empty sample")
        self.sorted = e

    def __call__(self, x):
        out = np.searchsorted(self.sorted, np.asarray(x, dtype=float), side="right") / self.sorted.size
        return float(out) if np.ndim(out) == 0 else out


def empirical_cdf(errors) -> EmpiricalCDF:
    return EmpiricalCDF(errors)


def median_cdf(runs: Sequence, grid=None, n_points: int = 200):
    """Pointwise median of per-run empirical CDFs on a common error grid."""
    cdfs = [EmpiricalCDF(r) for r in runs]
    if not cdfs:
        raise DataError("no runs to aggregate")
    if grid is None:
        hi = max(c.sorted[-1] for c in cdfs)
        grid = np.linspace(0.0, hi, n_points)
    grid = np.asarray(grid, dtype=float)
    return grid, np.median(np.vstack([c(grid) for c in cdfs]), axis=0)


def box_stats(values) -> dict:
    v = np.asarray(values, dtype=float)
    q1, med, q3 = np.percentile(v, [25, 50, 75])
    return {"min": float(v.min()), "q1": float(q1), "median": float(med),
            "q3": float(q3), "max": float(v.max()), "mean": float(v.mean())}


def _check_binary(scores, labels):
    s = np.asarray(scores, dtype=float).ravel()
    y = np.asarray(labels).ravel()
    if s.shape != y.shape:
        raise DataError("scores and labels must have equal length")
    pos = y > 0
    if pos.all() or not pos.any():
        raise DataError("ROC analysis needs both classes")
    return s, pos


def roc_curve(scores, labels):
    """False/true positive rates swept over every distinct score threshold.

    Points run from (0, 0) to (1, 1); the threshold is ``score >= thr``.
    """
    s, pos = _check_binary(scores, labels)
    order = np.argsort(-s, kind="mergesort")
    s, pos = s[order], pos[order]
    last_of_run = np.r_[np.diff(s) != 0, True]
    tp = np.cumsum(pos)[last_of_run]
    fp = np.cumsum(~pos)[last_of_run]
    fpr = np.r_[0.0, fp / (~pos).sum()]
    tpr = np.r_[0.0, tp / pos.sum()]
    return fpr, tpr, np.r_[np.inf, s[last_of_run]]


def roc_auc(scores, labels):
    """ROC curve and trapezoidal area under it."""
    fpr, tpr, thr = roc_curve(scores, labels)
    return (fpr, tpr, thr), float(np.trapezoid(tpr, fpr))


def mann_whitney_auc(scores, labels) -> float:
    """P(score_pos > score_neg) + P(tie)/2 from ranks."""
    from scipy.stats import rankdata

    s, pos = _check_binary(scores, labels)
    ranks = rankdata(s)
    n1, n0 = pos.sum(), (~pos).sum()
    return float((ranks[pos].sum() - n1 * (n1 + 1) / 2.0) / (n1 * n0))


@dataclass(frozen=True, eq=False)
class CrlbTrace:
    information: np.ndarray  # (T, 4, 4)
    position_bound: np.ndarray  # (T,) metres

    @property
    def rms(self) -> float:
        """sqrt of the time-averaged position MSE bound."""
        return float(np.sqrt(np.mean(self.position_bound ** 2)))


def information_recursion(J0, F, Q, H_seq, R_seq, warmup: int = 0) -> CrlbTrace:
    """Posterior Fisher information along a trajectory.

    Uses the form J' = D22 - D21 (J + D11)^-1 D12 + H^T R^-1 H, which equals
    (Q + F J^-1 F^T)^-1 + H^T R^-1 H whenever J is invertible and also
    handles an uninformative start (J0 = 0). ``H_seq[t]`` may be empty.
    """
    F = np.asarray(F, dtype=float)
    Qi = np.linalg.inv(np.asarray(Q, dtype=float))
    D11 = F.T @ Qi @ F
    D12 = -F.T @ Qi
    J = np.asarray(J0, dtype=float)
    scale = np.abs(np.linalg.eigvalsh(Qi)).min()
    infos, bounds = [], []
    for t, (H, R) in enumerate(zip(H_seq, R_seq)):
        J = Qi - D12.T @ np.linalg.solve(J + D11, D12)
        H = np.asarray(H, dtype=float).reshape(-1, F.shape[0])
        if H.size:
            J = J + H.T @ np.linalg.solve(np.atleast_2d(R), H)
        J = 0.5 * (J + J.T)
        infos.append(J)
        # J = Qi - Qi = 0 up to round-off when nothing is known yet, so judge
        # singularity against the scale of the process-noise information
        if np.linalg.eigvalsh(J)[0] <= 1e-10 * scale:
            if t >= warmup:
                raise NumericalError(f"Fisher information singular at step {t}")
            bounds.append(np.inf)
            continue
        P = np.linalg.inv(J)
        bounds.append(np.sqrt(max(P[0, 0] + P[2, 2], 0.0)))
    return CrlbTrace(np.array(infos), np.array(bounds))


def range_jacobian(state_xy, receiver_height, beacon, log_range=False) -> np.ndarray:
    """d range / d [x, vx, y, vy] (or d ln range for the log-normal model)."""
    dx = state_xy[0] - beacon[0]
    dy = state_xy[1] - beacon[1]
    dz = receiver_height - beacon[2]
    r2 = dx * dx + dy * dy + dz * dz
    r = np.sqrt(r2)
    scale = r2 if log_range else r
    return np.array([dx / scale, 0.0, dy / scale, 0.0])


def pcrlb_trace(groundtruth, beacons, motion, cfg, observed=None, prior_cov=None,
                receiver_height=None, warmup: int = 0) -> CrlbTrace:
    """Range-only posterior CRLB evaluated along the true trajectory.

    ``groundtruth`` is a (T, 2 or 3) position array. ``observed[t]`` lists
    the beacon ids measured at step t (all beacons when omitted). Gaussian
    modes use variance sigma_n^2 on range; log-normal modes use the log-range
    scale implied by sigma_ln. The classifier gate is ignored.
    """
    gt = np.asarray(groundtruth, dtype=float)
    if receiver_height is None:
        receiver_height = gt[0, 2] if gt.shape[1] > 2 else 0.0
    if observed is None:
        observed = [list(beacons.ids)] * len(gt)
    if cfg.lognormal:
        var, log_range = range_log_scale(cfg.pathloss, cfg.sigma_ln) ** 2, True
    else:
        var, log_range = cfg.sigma_n ** 2, False
    H_seq, R_seq = [], []
    for pos, ids in zip(gt, observed):
        rows = [range_jacobian(pos[:2], receiver_height, beacons[b], log_range) for b in ids]
        H_seq.append(np.array(rows).reshape(-1, 4))
        R_seq.append(var * np.eye(len(rows)) if rows else np.zeros((0, 0)))
    J0 = np.zeros((4, 4)) if prior_cov is None else np.linalg.inv(prior_cov)
    return information_recursion(J0, motion.F, motion.Q, H_seq, R_seq, warmup=warmup)


def efficiency(crlb_rms: float, rmse_value: float) -> float:
    """Ratio of the bound to the achieved RMSE, in percent."""
    if not rmse_value > 0:
        raise NumericalError("efficiency undefined for zero RMSE")
    return 100.0 * crlb_rms / rmse_value


def aggregate_efficiency(crlb_rms: float, run_rmses) -> dict:
    """Efficiency across runs: mean and standard error of per-run values,
    plus the ratio of means."""
    r = np.asarray(run_rmses, dtype=float)
    if r.size == 0:
        raise DataError("no runs")
    per_run = np.array([efficiency(crlb_rms, v) for v in r])
    se = float(per_run.std(ddof=1) / np.sqrt(r.size)) if r.size > 1 else 0.0
    return {"eta_mean": float(per_run.mean()), "eta_se": se,
            "eta_ratio_of_means": efficiency(crlb_rms, float(r.mean()))}


def mean_se(values) -> tuple[float, float]:
    v = np.asarray(values, dtype=float)
    se = float(v.std(ddof=1) / np.sqrt(v.size)) if v.size > 1 else 0.0
    return float(v.mean()), se
