"""Pipeline glue: labelled training sets, classifier training and the
four-variant positioning comparison used by the CLI and the acceptance run."""

from __future__ import annotations

import math
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import stats

from . import evaluation as ev
from . import gpc, simgen
from . import filter as pf
from .errors import DataError
from .loscache import LosGrid, build_grid
from .pathloss import PathLossParams, fit_pathloss
from .types import (BeaconMap, GroundtruthPose, LabeledObservation, RssiObservation,
                    TrainingPoint, downsample, interpolate_groundtruth)

COMPARISON_MODES = ("pfg", "pfg-c", "pfl", "pfl-c")
DEFAULT_TRAIN_SIZE = 1000
START_HALF_WIDTH = 1.0  # m


def labelled_training_points(observations: Sequence[RssiObservation],
                             labels: Sequence[LabeledObservation],
                             groundtruth: Sequence[GroundtruthPose], beacons: BeaconMap,
                             window: float = 0.01) -> list[TrainingPoint]:
    """Median RSSI per (window, beacon) paired with the groundtruth range.

    A window takes the majority label of its samples; a tie counts as NLOS.
    """
    if not window > 0:
        raise ValueError("window must be positive")
    los = {(lab.t, lab.beacon_id): lab.los for lab in labels}
    groups = defaultdict(list)
    for o in observations:
        key = (o.t, o.beacon_id)
        if key not in los:
            raise DataError(f"no label for observation at t={o.t} from {o.beacon_id}")
        groups[(math.floor(o.t / window + 1e-9), o.beacon_id)].append(o)
    if not groups:
        return []
    keys = sorted(groups, key=lambda k: (k[0], k[1]))
    t_mid = np.array([np.mean([o.t for o in groups[k]]) for k in keys])
    pos = interpolate_groundtruth(groundtruth, t_mid)
    out = []
    for k, p in zip(keys, pos):
        members = groups[k]
        votes = sum(1 if los[(o.t, o.beacon_id)] else -1 for o in members)
        rssi = float(np.median([o.rssi for o in members]))
        out.append(TrainingPoint(float(np.linalg.norm(p - beacons[k[1]])), rssi,
                                 1 if votes > 0 else -1))
    return out


def points_to_arrays(points: Sequence[TrainingPoint]) -> tuple[np.ndarray, np.ndarray]:
    X = np.array([[p.distance, p.rssi] for p in points], dtype=float).reshape(-1, 2)
    y = np.array([p.label for p in points], dtype=float)
    return X, y


def train_classifier(points: Sequence[TrainingPoint], target: int = DEFAULT_TRAIN_SIZE,
                     seed: int = 0, optimize: bool = True, **opt_kwargs) -> gpc.GpcModel:
    """Downsample, tune hyperparameters on the marginal likelihood and run EP."""
    kept = downsample(points, target, seed=seed) if len(points) > target else list(points)
    X, y = points_to_arrays(kept)
    model = gpc.fit(X, y, optimize=optimize, seed=seed, **opt_kwargs)
    acc = float(np.mean(np.where(model.p_los(X) > 0.5, 1, -1) == y))
    return gpc.GpcModel(model.hyper, model.train_inputs, model.train_labels, model.site_nu,
                        model.site_tau, model.log_marginal,
                        {**model.meta, "training_accuracy": acc, "seed": seed})


def ranging_training_points(pathloss: PathLossParams, seed: int = 0,
                            **scenario_kw) -> list[TrainingPoint]:
    """One unobstructed and one obstructed ranging round, pooled."""
    pts = []
    for k, blocked in enumerate((False, True)):
        sc = simgen.ranging_scenario(blocked, seed=seed + k, pathloss=pathloss, **scenario_kw)
        pts += simgen.training_points(simgen.sample_rssi_stream(sc), sc.beacons)
    return pts


def start_region(groundtruth: Sequence[GroundtruthPose], half_width: float = START_HALF_WIDTH):
    x, y = groundtruth[0].position[:2]
    return ((x - half_width, x + half_width), (y - half_width, y + half_width))


def observed_ids(observations: Sequence[RssiObservation], times: np.ndarray, ts: float,
                 t0: float) -> list[list[str]]:
    """Beacon ids measured at each filter step (with repeats)."""
    out = [[] for _ in times]
    for k, (_, batch) in enumerate(pf.batch_observations(observations, ts, t0)):
        if k < len(out):
            out[k] = [o.beacon_id for o in batch]
    return out


def crlb_for_stream(observations, groundtruth, beacons, motion: pf.MotionParams,
                    cfg: pf.MeasurementConfig, half_width: float = START_HALF_WIDTH,
                    receiver_height: float = 0.0) -> ev.CrlbTrace:
    """Bound along the true path, fed the same prior and the same measurements as the filter."""
    t0 = observations[0].t
    steps = [t for t, _ in pf.batch_observations(observations, motion.ts, t0)]
    gt = interpolate_groundtruth(groundtruth, steps)
    ids = observed_ids(observations, np.asarray(steps), motion.ts, t0)
    # uniform square prior on position, Gaussian on velocity; like the
    # filter's, it describes the step before the first batch
    var_p = (2 * half_width) ** 2 / 12
    prior = np.diag([var_p, motion.sigma_v ** 2, var_p, motion.sigma_v ** 2])
    return ev.pcrlb_trace(gt, beacons, motion, cfg, observed=ids, prior_cov=prior,
                          receiver_height=receiver_height)


@dataclass(frozen=True, eq=False)
class ModeResult:
    mode: str
    rmse: np.ndarray  # per run
    errors: list  # per-run planar error series
    traces: list = field(repr=False)
    crlb: ev.CrlbTrace | None = field(default=None, repr=False)

    @property
    def crlb_rms(self) -> float:
        return self.crlb.rms if self.crlb is not None else math.nan

    def summary(self) -> dict:
        mean, se = ev.mean_se(self.rmse)
        out = {"method": self.mode, "rmse_mean": mean, "rmse_se": se,
               "eta_mean": math.nan, "eta_se": math.nan, "crlb_rms": self.crlb_rms,
               "eta_ratio_of_means": math.nan}
        if self.crlb is not None and np.all(self.rmse > 0):
            agg = ev.aggregate_efficiency(self.crlb_rms, self.rmse)
            out.update(eta_mean=agg["eta_mean"], eta_se=agg["eta_se"],
                       eta_ratio_of_means=agg["eta_ratio_of_means"])
        return out


def run_errors(trace: pf.Trace, groundtruth) -> np.ndarray:
    gt = interpolate_groundtruth(groundtruth, trace.t)
    return ev.planar_errors(trace.est, gt)


def compare_modes(observations: Sequence[RssiObservation], groundtruth: Sequence[GroundtruthPose],
                  beacons: BeaconMap, pathloss: PathLossParams, grid: LosGrid | None,
                  modes: Sequence[str] = COMPARISON_MODES, n_runs: int = 20, seed: int = 0,
                  motion: pf.MotionParams | None = None, n_p: int = pf.N_PARTICLES,
                  n_thr: float = pf.N_THRESHOLD, p_los_threshold: float = pf.P_LOS_THRESHOLD,
                  half_width: float = START_HALF_WIDTH, receiver_height: float = 0.0,
                  with_crlb: bool = True, **cfg_kw) -> dict[str, ModeResult]:
    """Run every mode ``n_runs`` times; run k of every mode uses seed ``seed + k``."""
    motion = motion or pf.MotionParams()
    region = start_region(groundtruth, half_width)
    out = {}
    for mode in modes:
        name = pf.MODE_ALIASES.get(mode, mode)
        uses_grid = name.endswith("+classifier")
        cfg = pf.MeasurementConfig(mode, pathloss, p_los_threshold=p_los_threshold,
                                   grid=grid if uses_grid else None, **cfg_kw)
        traces, errs = [], []
        for k in range(n_runs):
            tr = pf.run_filter(observations, beacons, motion, cfg, region, n_p=n_p, n_thr=n_thr,
                               seed=seed + k, receiver_height=receiver_height)
            traces.append(tr)
            errs.append(run_errors(tr, groundtruth))
        crlb = (crlb_for_stream(observations, groundtruth, beacons, motion, cfg, half_width,
                                receiver_height) if with_crlb else None)
        rm = np.array([math.sqrt(float(np.mean(e ** 2))) for e in errs])
        out[mode] = ModeResult(mode, rm, errs, traces, crlb)
    return out


def paired_less(a, b) -> float:
    """One-sided paired t-test p-value for mean(a) < mean(b)."""
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    if len(a) != len(b) or len(a) < 2:
        raise DataError("paired test needs two equally long samples of size >= 2")
    return float(stats.ttest_rel(a, b, alternative="less").pvalue)


@dataclass(frozen=True, eq=False)
class OfficeExperiment:
    stream: simgen.Stream
    scenario: simgen.Scenario
    pathloss: PathLossParams
    model: gpc.GpcModel
    grid: LosGrid
    results: dict


def office_experiment(n_runs: int = 20, seed: int = 0, train_size: int = 300,
                      max_evals: int = 150, modes: Sequence[str] = COMPARISON_MODES,
                      scenario: simgen.Scenario | None = None) -> OfficeExperiment:
    """Simulate the office floor and compare the four variants on it.

    The path-loss curve is fitted to the unobstructed ranging round and the
    classifier is trained on both ranging rounds, so nothing is borrowed
    from the simulator's ground truth parameters.
    """
    sc = scenario or simgen.office_scenario(seed=seed)
    stream = simgen.sample_rssi_stream(sc)
    pts = ranging_training_points(sc.pathloss, seed=seed + 1000,
                                  nlos_extra_loss=sc.nlos_extra_loss,
                                  nlos_extra_std=sc.nlos_extra_std)
    los = [p for p in pts if p.label > 0]
    pathloss = fit_pathloss([p.distance for p in los], [p.rssi for p in los])
    model = train_classifier(pts, target=train_size, seed=seed, max_evals=max_evals)
    grid = build_grid(model)
    results = compare_modes(stream.observations, stream.groundtruth, sc.beacons, pathloss,
                            grid, modes=modes, n_runs=n_runs, seed=seed,
                            receiver_height=sc.receiver_height)
    return OfficeExperiment(stream, sc, pathloss, model, grid, results)
