"""``blenlos`` command line: simulate, fit, train, cache, localize, evaluate.

Exit codes: 0 success, 2 usage or configuration error, 3 data error,
4 numerical failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import math
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import evaluation as ev
from . import experiments as exp
from . import filter as pf
from . import gpc, report, simgen
from .errors import BlenlosError, ConfigError, DataError
from .loscache import DEFAULT_BOUNDS, DEFAULT_MAX_NODES, DEFAULT_RESOLUTION, LosGrid, build_grid
from .pathloss import PathLossParams, fit_pathloss, mean_rssi
from .types import (load_beacon_map, load_groundtruth, load_labels, load_rssi_log,
                    median_window_filter, save_beacon_map, write_groundtruth, write_labels,
                    write_rssi_log, interpolate_groundtruth)

log = logging.getLogger("blenlos")

PRESETS = {
    "office": lambda seed: simgen.office_scenario(seed=seed),
    "ranging-los": lambda seed: simgen.ranging_scenario(False, seed=seed),
    "ranging-nlos": lambda seed: simgen.ranging_scenario(True, seed=seed),
}


@dataclass(frozen=True)
class RunConfig:
    """Everything ``localize`` needs; loaded from JSON, then overridden by flags."""

    log: str | None = None
    beacons: str | None = None
    pathloss: str | None = None
    grid: str | None = None
    groundtruth: str | None = None
    modes: tuple = ("pfg",)
    n_p: int = pf.N_PARTICLES
    n_thr: float = pf.N_THRESHOLD
    p_los: float = pf.P_LOS_THRESHOLD
    sigma_n: float = pf.SIGMA_N
    sigma_ln: float = pf.SIGMA_LN
    p_rand: float | None = None
    sigma_u: float = pf.SIGMA_U
    sigma_v: float = pf.SIGMA_V
    ts: float = 0.1
    seed: int = 0
    repeat: int = 1
    prior: tuple | None = None  # (x0, x1, y0, y1)
    start_half_width: float = exp.START_HALF_WIDTH
    receiver_height: float = 0.0

    def __post_init__(self):
        if self.repeat < 1:
            raise ConfigError("repeat must be >= 1")
        if self.n_p < 2:
            raise ConfigError("need at least two particles")
        object.__setattr__(self, "modes", tuple(self.modes))
        for m in self.modes:
            if pf.MODE_ALIASES.get(m, m) not in pf.MODES:
                raise ConfigError(f"unknown mode {m!r}")
        if self.prior is not None:
            if len(self.prior) != 4:
                raise ConfigError("prior needs x0 x1 y0 y1")
            object.__setattr__(self, "prior", tuple(float(v) for v in self.prior))

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            data = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from exc
        return cls.from_dict(data, base=Path(path).parent)

    @classmethod
    def from_dict(cls, data: dict, base: Path | None = None) -> "RunConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - names
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(sorted(unknown))}")
        data = dict(data)
        if base is not None:
            # relative paths resolve against the config file
            for key in ("log", "beacons", "pathloss", "grid", "groundtruth"):
                if data.get(key) and not Path(data[key]).is_absolute():
                    data[key] = str(base / data[key])
        for key in ("modes", "prior"):
            if data.get(key) is not None:
                data[key] = tuple(data[key])
        return cls(**data)

    def merged(self, **overrides) -> "RunConfig":
        return dataclasses.replace(self, **{k: v for k, v in overrides.items() if v is not None})

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["modes"] = list(self.modes)
        d["prior"] = list(self.prior) if self.prior is not None else None
        return d

    @property
    def motion(self) -> pf.MotionParams:
        return pf.MotionParams(self.sigma_u, self.sigma_v, self.ts)

    def measurement(self, mode: str, pathloss: PathLossParams, grid) -> pf.MeasurementConfig:
        uses_grid = pf.MODE_ALIASES.get(mode, mode).endswith("+classifier")
        return pf.MeasurementConfig(mode, pathloss, self.sigma_n, self.sigma_ln, self.p_los,
                                    self.p_rand, grid if uses_grid else None)


def _require(value, flag):
    if value is None:
        raise ConfigError(f"{flag} is required")
    if not Path(value).exists():
        raise ConfigError(f"{value}: no such file")
    return value


# -- simulate ---------------------------------------------------------------

def cmd_simulate(args) -> int:
    if args.scenario:
        sc = simgen.Scenario.load(_require(args.scenario, "--scenario"))
        if args.seed is not None:
            sc = dataclasses.replace(sc, seed=args.seed)
    else:
        sc = PRESETS[args.preset](args.seed or 0)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    stream = simgen.sample_rssi_stream(sc)
    write_rssi_log(stream.observations, out / "rssi.csv")
    write_labels(stream.labels, out / "labels.csv")
    write_groundtruth(stream.groundtruth, out / "groundtruth.csv")
    save_beacon_map(sc.beacons, out / "beacons.json")
    sc.save(out / "scenario.json")
    print(f"observations {len(stream.observations)}  poses {len(stream.groundtruth)}  "
          f"beacons {len(sc.beacons)}  nlos_fraction {simgen.nlos_fraction(stream):.3f}")
    return 0


# -- fit-pathloss -----------------------------------------------------------

def cmd_fit_pathloss(args) -> int:
    if not args.window > 0:
        raise ConfigError("--window must be positive")
    obs = load_rssi_log(_require(args.log, "--log"))
    gt = load_groundtruth(_require(args.groundtruth, "--groundtruth"))
    beacons = load_beacon_map(_require(args.beacons, "--beacons"))
    if args.labels:
        los = {(lab.t, lab.beacon_id) for lab in load_labels(_require(args.labels, "--labels"))
               if lab.los}
        obs = [o for o in obs if (o.t, o.beacon_id) in los]
    samples = median_window_filter(obs, args.window, per_beacon=True)
    if not samples:
        raise DataError("no observations to fit")
    pos = interpolate_groundtruth(gt, [s.t for s in samples])
    d = np.array([np.linalg.norm(p - beacons[s.beacon_id]) for s, p in zip(samples, pos)])
    r = np.array([s.rssi for s in samples])
    params = fit_pathloss(d, r, d0=args.d0)
    params.save(args.out)
    resid = r - mean_rssi(params, d)
    stem = Path(args.out).with_suffix("")
    report.write_table(stem.with_name(stem.name + "_residuals.csv"),
                       ["distance_m", "rssi_dbm", "fitted_dbm", "residual_db"],
                       [d, r, r - resid, resid])
    trend = "decreasing" if params.gamma < 0 else "increasing"
    print(f"a_x {params.a_x:.3f} dBm  gamma {params.gamma:.4f} (RSSI {trend} with distance)  "
          f"d0 {params.d0:g} m  rms_residual {params.sigma:.3f} dB  samples {len(d)}")
    return 0


# -- train-gpc --------------------------------------------------------------

def cmd_train_gpc(args) -> int:
    if not args.window > 0:
        raise ConfigError("--window must be positive")
    if args.target < 1:
        raise ConfigError("--target must be >= 1")
    sets = (args.log, args.labels, args.groundtruth, args.beacons)
    if len({len(v) for v in sets}) != 1:
        raise ConfigError("--log, --labels, --groundtruth and --beacons must be given "
                          "the same number of times")
    pts = []
    # each recording keeps its own beacon map and groundtruth; the points are pooled
    for log, lab, gtp, bcn in zip(*sets):
        obs = load_rssi_log(_require(log, "--log"))
        labels = load_labels(_require(lab, "--labels"))
        gt = load_groundtruth(_require(gtp, "--groundtruth"))
        beacons = load_beacon_map(_require(bcn, "--beacons"))
        pts += exp.labelled_training_points(obs, labels, gt, beacons, args.window)
    init = gpc.GpcHyperparams(tuple(args.init_lengthscales), args.init_variance, args.init_mean)
    model = exp.train_classifier(pts, target=args.target, seed=args.seed,
                                 optimize=not args.no_optimize, init=init,
                                 restarts=args.restarts, max_evals=args.max_evals)
    model.save(args.out)
    h = model.hyper
    print(f"training_points {len(model.train_labels)}  log_marginal {model.log_marginal:.4f}  "
          f"training_accuracy {model.meta['training_accuracy']:.4f}  "
          f"lengthscales ({h.lengthscales[0]:.4g}, {h.lengthscales[1]:.4g})  "
          f"signal_variance {h.signal_variance:.4g}  mean {h.mean_constant:.4g}")
    return 0


# -- build-cache ------------------------------------------------------------

def cmd_build_cache(args) -> int:
    model = gpc.GpcModel.load(_require(args.model, "--model"))
    grid = build_grid(model, (tuple(args.distance_range), tuple(args.rssi_range)),
                      tuple(args.resolution), args.max_nodes)
    grid.save(args.out)
    print(f"nodes {grid.n_nodes} ({len(grid.distance_nodes)} x {len(grid.rssi_nodes)})  "
          f"p_los range [{grid.p_los.min():.3f}, {grid.p_los.max():.3f}]")
    return 0


# -- localize ---------------------------------------------------------------

def _localize_one(job):
    obs, beacons, motion, cfg, region, n_p, n_thr, seed, height, path = job
    trace = pf.run_filter(obs, beacons, motion, cfg, region, n_p=n_p, n_thr=n_thr, seed=seed,
                          receiver_height=height)
    report.write_trace(trace, path)
    return trace.resets


def _run_config(args) -> RunConfig:
    base = RunConfig.load(_require(args.config, "--config")) if args.config else RunConfig()
    prior = tuple(args.prior) if args.prior else None
    return base.merged(log=args.log, beacons=args.beacons, pathloss=args.pathloss,
                       grid=args.grid, groundtruth=args.groundtruth,
                       modes=tuple(args.mode) if args.mode else None, n_p=args.particles,
                       n_thr=args.ess_threshold, p_los=args.p_los, sigma_n=args.sigma_n,
                       sigma_ln=args.sigma_ln, sigma_u=args.sigma_u, sigma_v=args.sigma_v,
                       ts=args.ts, seed=args.seed, repeat=args.repeat, prior=prior,
                       start_half_width=args.start_half_width,
                       receiver_height=args.receiver_height)


def cmd_localize(args) -> int:
    cfg = _run_config(args)
    obs = load_rssi_log(_require(cfg.log, "log"))
    if not obs:
        raise DataError(f"{cfg.log}: empty RSSI log")
    beacons = load_beacon_map(_require(cfg.beacons, "beacons"))
    pathloss = PathLossParams.load(_require(cfg.pathloss, "pathloss"))
    needs_grid = any(pf.MODE_ALIASES.get(m, m).endswith("+classifier") for m in cfg.modes)
    grid = None
    if needs_grid:
        if cfg.grid is None:
            raise ConfigError("classifier modes need --grid")
        grid = LosGrid.load(_require(cfg.grid, "grid"))
    if cfg.prior is not None:
        x0, x1, y0, y1 = cfg.prior
        region = ((x0, x1), (y0, y1))
    elif cfg.groundtruth is not None:
        region = exp.start_region(load_groundtruth(_require(cfg.groundtruth, "groundtruth")),
                                  cfg.start_half_width)
    else:
        xy = beacons.positions()[:, :2]
        region = ((xy[:, 0].min(), xy[:, 0].max()), (xy[:, 1].min(), xy[:, 1].max()))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    jobs = []
    for mode in cfg.modes:
        mcfg = cfg.measurement(mode, pathloss, grid)
        (out / mode).mkdir(exist_ok=True)
        for k in range(cfg.repeat):
            jobs.append((obs, beacons, cfg.motion, mcfg, region, cfg.n_p, cfg.n_thr,
                         cfg.seed + k, cfg.receiver_height, out / mode / f"run_{k:03d}.csv"))
    if args.workers > 1:
        with ProcessPoolExecutor(args.workers) as pool:
            resets = list(pool.map(_localize_one, jobs))
    else:
        resets = [_localize_one(j) for j in jobs]
    saved = cfg.to_dict()
    saved["prior"] = [region[0][0], region[0][1], region[1][0], region[1][1]]
    for key in ("log", "beacons", "pathloss", "grid", "groundtruth"):
        if saved[key]:
            saved[key] = str(Path(saved[key]).resolve())
    (out / "run_config.json").write_text(json.dumps(saved, indent=2) + "\n")
    print(f"wrote {len(jobs)} traces to {out}  ({sum(resets)} weight resets)")
    return 0


# -- evaluate ---------------------------------------------------------------

def _load_traces(root: Path) -> dict[str, list]:
    runs = {}
    for mode_dir in sorted(p for p in root.iterdir() if p.is_dir()):
        files = sorted(mode_dir.glob("run_*.csv"))
        if files:
            runs[mode_dir.name] = [report.read_trace(f) for f in files]
    return runs


def cmd_evaluate(args) -> int:
    root = Path(_require(args.traces, "--traces"))
    runs = _load_traces(root)
    if not runs:
        raise DataError(f"{root}: no trace files")
    cfg_path = args.config or (root / "run_config.json")
    cfg = RunConfig.load(cfg_path) if Path(cfg_path).exists() else RunConfig()
    cfg = cfg.merged(groundtruth=args.groundtruth, beacons=args.beacons, log=args.log,
                     pathloss=args.pathloss)
    gt = load_groundtruth(_require(cfg.groundtruth, "groundtruth"))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    obs = beacons = pathloss = None
    if cfg.log and cfg.beacons and cfg.pathloss:
        obs = load_rssi_log(_require(cfg.log, "log"))
        beacons = load_beacon_map(_require(cfg.beacons, "beacons"))
        pathloss = PathLossParams.load(_require(cfg.pathloss, "pathloss"))
    else:
        log.warning("log, beacons or pathloss missing: skipping the CRLB")

    rows, errors, rmses, tracks = [], {}, {}, {}
    for mode, traces in runs.items():
        errs = [exp.run_errors(tr, gt) for tr in traces]
        rm = np.array([math.sqrt(float(np.mean(e ** 2))) for e in errs])
        crlb = None
        if obs is not None and pf.MODE_ALIASES.get(mode, mode) in pf.MODES:
            mcfg = pf.MeasurementConfig(pf.MODE_ALIASES.get(mode, mode).split("+")[0], pathloss,
                                        cfg.sigma_n, cfg.sigma_ln, cfg.p_los)
            crlb = exp.crlb_for_stream(obs, gt, beacons, cfg.motion, mcfg,
                                       cfg.start_half_width, cfg.receiver_height)
        res = exp.ModeResult(mode, rm, errs, traces, crlb)
        row = res.summary()
        row["n_runs"] = len(traces)
        if np.any(rm == 0):
            log.warning("%s: zero RMSE, efficiency undefined", mode)
            print(f"{mode}: efficiency undefined (RMSE is zero)")
        rows.append(row)
        errors[mode], rmses[mode], tracks[mode] = errs, rm, traces[0].est

    report.write_metrics(rows, out / "metrics.csv")
    hi = max(float(np.max(e)) for errs in errors.values() for e in errs)
    grid = np.linspace(0.0, hi if hi > 0 else 1.0, args.cdf_points)
    curves = {m: ev.median_cdf(errs, grid)[1] for m, errs in errors.items()}
    report.write_table(out / "cdf.csv", ["error_m"] + list(curves), [grid] + list(curves.values()))
    names = list(rmses)
    report.write_table(out / "rmse_runs.csv", ["run"] + names,
                       [np.arange(min(len(v) for v in rmses.values()))] +
                       [rmses[m][:min(len(v) for v in rmses.values())] for m in names])
    stats = [ev.box_stats(rmses[m]) for m in names]
    keys = ["min", "q1", "median", "q3", "max", "mean"]
    report.write_table(out / "rmse_box.csv", ["method"] + keys,
                       [np.array(names)] + [np.array([s[k] for s in stats]) for k in keys])

    roc = None
    if args.labels and args.model:
        if beacons is None and not args.labels_beacons:
            beacons = load_beacon_map(_require(cfg.beacons, "beacons"))
        roc = _classifier_report(args, gt, beacons, cfg.log, out)

    for r in rows:
        print(f"{r['method']:>22}  rmse {r['rmse_mean']:.3f} +- {r['rmse_se']:.3f} m  "
              f"crlb {r['crlb_rms']:.4f} m  eta {r['eta_mean']:.2f} +- {r['eta_se']:.2f} %  "
              f"(ratio of means {r['eta_ratio_of_means']:.2f} %)")

    if not args.no_figures:
        from . import plotting

        plotting.plot_cdf(grid, curves, out / "cdf")
        plotting.plot_box(rmses, out / "rmse_box")
        gt_xy = interpolate_groundtruth(gt, next(iter(runs.values()))[0].t)[:, :2]
        bxy = beacons.positions()[:, :2] if beacons is not None else np.zeros((0, 2))
        plotting.plot_trajectory(gt_xy, tracks, bxy, out / "trajectory")
        if roc is not None:
            plotting.plot_roc(*roc, out / "roc")
    return 0


def _classifier_report(args, gt, beacons, log_path, out):
    model = gpc.GpcModel.load(_require(args.model, "--model"))
    if args.labels_groundtruth:
        gt = load_groundtruth(_require(args.labels_groundtruth, "--labels-groundtruth"))
    if args.labels_beacons:
        beacons = load_beacon_map(_require(args.labels_beacons, "--labels-beacons"))
    obs = load_rssi_log(_require(args.labels_log or log_path, "--labels-log"))
    labels = load_labels(_require(args.labels, "--labels"))
    pts = exp.labelled_training_points(obs, labels, gt, beacons, window=0.01)
    X, y = exp.points_to_arrays(pts)
    scores = model.p_los(X)
    (fpr, tpr, thr), auc = ev.roc_auc(scores, y)
    mw = ev.mann_whitney_auc(scores, y)
    report.write_table(out / "roc.csv", ["fpr", "tpr", "threshold"], [fpr, tpr, thr])
    report.write_table(out / "classifier.csv", ["n_points", "auc_trapezoid", "auc_mann_whitney"],
                       [[len(y)], [auc], [mw]])
    print(f"classifier AUC {auc:.4f} on {len(y)} labelled points")
    return fpr, tpr, auc


# -- parser -----------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="blenlos", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", help="generate a synthetic dataset")
    src = s.add_mutually_exclusive_group(required=True)
    src.add_argument("--scenario", help="scenario JSON")
    src.add_argument("--preset", choices=sorted(PRESETS))
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int)
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("fit-pathloss", help="fit the log-distance model to a log")
    s.add_argument("--log", required=True)
    s.add_argument("--groundtruth", required=True)
    s.add_argument("--beacons", required=True)
    s.add_argument("--labels", help="keep only LOS observations")
    s.add_argument("--window", type=float, default=0.01, help="median window in seconds")
    s.add_argument("--d0", type=float, default=1.0, help="reference distance in metres")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_fit_pathloss)

    s = sub.add_parser("train-gpc", help="train the LOS classifier",
                       description="Repeat the four input flags to pool several recordings.")
    s.add_argument("--log", required=True, action="append")
    s.add_argument("--labels", required=True, action="append")
    s.add_argument("--groundtruth", required=True, action="append")
    s.add_argument("--beacons", required=True, action="append")
    s.add_argument("--window", type=float, default=0.01)
    s.add_argument("--target", type=int, default=exp.DEFAULT_TRAIN_SIZE)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--restarts", type=int, default=3)
    s.add_argument("--max-evals", type=int, default=300)
    s.add_argument("--no-optimize", action="store_true")
    s.add_argument("--init-lengthscales", type=float, nargs=2, default=(1.0, 5.0))
    s.add_argument("--init-variance", type=float, default=1.0)
    s.add_argument("--init-mean", type=float, default=0.0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_train_gpc)

    s = sub.add_parser("build-cache", help="tabulate the classifier on a grid")
    s.add_argument("--model", required=True)
    s.add_argument("--distance-range", type=float, nargs=2, default=DEFAULT_BOUNDS[0])
    s.add_argument("--rssi-range", type=float, nargs=2, default=DEFAULT_BOUNDS[1])
    s.add_argument("--resolution", type=float, nargs=2, default=DEFAULT_RESOLUTION)
    s.add_argument("--max-nodes", type=int, default=DEFAULT_MAX_NODES)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_build_cache)

    s = sub.add_parser("localize", help="run the particle filter")
    s.add_argument("--config", help="RunConfig JSON; flags override it")
    s.add_argument("--log")
    s.add_argument("--beacons")
    s.add_argument("--pathloss")
    s.add_argument("--grid")
    s.add_argument("--groundtruth", help="only used to centre the prior on the start")
    s.add_argument("--mode", action="append", choices=sorted(pf.MODE_ALIASES))
    s.add_argument("--particles", type=int)
    s.add_argument("--ess-threshold", type=float)
    s.add_argument("--p-los", type=float)
    s.add_argument("--sigma-n", type=float)
    s.add_argument("--sigma-ln", type=float)
    s.add_argument("--sigma-u", type=float)
    s.add_argument("--sigma-v", type=float)
    s.add_argument("--ts", type=float)
    s.add_argument("--seed", type=int)
    s.add_argument("--repeat", type=int)
    s.add_argument("--prior", type=float, nargs=4, metavar=("X0", "X1", "Y0", "Y1"))
    s.add_argument("--start-half-width", type=float)
    s.add_argument("--receiver-height", type=float)
    s.add_argument("--workers", type=int, default=1)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_localize)

    s = sub.add_parser("evaluate", help="metrics, CDFs and figures for a set of traces")
    s.add_argument("--traces", required=True, help="output directory of localize")
    s.add_argument("--config")
    s.add_argument("--groundtruth")
    s.add_argument("--beacons")
    s.add_argument("--log")
    s.add_argument("--pathloss")
    s.add_argument("--labels", help="labels for the ROC analysis (with --model)")
    s.add_argument("--labels-log", help="RSSI log the labels refer to (default: --log)")
    s.add_argument("--labels-groundtruth", help="groundtruth of that log (default: --groundtruth)")
    s.add_argument("--labels-beacons", help="beacon map of that log (default: --beacons)")
    s.add_argument("--model")
    s.add_argument("--cdf-points", type=int, default=200)
    s.add_argument("--no-figures", action="store_true")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_evaluate)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except BlenlosError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except (FileNotFoundError, IsADirectoryError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return ConfigError.exit_code
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return ConfigError.exit_code


if __name__ == "__main__":
    sys.exit(main())
