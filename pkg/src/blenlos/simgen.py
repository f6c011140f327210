"""Synthetic BLE datasets: beacon layouts, trajectories, occlusion and RSSI.

NLOS is modelled as a fixed extra attenuation plus inflated noise whenever
the planar segment receiver->beacon crosses an obstacle rectangle.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError
from .pathloss import PathLossParams, mean_rssi
from .types import (BeaconMap, GroundtruthPose, LabeledObservation, RssiObservation,
                    TrainingPoint)

NLOS_EXTRA_LOSS = 8.0  # dBm
NLOS_EXTRA_STD = 2.0  # dBm
# decreasing-with-distance counterpart of the reference parameters
DEFAULT_PATHLOSS = PathLossParams(a_x=-64.53, gamma=-1.72, d0=1.78, sigma=3.0)


@dataclass(frozen=True)
class Rect:
    x0: float
    y0: float
    x1: float
    y1: float

    def __post_init__(self):
        if not (self.x1 > self.x0 and self.y1 > self.y0):
            raise ConfigError(f"degenerate obstacle {self}")


@dataclass(frozen=True, eq=False)
class Scenario:
    beacons: BeaconMap
    waypoints: tuple  # ((x, y), ...)
    speed: float = 0.2  # m/s
    obstacles: tuple = ()
    pathloss: PathLossParams = DEFAULT_PATHLOSS
    nlos_extra_loss: float = NLOS_EXTRA_LOSS
    nlos_extra_std: float = NLOS_EXTRA_STD
    sample_rate: float = 10.0  # Hz
    dropout: float = 0.0
    receiver_height: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if not self.speed > 0:
            raise ConfigError("speed must be positive")
        if not self.sample_rate > 0:
            raise ConfigError("sample rate must be positive")
        if not 0 <= self.dropout < 1:
            raise ConfigError("dropout must lie in [0, 1)")
        if self.nlos_extra_loss < 0 or self.nlos_extra_std < 0:
            raise ConfigError("NLOS loss parameters must be non-negative")
        object.__setattr__(self, "waypoints", tuple(tuple(map(float, w)) for w in self.waypoints))
        object.__setattr__(self, "obstacles",
                           tuple(o if isinstance(o, Rect) else Rect(*o) for o in self.obstacles))

    def to_dict(self) -> dict:
        return {
            "beacons": self.beacons.to_dict()["beacons"],
            "waypoints": [list(w) for w in self.waypoints],
            "speed": self.speed,
            "obstacles": [[o.x0, o.y0, o.x1, o.y1] for o in self.obstacles],
            "pathloss": self.pathloss.to_dict(),
            "nlos_extra_loss": self.nlos_extra_loss,
            "nlos_extra_std": self.nlos_extra_std,
            "sample_rate": self.sample_rate,
            "dropout": self.dropout,
            "receiver_height": self.receiver_height,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d) -> "Scenario":
        try:
            return cls(
                beacons=BeaconMap.from_dict({"beacons": d["beacons"]}),
                waypoints=tuple(map(tuple, d["waypoints"])),
                speed=float(d.get("speed", 0.2)),
                obstacles=tuple(Rect(*o) for o in d.get("obstacles", [])),
                pathloss=PathLossParams.from_dict(d["pathloss"]) if "pathloss" in d
                else DEFAULT_PATHLOSS,
                nlos_extra_loss=float(d.get("nlos_extra_loss", NLOS_EXTRA_LOSS)),
                nlos_extra_std=float(d.get("nlos_extra_std", NLOS_EXTRA_STD)),
                sample_rate=float(d.get("sample_rate", 10.0)),
                dropout=float(d.get("dropout", 0.0)),
                receiver_height=float(d.get("receiver_height", 0.0)),
                seed=int(d.get("seed", 0)),
            )
        except (KeyError, TypeError, ValueError) as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(f"invalid scenario: {exc}") from exc

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")

    @classmethod
    def load(cls, path) -> "Scenario":
        try:
            return cls.from_dict(json.loads(Path(path).read_text()))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from exc


def generate_trajectory(scenario: Scenario) -> list[GroundtruthPose]:
    """Constant-speed walk along the waypoint polyline, sampled at ``sample_rate``."""
    wp = np.asarray(scenario.waypoints, dtype=float)
    if len(wp) < 2:
        raise ConfigError("need at least two waypoints")
    seg = np.linalg.norm(np.diff(wp, axis=0), axis=1)
    total = seg.sum()
    if total == 0:
        raise ConfigError("waypoint polyline has zero length")
    step = scenario.speed / scenario.sample_rate
    n = int(math.floor(total / step + 1e-9)) + 1
    s = np.arange(n) * step
    cum = np.concatenate([[0.0], np.cumsum(seg)])
    xy = np.column_stack([np.interp(s, cum, wp[:, 0]), np.interp(s, cum, wp[:, 1])])
    t = np.arange(n) / scenario.sample_rate
    h = scenario.receiver_height
    return [GroundtruthPose(float(ti), (float(x), float(y), h)) for ti, (x, y) in zip(t, xy)]


def _segment_hits_rect(p, q, r: Rect) -> bool:
    """Liang-Barsky clip; True when the segment passes through the open interior."""
    dx, dy = q[0] - p[0], q[1] - p[1]
    t0, t1 = 0.0, 1.0
    for num, den in ((p[0] - r.x0, -dx), (r.x1 - p[0], dx), (p[1] - r.y0, -dy), (r.y1 - p[1], dy)):
        # constraint: den * t <= num
        if den == 0:
            if num <= 0:
                return False
            continue
        t = num / den
        if den < 0:
            t0 = max(t0, t)
        else:
            t1 = min(t1, t)
    if t1 - t0 <= 1e-12:
        return False
    # midpoint of the clipped piece must be strictly inside
    mx, my = p[0] + 0.5 * (t0 + t1) * dx, p[1] + 0.5 * (t0 + t1) * dy
    return r.x0 < mx < r.x1 and r.y0 < my < r.y1


def is_los(position, beacon, obstacles) -> bool:
    """Whether the planar projection of position->beacon avoids every obstacle interior."""
    p = (float(position[0]), float(position[1]))
    q = (float(beacon[0]), float(beacon[1]))
    return not any(_segment_hits_rect(p, q, o) for o in obstacles)


@dataclass(frozen=True, eq=False)
class Stream:
    observations: list
    labels: list
    groundtruth: list


def sample_rssi_stream(scenario: Scenario) -> Stream:
    """RSSI samples for every (pose, beacon) slot that survives dropout."""
    rng = np.random.default_rng(scenario.seed)
    poses = generate_trajectory(scenario)
    pl = scenario.pathloss
    obs, labels = [], []
    for pose in poses:
        pos = np.asarray(pose.position)
        for bid, b in scenario.beacons.items():
            if rng.uniform() < scenario.dropout:
                continue
            d = max(float(np.linalg.norm(pos - b)), 1e-3)
            los = is_los(pos, b, scenario.obstacles)
            eps = rng.normal()
            if los:
                rssi = mean_rssi(pl, d) + pl.sigma * eps
            else:
                rssi = (mean_rssi(pl, d) - scenario.nlos_extra_loss
                        + (pl.sigma + scenario.nlos_extra_std) * eps)
            obs.append(RssiObservation(pose.t, bid, float(rssi)))
            labels.append(LabeledObservation(pose.t, bid, los))
    return Stream(obs, labels, poses)


def training_points(stream: Stream, beacons: BeaconMap) -> list[TrainingPoint]:
    """(groundtruth range, RSSI, label) triples from a labelled stream."""
    pos = {p.t: np.asarray(p.position) for p in stream.groundtruth}
    out = []
    for o, lab in zip(stream.observations, stream.labels):
        d = float(np.linalg.norm(pos[o.t] - beacons[o.beacon_id]))
        out.append(TrainingPoint(d, o.rssi, 1 if lab.los else -1))
    return out


def ranging_scenario(blocked: bool, length: float = 10.0, n_beacons: int = 6,
                     seed: int = 0, **kwargs) -> Scenario:
    """Receiver walking away from a cluster of co-located beacons.

    With ``blocked`` a thin obstacle sits right in front of the cluster so
    every sample is NLOS; otherwise every sample is LOS.
    """
    beacons = BeaconMap((f"c{k}", (0.0, 0.0, 0.0)) for k in range(n_beacons))
    obstacles = [Rect(0.1, -1.0, 0.2, 1.0)] if blocked else []
    return Scenario(beacons, ((0.3, 0.0), (0.3 + length, 0.0)), obstacles=obstacles,
                    seed=seed, **kwargs)


def office_scenario(seed: int = 0, **kwargs) -> Scenario:
    """20 m x 40 m floor with eight wall-mounted beacons, a partition wall and a cabin.

    About 40% of the (pose, beacon) slots along the default route are occluded.
    """
    beacons = BeaconMap([
        ("b0", (0.5, 0.5, 2.0)), ("b1", (19.5, 0.5, 2.0)),
        ("b2", (0.5, 13.0, 2.0)), ("b3", (19.5, 13.0, 2.0)),
        ("b4", (0.5, 27.0, 2.0)), ("b5", (19.5, 27.0, 2.0)),
        ("b6", (0.5, 39.5, 2.0)), ("b7", (19.5, 39.5, 2.0)),
    ])
    obstacles = [
        Rect(0.0, 19.8, 6.0, 20.2),  # partition walls with a central doorway
        Rect(14.0, 19.8, 20.0, 20.2),
        Rect(4.0, 8.0, 7.0, 18.0),  # office cabin
    ]
    waypoints = ((10.0, 2.0), (10.0, 20.0), (3.0, 20.0), (3.0, 35.0), (10.0, 38.0))
    kw = dict(speed=0.2, dropout=0.3, receiver_height=0.3)
    kw.update(kwargs)
    return Scenario(beacons, waypoints, obstacles=obstacles, seed=seed, **kw)


def nlos_fraction(stream: Stream) -> float:
    if not stream.labels:
        return 0.0
    return 1.0 - sum(lab.los for lab in stream.labels) / len(stream.labels)
