"""Core domain types, dataset file I/O and RSSI preprocessing.

All records are frozen dataclasses. Files:

* RSSI log CSV: ``t_seconds,beacon_id,rssi_dbm`` (header optional)
* groundtruth CSV: ``t_seconds,x,y,z``
* labels CSV: ``t,beacon_id,los`` with ``los`` in {0, 1}
* beacon map JSON: ``{"beacons": [{"id": ..., "x": ..., "y": ..., "z": ...}]}``
"""

from __future__ import annotations

import csv
import json
import math
from collections import defaultdict
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import DataError, ParseError

DEFAULT_MAX_RANGE = 10.0  # m
LOS, NLOS = 1, -1


@dataclass(frozen=True)
class RssiObservation:
    t: float
    beacon_id: str
    rssi: float

    def __post_init__(self):
        if not math.isfinite(self.rssi):
            raise DataError(f"non-finite RSSI for beacon {self.beacon_id!r}")


@dataclass(frozen=True)
class TrainingPoint:
    distance: float
    rssi: float
    label: int  # +1 LOS, -1 NLOS

    def __post_init__(self):
        if self.label not in (LOS, NLOS):
            raise DataError(f"label must be +1 or -1, got {self.label!r}")
        if not self.distance >= 0:
            raise DataError(f"distance must be >= 0, got {self.distance!r}")


@dataclass(frozen=True)
class GroundtruthPose:
    t: float
    position: tuple  # (x, y, z) metres


@dataclass(frozen=True)
class LabeledObservation:
    t: float
    beacon_id: str
    los: bool


class BeaconMap:
    """Known beacon positions keyed by an opaque hardware id."""

    def __init__(self, entries: Iterable[tuple[str, Sequence[float]]]):
        positions = {}
        for beacon_id, pos in entries:
            beacon_id = str(beacon_id)
            if beacon_id in positions:
                raise DataError(f"duplicate beacon id {beacon_id!r}")
            pos = np.asarray(pos, dtype=float)
            if pos.shape != (3,) or not np.all(np.isfinite(pos)):
                raise DataError(f"beacon {beacon_id!r} needs a finite 3-vector position")
            pos.setflags(write=False)
            positions[beacon_id] = pos
        if not positions:
            raise DataError("beacon map is empty")
        self._positions = positions

    def __getitem__(self, beacon_id: str) -> np.ndarray:
        try:
            return self._positions[beacon_id]
        except KeyError:
            raise DataError(f"unknown beacon id {beacon_id!r}") from None

    def __contains__(self, beacon_id) -> bool:
        return beacon_id in self._positions

    def __iter__(self):
        return iter(self._positions)

    def __len__(self) -> int:
        return len(self._positions)

    def items(self):
        return self._positions.items()

    @property
    def ids(self) -> list[str]:
        return list(self._positions)

    def positions(self) -> np.ndarray:
        """(n_m, 3) array in insertion order."""
        return np.vstack(list(self._positions.values()))

    def to_dict(self) -> dict:
        return {
            "beacons": [
                {"id": k, "x": float(p[0]), "y": float(p[1]), "z": float(p[2])}
                for k, p in self._positions.items()
            ]
        }

    @classmethod
    def from_dict(cls, data: Mapping) -> "BeaconMap":
        try:
            return cls((b["id"], (b["x"], b["y"], b["z"])) for b in data["beacons"])
        except (KeyError, TypeError) as exc:
            raise DataError(f"malformed beacon map: {exc}") from exc


def load_beacon_map(path) -> BeaconMap:
    with open(path) as fh:
        try:
            data = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ParseError(path, exc.lineno, exc.msg) from exc
    return BeaconMap.from_dict(data)


def save_beacon_map(beacons: BeaconMap, path) -> None:
    Path(path).write_text(json.dumps(beacons.to_dict(), indent=2) + "\n")


def _rows(path):
    """Yield (line_number, fields) for non-blank CSV rows, skipping a header."""
    with open(path, newline="") as fh:
        for lineno, row in enumerate(csv.reader(fh), start=1):
            if not row or all(not f.strip() for f in row):
                continue
            if lineno == 1 and row[0].strip().lower().startswith("t"):
                try:
                    float(row[0])
                except ValueError:
                    continue
            yield lineno, [f.strip() for f in row]


def load_rssi_log(path) -> list[RssiObservation]:
    """Read an RSSI log. Beacon ids are not validated here."""
    out = []
    for lineno, row in _rows(path):
        if len(row) != 3:
            raise ParseError(path, lineno, f"expected 3 fields, got {len(row)}")
        try:
            out.append(RssiObservation(float(row[0]), row[1], float(row[2])))
        except (ValueError, DataError) as exc:
            raise ParseError(path, lineno, str(exc)) from exc
    return out


def write_rssi_log(observations: Iterable[RssiObservation], path, header=True) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        if header:
            w.writerow(["t_seconds", "beacon_id", "rssi_dbm"])
        for o in observations:
            w.writerow([repr(float(o.t)), o.beacon_id, repr(float(o.rssi))])


def load_groundtruth(path) -> list[GroundtruthPose]:
    out = []
    for lineno, row in _rows(path):
        if len(row) != 4:
            raise ParseError(path, lineno, f"expected 4 fields, got {len(row)}")
        try:
            t, x, y, z = map(float, row)
        except ValueError as exc:
            raise ParseError(path, lineno, str(exc)) from exc
        if out and t <= out[-1].t:
            raise ParseError(path, lineno, "groundtruth timestamps must be strictly increasing")
        out.append(GroundtruthPose(t, (x, y, z)))
    return out


def write_groundtruth(poses: Iterable[GroundtruthPose], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t_seconds", "x", "y", "z"])
        for p in poses:
            w.writerow([repr(float(p.t))] + [repr(float(c)) for c in p.position])


def load_labels(path) -> list[LabeledObservation]:
    out = []
    for lineno, row in _rows(path):
        if len(row) != 3 or row[2] not in ("0", "1"):
            raise ParseError(path, lineno, "expected t,beacon_id,los(0/1)")
        try:
            out.append(LabeledObservation(float(row[0]), row[1], row[2] == "1"))
        except ValueError as exc:
            raise ParseError(path, lineno, str(exc)) from exc
    return out


def write_labels(labels: Iterable[LabeledObservation], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t", "beacon_id", "los"])
        for lab in labels:
            w.writerow([repr(float(lab.t)), lab.beacon_id, int(lab.los)])


def groundtruth_array(poses: Sequence[GroundtruthPose]) -> tuple[np.ndarray, np.ndarray]:
    """Split poses into a time vector and an (n, 3) position array."""
    t = np.array([p.t for p in poses], dtype=float)
    xyz = np.array([p.position for p in poses], dtype=float).reshape(-1, 3)
    return t, xyz


def interpolate_groundtruth(poses: Sequence[GroundtruthPose], times) -> np.ndarray:
    """Linear interpolation of groundtruth positions at ``times`` (clamped at the ends)."""
    t, xyz = groundtruth_array(poses)
    times = np.atleast_1d(np.asarray(times, dtype=float))
    return np.column_stack([np.interp(times, t, xyz[:, k]) for k in range(3)])


@dataclass(frozen=True)
class MedianSample:
    t: float  # time of the first observation in the window
    rssi: float
    beacon_id: str | None  # None when beacons are pooled
    count: int


def median_window_filter(obs: Sequence[RssiObservation], window: float,
                         per_beacon: bool = False) -> list[MedianSample]:
    """Median RSSI over consecutive time windows of width ``window`` seconds.

    By default every beacon falling into a window is pooled, which is the
    right thing for co-located beacons sharing one transmit power. With
    ``per_beacon`` each beacon gets its own median per window.
    """
    if not window > 0:
        raise ValueError("window must be positive")
    buckets: dict = defaultdict(list)
    order = []
    for o in obs:
        k = math.floor(o.t / window + 1e-9)
        key = (k, o.beacon_id) if per_beacon else (k, None)
        if key not in buckets:
            order.append(key)
        buckets[key].append(o)
    out = []
    ranked = sorted(enumerate(order), key=lambda item: (item[1][0], item[0]))
    for _, key in ranked:
        members = buckets[key]
        out.append(MedianSample(members[0].t, float(np.median([m.rssi for m in members])),
                                key[1], len(members)))
    return out


def downsample(points: Sequence[TrainingPoint], target_count: int,
               seed: int = 0) -> list[TrainingPoint]:
    """Label-stratified uniform subsample, original order preserved.

    Per-label quotas follow the largest-remainder rule so the output size is
    exactly ``min(target_count, len(points))``.
    """
    if target_count < 1:
        raise ValueError("target_count must be >= 1")
    n = len(points)
    if n <= target_count:
        return list(points)
    labels = np.array([p.label for p in points])
    classes = sorted(set(labels.tolist()))
    exact = {c: target_count * np.count_nonzero(labels == c) / n for c in classes}
    quota = {c: int(math.floor(v)) for c, v in exact.items()}
    short = target_count - sum(quota.values())
    for c in sorted(classes, key=lambda c: (-(exact[c] - quota[c]), c))[:short]:
        quota[c] += 1
    rng = np.random.default_rng(seed)
    keep = []
    for c in classes:
        idx = np.flatnonzero(labels == c)
        keep.append(rng.choice(idx, size=quota[c], replace=False))
    keep = np.sort(np.concatenate(keep))
    return [points[i] for i in keep]
