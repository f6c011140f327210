"""Precomputed LOS-probability grid with kd-tree nearest-node lookup.

Distances between grid nodes are measured after dividing each axis by its
resolution, so one distance step and one RSSI step weigh the same.
Queries outside the grid clamp to the nearest boundary node.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DataError

GRID_FORMAT = "blenlos-losgrid"
GRID_VERSION = 1
DEFAULT_BOUNDS = ((0.0, 10.0), (-100.0, -40.0))
DEFAULT_RESOLUTION = (0.1, 1.0)
DEFAULT_MAX_NODES = 10_000_000


class KDTree:
    """Static 2-d tree over a fixed point set with an instrumented NN search.

    Nearest-neighbour ties go to the lowest point index.
    """

    def __init__(self, points):
        pts = np.asarray(points, dtype=float)
        if pts.ndim != 2 or len(pts) == 0:
            raise ValueError("points must be a non-empty (n, k) array")
        self.points = pts
        self.n, self.k = pts.shape
        self.left = np.full(self.n, -1, dtype=np.int64)
        self.right = np.full(self.n, -1, dtype=np.int64)
        self.axis = np.zeros(self.n, dtype=np.int64)
        self.root = self._build(np.arange(self.n), 0)
        self.visits = 0  # nodes inspected by the last query

    def _build(self, idx, depth):
        # iterative to stay clear of the recursion limit on big grids
        stack = [(idx, depth, None, None)]
        root = -1
        while stack:
            idx, depth, parent, side = stack.pop()
            if len(idx) == 0:
                continue
            ax = depth % self.k
            order = np.lexsort((idx, self.points[idx, ax]))
            idx = idx[order]
            mid = len(idx) // 2
            node = idx[mid]
            self.axis[node] = ax
            if parent is None:
                root = node
            elif side == 0:
                self.left[parent] = node
            else:
                self.right[parent] = node
            stack.append((idx[:mid], depth + 1, node, 0))
            stack.append((idx[mid + 1:], depth + 1, node, 1))
        return root

    def nearest(self, q) -> tuple[int, float]:
        """Index of the nearest point and its squared distance."""
        q = np.asarray(q, dtype=float)
        pts, left, right, axis = self.points, self.left, self.right, self.axis
        best, best_d2 = -1, math.inf
        visits = 0
        stack = [(self.root, 0.0)]
        while stack:
            node, bound = stack.pop()
            if node < 0 or bound > best_d2:
                continue
            visits += 1
            diff = pts[node] - q
            d2 = float(diff @ diff)
            if d2 < best_d2 or (d2 == best_d2 and node < best):
                best, best_d2 = node, d2
            ax = axis[node]
            delta = q[ax] - pts[node, ax]
            near, far = (left[node], right[node]) if delta < 0 else (right[node], left[node])
            stack.append((far, delta * delta))
            stack.append((near, 0.0))
        self.visits = visits
        return int(best), best_d2


def _axis_nodes(lo, hi, res):
    count = math.ceil((hi - lo) / res - 1e-9) + 1
    return np.minimum(lo + res * np.arange(count), hi)


@dataclass(frozen=True, eq=False)
class LosGrid:
    bounds: tuple  # ((d_min, d_max), (r_min, r_max))
    resolution: tuple  # (m, dBm)
    p_los: np.ndarray  # (n_d, n_r) row-major, distance-major
    tree: KDTree = field(init=False, repr=False)

    def __post_init__(self):
        (d0, d1), (r0, r1) = self.bounds
        if not (d1 > d0 and r1 > r0):
            raise ConfigError("grid bounds must be non-degenerate on both axes")
        if not all(r > 0 for r in self.resolution):
            raise ConfigError("grid resolution must be positive")
        shape = (len(self.distance_nodes), len(self.rssi_nodes))
        p = np.asarray(self.p_los, dtype=float)
        if p.shape != shape:
            raise DataError(f"p_los has shape {p.shape}, expected {shape}")
        if np.any((p < 0) | (p > 1)) or not np.all(np.isfinite(p)):
            raise DataError("stored LOS probabilities must lie in [0, 1]")
        p.setflags(write=False)
        object.__setattr__(self, "p_los", p)
        object.__setattr__(self, "tree", KDTree(self._normalize(self.node_coords())))

    @property
    def distance_nodes(self) -> np.ndarray:
        return _axis_nodes(self.bounds[0][0], self.bounds[0][1], self.resolution[0])

    @property
    def rssi_nodes(self) -> np.ndarray:
        return _axis_nodes(self.bounds[1][0], self.bounds[1][1], self.resolution[1])

    @property
    def n_nodes(self) -> int:
        return self.p_los.size

    def node_coords(self) -> np.ndarray:
        """(n_nodes, 2) node coordinates in row-major order."""
        dd, rr = np.meshgrid(self.distance_nodes, self.rssi_nodes, indexing="ij")
        return np.column_stack([dd.ravel(), rr.ravel()])

    def _normalize(self, pts):
        pts = np.atleast_2d(np.asarray(pts, dtype=float))
        lo = np.array([self.bounds[0][0], self.bounds[1][0]])
        return (pts - lo) / np.asarray(self.resolution, dtype=float)

    def _clamp(self, distance, rssi):
        (d0, d1), (r0, r1) = self.bounds
        return np.clip(distance, d0, d1), np.clip(rssi, r0, r1)

    def query(self, distance: float, rssi: float) -> float:
        """Stored LOS probability of the nearest node (kd-tree search)."""
        d, r = self._clamp(float(distance), float(rssi))
        idx, _ = self.tree.nearest(self._normalize((d, r))[0])
        return float(self.p_los.flat[idx])

    def nearest_index(self, distance, rssi) -> np.ndarray:
        """Vectorised nearest-node flat indices.

        On a rectilinear grid under a per-axis metric the nearest node is the
        per-axis nearest node, so this agrees with the kd-tree search
        (including the lowest-index tie rule) without walking it.
        """
        d, r = self._clamp(np.asarray(distance, dtype=float), np.asarray(rssi, dtype=float))
        (d0, _), (r0, _) = self.bounds
        sd, sr = self.resolution
        # same normalised arithmetic as the tree, so ties break identically
        i = _nearest_on_axis((self.distance_nodes - d0) / sd, (d - d0) / sd)
        j = _nearest_on_axis((self.rssi_nodes - r0) / sr, (r - r0) / sr)
        return i * len(self.rssi_nodes) + j

    def query_many(self, distance, rssi, method: str = "nearest") -> np.ndarray:
        if method == "nearest":
            return self.p_los.ravel()[self.nearest_index(distance, rssi)]
        if method == "bilinear":
            return self.interpolate(distance, rssi)
        raise ValueError(f"unknown lookup method {method!r}")

    def interpolate(self, distance, rssi) -> np.ndarray:
        """Bilinear interpolation between the four surrounding nodes."""
        d, r = self._clamp(np.asarray(distance, dtype=float), np.asarray(rssi, dtype=float))
        dn, rn = self.distance_nodes, self.rssi_nodes
        i = np.clip(np.searchsorted(dn, d, side="right") - 1, 0, len(dn) - 2)
        j = np.clip(np.searchsorted(rn, r, side="right") - 1, 0, len(rn) - 2)
        u = (d - dn[i]) / (dn[i + 1] - dn[i])
        v = (r - rn[j]) / (rn[j + 1] - rn[j])
        P = self.p_los
        return ((1 - u) * (1 - v) * P[i, j] + u * (1 - v) * P[i + 1, j]
                + (1 - u) * v * P[i, j + 1] + u * v * P[i + 1, j + 1])

    def save(self, path) -> None:
        np.savez(path, format=GRID_FORMAT, version=GRID_VERSION,
                 bounds=np.asarray(self.bounds, dtype=float),
                 resolution=np.asarray(self.resolution, dtype=float), p_los=self.p_los)

    @classmethod
    def load(cls, path) -> "LosGrid":
        try:
            with np.load(path, allow_pickle=False) as z:
                if str(z["format"]) != GRID_FORMAT:
                    raise DataError(f"{path}: not a LOS grid file")
                if int(z["version"]) != GRID_VERSION:
                    raise DataError(f"{path}: unsupported grid version {int(z['version'])}")
                b = z["bounds"]
                return cls(((b[0, 0], b[0, 1]), (b[1, 0], b[1, 1])),
                           tuple(z["resolution"].tolist()), z["p_los"])
        except (KeyError, ValueError, OSError) as exc:
            raise DataError(f"{path}: cannot read grid ({exc})") from exc


def _nearest_on_axis(nodes, x):
    k = np.clip(np.searchsorted(nodes, x, side="right") - 1, 0, len(nodes) - 1)
    k1 = np.minimum(k + 1, len(nodes) - 1)
    a, b = nodes[k] - x, nodes[k1] - x
    # ties keep the lower index
    return np.where(b * b < a * a, k1, k)


def build_grid(model, bounds=DEFAULT_BOUNDS, resolution=DEFAULT_RESOLUTION,
               max_nodes: int = DEFAULT_MAX_NODES) -> LosGrid:
    """Evaluate ``model`` (anything with ``p_los(queries)``) at every grid node."""
    (d0, d1), (r0, r1) = bounds
    if not (d1 > d0 and r1 > r0):
        raise ConfigError("grid bounds must be non-degenerate on both axes")
    if not all(r > 0 for r in resolution):
        raise ConfigError("grid resolution must be positive")
    nd = len(_axis_nodes(d0, d1, resolution[0]))
    nr = len(_axis_nodes(r0, r1, resolution[1]))
    if nd * nr > max_nodes:
        raise ConfigError(f"grid would hold {nd * nr} nodes (cap {max_nodes})")
    dd, rr = np.meshgrid(_axis_nodes(d0, d1, resolution[0]),
                         _axis_nodes(r0, r1, resolution[1]), indexing="ij")
    p = np.asarray(model.p_los(np.column_stack([dd.ravel(), rr.ravel()])), dtype=float)
    return LosGrid(((float(d0), float(d1)), (float(r0), float(r1))),
                   (float(resolution[0]), float(resolution[1])), p.reshape(nd, nr))


def query(grid: LosGrid, distance: float, rssi: float) -> float:
    return grid.query(distance, rssi)
