"""Station geography and the three graphs the model consumes.

Graphs store ``weights[i, j]`` = weight of the directed edge j -> i
(receiver rows), the orientation K-hop message passing uses: row i of
``A @ H`` aggregates the states of i's upstream sources.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .tensor import Tensor, matmul, relu, softmax_rows, transpose

EARTH_RADIUS_KM = 6371.0


@dataclass(frozen=True)
class StationSet:
    """Named sensor locations in degrees."""

    ids: tuple[str, ...]
    lats: np.ndarray
    lons: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "lats", np.asarray(self.lats, dtype=np.float64))
        object.__setattr__(self, "lons", np.asarray(self.lons, dtype=np.float64))
        object.__setattr__(self, "ids", tuple(self.ids))
        if len(self.ids) != self.lats.size or len(self.ids) != self.lons.size:
            raise ValueError("ids, lats, lons must have equal length")
        if len(set(self.ids)) != len(self.ids):
            raise ValueError("station ids must be unique")
        _check_coords(self.lats, self.lons)

    @property
    def n(self) -> int:
        return len(self.ids)


@dataclass(frozen=True)
class Graph:
    """Dense weighted adjacency; ``weights[i, j]`` is the edge j -> i."""

    weights: np.ndarray
    directed: bool = True

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64)
        if w.ndim != 2 or w.shape[0] != w.shape[1]:
            raise ValueError(f"adjacency must be square, got {w.shape}")
        if not np.all(np.isfinite(w)):
            raise ValueError("adjacency weights must be finite")
        object.__setattr__(self, "weights", w)

    @property
    def n(self) -> int:
        return self.weights.shape[0]


def _check_coords(lats, lons):
    lats = np.atleast_1d(np.asarray(lats, dtype=np.float64))
    lons = np.atleast_1d(np.asarray(lons, dtype=np.float64))
    if np.any(np.abs(lats) > 90.0):
        raise ValueError(f"latitude out of [-90, 90]: {lats[np.abs(lats) > 90][0]}")
    if np.any(np.abs(lons) > 180.0):
        raise ValueError(f"longitude out of [-180, 180]: {lons[np.abs(lons) > 180][0]}")


def haversine_km(lat1: float, lon1: float, lat2: float, lon2: float) -> float:
    """Great-circle distance in kilometers (Earth radius 6371.0 km)."""
    _check_coords([lat1, lat2], [lon1, lon2])
    p1, p2 = math.radians(lat1), math.radians(lat2)
    dp = p2 - p1
    dl = math.radians(lon2 - lon1)
    a = math.sin(dp / 2.0) ** 2 + math.cos(p1) * math.cos(p2) * math.sin(dl / 2.0) ** 2
    return 2.0 * EARTH_RADIUS_KM * math.asin(min(1.0, math.sqrt(a)))


def initial_bearing_deg(lat1: float, lon1: float, lat2: float, lon2: float) -> float:
    """Initial great-circle bearing from point 1 to point 2, degrees from north."""
    p1, p2 = math.radians(lat1), math.radians(lat2)
    dl = math.radians(lon2 - lon1)
    x = math.sin(dl) * math.cos(p2)
    y = math.cos(p1) * math.sin(p2) - math.sin(p1) * math.cos(p2) * math.cos(dl)
    return math.degrees(math.atan2(x, y)) % 360.0


def pairwise_distances_km(stations: StationSet) -> np.ndarray:
    n = stations.n
    d = np.zeros((n, n), dtype=np.float64)
    for i in range(n):
        for j in range(i + 1, n):
            d[i, j] = d[j, i] = haversine_km(
                stations.lats[i], stations.lons[i], stations.lats[j], stations.lons[j]
            )
    return d


def gaussian_kernel_weight(distance_km: float, sigma_km: float) -> float:
    return math.exp(-(distance_km**2) / (sigma_km**2))


def build_diffusion_graph(stations: StationSet, kappa: float = 0.1) -> Graph:
    """Gaussian-kernel proximity graph, bandwidth = std of pairwise distances.

    Entries below ``kappa`` are zeroed; the diagonal is zero; symmetric.
    """
    if not 0.0 < kappa <= 1.0:
        raise ValueError(f"kappa must lie in (0, 1], got {kappa}")
    if stations.n < 2:
        raise ValueError("diffusion graph needs at least 2 stations")
    d = pairwise_distances_km(stations)
    upper = d[np.triu_indices(stations.n, k=1)]
    sigma = float(upper.std())
    if sigma == 0.0:
        raise ValueError("all stations coincide: zero distance spread (sigma = 0)")
    w = np.exp(-(d**2) / (sigma**2))
    w[w < kappa] = 0.0
    np.fill_diagonal(w, 0.0)
    return Graph(w, directed=False)


def build_adaptive_adjacency(e1: Tensor, e2: Tensor) -> Tensor:
    """Row-stochastic learned adjacency softmax(relu(E1 E2^T)).

    Returns a tape tensor so gradients flow to both embeddings; use it where
    a graph is expected by the neural blocks.
    """
    return softmax_rows(relu(matmul(e1, transpose(e2))))


def build_advection_graph(
    stations: StationSet,
    wind_speed_kmh: np.ndarray,
    wind_dir_deg: np.ndarray,
    tau: int,
    step_hours: float,
) -> Graph:
    """Binary wind-transport graph for lag ``tau`` (in grid steps).

    Edge j -> i exists iff the wind at j (speed km/h, direction = degrees
    from north the air moves toward) has an along-bearing component that
    covers the j-to-i distance within tau * step_hours hours. A wind blowing
    away from i (cos <= 0) never creates an edge; no self-edges.
    """
    if int(tau) != tau or tau < 1:
        raise ValueError(f"tau must be a positive integer, got {tau}")
    if step_hours <= 0:
        raise ValueError(f"step_hours must be positive, got {step_hours}")
    speed = np.asarray(wind_speed_kmh, dtype=np.float64)
    direction = np.asarray(wind_dir_deg, dtype=np.float64)
    if speed.shape != (stations.n,) or direction.shape != (stations.n,):
        raise ValueError("wind fields must provide one value per station")
    if np.any(speed < 0):
        raise ValueError(f"negative wind speed: {speed[speed < 0][0]}")

    horizon_h = tau * step_hours
    w = np.zeros((stations.n, stations.n), dtype=np.float64)
    for j in range(stations.n):
        if speed[j] == 0.0:
            continue
        for i in range(stations.n):
            if i == j:
                continue
            bearing = initial_bearing_deg(
                stations.lats[j], stations.lons[j], stations.lats[i], stations.lons[i]
            )
            along = speed[j] * math.cos(math.radians(direction[j] - bearing))
            if along <= 0.0:
                continue
            if along * horizon_h >= haversine_km(
                stations.lats[j], stations.lons[j], stations.lats[i], stations.lons[i]
            ):
                w[i, j] = 1.0
    return Graph(w, directed=True)


def neighbor_set(graph: Graph, i: int) -> list[int]:
    """Sorted upstream indices j with an edge j -> i."""
    if not 0 <= i < graph.n:
        raise IndexError(f"station index {i} out of range for N={graph.n}")
    return [int(j) for j in np.flatnonzero(graph.weights[i, :] != 0.0)]


def graph_to_csv(graph: Graph, path) -> None:
    """Dense matrix export for inspection."""
    np.savetxt(path, graph.weights, delimiter=",", fmt="%.17g")
