"""Ground-truth fine-step graph transport simulator with known delays.

Concentrations follow explicit Euler integration of

    du/dt = D_true * (graph Laplacian smoothing) + delayed advection + S

where advection moves mass along wind-consistent edges (positive
along-bearing wind component) at a rate proportional to v_eff / d_ij, each
transfer arriving after its physical travel time d_ij / v_eff. Delays are
exact by construction: every transfer is queued and delivered at its
arrival step.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from datetime import datetime, timedelta

import numpy as np

from .data import WIND_DIR, WIND_SPEED, Dataset, WindowSample
from .graphs import (
    StationSet,
    build_diffusion_graph,
    initial_bearing_deg,
    pairwise_distances_km,
)


class StabilityError(ValueError):
    """Fine-step integration would be unstable for this configuration."""


@dataclass(frozen=True)
class WindRegime:
    """Piecewise-constant wind over ``steps`` coarse steps, per station."""

    steps: int
    speed_kmh: np.ndarray
    dir_deg: np.ndarray


def wind_regime(steps: int, speed_kmh, dir_deg, n: int) -> WindRegime:
    speed = np.broadcast_to(np.asarray(speed_kmh, dtype=np.float64), (n,)).copy()
    direction = np.broadcast_to(np.asarray(dir_deg, dtype=np.float64), (n,)).copy()
    if np.any(speed < 0):
        raise ValueError("wind speed must be non-negative")
    if np.any((direction < 0) | (direction >= 360.0)):
        raise ValueError("wind direction must lie in [0, 360)")
    return WindRegime(steps, speed, direction)


@dataclass(frozen=True)
class SourceEvent:
    """Emission at one station: ``magnitude`` units/hour over the step range
    [start, start + duration) in coarse steps."""

    station: int
    start: int
    duration: int
    magnitude: float


@dataclass(frozen=True)
class OracleConfig:
    stations: StationSet
    length: int
    granularity_hours: float
    d_true: float
    wind_regimes: tuple[WindRegime, ...]
    sources: tuple[SourceEvent, ...]
    sink_rate: float = 0.02
    background_rate: float = 0.0
    advection_strength: float = 0.5
    initial_value: float = 1.0
    fine_substeps: int = 10
    kappa: float = 0.1
    start_time: datetime = field(default_factory=lambda: datetime(2020, 1, 1))

    def __post_init__(self):
        if self.fine_substeps < 10:
            raise StabilityError(
                f"fine_substeps must be >= 10, got {self.fine_substeps}"
            )
        if self.length < 2:
            raise ValueError("length must be at least 2 coarse steps")
        for ev in self.sources:
            if ev.magnitude < 0:
                raise ValueError(f"negative source magnitude: {ev.magnitude}")
            if not 0 <= ev.station < self.stations.n:
                raise ValueError(f"source station {ev.station} out of range")
        _check_stability(self)


def _check_stability(config: OracleConfig) -> None:
    """Explicit-Euler bounds: diffusion keeps positivity, advection outflow
    stays well below one state per fine step."""
    dt = config.granularity_hours / config.fine_substeps
    lap = _laplacian(config)
    max_deg = float(np.max(np.diag(lap)))
    if config.d_true * dt * max_deg > 1.0:
        raise StabilityError(
            f"diffusion unstable: D*dt*max_degree = {config.d_true * dt * max_deg:.3g} > 1"
        )
    dist = pairwise_distances_km(config.stations)
    for regime in config.wind_regimes:
        rates = _transfer_rates(config.stations, dist, regime.speed_kmh,
                                regime.dir_deg, config.advection_strength)
        outflow = max((sum(r for _, r, _ in edges) for edges in rates if edges),
                      default=0.0)
        if (outflow + config.sink_rate) * dt > 0.5:
            raise StabilityError(
                f"advection/sink outflow {outflow + config.sink_rate:.3g}/h "
                f"too fast for fine step {dt:.3g} h"
            )


def _laplacian(config: OracleConfig) -> np.ndarray:
    w = build_diffusion_graph(config.stations, config.kappa).weights
    return np.diag(w.sum(axis=1)) - w


def _transfer_rates(stations, dist, speed, direction, strength):
    """Per source station: list of (receiver, rate/h, delay h) over
    wind-consistent pairs (positive along-bearing component)."""
    n = stations.n
    out: list[list[tuple[int, float, float]]] = [[] for _ in range(n)]
    for j in range(n):
        if speed[j] <= 0:
            continue
        for i in range(n):
            if i == j or dist[j, i] <= 0:
                continue
            bearing = initial_bearing_deg(
                stations.lats[j], stations.lons[j], stations.lats[i], stations.lons[i]
            )
            v_eff = speed[j] * math.cos(math.radians(direction[j] - bearing))
            if v_eff <= 0:
                continue
            out[j].append((i, strength * v_eff / dist[j, i], dist[j, i] / v_eff))
    return out


def periodic_sources(
    station: int, magnitude: float, duration: int, period: int, length: int,
    phase: int = 0,
) -> list[SourceEvent]:
    """Impulse train: one event every ``period`` steps starting at ``phase``."""
    return [
        SourceEvent(station, start, duration, magnitude)
        for start in range(phase, length, period)
    ]


def grid_stations(rows: int, cols: int, spacing_km: float,
                  lat0: float = 35.0, lon0: float = 110.0) -> StationSet:
    """Roughly regular rows x cols grid with the given spacing."""
    dlat = spacing_km / 111.195
    dlon = spacing_km / (111.195 * math.cos(math.radians(lat0)))
    ids, lats, lons = [], [], []
    for r in range(rows):
        for c in range(cols):
            ids.append(f"s{r}{c}")
            lats.append(lat0 + r * dlat)
            lons.append(lon0 + c * dlon)
    return StationSet(tuple(ids), np.array(lats), np.array(lons))


def default_config(seed: int = 0, n: int = 12, length: int = 3000) -> OracleConfig:
    """Acceptance-scale dataset: station grid ~50 km apart, two rotating wind
    regimes, three recurring impulse sources, mild uniform sink."""
    cols = max(2, int(round(math.sqrt(n * 4 / 3))))
    rows = max(1, (n + cols - 1) // cols)
    while rows * cols > n and rows > 1:
        if (rows - 1) * cols >= n:
            rows -= 1
        else:
            break
    stations = grid_stations(rows, cols, 50.0)
    if stations.n != n:
        raise ValueError(f"n = {n} does not tile a grid ({rows}x{cols})")
    rng = np.random.default_rng(seed)
    regimes = (
        wind_regime(24, 30.0, 90.0, n),   # eastward along grid rows
        wind_regime(24, 27.0, 0.0, n),    # northward along grid columns
    )
    sources: list[SourceEvent] = []
    for station, period, magnitude in zip(
        rng.choice(n, size=3, replace=False),
        (48, 60, 72),
        (60.0, 45.0, 50.0),
    ):
        phase = int(rng.integers(0, period))
        sources += periodic_sources(int(station), magnitude, 2, period, length, phase)
    return OracleConfig(
        stations=stations,
        length=length,
        granularity_hours=1.0,
        d_true=0.05,
        wind_regimes=regimes,
        sources=tuple(sources),
        sink_rate=0.02,
        background_rate=0.4,
        advection_strength=0.5,
        initial_value=5.0,
        fine_substeps=10,
    )


def simulate_transport(config: OracleConfig) -> Dataset:
    """Run the fine-step integration and emit a coarse-granularity Dataset."""
    n = config.stations.n
    length = config.length
    sub = config.fine_substeps
    dt = config.granularity_hours / sub
    total_fine = length * sub

    lap = _laplacian(config)
    dist = pairwise_distances_km(config.stations)

    # coarse-step wind fields from the cycling regimes
    speed = np.zeros((n, length))
    direction = np.zeros((n, length))
    regime_of = np.zeros(length, dtype=int)
    k = 0
    ridx = 0
    while k < length:
        regime = config.wind_regimes[ridx % len(config.wind_regimes)]
        span = min(regime.steps, length - k)
        speed[:, k : k + span] = regime.speed_kmh[:, None]
        direction[:, k : k + span] = regime.dir_deg[:, None]
        regime_of[k : k + span] = ridx % len(config.wind_regimes)
        k += span
        ridx += 1

    rates_by_regime = [
        _transfer_rates(config.stations, dist, r.speed_kmh, r.dir_deg,
                        config.advection_strength)
        for r in config.wind_regimes
    ]

    # per-hour source field per coarse step
    source_rate = np.zeros((n, length))
    for ev in config.sources:
        hi = min(ev.start + ev.duration, length)
        if ev.start < length:
            source_rate[ev.station, ev.start : hi] += ev.magnitude
    source_rate += config.background_rate

    arrivals = np.zeros((total_fine + 1, n))
    u = np.full(n, float(config.initial_value))
    target = np.zeros((n, length))
    target[:, 0] = u

    for step in range(total_fine - sub):
        coarse = step // sub
        t_hours = step * dt
        rates = rates_by_regime[regime_of[coarse]]

        du = -config.d_true * (lap @ u) + source_rate[:, coarse] - config.sink_rate * u
        moved = np.zeros(n)
        for j in range(n):
            for i, rate, delay in rates[j]:
                amount = rate * dt * u[j]
                moved[j] += amount
                arrive = int(round((t_hours + delay) / dt))
                if arrive <= total_fine:
                    arrivals[arrive, i] += amount
        u = u + du * dt - moved + arrivals[step + 1]
        np.maximum(u, 0.0, out=u)
        if (step + 1) % sub == 0:
            target[:, (step + 1) // sub] = u

    times = tuple(
        config.start_time + timedelta(hours=config.granularity_hours * k)
        for k in range(length)
    )
    covariates = np.stack([speed, direction], axis=2)
    return Dataset(
        stations=config.stations,
        times=times,
        target=target,
        covariates=covariates,
        channel_names=(WIND_SPEED, WIND_DIR),
        granularity_hours=config.granularity_hours,
    )


def persistence_forecast(sample: WindowSample) -> np.ndarray:
    """Repeat the last observed value across the horizon, raw scale."""
    horizon = sample.y_raw.shape[1]
    return np.tile(sample.last_input_raw[:, None], (1, horizon))


def cross_correlation_lag(series_a: np.ndarray, series_b: np.ndarray, max_lag: int) -> int:
    """Lag in [0, max_lag] maximizing the normalized correlation of b against
    a shifted forward, i.e. the delay by which b trails a."""
    a = np.asarray(series_a, dtype=np.float64)
    b = np.asarray(series_b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError("series must be 1-d and equal length")
    if a.size <= 2 * max_lag:
        raise ValueError(f"need length > 2*max_lag = {2 * max_lag}, got {a.size}")
    if a.std() == 0.0 or b.std() == 0.0:
        raise ValueError("constant series: zero variance")
    best_lag, best_corr = 0, -np.inf
    for lag in range(max_lag + 1):
        x = a[: a.size - lag]
        y = b[lag:]
        sx, sy = x.std(), y.std()
        if sx == 0.0 or sy == 0.0:
            continue
        corr = float(np.mean((x - x.mean()) * (y - y.mean())) / (sx * sy))
        if corr > best_corr:
            best_lag, best_corr = lag, corr
    return best_lag
