"""Dataset schema, CSV ingestion, normalization, chronological splitting,
windowing, and the robustness perturbations (missing values, SNR noise).

Two files describe a dataset:

* stations CSV with header ``id,lat,lon``;
* series CSV in long format with header
  ``timestamp,station_id,target,<factor columns...>``, one row per
  (timestamp, station). Factor columns must include ``wind_speed_kmh``
  (km/h, >= 0) and ``wind_dir_deg`` (degrees from north the air moves
  toward, in [0, 360)). Timestamps are naive ISO-8601 at a fixed
  granularity with no gaps.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, replace
from datetime import datetime, timedelta

import numpy as np

from .graphs import Graph, StationSet, build_advection_graph

WIND_SPEED = "wind_speed_kmh"
WIND_DIR = "wind_dir_deg"


class DataValidationError(ValueError):
    pass


@dataclass(frozen=True)
class Dataset:
    stations: StationSet
    times: tuple[datetime, ...]
    target: np.ndarray            # (N, L)
    covariates: np.ndarray        # (N, L, d_m)
    channel_names: tuple[str, ...]
    granularity_hours: float

    @property
    def n(self) -> int:
        return self.stations.n

    @property
    def length(self) -> int:
        return len(self.times)

    @property
    def d_m(self) -> int:
        return len(self.channel_names)

    def wind_fields(self) -> tuple[np.ndarray, np.ndarray]:
        """(speed, direction), each (N, L), raw units."""
        si = self.channel_names.index(WIND_SPEED)
        di = self.channel_names.index(WIND_DIR)
        return self.covariates[:, :, si], self.covariates[:, :, di]


@dataclass(frozen=True)
class NormStats:
    """Per-channel z-score statistics computed on the training split only."""

    target_mean: float
    target_std: float
    cov_mean: np.ndarray
    cov_std: np.ndarray

    def normalize_target(self, x: np.ndarray) -> np.ndarray:
        return (x - self.target_mean) / self.target_std

    def denormalize_target(self, x: np.ndarray) -> np.ndarray:
        return x * self.target_std + self.target_mean

    def normalize_covariates(self, m: np.ndarray) -> np.ndarray:
        return (m - self.cov_mean) / self.cov_std


def compute_norm_stats(train: Dataset) -> NormStats:
    tstd = float(train.target.std())
    cstd = train.covariates.reshape(-1, train.d_m).std(axis=0)
    bad = [train.channel_names[k] for k in np.flatnonzero(cstd == 0.0)]
    if tstd == 0.0:
        raise DataValidationError("target series is constant; std must be > 0")
    if bad:
        raise DataValidationError(f"constant covariate channels (std = 0): {bad}")
    return NormStats(
        target_mean=float(train.target.mean()),
        target_std=tstd,
        cov_mean=train.covariates.reshape(-1, train.d_m).mean(axis=0),
        cov_std=cstd,
    )


# ---------------------------------------------------------------------------
# loading and saving


def load_stations(path) -> StationSet:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        required = {"id", "lat", "lon"}
        if reader.fieldnames is None or not required.issubset(reader.fieldnames):
            raise DataValidationError(
                f"{path}: stations header must contain {sorted(required)}, "
                f"got {reader.fieldnames}"
            )
        ids, lats, lons = [], [], []
        for lineno, row in enumerate(reader, start=2):
            try:
                ids.append(row["id"])
                lats.append(float(row["lat"]))
                lons.append(float(row["lon"]))
            except (TypeError, ValueError) as exc:
                raise DataValidationError(f"{path}:{lineno}: bad station row: {exc}") from exc
    if not ids:
        raise DataValidationError(f"{path}: no stations")
    try:
        return StationSet(tuple(ids), np.array(lats), np.array(lons))
    except ValueError as exc:
        raise DataValidationError(f"{path}: {exc}") from exc


def load_dataset(stations_path, series_path) -> Dataset:
    """Parse and validate the two-file CSV schema into a dense Dataset."""
    stations = load_stations(stations_path)
    id_index = {sid: k for k, sid in enumerate(stations.ids)}

    with open(series_path, newline="") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        fixed = ["timestamp", "station_id", "target"]
        missing = [c for c in fixed + [WIND_SPEED, WIND_DIR] if c not in header]
        if missing:
            raise DataValidationError(f"{series_path}: missing columns {missing}")
        channels = [c for c in header if c not in fixed]

        cells: dict[tuple[datetime, int], tuple[float, list[float], int]] = {}
        times_seen: dict[datetime, None] = {}
        for lineno, row in enumerate(reader, start=2):
            try:
                ts = datetime.fromisoformat(row["timestamp"])
            except ValueError as exc:
                raise DataValidationError(
                    f"{series_path}:{lineno}: bad timestamp {row['timestamp']!r}"
                ) from exc
            sid = row["station_id"]
            if sid not in id_index:
                raise DataValidationError(
                    f"{series_path}:{lineno}: unknown station_id {sid!r}"
                )
            try:
                target = float(row["target"])
                factors = [float(row[c]) for c in channels]
            except (TypeError, ValueError) as exc:
                raise DataValidationError(f"{series_path}:{lineno}: bad value: {exc}") from exc
            key = (ts, id_index[sid])
            if key in cells:
                raise DataValidationError(
                    f"{series_path}:{lineno}: duplicate row for {sid} at {ts.isoformat()}"
                )
            cells[key] = (target, factors, lineno)
            times_seen.setdefault(ts, None)

    times = sorted(times_seen)
    if len(times) < 2:
        raise DataValidationError(f"{series_path}: need at least 2 timestamps")
    delta = times[1] - times[0]
    for a, b in zip(times, times[1:]):
        if b - a != delta:
            raise DataValidationError(
                f"{series_path}: timestamp gap after {a.isoformat()} "
                f"(expected {(a + delta).isoformat()}, found {b.isoformat()})"
            )
    granularity_hours = delta.total_seconds() / 3600.0

    n, length, d_m = stations.n, len(times), len(channels)
    target = np.empty((n, length), dtype=np.float64)
    covariates = np.empty((n, length, d_m), dtype=np.float64)
    for t_idx, ts in enumerate(times):
        for s_idx in range(n):
            cell = cells.get((ts, s_idx))
            if cell is None:
                raise DataValidationError(
                    f"{series_path}: no row for station {stations.ids[s_idx]!r} "
                    f"at {ts.isoformat()}"
                )
            target[s_idx, t_idx] = cell[0]
            covariates[s_idx, t_idx, :] = cell[1]

    si, di = channels.index(WIND_SPEED), channels.index(WIND_DIR)
    speed, direction = covariates[:, :, si], covariates[:, :, di]
    if np.any(speed < 0):
        s_bad, t_bad = np.argwhere(speed < 0)[0]
        raise DataValidationError(
            f"{series_path}: negative wind speed for station "
            f"{stations.ids[s_bad]!r} at {times[t_bad].isoformat()}"
        )
    if np.any((direction < 0) | (direction >= 360.0)):
        s_bad, t_bad = np.argwhere((direction < 0) | (direction >= 360.0))[0]
        raise DataValidationError(
            f"{series_path}: wind direction outside [0, 360) for station "
            f"{stations.ids[s_bad]!r} at {times[t_bad].isoformat()}"
        )

    return Dataset(stations, tuple(times), target, covariates, tuple(channels),
                   granularity_hours)


def save_dataset(dataset: Dataset, stations_path, series_path) -> None:
    """Emit the exact CSV schema :func:`load_dataset` reads; round-trip exact."""
    with open(stations_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["id", "lat", "lon"])
        for sid, lat, lon in zip(dataset.stations.ids, dataset.stations.lats,
                                 dataset.stations.lons):
            writer.writerow([sid, f"{lat:.17g}", f"{lon:.17g}"])
    with open(series_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["timestamp", "station_id", "target", *dataset.channel_names])
        for t_idx, ts in enumerate(dataset.times):
            for s_idx, sid in enumerate(dataset.stations.ids):
                row = [ts.isoformat(), sid, f"{dataset.target[s_idx, t_idx]:.17g}"]
                row += [f"{v:.17g}" for v in dataset.covariates[s_idx, t_idx, :]]
                writer.writerow(row)


def write_manifest(path, entries: dict) -> None:
    with open(path, "w") as fh:
        for key, value in entries.items():
            fh.write(f"{key}={value}\n")


def read_manifest(path) -> dict[str, str]:
    out = {}
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if line and "=" in line:
                key, value = line.split("=", 1)
                out[key] = value
    return out


# ---------------------------------------------------------------------------
# splitting and windowing


def _slice(dataset: Dataset, lo: int, hi: int) -> Dataset:
    return replace(
        dataset,
        times=dataset.times[lo:hi],
        target=dataset.target[:, lo:hi].copy(),
        covariates=dataset.covariates[:, lo:hi, :].copy(),
    )


def chronological_split(dataset: Dataset, ratios=(2, 1, 1)) -> tuple[Dataset, Dataset, Dataset]:
    """Contiguous train/val/test ranges in time order, no overlap."""
    if len(ratios) != 3 or any(r <= 0 for r in ratios):
        raise DataValidationError(f"ratios must be three positive numbers, got {ratios}")
    total = float(sum(ratios))
    length = dataset.length
    b1 = int(length * ratios[0] / total)
    b2 = int(length * (ratios[0] + ratios[1]) / total)
    if b1 < 1 or b2 <= b1 or b2 >= length:
        raise DataValidationError(
            f"degenerate split: lengths {(b1, b2 - b1, length - b2)} from ratios {ratios}"
        )
    return _slice(dataset, 0, b1), _slice(dataset, b1, b2), _slice(dataset, b2, length)


@dataclass(frozen=True)
class WindowSample:
    """One training instance with its precomputed wind-transport graphs.

    Inputs are z-scored; ``y_raw`` keeps the untouched label slice for
    metric computation on the original scale.
    """

    start: int
    x: np.ndarray                  # (N, T) normalized input target
    m: np.ndarray                  # (N, T, d_m) normalized covariates
    y_raw: np.ndarray              # (N, H) raw labels
    y_norm: np.ndarray             # (N, H) normalized labels
    adv_graphs: tuple[Graph, ...]          # per input step
    horizon_adv_graphs: tuple[Graph, ...]  # per horizon step
    m_horizon: np.ndarray          # (N, H, d_m) normalized covariates
    last_input_raw: np.ndarray     # (N,) raw input value at the window end


def build_advection_series(dataset: Dataset, tau: int) -> list[Graph]:
    """A_adv for every step of the series, using winds lagged by tau steps.

    Lookback indices before the series start clamp to step 0.
    """
    speed, direction = dataset.wind_fields()
    graphs = []
    for a in range(dataset.length):
        src = max(0, a - tau)
        graphs.append(
            build_advection_graph(
                dataset.stations, speed[:, src], direction[:, src], tau,
                dataset.granularity_hours,
            )
        )
    return graphs


def make_windows(
    split: Dataset,
    t_in: int,
    horizon: int,
    stride: int,
    tau: int,
    stats: NormStats,
    input_dataset: Dataset | None = None,
    adv_graphs: list[Graph] | None = None,
) -> list[WindowSample]:
    """Slide a (T, H) window over the split with the given stride.

    ``input_dataset`` may supply a perturbed copy of the same split for the
    input slices; labels always come from the pristine ``split``.
    """
    if stride < 1:
        raise DataValidationError(f"stride must be >= 1, got {stride}")
    source = split if input_dataset is None else input_dataset
    if source.length != split.length:
        raise DataValidationError("input_dataset must cover the same time range")
    length = split.length
    if length < t_in + horizon:
        raise DataValidationError(
            f"split length {length} shorter than T + H = {t_in + horizon}"
        )
    if adv_graphs is None:
        adv_graphs = build_advection_series(source, tau)

    x_norm = stats.normalize_target(source.target)
    m_norm = stats.normalize_covariates(source.covariates)
    y_norm_full = stats.normalize_target(split.target)

    samples = []
    for start in range(0, length - t_in - horizon + 1, stride):
        mid = start + t_in
        end = mid + horizon
        samples.append(
            WindowSample(
                start=start,
                x=x_norm[:, start:mid].copy(),
                m=m_norm[:, start:mid, :].copy(),
                y_raw=split.target[:, mid:end].copy(),
                y_norm=y_norm_full[:, mid:end].copy(),
                adv_graphs=tuple(adv_graphs[start:mid]),
                horizon_adv_graphs=tuple(adv_graphs[mid:end]),
                m_horizon=m_norm[:, mid:end, :].copy(),
                last_input_raw=source.target[:, mid - 1].copy(),
            )
        )
    return samples


# ---------------------------------------------------------------------------
# robustness perturbations


def perturb_missing(
    dataset: Dataset, rate: float, seed: int, fill: float | None = None
) -> tuple[Dataset, np.ndarray]:
    """Drop target readings per sensor independently and fill by carrying the
    last observation forward; a dropped first reading takes ``fill`` (or the
    sensor's surviving mean). Returns the perturbed copy and the drop mask."""
    if not 0.0 <= rate < 1.0:
        raise DataValidationError(f"missing rate must lie in [0, 1), got {rate}")
    rng = np.random.default_rng(seed)
    mask = rng.random(dataset.target.shape) < rate
    target = dataset.target.copy()
    for s in range(dataset.n):
        kept = target[s, ~mask[s]]
        cold = fill if fill is not None else (float(kept.mean()) if kept.size else 0.0)
        last = cold
        for t in range(dataset.length):
            if mask[s, t]:
                target[s, t] = last
            else:
                last = target[s, t]
    return replace(dataset, target=target), mask


def perturb_noise(dataset: Dataset, snr_db: float, seed: int) -> Dataset:
    """Additive Gaussian noise, power = signal power / 10^(snr_db/10), per sensor."""
    rng = np.random.default_rng(seed)
    target = dataset.target.copy()
    for s in range(dataset.n):
        power = float(np.mean(target[s] ** 2))
        if power <= 0.0:
            raise DataValidationError(f"station {dataset.stations.ids[s]!r} has zero signal power")
        sigma = np.sqrt(power / (10.0 ** (snr_db / 10.0)))
        target[s] += rng.normal(0.0, sigma, size=dataset.length)
    return replace(dataset, target=target)
