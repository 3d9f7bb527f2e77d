"""Wind-weighted industrial pollution risk per neighborhood.

For a target point B the risk is

    log(epsilon + sum_A TEP(A) * N(dist(A, B); mu, sigma) * wind(A -> B))

where TEP(A) is the facility's summed toxic equivalency potential, ``N`` a
Gaussian density over great-circle distance in km, and ``wind`` the
frequency of the wind-rose sector containing the A -> B bearing relative to
a uniform rose (so no wind data means weight 1).
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import kernels
from .kernels import haversine_km, initial_bearing_deg


@dataclass(frozen=True)
class FacilityRecord:
    facility_id: str
    location: tuple
    years: tuple
    tep_values: tuple

    def __post_init__(self):
        if any(v < 0 for v in self.tep_values):
            raise ValueError(f"negative TEP value for facility {self.facility_id!r}")


@dataclass(frozen=True)
class WindRose:
    """Directional histogram; sectors are ``(start_deg, end_deg, frequency)``.

    A sector with ``start > end`` wraps through north. Sector bearings give
    the direction the wind carries pollutants toward.
    """
    sectors: tuple

    def __post_init__(self):
        if not self.sectors:
            raise ValueError("wind rose needs at least one sector")
        total_width = 0.0
        spans = []
        for start, end, freq in self.sectors:
            if not (0 <= start < 360 and 0 < end <= 360):
                raise ValueError(f"sector bounds out of range: ({start}, {end})")
            if not 0 <= freq <= 1:
                raise ValueError(f"sector frequency {freq} outside [0, 1]")
            width = (end - start) % 360 or 360.0
            total_width += width
            if start < end:
                spans.append((start, end))
            else:
                spans.extend([(start, 360.0), (0.0, end)])
        if abs(sum(f for _, _, f in self.sectors) - 1.0) > 1e-6:
            raise ValueError("wind rose frequencies must sum to 1 (+/- 1e-6)")
        spans.sort()
        if abs(total_width - 360.0) > 1e-9 or spans[0][0] != 0:
            raise ValueError("wind rose sectors must cover [0, 360) exactly")
        for (a0, a1), (b0, _) in zip(spans, spans[1:]):
            if b0 < a1 - 1e-12 or b0 > a1 + 1e-12:
                raise ValueError("wind rose sectors overlap or leave a gap")

    @classmethod
    def uniform(cls, n_sectors=8):
        w = 360.0 / n_sectors
        return cls(tuple((i * w, (i + 1) * w, 1.0 / n_sectors) for i in range(n_sectors)))

    def arrays(self):
        """Sector starts, ends (360 mapped to 0 for wrap tests) and normalised weights."""
        start = np.array([s for s, _, _ in self.sectors], dtype=float)
        end = np.array([e for _, e, _ in self.sectors], dtype=float)
        freq = np.array([f for _, _, f in self.sectors], dtype=float)
        width = np.where(end > start, end - start, end + 360.0 - start)
        weight = freq / (width / 360.0)
        end = np.where(end >= 360.0, 0.0, end)
        # a full-circle single sector: start 0, end 0 must match everything
        end = np.where((start == 0.0) & (end == 0.0), 360.0, end)
        return start, end, weight


_NO_WIND = (np.array([0.0]), np.array([360.0]), np.array([1.0]))


@dataclass(frozen=True)
class PlumeParams:
    mu_km: float = 2.5
    sigma_km: float = 1.0
    epsilon: float = 1.0

    def __post_init__(self):
        if self.mu_km < 0:
            raise ValueError("mu_km must be >= 0")
        if not self.sigma_km > 0:
            raise ValueError("sigma_km must be > 0")
        if not self.epsilon > 0:
            raise ValueError("epsilon must be > 0")


@dataclass(frozen=True)
class RiskScore:
    neighborhood_id: str
    value: float


def facility_tep(facility):
    if any(v < 0 for v in facility.tep_values):
        raise ValueError(f"negative TEP value for facility {facility.facility_id!r}")
    return float(math.fsum(facility.tep_values))


def distance_density(d_km, params):
    if np.any(np.asarray(d_km) < 0):
        raise ValueError("distance must be non-negative")
    z = (np.asarray(d_km, dtype=float) - params.mu_km) / params.sigma_km
    out = np.exp(-0.5 * z * z) / (params.sigma_km * math.sqrt(2.0 * math.pi))
    return float(out) if out.ndim == 0 else out


def wind_weight(rose, bearing_deg):
    """Sector frequency at ``bearing_deg`` divided by the uniform frequency."""
    if not 0 <= bearing_deg < 360:
        raise ValueError(f"bearing {bearing_deg} outside [0, 360)")
    if rose is None:
        return 1.0
    start, end, weight = rose.arrays()
    return float(kernels.sector_lookup(np.array([bearing_deg]), start, end, weight)[0])


def _source_arrays(facilities):
    lat = np.array([f.location[0] for f in facilities], dtype=float)
    lon = np.array([f.location[1] for f in facilities], dtype=float)
    tep = np.array([facility_tep(f) for f in facilities], dtype=float)
    return lat, lon, tep


def _check_coords(lat, lon):
    lat, lon = np.asarray(lat, float), np.asarray(lon, float)
    if np.any(np.abs(lat) > 90) or np.any(np.abs(lon) > 180) or np.any(np.isnan(lat + lon)):
        raise ValueError("coordinates out of range")


def risk_values(facilities, lat, lon, rose, params):
    """Vectorised risk for arrays of target coordinates."""
    lat = np.atleast_1d(np.asarray(lat, dtype=float))
    lon = np.atleast_1d(np.asarray(lon, dtype=float))
    _check_coords(lat, lon)
    s_lat, s_lon, tep = _source_arrays(facilities)
    _check_coords(s_lat, s_lon)
    sectors = _NO_WIND if rose is None else rose.arrays()
    total = kernels.plume_sums(s_lat, s_lon, tep, lat, lon,
                               float(params.mu_km), float(params.sigma_km), *sectors)
    return np.log(params.epsilon + total)


def neighborhood_risk(facilities, target, rose, params, neighborhood_id=""):
    value = risk_values(facilities, [target[0]], [target[1]], rose, params)[0]
    return RiskScore(neighborhood_id, float(value))


def table_risk(facilities, table, rose, params):
    """Risk for every row of a factor table (rows with missing centroid get NaN)."""
    ok = ~(np.isnan(table.lat) | np.isnan(table.lon))
    out = np.full(table.n_rows, np.nan)
    if ok.any():
        out[ok] = risk_values(facilities, table.lat[ok], table.lon[ok], rose, params)
    return out


def tune_sigma(facilities, table, rose, candidates, mu_km=2.5, epsilon=1.0):
    """Pick the candidate sigma whose risk correlates best with the response.

    Returns ``(best_sigma, {sigma: pearson_r})``. Ties go to the smaller sigma;
    candidates giving a constant risk are recorded as NaN and skipped.
    """
    if not candidates:
        raise ValueError("no sigma candidates given")
    ok = table.usable & ~(np.isnan(table.lat) | np.isnan(table.lon))
    if ok.sum() < 3:
        raise ValueError("need at least 3 rows with a response to tune sigma")
    y = table.response[ok]
    if np.ptp(y) == 0:
        raise ValueError("response is constant; correlation undefined")
    corr = {}
    for s in candidates:
        risk = risk_values(facilities, table.lat[ok], table.lon[ok], rose,
                           PlumeParams(mu_km=mu_km, sigma_km=s, epsilon=epsilon))
        corr[s] = float(np.corrcoef(risk, y)[0, 1]) if np.ptp(risk) > 0 else math.nan
    valid = [s for s in candidates if not math.isnan(corr[s])]
    if not valid:
        raise ValueError("risk is constant for every candidate sigma")
    best = max(sorted(valid), key=lambda s: corr[s])
    return best, corr


__all__ = [
    "FacilityRecord", "WindRose", "PlumeParams", "RiskScore", "facility_tep",
    "distance_density", "wind_weight", "neighborhood_risk", "risk_values",
    "table_risk", "tune_sigma", "haversine_km", "initial_bearing_deg",
]
