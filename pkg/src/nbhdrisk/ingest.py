"""Neighborhood factor tables: CSV loading, validation, scaling, synthesis.

A :class:`FactorTable` holds one row per neighborhood. Missing cells are
stored as NaN and never imputed; analyses decide which rows to drop.
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from .plume import FacilityRecord, WindRose

GROUPS = ("disease", "built_env", "natural_env", "non_env")
BASE_COLUMNS = ("neighborhood_id", "name", "lat", "lon", "response")


class ParseError(ValueError):
    """Malformed input file; carries the 1-based row/column when known."""

    def __init__(self, message, row=None, col=None):
        where = []
        if row is not None:
            where.append(f"row {row}")
        if col is not None:
            where.append(f"column {col!r}")
        super().__init__(f"{message} ({', '.join(where)})" if where else message)
        self.row = row
        self.col = col


class ValidationError(ValueError):
    pass


@dataclass(frozen=True)
class FactorInfo:
    description: str
    unit: str = ""
    group: str = "non_env"

    def __post_init__(self):
        if self.group not in GROUPS:
            raise ValidationError(f"unknown factor group {self.group!r}")
        if not self.description:
            raise ValidationError("factor description must be non-empty")


@dataclass(frozen=True)
class FactorMeta:
    name: str
    group: str
    unique_value_count: int
    variation_sufficient: bool


def _frozen(a):
    a = np.array(a, dtype=float)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class FactorTable:
    ids: tuple
    names: tuple
    lat: np.ndarray
    lon: np.ndarray
    response: np.ndarray
    factors: Mapping[str, np.ndarray]
    info: Mapping[str, FactorInfo]
    scaling: Mapping[str, tuple] = field(default_factory=dict)

    def __post_init__(self):
        n = len(self.ids)
        if len(set(self.ids)) != n:
            seen, dup = set(), None
            for i in self.ids:
                if i in seen:
                    dup = i
                    break
                seen.add(i)
            raise ValidationError(f"duplicate neighborhood_id {dup!r}")
        object.__setattr__(self, "lat", _frozen(self.lat))
        object.__setattr__(self, "lon", _frozen(self.lon))
        object.__setattr__(self, "response", _frozen(self.response))
        object.__setattr__(self, "factors", {k: _frozen(v) for k, v in self.factors.items()})
        for arr in (self.lat, self.lon, self.response, *self.factors.values()):
            if arr.shape != (n,):
                raise ValidationError("all columns must have one value per neighborhood")
        if len(self.names) != n:
            raise ValidationError("all columns must have one value per neighborhood")
        if np.any(self.response[~np.isnan(self.response)] < 0):
            raise ValidationError("response must be non-negative where present")
        missing = [f for f in self.factors if f not in self.info]
        if missing:
            raise ValidationError(f"factor(s) without description: {missing}")

    @property
    def n_rows(self):
        return len(self.ids)

    @property
    def factor_names(self):
        return list(self.factors)

    @property
    def usable(self):
        """Rows whose response is present."""
        return ~np.isnan(self.response)

    @property
    def missing_mask(self):
        """Per-cell missingness, columns ordered as ``["response", *factor_names]``."""
        cols = [self.response, *self.factors.values()]
        return np.isnan(np.column_stack(cols))

    def column(self, name):
        if name == "response":
            return self.response
        try:
            return self.factors[name]
        except KeyError:
            raise KeyError(f"unknown column {name!r}") from None

    def matrix(self, columns):
        return np.column_stack([self.column(c) for c in columns])

    def subset(self, rows):
        """New table restricted to ``rows`` (boolean mask or index array)."""
        rows = np.asarray(rows)
        if rows.dtype == bool:
            rows = np.flatnonzero(rows)
        return FactorTable(
            ids=tuple(self.ids[i] for i in rows),
            names=tuple(self.names[i] for i in rows),
            lat=self.lat[rows], lon=self.lon[rows], response=self.response[rows],
            factors={k: v[rows] for k, v in self.factors.items()},
            info=dict(self.info), scaling=dict(self.scaling),
        )

    def with_factor(self, name, values, info):
        factors = dict(self.factors)
        factors[name] = np.asarray(values, dtype=float)
        infos = dict(self.info)
        infos[name] = info
        return replace(self, factors=factors, info=infos)

    def select_factors(self, names):
        return replace(self, factors={n: self.factors[n] for n in names},
                       info={n: self.info[n] for n in names})


@dataclass(frozen=True)
class TableSchema:
    """Column configuration for :func:`load_factor_table`.

    ``factors`` maps factor name to its :class:`FactorInfo`. When it is
    ``None`` every non-base column becomes a factor described by its header.
    """
    response: str = "response"
    factors: Mapping[str, FactorInfo] | None = None


def _parse_float(text, row, col):
    text = text.strip()
    if text == "":
        return math.nan
    try:
        value = float(text)
    except ValueError:
        raise ParseError(f"not a number: {text!r}", row=row, col=col) from None
    if not math.isfinite(value):
        raise ParseError(f"non-finite value: {text!r}", row=row, col=col)
    return value


def _read_rows(path):
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"no such file: {path}")
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    rows = [r for r in rows if any(cell.strip() for cell in r)]
    if not rows:
        raise ParseError(f"empty file: {path}")
    header = [h.strip() for h in rows[0]]
    body = rows[1:]
    for i, r in enumerate(body, start=2):
        if len(r) != len(header):
            raise ParseError(f"expected {len(header)} fields, got {len(r)}", row=i)
    return header, body


def load_factor_table(path, schema=None):
    schema = schema or TableSchema()
    header, body = _read_rows(path)
    if len(set(header)) != len(header):
        raise ParseError("duplicate column names in header", row=1)
    required = ["neighborhood_id", "name", "lat", "lon", schema.response]
    for col in required:
        if col not in header:
            raise ValidationError(f"missing column {col!r} in {path}")
    if not body:
        raise ParseError(f"no data rows in {path}")
    idx = {h: i for i, h in enumerate(header)}
    skip = set(required)
    if schema.factors is None:
        names = [h for h in header if h not in skip]
        infos = {h: FactorInfo(description=h) for h in names}
    else:
        names = list(schema.factors)
        for n in names:
            if n not in idx:
                raise ValidationError(f"missing column {n!r} in {path}")
        infos = dict(schema.factors)

    ids, labels, lat, lon, resp = [], [], [], [], []
    cols = {n: [] for n in names}
    for r, row in enumerate(body, start=2):
        nid = row[idx["neighborhood_id"]].strip()
        if not nid:
            raise ParseError("empty neighborhood_id", row=r, col="neighborhood_id")
        ids.append(nid)
        labels.append(row[idx["name"]].strip())
        lat.append(_parse_float(row[idx["lat"]], r, "lat"))
        lon.append(_parse_float(row[idx["lon"]], r, "lon"))
        resp.append(_parse_float(row[idx[schema.response]], r, schema.response))
        for n in names:
            cols[n].append(_parse_float(row[idx[n]], r, n))
    return FactorTable(ids=tuple(ids), names=tuple(labels), lat=lat, lon=lon,
                       response=resp, factors=cols, info=infos)


def _fmt(v):
    return "" if math.isnan(v) else repr(float(v))


def write_factor_table(table, path):
    names = table.factor_names
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([*BASE_COLUMNS, *names])
        for i in range(table.n_rows):
            w.writerow([table.ids[i], table.names[i], _fmt(table.lat[i]), _fmt(table.lon[i]),
                        _fmt(table.response[i]), *(_fmt(table.factors[n][i]) for n in names)])


def validate_variation(table, k):
    """Flag factors with fewer distinct values than the basis dimension ``k``.

    Counts distinct non-missing values over rows with a response present.
    Report-only: nothing is removed from ``table``.
    """
    if k < 3:
        raise ValueError("basis dimension k must be >= 3")
    usable = table.usable
    out = []
    for name, col in table.factors.items():
        vals = col[usable]
        count = int(np.unique(vals[~np.isnan(vals)]).size)
        out.append(FactorMeta(name, table.info[name].group, count, count >= k))
    return out


def sufficient_factors(table, k):
    return [m.name for m in validate_variation(table, k) if m.variation_sufficient]


def standardize(table, columns):
    """Z-score ``columns`` (sample sd, non-missing rows); returns a new table.

    The (mean, sd) used for each column is recorded in ``table.scaling`` so
    :func:`unstandardize` can invert it.
    """
    factors = dict(table.factors)
    scaling = dict(table.scaling)
    for c in columns:
        col = table.column(c)
        vals = col[~np.isnan(col)]
        if vals.size < 2:
            raise ValidationError(f"column {c!r} has fewer than 2 values")
        mean = float(vals.mean())
        sd = float(vals.std(ddof=1))
        if not sd > 0:
            raise ValidationError(f"column {c!r} has zero variance")
        factors[c] = (col - mean) / sd
        scaling[c] = (mean, sd)
    return replace(table, factors=factors, scaling=scaling)


def unstandardize(table, columns):
    factors = dict(table.factors)
    scaling = dict(table.scaling)
    for c in columns:
        mean, sd = scaling.pop(c)
        factors[c] = table.factors[c] * sd + mean
    return replace(table, factors=factors, scaling=scaling)


# --------------------------------------------------------------------------
# facilities and wind
# --------------------------------------------------------------------------

def load_facilities(path):
    """Read ``facilities.csv`` and pool rows per facility id.

    Each row is one (facility, year, pollutant) TEP value; all rows of a
    facility, across years, are pooled into one record. Facility location is
    taken from its first row and must agree across rows.
    """
    header, body = _read_rows(path)
    need = ["facility_id", "lat", "lon", "year", "pollutant", "tep_value"]
    for col in need:
        if col not in header:
            raise ValidationError(f"missing column {col!r} in {path}")
    idx = {h: i for i, h in enumerate(header)}
    pooled = {}
    for r, row in enumerate(body, start=2):
        fid = row[idx["facility_id"]].strip()
        lat = _parse_float(row[idx["lat"]], r, "lat")
        lon = _parse_float(row[idx["lon"]], r, "lon")
        year_txt = row[idx["year"]].strip()
        try:
            year = int(year_txt)
        except ValueError:
            raise ParseError(f"bad year {year_txt!r}", row=r, col="year") from None
        tep = _parse_float(row[idx["tep_value"]], r, "tep_value")
        if math.isnan(tep) or math.isnan(lat) or math.isnan(lon):
            raise ParseError("missing value", row=r)
        if tep < 0:
            raise ValidationError(f"negative tep_value for facility {fid!r} (row {r})")
        if fid in pooled:
            rec = pooled[fid]
            if (rec["lat"], rec["lon"]) != (lat, lon):
                raise ValidationError(f"facility {fid!r} has inconsistent coordinates (row {r})")
            rec["tep"].append(tep)
            rec["years"].add(year)
        else:
            pooled[fid] = {"lat": lat, "lon": lon, "tep": [tep], "years": {year}}
    return [FacilityRecord(fid, (v["lat"], v["lon"]), tuple(sorted(v["years"])), tuple(v["tep"]))
            for fid, v in pooled.items()]


def load_windrose(path):
    header, body = _read_rows(path)
    for col in ("sector_start_deg", "sector_end_deg", "frequency"):
        if col not in header:
            raise ValidationError(f"missing column {col!r} in {path}")
    idx = {h: i for i, h in enumerate(header)}
    sectors = []
    for r, row in enumerate(body, start=2):
        vals = [_parse_float(row[idx[c]], r, c)
                for c in ("sector_start_deg", "sector_end_deg", "frequency")]
        if any(math.isnan(v) for v in vals):
            raise ParseError("missing value", row=r)
        sectors.append(tuple(vals))
    return WindRose(tuple(sectors))


# --------------------------------------------------------------------------
# synthetic tables
# --------------------------------------------------------------------------

def _smooth(kind, scale, freq):
    if kind == "linear":
        return lambda x: scale * x
    if kind == "quadratic":
        return lambda x: scale * x ** 2
    if kind == "sin":
        return lambda x: scale * np.sin(freq * x)
    if kind == "tanh":
        return lambda x: scale * np.tanh(freq * x)
    if kind == "zero":
        return lambda x: 0.0 * x
    raise ValidationError(f"unknown response function kind {kind!r}")


@dataclass(frozen=True)
class SyntheticSpec:
    """Parameters of a synthetic neighborhood table.

    ``class_means`` and ``class_sds`` are ``n_classes x n_factors``.
    ``response_functions`` maps a factor name to ``{"kind", "scale", "freq"}``
    with kind one of linear, quadratic, sin, tanh, zero; unlisted factors have
    no effect on the response.
    """
    n_neighborhoods: int
    n_factors: int
    n_classes: int
    class_proportions: Sequence[float]
    class_means: Sequence[Sequence[float]]
    class_sds: Sequence[Sequence[float]]
    response_functions: Mapping[str, Mapping] = field(default_factory=dict)
    noise_sd: float = 1.0
    intercept: float = 100.0
    seed: int = 0
    factor_names: Sequence[str] | None = None

    def __post_init__(self):
        if self.n_classes < 1:
            raise ValidationError("n_classes must be >= 1")
        if self.n_neighborhoods < 1 or self.n_factors < 1:
            raise ValidationError("n_neighborhoods and n_factors must be >= 1")
        p = np.asarray(self.class_proportions, dtype=float)
        if p.shape != (self.n_classes,) or np.any(p < 0) or abs(p.sum() - 1.0) > 1e-12:
            raise ValidationError(
                f"class_proportions must be a simplex of length {self.n_classes} "
                f"(sum {p.sum():.12g})")
        for label, arr in (("class_means", self.class_means), ("class_sds", self.class_sds)):
            if np.shape(arr) != (self.n_classes, self.n_factors):
                raise ValidationError(f"{label} must be n_classes x n_factors")
        if np.any(np.asarray(self.class_sds, dtype=float) < 0):
            raise ValidationError("class_sds must be non-negative")
        if self.noise_sd < 0:
            raise ValidationError("noise_sd must be >= 0")
        names = self.names
        if len(set(names)) != len(names) or len(names) != self.n_factors:
            raise ValidationError("factor_names must be unique, one per factor")
        unknown = set(self.response_functions) - set(names)
        if unknown:
            raise ValidationError(f"response functions for unknown factors {sorted(unknown)}")

    @property
    def names(self):
        if self.factor_names is None:
            return [f"x{j + 1}" for j in range(self.n_factors)]
        return list(self.factor_names)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)

    @classmethod
    def from_json(cls, path):
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


def generate_synthetic(spec: SyntheticSpec):
    """Draw a table from ``spec``.

    Returns ``(table, labels, functions)`` where ``labels`` are the planted
    class ids and ``functions`` maps each signal factor to its true smooth.
    Deterministic for a fixed ``spec.seed``.
    """
    rng = np.random.default_rng(spec.seed)
    n, names = spec.n_neighborhoods, spec.names
    labels = rng.choice(spec.n_classes, size=n, p=np.asarray(spec.class_proportions, float))
    means = np.asarray(spec.class_means, float)[labels]
    sds = np.asarray(spec.class_sds, float)[labels]
    X = means + sds * rng.standard_normal((n, spec.n_factors))
    lat = rng.uniform(43.59, 43.85, size=n)
    lon = rng.uniform(-79.62, -79.12, size=n)
    noise = rng.standard_normal(n) * spec.noise_sd

    funcs: dict[str, Callable] = {}
    y = np.full(n, float(spec.intercept))
    for j, name in enumerate(names):
        cfg = spec.response_functions.get(name)
        if cfg is None:
            continue
        f = _smooth(cfg.get("kind", "linear"), float(cfg.get("scale", 1.0)),
                    float(cfg.get("freq", 1.0)))
        funcs[name] = f
        y = y + f(X[:, j])
    y = y + noise
    if np.any(y < 0):
        raise ValidationError("synthetic response went negative; raise the intercept")
    table = FactorTable(
        ids=tuple(f"N{i + 1:03d}" for i in range(n)),
        names=tuple(f"Neighborhood {i + 1}" for i in range(n)),
        lat=lat, lon=lon, response=y,
        factors={name: X[:, j] for j, name in enumerate(names)},
        info={name: FactorInfo(description=f"synthetic factor {name}") for name in names},
    )
    return table, labels, funcs
