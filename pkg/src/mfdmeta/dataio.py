"""Loop-detector records: loading, cleaning, network averaging and biased subsets.

Records travel as a :class:`pandas.DataFrame` with the columns of
``RECORD_COLUMNS``. ``interval`` is the interval start in epoch seconds, flow
is veh/h/lane and occupancy is a fraction.
"""

from __future__ import annotations

import json
import math
from collections.abc import Sequence
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import pandas as pd

RECORD_COLUMNS = ["city", "detector", "interval", "flow", "occupancy"]
DETECTOR_COUNTS = (75, 50, 25, 10)
COVERAGE = 0.8
MIN_DETECTORS = 100
DAY = 86400.0


class DataError(ValueError):
    pass


@dataclass(frozen=True)
class DetectorRecord:
    city: str
    detector: str
    interval_start: float
    flow: float
    occupancy: float


def to_records(frame: pd.DataFrame) -> list[DetectorRecord]:
    return [
        DetectorRecord(str(c), str(d), float(t), float(f), float(o))
        for c, d, t, f, o in frame[RECORD_COLUMNS].itertuples(index=False)
    ]


def from_records(records: Sequence[DetectorRecord]) -> pd.DataFrame:
    rows = [(r.city, r.detector, r.interval_start, r.flow, r.occupancy) for r in records]
    return _typed(pd.DataFrame(rows, columns=RECORD_COLUMNS))


def _typed(frame: pd.DataFrame) -> pd.DataFrame:
    frame = frame.astype({"city": str, "detector": str, "interval": float, "flow": float, "occupancy": float})
    return frame.reset_index(drop=True)


# ---------------------------------------------------------------------------
# Loading
# ---------------------------------------------------------------------------


def _parse_interval(raw: str) -> float:
    try:
        return float(raw)
    except ValueError:
        pass
    ts = pd.Timestamp(raw)
    if ts.tzinfo is None:
        ts = ts.tz_localize("UTC")
    return ts.timestamp()


def load_records(path: str | Path) -> tuple[pd.DataFrame, pd.DataFrame]:
    """Read a ``city,detector,interval,flow,occupancy`` CSV.

    Returns ``(records, rejections)``; rejected rows keep their raw text, a
    ``line`` number and a ``reason``.
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    raw = pd.read_csv(path, dtype=str, keep_default_na=False, skipinitialspace=True)
    missing = [c for c in RECORD_COLUMNS if c not in raw.columns]
    if missing:
        raise DataError(f"{path}: missing columns {missing}")
    raw = raw[RECORD_COLUMNS]
    raw.insert(0, "line", np.arange(2, len(raw) + 2))

    flow = pd.to_numeric(raw["flow"], errors="coerce")
    occ = pd.to_numeric(raw["occupancy"], errors="coerce")
    intervals, bad_interval = [], []
    for value in raw["interval"]:
        try:
            intervals.append(_parse_interval(value))
            bad_interval.append(False)
        except (ValueError, TypeError):
            intervals.append(np.nan)
            bad_interval.append(True)
    bad_interval = np.array(bad_interval, dtype=bool)
    bad_number = (flow.isna() | occ.isna()).to_numpy()
    bad_id = ((raw["city"] == "") | (raw["detector"] == "")).to_numpy()

    reasons = np.where(bad_id, "missing id", np.where(bad_number, "non-numerical", np.where(bad_interval, "bad interval", "")))
    ok = reasons == ""
    records = pd.DataFrame(
        {
            "city": raw["city"][ok],
            "detector": raw["detector"][ok],
            "interval": np.asarray(intervals)[ok],
            "flow": flow[ok],
            "occupancy": occ[ok],
        }
    )
    rejections = raw[~ok].assign(reason=reasons[~ok]).reset_index(drop=True)
    return _typed(records), rejections


def save_records(frame: pd.DataFrame, path: str | Path) -> None:
    frame[RECORD_COLUMNS].to_csv(path, index=False, float_format="%.17g")


# ---------------------------------------------------------------------------
# Cleaning
# ---------------------------------------------------------------------------

# (reason, predicate) in the order they are reported
_RULES = (
    ("non-numerical", lambda f, o: ~np.isfinite(f) | ~np.isfinite(o)),
    ("negative", lambda f, o: (f < 0) | (o < 0)),
    ("occupancy>1", lambda f, o: o > 1),
    ("flow>2500", lambda f, o: f > 2500),
    ("flow<10 in occ∈[0.2,0.75]", lambda f, o: (f < 10) & (o >= 0.2) & (o <= 0.75)),
    ("flow>100 at occ>0.95", lambda f, o: (f > 100) & (o > 0.95)),
)


def rule_violation(flow: np.ndarray, occupancy: np.ndarray) -> np.ndarray:
    """First violated record-level rule per row, '' when valid."""
    flow = np.asarray(flow, dtype=float)
    occupancy = np.asarray(occupancy, dtype=float)
    reason = np.full(flow.shape, "", dtype=object)
    with np.errstate(invalid="ignore"):
        for name, pred in _RULES:
            hit = pred(flow, occupancy) & (reason == "")
            reason[hit] = name
    return reason


def _coverage_pass(frame: pd.DataFrame, threshold: float) -> pd.Series:
    """Reason per row for the detector/interval coverage rules ('' = keep)."""
    reason = pd.Series("", index=frame.index, dtype=object)
    for _, group in frame.groupby("city", sort=True):
        alive = group
        while True:
            n_intervals = alive["interval"].nunique()
            per_det = alive.groupby("detector")["interval"].nunique()
            weak_det = per_det.index[per_det < threshold * n_intervals - 1e-9]
            hit = alive["detector"].isin(weak_det)
            reason.loc[alive.index[hit]] = "detector coverage<80%"
            alive = alive[~hit]
            n_det = alive["detector"].nunique()
            per_int = alive.groupby("interval")["detector"].nunique()
            weak_int = per_int.index[per_int < threshold * n_det - 1e-9]
            hit2 = alive["interval"].isin(weak_int)
            reason.loc[alive.index[hit2]] = "interval coverage<80%"
            alive = alive[~hit2]
            if not hit.any() and not hit2.any():
                break
    return reason


def clean_records(records: pd.DataFrame, coverage: float = COVERAGE) -> tuple[pd.DataFrame, pd.DataFrame]:
    """Apply the validity rules, then the detector and interval coverage rules.

    Returns ``(kept, dropped)``; ``dropped`` carries a ``reason`` column. The
    coverage filters are repeated until nothing changes so that cleaning is
    idempotent.
    """
    frame = records.reset_index(drop=True)
    reason = pd.Series(rule_violation(frame["flow"].to_numpy(), frame["occupancy"].to_numpy()), index=frame.index)
    # duplicated (detector, interval) readings keep the first occurrence
    dup = frame.duplicated(["city", "detector", "interval"]) & (reason == "")
    reason[dup] = "duplicate"
    valid = frame[reason == ""]
    reason.loc[valid.index] = _coverage_pass(valid, coverage)
    keep = reason == ""
    kept = frame[keep].reset_index(drop=True)
    dropped = frame[~keep].assign(reason=reason[~keep]).reset_index(drop=True)
    return kept, dropped


# ---------------------------------------------------------------------------
# Series
# ---------------------------------------------------------------------------


@dataclass
class MfdSeries:
    """Network-average (occupancy, flow) points for one city and detector subset."""

    city: str
    detector_subset: tuple[str, ...]
    occupancy: np.ndarray
    flow: np.ndarray
    intervals: np.ndarray | None = None
    norm: tuple[float, float] | None = None  # (flow_scale, occ_scale)
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.occupancy = np.asarray(self.occupancy, dtype=np.float64)
        self.flow = np.asarray(self.flow, dtype=np.float64)
        if self.occupancy.shape != self.flow.shape or self.occupancy.ndim != 1:
            raise DataError("occupancy and flow must be 1-D arrays of equal length")
        if len(self.occupancy) == 0:
            raise DataError("series has no points")

    def __len__(self) -> int:
        return len(self.flow)

    @property
    def points(self) -> list[tuple[float, float]]:
        return list(zip(self.occupancy.tolist(), self.flow.tolist()))

    @property
    def normalized(self) -> bool:
        return self.norm is not None

    def take(self, index) -> MfdSeries:
        iv = None if self.intervals is None else self.intervals[index]
        return replace(self, occupancy=self.occupancy[index], flow=self.flow[index], intervals=iv, meta=dict(self.meta))

    def to_csv(self, path: str | Path) -> None:
        """Write ``occupancy,flow`` plus a JSON sidecar with the metadata."""
        path = Path(path)
        pd.DataFrame({"occupancy": self.occupancy, "flow": self.flow}).to_csv(path, index=False, float_format="%.17g")
        sidecar = {
            "city": self.city,
            "detector_subset": list(self.detector_subset),
            "norm": None if self.norm is None else {"flow_scale": self.norm[0], "occ_scale": self.norm[1]},
            "intervals": None if self.intervals is None else self.intervals.tolist(),
            **self.meta,
        }
        path.with_suffix(".json").write_text(json.dumps(sidecar, indent=1))

    @classmethod
    def from_csv(cls, path: str | Path) -> MfdSeries:
        path = Path(path)
        table = pd.read_csv(path, float_precision="round_trip")
        if list(table.columns[:2]) != ["occupancy", "flow"]:
            raise DataError(f"{path}: expected columns occupancy,flow")
        side = path.with_suffix(".json")
        info = json.loads(side.read_text()) if side.exists() else {}
        norm = info.pop("norm", None)
        intervals = info.pop("intervals", None)
        return cls(
            city=info.pop("city", path.stem),
            detector_subset=tuple(info.pop("detector_subset", ())),
            occupancy=table["occupancy"].to_numpy(float),
            flow=table["flow"].to_numpy(float),
            intervals=None if intervals is None else np.asarray(intervals, dtype=float),
            norm=None if norm is None else (float(norm["flow_scale"]), float(norm["occ_scale"])),
            meta=info,
        )


@dataclass
class CityMatrix:
    """Dense interval x detector view of one city's cleaned records (NaN = missing)."""

    city: str
    intervals: np.ndarray
    detectors: tuple[str, ...]
    flow: np.ndarray
    occupancy: np.ndarray

    @classmethod
    def from_records(cls, records: pd.DataFrame, city: str | None = None) -> CityMatrix:
        if city is None:
            cities = records["city"].unique()
            if len(cities) != 1:
                raise DataError(f"expected one city, got {len(cities)}")
            city = cities[0]
        part = records[records["city"] == city]
        if part.empty:
            raise DataError(f"no records for city {city!r}")
        flow = part.pivot_table(index="interval", columns="detector", values="flow", aggfunc="first")
        occ = part.pivot_table(index="interval", columns="detector", values="occupancy", aggfunc="first")
        occ = occ.reindex(index=flow.index, columns=flow.columns)
        return cls(
            city=str(city),
            intervals=flow.index.to_numpy(float),
            detectors=tuple(str(d) for d in flow.columns),
            flow=flow.to_numpy(float),
            occupancy=occ.to_numpy(float),
        )

    def columns(self, subset: Sequence[str]) -> np.ndarray:
        lookup = {d: i for i, d in enumerate(self.detectors)}
        try:
            return np.array([lookup[d] for d in subset], dtype=int)
        except KeyError as exc:
            raise DataError(f"detector {exc.args[0]!r} not present in {self.city}") from None

    def aggregate(self, subset: Sequence[str] | None = None, coverage: float = COVERAGE, interval_rule: str = "subset") -> MfdSeries:
        subset = tuple(sorted(self.detectors if subset is None else subset))
        if not subset:
            raise DataError("empty detector subset")
        cols = self.columns(subset)
        flow = self.flow[:, cols]
        occ = self.occupancy[:, cols]
        present = np.isfinite(flow) & np.isfinite(occ)
        if interval_rule == "subset":
            rows = present.sum(axis=1) >= coverage * len(cols) - 1e-9
        elif interval_rule == "full":
            full = np.isfinite(self.flow) & np.isfinite(self.occupancy)
            rows = (full.sum(axis=1) >= coverage * len(self.detectors) - 1e-9) & present.any(axis=1)
        else:
            raise DataError(f"unknown interval_rule {interval_rule!r}")
        if not rows.any():
            raise DataError(f"{self.city}: no interval qualifies for the subset")
        fsum = np.where(present, flow, 0.0)[rows].sum(axis=1)
        osum = np.where(present, occ, 0.0)[rows].sum(axis=1)
        count = present[rows].sum(axis=1)
        return MfdSeries(
            city=self.city,
            detector_subset=subset,
            occupancy=osum / count,
            flow=fsum / count,
            intervals=self.intervals[rows],
        )


def aggregate(records: pd.DataFrame, detector_subset: Sequence[str] | None = None, city: str | None = None, interval_rule: str = "subset") -> MfdSeries:
    """Unweighted network averages per interval over ``detector_subset``.

    Intervals where fewer than 80% of the subset report are omitted
    (``interval_rule="full"`` keeps the intervals that qualify for the full
    detector set instead).
    """
    if detector_subset is not None and len(detector_subset) == 0:
        raise DataError("empty detector subset")
    return CityMatrix.from_records(records, city).aggregate(detector_subset, interval_rule=interval_rule)


def normalize(series: MfdSeries, reference: MfdSeries | None = None) -> MfdSeries:
    """Scale flows and occupancies by the maxima of ``reference`` (default: itself)."""
    ref = series if reference is None else reference
    if ref.norm is not None:
        raise DataError("reference series is already normalized")
    flow_scale = float(np.max(ref.flow))
    occ_scale = float(np.max(ref.occupancy))
    if flow_scale <= 0 or occ_scale <= 0:
        raise DataError("cannot normalize: zero maximum")
    if series.norm is not None:
        raise DataError("series is already normalized")
    return replace(series, occupancy=series.occupancy / occ_scale, flow=series.flow / flow_scale, norm=(flow_scale, occ_scale), meta=dict(series.meta))


def denormalize(series: MfdSeries) -> MfdSeries:
    if series.norm is None:
        return series
    flow_scale, occ_scale = series.norm
    return replace(series, occupancy=series.occupancy * occ_scale, flow=series.flow * flow_scale, norm=None, meta=dict(series.meta))


# ---------------------------------------------------------------------------
# Biased detector subsets
# ---------------------------------------------------------------------------


@dataclass
class BiasedDatasetBundle:
    city: str
    n_detectors: int
    replicas: list[MfdSeries]
    seed: int


def check_eligibility(matrix: CityMatrix, min_detectors: int = MIN_DETECTORS) -> None:
    """A city needs more than ``min_detectors`` detectors and more than a day of data."""
    if len(matrix.detectors) <= min_detectors:
        raise DataError(f"{matrix.city}: {len(matrix.detectors)} detectors, need more than {min_detectors}")
    span = matrix.intervals.max() - matrix.intervals.min()
    days = np.unique(np.floor(matrix.intervals / DAY)).size
    if span < DAY or days < 2:
        raise DataError(f"{matrix.city}: needs more than one day of observations")


def sample_subsets(detectors: Sequence[str], n: int, replicas: int, rng: np.random.Generator) -> list[tuple[str, ...]]:
    detectors = sorted(detectors)
    if n > len(detectors):
        raise DataError(f"cannot sample {n} of {len(detectors)} detectors")
    unique = math.comb(len(detectors), n) >= replicas
    seen: set[tuple[str, ...]] = set()
    out = []
    while len(out) < replicas:
        pick = tuple(sorted(detectors[i] for i in rng.choice(len(detectors), size=n, replace=False)))
        if unique and pick in seen:
            continue
        seen.add(pick)
        out.append(pick)
    return out


def make_biased_bundles(
    records: pd.DataFrame | CityMatrix,
    city: str,
    n: int,
    replicas: int = 30,
    seed: int = 0,
    min_detectors: int = MIN_DETECTORS,
    interval_rule: str = "subset",
) -> BiasedDatasetBundle:
    """Aggregate ``replicas`` random ``n``-detector subsets of one city."""
    matrix = records if isinstance(records, CityMatrix) else CityMatrix.from_records(records, city)
    check_eligibility(matrix, min_detectors)
    rng = np.random.default_rng([seed, n])
    subsets = sample_subsets(matrix.detectors, n, replicas, rng)
    series = [matrix.aggregate(s, interval_rule=interval_rule) for s in subsets]
    for i, s in enumerate(series):
        s.meta.update(replica=i, n_detectors=n, seed=seed)
    return BiasedDatasetBundle(city=city, n_detectors=n, replicas=series, seed=seed)


# ---------------------------------------------------------------------------
# Synthetic cities
# ---------------------------------------------------------------------------


@dataclass
class SyntheticCitySpec:
    """Ground-truth bi-parabolic city. Flows in veh/h/lane."""

    city: str = "synth"
    x_cd: float = 0.3
    f_vertex: float = 900.0
    width_ratio: float = 2.0
    n_detectors: int = 120
    noise_sigma: float = 30.0
    detector_bias_sigma: float = 0.2
    seed: int = 0
    n_days: int = 3
    interval_seconds: int = 300
    low_fraction: float = 0.6
    max_occupancy: float | None = None  # default: halfway down the congested branch
    violation_rate: float = 0.0

    def __post_init__(self):
        if not 0 < self.x_cd < 1:
            raise DataError("x_cd must be in (0, 1)")
        if self.f_vertex <= 0 or not 1 <= self.width_ratio <= 4:
            raise DataError("f_vertex must be > 0 and width_ratio in [1, 4]")
        if self.n_detectors < 1 or self.noise_sigma < 0 or self.detector_bias_sigma < 0:
            raise DataError("invalid detector/noise settings")


def synthetic_curve(x, x_cd: float, f_vertex: float, width_ratio: float) -> np.ndarray:
    """Generating bi-parabola: through the origin, vertex at (x_cd, f_vertex), clipped at 0."""
    x = np.asarray(x, dtype=float)
    a1 = f_vertex / x_cd**2
    a2 = f_vertex / (width_ratio * x_cd) ** 2
    a = np.where(x <= x_cd, a1, a2)
    return np.maximum(f_vertex - a * (x - x_cd) ** 2, 0.0)


def _centered_multipliers(rng: np.random.Generator, n: int, sigma: float) -> np.ndarray:
    if sigma == 0 or n == 1:
        return np.ones(n)
    z = np.clip(rng.standard_normal(n), -2.5, 2.5) * sigma
    return 1.0 + z - z.mean()


def generate_synthetic_city(spec: SyntheticCitySpec) -> pd.DataFrame:
    """Detector records whose full-detector average follows the generating curve.

    Each detector scales the network occupancy and flow by its own factors
    (mean exactly 1 across detectors), so subsets are biased while the full
    average is not. Readings get Gaussian flow noise.
    """
    rng = np.random.default_rng(spec.seed)
    per_day = int(round(DAY / spec.interval_seconds))
    hi = spec.max_occupancy if spec.max_occupancy is not None else min(spec.x_cd * (1 + 0.5 * spec.width_ratio), 0.55)
    lo_cut = 0.5 * spec.x_cd

    levels = []
    for _ in range(spec.n_days):
        low = rng.random(per_day) < spec.low_fraction
        x = np.where(low, rng.uniform(0.005, lo_cut, per_day), rng.uniform(lo_cut, hi, per_day))
        x.sort()
        # ramp up through the day's peak and back down
        levels.append(np.concatenate([x[0::2], x[1::2][::-1]]))
    x_net = np.concatenate(levels)
    t = np.arange(x_net.size) * float(spec.interval_seconds)

    occ_mult = _centered_multipliers(rng, spec.n_detectors, spec.detector_bias_sigma)
    flow_mult = _centered_multipliers(rng, spec.n_detectors, spec.detector_bias_sigma)
    base = synthetic_curve(x_net, spec.x_cd, spec.f_vertex, spec.width_ratio)

    occ = x_net[:, None] * occ_mult[None, :]
    flow = base[:, None] * flow_mult[None, :]
    if spec.noise_sigma > 0:
        flow = flow + rng.normal(0.0, spec.noise_sigma, flow.shape)
    flow = np.clip(flow, 0.0, 2500.0)
    occ = np.clip(occ, 0.0, 1.0)

    width = len(str(spec.n_detectors - 1))
    names = np.array([f"{spec.city}-d{i:0{width}d}" for i in range(spec.n_detectors)])
    frame = pd.DataFrame(
        {
            "city": spec.city,
            "detector": np.tile(names, x_net.size),
            "interval": np.repeat(t, spec.n_detectors),
            "flow": flow.reshape(-1),
            "occupancy": occ.reshape(-1),
        }
    )
    if spec.violation_rate > 0:
        hit = rng.random(len(frame)) < spec.violation_rate
        kinds = rng.integers(0, 3, hit.sum())
        idx = np.flatnonzero(hit)
        frame.loc[idx[kinds == 0], "flow"] = -5.0
        frame.loc[idx[kinds == 1], "flow"] = 3000.0
        frame.loc[idx[kinds == 2], "occupancy"] = 1.5
    return frame


def synthetic_pool_specs(n_cities: int = 12, seed: int = 0, **overrides) -> list[SyntheticCitySpec]:
    """Heterogeneous synthetic cities for meta-learning experiments."""
    rng = np.random.default_rng(seed)
    specs = []
    for i in range(n_cities):
        kw = dict(
            city=f"city{i:02d}",
            x_cd=float(rng.uniform(0.15, 0.3)),
            f_vertex=float(rng.uniform(700, 1400)),
            width_ratio=float(rng.uniform(1.5, 3.0)),
            n_detectors=int(rng.integers(110, 161)),
            noise_sigma=30.0,
            detector_bias_sigma=0.25,
            seed=int(rng.integers(0, 2**31 - 1)),
        )
        kw.update(overrides)
        specs.append(SyntheticCitySpec(**kw))
    return specs
