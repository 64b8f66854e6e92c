"""Site time series: synthetic generation, CSV I/O and spatial fold assignment."""

from __future__ import annotations

import csv
import datetime as dt
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, InvariantViolation, SchemaError, TooFewSites
from .wcm import GRASSLAND_B, WcmParams, forward_from_soil_db, vwc_from_ndvi

CSV_COLUMNS = (
    "site_id", "x", "y", "timestamp", "sigma_obs_db", "incidence_deg",
    "ndvi", "albedo", "clay", "sand", "silt", "awc", "sm_ref",
)
STATIC_COLUMNS = ("x", "y", "clay", "sand", "silt", "awc")
SM_SAT_SCALE = 0.45
SM_SAT_KNEE = 0.25


@dataclass
class SiteSeries:
    """Acquisitions at one site.

    ``sm_ref`` holds NaN where no reference measurement exists.
    ``timestamps`` is a ``datetime64[D]`` array.
    """

    site_id: str
    x: float
    y: float
    timestamps: np.ndarray
    sigma_obs_db: np.ndarray
    incidence_deg: np.ndarray
    ndvi: np.ndarray
    albedo: np.ndarray
    clay: float
    sand: float
    silt: float
    awc: float
    sm_ref: np.ndarray

    def __post_init__(self):
        self.site_id = str(self.site_id)
        self.timestamps = np.asarray(self.timestamps, dtype="datetime64[D]")
        for name in ("sigma_obs_db", "incidence_deg", "ndvi", "albedo", "sm_ref"):
            setattr(self, name, np.asarray(getattr(self, name), dtype=float))
        n = self.timestamps.shape[0]
        for name in ("sigma_obs_db", "incidence_deg", "ndvi", "albedo", "sm_ref"):
            if getattr(self, name).shape != (n,):
                raise InvariantViolation(f"site {self.site_id}: {name} length differs from timestamps")
        self.validate()

    def __len__(self):
        return self.timestamps.shape[0]

    def validate(self):
        sid = self.site_id
        if len(self) and np.any(np.diff(self.timestamps.astype("int64")) <= 0):
            raise InvariantViolation(f"site {sid}: timestamps not strictly increasing")
        if not np.all(np.isfinite(self.sigma_obs_db)):
            raise InvariantViolation(f"site {sid}: sigma_obs_db must be finite")
        if np.any(~((self.ndvi >= -1) & (self.ndvi <= 1))):
            raise InvariantViolation(f"site {sid}: ndvi outside [-1, 1]")
        if np.any(~((self.incidence_deg > 0) & (self.incidence_deg < 90))):
            raise InvariantViolation(f"site {sid}: incidence_deg outside (0, 90)")
        for name in ("clay", "sand", "silt"):
            v = getattr(self, name)
            if not 0 <= v <= 1:
                raise InvariantViolation(f"site {sid}: {name} fraction {v} outside [0, 1]")
        if self.clay + self.sand + self.silt > 1 + 1e-9:
            raise InvariantViolation(f"site {sid}: clay + sand + silt exceeds 1")
        sm = self.sm_ref[~np.isnan(self.sm_ref)]
        if np.any((sm < 0) | (sm > 1)):
            raise InvariantViolation(f"site {sid}: sm_ref outside [0, 1]")

    @property
    def labelled(self) -> np.ndarray:
        return ~np.isnan(self.sm_ref)

    def equals(self, other: "SiteSeries") -> bool:
        """Field-for-field equality (NaN == NaN for ``sm_ref``)."""
        if not isinstance(other, SiteSeries):
            return False
        scalars = ("site_id", "x", "y", "clay", "sand", "silt", "awc")
        if any(getattr(self, k) != getattr(other, k) for k in scalars):
            return False
        arrays = ("timestamps", "sigma_obs_db", "incidence_deg", "ndvi", "albedo")
        if any(not np.array_equal(getattr(self, k), getattr(other, k)) for k in arrays):
            return False
        return np.array_equal(self.sm_ref, other.sm_ref, equal_nan=True)


# --------------------------------------------------------------------------
# synthetic scenes


@dataclass
class SyntheticConfig:
    n_sites: int = 24
    n_timesteps: int = 90
    start_date: str = "2019-01-01"
    cadence_days: int = 12
    a: float = 0.02
    b: float = GRASSLAND_B
    c: float = -25.0
    d: float = 30.0
    theta_deg: float = 40.0
    incidence_jitter_deg: float = 0.0
    vwc_coeff: float = 1.0
    sm_min: float = 0.02
    sm_max: float = 0.45
    sm_step_std: float = 0.015  # [m3/m3] per acquisition
    sm_reversion: float = 0.05  # pull toward the site mean, per acquisition
    sm_seasonal_amplitude: float = 0.05  # [m3/m3]
    sm_texture_weight: float = 1.0  # how strongly clay content sets the site mean
    ndvi_min: float = 0.1
    ndvi_max: float = 0.9
    noise_db: float = 0.0
    nonlinear: bool = False
    missing_fraction: float = 0.0
    n_clusters: int = 4
    cluster_separation: float = 10.0
    cluster_spread: float = 1.0
    fold_count: int = 4
    seed: int = 0

    def __post_init__(self):
        errors = self.validate()
        if errors:
            exc = ConfigError("; ".join(f"{k} {msg}" for k, msg in errors))
            exc.errors = errors
            raise exc

    def validate(self) -> list[tuple[str, str]]:
        """Return ``(field, message)`` pairs for every violated constraint."""
        e = []
        if self.n_sites < self.fold_count:
            e.append(("n_sites", f"({self.n_sites}) must be >= fold_count ({self.fold_count})"))
        if self.n_timesteps < 1:
            e.append(("n_timesteps", "must be >= 1"))
        if self.cadence_days < 1:
            e.append(("cadence_days", "must be >= 1"))
        if self.noise_db < 0:
            e.append(("noise_db", "must be >= 0"))
        if not 0 <= self.missing_fraction < 1:
            e.append(("missing_fraction", "must be in [0, 1)"))
        if not 0 <= self.sm_min < self.sm_max <= 1:
            e.append(("sm_min", "need 0 <= sm_min < sm_max <= 1"))
        if self.sm_step_std < 0:
            e.append(("sm_step_std", "must be >= 0"))
        if not 0 <= self.sm_reversion <= 1:
            e.append(("sm_reversion", "must be in [0, 1]"))
        if not -1 <= self.ndvi_min < self.ndvi_max <= 1:
            e.append(("ndvi_min", "need -1 <= ndvi_min < ndvi_max <= 1"))
        if not self.a > 0:
            e.append(("a", "must be > 0"))
        if not self.b > 0:
            e.append(("b", "must be > 0"))
        if self.d == 0:
            e.append(("d", "must be non-zero"))
        if not 0 < self.theta_deg < 90:
            e.append(("theta_deg", "must be in (0, 90)"))
        if not self.vwc_coeff > 0:
            e.append(("vwc_coeff", "must be > 0"))
        if self.incidence_jitter_deg < 0 or self.theta_deg + self.incidence_jitter_deg >= 90 \
                or self.theta_deg - self.incidence_jitter_deg <= 0:
            e.append(("incidence_jitter_deg", "must keep angles inside (0, 90)"))
        if self.n_clusters < 1:
            e.append(("n_clusters", "must be >= 1"))
        if self.fold_count < 2:
            e.append(("fold_count", "must be >= 2"))
        return e

    @property
    def params(self) -> WcmParams:
        return WcmParams.from_degrees(self.theta_deg, a=self.a, b=self.b, c=self.c, d=self.d)


@dataclass
class GroundTruth:
    params: WcmParams
    seed: int
    config: dict
    sm_true: dict = field(default_factory=dict)
    soil_db_clean: dict = field(default_factory=dict)
    sigma_clean_db: dict = field(default_factory=dict)
    cluster: dict = field(default_factory=dict)

    def sidecar(self) -> dict:
        return {
            "params": {
                "a": self.params.a, "b": self.params.b, "c": self.params.c,
                "d": self.params.d, "theta_deg": self.params.theta_deg,
            },
            "seed": self.seed,
            "config": self.config,
            "cluster": self.cluster,
        }


def saturating_sm(sm):
    """Effective moisture seen by the radar under the saturating response."""
    return SM_SAT_SCALE * np.tanh(np.asarray(sm, dtype=float) / SM_SAT_KNEE)


def _reflect(x, lo, hi):
    span = hi - lo
    y = np.mod(x - lo, 2 * span)
    return lo + np.where(y > span, 2 * span - y, y)


def generate_synthetic(config: SyntheticConfig) -> tuple[list[SiteSeries], GroundTruth]:
    """Simulate ``config.n_sites`` sites of backscatter plus reference SM.

    Soil moisture is a mean-reverting random walk reflected into
    ``[sm_min, sm_max]``; NDVI a seasonal sinusoid inside
    ``[ndvi_min, ndvi_max]``.  Backscatter comes from the forward model,
    optionally with the saturating soil response, plus Gaussian noise in dB.
    """
    rng = np.random.default_rng(config.seed)
    params = config.params
    start = np.datetime64(config.start_date, "D")
    times = start + np.arange(config.n_timesteps) * config.cadence_days
    doy = (times - times.astype("datetime64[Y]")).astype(int) + 1
    season = 2 * np.pi * doy / 365.25

    angles = 2 * np.pi * np.arange(config.n_clusters) / config.n_clusters
    centres = config.cluster_separation * np.column_stack([np.cos(angles), np.sin(angles)])

    ndvi_mid = 0.5 * (config.ndvi_min + config.ndvi_max)
    ndvi_half = 0.5 * (config.ndvi_max - config.ndvi_min)

    sites, truth = [], GroundTruth(params=params, seed=config.seed, config=asdict(config))
    for k in range(config.n_sites):
        sid = f"S{k:03d}"
        cl = k % config.n_clusters
        x, y = centres[cl] + rng.normal(0.0, config.cluster_spread, 2)

        clay, sand, silt = 0.98 * rng.dirichlet([2.0, 3.0, 2.0])
        awc = 0.05 + 0.25 * clay + rng.uniform(0.0, 0.05)

        frac = np.clip(0.25 + config.sm_texture_weight * clay / 0.6, 0.05, 0.95)
        site_mean = config.sm_min + (config.sm_max - config.sm_min) * frac
        seasonal = config.sm_seasonal_amplitude * np.cos(season - 2 * np.pi * 200 / 365.25)
        sm = np.empty(config.n_timesteps)
        sm[0] = rng.uniform(config.sm_min, config.sm_max)
        steps = rng.normal(0.0, config.sm_step_std, config.n_timesteps)
        for t in range(1, config.n_timesteps):
            target = site_mean + seasonal[t]
            nxt = sm[t - 1] + config.sm_reversion * (target - sm[t - 1]) + steps[t]
            sm[t] = _reflect(nxt, config.sm_min, config.sm_max)

        amp = ndvi_half * rng.uniform(0.6, 1.0)
        phase = rng.uniform(-0.5, 0.5)
        ndvi = np.clip(ndvi_mid + amp * np.sin(season + phase), config.ndvi_min, config.ndvi_max)
        albedo = 0.2 - 0.05 * ndvi + rng.normal(0.0, 0.005, config.n_timesteps)
        inc = config.theta_deg + rng.uniform(
            -config.incidence_jitter_deg, config.incidence_jitter_deg, config.n_timesteps
        )

        radar_sm = saturating_sm(sm) if config.nonlinear else sm
        soil_db = params.c + params.d * radar_sm
        vwc = vwc_from_ndvi(ndvi, config.vwc_coeff)
        clean = forward_from_soil_db(soil_db, vwc, params, theta=np.radians(inc))
        obs = clean + rng.normal(0.0, config.noise_db, config.n_timesteps) if config.noise_db > 0 else clean

        sm_ref = sm.copy()
        if config.missing_fraction > 0:
            sm_ref[rng.random(config.n_timesteps) < config.missing_fraction] = np.nan

        sites.append(SiteSeries(
            site_id=sid, x=float(x), y=float(y), timestamps=times,
            sigma_obs_db=obs, incidence_deg=inc, ndvi=ndvi, albedo=albedo,
            clay=float(clay), sand=float(sand), silt=float(silt), awc=float(awc),
            sm_ref=sm_ref,
        ))
        truth.sm_true[sid] = sm
        truth.soil_db_clean[sid] = soil_db
        truth.sigma_clean_db[sid] = clean
        truth.cluster[sid] = cl
    return sites, truth


# --------------------------------------------------------------------------
# CSV


def _fmt(v: float) -> str:
    return "" if math.isnan(v) else repr(float(v))


def write_csv(sites, path) -> None:
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        for s in sites:
            for i in range(len(s)):
                w.writerow([
                    s.site_id, _fmt(s.x), _fmt(s.y), str(s.timestamps[i]),
                    _fmt(s.sigma_obs_db[i]), _fmt(s.incidence_deg[i]),
                    _fmt(s.ndvi[i]), _fmt(s.albedo[i]),
                    _fmt(s.clay), _fmt(s.sand), _fmt(s.silt), _fmt(s.awc),
                    _fmt(s.sm_ref[i]),
                ])


def write_sidecar(truth: GroundTruth, path) -> None:
    Path(path).write_text(json.dumps(truth.sidecar(), indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _parse_float(raw, row, col, allow_empty=False):
    if raw == "" and allow_empty:
        return math.nan
    try:
        v = float(raw)
    except (TypeError, ValueError):
        raise SchemaError(f"row {row}, column {col}: expected a number, got {raw!r}") from None
    if not math.isfinite(v):
        raise SchemaError(f"row {row}, column {col}: non-finite value {raw!r}")
    return v


_BOUNDS = {
    "ndvi": (-1.0, 1.0),
    "clay": (0.0, 1.0), "sand": (0.0, 1.0), "silt": (0.0, 1.0),
    "sm_ref": (0.0, 1.0),
}


def load_csv(path) -> list[SiteSeries]:
    """Read site series from the flat CSV layout in :data:`CSV_COLUMNS`.

    Row numbers in error messages count the header as row 1.
    """
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise SchemaError(f"{path}: empty file")
        header = [h.strip() for h in header]
        if tuple(header) != CSV_COLUMNS:
            missing = [c for c in CSV_COLUMNS if c not in header]
            extra = [c for c in header if c not in CSV_COLUMNS]
            raise SchemaError(
                f"{path}: header mismatch (missing {missing}, unexpected {extra}); "
                f"expected {','.join(CSV_COLUMNS)}"
            )
        rows: dict[str, dict] = {}
        for rownum, rec in enumerate(reader, start=2):
            if not rec:
                continue
            if len(rec) != len(CSV_COLUMNS):
                raise SchemaError(f"row {rownum}: expected {len(CSV_COLUMNS)} fields, got {len(rec)}")
            r = dict(zip(CSV_COLUMNS, rec))
            sid = r["site_id"].strip()
            if not sid:
                raise SchemaError(f"row {rownum}, column site_id: empty")
            try:
                ts = np.datetime64(dt.date.fromisoformat(r["timestamp"].strip()), "D")
            except ValueError:
                raise SchemaError(
                    f"row {rownum}, column timestamp: not an ISO-8601 date: {r['timestamp']!r}"
                ) from None
            vals = {
                c: _parse_float(r[c], rownum, c, allow_empty=(c == "sm_ref"))
                for c in CSV_COLUMNS if c not in ("site_id", "timestamp")
            }
            for c, (lo, hi) in _BOUNDS.items():
                v = vals[c]
                if not math.isnan(v) and not lo <= v <= hi:
                    raise InvariantViolation(f"row {rownum}, column {c}: {v} outside [{lo}, {hi}]")
            if not 0 < vals["incidence_deg"] < 90:
                raise InvariantViolation(f"row {rownum}, column incidence_deg: {vals['incidence_deg']} outside (0, 90)")

            site = rows.get(sid)
            if site is None:
                site = rows[sid] = {"static": {c: vals[c] for c in STATIC_COLUMNS}, "t": [], "rows": []}
            else:
                for c in STATIC_COLUMNS:
                    if vals[c] != site["static"][c]:
                        raise InvariantViolation(
                            f"row {rownum}, column {c}: value differs from earlier rows of site {sid}"
                        )
                if ts <= site["t"][-1]:
                    raise InvariantViolation(
                        f"row {rownum}, column timestamp: not after previous acquisition of site {sid}"
                    )
            site["t"].append(ts)
            site["rows"].append(vals)

    if not rows:
        raise SchemaError(f"{path}: no data rows")
    out = []
    for sid, site in rows.items():
        col = lambda c: np.array([v[c] for v in site["rows"]], dtype=float)
        st = site["static"]
        out.append(SiteSeries(
            site_id=sid, x=st["x"], y=st["y"], timestamps=np.array(site["t"], dtype="datetime64[D]"),
            sigma_obs_db=col("sigma_obs_db"), incidence_deg=col("incidence_deg"),
            ndvi=col("ndvi"), albedo=col("albedo"),
            clay=st["clay"], sand=st["sand"], silt=st["silt"], awc=st["awc"],
            sm_ref=col("sm_ref"),
        ))
    return out


# --------------------------------------------------------------------------
# spatial folds


@dataclass
class FoldAssignment:
    fold_count: int
    site_to_fold: dict

    def __post_init__(self):
        used = set(self.site_to_fold.values())
        if used != set(range(self.fold_count)):
            raise InvariantViolation(
                f"folds {sorted(used)} do not cover 0..{self.fold_count - 1} exactly"
            )

    def test_sites(self, fold: int) -> list[str]:
        return [s for s, f in self.site_to_fold.items() if f == fold]

    def train_sites(self, fold: int) -> list[str]:
        return [s for s, f in self.site_to_fold.items() if f != fold]

    def to_json(self) -> dict:
        return {"fold_count": self.fold_count, "site_to_fold": dict(self.site_to_fold)}


def assign_spatial_folds(sites, k: int = 4, seed: int = 0) -> FoldAssignment:
    """Cluster site locations into ``k`` spatial groups, one per fold.

    Folds are numbered by ascending centroid (x, then y), so the labels do
    not depend on the clustering's internal ordering.
    """
    from sklearn.cluster import KMeans

    if k < 2:
        raise ValueError("k must be >= 2")
    ids = [s.site_id for s in sites]
    if len(set(ids)) != len(ids):
        raise InvariantViolation("duplicate site ids")
    xy = np.array([[s.x, s.y] for s in sites], dtype=float).reshape(-1, 2)
    if len(sites) < k or np.unique(xy, axis=0).shape[0] < k:
        raise TooFewSites(f"need at least {k} sites at distinct locations, got {len(sites)}")
    km = KMeans(n_clusters=k, n_init=10, random_state=seed).fit(xy)
    centres = km.cluster_centers_
    order = np.lexsort((centres[:, 1], centres[:, 0]))
    relabel = np.empty(k, dtype=int)
    relabel[order] = np.arange(k)
    labels = relabel[km.labels_]
    return FoldAssignment(k, {sid: int(f) for sid, f in zip(ids, labels)})


def fold_centroids(sites, folds: FoldAssignment) -> np.ndarray:
    xy = {s.site_id: (s.x, s.y) for s in sites}
    return np.array([
        np.mean([xy[s] for s in folds.test_sites(f)], axis=0) for f in range(folds.fold_count)
    ])
