"""Feature standardization and fixed-length sequence windows."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import EmptyInput, MissingFeature
from .wcm import DEFAULT_VWC_COEFF, vwc_from_ndvi

AUX_FEATURES = ("ndvi", "albedo", "clay", "sand", "silt", "awc", "doy_sin", "doy_cos")
STD_FLOOR = 1e-8


def feature_matrix(series, names) -> np.ndarray:
    """Per-acquisition auxiliary features, shape ``(T, len(names))``."""
    T = len(series)
    doy = None
    cols = []
    for name in names:
        if name in ("ndvi", "albedo"):
            cols.append(getattr(series, name))
        elif name in ("clay", "sand", "silt", "awc"):
            cols.append(np.full(T, getattr(series, name), dtype=float))
        elif name in ("doy_sin", "doy_cos"):
            if doy is None:
                ts = series.timestamps
                doy = (ts - ts.astype("datetime64[Y]")).astype(int) + 1
            ang = 2 * np.pi * doy / 365.25
            cols.append(np.sin(ang) if name == "doy_sin" else np.cos(ang))
        else:
            raise MissingFeature(f"unknown feature {name!r}; available: {', '.join(AUX_FEATURES)}")
    if not cols:
        return np.zeros((T, 0))
    return np.column_stack(cols).astype(float)


@dataclass(frozen=True)
class Standardization:
    """Per-feature mean and (floored, population) std.

    ``site_ids`` records which sites the statistics came from so callers
    can assert that no evaluation site contributed.
    """

    names: tuple
    mean: np.ndarray
    std: np.ndarray
    site_ids: frozenset

    def apply(self, values: np.ndarray) -> np.ndarray:
        return (values - self.mean) / self.std

    def assert_disjoint(self, site_ids) -> None:
        leaked = self.site_ids & set(site_ids)
        if leaked:
            raise AssertionError(f"standardization statistics include held-out sites {sorted(leaked)}")

    def to_json(self) -> dict:
        return {
            "names": list(self.names),
            "mean": self.mean.tolist(),
            "std": self.std.tolist(),
            "site_ids": sorted(self.site_ids),
        }

    @classmethod
    def from_json(cls, d: dict) -> "Standardization":
        return cls(tuple(d["names"]), np.asarray(d["mean"], dtype=float),
                   np.asarray(d["std"], dtype=float), frozenset(d["site_ids"]))


def stats_from_values(names, values: np.ndarray, site_ids) -> Standardization:
    values = np.asarray(values, dtype=float).reshape(-1, len(names))
    if values.shape[0] == 0:
        raise EmptyInput("no values to standardize")
    mean = values.mean(axis=0)
    const = np.ptp(values, axis=0) == 0
    mean[const] = values[0, const]  # exact, so constant columns map to 0
    std = np.maximum(values.std(axis=0), STD_FLOOR)
    return Standardization(tuple(names), mean, std, frozenset(site_ids))


def compute_standardization(train_sites, names=AUX_FEATURES) -> Standardization:
    """Statistics over every acquisition of ``train_sites``."""
    train_sites = list(train_sites)
    if not train_sites:
        raise EmptyInput("no training sites")
    vals = np.concatenate([feature_matrix(s, names) for s in train_sites], axis=0)
    return stats_from_values(names, vals, [s.site_id for s in train_sites])


@dataclass
class SequenceBatch:
    """Windows of auxiliary features plus the raw radar inputs.

    features : (B, n, F) standardized auxiliaries
    raw_obs  : (B, n, 3) columns sigma_obs [dB], vwc [kg/m2], theta [rad]
    targets  : (B,) reference SM, NaN for unlabelled windows
    pad_mask : (B, n) True where a step is left-padding
    """

    features: np.ndarray
    raw_obs: np.ndarray
    targets: np.ndarray
    pad_mask: np.ndarray
    site_ids: np.ndarray
    timestamps: np.ndarray

    def __len__(self):
        return self.features.shape[0]

    @property
    def window(self) -> int:
        return self.features.shape[1]

    @property
    def padded(self) -> np.ndarray:
        """Per-window flag: True if any step was padded."""
        return self.pad_mask.any(axis=1)

    def subset(self, idx) -> "SequenceBatch":
        return SequenceBatch(
            self.features[idx], self.raw_obs[idx], self.targets[idx],
            self.pad_mask[idx], self.site_ids[idx], self.timestamps[idx],
        )

    @classmethod
    def concat(cls, batches) -> "SequenceBatch":
        batches = [b for b in batches if len(b)]
        if not batches:
            raise EmptyInput("no windows")
        return cls(*(np.concatenate([getattr(b, f) for b in batches], axis=0) for f in (
            "features", "raw_obs", "targets", "pad_mask", "site_ids", "timestamps")))


def build_windows(
    series,
    n: int,
    stats: Standardization,
    vwc_coeff: float = DEFAULT_VWC_COEFF,
    labelled_only: bool = True,
) -> SequenceBatch:
    """One window of length ``n`` ending at each (labelled) acquisition.

    Windows that reach before the first acquisition are left-padded by
    repeating it; padded steps are marked in ``pad_mask``.
    """
    if n < 1:
        raise ValueError("window length must be >= 1")
    feats = stats.apply(feature_matrix(series, stats.names))
    raw = np.column_stack([
        series.sigma_obs_db,
        vwc_from_ndvi(series.ndvi, vwc_coeff),
        np.radians(series.incidence_deg),
    ])
    ends = np.flatnonzero(series.labelled) if labelled_only else np.arange(len(series))
    offs = np.arange(-n + 1, 1)
    idx = ends[:, None] + offs[None, :]
    pad = idx < 0
    idx = np.maximum(idx, 0)
    return SequenceBatch(
        features=feats[idx].reshape(len(ends), n, len(stats.names)),
        raw_obs=raw[idx].reshape(len(ends), n, 3),
        targets=series.sm_ref[ends].astype(float),
        pad_mask=pad,
        site_ids=np.array([series.site_id] * len(ends), dtype=object),
        timestamps=series.timestamps[ends],
    )


def build_dataset(sites, n, stats, vwc_coeff=DEFAULT_VWC_COEFF, labelled_only=True) -> SequenceBatch:
    return SequenceBatch.concat(
        build_windows(s, n, stats, vwc_coeff, labelled_only) for s in sites
    )
