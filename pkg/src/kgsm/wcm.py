"""Closed-form Water Cloud Model.

Total backscatter is the sum of a vegetation volume term and the
two-way attenuated soil term, both in linear power.  The soil term is
linear in soil moisture on the dB scale.  Everything here is vectorised
over numpy arrays and works equally on scalars.

Angles are radians unless a name ends in ``_deg``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import NegativeResidual, NonPositivePower

DEFAULT_THETA_DEG = 40.0
GRASSLAND_B = 0.084
DEFAULT_VWC_COEFF = 1.0
DEFAULT_CLAMP_FLOOR = 1e-10


@dataclass(frozen=True)
class WcmParams:
    """Semi-empirical WCM parameter set.

    Attributes
    ----------
    a : float
        Vegetation backscattering factor (linear, > 0).
    b : float
        Vegetation parameter relating VWC [kg/m^2] to optical depth.
    c : float
        Soil backscatter intercept [dB].
    d : float
        Soil backscatter slope [dB per m^3/m^3].
    theta : float
        Default local incidence angle [rad].
    """

    a: float = 0.05
    b: float = GRASSLAND_B
    c: float = -25.0
    d: float = 30.0
    theta: float = math.radians(DEFAULT_THETA_DEG)

    def __post_init__(self):
        if not self.a > 0:
            raise ValueError(f"a must be positive, got {self.a}")
        if not self.b > 0:
            raise ValueError(f"b must be positive, got {self.b}")
        if self.d == 0:
            raise ValueError("d must be non-zero")
        if not 0 < self.theta < math.pi / 2:
            raise ValueError(f"theta must lie in (0, pi/2) rad, got {self.theta}")

    @property
    def theta_deg(self) -> float:
        return math.degrees(self.theta)

    @classmethod
    def from_degrees(cls, theta_deg: float = DEFAULT_THETA_DEG, **kw) -> "WcmParams":
        return cls(theta=math.radians(theta_deg), **kw)

    def replace(self, **kw) -> "WcmParams":
        fields = dict(a=self.a, b=self.b, c=self.c, d=self.d, theta=self.theta)
        fields.update(kw)
        return WcmParams(**fields)


@dataclass(frozen=True)
class VegState:
    vwc: np.ndarray
    tau: np.ndarray
    gamma2: np.ndarray


def _theta(params: WcmParams, theta):
    return params.theta if theta is None else np.asarray(theta, dtype=float)


def db_to_linear(x):
    """``10 ** (x / 10)``."""
    return np.power(10.0, np.asarray(x, dtype=float) / 10.0)


def linear_to_db(x):
    """``10 * log10(x)``; raises :class:`NonPositivePower` for ``x <= 0``."""
    x = np.asarray(x, dtype=float)
    if np.any(~(x > 0)):
        raise NonPositivePower(f"linear power must be > 0, got min {np.min(x)!r}")
    return 10.0 * np.log10(x)


def vwc_from_ndvi(ndvi, coeff: float = DEFAULT_VWC_COEFF):
    """Vegetation water content [kg/m^2] as ``coeff * max(0, ndvi)``."""
    if not coeff > 0:
        raise ValueError(f"coeff must be positive, got {coeff}")
    return coeff * np.maximum(0.0, np.asarray(ndvi, dtype=float))


def attenuation(vwc, params: WcmParams, theta=None) -> VegState:
    """Optical depth and two-way attenuation for a given VWC."""
    vwc = np.asarray(vwc, dtype=float)
    tau = params.b * vwc
    gamma2 = np.exp(-2.0 * tau / np.cos(_theta(params, theta)))
    return VegState(vwc=vwc, tau=tau, gamma2=gamma2)


def vegetation_term(vwc, params: WcmParams, a=None, theta=None):
    """Vegetation volume contribution in linear power and the attenuation."""
    th = _theta(params, theta)
    a = params.a if a is None else a
    gamma2 = attenuation(vwc, params, th).gamma2
    return a * np.cos(th) * (1.0 - gamma2), gamma2


def wcm_forward(sm, vwc, params: WcmParams, theta=None):
    """Simulated total backscatter [dB] for soil moisture ``sm``."""
    soil_db = params.c + params.d * np.asarray(sm, dtype=float)
    return forward_from_soil_db(soil_db, vwc, params, theta=theta)


def forward_from_soil_db(soil_db, vwc, params: WcmParams, theta=None):
    """Add vegetation and attenuation to a soil backscatter given in dB."""
    veg, gamma2 = vegetation_term(vwc, params, theta=theta)
    return linear_to_db(veg + gamma2 * db_to_linear(soil_db))


def isolate_soil_backscatter(obs_db, vwc, params: WcmParams, a=None, theta=None):
    """Remove the vegetation contribution from an observation.

    Returns the soil backscatter in dB.  ``a`` overrides ``params.a``.

    Raises
    ------
    NegativeResidual
        If the observation does not exceed the vegetation term.
    """
    veg, gamma2 = vegetation_term(vwc, params, a=a, theta=theta)
    resid = db_to_linear(obs_db) - veg
    if np.any(~(resid > 0)):
        raise NegativeResidual(
            "observed power does not exceed the vegetation contribution "
            f"({int(np.sum(~(resid > 0)))} sample(s))"
        )
    return 10.0 * np.log10(resid / gamma2)


def isolate_soil_backscatter_clamped(
    obs_db, vwc, params: WcmParams, a=None, theta=None, floor: float = DEFAULT_CLAMP_FLOOR
):
    """Like :func:`isolate_soil_backscatter` but total.

    The residual is floored at ``floor`` linear units.  Returns
    ``(soil_db, clamped)`` where ``clamped`` marks floored samples.
    """
    veg, gamma2 = vegetation_term(vwc, params, a=a, theta=theta)
    resid = db_to_linear(obs_db) - veg
    clamped = resid <= floor
    resid = np.where(clamped, floor, resid)
    return 10.0 * np.log10(resid / gamma2), clamped


def wcm_invert_sm(obs_db, vwc, params: WcmParams, theta=None):
    """Soil moisture from an observation by inverting the WCM."""
    if params.d == 0:
        raise ZeroDivisionError("d must be non-zero")
    soil_db = isolate_soil_backscatter(obs_db, vwc, params, theta=theta)
    return (soil_db - params.c) / params.d


def wcm_invert_sm_clamped(obs_db, vwc, params: WcmParams, theta=None, floor=DEFAULT_CLAMP_FLOOR):
    soil_db, clamped = isolate_soil_backscatter_clamped(
        obs_db, vwc, params, theta=theta, floor=floor
    )
    return (soil_db - params.c) / params.d, clamped


def out_of_range(sm) -> np.ndarray:
    """Flag soil moisture values outside the physical range [0, 1]."""
    sm = np.asarray(sm, dtype=float)
    return (sm < 0.0) | (sm > 1.0)
