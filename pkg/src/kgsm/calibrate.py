"""Fit the WCM's empirical parameters (A, C, D) against reference soil moisture.

A is optimised in log space so every fitted value is positive.  B and
the default incidence angle are held fixed.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import minimize

from .errors import EmptyInput
from .wcm import (
    DEFAULT_CLAMP_FLOOR,
    DEFAULT_VWC_COEFF,
    GRASSLAND_B,
    WcmParams,
    attenuation,
    vwc_from_ndvi,
    wcm_invert_sm_clamped,
)

log = logging.getLogger(__name__)

GAMMA2_STD_WARN = 0.01
DEFAULT_INITIAL = (math.log(0.05), -25.0, 30.0)
DEFAULT_BOUNDS = ((-15.0, 2.0), (-60.0, 10.0), (0.1, 500.0))


@dataclass
class CalibrationProblem:
    """Observations for calibration, one entry per labelled acquisition.

    ``theta`` is in radians.  ``bounds`` and ``initial`` are over
    ``(log A, C, D)``.
    """

    obs_db: np.ndarray
    vwc: np.ndarray
    theta: np.ndarray
    sm_ref: np.ndarray
    fixed_b: float = GRASSLAND_B
    bounds: tuple = DEFAULT_BOUNDS
    initial: tuple = DEFAULT_INITIAL

    def __post_init__(self):
        self.obs_db = np.asarray(self.obs_db, dtype=float)
        self.vwc = np.asarray(self.vwc, dtype=float)
        self.theta = np.broadcast_to(np.asarray(self.theta, dtype=float), self.obs_db.shape).copy()
        self.sm_ref = np.asarray(self.sm_ref, dtype=float)
        n = self.obs_db.shape[0]
        if not (self.vwc.shape == self.theta.shape == self.sm_ref.shape == (n,)):
            raise ValueError("observation arrays must be 1-D and of equal length")
        if n < 3:
            raise EmptyInput(f"need at least 3 labelled observations, got {n}")
        if np.any((self.sm_ref < 0) | (self.sm_ref > 1)):
            raise ValueError("reference soil moisture must lie in [0, 1]")
        if not self.fixed_b > 0:
            raise ValueError("fixed_b must be positive")

    def __len__(self):
        return self.obs_db.shape[0]

    @classmethod
    def from_sites(
        cls,
        sites,
        b: float = GRASSLAND_B,
        vwc_coeff: float = DEFAULT_VWC_COEFF,
        **kw,
    ) -> "CalibrationProblem":
        """Collect every acquisition with a reference value from ``sites``."""
        obs, vwc, theta, sm = [], [], [], []
        for s in sites:
            have = ~np.isnan(s.sm_ref)
            obs.append(s.sigma_obs_db[have])
            vwc.append(vwc_from_ndvi(s.ndvi[have], vwc_coeff))
            theta.append(np.radians(s.incidence_deg[have]))
            sm.append(s.sm_ref[have])
        if not obs or sum(len(o) for o in obs) == 0:
            raise EmptyInput("no acquisitions with reference soil moisture")
        return cls(
            np.concatenate(obs), np.concatenate(vwc), np.concatenate(theta),
            np.concatenate(sm), fixed_b=b, **kw,
        )


@dataclass(frozen=True)
class NelderMeadConfig:
    xatol: float = 1e-10
    fatol: float = 1e-10
    maxiter: int = 5000
    seed: int = 0
    jitter: float = 0.1
    clamp_floor: float = DEFAULT_CLAMP_FLOOR


@dataclass
class CalibrationResult:
    params: WcmParams
    objective: float
    iterations: int
    converged: bool
    gamma2_std: float = float("nan")
    warnings: list = field(default_factory=list)

    def to_json(self) -> dict:
        return {
            "a": self.params.a,
            "b": self.params.b,
            "c": self.params.c,
            "d": self.params.d,
            "theta_deg": self.params.theta_deg,
            "objective": self.objective,
            "iterations": self.iterations,
            "converged": self.converged,
            "gamma2_std": self.gamma2_std,
        }


def calibration_objective(
    log_a: float, c: float, d: float, problem: CalibrationProblem,
    floor: float = DEFAULT_CLAMP_FLOOR,
) -> float:
    """Mean squared error between inverted and reference soil moisture.

    Samples whose residual falls below the vegetation term go through the
    clamped inversion, so the objective is defined everywhere.  The sum
    uses ``math.fsum`` and is therefore independent of observation order.
    """
    if d == 0 or not np.isfinite(log_a):
        return math.inf
    a = math.exp(log_a)
    if not a > 0 or not math.isfinite(a):
        return math.inf
    p = WcmParams(a=a, b=problem.fixed_b, c=c, d=d)
    sm, _ = wcm_invert_sm_clamped(problem.obs_db, problem.vwc, p, theta=problem.theta, floor=floor)
    err = (sm - problem.sm_ref) ** 2
    return math.fsum(err.tolist()) / err.shape[0]


def _run(problem, x0, config):
    f = lambda x: calibration_objective(x[0], x[1], x[2], problem, config.clamp_floor)
    return minimize(
        f,
        np.asarray(x0, dtype=float),
        method="Nelder-Mead",
        bounds=problem.bounds,
        options={
            "xatol": config.xatol,
            "fatol": config.fatol,
            "maxiter": config.maxiter,
            "maxfev": 4 * config.maxiter,
        },
    )


def calibrate_wcm(problem: CalibrationProblem, config: NelderMeadConfig | None = None) -> CalibrationResult:
    """Fit ``(log A, C, D)`` by Nelder-Mead.

    A failed or non-finite first run is restarted once from a jittered
    initial point drawn with ``config.seed``.  The best point seen is
    returned even when neither run converges.
    """
    config = config or NelderMeadConfig()
    res = _run(problem, problem.initial, config)
    runs = [res]
    if not res.success or not np.isfinite(res.fun):
        rng = np.random.default_rng(config.seed)
        x0 = np.asarray(problem.initial) + rng.uniform(-config.jitter, config.jitter, 3) * np.maximum(
            1.0, np.abs(problem.initial)
        )
        log.info("calibration restart from jittered point %s", x0)
        runs.append(_run(problem, x0, config))
    best = min(runs, key=lambda r: r.fun)
    iterations = int(sum(r.nit for r in runs))
    converged = bool(best.success)

    log_a, c, d = (float(v) for v in best.x)
    params = WcmParams(a=math.exp(log_a), b=problem.fixed_b, c=c, d=d)
    g2 = attenuation(problem.vwc, params, theta=problem.theta).gamma2
    gamma2_std = float(np.std(g2))
    warnings = []
    if gamma2_std < GAMMA2_STD_WARN:
        msg = (
            f"gamma^2 varies little across the data (std {gamma2_std:.3g}); "
            "A is weakly identifiable"
        )
        log.warning(msg)
        warnings.append(msg)
    if not converged:
        warnings.append(f"Nelder-Mead did not converge: {best.message}")
    return CalibrationResult(
        params=params,
        objective=float(best.fun),
        iterations=iterations,
        converged=converged,
        gamma2_std=gamma2_std,
        warnings=warnings,
    )
