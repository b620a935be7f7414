"""Closed-form influence diagnostics, DIC and simulation-study metrics.

With complete Gaussian data, no spatial covariates, and the covariance
parameters held fixed, the patient-coefficient posterior collapses to a
weighted linear regression: patient i contributes a scalar response z_i
with weight

    w_i = tau_i^{-2} 1'[Q - Q (delta_i I + Q)^{-1} Q] 1,
    delta_i = tau_i^2 sum_j b_j^2 / sigma_ij^2,

and z_i is a linear combination of patient i's observations with site
weights k_i(s). These quantities double as an independent oracle for the
MCMC engine, and (evaluated at posterior means, with delta taken from the
reference response's error variance only, a heuristic) as influence
screens for real fits.
"""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass

import numpy as np

from .carfield import CarStructure
from .errors import (DataValidationError, DomainError, NumericalError,
                     UnsupportedConfigurationError)
from .model import CONTINUOUS, Dataset
from .sampler import ChainOutput, observed_data_log_likelihood


def influence_weight(rho: float, tau2: float, delta: float,
                     car: CarStructure) -> float:
    """Patient weight in the collapsed weighted regression."""
    if tau2 <= 0:
        raise DomainError("tau2 must be positive")
    if delta < 0:
        raise DomainError("delta must be nonnegative")
    q = car.precision(rho)
    ones = np.ones(car.n_sites)
    q1 = q @ ones
    inner = np.linalg.solve(delta * np.eye(car.n_sites) + q, q1)
    return float((ones @ q1 - q1 @ inner) / tau2)


def site_weights(rho: float, delta: float, w: float, car: CarStructure,
                 scale_to_sites: bool = False) -> np.ndarray:
    """k_i(s) controlling how strongly each site enters z_i."""
    q = car.precision(rho)
    ones = np.ones(car.n_sites)
    k = np.linalg.solve(delta * np.eye(car.n_sites) + q, q @ ones) / w
    if scale_to_sites:
        k = k * (car.n_sites / k.sum())
    return k


def collapsed_response(y_i: np.ndarray, a: np.ndarray, b: np.ndarray,
                       sigma2_i: np.ndarray, tau2_i: float, rho_i: float,
                       car: CarStructure) -> tuple[float, np.ndarray]:
    """Collapse patient i's (J, S) Gaussian responses to the scalar z_i.

    Requires complete data (the collapsed form assumes no missing clusters
    and Gaussian responses); returns (z_i, unscaled site weights k_i).
    """
    y_i = np.asarray(y_i, dtype=float)
    if y_i.ndim == 1:
        y_i = y_i[None, :]
    if np.isnan(y_i).any():
        raise DataValidationError(
            "collapsed responses are defined for complete Gaussian data "
            "(no missing sites)")
    a = np.atleast_1d(np.asarray(a, dtype=float))
    b = np.atleast_1d(np.asarray(b, dtype=float))
    sigma2_i = np.atleast_1d(np.asarray(sigma2_i, dtype=float))
    delta = float(tau2_i * (b * b / sigma2_i).sum())
    w = influence_weight(rho_i, tau2_i, delta, car)
    k = site_weights(rho_i, delta, w, car)
    z = 0.0
    for jj in range(y_i.shape[0]):
        z += (b[jj] / sigma2_i[jj]) * float(k @ (y_i[jj] - a[jj]))
    return float(z), k


def conjugate_beta_posterior(data: Dataset, a: np.ndarray, b: np.ndarray,
                             sigma2: np.ndarray, tau2: np.ndarray,
                             rho: np.ndarray, car: CarStructure
                             ) -> tuple[np.ndarray, np.ndarray]:
    """Exact flat-prior posterior of the patient coefficients given the
    covariance parameters (the weighted-regression collapse).

    Requires complete Gaussian responses and no spatial covariates.
    """
    if data.W is not None:
        raise UnsupportedConfigurationError(
            "the collapsed posterior assumes no spatial covariates")
    if any(k != CONTINUOUS for k in data.responses.kinds):
        raise UnsupportedConfigurationError(
            "the collapsed posterior assumes Gaussian responses")
    n, p = data.X.shape
    info = np.zeros((p, p))
    rhs = np.zeros(p)
    for i in range(n):
        z_i, _ = collapsed_response(data.y[i], a, b, sigma2[i],
                                    float(tau2[i]), float(rho[i]), car)
        delta = float(tau2[i] * (b * b / sigma2[i]).sum())
        w_i = influence_weight(float(rho[i]), float(tau2[i]), delta, car)
        info += w_i * np.outer(data.X[i], data.X[i])
        rhs += w_i * data.X[i] * z_i
    try:
        cov = np.linalg.inv(info)
    except np.linalg.LinAlgError as exc:
        raise NumericalError("singular weighted information matrix") from exc
    return cov @ rhs, cov


# ---------------------------------------------------------------------------
# Heuristic patient influence report for fitted chains


@dataclass
class InfluenceReport:
    patient_ids: np.ndarray
    w: np.ndarray
    z: np.ndarray  # NaN where the collapsed response is undefined
    delta: np.ndarray
    k: np.ndarray  # (S,) site weights scaled to sum to S, at median params
    heuristic: bool

    def write_csv(self, patients_path, sites_path):
        with open(patients_path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["patient_id", "w", "z", "delta"])
            for i, pid in enumerate(self.patient_ids):
                z = "" if np.isnan(self.z[i]) else repr(float(self.z[i]))
                w.writerow([int(pid), repr(float(self.w[i])), z,
                            repr(float(self.delta[i]))])
        with open(sites_path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["site", "k"])
            for s, val in enumerate(self.k):
                w.writerow([s, repr(float(val))])


def influence_report(chain: ChainOutput, data: Dataset,
                     car: CarStructure | None = None) -> InfluenceReport:
    """Per-patient weights from posterior means.

    delta uses only the reference response's error variance, so for fits
    with binary responses or informative missingness the weights are a
    screening heuristic, flagged in the output.
    """
    car = car or CarStructure(data.graph)
    summ = chain.summaries_cache()
    n = data.n_patients
    ref_name = data.responses.names[chain.metadata.get("reference", 0)]
    pooled = chain.config.patient_variances == "pooled"

    def patient_value(group: str, i: int) -> float:
        if pooled:
            key = {"sigma2": f"sigma2[{ref_name}]", "tau2": "tau2",
                   "rho": "rho"}[group]
        else:
            key = {"sigma2": f"sigma2[{ref_name},{i+1}]",
                   "tau2": f"tau2[{i+1}]", "rho": f"rho[{i+1}]"}[group]
        return summ[key].mean

    heuristic = (data.responses.n_responses > 1
                 or chain.config.informative_missing
                 or not data.observed.all())
    w = np.empty(n)
    z = np.full(n, np.nan)
    delta = np.empty(n)
    a_ref = summ[f"a[{ref_name}]"].mean
    for i in range(n):
        s2 = patient_value("sigma2", i)
        t2 = patient_value("tau2", i)
        r = patient_value("rho", i) if chain.config.spatial else 0.0
        delta[i] = t2 / s2
        w[i] = influence_weight(r, t2, delta[i], car)
        if data.observed[i].all() and data.responses.n_responses == 1:
            z[i], _ = collapsed_response(
                data.y[i, 0], np.array([a_ref]), np.array([1.0]),
                np.array([s2]), t2, r, car)
    i_med = np.argsort(w)[n // 2]
    k = site_weights(patient_value("rho", i_med) if chain.config.spatial else 0.0,
                     delta[i_med], w[i_med], car, scale_to_sites=True)
    return InfluenceReport(np.arange(n), w, z, delta, k, heuristic)


# ---------------------------------------------------------------------------
# DIC


def dic(chain: ChainOutput, data: Dataset) -> tuple[float, float, float]:
    """(DIC, p_D, mean deviance) with the deviance conditional on mu.

    Defined as in the grid-comparison setting: a single continuous response
    and no informative-missingness model.
    """
    if data.responses.n_responses != 1 or data.responses.kinds[0] != CONTINUOUS:
        raise UnsupportedConfigurationError(
            "DIC is computed only for single continuous-response fits")
    if chain.config.informative_missing:
        raise UnsupportedConfigurationError(
            "DIC is not defined here for informative-missingness fits")
    if chain.mu_mean is None:
        raise UnsupportedConfigurationError(
            "DIC requires a latent-field chain")
    summ = chain.summaries_cache()
    name = data.responses.names[0]
    a_hat = np.array([summ[f"a[{name}]"].mean])
    b_hat = np.array([summ[f"b[{name}]"].mean])
    if chain.config.patient_variances == "pooled":
        s2_hat = np.full((data.n_patients, 1), summ[f"sigma2[{name}]"].mean)
    else:
        s2_hat = np.array([[summ[f"sigma2[{name},{i+1}]"].mean]
                           for i in range(data.n_patients)])
    d_at_mean = -2.0 * observed_data_log_likelihood(
        chain.mu_mean, a_hat, b_hat, s2_hat, data)
    mean_d = float(chain.deviance.mean())
    p_d = mean_d - d_at_mean
    if p_d < 0:
        warnings.warn(f"negative effective parameter count p_D={p_d:.2f}; "
                      "the chain may be poorly mixed")
    return mean_d + p_d, p_d, mean_d


# ---------------------------------------------------------------------------
# Simulation-study metrics


@dataclass
class ReplicateResult:
    """Posterior pieces of one fitted replicate needed for Table metrics."""

    beta_mean: np.ndarray
    beta_low: np.ndarray
    beta_high: np.ndarray
    b0_low: float | None = None
    b0_high: float | None = None

    @classmethod
    def from_chain(cls, chain: ChainOutput) -> "ReplicateResult":
        mean, low, high = chain.beta_summary()
        b0_low = b0_high = None
        if "b0" in chain.draws:
            qs = np.quantile(chain.draws["b0"][:, 0], [0.025, 0.975])
            b0_low, b0_high = float(qs[0]), float(qs[1])
        return cls(mean, low, high, b0_low, b0_high)


@dataclass
class StudyMetrics:
    power: np.ndarray  # per coefficient, share of intervals excluding zero
    b0_power: float | None
    mse100: float  # 100 * (1/(pM)) sum over replicates and coefficients
    relbias: np.ndarray  # per coefficient; NaN where beta_true == 0
    n_replicates: int

    @property
    def mse(self) -> float:
        return self.mse100 / 100.0


def study_metrics(replicates: list[ReplicateResult],
                  beta_true: np.ndarray) -> StudyMetrics:
    """Power / MSE / relative bias over fitted replicates."""
    if not replicates:
        raise DomainError("at least one replicate is required")
    beta_true = np.asarray(beta_true, dtype=float)
    p = beta_true.size
    m = len(replicates)
    means = np.stack([r.beta_mean for r in replicates])
    excl = np.stack([(r.beta_low > 0) | (r.beta_high < 0) for r in replicates])
    power = excl.mean(axis=0)
    err = means - beta_true[None, :]
    mse = float((err * err).sum() / (p * m))
    relbias = np.full(p, np.nan)
    nonnull = beta_true != 0
    relbias[nonnull] = (err[:, nonnull] / beta_true[None, nonnull]).mean(axis=0)
    b0_power = None
    have_b0 = [r for r in replicates if r.b0_low is not None]
    if have_b0:
        b0_power = float(np.mean([(r.b0_low > 0) or (r.b0_high < 0)
                                  for r in have_b0]))
    return StudyMetrics(power=power, b0_power=b0_power, mse100=100.0 * mse,
                        relbias=relbias, n_replicates=m)
