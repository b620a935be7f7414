"""Gibbs/Metropolis engine for the latent-field model.

One sweep updates, in order: binary-response latents, missing-cluster
latents, the latent field mu_i for every patient, error variances sigma2,
CAR variances tau2, CAR association rho (Metropolis-Hastings with a
Beta(kappa*rho, kappa*(1-rho)) random walk and the full asymmetry
correction), intercept/slope pairs, spatial and patient coefficients, and
finally the pooling hyperparameters (random-walk Metropolis on the log
scale, adapted toward a 0.40 acceptance rate during burn-in only).

Likelihood terms at unobserved sites are dropped everywhere, never imputed;
the information carried by a missing cluster enters only through the probit
missingness model.

Patient-indexed blocks draw from one RNG substream per patient, global
blocks from a shared substream, which makes chains reproducible no matter
how patient updates are scheduled.
"""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy.special import betaln, gammaln, log_ndtr, ndtri

from .carfield import (RHO_MAX, CarStructure, PrecisionGaussian,
                       sample_precision_gaussian_batch)
from .errors import (ConfigurationError, DataValidationError, NumericalError)
from .model import (BINARY, CONTINUOUS, Dataset, ModelState, PriorConfig)
from .stochastic import (RngStream, beta_draw, gamma_draw, inverse_gamma_draw,
                         truncated_normal)

LOG_2PI = float(np.log(2.0 * np.pi))

BLOCKS = ("binary_latents", "missing_latents", "mu", "sigma2", "tau2", "rho",
          "coefficients", "ab_pairs", "hyperparameters")

# model id -> (spatial, informative_missing, patient_variances)
MODEL_VARIANTS = {
    1: None,  # patient-mean regression, handled by fit_mean_regression
    2: (True, False, "pooled"),
    3: (True, False, "per_patient"),
    4: (True, True, "pooled"),
    5: (True, True, "per_patient"),
}


@dataclass
class FitConfig:
    """Chain length, variant switches, priors and proposal tuning."""

    n_iter: int = 20000
    burn_in: int = 5000
    thin: int = 1
    seed: int = 0
    spatial: bool = True
    informative_missing: bool = True
    patient_variances: str = "per_patient"  # or "pooled"
    prior: PriorConfig = field(default_factory=PriorConfig)
    rho_proposal_concentration: float = 50.0
    hyper_proposal_scale: float = 0.5
    hyper_target_accept: float = 0.40
    reference: int | None = None  # default: the dataset's reference response
    model_id: int | None = None
    # Fixed priors used when the matching pooling level is not hierarchical.
    pooled_sigma2_prior: tuple[float, float] = (0.1, 0.1)
    pooled_tau2_prior: tuple[float, float] = (0.1, 0.1)
    pooled_rho_prior: tuple[float, float] = (1.0, 1.0)
    threads: int = 1  # study-level parallelism; a single chain is sequential
    check_finite: bool = False
    keep_mu_draws: bool = False
    frozen: frozenset = frozenset()
    init: dict | None = None

    def __post_init__(self):
        if self.burn_in >= self.n_iter:
            raise ConfigurationError("burn_in must be smaller than n_iter")
        if self.thin < 1:
            raise ConfigurationError("thin must be >= 1")
        if self.patient_variances not in ("pooled", "per_patient"):
            raise ConfigurationError(
                f"patient_variances must be pooled or per_patient, "
                f"got {self.patient_variances!r}")
        unknown = set(self.frozen) - set(BLOCKS)
        if unknown:
            raise ConfigurationError(f"unknown frozen blocks {sorted(unknown)}")
        if self.model_id is not None and self.model_id not in MODEL_VARIANTS:
            raise ConfigurationError(f"model_id must be 1..5, got {self.model_id}")

    @classmethod
    def for_model(cls, model_id: int, **kwargs) -> "FitConfig":
        """Config for one of the five study variants."""
        if model_id not in MODEL_VARIANTS:
            raise ConfigurationError(f"model_id must be 1..5, got {model_id}")
        if model_id == 1:
            return cls(model_id=1, spatial=False, informative_missing=False,
                       patient_variances="pooled", **kwargs)
        spatial, informative, variances = MODEL_VARIANTS[model_id]
        return cls(model_id=model_id, spatial=spatial,
                   informative_missing=informative,
                   patient_variances=variances, **kwargs)


@dataclass
class Summary:
    mean: float
    sd: float
    q025: float
    q500: float
    q975: float

    def excludes_zero(self) -> bool:
        return self.q025 > 0.0 or self.q975 < 0.0


@dataclass
class ChainOutput:
    """Retained draws plus posterior summaries of one chain."""

    draws: dict  # name -> (n_kept, k) float arrays
    names: dict  # group name -> list of scalar names (length k)
    kept_iterations: np.ndarray
    deviance: np.ndarray
    acceptance: dict  # scalar name -> rate over post-burn-in iterations
    mu_mean: np.ndarray | None
    mu_sd: np.ndarray | None
    config: FitConfig
    metadata: dict = field(default_factory=dict)
    mu_draws: np.ndarray | None = None

    def scalar_draws(self, name: str) -> np.ndarray:
        for group, labels in self.names.items():
            if name in labels:
                return self.draws[group][:, labels.index(name)]
        raise KeyError(name)

    def summaries(self) -> dict:
        out = {}
        for group, labels in self.names.items():
            arr = self.draws[group]
            mean = arr.mean(axis=0)
            sd = arr.std(axis=0, ddof=1) if arr.shape[0] > 1 else np.zeros(arr.shape[1])
            qs = np.quantile(arr, [0.025, 0.5, 0.975], axis=0)
            for k, label in enumerate(labels):
                out[label] = Summary(float(mean[k]), float(sd[k]),
                                     float(qs[0, k]), float(qs[1, k]),
                                     float(qs[2, k]))
        return out

    def interval(self, name: str) -> tuple[float, float]:
        s = self.summaries_cache().get(name)
        if s is None:
            raise KeyError(name)
        return s.q025, s.q975

    def summaries_cache(self) -> dict:
        if not hasattr(self, "_summaries"):
            self._summaries = self.summaries()
        return self._summaries

    def beta_summary(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """(posterior means, lower, upper) for the patient coefficients."""
        arr = self.draws["beta"]
        qs = np.quantile(arr, [0.025, 0.975], axis=0)
        return arr.mean(axis=0), qs[0], qs[1]

    def write_draws_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["iteration", "parameter", "value"])
            for group, labels in self.names.items():
                arr = self.draws[group]
                for k, label in enumerate(labels):
                    col = arr[:, k]
                    for it, v in zip(self.kept_iterations, col):
                        w.writerow([int(it), label, repr(float(v))])
            for it, v in zip(self.kept_iterations, self.deviance):
                w.writerow([int(it), "deviance", repr(float(v))])

    def write_summary_csv(self, path):
        summ = self.summaries()
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["parameter", "mean", "sd", "q2.5", "q50", "q97.5",
                        "acceptance_rate"])
            for group, labels in self.names.items():
                for label in labels:
                    s = summ[label]
                    acc = self.acceptance.get(label, "")
                    w.writerow([label, repr(s.mean), repr(s.sd), repr(s.q025),
                                repr(s.q500), repr(s.q975),
                                repr(float(acc)) if acc != "" else ""])


# ---------------------------------------------------------------------------
# State construction


def initial_state(config: FitConfig, data: Dataset) -> ModelState:
    n, s = data.n_patients, data.n_sites
    spec = data.responses
    j = spec.n_responses
    reference = spec.reference if config.reference is None else config.reference
    if not 0 <= reference < j:
        raise ConfigurationError(f"reference index {reference} out of range")
    pooled = config.patient_variances == "pooled"

    a = np.zeros(j)
    y_work = data.y.copy()
    for jj in range(j):
        if spec.kinds[jj] == CONTINUOUS:
            vals = data.y[:, jj, :]
            a[jj] = np.nanmean(vals) if np.isfinite(vals).any() else 0.0
        else:
            # deterministic latent seeds consistent with the signs
            y_work[:, jj, :] = np.where(data.y[:, jj, :] > 0, 0.5, -0.5)
            y_work[:, jj, :][~data.observed] = np.nan

    u = data.missing_map.shape[0]
    y0 = np.zeros((n, u))
    a0 = 0.0
    if config.informative_missing:
        missing = data.unit_missing
        y0 = np.where(missing, 0.5, -0.5).astype(float)
        rate = float(np.clip(missing.mean(), 0.01, 0.99))
        a0 = float(ndtri(rate))

    sigma2 = np.ones((n, j))
    if pooled:
        c = np.full(j, config.pooled_sigma2_prior[0])
        d = np.full(j, config.pooled_sigma2_prior[1])
        e, f = config.pooled_tau2_prior
        g, h = config.pooled_rho_prior
    else:
        c = np.ones(j)
        d = np.ones(j)
        e = f = 1.0
        g = h = 1.0

    state = ModelState(
        mu=np.zeros((n, s)),
        a=a,
        b=np.ones(j),
        a0=a0,
        b0=0.0,
        alpha=np.zeros(data.n_spatial_covariates),
        beta=np.zeros(data.n_covariates),
        sigma2=sigma2,
        tau2=np.ones(n),
        rho=np.full(n, 0.5 if config.spatial else 0.0),
        c=c, d=d, e=float(e), f=float(f), g=float(g), h=float(h),
        y_work=y_work,
        y0=y0,
        prior=config.prior,
        reference=reference,
        spatial=config.spatial,
        informative_missing=config.informative_missing,
        pooled=pooled,
    )
    for key, value in (config.init or {}).items():
        if not hasattr(state, key):
            raise ConfigurationError(f"unknown init override {key!r}")
        current = getattr(state, key)
        if isinstance(current, np.ndarray):
            current[...] = value
        else:
            setattr(state, key, float(value))
    state.b[state.reference] = 1.0
    return state


# ---------------------------------------------------------------------------
# Latent-variable blocks


def update_binary_latents(state: ModelState, data: Dataset,
                          rng: np.random.Generator, patients=None):
    """Redraw probit latents for binary responses at observed sites."""
    binary = data.responses.binary_indices
    if not binary:
        return
    rows = range(data.n_patients) if patients is None else patients
    for i in rows:
        obs = data.observed[i]
        if not obs.any():
            continue
        for jj in binary:
            eta = state.a[jj] + state.b[jj] * state.mu[i, obs]
            pos = data.y[i, jj, obs] == 1.0
            draws = np.empty(eta.shape)
            if pos.any():
                draws[pos] = truncated_normal(eta[pos], 1.0, "above0", rng)
            if (~pos).any():
                draws[~pos] = truncated_normal(eta[~pos], 1.0, "below0", rng)
            state.y_work[i, jj, obs] = draws


def update_missing_latents(state: ModelState, data: Dataset,
                           rng: np.random.Generator, patients=None):
    """Redraw the probit latents behind every missingness cluster."""
    if not state.informative_missing:
        return
    site_unit = data.missing_unit == "site"
    z = None if site_unit else data.missing_map
    missing = data.unit_missing
    rows = range(data.n_patients) if patients is None else patients
    for i in rows:
        cluster_mu = state.mu[i] if site_unit else z @ state.mu[i]
        eta = state.a0 + state.b0 * cluster_mu
        out = np.empty(eta.shape)
        m = missing[i]
        if m.any():
            out[m] = truncated_normal(eta[m], 1.0, "above0", rng)
        if (~m).any():
            out[~m] = truncated_normal(eta[~m], 1.0, "below0", rng)
        state.y0[i] = out


# ---------------------------------------------------------------------------
# Latent field


def _prior_means(state: ModelState, data: Dataset) -> np.ndarray:
    """(N, S) CAR prior means W alpha + (x_i' beta) 1."""
    level = data.X @ state.beta  # (N,)
    base = np.zeros(data.n_sites) if data.W is None else data.W @ state.alpha
    return base[None, :] + level[:, None]


def mu_full_conditional(state: ModelState, data: Dataset, car: CarStructure,
                        i: int) -> PrecisionGaussian:
    """Precision-form full conditional of mu_i.

    Response terms contribute only at observed sites; the missingness terms
    apply at every site (its latents exist for present and missing clusters
    alike) and only when the informative-missingness switch is on.
    """
    rho_i, tau2_i = float(state.rho[i]), float(state.tau2[i])
    prec = car.precision(rho_i) / tau2_i
    mean_i = _prior_means(state, data)[i]
    shift = car.apply(mean_i, rho_i) / tau2_i
    obs = data.observed[i].astype(float)
    diag_extra = np.zeros(data.n_sites)
    for jj in range(data.responses.n_responses):
        b_j, s2 = float(state.b[jj]), float(state.sigma2[i, jj])
        diag_extra += (b_j * b_j / s2) * obs
        resid = np.where(data.observed[i], state.y_work[i, jj] - state.a[jj], 0.0)
        shift += (b_j / s2) * resid
    prec[np.diag_indices_from(prec)] += diag_extra
    if state.informative_missing:
        z = data.missing_map
        prec += state.b0 ** 2 * (z.T @ z)
        shift += state.b0 * (z.T @ (state.y0[i] - state.a0))
    return PrecisionGaussian(prec, shift)


def update_mu(state: ModelState, data: Dataset, car: CarStructure, i: int,
              rng: np.random.Generator):
    state.mu[i] = mu_full_conditional(state, data, car, i).sample(rng)


def _mu_systems(state: ModelState, data: Dataset, car: CarStructure,
                ztz: np.ndarray | None,
                out: np.ndarray | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Batched (N, S, S) precisions and (N, S) shifts for all patients."""
    n, s = state.mu.shape
    inv_tau2 = 1.0 / state.tau2
    prec = np.multiply(car.adjacency[None, :, :],
                       (-(state.rho * inv_tau2))[:, None, None], out=out)
    idx = np.arange(s)
    prec[:, idx, idx] += car.degrees[None, :] * inv_tau2[:, None]

    means = _prior_means(state, data)
    shift = (means * car.degrees - state.rho[:, None] * (means @ car.adjacency)) \
        * inv_tau2[:, None]

    obs = data.observed
    coeff = (state.b ** 2 / state.sigma2).sum(axis=1)  # (N,)
    prec[:, idx, idx] += coeff[:, None] * obs
    for jj in range(data.responses.n_responses):
        resid = np.where(obs, state.y_work[:, jj, :] - state.a[jj], 0.0)
        shift += (state.b[jj] / state.sigma2[:, jj])[:, None] * resid

    if state.informative_missing:
        z = data.missing_map
        prec += (state.b0 ** 2) * ztz[None, :, :]
        shift += state.b0 * ((state.y0 - state.a0) @ z)
    return prec, shift


# ---------------------------------------------------------------------------
# Variances


def _sigma2_stats(state: ModelState, data: Dataset, jj: int
                  ) -> tuple[np.ndarray, np.ndarray]:
    """(observed count, masked residual sum of squares) per patient."""
    resid = np.where(data.observed,
                     state.y_work[:, jj, :] - state.a[jj] - state.b[jj] * state.mu,
                     0.0)
    return data.n_observed_sites.astype(float), (resid * resid).sum(axis=1)


def update_sigma2(state: ModelState, data: Dataset, jj: int,
                  rng: np.random.Generator, i: int | None = None):
    """Inverse-gamma error-variance update for continuous response jj.

    With i=None under pooling the shapes and scales sum over patients;
    otherwise only patient i's observed sites enter.
    """
    if data.responses.kinds[jj] != CONTINUOUS:
        raise ConfigurationError("sigma2 is fixed at 1 for binary responses")
    counts, ssr = _sigma2_stats(state, data, jj)
    if i is None:
        if not state.pooled:
            raise ConfigurationError("patient index required for per-patient variances")
        value = inverse_gamma_draw(counts.sum() / 2.0 + state.c[jj],
                                   ssr.sum() / 2.0 + state.d[jj], rng)
        state.sigma2[:, jj] = value
    else:
        state.sigma2[i, jj] = inverse_gamma_draw(
            counts[i] / 2.0 + state.c[jj], ssr[i] / 2.0 + state.d[jj], rng)


def update_tau2(state: ModelState, data: Dataset, car: CarStructure,
                rng: np.random.Generator, i: int | None = None):
    """Inverse-gamma CAR-variance update (full S in the shape; the latent
    field exists at every site)."""
    r = state.mu - _prior_means(state, data)
    s = data.n_sites
    if i is None:
        if not state.pooled:
            raise ConfigurationError("patient index required for per-patient variances")
        qf = sum(float(car.quadratic_form(r[k], float(state.rho[k])))
                 for k in range(data.n_patients))
        value = inverse_gamma_draw(data.n_patients * s / 2.0 + state.e,
                                   qf / 2.0 + state.f, rng)
        state.tau2[:] = value
    else:
        qf = float(car.quadratic_form(r[i], float(state.rho[i])))
        state.tau2[i] = inverse_gamma_draw(s / 2.0 + state.e, qf / 2.0 + state.f, rng)


# ---------------------------------------------------------------------------
# CAR association (Metropolis-Hastings)


def _rho_log_target(car: CarStructure, rho: float, diag, cross, inv_tau2,
                    g: float, h: float) -> float:
    """Unnormalized log target of rho given residual pieces.

    diag/cross/inv_tau2 are scalars for one patient or aligned arrays for a
    pooled update.
    """
    n_fields = np.size(diag)
    logdet = car.log_det(rho)
    quad = np.sum((diag - 2.0 * rho * cross) * inv_tau2)
    return (0.5 * n_fields * logdet - 0.5 * quad
            + (g - 1.0) * np.log(rho) + (h - 1.0) * np.log1p(-rho))


def _beta_logpdf(x: float, a: float, b: float) -> float:
    return (a - 1.0) * np.log(x) + (b - 1.0) * np.log1p(-x) - betaln(a, b)


def rho_log_acceptance(car: CarStructure, current: float, proposal: float,
                       diag, cross, inv_tau2, g: float, h: float,
                       concentration: float) -> float:
    """Full MH log acceptance ratio for the Beta random walk on rho.

    The Beta(k*rho, k*(1-rho)) walk is not symmetric, so the ratio carries
    the q(current|proposal)/q(proposal|current) correction; omitting it
    biases rho toward 1/2.
    """
    kappa = concentration
    cur_center = float(np.clip(current, 1e-6, 1.0 - 1e-6))
    prop_center = float(np.clip(proposal, 1e-6, 1.0 - 1e-6))
    return (_rho_log_target(car, proposal, diag, cross, inv_tau2, g, h)
            - _rho_log_target(car, current, diag, cross, inv_tau2, g, h)
            + _beta_logpdf(current, kappa * prop_center,
                           kappa * (1.0 - prop_center))
            - _beta_logpdf(proposal, kappa * cur_center,
                           kappa * (1.0 - cur_center)))


def update_rho(state: ModelState, data: Dataset, car: CarStructure,
               rng: np.random.Generator, i: int | None = None,
               concentration: float = 50.0,
               pieces: tuple[np.ndarray, np.ndarray] | None = None) -> bool:
    """One MH move; returns acceptance. i=None performs the pooled update."""
    if not state.spatial:
        return False
    if pieces is None:
        r = state.mu - _prior_means(state, data)
        pieces = car.quadratic_pieces(r)
    diag_all, cross_all = pieces
    if i is None:
        if not state.pooled:
            raise ConfigurationError("patient index required for per-patient rho")
        diag, cross = diag_all, cross_all
        inv_tau2 = 1.0 / state.tau2
        current = float(state.rho[0])
    else:
        diag, cross = diag_all[i], cross_all[i]
        inv_tau2 = 1.0 / float(state.tau2[i])
        current = float(state.rho[i])

    kappa = concentration
    cur_center = float(np.clip(current, 1e-6, 1.0 - 1e-6))
    proposal = float(beta_draw(kappa * cur_center, kappa * (1.0 - cur_center), rng))
    proposal = float(np.clip(proposal, 1e-12, RHO_MAX))
    log_ratio = rho_log_acceptance(car, current, proposal, diag, cross,
                                   inv_tau2, state.g, state.h, kappa)
    accept = np.log(1.0 - rng.random()) < log_ratio
    if accept:
        if i is None:
            state.rho[:] = proposal
        else:
            state.rho[i] = proposal
    return bool(accept)


# ---------------------------------------------------------------------------
# Coefficients


def coef_pair_full_conditional(state: ModelState, data: Dataset,
                               jj: int) -> PrecisionGaussian:
    """Bivariate Gaussian full conditional of (a_j, b_j), masked to
    observed sites."""
    obs = data.observed
    inv_s2 = 1.0 / state.sigma2[:, jj]  # (N,)
    mu_obs = np.where(obs, state.mu, 0.0)
    y_obs = np.where(obs, state.y_work[:, jj, :], 0.0)
    n_i = data.n_observed_sites
    s1 = float(n_i @ inv_s2)
    s_mu = float((mu_obs.sum(axis=1) * inv_s2).sum())
    s_mumu = float(((mu_obs * mu_obs).sum(axis=1) * inv_s2).sum())
    s_y = float((y_obs.sum(axis=1) * inv_s2).sum())
    s_muy = float(((mu_obs * y_obs).sum(axis=1) * inv_s2).sum())
    w2inv = 1.0 / state.prior.w ** 2
    prec = np.array([[w2inv + s1, s_mu], [s_mu, w2inv + s_mumu]])
    return PrecisionGaussian(prec, np.array([s_y, s_muy]))


def reference_intercept_full_conditional(state: ModelState, data: Dataset
                                         ) -> tuple[float, float]:
    """(mean, variance) of a_ref given b_ref == 1."""
    jj = state.reference
    obs = data.observed
    inv_s2 = 1.0 / state.sigma2[:, jj]
    resid = np.where(obs, state.y_work[:, jj, :] - state.mu, 0.0)
    prec = 1.0 / state.prior.w ** 2 + float(data.n_observed_sites @ inv_s2)
    rhs = float((resid.sum(axis=1) * inv_s2).sum())
    return rhs / prec, 1.0 / prec


def missing_pair_full_conditional(state: ModelState, data: Dataset
                                  ) -> PrecisionGaussian:
    """Bivariate full conditional of (a0, b0) against the cluster latents."""
    z = data.missing_map
    v = state.mu @ z.T  # (N, U) cluster means
    y0 = state.y0
    total = v.size
    s_v = float(v.sum())
    s_vv = float((v * v).sum())
    s_y = float(y0.sum())
    s_vy = float((v * y0).sum())
    w2inv = 1.0 / state.prior.w ** 2
    prec = np.array([[w2inv + total, s_v], [s_v, w2inv + s_vv]])
    return PrecisionGaussian(prec, np.array([s_y, s_vy]))


def alpha_full_conditional(state: ModelState, data: Dataset,
                           car: CarStructure) -> PrecisionGaussian:
    q = data.n_spatial_covariates
    w2inv = 1.0 / state.prior.w ** 2
    prec = w2inv * np.eye(q)
    shift = np.zeros(q)
    level = data.X @ state.beta
    for i in range(data.n_patients):
        rho_i, tau2_i = float(state.rho[i]), float(state.tau2[i])
        qw = car.apply(data.W.T, rho_i).T  # (S, q)
        prec += (data.W.T @ qw) / tau2_i
        shift += qw.T @ (state.mu[i] - level[i]) / tau2_i
    return PrecisionGaussian(prec, shift)


def beta_full_conditional(state: ModelState, data: Dataset,
                          car: CarStructure) -> PrecisionGaussian:
    """Patient-coefficient full conditional; uses 1'Q(rho)v = (1-rho) m'v."""
    base = np.zeros(data.n_sites) if data.W is None else data.W @ state.alpha
    resid = state.mu - base[None, :]  # (N, S)
    weights = (1.0 - state.rho) / state.tau2  # (N,)
    m_dot = resid @ car.degrees  # (N,)
    sum_m = float(car.degrees.sum())
    w2inv = 1.0 / state.prior.w ** 2
    prec = w2inv * np.eye(data.n_covariates) + \
        (data.X * (weights * sum_m)[:, None]).T @ data.X
    shift = data.X.T @ (weights * m_dot)
    return PrecisionGaussian(prec, shift)


def update_coefficients(state: ModelState, data: Dataset, car: CarStructure,
                        rng: np.random.Generator, check_finite: bool = False,
                        skip_ab: bool = False):
    """Gibbs draws for (a_j, b_j) pairs, a_ref, (a0, b0), alpha and beta.

    ``skip_ab`` holds every intercept/slope fixed (used when an oracle test
    conditions on them) while alpha and beta still update.
    """
    if not skip_ab:
        for jj in range(data.responses.n_responses):
            if jj == state.reference:
                mean, var = reference_intercept_full_conditional(state, data)
                state.a[jj] = rng.normal(mean, np.sqrt(var))
            else:
                fc = coef_pair_full_conditional(state, data, jj)
                draw = fc.sample(rng)
                _assert_finite(fc, draw, check_finite, "coef_pair")
                state.a[jj], state.b[jj] = draw
        if state.informative_missing:
            fc = missing_pair_full_conditional(state, data)
            draw = fc.sample(rng)
            _assert_finite(fc, draw, check_finite, "missing_pair")
            state.a0, state.b0 = float(draw[0]), float(draw[1])
    if data.n_spatial_covariates:
        fc = alpha_full_conditional(state, data, car)
        draw = fc.sample(rng)
        _assert_finite(fc, draw, check_finite, "alpha")
        state.alpha[:] = draw
    fc = beta_full_conditional(state, data, car)
    draw = fc.sample(rng)
    _assert_finite(fc, draw, check_finite, "beta")
    state.beta[:] = draw


def _assert_finite(fc: PrecisionGaussian, draw: np.ndarray, enabled: bool,
                   label: str):
    if enabled:
        score = fc.log_density(np.atleast_1d(draw))
        if not np.isfinite(score):
            raise NumericalError(f"non-finite log density in block {label}")


# ---------------------------------------------------------------------------
# Hyperparameters (per-patient pooling level only)


def _hyper_log_targets(state: ModelState, data: Dataset) -> dict:
    """Closures mapping each hyperparameter to its unnormalized log target."""
    n = data.n_patients
    u, v = state.prior.u, state.prior.v
    targets = {}
    for jj in data.responses.continuous_indices:
        log_prec = np.log(1.0 / state.sigma2[:, jj])
        sum_prec = float((1.0 / state.sigma2[:, jj]).sum())
        sum_log = float(log_prec.sum())

        def c_target(x, jj=jj, sum_log=sum_log):
            return (n * (x * np.log(state.d[jj]) - gammaln(x)) + x * sum_log
                    + (u - 1.0) * np.log(x) - v * x)

        def d_target(x, jj=jj, sum_prec=sum_prec):
            return (n * state.c[jj] * np.log(x) - x * sum_prec
                    + (u - 1.0) * np.log(x) - v * x)

        targets[f"c_{jj}"] = c_target
        targets[f"d_{jj}"] = d_target

    tau_prec = 1.0 / state.tau2
    sum_log_tau = float(np.log(tau_prec).sum())
    sum_tau_prec = float(tau_prec.sum())
    targets["e"] = lambda x: (n * (x * np.log(state.f) - gammaln(x))
                              + x * sum_log_tau + (u - 1.0) * np.log(x) - v * x)
    targets["f"] = lambda x: (n * state.e * np.log(x) - x * sum_tau_prec
                              + (u - 1.0) * np.log(x) - v * x)
    if state.spatial:
        rho = np.clip(state.rho, 1e-12, RHO_MAX)
        sum_log_rho = float(np.log(rho).sum())
        sum_log_1mrho = float(np.log1p(-rho).sum())
        targets["g"] = lambda x: (n * (gammaln(x + state.h) - gammaln(x))
                                  + x * sum_log_rho
                                  + (u - 1.0) * np.log(x) - v * x)
        targets["h"] = lambda x: (n * (gammaln(state.g + x) - gammaln(x))
                                  + x * sum_log_1mrho
                                  + (u - 1.0) * np.log(x) - v * x)
    return targets


HYPER_ATTR = {"e": "e", "f": "f", "g": "g", "h": "h"}


def _get_hyper(state: ModelState, name: str) -> float:
    if name in HYPER_ATTR:
        return getattr(state, name)
    kind, jj = name.split("_")
    return float(getattr(state, kind)[int(jj)])


def _set_hyper(state: ModelState, name: str, value: float):
    if name in HYPER_ATTR:
        setattr(state, name, float(value))
    else:
        kind, jj = name.split("_")
        getattr(state, kind)[int(jj)] = value


def update_hyperparameters(state: ModelState, data: Dataset,
                           rng: np.random.Generator, scales: dict,
                           adapt: bool, target: float = 0.40,
                           step: float = 0.05) -> dict:
    """Log-scale random-walk Metropolis on c_j, d_j, e, f, g, h.

    Proposal scales move toward the target acceptance rate only while
    ``adapt`` is true (burn-in); afterwards the kernel is fixed so retained
    draws come from a valid Markov chain.
    """
    if state.pooled:
        return {}
    accepted = {}
    for name, log_target in _hyper_log_targets(state, data).items():
        current = _get_hyper(state, name)
        proposal = current * np.exp(scales[name] * rng.standard_normal())
        log_ratio = (log_target(proposal) - log_target(current)
                     + np.log(proposal) - np.log(current))
        acc_prob = min(1.0, float(np.exp(min(log_ratio, 0.0))))
        ok = np.log(1.0 - rng.random()) < log_ratio
        if ok:
            _set_hyper(state, name, proposal)
        accepted[name] = bool(ok)
        if adapt:
            scales[name] = float(np.clip(
                scales[name] * np.exp(step * (acc_prob - target)), 1e-3, 10.0))
    return accepted


# ---------------------------------------------------------------------------
# Deviance (observed-data response likelihood, conditional on mu)


def observed_data_log_likelihood(mu: np.ndarray, a: np.ndarray, b: np.ndarray,
                                 sigma2: np.ndarray, data: Dataset) -> float:
    total = 0.0
    obs = data.observed
    for jj in range(data.responses.n_responses):
        eta = a[jj] + b[jj] * mu
        if data.responses.kinds[jj] == CONTINUOUS:
            resid = np.where(obs, data.y[:, jj, :] - eta, 0.0)
            s2 = sigma2[:, jj][:, None]
            total += float((np.where(obs, -0.5 * (LOG_2PI + np.log(s2)), 0.0)
                            - 0.5 * resid * resid / s2).sum())
        else:
            ystar = np.where(obs, data.y[:, jj, :], 0.0)
            ll = ystar * log_ndtr(eta) + (1.0 - ystar) * log_ndtr(-eta)
            total += float(np.where(obs, ll, 0.0).sum())
    return total


def deviance(state: ModelState, data: Dataset) -> float:
    return -2.0 * observed_data_log_likelihood(state.mu, state.a, state.b,
                                               state.sigma2, data)


# ---------------------------------------------------------------------------
# The chain


class GibbsSampler:
    """Owns the state, RNG substreams and recording for one chain."""

    def __init__(self, config: FitConfig, data: Dataset,
                 car: CarStructure | None = None,
                 state: ModelState | None = None):
        data.validate()
        self.config = config
        self.data = data
        self.car = car if car is not None else CarStructure(data.graph)
        self.state = state if state is not None else initial_state(config, data)
        root = RngStream(config.seed)
        self.global_stream = root.spawn(0)
        self.patient_streams = [root.spawn(1, i) for i in range(data.n_patients)]
        self.hyper_scales = {}
        if config.patient_variances == "per_patient":
            names = [f"{k}_{jj}" for jj in data.responses.continuous_indices
                     for k in ("c", "d")] + ["e", "f"]
            if config.spatial:
                names += ["g", "h"]
            self.hyper_scales = {n: config.hyper_proposal_scale for n in names}
        self._ztz = None
        if config.informative_missing:
            z = data.missing_map
            self._ztz = z.T @ z
        n, s = data.n_patients, data.n_sites
        self._prec_buffer = np.empty((n, s, s))
        self._noise_buffer = np.empty((n, s))
        self._rho_logdet = None  # per-patient cache, filled lazily
        self._rho_accepts = np.zeros(
            1 if self.state.pooled else data.n_patients, dtype=int)
        self._rho_trials = 0
        self._hyper_accepts = {}
        self._hyper_trials = 0

    # -- single sweep -------------------------------------------------------

    def sweep(self, iteration: int):
        cfg, state, data, car = self.config, self.state, self.data, self.car
        frozen = cfg.frozen
        block = "binary_latents"
        try:
            if block not in frozen:
                for i in range(data.n_patients):
                    update_binary_latents(state, data,
                                          self.patient_streams[i].gen, (i,))
            block = "missing_latents"
            if cfg.informative_missing and block not in frozen:
                for i in range(data.n_patients):
                    update_missing_latents(state, data,
                                           self.patient_streams[i].gen, (i,))
            block = "mu"
            if block not in frozen:
                self._update_all_mu()
            block = "sigma2"
            if block not in frozen:
                self._update_variances_sigma2()
            block = "tau2"
            if block not in frozen:
                self._update_variances_tau2()
            block = "rho"
            if cfg.spatial and block not in frozen:
                self._update_all_rho(iteration)
            block = "coefficients"
            if block not in frozen:
                update_coefficients(state, data, car, self.global_stream.gen,
                                    check_finite=cfg.check_finite,
                                    skip_ab="ab_pairs" in frozen)
                state.b[state.reference] = 1.0
            block = "hyperparameters"
            if cfg.patient_variances == "per_patient" and block not in frozen:
                acc = update_hyperparameters(
                    state, data, self.global_stream.gen, self.hyper_scales,
                    adapt=iteration < cfg.burn_in,
                    target=cfg.hyper_target_accept)
                if iteration >= cfg.burn_in:
                    for name, ok in acc.items():
                        self._hyper_accepts[name] = \
                            self._hyper_accepts.get(name, 0) + int(ok)
                    self._hyper_trials += 1
        except NumericalError as exc:
            raise NumericalError(
                f"iteration {iteration}, block {block}: {exc}") from exc

    def _update_all_mu(self):
        state, data = self.state, self.data
        prec, shift = _mu_systems(state, data, self.car, self._ztz,
                                  out=self._prec_buffer)
        noise = self._noise_buffer
        for i, stream in enumerate(self.patient_streams):
            noise[i] = stream.gen.standard_normal(data.n_sites)
        state.mu[:, :] = sample_precision_gaussian_batch(prec, shift, noise)
        if self.config.check_finite:
            for i in range(data.n_patients):
                _assert_finite(PrecisionGaussian(prec[i], shift[i]),
                               state.mu[i], True, f"mu[{i}]")

    def _update_variances_sigma2(self):
        state, data = self.state, self.data
        for jj in data.responses.continuous_indices:
            if state.pooled:
                update_sigma2(state, data, jj, self.global_stream.gen)
            else:
                counts, ssr = _sigma2_stats(state, data, jj)
                shapes = counts / 2.0 + state.c[jj]
                scales = ssr / 2.0 + state.d[jj]
                for i in range(data.n_patients):
                    # inlined inverse_gamma_draw; same draw sequence
                    state.sigma2[i, jj] = 1.0 / self.patient_streams[i].gen \
                        .gamma(shapes[i], 1.0 / scales[i])

    def _update_variances_tau2(self):
        state, data, car = self.state, self.data, self.car
        r = state.mu - _prior_means(state, data)
        diag, cross = car.quadratic_pieces(r)
        qf = diag - 2.0 * state.rho * cross
        s = data.n_sites
        if state.pooled:
            state.tau2[:] = inverse_gamma_draw(
                data.n_patients * s / 2.0 + state.e,
                float(qf.sum()) / 2.0 + state.f, self.global_stream.gen)
        else:
            shape = s / 2.0 + state.e
            scales = qf / 2.0 + state.f
            for i in range(data.n_patients):
                state.tau2[i] = 1.0 / self.patient_streams[i].gen \
                    .gamma(shape, 1.0 / scales[i])

    def _update_all_rho(self, iteration: int):
        state, data, car = self.state, self.data, self.car
        r = state.mu - _prior_means(state, data)
        pieces = car.quadratic_pieces(r)
        kappa = self.config.rho_proposal_concentration
        counting = iteration >= self.config.burn_in
        if state.pooled:
            ok = update_rho(state, data, car, self.global_stream.gen,
                            concentration=kappa, pieces=pieces)
            if counting:
                self._rho_accepts[0] += int(ok)
                self._rho_trials += 1
            return
        # Per-patient sweep with the per-patient streams, but the log
        # determinants, priors and Hastings terms evaluated in one pass.
        diag, cross = pieces
        n = data.n_patients
        current = state.rho.copy()
        proposals = np.empty(n)
        log_u = np.empty(n)
        for i, stream in enumerate(self.patient_streams):
            cc = min(max(current[i], 1e-6), 1.0 - 1e-6)
            proposals[i] = stream.gen.beta(kappa * cc, kappa * (1.0 - cc))
            log_u[i] = np.log(1.0 - stream.gen.random())
        proposals = np.clip(proposals, 1e-12, RHO_MAX)
        if self._rho_logdet is None:
            self._rho_logdet = car.log_det_many(current)
        ld_cur = self._rho_logdet
        ld_prop = car.log_det_many(proposals)
        inv_tau2 = 1.0 / state.tau2
        quad_term = -0.5 * (-2.0 * (proposals - current) * cross) * inv_tau2
        cur_c = np.clip(current, 1e-6, 1.0 - 1e-6)
        prop_c = np.clip(proposals, 1e-6, 1.0 - 1e-6)
        log_ratio = (
            0.5 * (ld_prop - ld_cur) + quad_term
            + (state.g - 1.0) * (np.log(proposals) - np.log(current))
            + (state.h - 1.0) * (np.log1p(-proposals) - np.log1p(-current))
            + _beta_logpdf(current, kappa * prop_c, kappa * (1.0 - prop_c))
            - _beta_logpdf(proposals, kappa * cur_c, kappa * (1.0 - cur_c)))
        accept = log_u < log_ratio
        state.rho[accept] = proposals[accept]
        self._rho_logdet[accept] = ld_prop[accept]
        if counting:
            self._rho_accepts += accept.astype(int)
            self._rho_trials += 1

    # -- full run -----------------------------------------------------------

    def run(self) -> ChainOutput:
        cfg, data, state = self.config, self.data, self.state
        self._rho_accepts[:] = 0
        self._rho_trials = 0
        self._hyper_accepts = {}
        self._hyper_trials = 0

        kept = list(range(cfg.burn_in, cfg.n_iter, cfg.thin))
        n_kept = len(kept)
        labels = self._layout()
        store = {g: np.empty((n_kept, len(lbls))) for g, lbls in labels.items()}
        dev = np.empty(n_kept)
        mu_draws = np.empty((n_kept, data.n_patients, data.n_sites)) \
            if cfg.keep_mu_draws else None
        mu_sum = np.zeros_like(state.mu)
        mu_sq = np.zeros_like(state.mu)

        next_keep = 0
        for it in range(cfg.n_iter):
            self.sweep(it)
            if next_keep < n_kept and it == kept[next_keep]:
                self._record(store, next_keep)
                dev[next_keep] = deviance(state, data)
                mu_sum += state.mu
                mu_sq += state.mu * state.mu
                if mu_draws is not None:
                    mu_draws[next_keep] = state.mu
                next_keep += 1

        mu_mean = mu_sum / n_kept
        mu_var = np.maximum(mu_sq / n_kept - mu_mean ** 2, 0.0)
        acceptance = {}
        if cfg.spatial and self._rho_trials:
            rates = self._rho_accepts / self._rho_trials
            if state.pooled:
                acceptance["rho"] = float(rates[0])
            else:
                for i in range(data.n_patients):
                    acceptance[f"rho[{i+1}]"] = float(rates[i])
        if self._hyper_trials:
            for name, count in self._hyper_accepts.items():
                acceptance[_hyper_label(name, data)] = count / self._hyper_trials

        return ChainOutput(
            draws=store, names=labels,
            kept_iterations=np.array(kept), deviance=dev,
            acceptance=acceptance, mu_mean=mu_mean, mu_sd=np.sqrt(mu_var),
            config=cfg, metadata={"responses": data.responses.names,
                                  "reference": state.reference},
            mu_draws=mu_draws)

    def _layout(self) -> dict:
        data, cfg, state = self.data, self.config, self.state
        rnames = data.responses.names
        labels = {
            "beta": [f"beta[{k+1}]" for k in range(data.n_covariates)],
            "a": [f"a[{name}]" for name in rnames],
            "b": [f"b[{name}]" for name in rnames],
        }
        if data.n_spatial_covariates:
            labels["alpha"] = [f"alpha[{k+1}]" for k in range(data.n_spatial_covariates)]
        if cfg.informative_missing:
            labels["a0"] = ["a0"]
            labels["b0"] = ["b0"]
        cont = data.responses.continuous_indices
        if state.pooled:
            labels["sigma2"] = [f"sigma2[{rnames[jj]}]" for jj in cont]
            labels["tau2"] = ["tau2"]
            if cfg.spatial:
                labels["rho"] = ["rho"]
        else:
            labels["sigma2"] = [f"sigma2[{rnames[jj]},{i+1}]"
                                for jj in cont for i in range(data.n_patients)]
            labels["tau2"] = [f"tau2[{i+1}]" for i in range(data.n_patients)]
            if cfg.spatial:
                labels["rho"] = [f"rho[{i+1}]" for i in range(data.n_patients)]
            labels["hyper"] = [_hyper_label(n, data) for n in self.hyper_scales]
        return labels

    def _record(self, store: dict, row: int):
        state, data = self.state, self.data
        cont = data.responses.continuous_indices
        store["beta"][row] = state.beta
        store["a"][row] = state.a
        store["b"][row] = state.b
        if "alpha" in store:
            store["alpha"][row] = state.alpha
        if "a0" in store:
            store["a0"][row] = state.a0
            store["b0"][row] = state.b0
        if state.pooled:
            store["sigma2"][row] = state.sigma2[0, list(cont)]
            store["tau2"][row] = state.tau2[0]
            if "rho" in store:
                store["rho"][row] = state.rho[0]
        else:
            store["sigma2"][row] = state.sigma2[:, list(cont)].T.ravel()
            store["tau2"][row] = state.tau2
            if "rho" in store:
                store["rho"][row] = state.rho
            store["hyper"][row] = [_get_hyper(state, n) for n in self.hyper_scales]


def _hyper_label(name: str, data: Dataset) -> str:
    if name in ("e", "f", "g", "h"):
        return name
    kind, jj = name.split("_")
    return f"{kind}[{data.responses.names[int(jj)]}]"


def run_chain(config: FitConfig, data: Dataset) -> ChainOutput:
    """Run the configured chain (routes model 1 to the patient-mean path)."""
    if config.model_id == 1:
        return fit_mean_regression(
            data, config.prior, seed=config.seed, n_iter=config.n_iter,
            burn_in=config.burn_in, thin=config.thin,
            sigma2_prior=config.pooled_sigma2_prior)
    return GibbsSampler(config, data).run()


# ---------------------------------------------------------------------------
# Model 1: regression on patient mean responses


def fit_mean_regression(data: Dataset, prior: PriorConfig, seed: int = 0,
                        n_iter: int = 4000, burn_in: int = 1000,
                        thin: int = 1, include_intercept: bool = True,
                        sigma2_prior: tuple[float, float] = (0.1, 0.1)
                        ) -> ChainOutput:
    """Bayesian linear regression on each patient's average observed
    response (Gibbs on coefficients and error variance)."""
    if data.responses.n_responses != 1 or \
            data.responses.kinds[0] != CONTINUOUS:
        raise ConfigurationError(
            "mean regression requires a single continuous response")
    counts = data.n_observed_sites
    keep = counts > 0
    if not keep.all():
        warnings.warn(f"excluding {int((~keep).sum())} patient(s) with no "
                      "observed sites from the mean regression")
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        ybar = np.nanmean(data.y[keep, 0, :], axis=1)
    x = data.X[keep]
    if include_intercept:
        x = np.column_stack([np.ones(len(ybar)), x])
    n_obs, p_all = x.shape
    xtx = x.T @ x
    xty = x.T @ ybar

    stream = RngStream(seed, 0)
    beta = np.zeros(p_all)
    sigma2 = 1.0
    w2inv = 1.0 / prior.w ** 2
    u0, v0 = sigma2_prior

    kept = list(range(burn_in, n_iter, thin))
    n_kept = len(kept)
    p = data.n_covariates
    beta_draws = np.empty((n_kept, p))
    int_draws = np.empty((n_kept, 1))
    s2_draws = np.empty((n_kept, 1))
    dev = np.empty(n_kept)

    next_keep = 0
    for it in range(n_iter):
        fc = PrecisionGaussian(xtx / sigma2 + w2inv * np.eye(p_all),
                               xty / sigma2)
        beta = fc.sample(stream.gen)
        resid = ybar - x @ beta
        sigma2 = inverse_gamma_draw(u0 + n_obs / 2.0,
                                    v0 + float(resid @ resid) / 2.0,
                                    stream.gen)
        if next_keep < n_kept and it == kept[next_keep]:
            beta_draws[next_keep] = beta[1:] if include_intercept else beta
            int_draws[next_keep] = beta[0] if include_intercept else 0.0
            s2_draws[next_keep] = sigma2
            dev[next_keep] = float(n_obs * (LOG_2PI + np.log(sigma2))
                                   + (resid @ resid) / sigma2)
            next_keep += 1

    names = {
        "beta": [f"beta[{k+1}]" for k in range(p)],
        "a": [f"a[{data.responses.names[0]}]"],
        "sigma2": [f"sigma2[{data.responses.names[0]}]"],
    }
    draws = {"beta": beta_draws, "a": int_draws, "sigma2": s2_draws}
    return ChainOutput(draws=draws, names=names,
                       kept_iterations=np.array(kept), deviance=dev,
                       acceptance={}, mu_mean=None, mu_sd=None,
                       config=FitConfig(n_iter=n_iter, burn_in=burn_in,
                                        thin=thin, seed=seed, spatial=False,
                                        informative_missing=False,
                                        patient_variances="pooled",
                                        prior=prior, model_id=1),
                       metadata={"responses": data.responses.names,
                                 "reference": data.responses.reference,
                                 "model": "mean_regression"})
