"""Domain data model and the generative side of the latent-field machinery.

Responses at site s for patient i follow

    y_ij(s) = a_j + b_j * mu_i(s) + eps_ij(s),    eps ~ N(0, sigma2_ij),

with binary responses observed as the sign of the latent Gaussian y_ij(s)
(probit link, sigma2 fixed at 1). The latent field mu_i has a CAR prior with
mean W*alpha + (x_i'beta)*1 and covariance tau2_i * Q(rho_i)^{-1}. Missing
observation clusters (whole teeth, or single sites in the simulation
designs) follow a probit shared with the same latent field:

    P(cluster u missing) = Phi(a0 + b0 * (Z mu_i)_u),

where Z averages mu over the cluster's sites (identity for site clusters).
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, replace
from functools import cached_property
from pathlib import Path

import numpy as np
from scipy.special import ndtr

from .carfield import CarStructure, PrecisionGaussian
from .errors import ConfigurationError, DataValidationError, DomainError
from .mouthgraph import MouthGraph, build_mouth_graph, tooth_average_map

CONTINUOUS = "continuous"
BINARY = "binary"


@dataclass(frozen=True)
class ResponseSpec:
    """Names and kinds of the J response types; one is the reference.

    The reference response has its slope pinned to 1, which identifies the
    scale of the latent field.
    """

    names: tuple[str, ...]
    kinds: tuple[str, ...]
    reference: int = 0

    def __post_init__(self):
        if len(self.names) != len(self.kinds) or not self.names:
            raise ConfigurationError("names and kinds must align and be nonempty")
        for kind in self.kinds:
            if kind not in (CONTINUOUS, BINARY):
                raise ConfigurationError(f"unknown response kind {kind!r}")
        if not 0 <= self.reference < len(self.names):
            raise ConfigurationError(f"reference index {self.reference} out of range")

    @property
    def n_responses(self) -> int:
        return len(self.names)

    @property
    def continuous_indices(self) -> tuple[int, ...]:
        return tuple(j for j, k in enumerate(self.kinds) if k == CONTINUOUS)

    @property
    def binary_indices(self) -> tuple[int, ...]:
        return tuple(j for j, k in enumerate(self.kinds) if k == BINARY)


SINGLE_CONTINUOUS = ResponseSpec(names=("response",), kinds=(CONTINUOUS,))


@dataclass(frozen=True)
class PriorConfig:
    """w: sd of the N(0, w^2) coefficient priors; (u, v) for the Gamma
    hyperpriors on the pooling hyperparameters."""

    w: float = 10.0
    u: float = 0.1
    v: float = 0.1

    def __post_init__(self):
        if min(self.w, self.u, self.v) <= 0:
            raise ConfigurationError("prior parameters must be positive")


@dataclass
class Dataset:
    """Observed responses plus covariates on a fixed mouth graph.

    ``y`` is (N, J, S) with NaN wherever a site is unobserved (binary
    responses are stored as 0/1 floats). ``observed`` is the (N, S) site
    mask shared by all response types. ``missing_unit`` records whether
    observations vanish by whole tooth or by single site, which also fixes
    the clusters of the missingness model.
    """

    graph: MouthGraph
    responses: ResponseSpec
    X: np.ndarray  # (N, p)
    y: np.ndarray  # (N, J, S)
    observed: np.ndarray  # (N, S) bool
    W: np.ndarray | None = None  # (S, q)
    missing_unit: str = "tooth"
    covariate_names: tuple[str, ...] = ()
    spatial_covariate_names: tuple[str, ...] = ()

    def __post_init__(self):
        if not self.covariate_names:
            self.covariate_names = tuple(f"x{k+1}" for k in range(self.n_covariates))
        if self.W is not None and not self.spatial_covariate_names:
            self.spatial_covariate_names = tuple(
                f"w{k+1}" for k in range(self.W.shape[1]))
        self.validate()

    @property
    def n_patients(self) -> int:
        return self.X.shape[0]

    @property
    def n_covariates(self) -> int:
        return self.X.shape[1]

    @property
    def n_sites(self) -> int:
        return self.graph.n_sites

    @property
    def n_spatial_covariates(self) -> int:
        return 0 if self.W is None else self.W.shape[1]

    @property
    def n_observed_sites(self) -> np.ndarray:
        return self.observed.sum(axis=1)

    @cached_property
    def missing_map(self) -> np.ndarray:
        """Cluster-average matrix Z (U x S) of the missingness model.

        Depends only on the graph and granularity, so it is safe to cache
        even where response masks are regenerated in place.
        """
        if self.missing_unit == "tooth":
            return tooth_average_map(self.graph)
        return np.eye(self.n_sites)

    @property
    def unit_missing(self) -> np.ndarray:
        """(N, U) bool indicator that a missingness cluster is missing."""
        if self.missing_unit == "site":
            return ~self.observed
        first_sites = np.arange(self.graph.n_teeth) * self.graph.sites_per_tooth
        return ~self.observed[:, first_sites]

    def validate(self):
        n, j, s = self.y.shape
        if n != self.X.shape[0] or s != self.graph.n_sites:
            raise DataValidationError("response array shape does not match X/graph")
        if j != self.responses.n_responses:
            raise DataValidationError("response count does not match ResponseSpec")
        if self.observed.shape != (n, s):
            raise DataValidationError("observed mask shape mismatch")
        if self.missing_unit not in ("tooth", "site"):
            raise DataValidationError(f"unknown missing_unit {self.missing_unit!r}")
        nan_pattern = np.isnan(self.y)
        for jj in range(j):
            bad = nan_pattern[:, jj, :] != ~self.observed
            if bad.any():
                i, site = np.argwhere(bad)[0]
                raise DataValidationError(
                    f"patient {i}, response {self.responses.names[jj]}, site "
                    f"{site}: value presence contradicts the observed mask")
        if self.missing_unit == "tooth":
            per_tooth = self.observed.reshape(n, self.graph.n_teeth,
                                              self.graph.sites_per_tooth)
            partial = per_tooth.any(axis=2) & ~per_tooth.all(axis=2)
            if partial.any():
                i, t = np.argwhere(partial)[0]
                raise DataValidationError(
                    f"tooth {t} of patient {i} is partially observed; teeth "
                    "must be observed all-or-nothing")
        binary = self.responses.binary_indices
        if binary:
            vals = self.y[:, binary, :]
            ok = np.isnan(vals) | (vals == 0.0) | (vals == 1.0)
            if not ok.all():
                raise DataValidationError("binary responses must be 0/1")


@dataclass
class ModelState:
    """Every sampled quantity of one MCMC iteration (single-writer).

    Index 0 of nothing is special here: response arrays have length J and
    the missingness pair lives in the separate scalars (a0, b0). Pooled
    variants keep per-patient arrays whose entries all agree.
    """

    mu: np.ndarray  # (N, S)
    a: np.ndarray  # (J,)
    b: np.ndarray  # (J,) with b[reference] == 1
    a0: float
    b0: float
    alpha: np.ndarray  # (q,)
    beta: np.ndarray  # (p,)
    sigma2: np.ndarray  # (N, J); binary columns pinned at 1
    tau2: np.ndarray  # (N,)
    rho: np.ndarray  # (N,)
    c: np.ndarray  # (J,) Gamma shape per response (continuous entries used)
    d: np.ndarray  # (J,) Gamma rate per response
    e: float
    f: float
    g: float
    h: float
    y_work: np.ndarray  # (N, J, S): observed values / current binary latents
    y0: np.ndarray  # (N, U) missingness latents
    prior: PriorConfig
    reference: int
    spatial: bool
    informative_missing: bool
    pooled: bool

    def copy(self) -> "ModelState":
        out = replace(self)
        for name in ("mu", "a", "b", "alpha", "beta", "sigma2", "tau2", "rho",
                     "c", "d", "y_work", "y0"):
            setattr(out, name, getattr(self, name).copy())
        return out


def response_correlation(b_j: float, b_l: float, var_mu: float,
                         sigma2_j: float, sigma2_l: float) -> float:
    """Correlation of two response types sharing the latent factor."""
    if var_mu < 0 or sigma2_j <= 0 or sigma2_l <= 0:
        raise DomainError("variances must be positive")
    num = b_j * b_l * var_mu
    den = np.sqrt(b_j ** 2 * var_mu + sigma2_j) * np.sqrt(b_l ** 2 * var_mu + sigma2_l)
    return float(num / den)


def marginal_moments(state: ModelState, data: Dataset, car: CarStructure,
                     i: int, s: int) -> tuple[np.ndarray, np.ndarray]:
    """Mean vector and covariance matrix over response types at (i, s),
    integrating out the latent field."""
    w_row = 0.0 if data.W is None else float(data.W[s] @ state.alpha)
    level = w_row + float(data.X[i] @ state.beta)
    mean = state.a + state.b * level
    q_ss = float(car.diag_inverse(float(state.rho[i]))[s])
    cov = np.outer(state.b, state.b) * (float(state.tau2[i]) * q_ss)
    cov[np.diag_indices_from(cov)] += state.sigma2[i]
    return mean, cov


@dataclass(frozen=True)
class DesignSpec:
    """One of the six simulation designs (plus free overrides).

    Patients are indexed from 1 when the odd/even variance rule applies, so
    patient 1 (the first) is "odd" and draws the large variance.
    """

    design_id: int
    rho: float
    b0: float
    variance_rule: str  # "constant" or "odd_even"
    n_patients: int = 50
    n_teeth_per_quadrant: int = 7
    n_quadrants: int = 1
    grid_variant: int = 1
    n_covariates: int = 6
    beta: tuple[float, ...] = (0.0, 0.0, 0.0, 0.05, 0.10, 0.15)
    a1: float = 1.0
    b1: float = 1.0
    a0: float = -1.0
    granularity: str = "site"

    def patient_variances(self) -> np.ndarray:
        if self.variance_rule == "constant":
            return np.ones(self.n_patients)
        if self.variance_rule == "odd_even":
            one_based = np.arange(1, self.n_patients + 1)
            return 1.5 * (one_based % 2 == 1) + 0.5
        raise ConfigurationError(f"unknown variance rule {self.variance_rule!r}")


_DESIGN_TABLE = {
    1: dict(rho=0.0, b0=0.0, variance_rule="constant"),
    2: dict(rho=0.9, b0=0.0, variance_rule="constant"),
    3: dict(rho=0.9, b0=0.0, variance_rule="odd_even"),
    4: dict(rho=0.9, b0=1.0, variance_rule="constant"),
    5: dict(rho=0.9, b0=1.0, variance_rule="odd_even"),
    6: dict(rho=0.5, b0=1.0, variance_rule="odd_even"),
}


def design_spec(design_id: int, **overrides) -> DesignSpec:
    if design_id not in _DESIGN_TABLE:
        raise ConfigurationError(f"design must be 1..6, got {design_id}")
    return DesignSpec(design_id=design_id, **_DESIGN_TABLE[design_id], **overrides)


def sample_car_field(car: CarStructure, mean: np.ndarray, tau2: float,
                     rho: float, rng: np.random.Generator) -> np.ndarray:
    """One draw of mu ~ N(mean, tau2 * Q(rho)^{-1})."""
    precision = car.precision(rho) / tau2
    return PrecisionGaussian(precision, precision @ mean).sample(rng)


def simulate_responses(graph: MouthGraph, responses: ResponseSpec,
                       X: np.ndarray, beta: np.ndarray,
                       a: np.ndarray, b: np.ndarray,
                       sigma2: np.ndarray, tau2: np.ndarray, rho: np.ndarray,
                       rng: np.random.Generator,
                       W: np.ndarray | None = None,
                       alpha: np.ndarray | None = None,
                       a0: float | None = None, b0: float = 0.0,
                       granularity: str = "tooth",
                       car: CarStructure | None = None,
                       ) -> tuple[Dataset, np.ndarray]:
    """Draw a dataset from the full generative model; returns the true field.

    ``a0=None`` disables the missingness mechanism entirely (everything
    observed); otherwise clusters of ``granularity`` go missing with
    probability Phi(a0 + b0 * cluster mean of mu).
    """
    car = car or CarStructure(graph)
    n, s = X.shape[0], graph.n_sites
    j = responses.n_responses
    spatial_part = 0.0 if W is None or alpha is None else W @ alpha
    mu = np.empty((n, s))
    for i in range(n):
        mean_i = spatial_part + float(X[i] @ beta)
        mu[i] = sample_car_field(car, np.full(s, 0.0) + mean_i,
                                 float(tau2[i]), float(rho[i]), rng)

    if a0 is None:
        observed = np.ones((n, s), dtype=bool)
        granularity = "tooth"
    elif granularity == "site":
        p_miss = ndtr(a0 + b0 * mu)
        observed = rng.random((n, s)) >= p_miss
    elif granularity == "tooth":
        z = tooth_average_map(graph)
        p_miss = ndtr(a0 + b0 * (mu @ z.T))
        tooth_missing = rng.random((n, graph.n_teeth)) < p_miss
        observed = ~np.repeat(tooth_missing, graph.sites_per_tooth, axis=1)
    else:
        raise ConfigurationError(f"granularity must be site or tooth, got {granularity!r}")

    y = np.empty((n, j, s))
    for jj in range(j):
        latent = a[jj] + b[jj] * mu + np.sqrt(sigma2[:, jj])[:, None] * \
            rng.standard_normal((n, s))
        y[:, jj, :] = (latent > 0).astype(float) \
            if responses.kinds[jj] == BINARY else latent
    y[~np.repeat(observed[:, None, :], j, axis=1)] = np.nan

    data = Dataset(graph=graph, responses=responses, X=X, y=y,
                   observed=observed, W=W,
                   missing_unit="site" if (a0 is not None and granularity == "site")
                   else "tooth")
    return data, mu


def generate_dataset(design: DesignSpec, rng: np.random.Generator,
                     ) -> tuple[Dataset, np.ndarray]:
    """Simulate one replicate of a design; also returns the true field."""
    graph = build_mouth_graph(design.n_teeth_per_quadrant, design.n_quadrants,
                              design.grid_variant)
    car = CarStructure(graph)
    n, p = design.n_patients, design.n_covariates
    beta = np.asarray(design.beta, dtype=float)
    if beta.shape != (p,):
        raise ConfigurationError("beta length must match n_covariates")
    X = rng.standard_normal((n, p))
    variances = design.patient_variances()
    return simulate_responses(
        graph, SINGLE_CONTINUOUS, X, beta,
        a=np.array([design.a1]), b=np.array([design.b1]),
        sigma2=variances[:, None], tau2=variances,
        rho=np.full(n, design.rho), rng=rng,
        a0=design.a0, b0=design.b0, granularity=design.granularity, car=car)


def standardize_columns(x: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Center and scale columns to mean 0, variance 1; returns (z, mean, sd)."""
    mean = x.mean(axis=0)
    sd = x.std(axis=0)
    if (sd == 0).any():
        raise DataValidationError("constant covariate column cannot be standardized")
    return (x - mean) / sd, mean, sd


# ---------------------------------------------------------------------------
# Dataset files. Long-format responses plus per-patient covariates, optional
# spatial covariates, tooth status (tooth-level missingness only) and a small
# JSON meta file tying it together.

def write_dataset_csv(data: Dataset, outdir, mu_true: np.ndarray | None = None):
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    graph = data.graph

    with open(outdir / "responses.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["patient_id", "tooth", "site", "response_name", "value"])
        for i in range(data.n_patients):
            for jj, name in enumerate(data.responses.names):
                for s in range(data.n_sites):
                    v = data.y[i, jj, s]
                    if not np.isnan(v):
                        w.writerow([i, int(graph.tooth_of_site[s]), s, name, repr(float(v))])

    with open(outdir / "patients.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["patient_id", *data.covariate_names])
        for i in range(data.n_patients):
            w.writerow([i, *[repr(float(v)) for v in data.X[i]]])

    if data.W is not None:
        with open(outdir / "spatial_covariates.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["site", *data.spatial_covariate_names])
            for s in range(data.n_sites):
                w.writerow([s, *[repr(float(v)) for v in data.W[s]]])

    if data.missing_unit == "tooth":
        first = np.arange(graph.n_teeth) * graph.sites_per_tooth
        with open(outdir / "teeth_status.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["patient_id", "tooth", "present"])
            for i in range(data.n_patients):
                for t in range(graph.n_teeth):
                    w.writerow([i, t, int(data.observed[i, first[t]])])

    if mu_true is not None:
        with open(outdir / "mu_true.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["patient_id", "site", "mu"])
            for i in range(mu_true.shape[0]):
                for s in range(mu_true.shape[1]):
                    w.writerow([i, s, repr(float(mu_true[i, s]))])

    meta = {
        "responses": [{"name": n, "kind": k}
                      for n, k in zip(data.responses.names, data.responses.kinds)],
        "reference": data.responses.reference,
        "missing_unit": data.missing_unit,
        "graph": {
            "n_teeth_per_quadrant": None,
            "n_quadrants": None,
            "grid_variant": graph.grid_variant,
            "n_teeth": graph.n_teeth,
        },
    }
    # The builder signature is recoverable from (n_teeth, grid) for the jaw
    # layouts this package constructs; fall back to explicit edge files.
    for quadrants in (1, 2, 4):
        per_quad = graph.n_teeth // (1 if quadrants == 1 else 2) \
            // (2 if quadrants == 4 else 1)
        if per_quad >= 1:
            try:
                candidate = build_mouth_graph(per_quad, quadrants, graph.grid_variant)
            except ConfigurationError:
                continue
            if candidate.n_teeth == graph.n_teeth and \
                    candidate.edge_set() == graph.edge_set():
                meta["graph"]["n_teeth_per_quadrant"] = per_quad
                meta["graph"]["n_quadrants"] = quadrants
                break
    if meta["graph"]["n_teeth_per_quadrant"] is None:
        from .mouthgraph import write_graph_csv
        write_graph_csv(graph, outdir / "edges.csv", outdir / "sites.csv")
        meta["graph"]["files"] = ["edges.csv", "sites.csv"]
    with open(outdir / "meta.json", "w") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_dataset_csv(indir) -> Dataset:
    indir = Path(indir)
    with open(indir / "meta.json") as fh:
        meta = json.load(fh)
    if "files" in meta["graph"]:
        from .mouthgraph import read_graph_csv
        graph = read_graph_csv(indir / meta["graph"]["files"][0],
                               indir / meta["graph"]["files"][1])
    else:
        graph = build_mouth_graph(meta["graph"]["n_teeth_per_quadrant"],
                                  meta["graph"]["n_quadrants"],
                                  meta["graph"]["grid_variant"])
    responses = ResponseSpec(
        names=tuple(r["name"] for r in meta["responses"]),
        kinds=tuple(r["kind"] for r in meta["responses"]),
        reference=meta.get("reference", 0))
    name_to_j = {n: j for j, n in enumerate(responses.names)}

    with open(indir / "patients.csv", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        rows = sorted(reader, key=lambda r: int(r[0]))
    covariate_names = tuple(header[1:])
    X = np.array([[float(v) for v in r[1:]] for r in rows])
    n = X.shape[0]

    W = None
    spatial_names: tuple[str, ...] = ()
    if (indir / "spatial_covariates.csv").exists():
        with open(indir / "spatial_covariates.csv", newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader)
            srows = sorted(reader, key=lambda r: int(r[0]))
        spatial_names = tuple(header[1:])
        W = np.array([[float(v) for v in r[1:]] for r in srows])

    y = np.full((n, responses.n_responses, graph.n_sites), np.nan)
    observed = np.zeros((n, graph.n_sites), dtype=bool)
    with open(indir / "responses.csv", newline="") as fh:
        for lineno, row in enumerate(csv.DictReader(fh), start=2):
            i, s = int(row["patient_id"]), int(row["site"])
            jj = name_to_j.get(row["response_name"])
            if jj is None:
                raise DataValidationError(
                    f"responses.csv line {lineno}: unknown response "
                    f"{row['response_name']!r}")
            if not 0 <= s < graph.n_sites or not 0 <= i < n:
                raise DataValidationError(
                    f"responses.csv line {lineno}: patient/site out of range")
            y[i, jj, s] = float(row["value"])
            observed[i, s] = True

    full = ~np.isnan(y).any(axis=1)
    if (observed != full).any():
        i, s = np.argwhere(observed != full)[0]
        raise DataValidationError(
            f"patient {i}, site {s}: some but not all responses present")

    if meta["missing_unit"] == "tooth" and (indir / "teeth_status.csv").exists():
        status = np.ones((n, graph.n_teeth), dtype=bool)
        with open(indir / "teeth_status.csv", newline="") as fh:
            for lineno, row in enumerate(csv.DictReader(fh), start=2):
                status[int(row["patient_id"]), int(row["tooth"])] = \
                    bool(int(row["present"]))
        per_tooth = observed.reshape(n, graph.n_teeth, graph.sites_per_tooth)
        present_in_data = per_tooth.any(axis=2)
        clash = status != present_in_data
        if clash.any():
            i, t = np.argwhere(clash)[0]
            raise DataValidationError(
                f"teeth_status.csv disagrees with responses.csv for patient "
                f"{i}, tooth {t}")

    return Dataset(graph=graph, responses=responses, X=X, y=y,
                   observed=observed, W=W, missing_unit=meta["missing_unit"],
                   covariate_names=covariate_names,
                   spatial_covariate_names=spatial_names)
