"""Gaussian Markov random field numerics for the CAR prior Q(rho) = M - rho*D.

M is the diagonal matrix of site degrees and D the 0/1 adjacency. The log
determinant uses the cached eigenvalues of the degree-normalized adjacency
M^{-1/2} D M^{-1/2}:

    log det Q(rho) = sum_s log m(s) + sum_k log(1 - rho * lambda_k),

so each evaluation is O(S) after a one-time O(S^3) setup per graph.
Quadratic forms walk the edge list and never densify.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import linalg as sla

from .errors import DomainError, NumericalError
from .mouthgraph import MouthGraph

# rho = 1 makes Q singular (intrinsic CAR); the prior puts no mass there.
RHO_MAX = 1.0 - 1e-8

LOG_2PI = float(np.log(2.0 * np.pi))


class CarStructure:
    """Per-graph workspace: degrees, edge list, cached spectrum.

    Immutable after construction; safe to share across workers.
    """

    def __init__(self, graph: MouthGraph):
        self.graph = graph
        self.n_sites = graph.n_sites
        self.degrees = graph.degrees.astype(float)
        self.edges = graph.edges
        self.adjacency = graph.adjacency()
        inv_sqrt_m = 1.0 / np.sqrt(self.degrees)
        normalized = self.adjacency * np.outer(inv_sqrt_m, inv_sqrt_m)
        lam = sla.eigvalsh(normalized)
        if lam.max() > 1.0 + 1e-10:
            raise NumericalError(
                f"normalized adjacency eigenvalue {lam.max():.12f} exceeds 1")
        self.eigenvalues = np.minimum(lam, 1.0)
        self.sum_log_degrees = float(np.log(self.degrees).sum())

    def _check_rho(self, rho: float):
        if not (0.0 <= rho < 1.0):
            raise DomainError(f"rho must lie in [0, 1), got {rho}")

    def precision(self, rho: float) -> np.ndarray:
        """Dense Q(rho) = M - rho*D (symmetric positive definite)."""
        self._check_rho(rho)
        q = -rho * self.adjacency
        np.fill_diagonal(q, self.degrees)
        return q

    def log_det(self, rho: float) -> float:
        # eigenvalues are clipped to <= 1 at construction, so rho < 1
        # guarantees every 1 - rho*lambda stays positive
        self._check_rho(rho)
        return self.sum_log_degrees + float(
            np.log1p(-rho * self.eigenvalues).sum())

    def log_det_many(self, rhos: np.ndarray) -> np.ndarray:
        """log det Q(rho) for a vector of rho values in one pass."""
        if (rhos < 0.0).any() or (rhos >= 1.0).any():
            raise DomainError("rho values must lie in [0, 1)")
        return self.sum_log_degrees + \
            np.log1p(-np.outer(rhos, self.eigenvalues)).sum(axis=1)

    def quadratic_pieces(self, r: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """(r' M r, sum over edges of r_s r_s') for r of shape (S,) or (N, S)."""
        r = np.asarray(r, dtype=float)
        if r.shape[-1] != self.n_sites:
            raise DomainError(
                f"vector length {r.shape[-1]} does not match S={self.n_sites}")
        diag = (r * r * self.degrees).sum(axis=-1)
        cross = (r[..., self.edges[:, 0]] * r[..., self.edges[:, 1]]).sum(axis=-1)
        return diag, cross

    def quadratic_form(self, r: np.ndarray, rho: float):
        """r' Q(rho) r via edge traversal; batched over leading axes of r."""
        self._check_rho(rho)
        diag, cross = self.quadratic_pieces(r)
        return diag - 2.0 * rho * cross

    def apply(self, v: np.ndarray, rho: float) -> np.ndarray:
        """Q(rho) v for v of shape (S,) or (N, S)."""
        self._check_rho(rho)
        return v * self.degrees - rho * (v @ self.adjacency)

    def log_density(self, r: np.ndarray, rho: float, tau2: float) -> float:
        """Log density of N(0, tau2 * Q(rho)^{-1}) at r."""
        if tau2 <= 0.0:
            raise DomainError(f"tau2 must be positive, got {tau2}")
        s = self.n_sites
        return (-0.5 * s * (LOG_2PI + np.log(tau2))
                + 0.5 * self.log_det(rho)
                - 0.5 * float(self.quadratic_form(r, rho)) / tau2)

    def diag_inverse(self, rho: float) -> np.ndarray:
        """Diagonal of Q(rho)^{-1} (dense solve; S is small)."""
        q = self.precision(rho)
        return np.diag(np.linalg.inv(q)).copy()


@dataclass
class PrecisionGaussian:
    """Canonical-form Gaussian N(Q^{-1} b, Q^{-1}) given (precision Q, shift b)."""

    precision: np.ndarray
    shift: np.ndarray

    def _chol(self) -> np.ndarray:
        try:
            return np.linalg.cholesky(self.precision)
        except np.linalg.LinAlgError as exc:
            diag = np.diag(self.precision)
            raise NumericalError(
                "precision matrix is not positive definite "
                f"(min diag {diag.min():.3e}, max diag {diag.max():.3e})"
            ) from exc

    def mean(self) -> np.ndarray:
        lower = self._chol()
        t = sla.solve_triangular(lower, self.shift, lower=True)
        return sla.solve_triangular(lower.T, t, lower=False)

    def covariance(self) -> np.ndarray:
        return np.linalg.inv(self.precision)

    def log_density(self, x: np.ndarray) -> float:
        lower = self._chol()
        resid = x - self.mean()
        half = lower.T @ resid
        return (-0.5 * len(x) * LOG_2PI
                + float(np.log(np.diag(lower)).sum())
                - 0.5 * float(half @ half))

    def sample(self, rng: np.random.Generator) -> np.ndarray:
        """Draw x with E[x] = Q^{-1} b and Cov[x] = Q^{-1}."""
        lower = self._chol()
        t = sla.solve_triangular(lower, self.shift, lower=True)
        z = rng.standard_normal(len(self.shift))
        return sla.solve_triangular(lower.T, t + z, lower=False)


def sample_precision_gaussian_batch(precisions: np.ndarray,
                                    shifts: np.ndarray,
                                    noise: np.ndarray) -> np.ndarray:
    """Vectorized draws from a stack of precision-form Gaussians.

    ``precisions`` is (N, S, S), ``shifts`` and ``noise`` are (N, S); the
    standard-normal ``noise`` is supplied by the caller so that RNG substream
    ownership stays outside the linear algebra.
    """
    try:
        lower = np.linalg.cholesky(precisions)
    except np.linalg.LinAlgError as exc:
        raise NumericalError("batched precision Cholesky failed") from exc
    mean = np.linalg.solve(precisions, shifts[..., None])[..., 0]
    perturb = np.linalg.solve(np.swapaxes(lower, -1, -2), noise[..., None])[..., 0]
    return mean + perturb


# Functional aliases matching the operation names used around the package.

def car_precision(car: CarStructure, rho: float) -> np.ndarray:
    return car.precision(rho)


def car_log_density(r: np.ndarray, rho: float, tau2: float,
                    car: CarStructure) -> float:
    return car.log_density(r, rho, tau2)


def quadratic_form(r: np.ndarray, rho: float, car: CarStructure):
    return car.quadratic_form(r, rho)


def sample_precision_gaussian(g: PrecisionGaussian,
                              rng: np.random.Generator) -> np.ndarray:
    return g.sample(rng)
