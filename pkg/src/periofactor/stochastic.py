"""Seeded random substreams and the scalar samplers the Gibbs sweep needs."""

from __future__ import annotations

import numpy as np
from scipy.special import ndtr, ndtri

from .errors import DomainError

# Beyond this standardized truncation point the inverse-CDF loses accuracy,
# so draws switch to exponential rejection (Robert-style tail sampler).
TAIL_CUT = 4.0


class RngStream:
    """Deterministic substream identified by (seed, path of integer ids).

    Same (seed, path) always reproduces the same draw sequence; distinct
    paths give independent-quality streams. A stream is single-owner: move
    it between workers, never share it concurrently.
    """

    def __init__(self, seed: int, *path: int):
        self.seed = int(seed)
        self.path = tuple(int(p) for p in path)
        self.gen = np.random.default_rng(
            np.random.SeedSequence(entropy=self.seed, spawn_key=self.path))

    def spawn(self, *ids: int) -> "RngStream":
        return RngStream(self.seed, *self.path, *ids)

    def __repr__(self):
        return f"RngStream(seed={self.seed}, path={self.path})"


def _tail_rejection(a: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Standard normal conditioned on z > a for large a (a >= TAIL_CUT)."""
    a = np.asarray(a, dtype=float)
    alpha = 0.5 * (a + np.sqrt(a * a + 4.0))
    out = np.empty_like(a)
    todo = np.arange(a.size)
    a_flat, alpha_flat, out_flat = a.ravel(), alpha.ravel(), out.ravel()
    while todo.size:
        u1 = 1.0 - rng.random(todo.size)  # in (0, 1], keeps log finite
        z = a_flat[todo] - np.log(u1) / alpha_flat[todo]
        u2 = rng.random(todo.size)
        ok = u2 <= np.exp(-0.5 * (z - alpha_flat[todo]) ** 2)
        out_flat[todo[ok]] = z[ok]
        todo = todo[~ok]
    return out


def _std_lower_truncated(a: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Standard normal conditioned on z > a, elementwise over a."""
    a = np.atleast_1d(np.asarray(a, dtype=float))
    easy = a < TAIL_CUT
    if easy.all():
        # survival value uniform on (0, tail]; ndtri is accurate near 0
        tail = ndtr(-a)
        return -ndtri(tail * (1.0 - rng.random(a.shape)))
    z = np.empty_like(a)
    if easy.any():
        tail = ndtr(-a[easy])
        u = rng.random(int(easy.sum()))
        z[easy] = -ndtri(tail * (1.0 - u))
    hard = ~easy
    z[hard] = _tail_rejection(a[hard], rng)
    return z


def truncated_normal(mean, sd, side: str, rng: np.random.Generator):
    """Draw from N(mean, sd^2) restricted to one side of zero.

    ``side`` is ``"above0"`` for (0, inf) or ``"below0"`` for (-inf, 0).
    ``mean`` may be an array; one draw is returned per element. Stable for
    standardized truncation points out to |mean|/sd around 8.
    """
    mean = np.asarray(mean, dtype=float)
    if isinstance(sd, (int, float)):
        if sd <= 0:
            raise DomainError("sd must be positive")
    else:
        sd = np.asarray(sd, dtype=float)
        if (sd <= 0).any():
            raise DomainError("sd must be positive")
    scalar = mean.ndim == 0
    if side == "above0":
        z = _std_lower_truncated(-mean / sd, rng)
        x = mean + sd * z
        x[x <= 0.0] = np.nextafter(0.0, 1.0)  # guard the open endpoint
    elif side == "below0":
        z = _std_lower_truncated(mean / sd, rng)
        x = mean - sd * z
        x[x >= 0.0] = np.nextafter(0.0, -1.0)
    else:
        raise DomainError(f"side must be 'above0' or 'below0', got {side!r}")
    return float(x[0]) if scalar else x


def normal_draw(mean, sd, rng: np.random.Generator):
    if np.any(np.asarray(sd) <= 0):
        raise DomainError("sd must be positive")
    return rng.normal(mean, sd)


def gamma_draw(shape, rate, rng: np.random.Generator):
    if np.any(np.asarray(shape) <= 0) or np.any(np.asarray(rate) <= 0):
        raise DomainError("gamma parameters must be positive")
    return rng.gamma(shape, 1.0 / np.asarray(rate, dtype=float))


def inverse_gamma_draw(shape, scale, rng: np.random.Generator):
    """InvGamma(shape, scale); equals 1 / Gamma(shape, rate=scale)."""
    return 1.0 / gamma_draw(shape, scale, rng)


def beta_draw(a, b, rng: np.random.Generator):
    if np.any(np.asarray(a) <= 0) or np.any(np.asarray(b) <= 0):
        raise DomainError("beta parameters must be positive")
    return rng.beta(a, b)
