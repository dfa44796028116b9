"""Output and weight distributions.

Each per-step output distribution is a two-component mixture: a log-normal
shifted left by ``SHIFT`` (so zero sits inside its support) and a point mass
at zero. A head emits four raw values ``v = (v1, v2, v3, v4)``:

* ``v1, v2`` are softmax logits for the mixing weights ``(w1, w2)``;
* ``v3`` is the log-normal location, used as is;
* ``v4`` sets the log-normal scale ``ALPHA + LAMBDA * sigmoid(BETA * v4)``.

Numpy functions here are the reference implementations used for scoring.
The ``*_graph`` variants build the same quantities on the autodiff tape for
training.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from . import autodiff as ad

ALPHA = 0.001
BETA = 0.01
LAMBDA = 0.7
SHIFT = 0.001
ATOM_TOLERANCE = 1e-9
# Sigmoid clamp so the scale stays strictly inside (ALPHA, ALPHA + LAMBDA) in float64.
_SIG_EPS = 1e-15
_HALF_LOG_2PI = 0.5 * np.log(2.0 * np.pi)


def mixing_weights(v1, v2):
    """Two-logit softmax with max subtraction."""
    v1 = np.asarray(v1, dtype=np.float64)
    v2 = np.asarray(v2, dtype=np.float64)
    m = np.maximum(v1, v2)
    e1, e2 = np.exp(v1 - m), np.exp(v2 - m)
    total = e1 + e2
    return e1 / total, e2 / total


def log_mixing_weights(v1, v2):
    v1 = np.asarray(v1, dtype=np.float64)
    v2 = np.asarray(v2, dtype=np.float64)
    lse = np.logaddexp(v1, v2)
    return v1 - lse, v2 - lse


def lognormal_scale(v4):
    s = expit(BETA * np.asarray(v4, dtype=np.float64))
    return ALPHA + LAMBDA * np.clip(s, _SIG_EPS, 1.0 - _SIG_EPS)


@dataclass(frozen=True)
class MixtureParams:
    """Raw head outputs and the mixture parameters derived from them.

    ``raw`` has trailing dimension 4; every derived field has the leading
    shape of ``raw``.
    """

    raw: np.ndarray

    def __post_init__(self):
        raw = np.asarray(self.raw, dtype=np.float64)
        if raw.shape[-1:] != (4,):
            raise ValueError(f"expected trailing dimension 4, got {raw.shape}")
        object.__setattr__(self, "raw", raw)

    @classmethod
    def from_components(cls, w1, mu, sigma_ln) -> "MixtureParams":
        """Inverse map, handy for tests: pick raw outputs hitting given values."""
        w1 = np.asarray(w1, dtype=np.float64)
        sigma_ln = np.asarray(sigma_ln, dtype=np.float64)
        with np.errstate(divide="ignore"):
            v1 = np.log(w1)
            v2 = np.log1p(-w1)
        u = (sigma_ln - ALPHA) / LAMBDA
        v4 = np.log(u) - np.log1p(-u)
        raw = np.stack(np.broadcast_arrays(v1, v2, np.asarray(mu, float), v4 / BETA), axis=-1)
        return cls(raw)

    @property
    def w1(self):
        return mixing_weights(self.raw[..., 0], self.raw[..., 1])[0]

    @property
    def w2(self):
        return mixing_weights(self.raw[..., 0], self.raw[..., 1])[1]

    @property
    def mu(self):
        return self.raw[..., 2]

    @property
    def sigma_ln(self):
        return lognormal_scale(self.raw[..., 3])


def shifted_lognormal_logpdf(y, mu, sigma):
    """Log density of ``Y`` where ``Y + SHIFT ~ LogNormal(mu, sigma**2)``."""
    y = np.asarray(y, dtype=np.float64)
    if np.any(y <= -SHIFT):
        raise ValueError("y outside the shifted log-normal support")
    ly = np.log(y + SHIFT)
    z = (ly - mu) / sigma
    return -ly - np.log(sigma) - _HALF_LOG_2PI - 0.5 * z * z


def mixture_logprob(y, params: MixtureParams):
    """Log-likelihood of non-negative ``y`` under the mixture.

    At the atom (``|y| <= ATOM_TOLERANCE``) the point mass contributes
    ``w2 * 1`` on top of the continuous density, otherwise nothing.
    """
    y = np.asarray(y, dtype=np.float64)
    if np.any(y < 0):
        raise ValueError("mixture_logprob expects y >= 0")
    log_w1, log_w2 = log_mixing_weights(params.raw[..., 0], params.raw[..., 1])
    cont = log_w1 + shifted_lognormal_logpdf(y, params.mu, params.sigma_ln)
    return np.where(np.abs(y) <= ATOM_TOLERANCE, np.logaddexp(cont, log_w2), cont)


def lognormal_mean(params: MixtureParams):
    """Mean of the unshifted log-normal component, ``exp(mu + sigma**2 / 2)``."""
    return np.exp(params.mu + 0.5 * params.sigma_ln ** 2)


def lognormal_log_variance(params: MixtureParams):
    s2 = params.sigma_ln ** 2
    return np.log(np.expm1(s2)) + 2.0 * params.mu + s2


def mixture_mean(params: MixtureParams):
    return params.w1 * (lognormal_mean(params) - SHIFT)


def mixture_sample(params: MixtureParams, rng: np.random.Generator, size=None):
    """Draw from the mixture; ``size`` prepends sample dimensions."""
    shape = params.mu.shape if size is None else tuple(np.atleast_1d(size)) + params.mu.shape
    pays = rng.random(shape) < params.w1
    amount = np.exp(params.mu + params.sigma_ln * rng.standard_normal(shape)) - SHIFT
    return np.where(pays, amount, 0.0)


@dataclass
class GaussianPosterior:
    """Mean-field Gaussian with ``scale = softplus(raw_scale)``."""

    mean: np.ndarray
    raw_scale: np.ndarray

    @property
    def scale(self):
        return np.logaddexp(0.0, np.asarray(self.raw_scale, dtype=np.float64))

    @classmethod
    def from_scale(cls, mean, scale) -> "GaussianPosterior":
        scale = np.asarray(scale, dtype=np.float64)
        return cls(np.asarray(mean, dtype=np.float64), inverse_softplus(scale))


def inverse_softplus(s):
    s = np.asarray(s, dtype=np.float64)
    return s + np.log(-np.expm1(-s))


def gaussian_kl_std_normal(posterior: GaussianPosterior) -> float:
    """KL(q || N(0, I)) summed over elements."""
    s = posterior.scale
    m = np.asarray(posterior.mean, dtype=np.float64)
    return float(np.sum(0.5 * (s * s + m * m - 1.0 - 2.0 * np.log(s))))


# -- autodiff versions ----------------------------------------------------

def gaussian_kl_graph(mean: ad.Node, raw_scale: ad.Node) -> ad.Node:
    s = ad.softplus(raw_scale)
    terms = s * s + mean * mean - 1.0 - ad.scale(ad.log(s), 2.0)
    return ad.scale(ad.sum(terms), 0.5)


def mixture_logprob_graph(y: np.ndarray, v: ad.Node) -> ad.Node:
    """Elementwise log-likelihood node for targets ``y`` (constant, ``>= 0``).

    ``v`` has shape ``y.shape + (4,)``.
    """
    y = np.asarray(y, dtype=np.float64)
    v1, v2, mu, v4 = (v[..., i] for i in range(4))
    lse = ad.logaddexp(v1, v2)
    log_w1, log_w2 = v1 - lse, v2 - lse
    s = ad.sigmoid(ad.scale(v4, BETA))
    low, high = s.value < _SIG_EPS, s.value > 1.0 - _SIG_EPS
    if low.any() or high.any():
        s = ad.where(~(low | high), s, ad.constant(np.where(low, _SIG_EPS, 1.0 - _SIG_EPS)))
    sigma = ad.scale(s, LAMBDA) + ALPHA
    ly = np.log(y + SHIFT)
    z = (ad.constant(ly) - mu) / sigma
    cont = log_w1 - ad.log(sigma) - ad.scale(z * z, 0.5) + ad.constant(-ly - _HALF_LOG_2PI)
    atom = np.abs(y) <= ATOM_TOLERANCE
    return ad.where(atom, ad.logaddexp(cont, log_w2), cont)
