"""Scoring trained models at the evaluation cutoff.

Two sources of randomness are kept apart:

* epistemic: a weight draw for the variational heads (one per claim per
  draw, so claims never share a draw);
* aleatoric: an outcome draw from the per-step mixture given the weights.

Random streams are derived from a root ``seed`` together with a fingerprint
of each model's parameters, so results do not depend on ensemble order.
"""
from __future__ import annotations

import zlib
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .data import SEQ_LEN, ClaimRecord, ModelInputs, NormalizationStats, transform
from .data import build_scoring_points as _scoring_samples
from .distributions import (MixtureParams, lognormal_log_variance, lognormal_mean,
                            mixture_mean, mixture_sample)
from .network import HEADS, BmdnModel, decoder_states, head_outputs


@dataclass
class PathSample:
    claim_id: str
    draw_id: int
    net_flows: np.ndarray

    @property
    def cumulative(self) -> np.ndarray:
        return np.cumsum(self.net_flows)


@dataclass
class PosteriorSummary:
    """Per (draw, future step) parameters of the paid distribution for one claim."""

    claim_id: str
    w1: np.ndarray        # payment probability, (n_draws, horizon)
    mean: np.ndarray      # log-normal component mean
    log_var: np.ndarray   # log-normal component log variance


def build_scoring_points(train: Sequence[ClaimRecord], stats: NormalizationStats) -> ModelInputs:
    """Model inputs as of the cutoff for claims with at least one future year."""
    return transform(_scoring_samples(train), stats)


def horizons(points: ModelInputs) -> np.ndarray:
    return SEQ_LEN - np.asarray(points.dev_years)


def _fingerprint(model: BmdnModel) -> int:
    crc = 0
    for arr in model.state().values():
        crc = zlib.crc32(arr.tobytes(), crc)
    return crc


def _stream(seed: int, model: BmdnModel, purpose: int) -> np.random.Generator:
    return np.random.default_rng([seed, _fingerprint(model), purpose])


def _horizon_mask(points: ModelInputs, T: int) -> np.ndarray:
    return np.arange(T)[None, :] < horizons(points)[:, None]


def _states(model: BmdnModel, points: ModelInputs) -> np.ndarray:
    return decoder_states(model, points).value


def draw_params(model: BmdnModel, states: np.ndarray, rng: np.random.Generator):
    """One independent weight draw per claim -> ``{head: MixtureParams}`` of shape (B, T)."""
    n = states.shape[0]
    out = {}
    for head in HEADS:
        w, b = model.heads[head].sample_numpy(rng, n)
        out[head] = MixtureParams(head_outputs(states, w, b))
    return out


def point_estimates(models: Sequence[BmdnModel], points: ModelInputs,
                    n_weight_draws: int = 1, seed: int = 0) -> np.ndarray:
    """Expected unpaid per claim: mean over models and weight draws of the
    summed net step means (paid mean minus recovery mean) within the horizon."""
    if n_weight_draws < 1:
        raise ValueError("n_weight_draws must be >= 1")
    if len(points) == 0:
        return np.zeros(0)
    total = np.zeros(len(points))
    for model in models:
        states = _states(model, points)
        keep = _horizon_mask(points, states.shape[1])
        rng = _stream(seed, model, 0)
        for _ in range(n_weight_draws):
            p = draw_params(model, states, rng)
            net = mixture_mean(p["paid"]) - mixture_mean(p["recovery"])
            total += np.where(keep, net, 0.0).sum(axis=1)
    return total / (len(models) * n_weight_draws)


def point_estimate(models, point: ModelInputs, n_weight_draws: int = 1, seed: int = 0) -> float:
    """Single-claim convenience wrapper around :func:`point_estimates`."""
    return float(point_estimates(models, point, n_weight_draws, seed)[0])


def aggregate_unpaid(models, points: ModelInputs, n_weight_draws: int = 1, seed: int = 0):
    """Total expected unpaid and the per-claim rows ``(claim_id, horizon, estimate)``."""
    if len(points) == 0:
        return 0.0, []
    est = point_estimates(models, points, n_weight_draws, seed)
    rows = list(zip(points.claim_ids, horizons(points).tolist(), est.tolist()))
    return float(sum(r[2] for r in rows)), rows


def sample_path_array(models: Sequence[BmdnModel], points: ModelInputs, n_epistemic: int,
                      n_aleatoric: int = 1, seed: int = 0) -> np.ndarray:
    """Net cash-flow paths, shape (claims, n_epistemic * n_aleatoric, T).

    Weight draw ``e`` uses ``models[e % len(models)]``; steps past a claim's
    horizon are zero.
    """
    if n_epistemic < 1 or n_aleatoric < 1:
        raise ValueError("n_epistemic and n_aleatoric must be >= 1")
    states = {id(m): _states(m, points) for m in models}
    rngs = {id(m): _stream(seed, m, 1) for m in models}
    T = next(iter(states.values())).shape[1]
    keep = _horizon_mask(points, T)
    out = np.zeros((len(points), n_epistemic * n_aleatoric, T))
    for e in range(n_epistemic):
        model = models[e % len(models)]
        rng = rngs[id(model)]
        p = draw_params(model, states[id(model)], rng)
        paid = mixture_sample(p["paid"], rng, size=n_aleatoric)
        rec = mixture_sample(p["recovery"], rng, size=n_aleatoric)
        net = np.moveaxis(paid - rec, 0, 1)
        out[:, e * n_aleatoric:(e + 1) * n_aleatoric] = np.where(keep[:, None, :], net, 0.0)
    return out


def sample_paths(models, points: ModelInputs, n_epistemic: int, n_aleatoric: int = 1,
                 seed: int = 0) -> list[PathSample]:
    arr = sample_path_array(models, points, n_epistemic, n_aleatoric, seed)
    hz = horizons(points)
    return [PathSample(cid, d, arr[i, d, :hz[i]].copy())
            for i, cid in enumerate(points.claim_ids) for d in range(arr.shape[1])]


def posterior_summary(models: Sequence[BmdnModel], points: ModelInputs, n_weight_draws: int,
                      seed: int = 0) -> list[PosteriorSummary]:
    """Paid-head parameters across weight draws (cycled over ``models``).

    Pass a one-element list to summarize a single ensemble member.
    """
    if n_weight_draws < 1:
        raise ValueError("n_weight_draws must be >= 1")
    states = {id(m): _states(m, points) for m in models}
    rngs = {id(m): _stream(seed, m, 2) for m in models}
    w1, mean, logv = [], [], []
    for r in range(n_weight_draws):
        model = models[r % len(models)]
        p = draw_params(model, states[id(model)], rngs[id(model)])["paid"]
        w1.append(p.w1)
        mean.append(lognormal_mean(p))
        logv.append(lognormal_log_variance(p))
    w1, mean, logv = (np.stack(a, axis=1) for a in (w1, mean, logv))
    hz = horizons(points)
    return [PosteriorSummary(cid, w1[i, :, :hz[i]], mean[i, :, :hz[i]], logv[i, :, :hz[i]])
            for i, cid in enumerate(points.claim_ids)]
