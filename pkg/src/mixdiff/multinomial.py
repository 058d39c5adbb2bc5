"""Multinomial diffusion over one-hot encoded discrete channels.

Each forward step keeps a category with probability 1 - beta_t and
otherwise resamples uniformly, giving the kernel
    q(c_t | c_{t-1}) = (1 - beta_t) * c_{t-1} + beta_t / K
whose t-step marginal collapses to
    q(c_t | c_0) = abar_t * c_0 + (1 - abar_t) / K.
The reverse conditional follows from Bayes' rule as a normalized
elementwise product of the step kernel evaluated at c_t and the
marginal of c_{t-1} given c_0; the model plugs its softmax estimate of
c_0 into the same expression.

Probability arrays have the category axis last.  Functions accept an
autodiff Tensor for the estimated-c_0 / logits argument so the same
code serves sampling and the training loss.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .schedule import DiffusionSchedule

LOG_FLOOR = 1e-12
SIMPLEX_TOL = 1e-9


@dataclass(frozen=True)
class OneHotSequence:
    """Categorical sequence as [channels, length, K] probabilities.

    hard=True marks exact one-hot content (single 1 per slice); soft
    sequences hold probability vectors on the simplex.
    """

    values: np.ndarray
    hard: bool

    def __post_init__(self):
        v = self.values
        if v.ndim != 3:
            raise ValueError(f"expected [channels, length, K], got shape {v.shape}")
        if not np.all(np.isfinite(v)) or np.any(v < 0.0):
            raise ValueError("probabilities must be finite and non-negative")
        sums = v.sum(axis=-1)
        if np.any(np.abs(sums - 1.0) > SIMPLEX_TOL):
            worst = np.unravel_index(np.argmax(np.abs(sums - 1.0)), sums.shape)
            raise ValueError(f"slice {worst} sums to {sums[worst]!r}, not 1")
        if self.hard and not np.all((v == 0.0) | (v == 1.0)):
            raise ValueError("hard sequence contains values other than 0 and 1")

    @property
    def num_categories(self) -> int:
        return self.values.shape[-1]

    @property
    def codes(self) -> np.ndarray:
        return np.argmax(self.values, axis=-1)


@dataclass(frozen=True)
class CategoricalPosterior:
    """Unnormalized factor product phi and its per-slice normalization."""

    phi: np.ndarray
    normalized: np.ndarray


def one_hot_encode(codes: np.ndarray, num_categories: int) -> OneHotSequence:
    codes = np.asarray(codes)
    if codes.ndim != 2:
        raise ValueError("codes must be [channels, length]")
    if np.any(codes < 0) or np.any(codes >= num_categories):
        raise ValueError(f"category codes outside 0..{num_categories - 1}")
    values = np.eye(num_categories, dtype=np.float64)[codes]
    return OneHotSequence(values=values, hard=True)


def _gather(values: np.ndarray, t, ndim: int):
    T = values.shape[0]
    idx = np.asarray(t)
    if np.any(idx < 1) or np.any(idx > T):
        raise ValueError(f"step {t} outside 1..{T}")
    picked = values[idx - 1]
    if picked.ndim == 0:
        return float(picked)
    return picked.reshape(picked.shape + (1,) * (ndim - 1))


def forward_step_probs(c_prev: np.ndarray, t,
                       schedule: DiffusionSchedule) -> np.ndarray:
    k = c_prev.shape[-1]
    beta = _gather(schedule.beta, t, c_prev.ndim)
    return (1.0 - beta) * c_prev + beta / k


def marginal_probs(c0: np.ndarray, t, schedule: DiffusionSchedule) -> np.ndarray:
    if np.all(np.asarray(t) == 0):
        return np.array(c0, dtype=np.float64, copy=True)
    k = c0.shape[-1]
    abar = _gather(schedule.alpha_bar, t, c0.ndim)
    return abar * c0 + (1.0 - abar) / k


def posterior_probs(c_t: np.ndarray, c0_probs, t, schedule: DiffusionSchedule):
    """Normalized reverse conditional; c0_probs may be a Tensor.

    Returns (phi, normalized) with the same kind as c0_probs.
    """
    k = c_t.shape[-1]
    ndim = c_t.ndim
    alpha = _gather(schedule.alpha, t, ndim)
    abar_prev = _gather(schedule.prev_alpha_bar(), t, ndim)
    step_factor = alpha * c_t + (1.0 - alpha) / k
    prior_factor = abar_prev * c0_probs + (1.0 - abar_prev) / k
    phi = prior_factor * step_factor
    normalized = phi / phi.sum(axis=-1, keepdims=True)
    return phi, normalized


def kl_to_model(q: np.ndarray, p) -> np.ndarray:
    """Per-slice KL(q || p) with probabilities floored inside the logs."""
    logq = np.log(q + LOG_FLOOR)
    logp = ad.log(p + LOG_FLOOR)
    return (q * (logq - logp)).sum(axis=-1)


def nll_slices(c0: np.ndarray, p) -> np.ndarray:
    """Per-slice negative log-likelihood of the true category under p."""
    return -(c0 * ad.log(p + LOG_FLOOR)).sum(axis=-1)


# -- sequence-level API on OneHotSequence -------------------------------

def q_forward_step_probs(c_prev: OneHotSequence, t: int,
                         schedule: DiffusionSchedule) -> OneHotSequence:
    """Single-step transition distribution given the previous state."""
    return OneHotSequence(forward_step_probs(c_prev.values, t, schedule),
                          hard=False)


def q_marginal_probs(c0: OneHotSequence, t: int,
                     schedule: DiffusionSchedule) -> OneHotSequence:
    """Closed-form distribution of c_t given clean data; t=0 is the identity."""
    if t == 0:
        return OneHotSequence(c0.values.copy(), hard=c0.hard)
    return OneHotSequence(marginal_probs(c0.values, t, schedule), hard=False)


def q_posterior(c_t: OneHotSequence, c0_est: OneHotSequence, t: int,
                schedule: DiffusionSchedule) -> CategoricalPosterior:
    phi, normalized = posterior_probs(c_t.values, c0_est.values, t, schedule)
    return CategoricalPosterior(phi=phi, normalized=normalized)


def sample_categorical(probs: np.ndarray,
                       rng: np.random.Generator) -> np.ndarray:
    """Draw one-hot samples from probability slices via inverse CDF."""
    cdf = np.cumsum(probs, axis=-1)
    u = rng.random(probs.shape[:-1])[..., None]
    idx = np.minimum((cdf < u).sum(axis=-1), probs.shape[-1] - 1)
    return np.eye(probs.shape[-1], dtype=np.float64)[idx]


def p_sample_step_discrete(c_t: OneHotSequence, logits: np.ndarray, t: int,
                           schedule: DiffusionSchedule,
                           rng: np.random.Generator) -> OneHotSequence:
    """One reverse step of the categorical chain.

    The softmax of the logits stands in for c_0 in the posterior; the
    final step takes the argmax instead of sampling so repeated runs
    end deterministically given the same chain state.
    """
    c0_est = ad.softmax(ad.as_array(logits), axis=-1)
    _, post = posterior_probs(c_t.values, c0_est, t, schedule)
    if t == 1:
        idx = np.argmax(post, axis=-1)
        values = np.eye(post.shape[-1], dtype=np.float64)[idx]
    else:
        values = sample_categorical(post, rng)
    return OneHotSequence(values=values, hard=True)


def loss_discrete(c0: OneHotSequence, c_t: OneHotSequence, logits, t: int,
                  schedule: DiffusionSchedule):
    """Mean per-slice categorical loss at one step.

    For t >= 2 this is KL between the true-c_0 posterior and the
    model's; at t = 1 it is the negative log-likelihood of the clean
    categories.  Returns a Tensor when logits is one.
    """
    if t < 1:
        raise ValueError("step must be >= 1")
    c0_est = ad.softmax(logits, axis=-1)
    _, p = posterior_probs(c_t.values, c0_est, t, schedule)
    if t == 1:
        return nll_slices(c0.values, p).mean()
    _, q = posterior_probs(c_t.values, c0.values, t, schedule)
    return kl_to_model(q, p).mean()
