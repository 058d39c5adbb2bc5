"""Gaussian diffusion over the numerical channels.

Forward noising has the closed form
    x_t = sqrt(abar_t) * x_0 + sqrt(1 - abar_t) * eps,  eps ~ N(0, I)
and the reverse step is a Gaussian whose mean is recovered from the
predicted noise,
    mu = (x_t - beta_t / sqrt(1 - abar_t) * eps_hat) / sqrt(alpha_t)
with the fixed posterior variance from the schedule.

Step argument ``t`` is either a python int (single sample) or an int
array with one entry per leading batch element.
"""

from __future__ import annotations

import numpy as np

from .schedule import DiffusionSchedule


def _gather(values: np.ndarray, t, ndim: int):
    """Per-step coefficient lookup, shaped to broadcast over `ndim` dims."""
    T = values.shape[0]
    idx = np.asarray(t)
    if np.any(idx < 1) or np.any(idx > T):
        raise ValueError(f"step {t} outside 1..{T}")
    picked = values[idx - 1]
    if picked.ndim == 0:
        return float(picked)
    return picked.reshape(picked.shape + (1,) * (ndim - 1))


def q_sample(x0: np.ndarray, t, eps: np.ndarray,
             schedule: DiffusionSchedule) -> np.ndarray:
    """Draw x_t from the forward marginal given clean data and noise."""
    x0 = np.asarray(x0, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    if eps.shape != x0.shape:
        raise ValueError(f"eps shape {eps.shape} != x0 shape {x0.shape}")
    abar = _gather(schedule.alpha_bar, t, x0.ndim)
    return np.sqrt(abar) * x0 + np.sqrt(1.0 - abar) * eps


def posterior_mean(xt: np.ndarray, predicted_eps: np.ndarray, t,
                   schedule: DiffusionSchedule) -> np.ndarray:
    """Mean of the reverse conditional implied by the noise estimate."""
    xt = np.asarray(xt, dtype=np.float64)
    predicted_eps = np.asarray(predicted_eps, dtype=np.float64)
    if predicted_eps.shape != xt.shape:
        raise ValueError("predicted_eps shape differs from xt")
    beta = _gather(schedule.beta, t, xt.ndim)
    alpha = _gather(schedule.alpha, t, xt.ndim)
    abar = _gather(schedule.alpha_bar, t, xt.ndim)
    return (xt - beta / np.sqrt(1.0 - abar) * predicted_eps) / np.sqrt(alpha)


def p_sample_step(xt: np.ndarray, predicted_eps: np.ndarray, t,
                  z, schedule: DiffusionSchedule) -> np.ndarray:
    """One reverse step: posterior mean plus scaled noise z.

    The caller must pass z = 0 at t = 1; the posterior variance there
    is zero anyway, so the final step is deterministic.
    """
    mean = posterior_mean(xt, predicted_eps, t, schedule)
    var = _gather(schedule.posterior_var, t, np.asarray(xt).ndim)
    return mean + np.sqrt(var) * np.asarray(z, dtype=np.float64)


def loss_numerical(x0: np.ndarray, t, eps: np.ndarray, predicted_eps):
    """Mean squared error between true and predicted noise.

    x0 and t only define the forward draw that produced the prediction;
    the loss itself compares the noises.  predicted_eps may be an
    autodiff Tensor, in which case the result is one too.
    """
    eps = np.asarray(eps, dtype=np.float64)
    if np.asarray(x0).shape != eps.shape:
        raise ValueError("x0 and eps shapes differ")
    if np.any(np.asarray(t) < 1):
        raise ValueError("step must be >= 1")
    d = predicted_eps - eps
    return (d * d).mean()
