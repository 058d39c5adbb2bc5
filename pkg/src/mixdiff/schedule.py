"""Noise schedules shared by the Gaussian and categorical diffusions.

Steps are indexed 1..T at the API surface; the stored arrays are
0-based, so beta[i] is the variance of step i+1.  By convention the
cumulative product at step 0 is 1, which makes the posterior variance
of the first step exactly zero.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class DiffusionSchedule:
    """Per-step noise arrays, each of length T (index i = step i+1).

    beta:          noise added at each step, in (0, 1)
    alpha:         1 - beta
    alpha_bar:     cumulative product of alpha
    posterior_var: variance of the reverse conditional,
                   (1 - alpha_bar[t-1]) / (1 - alpha_bar[t]) * beta[t]
    """

    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray
    posterior_var: np.ndarray

    @property
    def total_steps(self) -> int:
        return self.beta.shape[0]

    def alpha_bar_at(self, t: int) -> float:
        """Cumulative product after t steps; t=0 returns 1."""
        if not 0 <= t <= self.total_steps:
            raise ValueError(f"step {t} outside 0..{self.total_steps}")
        return 1.0 if t == 0 else float(self.alpha_bar[t - 1])

    def prev_alpha_bar(self) -> np.ndarray:
        """alpha_bar shifted one step back, with the step-0 value 1 prepended."""
        return np.concatenate(([1.0], self.alpha_bar[:-1]))


def schedule_from_beta(beta: np.ndarray) -> DiffusionSchedule:
    beta = np.asarray(beta, dtype=np.float64)
    if beta.ndim != 1 or beta.shape[0] < 1:
        raise ValueError("beta must be a non-empty 1-D array")
    alpha = 1.0 - beta
    alpha_bar = np.cumprod(alpha)
    prev = np.concatenate(([1.0], alpha_bar[:-1]))
    posterior_var = (1.0 - prev) / (1.0 - alpha_bar) * beta
    return DiffusionSchedule(beta=beta, alpha=alpha, alpha_bar=alpha_bar,
                             posterior_var=posterior_var)


def cosine_schedule(total_steps: int, offset: float = 0.008,
                    max_beta: float = 0.999) -> DiffusionSchedule:
    """Cosine-shaped schedule: slow noising near both ends of the chain.

    The target cumulative product is
        abar(t) = f(t) / f(0),  f(t) = cos(((t/T + s) / (1 + s)) * pi/2)^2
    with small offset s.  Betas are derived as 1 - abar(t)/abar(t-1),
    clipped at max_beta, and alpha_bar is then rebuilt from the clipped
    betas so the cumulative-product identity holds exactly.
    """
    if total_steps < 2:
        raise ValueError("total_steps must be >= 2")
    T = total_steps
    t = np.arange(T + 1, dtype=np.float64)
    f = np.cos((t / T + offset) / (1.0 + offset) * np.pi / 2.0) ** 2
    abar = f / f[0]
    beta = 1.0 - abar[1:] / abar[:-1]
    beta = np.clip(beta, 0.0, max_beta)
    return schedule_from_beta(beta)


def validate(schedule: DiffusionSchedule, rel_tol: float = 1e-12) -> list[str]:
    """Check schedule invariants; returns a list of violation messages.

    An empty list means the schedule is consistent.  Each message names
    the first offending index so a corrupted schedule is diagnosable.
    """
    problems: list[str] = []
    T = schedule.total_steps
    arrays = {"beta": schedule.beta, "alpha": schedule.alpha,
              "alpha_bar": schedule.alpha_bar,
              "posterior_var": schedule.posterior_var}
    for name, arr in arrays.items():
        if arr.shape != (T,):
            problems.append(f"{name} has shape {arr.shape}, expected ({T},)")
        if not np.all(np.isfinite(arr)):
            idx = int(np.argmin(np.isfinite(arr)))
            problems.append(f"{name}[{idx}] is not finite")
    if problems:
        return problems

    bad = np.where((schedule.beta <= 0.0) | (schedule.beta >= 1.0))[0]
    if bad.size:
        problems.append(f"beta[{bad[0]}]={schedule.beta[bad[0]]!r} outside (0, 1)")
    bad = np.where(np.abs(schedule.alpha - (1.0 - schedule.beta)) > rel_tol)[0]
    if bad.size:
        problems.append(f"alpha[{bad[0]}] != 1 - beta[{bad[0]}]")

    # Brute-force cumulative products, multiplied in the same step order.
    prod = 1.0
    for i in range(T):
        prod *= schedule.alpha[i]
        ref = max(abs(prod), np.finfo(np.float64).tiny)
        if abs(schedule.alpha_bar[i] - prod) > rel_tol * ref:
            problems.append(f"alpha_bar[{i}] deviates from the product of alpha[:{i + 1}]")
            break

    diffs = np.diff(schedule.alpha_bar)
    bad = np.where(diffs >= 0.0)[0]
    if bad.size:
        problems.append(f"alpha_bar not strictly decreasing at index {bad[0] + 1}")

    prev = schedule.prev_alpha_bar()
    expect = (1.0 - prev) / (1.0 - schedule.alpha_bar) * schedule.beta
    ref = np.maximum(np.abs(expect), np.finfo(np.float64).tiny)
    bad = np.where(np.abs(schedule.posterior_var - expect) > rel_tol * ref)[0]
    if bad.size:
        problems.append(f"posterior_var[{bad[0]}] inconsistent with beta and alpha_bar")
    if T >= 1 and schedule.posterior_var[0] != 0.0:
        problems.append("posterior_var[0] must be exactly 0")
    return problems
