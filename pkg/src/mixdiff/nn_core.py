"""Optimization substrate: named parameters, Adam, EMA, accumulation, RNG.

Parameters live in a ``ParamStore``, an ordered mapping from string
names to float64 arrays.  The optimizer, the EMA shadow and checkpoint
serialization all address tensors by these names, which keeps update
rules trivial to test in isolation and makes saved state unambiguous.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor


class NumericalError(RuntimeError):
    """A non-finite value reached the optimizer or a training loss."""


class ParamStore:
    """Insertion-ordered name -> float64 ndarray mapping."""

    def __init__(self, tensors: dict[str, np.ndarray] | None = None):
        self._tensors: dict[str, np.ndarray] = {}
        if tensors:
            for name, value in tensors.items():
                self.add(name, value)

    def add(self, name: str, value: np.ndarray) -> np.ndarray:
        if name in self._tensors:
            raise ValueError(f"duplicate parameter name {name!r}")
        arr = np.asarray(value, dtype=np.float64)
        self._tensors[name] = arr
        return arr

    def __getitem__(self, name: str) -> np.ndarray:
        return self._tensors[name]

    def __setitem__(self, name: str, value: np.ndarray) -> None:
        if name not in self._tensors:
            raise KeyError(name)
        arr = np.asarray(value, dtype=np.float64)
        if arr.shape != self._tensors[name].shape:
            raise ValueError(f"shape mismatch for {name!r}: "
                             f"{arr.shape} vs {self._tensors[name].shape}")
        self._tensors[name] = arr

    def __contains__(self, name: str) -> bool:
        return name in self._tensors

    def __iter__(self):
        return iter(self._tensors)

    def __len__(self) -> int:
        return len(self._tensors)

    def names(self) -> list[str]:
        return list(self._tensors)

    def items(self):
        return self._tensors.items()

    def copy(self) -> "ParamStore":
        return ParamStore({k: v.copy() for k, v in self._tensors.items()})

    def zeros_like(self) -> "ParamStore":
        return ParamStore({k: np.zeros_like(v) for k, v in self._tensors.items()})

    def count(self) -> int:
        return sum(v.size for v in self._tensors.values())


def uniform_init(rng: np.random.Generator, shape: tuple[int, ...],
                 fan_in: int) -> np.ndarray:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) matrix initialization."""
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def leaf_params(params: ParamStore, trainable: bool = True) -> dict[str, Tensor]:
    """Wrap every parameter as an autodiff leaf for one forward pass."""
    return {name: Tensor(arr, requires_grad=trainable)
            for name, arr in params.items()}


def collect_grads(params: ParamStore,
                  leaves: dict[str, Tensor]) -> dict[str, np.ndarray]:
    """Gradients by name after backward; zeros for untouched leaves."""
    return {name: (leaf.grad if leaf.grad is not None
                   else np.zeros_like(params[name]))
            for name, leaf in leaves.items()}


@dataclass
class AdamState:
    """Adam moments plus hyperparameters; step counts optimizer updates."""

    lr: float
    beta1: float
    beta2: float
    eps: float
    step: int
    m: ParamStore
    v: ParamStore


def adam_init(params: ParamStore, lr: float = 8e-5, beta1: float = 0.9,
              beta2: float = 0.99, eps: float = 1e-8) -> AdamState:
    return AdamState(lr=lr, beta1=beta1, beta2=beta2, eps=eps, step=0,
                     m=params.zeros_like(), v=params.zeros_like())


def adam_step(params: ParamStore, grads: dict[str, np.ndarray],
              state: AdamState) -> None:
    """One Adam update, in place, with bias-corrected moments.

    Raises NumericalError on any non-finite gradient so a diverged run
    stops at the offending step instead of poisoning the parameters.
    """
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for name in params:
        g = grads.get(name)
        if g is None:
            raise KeyError(f"missing gradient for {name!r}")
        if not np.all(np.isfinite(g)):
            raise NumericalError(f"non-finite gradient for {name!r} at step {t}")
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        params[name] = params[name] - state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


@dataclass
class EmaState:
    """Exponential moving average of parameters, updated after each step."""

    decay: float
    shadow: ParamStore


def ema_init(params: ParamStore, decay: float = 0.995) -> EmaState:
    return EmaState(decay=decay, shadow=params.copy())


def ema_update(state: EmaState, params: ParamStore) -> None:
    d = state.decay
    for name in params:
        s = state.shadow[name]
        s *= d
        s += (1.0 - d) * params[name]


@dataclass
class GradAccumulator:
    """Averages gradients over a fixed number of micro-batches.

    ``add_and_maybe_step`` buffers the incoming gradients; once
    ``period`` batches have been added it applies one Adam update with
    the mean gradient, clears the buffer and returns True.
    """

    period: int
    _sums: dict[str, np.ndarray] = field(default_factory=dict)
    _count: int = 0

    def __post_init__(self):
        if self.period < 1:
            raise ValueError("accumulation period must be >= 1")

    @property
    def pending(self) -> int:
        return self._count

    def add_and_maybe_step(self, params: ParamStore,
                           grads: dict[str, np.ndarray],
                           opt: AdamState) -> bool:
        if not self._sums:
            self._sums = {k: np.zeros_like(v) for k, v in params.items()}
        for name in params:
            self._sums[name] += grads[name]
        self._count += 1
        if self._count < self.period:
            return False
        scale = 1.0 / self.period
        mean = {k: v * scale for k, v in self._sums.items()}
        adam_step(params, mean, opt)
        for v in self._sums.values():
            v[:] = 0.0
        self._count = 0
        return True


class RngHub:
    """Named, independently seeded random streams with portable state.

    Every stream is a PCG64 generator seeded from (master seed, name),
    so adding a new consumer never perturbs existing streams and the
    full state can be captured and restored for bit-exact resumption.
    """

    def __init__(self, seed: int):
        self.seed = int(seed)
        self._streams: dict[str, np.random.Generator] = {}

    def stream(self, name: str) -> np.random.Generator:
        gen = self._streams.get(name)
        if gen is None:
            tag = zlib.crc32(name.encode("utf-8"))
            seq = np.random.SeedSequence([self.seed, tag])
            gen = np.random.Generator(np.random.PCG64(seq))
            self._streams[name] = gen
        return gen

    def state(self) -> dict[str, dict]:
        return {name: gen.bit_generator.state
                for name, gen in sorted(self._streams.items())}

    def restore(self, states: dict[str, dict]) -> None:
        for name, st in states.items():
            self.stream(name).bit_generator.state = st
