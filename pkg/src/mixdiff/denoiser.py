"""Step-conditional bidirectional recurrent denoiser.

One network handles both data types: the noisy numerical channels and
the one-hot discrete channels are concatenated per time step into one
input vector, run through a stack of bidirectional LSTM layers, and
projected back to a noise estimate per numerical channel plus logits
per discrete channel.

The diffusion step t enters through a feature-wise conditioning path:
a sinusoidal embedding of t is pushed through a two-layer MLP to
produce a scale and a shift, applied after per-step layer
normalization of the recurrent features as h * (scale + 1) + shift.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .multinomial import OneHotSequence
from .nn_core import ParamStore, collect_grads, leaf_params, uniform_init


@dataclass(frozen=True)
class DenoiserConfig:
    """Channel layout and widths; hidden_width covers both directions."""

    num_channels: int
    discrete_ks: tuple[int, ...]
    hidden_width: int
    embed_width: int = 128
    layers: int = 2

    def __post_init__(self):
        if self.num_channels < 0:
            raise ValueError("num_channels must be >= 0")
        if any(k < 2 for k in self.discrete_ks):
            raise ValueError("every discrete channel needs at least 2 categories")
        if self.input_width < 1:
            raise ValueError("model needs at least one channel")
        if self.hidden_width < 2 or self.hidden_width % 2:
            raise ValueError("hidden_width must be even (two directions)")
        if self.embed_width < 2 or self.embed_width % 2:
            raise ValueError("embed_width must be even (sin and cos halves)")
        if self.layers < 1:
            raise ValueError("layers must be >= 1")

    @property
    def input_width(self) -> int:
        return self.num_channels + sum(self.discrete_ks)


def default_hidden_width(num_channels: int, discrete_ks: Sequence[int]) -> int:
    """Four times the per-step input width, the standard sizing here."""
    return 4 * (num_channels + sum(discrete_ks))


@dataclass(frozen=True)
class DenoiserOutput:
    """Noise estimate [P, L] and per-discrete-channel logits [L, K_p]."""

    eps_pred: np.ndarray
    logits: tuple[np.ndarray, ...]


def sinusoidal_embed(t, width: int) -> np.ndarray:
    """Sinusoidal position features of the step index.

    Entry i of the first half is sin(t / 10000^(2i/width)); the second
    half holds the matching cosines.  A scalar t yields [width]; an
    array of steps yields [len(t), width].
    """
    if width < 2 or width % 2:
        raise ValueError("width must be a positive even number")
    half = width // 2
    tt = np.asarray(t, dtype=np.float64)
    scalar = tt.ndim == 0
    freq = 10000.0 ** (-2.0 * np.arange(half) / width)
    angles = tt.reshape(-1, 1) * freq
    out = np.concatenate([np.sin(angles), np.cos(angles)], axis=1)
    return out[0] if scalar else out


def init_params(config: DenoiserConfig, rng: np.random.Generator) -> ParamStore:
    """Uniform(-1/sqrt(fan_in)) matrices, zero biases, identity layernorm."""
    E, H = config.embed_width, config.hidden_width
    hd = H // 2
    p = ParamStore()
    p.add("emb/fc1_w", uniform_init(rng, (E, 4 * E), E))
    p.add("emb/fc1_b", np.zeros(4 * E))
    p.add("emb/fc2_w", uniform_init(rng, (4 * E, 4 * E), 4 * E))
    p.add("emb/fc2_b", np.zeros(4 * E))
    p.add("emb/out_w", uniform_init(rng, (4 * E, 2 * H), 4 * E))
    p.add("emb/out_b", np.zeros(2 * H))
    width = config.input_width
    for layer in range(config.layers):
        for direction in ("fwd", "bwd"):
            base = f"rnn/l{layer}/{direction}"
            p.add(f"{base}/wx", uniform_init(rng, (width, 4 * hd), width))
            p.add(f"{base}/wh", uniform_init(rng, (hd, 4 * hd), hd))
            p.add(f"{base}/b", np.zeros(4 * hd))
        width = H
    p.add("ln/gain", np.ones(H))
    p.add("ln/bias", np.zeros(H))
    out_width = config.num_channels + sum(config.discrete_ks)
    p.add("out/w", uniform_init(rng, (H, out_width), H))
    p.add("out/b", np.zeros(out_width))
    return p


def pack_inputs(x_t: np.ndarray, channel_onehots: Sequence[np.ndarray]) -> np.ndarray:
    """Concatenate [B, P, L] numeric and [B, L, K_p] one-hots to [B, L, D]."""
    parts = []
    if x_t.shape[1]:
        parts.append(np.ascontiguousarray(x_t.transpose(0, 2, 1)))
    parts.extend(channel_onehots)
    return np.concatenate(parts, axis=-1) if len(parts) > 1 else parts[0]


def forward_batch(leaves: dict[str, Tensor], config: DenoiserConfig,
                  inputs: np.ndarray, t: np.ndarray):
    """Run the denoiser on packed inputs [B, L, D] with steps t [B].

    Returns (eps_pred, logit_slices) as Tensors: eps_pred [B, L, P]
    and one [B, L, K_p] slice per discrete channel.
    """
    B = inputs.shape[0]
    H = config.hidden_width
    # Batches often repeat step values (sampling uses a single t for the
    # whole batch), so the embedding MLP runs on the distinct ones only.
    uniq, inverse = np.unique(np.asarray(t, dtype=np.float64),
                              return_inverse=True)
    emb = sinusoidal_embed(uniq, config.embed_width)
    e = ad.gelu(ad.linear(Tensor(emb), leaves["emb/fc1_w"], leaves["emb/fc1_b"]))
    e = ad.silu(ad.linear(e, leaves["emb/fc2_w"], leaves["emb/fc2_b"]))
    ss = ad.linear(e, leaves["emb/out_w"], leaves["emb/out_b"])[inverse.reshape(B)]
    scale = ss[:, :H].reshape(B, 1, H)
    shift = ss[:, H:].reshape(B, 1, H)

    h: Tensor = Tensor(inputs)
    for layer in range(config.layers):
        fwd = ad.lstm_layer(h, leaves[f"rnn/l{layer}/fwd/wx"],
                            leaves[f"rnn/l{layer}/fwd/wh"],
                            leaves[f"rnn/l{layer}/fwd/b"])
        bwd = ad.lstm_layer(h, leaves[f"rnn/l{layer}/bwd/wx"],
                            leaves[f"rnn/l{layer}/bwd/wh"],
                            leaves[f"rnn/l{layer}/bwd/b"], reverse=True)
        h = ad.concat([fwd, bwd], axis=-1)
    h = ad.layer_norm(h, leaves["ln/gain"], leaves["ln/bias"])
    h = h * (scale + 1.0) + shift
    y = ad.linear(h, leaves["out/w"], leaves["out/b"])

    P = config.num_channels
    eps_pred = y[..., :P]
    logit_slices = []
    offset = P
    for k in config.discrete_ks:
        logit_slices.append(y[..., offset:offset + k])
        offset += k
    return eps_pred, logit_slices


def _normalize_discrete(c_t, config: DenoiserConfig) -> list[np.ndarray]:
    """Flatten OneHotSequence groups into one [L, K_p] array per channel."""
    if isinstance(c_t, OneHotSequence):
        c_t = [c_t]
    per_channel: list[np.ndarray] = []
    for group in c_t:
        values = group.values if isinstance(group, OneHotSequence) else np.asarray(group)
        for p in range(values.shape[0]):
            per_channel.append(values[p])
    if len(per_channel) != len(config.discrete_ks):
        raise ValueError(f"got {len(per_channel)} discrete channels, "
                         f"config declares {len(config.discrete_ks)}")
    for p, (arr, k) in enumerate(zip(per_channel, config.discrete_ks)):
        if arr.shape[-1] != k:
            raise ValueError(f"discrete channel {p} has K={arr.shape[-1]}, expected {k}")
    return per_channel


def forward(params: ParamStore, config: DenoiserConfig, x_t: np.ndarray,
            c_t, t: int) -> DenoiserOutput:
    """Single-sample forward pass; see forward_batch for the batched core."""
    x_t = np.asarray(x_t, dtype=np.float64)
    if x_t.ndim != 2 or x_t.shape[0] != config.num_channels:
        raise ValueError(f"x_t must be [{config.num_channels}, L]")
    channels = _normalize_discrete(c_t, config)
    inputs = pack_inputs(x_t[None], [arr[None] for arr in channels])
    with ad.no_grad():
        eps_pred, logit_slices = forward_batch(
            leaf_params(params, trainable=False), config, inputs,
            np.array([t]))
    return DenoiserOutput(
        eps_pred=np.ascontiguousarray(eps_pred.data[0].T),
        logits=tuple(sl.data[0] for sl in logit_slices))


def backward(params: ParamStore, config: DenoiserConfig, x_t: np.ndarray,
             c_t, t: int, d_eps: np.ndarray,
             d_logits: Sequence[np.ndarray]) -> dict[str, np.ndarray]:
    """Parameter gradients for given output gradients on one sample.

    d_eps is [P, L] matching eps_pred; d_logits holds one [L, K_p]
    array per discrete channel.
    """
    x_t = np.asarray(x_t, dtype=np.float64)
    channels = _normalize_discrete(c_t, config)
    leaves = leaf_params(params, trainable=True)
    inputs = pack_inputs(x_t[None], [arr[None] for arr in channels])
    eps_pred, logit_slices = forward_batch(leaves, config, inputs,
                                           np.array([t]))
    d_eps = np.asarray(d_eps, dtype=np.float64)
    total = None
    if config.num_channels:
        total = (eps_pred * np.ascontiguousarray(d_eps.T)[None]).sum()
    for sl, d in zip(logit_slices, d_logits):
        term = (sl * np.asarray(d, dtype=np.float64)[None]).sum()
        total = term if total is None else total + term
    total.backward()
    return collect_grads(params, leaves)
