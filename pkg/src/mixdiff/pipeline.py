"""Training, sampling and checkpointing for the mixed-type diffusion model.

The training loop draws one diffusion step t per sample, noises the
numerical channels with the closed-form Gaussian marginal and the
discrete channels with the categorical marginal, and minimizes
    L = L_N + lambda * L_C
where L_N is the mean squared error on the injected noise and L_C is
the T-weighted single-step estimate of the categorical ELBO (KL terms
for t >= 2, reconstruction log-likelihood at t = 1).

Discrete channels cover the categorical data plus one binary channel
per numerical channel for its missingness mask, so the model learns
missingness patterns jointly with values.  A checkpoint is one file
holding the config, schedule, raw/EMA parameters, optimizer moments
and named RNG stream states; training resumes from it bit-exactly.
"""

from __future__ import annotations

import dataclasses
import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import gaussian, multinomial
from .data import (CorpusLayout, CorpusStats, DataError, TimeSeriesSample,
                   compute_stats, corpus_layout, impute_and_scale, descale,
                   read_corpus, stats_from_sidecar, write_corpus)
from .denoiser import (DenoiserConfig, default_hidden_width, forward_batch,
                       init_params, pack_inputs)
from .multinomial import marginal_probs, posterior_probs, sample_categorical
from .nn_core import (AdamState, EmaState, GradAccumulator, NumericalError,
                      ParamStore, RngHub, adam_init, collect_grads, ema_init,
                      ema_update, leaf_params)
from .schedule import DiffusionSchedule, cosine_schedule

DISCRETE_MODES = ("multinomial", "numeric_codes")


@dataclass
class TrainConfig:
    """Training hyperparameters; defaults follow the reference recipe."""

    corpus: str = ""
    out: str = "model.ckpt"
    steps: int = 20000              # optimizer-step budget
    diffusion_steps: int = 1000
    lam: float = 0.01               # weight of the categorical loss
    lr: float = 8e-5
    beta1: float = 0.9
    beta2: float = 0.99
    ema_decay: float = 0.995
    accumulation: int = 2
    batch: int = 32
    layers: int = 2
    hidden_multiple: int = 4
    hidden: int = 0                 # explicit width; 0 = multiple of input
    embed_width: int = 128
    seed: int = 0
    discrete_mode: str = "multinomial"
    checkpoint_every: int = 0       # optimizer steps; 0 = final only
    log_every: int = 500            # micro-batches between log lines

    def validate(self) -> None:
        if not self.corpus:
            raise ValueError("a training corpus path is required")
        if self.diffusion_steps < 2:
            raise ValueError("diffusion_steps must be >= 2")
        if self.lam < 0.0:
            raise ValueError("lambda must be >= 0")
        if self.steps < 1 or self.batch < 1 or self.accumulation < 1:
            raise ValueError("steps, batch and accumulation must be >= 1")
        if self.discrete_mode not in DISCRETE_MODES:
            raise ValueError(f"discrete_mode must be one of {DISCRETE_MODES}")
        if not 0.0 <= self.ema_decay < 1.0:
            raise ValueError("ema_decay must be in [0, 1)")


def load_config_file(path) -> dict[str, str]:
    """Flat key=value config file; '#' starts a comment line."""
    entries: dict[str, str] = {}
    names = {f.name for f in dataclasses.fields(TrainConfig)}
    for ln, line in enumerate(Path(path).read_text().splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ValueError(f"{path} line {ln}: expected key=value")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in names:
            raise ValueError(f"{path} line {ln}: unknown config key {key!r}")
        entries[key] = value
    return entries


def config_from_sources(file_values: dict[str, str] | None = None,
                        **overrides) -> TrainConfig:
    """Defaults, then config-file values, then explicit overrides."""
    kwargs: dict = {}
    types = {f.name: f.type for f in dataclasses.fields(TrainConfig)}
    for key, raw in (file_values or {}).items():
        t = types[key]
        kwargs[key] = (raw if t == "str"
                       else float(raw) if t == "float" else int(raw))
    for key, value in overrides.items():
        if value is not None:
            kwargs[key] = value
    cfg = TrainConfig(**kwargs)
    cfg.validate()
    return cfg


@dataclass
class ModelState:
    """Everything a training step touches, bundled for checkpointing."""

    config: TrainConfig
    layout: CorpusLayout
    stats: CorpusStats
    dn_config: DenoiserConfig
    schedule: DiffusionSchedule
    params: ParamStore
    opt: AdamState
    ema: EmaState
    acc: GradAccumulator
    hub: RngHub
    loss_history: list = field(default_factory=list)


def _denoiser_config(config: TrainConfig, layout: CorpusLayout) -> DenoiserConfig:
    if config.discrete_mode == "multinomial":
        num = layout.num_channels
        ks = tuple(layout.cat_ks) + (2,) * layout.num_channels
    else:
        # Rounding variant: categories and masks become numeric channels.
        num = layout.num_channels + len(layout.cat_ks) + layout.num_channels
        ks = ()
    hidden = config.hidden or config.hidden_multiple * (num + sum(ks))
    return DenoiserConfig(num_channels=num, discrete_ks=ks,
                          hidden_width=hidden,
                          embed_width=config.embed_width,
                          layers=config.layers)


def init_state(config: TrainConfig, layout: CorpusLayout,
               stats: CorpusStats) -> ModelState:
    config.validate()
    dn_config = _denoiser_config(config, layout)
    hub = RngHub(config.seed)
    params = init_params(dn_config, hub.stream("init"))
    opt = adam_init(params, lr=config.lr, beta1=config.beta1,
                    beta2=config.beta2)
    return ModelState(config=config, layout=layout, stats=stats,
                      dn_config=dn_config,
                      schedule=cosine_schedule(config.diffusion_steps),
                      params=params, opt=opt,
                      ema=ema_init(params, config.ema_decay),
                      acc=GradAccumulator(config.accumulation), hub=hub)


def _training_arrays(samples: list[TimeSeriesSample], layout: CorpusLayout,
                     stats: CorpusStats, mode: str):
    """Model-space arrays: scaled numerics and per-channel one-hots.

    Returns (x0 [n, P, L], onehots list of [n, L, K]).  In the
    rounding variant everything lands in x0 and the list is empty.
    """
    n = len(samples)
    scaled = np.stack([impute_and_scale(s.x, s.m, stats) for s in samples])
    if mode == "multinomial":
        onehots = []
        for p, k in enumerate(layout.cat_ks):
            eye = np.eye(k)
            onehots.append(np.stack([eye[s.c[p]] for s in samples]))
        eye2 = np.eye(2)
        for p in range(layout.num_channels):
            onehots.append(np.stack([eye2[s.m[p]] for s in samples]))
        return scaled, onehots
    parts = [scaled]
    for p, k in enumerate(layout.cat_ks):
        codes = np.stack([s.c[p] for s in samples]).astype(np.float64)
        parts.append((codes / (k - 1))[:, None, :])
    for p in range(layout.num_channels):
        parts.append(np.stack([s.m[p] for s in samples]
                              ).astype(np.float64)[:, None, :])
    return np.concatenate(parts, axis=1), []


def batch_loss(leaves, dn_config: DenoiserConfig, schedule: DiffusionSchedule,
               lam: float, x_t: np.ndarray, eps: np.ndarray,
               ct_list: list[np.ndarray], c0_list: list[np.ndarray],
               t: np.ndarray):
    """Joint loss of one micro-batch; returns (loss, l_n, l_c) floats taped.

    x_t, eps are [B, P, L]; each discrete channel contributes [B, L, K]
    noisy and clean one-hots; t holds one step index per sample.
    """
    inputs = pack_inputs(x_t, ct_list)
    eps_pred, logit_slices = forward_batch(leaves, dn_config, inputs, t)
    loss = None
    l_n = 0.0
    if dn_config.num_channels:
        target = np.ascontiguousarray(eps.transpose(0, 2, 1))
        d = eps_pred - target
        loss = (d * d).mean()
        l_n = float(loss.data)
    l_c = 0.0
    if lam > 0.0 and dn_config.discrete_ks:
        T = schedule.total_steps
        at_t1 = (t == 1).astype(np.float64)[:, None]
        total = None
        for ct, c0, logits in zip(ct_list, c0_list, logit_slices):
            c0_est = ad.softmax(logits, axis=-1)
            _, p = posterior_probs(ct, c0_est, t, schedule)
            _, q = posterior_probs(ct, c0, t, schedule)
            kl = multinomial.kl_to_model(q, p)
            nll = multinomial.nll_slices(c0, p)
            term = (at_t1 * nll + (1.0 - at_t1) * kl).sum()
            total = term if total is None else total + term
        slices = len(ct_list) * x_t.shape[0] * x_t.shape[2]
        disc = total * (float(T) / slices)
        l_c = float(disc.data)
        loss = disc if loss is None else loss + lam * disc
    if loss is None:
        raise ValueError("model has neither numerical nor discrete channels")
    return loss, l_n, l_c


def _load_corpus_for_training(config: TrainConfig):
    samples = read_corpus(config.corpus)
    if not samples:
        raise DataError(f"{config.corpus}: corpus has no samples")
    cat_ks = None
    sidecar = Path(str(config.corpus) + ".stats")
    stats = None
    if sidecar.exists():
        stats, cat_ks = stats_from_sidecar(sidecar)
    layout = corpus_layout(samples, cat_ks)
    if stats is None or layout.num_channels == 0:
        stats = compute_stats(samples)
    return samples, layout, stats


def train(config: TrainConfig, resume: str | None = None,
          log=None) -> ModelState:
    """Run the configured number of optimizer steps; returns final state.

    With resume, training continues from the checkpoint's exact RNG and
    optimizer state; config values other than the step budget, output
    path and logging cadence are taken from the checkpoint.
    """
    samples, layout, stats = _load_corpus_for_training(config)
    if resume is not None:
        state = load_checkpoint(resume)
        for name in ("steps", "out", "checkpoint_every", "log_every"):
            setattr(state.config, name, getattr(config, name))
        state.config.corpus = config.corpus
        if state.layout != layout:
            raise DataError(f"{config.corpus}: layout differs from the "
                            "checkpointed corpus")
    else:
        state = init_state(config, layout, stats)
    config = state.config

    x0_all, onehot_all = _training_arrays(samples, layout, state.stats,
                                          config.discrete_mode)
    n = len(samples)
    T = state.schedule.total_steps
    batch_rng = state.hub.stream("batch")
    step_rng = state.hub.stream("steps")
    noise_rng = state.hub.stream("noise")
    cat_rng = state.hub.stream("cat")
    micro = 0
    saved_any = False
    while state.opt.step < config.steps:
        idx = batch_rng.integers(0, n, size=config.batch)
        t = step_rng.integers(1, T + 1, size=config.batch)
        x0 = x0_all[idx]
        eps = noise_rng.standard_normal(x0.shape)
        x_t = gaussian.q_sample(x0, t, eps, state.schedule)
        c0_list = [oh[idx] for oh in onehot_all]
        ct_list = [sample_categorical(marginal_probs(c0, t, state.schedule),
                                      cat_rng) for c0 in c0_list]
        leaves = leaf_params(state.params, trainable=True)
        loss, l_n, l_c = batch_loss(leaves, state.dn_config, state.schedule,
                                    config.lam, x_t, eps, ct_list, c0_list, t)
        value = float(loss.data)
        if not np.isfinite(value):
            raise NumericalError(
                f"loss became non-finite at optimizer step {state.opt.step} "
                + ("(last checkpoint retained)" if saved_any
                   else "(no checkpoint written yet)"))
        loss.backward()
        stepped = state.acc.add_and_maybe_step(
            state.params, collect_grads(state.params, leaves), state.opt)
        if stepped:
            ema_update(state.ema, state.params)
            if (config.checkpoint_every
                    and state.opt.step % config.checkpoint_every == 0
                    and state.opt.step < config.steps):
                save_checkpoint(config.out, state)
                saved_any = True
        state.loss_history.append(value)
        micro += 1
        if log is not None and micro % config.log_every == 0:
            log(f"step {state.opt.step}/{config.steps} "
                f"loss {value:.5f} (mse {l_n:.5f}, cat {l_c:.5f})")
    save_checkpoint(config.out, state)
    return state


# -- checkpoint container ----------------------------------------------

MAGIC = b"MXDFCKPT"
FORMAT_VERSION = 1


def _tensor_block(name: str, arr: np.ndarray) -> bytes:
    data = np.ascontiguousarray(arr, dtype="<f8")
    nb = name.encode("utf-8")
    head = struct.pack("<I", len(nb)) + nb
    head += struct.pack("<B", data.ndim)
    head += struct.pack(f"<{data.ndim}Q", *data.shape) if data.ndim else b""
    return head + data.tobytes()


def save_checkpoint(path, state: ModelState) -> None:
    """Single-file snapshot; written atomically via a temp file."""
    if state.acc.pending:
        raise ValueError("refusing to checkpoint mid-accumulation")
    meta = {
        "config": dataclasses.asdict(state.config),
        "layout": {"num_channels": state.layout.num_channels,
                   "cat_ks": list(state.layout.cat_ks),
                   "length": state.layout.length},
        "rng": state.hub.state(),
        "seed": state.hub.seed,
        "opt_step": state.opt.step,
        "adam": {"lr": state.opt.lr, "beta1": state.opt.beta1,
                 "beta2": state.opt.beta2, "eps": state.opt.eps},
        "ema_decay": state.ema.decay,
    }
    blob = json.dumps(meta, sort_keys=True).encode("utf-8")
    tensors: list[tuple[str, np.ndarray]] = []
    for name, arr in state.params.items():
        tensors.append((f"param/{name}", arr))
    for name, arr in state.ema.shadow.items():
        tensors.append((f"ema/{name}", arr))
    for name, arr in state.opt.m.items():
        tensors.append((f"opt_m/{name}", arr))
    for name, arr in state.opt.v.items():
        tensors.append((f"opt_v/{name}", arr))
    sched = state.schedule
    tensors += [("schedule/beta", sched.beta), ("schedule/alpha", sched.alpha),
                ("schedule/alpha_bar", sched.alpha_bar),
                ("schedule/posterior_var", sched.posterior_var),
                ("stats/minimum", state.stats.minimum),
                ("stats/maximum", state.stats.maximum),
                ("stats/mean", state.stats.mean)]
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", FORMAT_VERSION))
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        fh.write(struct.pack("<I", len(tensors)))
        for name, arr in tensors:
            fh.write(_tensor_block(name, arr))
    os.replace(tmp, path)


def _read_exact(fh, n: int, what: str) -> bytes:
    data = fh.read(n)
    if len(data) != n:
        raise DataError(f"checkpoint truncated while reading {what}")
    return data


def load_checkpoint(path) -> ModelState:
    path = Path(path)
    if not path.exists():
        raise DataError(f"no such checkpoint: {path}")
    with open(path, "rb") as fh:
        if _read_exact(fh, len(MAGIC), "magic") != MAGIC:
            raise DataError(f"{path}: not a checkpoint file (bad magic)")
        version = struct.unpack("<I", _read_exact(fh, 4, "version"))[0]
        if version != FORMAT_VERSION:
            raise DataError(f"{path}: unsupported checkpoint format version "
                            f"{version} (expected {FORMAT_VERSION})")
        blob_len = struct.unpack("<Q", _read_exact(fh, 8, "header"))[0]
        try:
            meta = json.loads(_read_exact(fh, blob_len, "metadata"))
        except json.JSONDecodeError as exc:
            raise DataError(f"{path}: corrupt metadata block") from exc
        count = struct.unpack("<I", _read_exact(fh, 4, "tensor count"))[0]
        tensors: dict[str, np.ndarray] = {}
        for _ in range(count):
            name_len = struct.unpack("<I", _read_exact(fh, 4, "name"))[0]
            name = _read_exact(fh, name_len, "name").decode("utf-8")
            ndim = struct.unpack("<B", _read_exact(fh, 1, "rank"))[0]
            shape = struct.unpack(f"<{ndim}Q", _read_exact(fh, 8 * ndim,
                                                           "shape"))
            size = int(np.prod(shape)) if ndim else 1
            raw = _read_exact(fh, 8 * size, f"tensor {name}")
            tensors[name] = np.frombuffer(raw, dtype="<f8").reshape(shape).copy()

    config = TrainConfig(**meta["config"])
    layout = CorpusLayout(num_channels=meta["layout"]["num_channels"],
                          cat_ks=tuple(meta["layout"]["cat_ks"]),
                          length=meta["layout"]["length"])
    stats = CorpusStats(minimum=tensors["stats/minimum"],
                        maximum=tensors["stats/maximum"],
                        mean=tensors["stats/mean"])
    schedule = DiffusionSchedule(beta=tensors["schedule/beta"],
                                 alpha=tensors["schedule/alpha"],
                                 alpha_bar=tensors["schedule/alpha_bar"],
                                 posterior_var=tensors["schedule/posterior_var"])
    dn_config = _denoiser_config(config, layout)

    def unpack(prefix: str) -> ParamStore:
        store = ParamStore()
        plen = len(prefix)
        for name, arr in tensors.items():
            if name.startswith(prefix):
                store.add(name[plen:], arr)
        return store

    params = unpack("param/")
    opt = AdamState(lr=meta["adam"]["lr"], beta1=meta["adam"]["beta1"],
                    beta2=meta["adam"]["beta2"], eps=meta["adam"]["eps"],
                    step=meta["opt_step"], m=unpack("opt_m/"),
                    v=unpack("opt_v/"))
    ema = EmaState(decay=meta["ema_decay"], shadow=unpack("ema/"))
    hub = RngHub(meta["seed"])
    hub.restore(meta["rng"])
    return ModelState(config=config, layout=layout, stats=stats,
                      dn_config=dn_config, schedule=schedule, params=params,
                      opt=opt, ema=ema,
                      acc=GradAccumulator(config.accumulation), hub=hub)


# -- sampling -----------------------------------------------------------

def sample(state: ModelState, n: int, seed: int) -> list[TimeSeriesSample]:
    """Draw n synthetic samples with the EMA parameters.

    Runs the full reverse chain; the Gaussian branch adds posterior
    noise except at the final step, the categorical branch draws from
    its posterior with an argmax at the final step.  Numerical output
    is clipped to [0, 1], mapped back to data scale, and entries whose
    generated mask says missing are reported as missing.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    config, layout = state.config, state.layout
    dn_config = state.dn_config
    schedule = state.schedule
    T = schedule.total_steps
    hub = RngHub(seed)
    leaves = leaf_params(state.ema.shadow, trainable=False)
    L = layout.length
    P = dn_config.num_channels
    x = hub.stream("init_x").standard_normal((n, P, L))
    ct_list = []
    init_c = hub.stream("init_c")
    for k in dn_config.discrete_ks:
        uniform = np.full((n, L, k), 1.0 / k)
        ct_list.append(sample_categorical(uniform, init_c))
    z_rng = hub.stream("gauss_step")
    cat_rng = hub.stream("cat_step")
    with ad.no_grad():
        for t in range(T, 0, -1):
            inputs = pack_inputs(x, ct_list)
            eps_pred, logit_slices = forward_batch(
                leaves, dn_config, inputs, np.full(n, t))
            eps_hat = eps_pred.data.transpose(0, 2, 1)
            z = z_rng.standard_normal(x.shape) if t > 1 else 0.0
            x = gaussian.p_sample_step(x, eps_hat, t, z, schedule)
            next_cts = []
            for ct, logits in zip(ct_list, logit_slices):
                c0_est = ad.softmax(logits.data, axis=-1)
                _, post = posterior_probs(ct, c0_est, t, schedule)
                if t == 1:
                    pick = np.argmax(post, axis=-1)
                    next_cts.append(np.eye(ct.shape[-1])[pick])
                else:
                    next_cts.append(sample_categorical(post, cat_rng))
            ct_list = next_cts
    x = np.clip(x, 0.0, 1.0)
    return _decode_samples(x, ct_list, state)


def _decode_samples(x: np.ndarray, ct_list: list[np.ndarray],
                    state: ModelState) -> list[TimeSeriesSample]:
    layout, stats = state.layout, state.stats
    p_num, p_cat = layout.num_channels, len(layout.cat_ks)
    n = x.shape[0]
    if state.config.discrete_mode == "multinomial":
        values = np.stack([descale(x[i, :p_num], stats) for i in range(n)]) \
            if p_num else np.zeros((n, 0, layout.length))
        codes = [np.argmax(ct, axis=-1) for ct in ct_list]
        cats = (np.stack(codes[:p_cat], axis=1) if p_cat
                else np.zeros((n, 0, layout.length), dtype=np.int64))
        masks = (np.stack(codes[p_cat:], axis=1) if p_num
                 else np.zeros((n, 0, layout.length), dtype=np.int64))
    else:
        values = np.stack([descale(x[i, :p_num], stats) for i in range(n)]) \
            if p_num else np.zeros((n, 0, layout.length))
        cats = np.zeros((n, p_cat, layout.length), dtype=np.int64)
        for j, k in enumerate(layout.cat_ks):
            cats[:, j] = np.rint(x[:, p_num + j] * (k - 1)).astype(np.int64)
        masks = np.rint(x[:, p_num + p_cat:]).astype(np.int64)
    out = []
    for i in range(n):
        xv = values[i].copy()
        xv[masks[i] == 1] = np.nan
        out.append(TimeSeriesSample(x=xv, c=cats[i], m=masks[i]))
    return out


def sample_to_file(checkpoint_path, n: int, seed: int, out_path) -> list[TimeSeriesSample]:
    state = load_checkpoint(checkpoint_path)
    samples = sample(state, n, seed)
    write_corpus(out_path, samples)
    return samples


# -- gradient check -------------------------------------------------------

GRADCHECK_PARAM_LIMIT = 20_000
GRADCHECK_TOL = 1e-4


def gradcheck(num_channels: int = 1, cat_channels: int = 1,
              num_categories: int = 2, length: int = 3, hidden: int = 8,
              embed_width: int = 16, seed: int = 0, diffusion_steps: int = 5,
              lam: float = 0.01, _corrupt: str | None = None) -> dict[str, float]:
    """Compare analytic parameter gradients of the full training loss
    against central finite differences at a random point.

    Returns the max relative error per parameter tensor.  The _corrupt
    hook perturbs one analytic gradient entry to prove the comparison
    can fail; it exists for tests only.
    """
    ks = (num_categories,) * cat_channels + (2,) * num_channels
    dn_config = DenoiserConfig(num_channels=num_channels, discrete_ks=ks,
                               hidden_width=hidden, embed_width=embed_width)
    hub = RngHub(seed)
    params = init_params(dn_config, hub.stream("init"))
    if params.count() >= GRADCHECK_PARAM_LIMIT:
        raise ValueError(
            f"model too large for finite differences ({params.count()} "
            f"parameters, limit {GRADCHECK_PARAM_LIMIT}); shrink hidden or "
            "embedding width")
    schedule = cosine_schedule(max(diffusion_steps, 2))
    B = 2
    rng = hub.stream("data")
    x0 = rng.standard_normal((B, num_channels, length))
    eps = rng.standard_normal(x0.shape)
    t = np.array([1, schedule.total_steps])[:B]
    x_t = gaussian.q_sample(x0, t, eps, schedule)
    c0_list = []
    ct_list = []
    for k in ks:
        c0 = np.eye(k)[rng.integers(0, k, size=(B, length))]
        probs = marginal_probs(c0, t, schedule)
        c0_list.append(c0)
        ct_list.append(sample_categorical(probs, rng))

    def loss_value() -> float:
        leaves = leaf_params(params, trainable=False)
        loss, _, _ = batch_loss(leaves, dn_config, schedule, lam,
                                x_t, eps, ct_list, c0_list, t)
        return float(loss.data)

    leaves = leaf_params(params, trainable=True)
    loss, _, _ = batch_loss(leaves, dn_config, schedule, lam,
                            x_t, eps, ct_list, c0_list, t)
    loss.backward()
    grads = collect_grads(params, leaves)
    if _corrupt is not None:
        if _corrupt not in grads:
            raise ValueError(f"unknown parameter group {_corrupt!r}")
        grads[_corrupt] = grads[_corrupt] + 1.0

    h = 1e-5
    report: dict[str, float] = {}
    for name in params.names():
        arr = params[name]
        fd = np.zeros_like(arr)
        flat = arr.reshape(-1)
        fd_flat = fd.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            hi = loss_value()
            flat[i] = orig - h
            lo = loss_value()
            flat[i] = orig
            fd_flat[i] = (hi - lo) / (2.0 * h)
        g = grads[name]
        denom = max(np.abs(g).max(initial=0.0), np.abs(fd).max(initial=0.0),
                    1e-8)
        report[name] = float(np.abs(g - fd).max(initial=0.0) / denom)
    return report
