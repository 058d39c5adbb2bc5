"""Fidelity and privacy scores for synthetic time-series corpora.

Three measures:

* discriminative score: train a GRU classifier to tell real from
  synthetic sequences; report |0.5 - held-out accuracy|, so 0 means
  indistinguishable.
* predictive score: train a GRU next-step regressor on the synthetic
  corpus, test it on held-out real data; report the mean absolute
  error on the [0, 1]-scaled numerical channels.
* nearest-neighbour adversarial accuracy (NNAA): compare
  leave-self-out nearest-neighbour distances within and across sets;
  the gap between the train-vs-synth and test-vs-synth quantities
  grows when the model memorizes training rows.

Sequences are embedded in one shared feature space: numerical channels
imputed and min-max scaled with the reference statistics, categorical
channels one-hot encoded, masks as 0/1 bits, everything standardized
per feature dimension.  Metric trainers are plain seeded Adam; a rerun
with the same seed is bit-identical.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial.distance import cdist

from . import autodiff as ad
from .autodiff import Tensor
from .data import (CorpusLayout, CorpusStats, TimeSeriesSample,
                   compute_stats, corpus_layout, impute_and_scale)
from .nn_core import (ParamStore, RngHub, adam_init, adam_step,
                      collect_grads, leaf_params, uniform_init)

LOG_FLOOR = 1e-12


@dataclass(frozen=True)
class MetricConfig:
    """Trainer settings shared by the two sequence-model metrics."""

    steps: int = 2000
    batch: int = 128
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    hidden: int | None = None  # default: 4x feature width
    test_fraction: float = 0.2
    seed: int = 0


class FeatureSpace:
    """Shared embedding of samples into standardized feature tensors."""

    def __init__(self, layout: CorpusLayout, stats: CorpusStats,
                 feat_mean: np.ndarray, feat_std: np.ndarray):
        self.layout = layout
        self.stats = stats
        self.feat_mean = feat_mean
        self.feat_std = feat_std

    @classmethod
    def from_corpus(cls, samples: list[TimeSeriesSample],
                    cat_ks: tuple[int, ...] | None = None,
                    stats: CorpusStats | None = None) -> "FeatureSpace":
        layout = corpus_layout(samples, cat_ks)
        if stats is None:
            stats = compute_stats(samples)
        raw = cls._raw_features(samples, layout, stats)
        flat = raw.reshape(-1, raw.shape[-1])
        mean = flat.mean(axis=0)
        std = np.maximum(flat.std(axis=0), 1e-8)
        return cls(layout, stats, mean, std)

    @staticmethod
    def _raw_features(samples: list[TimeSeriesSample], layout: CorpusLayout,
                      stats: CorpusStats) -> np.ndarray:
        n, L = len(samples), layout.length
        width = (layout.num_channels + sum(layout.cat_ks)
                 + layout.num_channels)
        out = np.empty((n, L, width))
        eyes = [np.eye(k) for k in layout.cat_ks]
        for i, s in enumerate(samples):
            if (s.x.shape[0] != layout.num_channels
                    or s.c.shape[0] != len(layout.cat_ks)
                    or s.length != L):
                raise ValueError(f"sample {i} does not match the layout")
            parts = [impute_and_scale(s.x, s.m, stats).T]
            for p, k in enumerate(layout.cat_ks):
                if s.c[p].max(initial=0) >= k:
                    raise ValueError(f"sample {i} categorical channel {p} "
                                     f"exceeds {k} categories")
                parts.append(eyes[p][s.c[p]])
            parts.append(s.m.T.astype(np.float64))
            out[i] = np.concatenate(parts, axis=1)
        return out

    def seq_features(self, samples: list[TimeSeriesSample]) -> np.ndarray:
        """Standardized per-step features, [n, L, D]."""
        raw = self._raw_features(samples, self.layout, self.stats)
        return (raw - self.feat_mean) / self.feat_std

    def flat_features(self, samples: list[TimeSeriesSample]) -> np.ndarray:
        """Whole sequences as standardized flat vectors, [n, L*D]."""
        feats = self.seq_features(samples)
        return feats.reshape(len(samples), -1)

    def scaled_numeric(self, samples: list[TimeSeriesSample]) -> np.ndarray:
        """Imputed, [0, 1]-scaled numerical channels as [n, L, P]."""
        return np.stack([impute_and_scale(s.x, s.m, self.stats).T
                         for s in samples])


# -- nearest-neighbour adversarial accuracy ----------------------------

def nn_distances(a: np.ndarray, b: np.ndarray,
                 exclude_self: bool = False) -> np.ndarray:
    """Distance from each row of a to its nearest neighbour in b.

    With exclude_self=True, a and b must be the same set; the diagonal
    is ignored so each row finds its nearest other row.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise ValueError("expected [n, d] arrays over one feature space")
    d = cdist(a, b)
    if exclude_self:
        if a.shape != b.shape:
            raise ValueError("exclude_self requires one set given twice")
        if a.shape[0] < 2:
            raise ValueError("need at least 2 rows to exclude self-matches")
        np.fill_diagonal(d, np.inf)
    return d.min(axis=1)


@dataclass(frozen=True)
class NNAAReport:
    aa_train: float
    aa_test: float
    value: float
    d_ts: np.ndarray
    d_st: np.ndarray
    d_es: np.ndarray
    d_se: np.ndarray
    d_tt: np.ndarray
    d_ss: np.ndarray
    d_ee: np.ndarray


def nnaa(train: np.ndarray, test: np.ndarray,
         synth: np.ndarray) -> NNAAReport:
    """Adversarial-accuracy gap between training and held-out data.

    All three sets must have the same number of rows.  Both halves of
    each adversarial accuracy ask: is a row's nearest neighbour in the
    other set farther than in its own set?  Values near 0.5 mean the
    sets interleave; aa_train far below aa_test flags memorization.
    """
    train = np.asarray(train, dtype=np.float64)
    test = np.asarray(test, dtype=np.float64)
    synth = np.asarray(synth, dtype=np.float64)
    n = train.shape[0]
    if test.shape[0] != n or synth.shape[0] != n:
        raise ValueError(f"set sizes differ: {n}, {test.shape[0]}, "
                         f"{synth.shape[0]}")
    d_ts = nn_distances(train, synth)
    d_st = nn_distances(synth, train)
    d_es = nn_distances(test, synth)
    d_se = nn_distances(synth, test)
    d_tt = nn_distances(train, train, exclude_self=True)
    d_ss = nn_distances(synth, synth, exclude_self=True)
    d_ee = nn_distances(test, test, exclude_self=True)
    aa_train = 0.5 * ((d_ts > d_tt).mean() + (d_st > d_ss).mean())
    aa_test = 0.5 * ((d_es > d_ee).mean() + (d_se > d_ss).mean())
    return NNAAReport(aa_train=float(aa_train), aa_test=float(aa_test),
                      value=float(abs(aa_test - aa_train)),
                      d_ts=d_ts, d_st=d_st, d_es=d_es, d_se=d_se,
                      d_tt=d_tt, d_ss=d_ss, d_ee=d_ee)


def nnaa_corpora(real_train: list[TimeSeriesSample],
                 real_test: list[TimeSeriesSample],
                 synth: list[TimeSeriesSample],
                 space: FeatureSpace | None = None) -> NNAAReport:
    if space is None:
        space = FeatureSpace.from_corpus(real_train)
    return nnaa(space.flat_features(real_train),
                space.flat_features(real_test),
                space.flat_features(synth))


# -- recurrent metric models -------------------------------------------

def _gru_init(rng: np.random.Generator, width_in: int, hidden: int,
              width_out: int) -> ParamStore:
    p = ParamStore()
    p.add("gru/wx", uniform_init(rng, (width_in, 3 * hidden), width_in))
    p.add("gru/wh", uniform_init(rng, (hidden, 3 * hidden), hidden))
    p.add("gru/b", np.zeros(3 * hidden))
    p.add("out/w", uniform_init(rng, (hidden, width_out), hidden))
    p.add("out/b", np.zeros(width_out))
    return p


def _gru_apply(leaves: dict[str, Tensor], x: np.ndarray) -> Tensor:
    h = ad.gru_layer(Tensor(x), leaves["gru/wx"], leaves["gru/wh"],
                     leaves["gru/b"])
    return ad.linear(h, leaves["out/w"], leaves["out/b"])


def _train_metric_model(params: ParamStore, loss_fn, batches,
                        cfg: MetricConfig) -> None:
    opt = adam_init(params, lr=cfg.lr, beta1=cfg.beta1, beta2=cfg.beta2)
    for batch in batches:
        leaves = leaf_params(params, trainable=True)
        loss = loss_fn(leaves, batch)
        loss.backward()
        adam_step(params, collect_grads(params, leaves), opt)


def _split(n: int, rng: np.random.Generator, test_fraction: float):
    perm = rng.permutation(n)
    cut = int(round(n * (1.0 - test_fraction)))
    if cut < 1 or cut >= n:
        raise ValueError(f"cannot split {n} samples with test fraction "
                         f"{test_fraction}")
    return perm[:cut], perm[cut:]


def discriminative_score(real: list[TimeSeriesSample],
                         synth: list[TimeSeriesSample],
                         cfg: MetricConfig = MetricConfig(),
                         space: FeatureSpace | None = None) -> float:
    """One classifier run; |0.5 - accuracy| on the held-out 20%."""
    if len(real) < 20 or len(synth) < 20:
        raise ValueError("need at least 20 samples per side")
    if space is None:
        space = FeatureSpace.from_corpus(real)
    fr = space.seq_features(real)
    fs = space.seq_features(synth)
    if fr.shape[1:] != fs.shape[1:]:
        raise ValueError("real and synthetic corpora have different layouts")
    hub = RngHub(cfg.seed)
    tr_r, te_r = _split(len(real), hub.stream("split"), cfg.test_fraction)
    tr_s, te_s = _split(len(synth), hub.stream("split"), cfg.test_fraction)
    hidden = cfg.hidden or 4 * fr.shape[-1]
    params = _gru_init(hub.stream("init"), fr.shape[-1], hidden, 1)
    half = max(cfg.batch // 2, 1)
    batch_rng = hub.stream("batch")
    labels = np.concatenate([np.ones(half), np.zeros(half)])[:, None]

    def batches():
        for _ in range(cfg.steps):
            ir = batch_rng.integers(0, len(tr_r), size=half)
            js = batch_rng.integers(0, len(tr_s), size=half)
            yield np.concatenate([fr[tr_r[ir]], fs[tr_s[js]]])

    def loss_fn(leaves, batch):
        logits = _gru_apply(leaves, batch)[:, -1]
        p = ad.sigmoid(logits)
        return -(labels * ad.log(p + LOG_FLOOR)
                 + (1.0 - labels) * ad.log(1.0 - p + LOG_FLOOR)).mean()

    _train_metric_model(params, loss_fn, batches(), cfg)

    with ad.no_grad():
        leaves = leaf_params(params, trainable=False)
        logit_r = _gru_apply(leaves, fr[te_r])[:, -1].data
        logit_s = _gru_apply(leaves, fs[te_s])[:, -1].data
    correct = np.concatenate([(logit_r > 0.0), (logit_s <= 0.0)])
    return float(abs(0.5 - correct.mean()))


def predictive_score(train_corpus: list[TimeSeriesSample],
                     test_corpus: list[TimeSeriesSample],
                     cfg: MetricConfig = MetricConfig(),
                     space: FeatureSpace | None = None) -> float:
    """Next-step MAE of a model fitted on train_corpus, on test_corpus.

    Inputs are the standardized features; targets are the scaled
    numerical channels one step ahead, predicted with a linear head.
    """
    if space is None:
        space = FeatureSpace.from_corpus(train_corpus)
    if space.layout.length < 2:
        raise ValueError("need at least 2 time steps for next-step prediction")
    if space.layout.num_channels < 1:
        raise ValueError("predictive score needs numerical channels")
    f_tr = space.seq_features(train_corpus)
    y_tr = space.scaled_numeric(train_corpus)
    f_te = space.seq_features(test_corpus)
    y_te = space.scaled_numeric(test_corpus)
    hub = RngHub(cfg.seed)
    hidden = cfg.hidden or 4 * f_tr.shape[-1]
    params = _gru_init(hub.stream("init"), f_tr.shape[-1], hidden,
                       space.layout.num_channels)
    batch_rng = hub.stream("batch")

    def batches():
        for _ in range(cfg.steps):
            idx = batch_rng.integers(0, len(train_corpus), size=cfg.batch)
            yield (f_tr[idx, :-1], y_tr[idx, 1:])

    def loss_fn(leaves, batch):
        x, y = batch
        pred = _gru_apply(leaves, x)
        return ad.absolute(pred - y).mean()

    _train_metric_model(params, loss_fn, batches(), cfg)

    with ad.no_grad():
        leaves = leaf_params(params, trainable=False)
        pred = _gru_apply(leaves, f_te[:, :-1]).data
    return float(np.abs(pred - y_te[:, 1:]).mean())
