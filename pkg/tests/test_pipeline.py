"""Training loop, loss assembly, checkpoint format and the sampler."""

import numpy as np
import pytest

from mixdiff import autodiff as ad
from mixdiff import pipeline as pl
from mixdiff.data import DataError, make_mixed_corpus, write_corpus
from mixdiff.denoiser import DenoiserConfig, init_params, pack_inputs
from mixdiff.gaussian import q_sample
from mixdiff.multinomial import marginal_probs, sample_categorical
from mixdiff.nn_core import NumericalError, RngHub, leaf_params, collect_grads
from mixdiff.schedule import cosine_schedule


@pytest.fixture(scope="module")
def corpus_path(tmp_path_factory):
    path = tmp_path_factory.mktemp("corpus") / "train.csv"
    samples = make_mixed_corpus(n=48, num_channels=2, cat_channels=1,
                                num_categories=2, length=10,
                                missing_rate=0.15, seed=21)
    write_corpus(path, samples)
    return path


def quick_config(corpus_path, tmp_path, **kw):
    defaults = dict(corpus=str(corpus_path), out=str(tmp_path / "m.ckpt"),
                    steps=4, diffusion_steps=16, batch=8, seed=13)
    defaults.update(kw)
    return pl.config_from_sources(**defaults)


class TestConfig:
    def test_file_values_and_overrides(self, tmp_path):
        cfg_file = tmp_path / "c.cfg"
        cfg_file.write_text("# comment\n\nsteps = 7\nlam=0.5\n"
                            "corpus=x.csv\ndiscrete_mode=numeric_codes\n")
        values = pl.load_config_file(cfg_file)
        cfg = pl.config_from_sources(values, steps=3, seed=9)
        assert cfg.steps == 3          # explicit override wins
        assert cfg.lam == 0.5          # file beats default
        assert cfg.seed == 9
        assert cfg.discrete_mode == "numeric_codes"

    def test_unknown_key_rejected(self, tmp_path):
        cfg_file = tmp_path / "c.cfg"
        cfg_file.write_text("stepz=7\n")
        with pytest.raises(ValueError, match="stepz"):
            pl.load_config_file(cfg_file)

    def test_not_key_value_rejected(self, tmp_path):
        cfg_file = tmp_path / "c.cfg"
        cfg_file.write_text("steps\n")
        with pytest.raises(ValueError, match="line 1"):
            pl.load_config_file(cfg_file)

    @pytest.mark.parametrize("bad", [
        dict(lam=-0.1), dict(steps=0), dict(diffusion_steps=1),
        dict(discrete_mode="onehot"), dict(ema_decay=1.0), dict(batch=0),
    ])
    def test_validation(self, bad):
        with pytest.raises(ValueError):
            pl.config_from_sources(corpus="x.csv", **bad)

    def test_corpus_required(self):
        with pytest.raises(ValueError, match="corpus"):
            pl.config_from_sources()


def _loss_setup(lam=0.01, t_values=(3, 3)):
    dn = DenoiserConfig(num_channels=1, discrete_ks=(2, 2), hidden_width=4,
                        embed_width=8)
    schedule = cosine_schedule(6)
    hub = RngHub(3)
    params = init_params(dn, hub.stream("init"))
    rng = hub.stream("data")
    B, L = len(t_values), 3
    x0 = rng.standard_normal((B, 1, L))
    eps = rng.standard_normal(x0.shape)
    t = np.array(t_values)
    x_t = q_sample(x0, t, eps, schedule)
    c0s, cts = [], []
    for k in dn.discrete_ks:
        c0 = np.eye(k)[rng.integers(0, k, size=(B, L))]
        c0s.append(c0)
        cts.append(sample_categorical(marginal_probs(c0, t, schedule), rng))
    return dn, schedule, params, (x_t, eps, cts, c0s, t), lam


class TestBatchLoss:
    def test_gradients_with_repeated_step_values(self):
        # two samples share t, so the step-embedding gather must
        # accumulate both gradient paths
        dn, schedule, params, batch, lam = _loss_setup(t_values=(3, 3))

        def value():
            leaves = leaf_params(params, trainable=False)
            loss, _, _ = pl.batch_loss(leaves, dn, schedule, lam, *batch)
            return float(loss.data)

        leaves = leaf_params(params, trainable=True)
        loss, _, _ = pl.batch_loss(leaves, dn, schedule, lam, *batch)
        loss.backward()
        grads = collect_grads(params, leaves)
        h = 1e-5
        for name in ("emb/fc1_w", "emb/out_b", "rnn/l0/fwd/wh", "ln/gain",
                     "out/w"):
            arr = params[name]
            flat = arr.reshape(-1)
            fd = np.zeros(flat.size)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + h
                hi = value()
                flat[i] = orig - h
                fd[i] = (hi - value()) / (2 * h)
                flat[i] = orig
            g = grads[name].reshape(-1)
            denom = max(np.abs(g).max(), np.abs(fd).max(), 1e-8)
            assert np.abs(g - fd).max() / denom < 1e-6, name

    def test_zero_weight_detaches_categorical_head(self):
        dn, schedule, params, batch, _ = _loss_setup(lam=0.0)
        leaves = leaf_params(params, trainable=True)
        loss, l_n, l_c = pl.batch_loss(leaves, dn, schedule, 0.0, *batch)
        loss.backward()
        grads = collect_grads(params, leaves)
        P = dn.num_channels
        assert np.all(grads["out/w"][:, P:] == 0.0)
        assert np.all(grads["out/b"][P:] == 0.0)
        assert np.any(grads["out/w"][:, :P] != 0.0)
        assert l_c == 0.0 and l_n == pytest.approx(float(loss.data))

    def test_t1_terms_use_reconstruction_likelihood(self):
        # at t=1 the loss must charge -log p(c0); with peaked logits the
        # categorical term collapses towards zero
        dn, schedule, params, batch, _ = _loss_setup(t_values=(1, 1))
        x_t, eps, cts, c0s, t = batch
        leaves = leaf_params(params, trainable=False)
        _, _, l_c = pl.batch_loss(leaves, dn, schedule, 1.0, x_t, eps,
                                  cts, c0s, t)
        assert l_c > 0.0
        T = schedule.total_steps
        # oracle: T * mean over channel slices of -log posterior at c0
        from mixdiff.multinomial import posterior_probs
        total = 0.0
        for ct, c0, logits in zip(cts, c0s, _forward_logits(params, dn,
                                                            x_t, cts, t)):
            probs = np.exp(logits) / np.exp(logits).sum(-1, keepdims=True)
            _, post = posterior_probs(ct, probs, t, schedule)
            total += -(c0 * np.log(post + 1e-12)).sum(-1).mean()
        assert l_c == pytest.approx(T * total / len(cts), rel=1e-9)


def _forward_logits(params, dn, x_t, cts, t):
    from mixdiff.denoiser import forward_batch
    with ad.no_grad():
        _, slices = forward_batch(leaf_params(params, trainable=False), dn,
                                  pack_inputs(x_t, cts), t)
    return [s.data for s in slices]


class TestTraining:
    def test_loss_decreases(self, corpus_path, tmp_path):
        cfg = quick_config(corpus_path, tmp_path, steps=60,
                           diffusion_steps=12, batch=16)
        state = pl.train(cfg)
        hist = state.loss_history
        assert np.mean(hist[-20:]) < np.mean(hist[:20])

    def test_same_seed_same_params(self, corpus_path, tmp_path):
        cfg_a = quick_config(corpus_path, tmp_path, out=str(tmp_path / "a.ckpt"))
        cfg_b = quick_config(corpus_path, tmp_path, out=str(tmp_path / "b.ckpt"))
        sa, sb = pl.train(cfg_a), pl.train(cfg_b)
        assert all(np.array_equal(sa.params[n], sb.params[n])
                   for n in sa.params.names())

    def test_resume_is_bit_exact(self, corpus_path, tmp_path):
        full = pl.train(quick_config(corpus_path, tmp_path, steps=6,
                                     out=str(tmp_path / "full.ckpt")))
        pl.train(quick_config(corpus_path, tmp_path, steps=3,
                              out=str(tmp_path / "half.ckpt")))
        cont = pl.train(quick_config(corpus_path, tmp_path, steps=6,
                                     out=str(tmp_path / "cont.ckpt")),
                        resume=str(tmp_path / "half.ckpt"))
        for n in full.params.names():
            assert np.array_equal(full.params[n], cont.params[n]), n
            assert np.array_equal(full.ema.shadow[n], cont.ema.shadow[n]), n
            assert np.array_equal(full.opt.m[n], cont.opt.m[n]), n
            assert np.array_equal(full.opt.v[n], cont.opt.v[n]), n
        assert full.hub.state() == cont.hub.state()
        assert full.opt.step == cont.opt.step == 6

    def test_nan_loss_aborts_keeping_last_checkpoint(self, corpus_path,
                                                     tmp_path):
        cfg = quick_config(corpus_path, tmp_path, steps=4, lr=1e150,
                           checkpoint_every=1)
        with np.errstate(all="ignore"):  # the blow-up is the point
            with pytest.raises(NumericalError, match="optimizer step 1"):
                pl.train(cfg)
        kept = pl.load_checkpoint(cfg.out)
        assert kept.opt.step == 1

    def test_resume_rejects_different_layout(self, corpus_path, tmp_path):
        pl.train(quick_config(corpus_path, tmp_path, steps=2,
                              out=str(tmp_path / "m.ckpt")))
        other = tmp_path / "other.csv"
        write_corpus(other, make_mixed_corpus(n=30, num_channels=1,
                                              cat_channels=1,
                                              num_categories=2, length=10,
                                              missing_rate=0.1, seed=5))
        cfg = quick_config(other, tmp_path, steps=4)
        with pytest.raises(DataError, match="layout"):
            pl.train(cfg, resume=str(tmp_path / "m.ckpt"))


class TestCheckpointFormat:
    def test_magic_rejected(self, tmp_path):
        bad = tmp_path / "x.ckpt"
        bad.write_bytes(b"NOTRIGHT" + b"\x00" * 64)
        with pytest.raises(DataError, match="magic"):
            pl.load_checkpoint(bad)

    def test_version_rejected(self, tmp_path):
        bad = tmp_path / "x.ckpt"
        bad.write_bytes(pl.MAGIC + (99).to_bytes(4, "little") + b"\x00" * 16)
        with pytest.raises(DataError, match="version 99"):
            pl.load_checkpoint(bad)

    def test_truncation_detected(self, corpus_path, tmp_path):
        cfg = quick_config(corpus_path, tmp_path, steps=2)
        pl.train(cfg)
        data = open(cfg.out, "rb").read()
        trunc = tmp_path / "trunc.ckpt"
        trunc.write_bytes(data[:len(data) // 2])
        with pytest.raises(DataError, match="truncated"):
            pl.load_checkpoint(trunc)

    def test_missing_file(self, tmp_path):
        with pytest.raises(DataError, match="no such checkpoint"):
            pl.load_checkpoint(tmp_path / "absent.ckpt")

    def test_mid_accumulation_save_refused(self, corpus_path, tmp_path):
        cfg = quick_config(corpus_path, tmp_path, steps=2)
        state = pl.train(cfg)
        state.acc.add_and_maybe_step(state.params, {
            n: np.zeros_like(state.params[n]) for n in state.params.names()
        }, state.opt)
        with pytest.raises(ValueError, match="mid-accumulation"):
            pl.save_checkpoint(tmp_path / "y.ckpt", state)


class TestSampling:
    def test_shapes_and_determinism(self, corpus_path, tmp_path):
        state = pl.train(quick_config(corpus_path, tmp_path, steps=3))
        a = pl.sample(state, n=5, seed=9)
        b = pl.sample(state, n=5, seed=9)
        c = pl.sample(state, n=5, seed=10)
        assert len(a) == 5
        for s in a:
            assert s.x.shape == (2, 10) and s.c.shape == (1, 10)
            assert set(np.unique(s.m)) <= {0, 1}
            assert np.isnan(s.x[s.m == 1]).all()
            assert np.isfinite(s.x[s.m == 0]).all()
        assert all(np.array_equal(np.nan_to_num(x.x), np.nan_to_num(y.x))
                   and np.array_equal(x.c, y.c) for x, y in zip(a, b))
        assert any(not np.array_equal(x.c, y.c)
                   or not np.array_equal(np.nan_to_num(x.x),
                                         np.nan_to_num(y.x))
                   for x, y in zip(a, c))

    def test_values_stay_in_reference_range(self, corpus_path, tmp_path):
        state = pl.train(quick_config(corpus_path, tmp_path, steps=3))
        lo, hi = state.stats.minimum, state.stats.maximum
        for s in pl.sample(state, n=4, seed=1):
            obs = np.where(s.m == 0, s.x, lo[:, None])
            assert np.all(obs >= lo[:, None] - 1e-12)
            assert np.all(obs <= hi[:, None] + 1e-12)

    def test_rounding_mode_round_trip(self, corpus_path, tmp_path):
        cfg = quick_config(corpus_path, tmp_path, steps=3,
                           discrete_mode="numeric_codes")
        state = pl.train(cfg)
        assert state.dn_config.discrete_ks == ()
        assert state.dn_config.num_channels == 5  # 2 num + 1 cat + 2 mask
        for s in pl.sample(state, n=4, seed=2):
            assert s.c.min() >= 0 and s.c.max() <= 1
            assert set(np.unique(s.m)) <= {0, 1}

    def test_n_validated(self, corpus_path, tmp_path):
        state = pl.train(quick_config(corpus_path, tmp_path, steps=2))
        with pytest.raises(ValueError, match=">= 1"):
            pl.sample(state, n=0, seed=0)


class TestGradcheckHarness:
    def test_clean_model_passes(self):
        report = pl.gradcheck(hidden=4, embed_width=8, length=2,
                              diffusion_steps=3, seed=1)
        assert report and max(report.values()) < pl.GRADCHECK_TOL

    def test_corrupted_gradient_is_named(self):
        report = pl.gradcheck(hidden=4, embed_width=8, length=2,
                              diffusion_steps=3, seed=1,
                              _corrupt="rnn/l0/fwd/wh")
        assert report["rnn/l0/fwd/wh"] > pl.GRADCHECK_TOL
        clean = {k: v for k, v in report.items() if k != "rnn/l0/fwd/wh"}
        assert max(clean.values()) < pl.GRADCHECK_TOL

    def test_unknown_corrupt_name_rejected(self):
        with pytest.raises(ValueError, match="unknown parameter group"):
            pl.gradcheck(hidden=4, embed_width=8, length=2,
                         diffusion_steps=3, _corrupt="nope")

    def test_size_guard(self):
        with pytest.raises(ValueError, match="too large"):
            pl.gradcheck(hidden=64, embed_width=128)
