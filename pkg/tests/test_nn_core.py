import numpy as np
import pytest

from mixdiff.nn_core import (AdamState, EmaState, GradAccumulator,
                             NumericalError, ParamStore, RngHub, adam_init,
                             adam_step, ema_init, ema_update)


def make_params(rng, shapes={"a": (3, 2), "b": (4,)}):
    return ParamStore({k: rng.standard_normal(s) for k, s in shapes.items()})


def test_param_store_basics(rng):
    p = make_params(rng)
    assert p.names() == ["a", "b"]
    assert p.count() == 10
    with pytest.raises(ValueError):
        p.add("a", np.zeros(2))
    with pytest.raises(KeyError):
        p["missing"] = np.zeros(2)
    with pytest.raises(ValueError):
        p["a"] = np.zeros((2, 2))
    q = p.copy()
    q["a"] = np.zeros((3, 2))
    assert not np.array_equal(p["a"], q["a"])


def test_adam_first_step_closed_form():
    p = ParamStore({"w": np.array([0.0])})
    st = adam_init(p, lr=0.001)
    adam_step(p, {"w": np.array([1.0])}, st)
    # Bias correction cancels at step one: update is -lr * g / (|g| + eps).
    assert np.allclose(p["w"], -0.001 / (1.0 + 1e-8), rtol=0, atol=1e-18)
    assert st.step == 1


def test_adam_matches_reference_trajectory(rng):
    p = make_params(rng)
    q = p.copy()
    st = adam_init(p, lr=3e-3, beta1=0.9, beta2=0.99, eps=1e-8)
    m = {k: np.zeros_like(v) for k, v in q.items()}
    v = {k: np.zeros_like(vv) for k, vv in q.items()}
    for step in range(1, 51):
        grads = {k: rng.standard_normal(p[k].shape) for k in p}
        adam_step(p, grads, st)
        for k in q:
            m[k] = 0.9 * m[k] + 0.1 * grads[k]
            v[k] = 0.99 * v[k] + 0.01 * grads[k] ** 2
            mhat = m[k] / (1.0 - 0.9 ** step)
            vhat = v[k] / (1.0 - 0.99 ** step)
            q[k] = q[k] - 3e-3 * mhat / (np.sqrt(vhat) + 1e-8)
    for k in p:
        assert np.allclose(p[k], q[k], rtol=0, atol=1e-15)


def test_adam_rejects_nonfinite_gradient(rng):
    p = make_params(rng)
    st = adam_init(p)
    bad = {"a": np.full((3, 2), np.nan), "b": np.zeros(4)}
    with pytest.raises(NumericalError, match="'a'"):
        adam_step(p, bad, st)


def test_ema_closed_form():
    p = ParamStore({"w": np.array([1.0])})
    ema = EmaState(decay=0.995, shadow=ParamStore({"w": np.array([0.0])}))
    for n in range(1, 201):
        ema_update(ema, p)
        assert np.allclose(ema.shadow["w"], 1.0 - 0.995 ** n, rtol=1e-12)


def test_ema_init_copies(rng):
    p = make_params(rng)
    ema = ema_init(p, decay=0.9)
    assert np.array_equal(ema.shadow["a"], p["a"])
    ema_update(ema, p)
    assert np.allclose(ema.shadow["a"], p["a"])


def test_accumulation_equals_mean_gradient_step(rng):
    p1 = make_params(rng)
    p2 = p1.copy()
    st1, st2 = adam_init(p1, lr=1e-3), adam_init(p2, lr=1e-3)
    acc = GradAccumulator(period=2)
    g1 = {k: rng.standard_normal(p1[k].shape) for k in p1}
    g2 = {k: rng.standard_normal(p1[k].shape) for k in p1}
    assert not acc.add_and_maybe_step(p1, g1, st1)
    assert acc.pending == 1
    assert acc.add_and_maybe_step(p1, g2, st1)
    assert acc.pending == 0
    adam_step(p2, {k: 0.5 * (g1[k] + g2[k]) for k in p2}, st2)
    for k in p1:
        assert np.array_equal(p1[k], p2[k])
    assert st1.step == 1


def test_accumulation_period_one_is_plain_adam(rng):
    p1 = make_params(rng)
    p2 = p1.copy()
    st1, st2 = adam_init(p1), adam_init(p2)
    acc = GradAccumulator(period=1)
    g = {k: rng.standard_normal(p1[k].shape) for k in p1}
    assert acc.add_and_maybe_step(p1, g, st1)
    adam_step(p2, g, st2)
    for k in p1:
        assert np.array_equal(p1[k], p2[k])


def test_rng_hub_streams_are_independent_and_restorable():
    hub = RngHub(42)
    a = hub.stream("noise").standard_normal(5)
    b = hub.stream("steps").standard_normal(5)
    assert not np.allclose(a, b)
    # Same stream object on repeat lookup.
    assert hub.stream("noise") is hub.stream("noise")

    hub2 = RngHub(42)
    assert np.array_equal(hub2.stream("noise").standard_normal(5), a)

    state = hub.state()
    x1 = hub.stream("noise").standard_normal(7)
    hub.restore(state)
    x2 = hub.stream("noise").standard_normal(7)
    assert np.array_equal(x1, x2)

    # Restoring into a fresh hub replays the same tail.
    hub3 = RngHub(42)
    hub3.stream("noise").standard_normal(5)
    hub3.stream("steps")
    hub3.restore(state)
    assert np.array_equal(hub3.stream("noise").standard_normal(7), x1)


def test_rng_hub_different_seeds_differ():
    assert not np.array_equal(RngHub(1).stream("s").standard_normal(4),
                              RngHub(2).stream("s").standard_normal(4))
