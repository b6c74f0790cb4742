import math

import numpy as np
import pytest

from cellattn import autodiff as ad
from cellattn import datagen
from cellattn.cells import ModelSpec
from cellattn.kernels import sigmoid
from cellattn.training import (SGD, Adam, DivergenceError, TrainConfig, clip_by_global_norm, init_params,
                               stream, train)


def scalar_adam(gs, lr=1e-3, b1=0.9, b2=0.999, eps=1e-8, x0=0.0):
    """Textbook Adam on one scalar, written out step by step."""
    x, m, v = x0, 0.0, 0.0
    out = []
    for t, g in enumerate(gs, start=1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        m_hat = m / (1 - b1 ** t)
        v_hat = v / (1 - b2 ** t)
        x = x - lr * m_hat / (math.sqrt(v_hat) + eps)
        out.append(x)
    return out


def test_adam_matches_scalar_reference():
    grads = np.array([[0.3, -2.0, 1e-3], [0.1, -1.0, 5.0], [-0.4, 0.0, 2.0], [0.2, 3.0, -1.0]])
    p = {"w": ad.tensor(np.zeros(3))}
    opt = Adam(lr=0.01)
    history = []
    for g in grads:
        opt.step(p, {"w": g})
        history.append(p["w"].data.copy())
    for j in range(3):
        expected = scalar_adam(grads[:, j], lr=0.01)
        np.testing.assert_allclose([h[j] for h in history], expected, rtol=1e-14, atol=1e-17)


def test_adam_first_step_is_lr_times_sign():
    g = np.array([4.0, -0.5, 1e-3])
    p = {"w": ad.tensor(np.ones(3))}
    Adam(lr=0.1).step(p, {"w": g})
    # bias correction makes the first update lr * g / (|g| + eps)
    np.testing.assert_allclose(p["w"].data, 1.0 - 0.1 * g / (np.abs(g) + 1e-8), rtol=1e-15)


@pytest.mark.parametrize("opt", [Adam(lr=1e-3), SGD(lr=1e-3)])
def test_one_step_on_quadratic_decreases_loss(opt):
    target = np.array([1.0, -2.0, 0.5])
    p = {"w": ad.tensor(np.array([3.0, 0.0, -1.0]))}
    loss = lambda: float(((p["w"].data - target) ** 2).sum())
    before = loss()
    opt.step(p, {"w": 2 * (p["w"].data - target)})
    assert loss() < before


def test_init_bounds_biases_and_determinism():
    spec = ModelSpec.from_name("lstm-incell", 100, 2, hidden=64, t_max=100)
    a, b = init_params(spec, 3), init_params(spec, 3)
    bound = 1 / math.sqrt(64)
    for name, t in a.params.items():
        np.testing.assert_array_equal(t.data, b.params[name].data)
        if name == "b_f":
            assert (t.data == 1.0).all()
        elif name.startswith("b_"):
            assert (t.data == 0.0).all()
        else:
            assert np.abs(t.data).max() <= bound
            assert np.abs(t.data).max() > 0.9 * bound  # actually uses the range
    assert not np.array_equal(init_params(spec, 4).params["W_xi"].data, a.params["W_xi"].data)


def test_forget_gate_starts_mostly_open():
    spec = ModelSpec.from_name("lstm", 100, 2, hidden=64)
    m = init_params(spec, 0)
    rng = np.random.default_rng(1)
    x = rng.normal(size=(1000, 100))
    h_prev = rng.uniform(-1, 1, size=(1000, 64))
    f = sigmoid(x @ m.params["W_xf"].data + h_prev @ m.params["W_hf"].data + m.params["b_f"].data)
    assert f.mean() > 0.5


def test_streams_are_disjoint_from_data_streams():
    a = stream(0, 0).standard_normal(5)
    b = datagen.sample_rng(0, "train", 0).standard_normal(5)
    assert not np.allclose(a, b)
    np.testing.assert_array_equal(a, stream(0, 0).standard_normal(5))


def test_clip_by_global_norm():
    g = {"a": np.array([3.0]), "b": np.array([4.0])}
    clipped = clip_by_global_norm(g, 1.0)
    np.testing.assert_allclose([clipped["a"][0], clipped["b"][0]], [0.6, 0.8])
    assert clip_by_global_norm(g, 10.0) is g


@pytest.mark.parametrize("kw", [dict(optimizer="rmsprop"), dict(learning_rate=0.0), dict(batch_size=0),
                                dict(patience=0), dict(precision="float16"), dict(clip_norm=-1.0)])
def test_config_validation(kw):
    with pytest.raises(ValueError):
        TrainConfig(**kw)


# -- training loop on small data ---------------------------------------------------

def tiny(kind="earlier", n_train=64, n_test=40, seed=0, **kw):
    return datagen.make_splits(kind, seed, n_train, n_test, t_len=12, n_features=40, **kw)


def tiny_spec(name="lstm", **dims):
    return ModelSpec.from_name(name, 40, 2, t_max=12, **({"hidden": 6, "d_a": 4, "hops": 2} | dims))


def test_training_is_reproducible():
    tr, te = tiny()
    cfg = TrainConfig(max_epochs=3, batch_size=16, seed=5)
    a = train(tiny_spec("lstm-incell"), tr, te, cfg)
    b = train(tiny_spec("lstm-incell"), tr, te, cfg)
    assert a.train_loss == b.train_loss and a.test_accuracy == b.test_accuracy
    for k, t in a.model.params.items():
        np.testing.assert_array_equal(t.data, b.model.params[k].data)


def test_result_is_first_best_epoch_and_log(tmp_path):
    tr, te = tiny()
    res = train(tiny_spec(), tr, te, TrainConfig(max_epochs=6, batch_size=8, learning_rate=0.01))
    assert res.epochs_run == len(res.train_loss) == len(res.test_accuracy) <= 6
    assert all(math.isfinite(v) for v in res.train_loss)
    assert res.best_epoch == int(np.argmax(res.test_accuracy)) + 1
    pred = res.model.predict(te.X).argmax(axis=1)
    assert np.mean(pred == te.y) == pytest.approx(res.best_test_accuracy)
    res.write_log(tmp_path / "log.csv")
    lines = (tmp_path / "log.csv").read_text().splitlines()
    assert lines[0] == "epoch,train_loss,test_acc" and len(lines) == res.epochs_run + 1


def test_training_reduces_loss_on_signal():
    tr, te = tiny(n_train=128, kind="latter")
    res = train(tiny_spec(), tr, te, TrainConfig(max_epochs=8, batch_size=16, learning_rate=0.01))
    assert res.train_loss[-1] < res.train_loss[0]
    assert res.best_test_accuracy > 0.8


def test_early_stopping_counts_stale_epochs():
    tr, te = tiny()
    res = train(tiny_spec(), tr, te, TrainConfig(max_epochs=50, patience=2, min_delta=1e9))
    # epoch 1 improves on +inf; epochs 2 and 3 cannot improve by 1e9
    assert res.epochs_run == 3


def test_pure_noise_gives_chance_accuracy():
    tr, te = datagen.make_splits("earlier", 0, 400, 300, t_len=20, n_features=40, amplitude=0.0)
    res = train(tiny_spec(hidden=8), tr, te, TrainConfig(max_epochs=5, batch_size=32))
    final = res.test_accuracy[-1]
    assert 0.40 <= final <= 0.60


def test_float32_run_returns_float64_model():
    tr, te = tiny()
    res = train(tiny_spec("lstm-incell"), tr, te, TrainConfig(max_epochs=1, precision="float32"))
    assert all(t.data.dtype == np.float64 for t in res.model.params.values())


def test_divergence_reports_last_finite_epoch():
    tr, te = tiny()
    with pytest.raises(DivergenceError) as info:
        train(tiny_spec(), tr, te, TrainConfig(optimizer="sgd", learning_rate=1e200, precision="float32"))
    assert info.value.last_finite_epoch == 0


def test_mismatched_data_rejected():
    tr, te = tiny()
    with pytest.raises(ValueError, match="features"):
        train(ModelSpec.from_name("lstm", 7, 2), tr, te)
    with pytest.raises(ValueError, match="labels"):
        train(ModelSpec.from_name("lstm", 40, 1, hidden=4), tr, te)
