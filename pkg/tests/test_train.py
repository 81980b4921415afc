import json
import math

import numpy as np
import pytest

import visimsiam.train as train_mod
from visimsiam.data import SynthConfig, generate_dataset
from visimsiam.losses import LossInputError
from visimsiam.model import ModelConfig, init_parameters, load_checkpoint
from visimsiam.train import (
    METRIC_FIELDS,
    NO_DECAY,
    TrainConfig,
    TrainingError,
    compute_loss,
    cosine_lr,
    eval_features,
    sgd_momentum_step,
    train_run,
)

TINY_DATA = SynthConfig(num_classes=3, input_dim=16, samples_per_class=30, seed=1)
TINY_MODEL = ModelConfig(input_dim=16, hidden_dims=(16,), latent_dim=6, predictor_hidden=8)


def tiny(**kw):
    base = dict(epochs=2, batch_size=16, num_views=4, model=ModelConfig(**TINY_MODEL.to_dict()), checkpoint_every=1)
    base.update(kw)
    return TrainConfig(**base)


@pytest.mark.parametrize(
    "step, expected",
    [(0, 0.1), (50, 0.05), (100, 0.0), (25, 0.05 * (1 + math.cos(math.pi / 4)))],
)
def test_cosine_lr(step, expected):
    assert cosine_lr(step, 100, 0.1) == pytest.approx(expected, abs=1e-15)


def test_cosine_lr_is_monotone_and_bounded():
    vals = [cosine_lr(s, 37, 1.0) for s in range(38)]
    assert all(a >= b for a, b in zip(vals, vals[1:]))
    with pytest.raises(ValueError):
        cosine_lr(38, 37, 1.0)


def test_momentum_recurrence_by_hand():
    # f(w) = w^2 / 2, gradient w
    w = {"w": np.array([1.0])}
    v = {}
    sgd_momentum_step(w, {"w": w["w"].copy()}, v, lr=0.1, momentum=0.9, weight_decay=0.0)
    assert w["w"][0] == pytest.approx(0.9, abs=1e-15) and v["w"][0] == 1.0
    sgd_momentum_step(w, {"w": w["w"].copy()}, v, lr=0.1, momentum=0.9, weight_decay=0.0)
    assert v["w"][0] == pytest.approx(1.8, abs=1e-15)
    assert w["w"][0] == pytest.approx(0.72, abs=1e-15)


def test_weight_decay_skips_kappa_bias():
    params = {"a": np.array([2.0]), "pred.kappa.b": np.array([2.0])}
    grads = {"a": np.zeros(1), "pred.kappa.b": np.zeros(1)}
    sgd_momentum_step(params, grads, {}, lr=1.0, momentum=0.0, weight_decay=0.5)
    assert params["a"][0] == 1.0 and params["pred.kappa.b"][0] == 2.0
    assert "pred.kappa.b" in NO_DECAY


def test_nan_gradient_names_parameter():
    params = {"enc.0.w": np.ones(2), "pred.out.w": np.ones(2)}
    grads = {"enc.0.w": np.zeros(2), "pred.out.w": np.array([0.0, np.nan])}
    with pytest.raises(TrainingError, match="pred.out.w"):
        sgd_momentum_step(params, grads, {}, 0.1, 0.9, 0.0)
    with pytest.raises(KeyError):
        sgd_momentum_step(params, {"enc.0.w": np.zeros(2)}, {}, 0.1, 0.9, 0.0)


@pytest.mark.parametrize(
    "kw",
    [{"loss": "barlow"}, {"batch_size": 1}, {"epochs": 0}, {"num_views": 1}, {"use_predictor": False}],
)
def test_config_validation(kw):
    with pytest.raises(ValueError):
        tiny(**kw)


def test_config_round_trip():
    cfg = tiny(loss="simsiam", base_lr=0.03)
    back = TrainConfig.from_dict(json.loads(json.dumps(cfg.to_dict())))
    assert back.to_dict() == cfg.to_dict()
    assert back.model.kappa_head is False


def test_zero_lr_leaves_parameters_bit_identical():
    cfg = tiny(epochs=1, base_lr=0.0, weight_decay=0.0)
    res = train_run(cfg, TINY_DATA)
    init = init_parameters(cfg.model, cfg.seed)
    for k in init.params:
        assert np.array_equal(res.store[k].data, init[k].data), k


@pytest.mark.parametrize("loss", ["simsiam", "vmf-const", "vi-simsiam"])
def test_training_is_deterministic(loss):
    a = train_run(tiny(loss=loss), TINY_DATA)
    b = train_run(tiny(loss=loss), TINY_DATA)
    for k in a.store.params:
        assert np.array_equal(a.store[k].data, b.store[k].data)
    assert [m.loss for m in a.metrics] == [m.loss for m in b.metrics]


def test_seed_changes_the_run():
    a = train_run(tiny(seed=0), TINY_DATA)
    b = train_run(tiny(seed=1), TINY_DATA)
    assert a.metrics[-1].loss != b.metrics[-1].loss


def test_metrics_and_checkpoint_files(tmp_path):
    cfg = tiny(epochs=3, checkpoint_every=2)
    res = train_run(cfg, generate_dataset(TINY_DATA), tmp_path)
    names = sorted(p.name for p in tmp_path.iterdir())
    assert names == ["best.ckpt", "epoch0002.ckpt", "epoch0003.ckpt", "final.ckpt", "metrics.csv", "metrics.json"]
    rows = (tmp_path / "metrics.csv").read_text().splitlines()
    assert rows[0].split(",") == METRIC_FIELDS and len(rows) == 4
    js = json.loads((tmp_path / "metrics.json").read_text())
    assert [r["epoch"] for r in js] == [1, 2, 3]
    m = res.metrics[-1]
    assert m.kappa_min <= m.kappa_mean <= m.kappa_max
    assert m.lr == 0.0
    assert m.loss == pytest.approx(m.similarity_term + m.log_normalizer_term, abs=1e-9)
    store, header = load_checkpoint(tmp_path / "final.ckpt")
    assert header["epoch"] == 3 and header["extra"]["train_config"]["epochs"] == 3
    for k in store.params:
        assert np.array_equal(store[k].data, res.store[k].data)


def test_loads_dataset_directory(tmp_path):
    from visimsiam.data import save_dataset

    ds = generate_dataset(TINY_DATA)
    save_dataset(ds, tmp_path / "data")
    a = train_run(tiny(epochs=1), tmp_path / "data")
    b = train_run(tiny(epochs=1), ds)
    assert a.metrics[0].loss == b.metrics[0].loss


def test_dimension_mismatch():
    with pytest.raises(ValueError, match="input_dim"):
        train_run(tiny(), SynthConfig(num_classes=3, input_dim=32, samples_per_class=10))


def test_nan_latents_name_the_view(monkeypatch):
    real = train_mod.init_parameters

    def poisoned(cfg, seed):
        s = real(cfg, seed)
        s["enc.out.w"].data[:] = np.nan
        return s

    monkeypatch.setattr(train_mod, "init_parameters", poisoned)
    with pytest.raises(LossInputError, match="view 0"):
        train_run(tiny(), TINY_DATA)


def test_nan_loss_aborts_with_epoch_and_kappa(monkeypatch):
    real = train_mod.compute_loss

    def broken(*a, **kw):
        out = real(*a, **kw)
        out.total.data = np.array(np.nan)
        return out

    monkeypatch.setattr(train_mod, "compute_loss", broken)
    with pytest.raises(TrainingError, match=r"epoch 1 step 0.*kappa"):
        train_run(tiny(), TINY_DATA)


def test_frozen_targets_reproduce_stop_gradient_loss():
    cfg = tiny()
    store = init_parameters(cfg.model, 0)
    gen = np.random.default_rng(0)
    views = [gen.standard_normal((6, 16)) for _ in range(4)]
    from visimsiam.model import encode

    targets = [encode(store.copy(), v, training=True).data for v in views]
    a = compute_loss(store.copy(), cfg, views).value
    b = compute_loss(store.copy(), cfg, views, targets=targets).value
    assert a == pytest.approx(b, abs=1e-12)


def test_eval_features_batches_agree():
    res = train_run(tiny(epochs=1), TINY_DATA)
    x = generate_dataset(TINY_DATA)["train"].features
    z1, k1 = eval_features(res.store, x, batch=1024)
    z2, k2 = eval_features(res.store, x, batch=7)
    np.testing.assert_allclose(z1, z2, atol=1e-14)
    np.testing.assert_allclose(k1, k2, rtol=1e-13)
    np.testing.assert_allclose(np.linalg.norm(z1, axis=1), 1.0, atol=1e-12)


@pytest.mark.slow
def test_stop_gradient_and_predictor_prevent_collapse():
    ds = generate_dataset(SynthConfig())
    ablated = train_run(
        TrainConfig(epochs=20, loss="simsiam", pairing="all", stop_gradient=False, use_predictor=False), ds
    )
    z, _ = eval_features(ablated.store, ds["train"].features)
    assert z.std(axis=0).max() < 1e-2
    control = train_run(TrainConfig(epochs=5, loss="simsiam", pairing="all"), SynthConfig(samples_per_class=60))
    assert control.metrics[-1].feature_std_min > 0.1 / math.sqrt(64)
