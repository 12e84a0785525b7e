import logging

import numpy as np
import pytest
from scipy.optimize import minimize

from grammamba import tensor as T
from grammamba.data import generate_positioning, generate_synthetic, load_dataset, save_dataset
from grammamba.errors import ConfigError, NonFiniteError, ProtocolError
from grammamba.gram import lu_det
from grammamba.model import GramMambaModel, ModelConfig, forward_full
from grammamba.tensor import Tensor
from grammamba.training import (Adam, TrainConfig, adapt, checksums, classification_metrics,
                                clip_grad_norm, evaluate, evaluate_classification, evaluate_regression,
                                impute_baseline, regression_metrics, simulate_missing, train)


def tiny_dataset(**kw):
    args = dict(n_classes=3, n_modalities=2, L=16, channels=3, samples_per_class=20, noise_sigma=0.2,
                seed=0, modality_names=["ACC", "GYO"])
    args.update(kw)
    return generate_synthetic(**args)


def tiny_model(ds, **kw):
    cfg = dict(feature_dim=6, state_dim=4, inner_dim=8, depth=1, fusion_dim=16, lora_rank=1, seed=0)
    cfg.update(kw)
    return GramMambaModel(ModelConfig(ds.modalities, ds.n_classes, mode=ds.mode, **cfg))


def mean_det(model, split):
    with T.no_grad():
        out = forward_full(model, {n: split.arrays[n] for n in model.modality_names})
    return float(np.mean(lu_det(out.gram.values.data)))


# ---- metrics


def test_classification_metric_examples():
    oa, f1, per = classification_metrics(np.array([0, 0, 1, 1]), np.array([0, 1, 1, 1]), 2)
    assert oa == 0.75
    assert f1 == pytest.approx((2 / 3 + 0.8) / 2, rel=1e-15)
    assert per == pytest.approx([2 / 3, 0.8])
    y = np.array([0, 1, 2, 2, 1])
    assert classification_metrics(y, y, 3)[:2] == (1.0, 1.0)
    balanced = np.repeat([0, 1, 2], 4)
    assert classification_metrics(balanced, np.zeros(12, dtype=int), 3)[0] == pytest.approx(1 / 3)


def test_empty_class_scores_zero_f1():
    _, f1, per = classification_metrics(np.array([0, 1]), np.array([0, 1]), 3)
    assert per == [1.0, 1.0, 0.0]
    assert f1 == pytest.approx(2 / 3)


def test_regression_metric_examples():
    target = np.zeros((3, 2))
    pred = np.array([[1.0, 0.0], [0.0, -1.0], [6.0, 8.0]])
    assert regression_metrics(pred, target) == (1.0, 4.0)
    assert regression_metrics(target, target) == (0.0, 0.0)
    shift = np.array([3.5, -2.0])
    assert regression_metrics(pred + shift, target + shift) == pytest.approx((1.0, 4.0), rel=1e-15)


def test_evaluate_mode_guards():
    ds = tiny_dataset()
    model = tiny_model(ds)
    with pytest.raises(ProtocolError):
        evaluate_regression(model, ds.splits["val"])
    rep = evaluate_classification(model, ds.splits["val"])
    assert 0.0 <= rep.overall_accuracy <= 1.0
    assert rep.mean_gram_offdiag is not None
    with pytest.raises(ProtocolError):
        evaluate(model, ds.splits["val"], ["MAG"])


# ---- optimizer pieces


def test_adam_zero_gradient_is_a_fixed_point():
    p = Tensor(np.array([1.0, -2.0]), requires_grad=True)
    opt = Adam([p], lr=0.1)
    for _ in range(3):
        p.grad = np.zeros(2)
        opt.step()
    np.testing.assert_array_equal(p.data, [1.0, -2.0])


def test_adam_first_step_moves_by_lr():
    p = Tensor(np.array([1.0, -2.0]), requires_grad=True)
    opt = Adam([p], lr=0.1)
    p.grad = np.array([3.0, -0.5])
    opt.step()
    # bias correction makes the first step lr * sign(g) up to eps
    np.testing.assert_allclose(p.data, [0.9, -1.9], rtol=1e-7)


def test_clip_grad_norm():
    a = Tensor(np.zeros(2), requires_grad=True)
    b = Tensor(np.zeros(1), requires_grad=True)
    a.grad, b.grad = np.array([3.0, 0.0]), np.array([4.0])
    assert clip_grad_norm([a, b], 1.0) == 5.0
    np.testing.assert_allclose(np.r_[a.grad, b.grad], [0.6, 0.0, 0.8], rtol=1e-15)
    a.grad, b.grad = np.array([0.3, 0.0]), np.array([0.4])
    clip_grad_norm([a, b], 1.0)
    np.testing.assert_array_equal(np.r_[a.grad, b.grad], [0.3, 0.0, 0.4])


def test_train_config_validation():
    with pytest.raises(ConfigError):
        TrainConfig(batch_size=0)
    with pytest.raises(ConfigError):
        TrainConfig(learning_rate=-1e-3)
    with pytest.raises(ConfigError):
        TrainConfig(beta=-0.5)


# ---- training


def test_zero_learning_rate_changes_nothing():
    ds = tiny_dataset()
    model = tiny_model(ds)
    before = {n: a.copy() for n, a in model.state_dict().items()}
    rep = train(model, ds, TrainConfig(epochs=3, learning_rate=0.0, batch_size=16))
    for n, a in model.state_dict().items():
        assert a.tobytes() == before[n].tobytes()
    assert rep.loss_history == pytest.approx([rep.loss_history[0]] * 3, rel=1e-12)


def test_same_seed_same_history():
    ds = tiny_dataset()
    cfg = TrainConfig(epochs=2, learning_rate=5e-3, batch_size=16, seed=7)
    a = train(tiny_model(ds), ds, cfg)
    b = train(tiny_model(ds), ds, cfg)
    assert a.loss_history == b.loss_history
    assert a.to_dict() == b.to_dict()


def test_train_keeps_adapters_fresh():
    ds = tiny_dataset()
    model = tiny_model(ds)
    train(model, ds, TrainConfig(epochs=1, learning_rate=1e-2, batch_size=16))
    for ad in model.adapters.values():
        assert np.all(ad.B.data == 0.0)


def test_on_epoch_records():
    ds = tiny_dataset()
    seen = []
    train(tiny_model(ds), ds, TrainConfig(epochs=2, learning_rate=1e-2, batch_size=16), on_epoch=seen.append)
    assert [r["epoch"] for r in seen] == [0, 1]
    assert {"train_loss", "overall_accuracy", "macro_f1", "mean_gram_offdiag"} <= set(seen[0])


def _handcrafted(split, names):
    X = np.concatenate([split.arrays[n] for n in names], axis=-1)
    spec = np.abs(np.fft.rfft(X - X.mean(axis=1, keepdims=True), axis=1))[:, 1:8]
    return np.concatenate([X.mean(axis=1), X.std(axis=1), spec.reshape(len(X), -1)], axis=1)


def _logistic_regression_accuracy(Xtr, ytr, Xte, yte, K, l2=5e-4):
    mu, sd = Xtr.mean(0), Xtr.std(0) + 1e-12
    Xtr, Xte = (Xtr - mu) / sd, (Xte - mu) / sd
    d = Xtr.shape[1]
    Y = np.eye(K)[ytr]

    def objective(w):
        W = w.reshape(d + 1, K)
        z = Xtr @ W[:-1] + W[-1]
        z -= z.max(axis=1, keepdims=True)
        logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
        g = (np.exp(logp) - Y) / len(ytr)
        grad = np.vstack([Xtr.T @ g + 2 * l2 * W[:-1], g.sum(0)])
        return -(logp * Y).sum() / len(ytr) + l2 * np.sum(W[:-1] ** 2), grad.ravel()

    W = minimize(objective, np.zeros((d + 1) * K), jac=True, method="L-BFGS-B").x.reshape(d + 1, K)
    return float(np.mean((Xte @ W[:-1] + W[-1]).argmax(axis=1) == yte))


@pytest.mark.slow
def test_three_class_task_is_learned_in_twenty_epochs():
    ds = generate_synthetic(n_classes=3, n_modalities=2, L=48, channels=3, samples_per_class=100,
                            noise_sigma=0.2, cross_modal_coupling=0.8, seed=0, modality_names=["ACC", "GYO"])
    tr, va = ds.splits["train"], ds.splits["val"]
    # independent check that the task is separable from pooled features
    oracle = _logistic_regression_accuracy(_handcrafted(tr, ds.modality_names), tr.labels,
                                           _handcrafted(va, ds.modality_names), va.labels, 3)
    assert oracle >= 0.95
    model = tiny_model(ds, feature_dim=16, state_dim=8, inner_dim=16, fusion_dim=512)
    rep = train(model, ds, TrainConfig(epochs=20, learning_rate=5e-3))
    assert rep.overall_accuracy >= 0.95
    assert evaluate(model, va).overall_accuracy == rep.overall_accuracy


def test_alignment_epoch_lowers_mean_det():
    ds = tiny_dataset(samples_per_class=40)
    model = tiny_model(ds)
    start = mean_det(model, ds.splits["train"])
    train(model, ds, TrainConfig(epochs=1, learning_rate=1e-2, batch_size=16, beta=1.0))
    assert mean_det(model, ds.splits["train"]) < start


def test_nan_parameter_is_reported_with_location():
    ds = tiny_dataset()
    model = tiny_model(ds)
    model.head_b.data[0] = np.nan
    with pytest.raises(NonFiniteError, match="epoch 0 step 0"):
        train(model, ds, TrainConfig(epochs=1, batch_size=16))


def test_degenerate_batches_are_skipped(caplog):
    ds = tiny_dataset()
    ds.splits["train"].arrays["ACC"][:] = 0.0
    model = tiny_model(ds)
    # zero input and zero output bias give an all-zero ACC feature
    model.encoders["ACC"][-1].out_b.data[:] = 0.0
    with caplog.at_level(logging.WARNING, logger="grammamba.training"):
        rep = train(model, ds, TrainConfig(epochs=1, batch_size=16))
    steps = -(-ds.splits["train"].num_windows // 16)
    assert rep.skipped_steps == steps
    assert "skipped" in caplog.text


def test_mode_mismatch_rejected():
    ds = tiny_dataset()
    pos = generate_positioning(n_modalities=2, L=8, channels=2, n_samples=30, seed=0)
    with pytest.raises(ProtocolError):
        train(tiny_model(ds), pos, TrainConfig(epochs=1))


# ---- adaptation


def test_adapt_trains_only_the_freeze_plan():
    ds = tiny_dataset()
    model = tiny_model(ds)
    train(model, ds, TrainConfig(epochs=2, learning_rate=1e-2, batch_size=16))
    base = {n: a.copy() for n, a in model.state_dict().items()}
    deg = simulate_missing(ds, ["GYO"])
    res = adapt(model, deg, ["ACC"], TrainConfig(epochs=2, learning_rate=1e-2, batch_size=16))
    live = {"adapters.ACC.lora_A", "adapters.ACC.lora_B", "adapters.fusion.lora_A", "adapters.fusion.lora_B"}
    for n, a in model.state_dict().items():
        if n not in live:
            assert a.tobytes() == base[n].tobytes(), n
    assert np.any(model.adapters["fusion"].B.data != 0.0)
    assert res.available == ["ACC"]
    assert res.trainable_params == sum(model.named_parameters()[n].size for n in live)
    assert res.trainable_fraction == res.after.trainable_fraction < 0.3


def test_adapt_detects_tampering_with_frozen_tensors():
    ds = tiny_dataset()
    model = tiny_model(ds)
    deg = simulate_missing(ds, ["GYO"])

    def tamper(record):
        model.fc2_w.data[0, 0] += 1.0

    with pytest.raises(ProtocolError, match="fc2.weight"):
        adapt(model, deg, ["ACC"], TrainConfig(epochs=1, batch_size=16), on_epoch=tamper)


def test_adapt_refuses_absent_modality():
    ds = tiny_dataset()
    deg = simulate_missing(ds, ["GYO"])
    with pytest.raises(ProtocolError, match="GYO"):
        adapt(tiny_model(ds), deg, ["GYO"], TrainConfig(epochs=1))


def test_checksums_are_content_hashes():
    ds = tiny_dataset()
    a, b = tiny_model(ds), tiny_model(ds)
    names = list(a.named_parameters())
    assert checksums(a, names) == checksums(b, names)
    b.head_b.data[0] += 1e-300
    assert checksums(a, names) != checksums(b, names)


# ---- missing modalities and imputation


def test_simulate_missing_cases(tmp_path):
    ds = tiny_dataset()
    deg = simulate_missing(ds, {"GYO"})
    assert all(sp.available == ["ACC"] for sp in deg.splits.values())
    assert all(sp.available == ["ACC", "GYO"] for sp in ds.splits.values())
    same = simulate_missing(ds, set())
    assert all(sp.available == ["ACC", "GYO"] for sp in same.splits.values())
    for s in ds.splits:
        assert same.splits[s].arrays["GYO"].tobytes() == ds.splits[s].arrays["GYO"].tobytes()
    save_dataset(deg, tmp_path / "d")
    assert load_dataset(tmp_path / "d").splits["val"].available == ["ACC"]
    with pytest.raises(ProtocolError):
        simulate_missing(ds, {"ACC", "GYO"})
    with pytest.raises(ProtocolError):
        simulate_missing(ds, {"MAG"})
    with pytest.raises(ConfigError):
        simulate_missing(ds, {"GYO"}, policy="mask")


def test_zero_and_mean_imputation():
    ds = tiny_dataset()
    deg = simulate_missing(ds, ["GYO"])
    zero = impute_baseline(deg, "zero")
    assert all(np.all(sp.arrays["GYO"] == 0.0) for sp in zero.splits.values())
    assert all(sp.available == ["ACC", "GYO"] for sp in zero.splits.values())
    mean = impute_baseline(deg, "mean")
    channel_means = ds.splits["train"].arrays["GYO"].mean(axis=(0, 1))
    for sp in mean.splits.values():
        np.testing.assert_array_equal(sp.arrays["GYO"], np.broadcast_to(channel_means, sp.arrays["GYO"].shape))
    # available data untouched
    assert mean.splits["test"].arrays["ACC"].tobytes() == ds.splits["test"].arrays["ACC"].tobytes()


@pytest.mark.parametrize("method", ["linear", "pchip"])
def test_interpolating_imputers_recover_linear_relations(method):
    # GYO is an affine map of ACC sampled on a smooth piecewise-linear path
    ds = tiny_dataset(L=17)
    M = np.array([[0.5, -1.0], [2.0, 0.25], [0.0, 1.5]])
    offset = np.array([0.3, -0.7])
    t = np.arange(17)
    for sp in ds.splits.values():
        W = sp.num_windows
        rng = np.random.default_rng(W)
        knots_vals = rng.normal(size=(W, 5, 3))
        acc = np.stack([[np.interp(t, np.arange(0, 17, 4), knots_vals[w, :, c]) for c in range(3)]
                        for w in range(W)]).transpose(0, 2, 1)
        sp.arrays["ACC"] = acc
        sp.arrays["GYO"] = acc @ M + offset
    deg = simulate_missing(ds, ["GYO"])
    filled = impute_baseline(deg, method, knot_stride=4)
    got = filled.splits["test"].arrays["GYO"]
    want = ds.splits["test"].arrays["GYO"]
    # knots are exact for both interpolants
    np.testing.assert_allclose(got[:, ::4], want[:, ::4], atol=1e-9)
    if method == "linear":
        np.testing.assert_allclose(got, want, atol=1e-9)
    else:
        # shape preserving: no overshoot between neighbouring knots
        for i in range(0, 16, 4):
            seg, ends = got[:, i:i + 5], got[:, [i, i + 4]]
            assert np.all(seg >= ends.min(axis=1, keepdims=True) - 1e-12)
            assert np.all(seg <= ends.max(axis=1, keepdims=True) + 1e-12)


def test_impute_rejects_unknown_method():
    deg = simulate_missing(tiny_dataset(), ["GYO"])
    with pytest.raises(ConfigError, match="spline"):
        impute_baseline(deg, "spline")
    with pytest.raises(ConfigError):
        impute_baseline(deg, "zero", knot_stride=0)


def test_evaluation_is_deterministic():
    ds = tiny_dataset()
    model = tiny_model(ds)
    a = evaluate(model, ds.splits["test"], ["ACC"]).to_dict()
    b = evaluate(model, ds.splits["test"], ["ACC"], batch_size=7).to_dict()
    assert a["macro_f1"] == b["macro_f1"] and a["overall_accuracy"] == b["overall_accuracy"]
