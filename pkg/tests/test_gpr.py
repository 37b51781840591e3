"""Surrogate numerics: kernel, likelihood gradients, posterior, files."""

import json
import math

import numpy as np
import pytest

from rulerob import _core
from rulerob.errors import CalibrationError, InputError, ModelFileError, NumericalError
from rulerob.gpr import (
    Dataset,
    GPHyperparams,
    GPModel,
    feature_relevance,
    generate_dataset,
    kernel_eval,
    load_dataset,
    load_model,
    marginal_log_likelihood,
    predict_robustness,
    rectify_prediction,
    save_dataset,
    save_model,
    train_gp,
)
from rulerob.mpr import NormalizationConstants, compute_mpr, nearest_other
from rulerob.predicates import RuleParams, extract_features, make_registry
from rulerob.sampler import SamplerConfig
from scenariolib import random_follow_signal, straight_net

REGISTRY = make_registry(RuleParams(v_max=33.33))


def _hyper(ls, proc=1.0, noise=0.0):
    return GPHyperparams(length_scales=np.asarray(ls, dtype=float),
                         process_std=proc, noise_std=noise)


def _theta(hyper):
    return np.concatenate([np.log(hyper.length_scales),
                           [math.log(hyper.process_std), math.log(max(hyper.noise_std, 1e-12))]])


def _hyper_from_theta(theta, nz):
    return GPHyperparams(length_scales=np.exp(theta[:nz]),
                         process_std=float(np.exp(theta[nz])),
                         noise_std=float(np.exp(theta[nz + 1])))


# ---------------------------------------------------------------------------
# Kernel


def test_kernel_zero_distance_includes_noise():
    h = _hyper([1.0, 2.0], proc=1.3, noise=0.4)
    z = np.array([0.5, -0.2])
    assert kernel_eval(z, z.copy(), h) == pytest.approx(1.3**2 + 0.4**2)


def test_kernel_decays_to_zero():
    h = _hyper([1.0], proc=1.0, noise=0.0)
    assert kernel_eval(np.array([0.0]), np.array([50.0]), h) < 1e-300 or \
        kernel_eval(np.array([0.0]), np.array([50.0]), h) == 0.0
    assert kernel_eval(np.array([0.0]), np.array([3.0]), h) < kernel_eval(
        np.array([0.0]), np.array([1.0]), h)


def test_kernel_unit_distance_closed_form():
    h = _hyper([1.0], proc=1.0, noise=0.5)
    value = kernel_eval(np.array([0.0]), np.array([1.0]), h)
    assert value == pytest.approx(math.exp(-0.5))  # no noise term: distinct vectors


def test_kernel_dimension_mismatch():
    h = _hyper([1.0, 1.0])
    with pytest.raises(InputError):
        kernel_eval(np.array([0.0]), np.array([0.0, 1.0]), h)


def test_nonpositive_length_scale_rejected():
    with pytest.raises(InputError):
        _hyper([1.0, 0.0])


def test_gram_matrix_positive_semidefinite():
    rng = np.random.default_rng(40)
    for _ in range(30):
        Z = rng.normal(size=(25, 3))
        ls = rng.uniform(0.3, 3.0, size=3)
        noise = float(rng.uniform(0.0, 0.5))
        gram = _core.se_ard_gram(np.ascontiguousarray(Z), 1.0 / ls**2, 1.0, noise**2)
        eigs = np.linalg.eigvalsh(gram)
        assert eigs.min() >= -1e-8


# ---------------------------------------------------------------------------
# Marginal likelihood and training


def test_mll_gradient_matches_central_differences():
    rng = np.random.default_rng(41)
    for _ in range(5):
        n = int(rng.integers(10, 50))
        nz = int(rng.integers(2, 5))
        Z = rng.normal(size=(n, nz))
        y = rng.normal(size=n)
        hyper = _hyper(rng.uniform(0.5, 2.0, size=nz), proc=float(rng.uniform(0.5, 2.0)),
                       noise=float(rng.uniform(0.05, 0.5)))
        _, grad = marginal_log_likelihood(Z, y, hyper, with_grad=True)
        theta = _theta(hyper)
        eps = 1e-6
        for j in range(len(theta)):
            tp, tm = theta.copy(), theta.copy()
            tp[j] += eps
            tm[j] -= eps
            fd = (marginal_log_likelihood(Z, y, _hyper_from_theta(tp, nz))
                  - marginal_log_likelihood(Z, y, _hyper_from_theta(tm, nz))) / (2 * eps)
            assert abs(grad[j] - fd) / max(abs(fd), 1e-8) < 1e-4


def test_train_recovers_length_scale_within_factor_two():
    rng = np.random.default_rng(42)
    Z = rng.uniform(-3, 3, size=(80, 2))
    true = _hyper([1.0, 1.0], proc=1.0, noise=0.0)
    gram = _core.se_ard_gram(np.ascontiguousarray(Z), 1.0 / true.length_scales**2, 1.0, 1e-10)
    y = np.linalg.cholesky(gram) @ rng.normal(size=80)
    model = train_gp(Z, y, n_starts=3, max_iter=120, seed=0)
    # standardization rescales by the input std, undo it for the comparison
    ls_raw = model.hyper.length_scales * 1.0  # in standardized units
    ls_data_units = ls_raw * model.feat_std
    for ls in ls_data_units:
        assert 0.5 <= ls <= 2.0


def test_train_handles_duplicate_inputs_with_zero_noise_init():
    rng = np.random.default_rng(43)
    Z = np.repeat(rng.normal(size=(10, 2)), 2, axis=0)
    y = np.repeat(rng.normal(size=10), 2)
    init = _hyper([1.0, 1.0], proc=1.0, noise=1e-9)
    model = train_gp(Z, y, init=init, n_starts=1, max_iter=20)
    assert np.isfinite(model.weights).all()


def test_from_hyper_duplicate_inputs_engages_jitter():
    Z = np.zeros((4, 2))
    y = np.array([1.0, 1.0, 1.0, 1.0])
    model = GPModel.from_hyper(Z, y, _hyper([1.0, 1.0], noise=0.0))
    assert model.jitter > 0.0


def test_train_rejects_non_finite_targets():
    Z = np.random.default_rng(44).normal(size=(10, 2))
    y = np.full(10, np.inf)
    with pytest.raises(NumericalError):
        train_gp(Z, y, n_starts=2, max_iter=10)


def test_train_needs_two_points():
    with pytest.raises(InputError):
        train_gp(np.zeros((1, 2)), np.zeros(1))


# ---------------------------------------------------------------------------
# Prediction


def test_noiseless_interpolation():
    rng = np.random.default_rng(45)
    Z = rng.normal(size=(30, 3))
    y = np.sin(Z[:, 0]) + np.cos(Z[:, 1])
    model = GPModel.from_hyper(Z, y, _hyper([1.0, 1.0, 1.0], noise=0.0))
    mu, _ = model.predict_batch(Z)
    assert np.abs(mu - y).max() < 1e-6


def test_prior_reversion_far_from_data():
    Z = np.random.default_rng(46).normal(size=(10, 2))
    y = np.ones(10)
    model = GPModel.from_hyper(Z, y, _hyper([1.0, 1.0], proc=1.4, noise=0.0))
    mu, var = model.predict(np.array([500.0, 500.0]))
    assert mu == pytest.approx(0.0, abs=1e-12)
    assert var == pytest.approx(1.4**2, abs=1e-10)


def test_three_point_posterior_matches_dense_inverse():
    rng = np.random.default_rng(47)
    for _ in range(20):
        Z = rng.normal(size=(3, 2))
        y = rng.normal(size=3)
        hyper = _hyper(rng.uniform(0.5, 2.0, size=2), proc=float(rng.uniform(0.5, 2.0)),
                       noise=float(rng.uniform(0.01, 0.3)))
        model = GPModel.from_hyper(Z, y, hyper)
        zq = rng.normal(size=2)
        mu, var = model.predict(zq)
        # dense oracle in the standardized space the model uses
        mean, std = model.feat_mean, model.feat_std
        Zs = (Z - mean) / std
        zs = (zq - mean) / std
        K = np.array([[kernel_eval(a, b, hyper) if i != j else
                       hyper.process_std**2 + hyper.noise_std**2
                       for j, b in enumerate(Zs)] for i, a in enumerate(Zs)])
        noiseless = GPHyperparams(hyper.length_scales, hyper.process_std, 0.0)
        kv = np.array([kernel_eval(a, zs, noiseless) for a in Zs])
        kinv = np.linalg.inv(K)
        mu_oracle = kv @ kinv @ y
        var_oracle = hyper.process_std**2 + hyper.noise_std**2 - kv @ kinv @ kv
        assert abs(mu - mu_oracle) < 1e-10
        assert abs(var - var_oracle) < 1e-10


def test_posterior_variance_nonnegative_bulk():
    rng = np.random.default_rng(48)
    Z = rng.normal(size=(60, 4))
    y = rng.normal(size=60)
    model = GPModel.from_hyper(Z, y, _hyper([0.7, 1.0, 1.3, 2.0], noise=0.05))
    queries = rng.normal(size=(10_000, 4)) * 2.0
    _, var = model.predict_batch(queries)
    assert var.min() >= 0.0  # clamped at 0; raw values above -1e-9


def test_predict_dimension_mismatch():
    model = GPModel.from_hyper(np.zeros((3, 2)), np.zeros(3), _hyper([1.0, 1.0], noise=0.1))
    with pytest.raises(InputError):
        model.predict(np.zeros(3))


def test_mean_directional_derivative_matches_finite_differences():
    # smoothness away from rectification: analytic gradient of the mean
    rng = np.random.default_rng(49)
    Z = rng.normal(size=(25, 3))
    y = rng.normal(size=25)
    hyper = _hyper([0.8, 1.2, 1.0], proc=1.1, noise=0.1)
    model = GPModel.from_hyper(Z, y, hyper)
    Zs = model._train_standardized()

    def mean_grad(zq):
        zs = (zq - model.feat_mean) / model.feat_std
        kv = _core.se_ard_cross(zs[None, :], Zs, 1.0 / hyper.length_scales**2,
                                hyper.process_std**2)[0]
        diff = (Zs - zs) / hyper.length_scales**2
        return (model.weights * kv) @ diff / model.feat_std

    for _ in range(20):
        zq = rng.normal(size=3)
        grad = mean_grad(zq)
        for j in range(3):
            zp, zm = zq.copy(), zq.copy()
            h = 1e-6
            zp[j] += h
            zm[j] -= h
            fd = (model.predict(zp)[0] - model.predict(zm)[0]) / (2 * h)
            assert abs(grad[j] - fd) / max(abs(fd), 1e-6) < 1e-4


# ---------------------------------------------------------------------------
# Rectification and robustness prediction


def test_rectify_cases():
    assert rectify_prediction(0.5, 1) == 0.5
    assert rectify_prediction(-0.2, 1) == 0.0
    assert rectify_prediction(-0.2, -1) == -0.2
    assert rectify_prediction(0.2, -1) == 0.0
    with pytest.raises(InputError):
        rectify_prediction(0.1, 0)


def _tiny_surrogate(net, rng, n=40):
    cfg = SamplerConfig(horizon=6, dt=0.1, n_v=3, n_d=3, n_s=1,
                        dv_range=(-2.0, 2.0), ds_range=(0.0, 0.0), d_range=(-0.5, 0.5))
    scenarios = [(net, random_follow_signal(rng, n_steps=20, dt=0.1)) for _ in range(n)]
    pred = REGISTRY["in_same_lane"]
    dataset = generate_dataset(scenarios, pred, cfg, n, seed=1)
    model = train_gp(dataset.inputs, dataset.outputs, n_starts=1, max_iter=40,
                     predicate_name=pred.name, feature_names=pred.feature_names,
                     norm=dataset.norm)
    return model, dataset, scenarios, cfg


def test_predict_robustness_sign_contract(net):
    rng = np.random.default_rng(50)
    model, _, scenarios, _ = _tiny_surrogate(net, rng)
    pred = REGISTRY["in_same_lane"]
    for _, signal in scenarios[:20]:
        b = nearest_other(signal.states[0])
        rho, sigma = predict_robustness(model, REGISTRY, net, signal, 0, b)
        c = 1 if pred.boolean(signal.states[0], net, b) else -1
        assert rho == 0.0 or np.sign(rho) == c
        assert sigma >= 0.0


def test_predict_robustness_near_training_label(net):
    rng = np.random.default_rng(51)
    model, dataset, scenarios, cfg = _tiny_surrogate(net, rng)
    mu, _ = model.predict_batch(dataset.inputs)
    # interpolation regime: most training labels reproduced closely
    assert np.median(np.abs(mu - dataset.outputs)) < 0.15


# ---------------------------------------------------------------------------
# Feature relevance


def test_relevance_constant_feature_scores_zero():
    rng = np.random.default_rng(52)
    Z = rng.normal(size=(30, 3))
    Z[:, 1] = 4.2
    y = np.sin(Z[:, 0])
    model = GPModel.from_hyper(Z, y, _hyper([1.0, 1.0, 1.0], noise=0.05))
    scores = feature_relevance(model)
    assert scores[1] == 0.0
    assert scores.max() == 1.0


def test_relevance_single_feature_is_one():
    rng = np.random.default_rng(53)
    Z = rng.normal(size=(20, 1))
    model = GPModel.from_hyper(Z, np.sin(Z[:, 0]), _hyper([1.0], noise=0.05))
    assert feature_relevance(model) == pytest.approx([1.0])


def test_relevance_identifies_informative_feature():
    rng = np.random.default_rng(54)
    Z = rng.normal(size=(80, 4))
    y = np.tanh(Z[:, 2])  # only feature 2 matters
    model = train_gp(Z, y, n_starts=2, max_iter=100, seed=2)
    scores = feature_relevance(model)
    assert int(np.argmax(scores)) == 2


# ---------------------------------------------------------------------------
# Serialization


def test_save_load_round_trip_bit_identical(tmp_path):
    rng = np.random.default_rng(55)
    Z = rng.normal(size=(25, 3))
    y = rng.normal(size=25)
    model = GPModel.from_hyper(Z, y, _hyper([0.9, 1.1, 1.4], proc=1.2, noise=0.1),
                               predicate_name="speed_limit",
                               feature_names=("a", "b", "c"),
                               norm=NormalizationConstants(0.1, 0.9, 0.2, 0.8))
    path = tmp_path / "model.json"
    save_model(model, path)
    loaded = load_model(path)
    queries = rng.normal(size=(100, 3))
    mu_a, var_a = model.predict_batch(queries)
    mu_b, var_b = loaded.predict_batch(queries)
    assert mu_a.tobytes() == mu_b.tobytes()
    assert var_a.tobytes() == var_b.tobytes()
    assert loaded.norm == model.norm


def test_load_truncated_file_errors(tmp_path):
    rng = np.random.default_rng(56)
    model = GPModel.from_hyper(rng.normal(size=(5, 2)), rng.normal(size=5),
                               _hyper([1.0, 1.0], noise=0.1))
    path = tmp_path / "model.json"
    save_model(model, path)
    raw = path.read_text()
    path.write_text(raw[: len(raw) // 2])
    with pytest.raises(ModelFileError):
        load_model(path)


def test_load_rejects_wrong_version(tmp_path):
    rng = np.random.default_rng(57)
    model = GPModel.from_hyper(rng.normal(size=(5, 2)), rng.normal(size=5),
                               _hyper([1.0, 1.0], noise=0.1))
    path = tmp_path / "model.json"
    save_model(model, path)
    payload = json.loads(path.read_text())
    payload["version"] = 99
    path.write_text(json.dumps(payload))
    with pytest.raises(ModelFileError):
        load_model(path)


def test_predict_after_load_rejects_wrong_width(tmp_path):
    rng = np.random.default_rng(58)
    model = GPModel.from_hyper(rng.normal(size=(5, 2)), rng.normal(size=5),
                               _hyper([1.0, 1.0], noise=0.1))
    path = tmp_path / "model.json"
    save_model(model, path)
    loaded = load_model(path)
    with pytest.raises(InputError):
        loaded.predict(np.zeros(4))


def test_dataset_save_load_round_trip(tmp_path, net):
    rng = np.random.default_rng(59)
    _, dataset, _, _ = _tiny_surrogate(net, rng, n=12)
    path = tmp_path / "data.npz"
    save_dataset(dataset, path)
    loaded = load_dataset(path)
    assert loaded.predicate_name == dataset.predicate_name
    assert loaded.feature_names == dataset.feature_names
    np.testing.assert_array_equal(loaded.inputs, dataset.inputs)
    np.testing.assert_array_equal(loaded.outputs, dataset.outputs)
    assert loaded.norm == dataset.norm


# ---------------------------------------------------------------------------
# Dataset generation


def test_generate_dataset_small_has_both_signs(net):
    rng = np.random.default_rng(60)
    cfg = SamplerConfig(horizon=6, dt=0.1, n_v=3, n_d=3, n_s=1,
                        dv_range=(-2.0, 2.0), ds_range=(0.0, 0.0), d_range=(-0.5, 0.5))
    scenarios = [(net, random_follow_signal(rng, n_steps=20, dt=0.1)) for _ in range(30)]
    dataset = generate_dataset(scenarios, REGISTRY["in_same_lane"], cfg, 10, seed=3)
    assert len(dataset) == 10
    assert (dataset.characteristics == 1).any()
    assert (dataset.characteristics == -1).any()


def test_generate_dataset_all_compliant_errors(net):
    from scenariolib import constant_signal, vehicle
    cfg = SamplerConfig(horizon=6, dt=0.1, n_v=3, n_d=1, n_s=1,
                        dv_range=(-1.0, 1.0), ds_range=(0.0, 0.0), d_range=(0.0, 0.0))
    signal = constant_signal({"ego": vehicle(s=100, d=0, v=20),
                              "b1": vehicle(s=120, d=0, v=20)}, n_steps=20, dt=0.1)
    with pytest.raises(CalibrationError):
        generate_dataset([(net, signal)], REGISTRY["in_same_lane"], cfg, 5, seed=0)


def test_generate_dataset_insufficient_pool(net):
    from scenariolib import constant_signal, vehicle
    cfg = SamplerConfig(horizon=6, dt=0.1)
    signal = constant_signal({"ego": vehicle(s=100, d=0, v=20),
                              "b1": vehicle(s=120, d=0, v=20)}, n_steps=8, dt=0.1)
    with pytest.raises(InputError):
        generate_dataset([(net, signal)], REGISTRY["in_same_lane"], cfg, 50, seed=0)


def test_generate_dataset_labels_match_pipeline_recompute(net):
    rng = np.random.default_rng(61)
    cfg = SamplerConfig(horizon=6, dt=0.1, n_v=3, n_d=3, n_s=1,
                        dv_range=(-2.0, 2.0), ds_range=(0.0, 0.0), d_range=(-0.5, 0.5))
    scenarios = [(net, random_follow_signal(rng, n_steps=20, dt=0.1)) for _ in range(25)]
    pred = REGISTRY["in_same_lane"]
    dataset = generate_dataset(scenarios, pred, cfg, 15, seed=4)
    # recompute each label independently through the public pipeline
    matched = 0
    for i in range(len(dataset)):
        z = dataset.inputs[i]
        for net_i, signal in scenarios:
            for k in range(len(signal) - cfg.horizon):
                b = nearest_other(signal.states[k])
                if b is None:
                    continue
                z2 = extract_features(pred, signal.states[k], net_i, b)
                if np.array_equal(z, z2):
                    result = compute_mpr(pred, net_i, signal, k, cfg, dataset.norm, b)
                    assert result.rho == dataset.outputs[i]
                    matched += 1
                    break
            else:
                continue
            break
    assert matched == len(dataset)
