"""Model assembly and reporting: binding, prediction, persistence, refit.

The last-layer refit is pinned against a dense penalized least-squares
oracle computed directly from the stacked design and frozen penalties.
"""

import numpy as np
import pytest

from sddr.errors import ConfigError, DataError
from sddr.families import FittedDistribution, MixtureDistribution
from sddr.model import (
    ModelSpec,
    OrthogOptions,
    build,
    ensemble,
    formula_set,
    get_ensemble_distribution,
    last_layer_refit,
)
from sddr.training import TrainConfig, fit


def normal_spec(loc="~ 1 + x", scale="~ 1", **kw):
    return ModelSpec(formulas=formula_set({"loc": loc, "scale": scale}), family="normal", **kw)


def toy_data(n=80, seed=0):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=n)
    z = rng.uniform(-1, 1, n)
    y = 1.0 + 2.0 * x + np.sin(2.0 * z) + 0.05 * rng.normal(size=n)
    return y, {"x": x, "z": z}


# -- build validation ---------------------------------------------------------------


def test_formula_count_must_match_parameters():
    y, data = toy_data()
    spec = ModelSpec(formulas=formula_set({"loc": "~ x"}), family="normal")
    with pytest.raises(ConfigError, match="1 formula"):
        build(y, data, spec)


def test_mapping_validation():
    y, data = toy_data()
    for mapping, msg in [
        ([(1, 1)], "repeats"),
        ([(3,)], "outside"),
        ([()], "empty"),
        ([(1,)], "no formula for parameter"),
    ]:
        spec = ModelSpec(
            formulas=formula_set({"both": "~ x"}, mapping=mapping), family="normal"
        )
        with pytest.raises(ConfigError, match=msg):
            build(y, data, spec)


def test_shared_formula_feeds_both_parameters():
    y, data = toy_data()
    spec = ModelSpec(formulas=formula_set({"both": "~ 1 + x"}, mapping=[(1, 2)]),
                     family="normal")
    model = build(y, data, spec)
    named = model.coef("linear")
    assert named["loc"] == named["scale"]  # same underlying coefficients
    eta, _ = model.forward_batch(np.arange(5))
    assert np.allclose(eta[:, 0], eta[:, 1])


def test_empty_predictor_rejected():
    y, data = toy_data()
    with pytest.raises(ConfigError, match="has no terms"):
        build(y, data, normal_spec(scale="~ 0"))


def test_duplicate_term_rejected():
    y, data = toy_data()
    with pytest.raises(ConfigError, match="duplicate term"):
        build(y, data, normal_spec(loc="~ x + x"))


def test_unregistered_network_rejected():
    y, data = toy_data()
    with pytest.raises(ConfigError, match="no such network"):
        build(y, data, normal_spec(loc="~ 1 + net(x)"))


def test_network_width_must_match_mapping():
    y, data = toy_data()
    spec = normal_spec(
        loc="~ 1 + net(x, z)",
        networks={"net": [{"units": 4, "activation": "relu"}, {"units": 2}]},
    )
    with pytest.raises(ConfigError, match="outputs 2"):
        build(y, data, spec)


def test_response_shape_checked():
    y, data = toy_data()
    with pytest.raises(DataError, match="must be 1-d"):
        build(y[:10], data, normal_spec())


# -- initialization -----------------------------------------------------------------


def test_structured_coefficients_start_at_zero():
    y, data = toy_data()
    model = build(y, data, normal_spec(loc="~ 1 + x + s(z)"))
    coefs = model.coef("linear")["loc"]
    assert all(v == 0.0 for v in coefs.values())
    assert np.all(model.coef("smooth")["loc"]['s(z, bs="tp")'] == 0.0)


def test_lasso_product_starts_at_zero():
    y, data = toy_data()
    model = build(y, data, normal_spec(loc="~ 1 + lasso(x, la=0.5)"))
    [bt] = [t for b in model.bindings for t in b.terms if t.kind == "lasso"]
    assert np.all(model.params.values[bt.u_key] == 1.0)
    assert np.all(model.params.values[bt.v_key] == 0.0)
    assert np.all(bt.coef(model.params) == 0.0)


def test_factor_dummy_coding_respects_intercept():
    rng = np.random.default_rng(1)
    g = np.array(["a", "b", "c"] * 20)
    y = rng.normal(size=60)
    with_int = build(y, {"g": g}, normal_spec(loc="~ 1 + g"))
    names = list(with_int.coef("linear")["loc"])
    assert names == ["(Intercept)", "g.b", "g.c"]
    without = build(y, {"g": g}, normal_spec(loc="~ -1 + g"))
    assert list(without.coef("linear")["loc"]) == ["g.a", "g.b", "g.c"]


def test_single_level_factor_rejected():
    y = np.zeros(10)
    g = np.array(["only"] * 10)
    with pytest.raises(DataError, match="single level"):
        build(y, {"g": g}, normal_spec(loc="~ 1 + g"))


# -- forward semantics ---------------------------------------------------------------


def test_offset_added_verbatim():
    y, data = toy_data(n=40)
    data = dict(data, off=np.linspace(0, 1, 40))
    model = build(y, data, normal_spec(loc="~ 1 + x + offset(off)"))
    eta, _ = model.forward_batch(np.arange(40))
    assert np.allclose(eta[:, 0], data["off"])  # zero coefs leave only the offset


def test_predict_equals_fitted_on_training_rows():
    y, data = toy_data()
    model = build(y, data, normal_spec(loc="~ 1 + x + s(z)"))
    fit(model, TrainConfig(epochs=5, batch_size=40))
    assert np.array_equal(model.fitted(), model.predict(data, "mean"))
    assert np.array_equal(model.predict(None, "stddev"), model.predict(data, "stddev"))


def test_quantile_columns_are_ordered():
    y, data = toy_data()
    model = build(y, data, normal_spec())
    fit(model, TrainConfig(epochs=3, batch_size=40))
    q = model.predict(None, "quantile", probs=[0.1, 0.5, 0.9])
    assert q.shape == (len(y), 3)
    assert np.all(q[:, 0] < q[:, 1]) and np.all(q[:, 1] < q[:, 2])


def test_predict_distribution_and_grid():
    y, data = toy_data(n=30)
    model = build(y, data, normal_spec())
    dist = model.predict(None, "distribution")
    assert isinstance(dist, FittedDistribution)
    values, dens = model.predict(None, "density_grid")
    assert values.shape == dens.shape == (30, 400)
    with pytest.raises(ConfigError, match="unknown statistic"):
        model.predict(None, "mode")
    with pytest.raises(ConfigError, match="needs probs"):
        model.predict(None, "quantile")


def test_extrapolation_warns():
    y, data = toy_data()
    model = build(y, data, normal_spec(loc="~ 1 + s(z)"))
    out = dict(data)
    out["z"] = data["z"].copy()
    out["z"][0] = 99.0
    with pytest.warns(UserWarning, match="outside the training range"):
        model.predict(out, "mean")


def test_unseen_factor_level_rejected_at_predict():
    g = np.array(["a", "b"] * 20)
    y = np.zeros(40)
    model = build(y, {"g": g}, normal_spec(loc="~ 1 + g"))
    bad = {"g": np.array(["a", "c"] * 20)}
    with pytest.raises(DataError, match="unseen factor level"):
        model.predict(bad, "mean")


def test_log_score_identity():
    y, data = toy_data()
    model = build(y, data, normal_spec())
    fit(model, TrainConfig(epochs=3, batch_size=40))
    per_obs, total = model.log_score()
    assert np.isclose(total, per_obs.sum())
    assert np.allclose(per_obs, model.get_distribution().log_prob(y))
    with pytest.raises(DataError, match="both"):
        model.log_score(data=data)


def test_small_batch_projection_warning():
    y, data = toy_data()
    spec = normal_spec(
        loc="~ -1 + x + net(x)",
        networks={"net": [{"units": 4, "activation": "relu"}, {"units": 1}]},
    )
    model = build(y, data, spec)
    with pytest.warns(UserWarning, match="smaller than"):
        model.warn_small_batches(0)


# -- reporting ----------------------------------------------------------------------


def test_coef_param_filter_and_bounds():
    y, data = toy_data()
    model = build(y, data, normal_spec())
    assert set(model.coef("linear")) == {"loc", "scale"}
    assert set(model.coef("linear", param=2)) == {"scale"}
    with pytest.raises(ConfigError, match="outside"):
        model.coef("linear", param=3)
    with pytest.raises(ConfigError, match="unknown coefficient kind"):
        model.coef("bogus")


def test_smoothing_parameters_reported():
    y, data = toy_data()
    model = build(y, data, normal_spec(loc="~ 1 + s(z, df=6)"))
    sp = model.smoothing_parameters()
    assert set(sp) == {'s(z, bs="tp", df=6)'}
    assert sp['s(z, bs="tp", df=6)'] > 0.0


def test_partial_effects_selection():
    y, data = toy_data()
    model = build(y, data, normal_spec(loc="~ 1 + x + s(z)"))
    fit(model, TrainConfig(epochs=3, batch_size=40))
    effects = model.partial_effects(param=1)
    assert len(effects) == 1
    [eff] = effects
    assert eff.values.shape == (200,)
    assert set(eff.grid) == {"z"}
    assert model.partial_effects(param=1, which='s(z, bs="tp")')[0].term_id == eff.term_id
    assert model.partial_effects(param=2) == []


# -- persistence --------------------------------------------------------------------


def test_save_load_roundtrip(tmp_path):
    y, data = toy_data()
    spec = normal_spec(
        loc="~ 1 + x + s(z, df=6) + net(x, z)",
        networks={"net": [{"units": 5, "activation": "relu"}, {"units": 1}]},
    )
    model = build(y, data, spec, seed=4)
    fit(model, TrainConfig(epochs=4, batch_size=32))
    path = tmp_path / "model.json"
    model.save(path)

    from sddr.bundle import load_model

    loaded = load_model(path)
    assert np.array_equal(loaded.predict(data, "mean"), model.predict(data, "mean"))
    assert np.array_equal(loaded.predict(data, "stddev"), model.predict(data, "stddev"))
    assert loaded.coef("linear") == model.coef("linear")
    assert loaded.smoothing_parameters() == model.smoothing_parameters()


def test_loaded_model_refuses_training_paths(tmp_path):
    y, data = toy_data()
    model = build(y, data, normal_spec())
    path = tmp_path / "m.json"
    model.save(path)
    from sddr.bundle import load_model

    loaded = load_model(path)
    for call in (loaded.fitted, lambda: loaded.log_score(), lambda: fit(loaded)):
        with pytest.raises(DataError, match="loaded without training data"):
            call()


def test_custom_penalty_not_serializable(tmp_path):
    y, data = toy_data()
    spec = normal_spec(custom_penalty=(lambda v: 0.0, lambda v: {}))
    model = build(y, data, spec)
    with pytest.raises(ConfigError, match="custom penalty"):
        model.save(tmp_path / "m.json")


# -- ensembles ----------------------------------------------------------------------


def test_ensemble_needs_two_members():
    y, data = toy_data()
    with pytest.raises(ConfigError, match="at least 2"):
        ensemble(y, data, normal_spec(), n_ensemble=1)


def test_ensemble_member_seeds_and_weights():
    y, data = toy_data(n=50)
    config = TrainConfig(epochs=2, batch_size=25, seed=10)
    ens = ensemble(y, data, normal_spec(), n_ensemble=3, config=config)
    assert ens.seeds == [10, 11, 12]
    assert np.allclose(ens.weights, 1.0 / 3.0)
    mixture = get_ensemble_distribution(ens)
    assert isinstance(mixture, MixtureDistribution)
    # members differ: distinct initial weights come from distinct seeds
    m0 = ens.members[0].predict(data, "mean")
    m1 = ens.members[1].predict(data, "mean")
    assert not np.array_equal(m0, m1)


def test_ensemble_identical_seeds_collapse():
    y, data = toy_data(n=50)
    config = TrainConfig(epochs=2, batch_size=25)
    ens = ensemble(y, data, normal_spec(), n_ensemble=2, config=config, seeds=[7, 7])
    a, b = (m.predict(data, "mean") for m in ens.members)
    assert np.array_equal(a, b)
    mix = ens.get_distribution(data)
    assert np.allclose(mix.mean(), a)
    with pytest.raises(ConfigError, match="one entry per"):
        ensemble(y, data, normal_spec(), n_ensemble=3, config=config, seeds=[1, 2])


# -- last-layer refit ----------------------------------------------------------------


def refit_oracle(A, S, y):
    M = A.T @ A + S
    inv = np.linalg.inv(M)
    coef = inv @ A.T @ y
    edf = float(np.trace(inv @ (A.T @ A)))
    resid = y - A @ coef
    sigma2 = float(resid @ resid) / max(len(y) - edf, 1.0)
    return coef, sigma2 * inv, edf


def test_refit_matches_penalized_ls_oracle():
    y, data = toy_data(n=120, seed=3)
    model = build(y, data, normal_spec(loc="~ 1 + x + s(z, df=6)"))
    fit(model, TrainConfig(epochs=3, batch_size=60))
    res = last_layer_refit(model)

    [binding] = [b for b in model.bindings if 0 in b.param_idx]
    blocks = [bt.X for bt in binding.terms]
    A = np.hstack(blocks)
    p = A.shape[1]
    S = np.zeros((p, p))
    smooth = binding.terms[2]
    start = blocks[0].shape[1] + blocks[1].shape[1]
    w = smooth.block.penalty.shape[0]
    S[start : start + w, start : start + w] = smooth.block.lam * smooth.block.penalty
    want_coef, want_cov, want_edf = refit_oracle(A, S, y)

    assert np.max(np.abs(res.coef - want_coef)) <= 1e-8
    assert np.max(np.abs(res.cov - want_cov)) <= 1e-6
    assert abs(res.edf - want_edf) <= 1e-8
    assert set(res.bands) == {'s(z, bs="tp", df=6)'}
    band = res.bands['s(z, bs="tp", df=6)']
    assert np.all(band.lower <= band.fit) and np.all(band.fit <= band.upper)


def test_refit_intercept_only_variance():
    rng = np.random.default_rng(5)
    y = rng.normal(2.0, 1.0, 400)
    data = {"x": rng.normal(size=400)}
    model = build(y, data, normal_spec(loc="~ 1"))
    res = last_layer_refit(model)
    assert np.isclose(res.coef[0], y.mean(), atol=1e-10)
    assert np.isclose(res.edf, 1.0, atol=1e-10)
    sigma2 = np.sum((y - y.mean()) ** 2) / (400 - 1)
    assert np.isclose(res.cov[0, 0], sigma2 / 400, atol=1e-10)


def test_refit_includes_penultimate_features():
    y, data = toy_data()
    spec = normal_spec(
        loc="~ 1 + x + net(z)",
        networks={"net": [{"units": 3, "activation": "relu"}, {"units": 1}]},
    )
    model = build(y, data, spec, seed=2)
    fit(model, TrainConfig(epochs=2, batch_size=40))
    res = last_layer_refit(model)
    latent = [n for n in res.coef_names if ".z" in n]
    assert len(latent) == 3
    assert len(res.coef_names) == 2 + 3  # intercept + x + three latent columns


def test_refit_requires_normal_family():
    rng = np.random.default_rng(0)
    y = rng.poisson(3.0, 50).astype(float)
    spec = ModelSpec(formulas=formula_set({"rate": "~ 1 + x"}), family="poisson")
    model = build(y, {"x": rng.normal(size=50)}, spec)
    with pytest.raises(ConfigError, match="normal family"):
        last_layer_refit(model)


def test_refit_data_arguments_must_pair():
    y, data = toy_data()
    model = build(y, data, normal_spec())
    with pytest.raises(DataError, match="both"):
        last_layer_refit(model, data=data)
