import math

import numpy as np
import pandas as pd
import pytest
from hypothesis import given, strategies as st
from scipy import stats
from scipy.integrate import quad

from config import McmcConfig
from countmodel import (
    INTERCEPT, SUMMARY_COLUMNS, Dataset, ModelSpec, TrueParameters, build_model_matrix, dic, dic_from_deviance, fit,
    lindley_logpdf, lindley_mean, load_fit, mae_rmse, marginal_nbl_pmf, mixture_logpdf, nb_logpmf, predict,
    predict_and_score, sample_predictive, save_fit, simulate_rpnbl, split_80_20,
)
from shared import ValidationError

QUICK = McmcConfig(chains=2, iterations=1200, burn_in=400, max_iterations=1200, adapt_window=50)
STUDY = McmcConfig(chains=2, iterations=4000, burn_in=2000, max_iterations=8000, adapt_window=50)


# === DENSITIES ===
@given(st.integers(0, 200), st.floats(0.01, 500), st.floats(0.05, 200))
def test_nb_logpmf_matches_scipy(y, theta, phi):
    expected = stats.nbinom.logpmf(y, phi, phi / (phi + theta))
    assert nb_logpmf(y, theta, phi) == pytest.approx(expected, rel=1e-8, abs=1e-8)


def test_nb_logpmf_sums_to_one_and_poisson_limit():
    ys = np.arange(400)
    assert np.exp(nb_logpmf(ys, 12.0, 3.0)).sum() == pytest.approx(1.0, abs=1e-10)
    np.testing.assert_allclose(nb_logpmf(ys[:20], 7.0, 1e7), stats.poisson.logpmf(ys[:20], 7.0), atol=1e-4)


@pytest.mark.parametrize("y, theta, phi", [(-1, 1.0, 1.0), (1.5, 1.0, 1.0), (1, 0.0, 1.0), (1, 1.0, -2.0),
                                           (1, float("nan"), 1.0)])
def test_nb_logpmf_rejects_bad_input(y, theta, phi):
    with pytest.raises(ValueError):
        nb_logpmf(y, theta, phi)


@pytest.mark.parametrize("psi", [0.3, 1.0, 4.0])
@pytest.mark.parametrize("literal", [False, True])
def test_mixing_density_normalised_with_stated_mean(psi, literal):
    dens = lambda d: math.exp(float(mixture_logpdf(d, psi, literal))) if d > 0 else 0.0
    assert quad(dens, 0, np.inf)[0] == pytest.approx(1.0, abs=1e-7)
    mean = quad(lambda d: d * dens(d), 0, np.inf)[0]
    assert mean == pytest.approx(float(lindley_mean(psi, literal)), rel=1e-6)


def test_lindley_logpdf_closed_form():
    psi, d = 2.0, 0.7
    assert lindley_logpdf(d, psi) == pytest.approx(math.log(psi ** 2 / (1 + psi) * (1 + d) * math.exp(-psi * d)))
    with pytest.raises(ValueError):
        lindley_logpdf(0.0, psi)


@pytest.mark.parametrize("literal", [False, True])
def test_marginal_pmf_normalised(literal):
    total = sum(marginal_nbl_pmf(y, 3.0, 2.0, 1.5, literal) for y in range(400))
    assert total == pytest.approx(1.0, abs=1e-6)


def test_marginal_pmf_matches_generative_draws():
    lam, phi, psi = 3.0, 1.0, 1.7
    draws = sample_predictive(lam, phi, psi, np.random.default_rng(5), size=1_000_000)
    support = np.arange(draws.max() + 1)
    empirical = np.bincount(draws, minlength=len(support)) / len(draws)
    pmf = np.array([marginal_nbl_pmf(int(y), lam, phi, psi) for y in support])
    total_variation = 0.5 * (np.abs(empirical - pmf).sum() + max(0.0, 1.0 - pmf.sum()))
    assert total_variation <= 0.01
    assert draws.mean() == pytest.approx(lam * float(lindley_mean(psi)), rel=0.01)


def test_marginal_pmf_rejects_nonpositive():
    with pytest.raises(ValueError):
        marginal_nbl_pmf(1, 0.0, 1.0, 1.0)


# === DATA & SPEC ===
def test_spec_validation_and_names():
    spec = ModelSpec("RPNBL", ("A", "B"), ("B",))
    assert spec.param_names == [INTERCEPT, "A", "B", "sd:B", "phi", "psi"]
    assert ModelSpec("NB", ("A",)).param_names == [INTERCEPT, "A", "phi"]
    with pytest.raises(ValidationError):
        ModelSpec("RPNBL", ("A",))
    with pytest.raises(ValidationError):
        ModelSpec("NBL", ("A",), ("A",))
    with pytest.raises(ValidationError):
        ModelSpec("RPNBL", ("A",), ("C",))


def test_dataset_validation():
    with pytest.raises(ValidationError):
        Dataset([1, -1], [[0.0], [1.0]], ["D"])
    with pytest.raises(ValidationError):
        Dataset([1, 2], [[0.0], [2.0]], ["D"], {"D": "indicator"})
    data = Dataset([1, 2, 3], [[0.0, 5.0], [1.0, 6.0], [0.0, 7.0]], ["D", "E"], {"D": "indicator"})
    df = data.to_frame("total_impact")
    assert list(df.columns) == ["total_impact", "D", "E"]
    back = Dataset.from_frame(df, data.kinds)
    np.testing.assert_array_equal(back.X, data.X)
    assert back.kinds == {"D": "indicator", "E": "continuous"}


def test_split_sizes_and_determinism():
    data = Dataset(np.arange(100), np.arange(100.0)[:, None], ["x"])
    train, test = split_80_20(data, seed=2024)
    assert (len(train), len(test)) == (80, 20)
    assert sorted(np.r_[train.y, test.y].tolist()) == list(range(100))
    again, _ = split_80_20(data, seed=2024)
    np.testing.assert_array_equal(train.y, again.y)
    other, _ = split_80_20(data, seed=7)
    assert not np.array_equal(train.y, other.y)

    odd = Dataset(np.arange(11), np.zeros((11, 1)), ["x"])
    assert len(split_80_20(odd, seed=1)[0]) == 9
    with pytest.raises(ValidationError):
        split_80_20(Dataset(np.arange(9), np.zeros((9, 1)), ["x"]), seed=1)


def test_simulation_is_seeded():
    spec = ModelSpec("RPNBL", ("a", "b"), ("a",))
    truth = TrueParameters(np.array([1.0, 0.3, -0.2]), phi=3.0, psi=2.0, sigma=(0.4,))
    a = simulate_rpnbl(spec, truth, 300, seed=3, kinds={"b": "indicator"})
    b = simulate_rpnbl(spec, truth, 300, seed=3, kinds={"b": "indicator"})
    np.testing.assert_array_equal(a.y, b.y)
    assert set(np.unique(a.columns(["b"]))) <= {0.0, 1.0}


# === FITTING ===
@pytest.fixture(scope="module")
def nb_fit():
    spec = ModelSpec("NB", ("x",))
    data = simulate_rpnbl(spec, TrueParameters(np.array([1.0, 0.5]), phi=4.0), 400, seed=11)
    return spec, data, fit(spec, data, QUICK, seed=1)


def test_nb_recovers_coefficients(nb_fit):
    _, data, result = nb_fit
    summary = result.summary()
    assert list(summary.columns) == SUMMARY_COLUMNS
    means = dict(zip(summary["parameter"], summary["mean"]))
    assert means[INTERCEPT] == pytest.approx(1.0, abs=0.2)
    assert means["x"] == pytest.approx(0.5, abs=0.15)
    assert means["phi"] == pytest.approx(4.0, rel=0.5)
    assert result.draws.shape == (2, 800, 3)
    assert 0 < result.p_d < 10
    assert result.dic == pytest.approx(result.d_bar + result.p_d)
    assert dic(result) == result.dic


def test_fit_is_seeded_and_thread_invariant(nb_fit):
    spec, data, result = nb_fit
    again = fit(spec, data, QUICK, seed=1, threads=1)
    np.testing.assert_array_equal(again.draws, result.draws)


def test_rank_deficient_design_rejected():
    X = np.random.default_rng(0).standard_normal((30, 1))
    data = Dataset(np.ones(30, dtype=int), np.hstack([X, 2 * X]), ["a", "b"])
    with pytest.raises(ValidationError):
        fit(ModelSpec("NB", ("a", "b")), data, QUICK)


def test_nbl_and_rpnbl_run():
    spec = ModelSpec("RPNBL", ("x", "d"), ("x",))
    truth = TrueParameters(np.array([1.5, 0.4, -0.5]), phi=5.0, psi=3.0, sigma=(0.3,))
    data = simulate_rpnbl(spec, truth, 250, seed=4, kinds={"d": "indicator"})
    mcmc = McmcConfig(chains=2, iterations=400, burn_in=200, max_iterations=400, adapt_window=20)
    for s in (ModelSpec("NBL", ("x", "d")), spec):
        result = fit(s, data, mcmc, seed=9)
        assert np.isfinite(result.dic)
        assert np.all(result.param("psi") > 0)
        assert result.delta_mean.shape == (250,)
        pred = predict(result, data)
        assert pred.shape == (250,) and np.all(pred > 0)
    assert np.all(result.sigma_draws() > 0)
    assert result.v_mean.shape == (250, 1)


def test_dic_arithmetic_and_scores():
    assert dic_from_deviance(np.array([10.0, 12.0]), 9.0) == (13.0, 2.0, 11.0)
    mae, rmse = mae_rmse([1, 2, 3], [1, 1, 1])
    assert mae == pytest.approx(1.0)
    assert rmse == pytest.approx(math.sqrt(5 / 3))


def test_save_and_load_round_trip(nb_fit, tmp_path):
    spec, data, result = nb_fit
    paths = save_fit(result, {"x": "continuous"}, str(tmp_path / "total_impact_NB"))
    assert all(p.startswith(str(tmp_path)) for p in paths)
    back, kinds = load_fit(str(tmp_path / "total_impact_NB"))
    assert back.spec == spec
    assert kinds == {"x": "continuous"}
    np.testing.assert_allclose(back.draws, result.draws, rtol=1e-9)
    assert back.dic == pytest.approx(result.dic)
    np.testing.assert_allclose(predict(back, data), predict(result, data), rtol=1e-6)
    assert predict_and_score(back, data) == pytest.approx(predict_and_score(result, data))


def _covered(result, truth):
    summary = result.summary().set_index("parameter")
    return {name: summary.loc[name, "q2.5"] <= value <= summary.loc[name, "q97.5"] for name, value in truth.items()}


@pytest.mark.slow
def test_rpnbl_parameter_recovery():
    spec = ModelSpec("RPNBL", ("x",), ("x",))
    truth = TrueParameters(np.array([-1.7, 0.5]), phi=1.0, psi=1.7, sigma=(0.1,))
    values = {INTERCEPT: -1.7, "x": 0.5, "sd:x": 0.1, "phi": 1.0, "psi": 1.7}
    hits = dict.fromkeys(values, 0)
    converged = 0
    for rep in range(100):
        data = simulate_rpnbl(spec, truth, 2000, seed=1000 + rep)
        result = fit(spec, data, STUDY, seed=rep)
        converged += result.converged
        for name, inside in _covered(result, values).items():
            hits[name] += inside
    assert converged >= 90
    assert all(count >= 90 for count in hits.values()), hits


@pytest.mark.slow
def test_dic_orders_variants_by_generating_structure():
    rich = ModelSpec("RPNBL", ("x",), ("x",))
    rich_truth = TrueParameters(np.array([0.5, 0.3]), phi=2.0, psi=1.0, sigma=(0.6,))
    plain_truth = TrueParameters(np.array([1.0, 0.3]), phi=4.0)
    variants = {"NB": ModelSpec("NB", ("x",)), "NBL": ModelSpec("NBL", ("x",)), "RPNBL": rich}
    ordered = lindley_first = nb_not_worse = 0
    for rep in range(100):
        data = simulate_rpnbl(rich, rich_truth, 1000, seed=2000 + rep)
        d = {name: fit(spec, data, STUDY, seed=rep).dic for name, spec in variants.items()}
        ordered += d["RPNBL"] <= d["NBL"] <= d["NB"]
        lindley_first += d["NBL"] < d["NB"]

        plain = simulate_rpnbl(variants["NB"], plain_truth, 1000, seed=3000 + rep)
        nb, nbl = (fit(variants[name], plain, STUDY, seed=rep).dic for name in ("NB", "NBL"))
        nb_not_worse += nb <= nbl + 2.0
    assert ordered >= 85
    assert lindley_first >= 90
    assert nb_not_worse >= 85


# === MODEL MATRIX ===
def test_model_matrix_dummies_and_cleaning(caplog):
    records = pd.DataFrame({
        "total_impact": [2.5, 3.5, 0.4, 7.0, 1.0],
        "SSHS": [1, 3, -1, 3, 1],
        "coast": ["Gulf", "East", "Gulf", "NonCoast", "Pacific"],
        "Pop_C": [1000.0, 5000.0, 200.0, 8000.0, 300.0],
        "DISTANCE": [10.0, 20.0, np.nan, 40.0, 50.0],
        "Flat": [1.0] * 5,
    })
    kinds = {"SSHS_1": "indicator", "SSHS_3": "indicator", "Coast_Gulf_of_Mexico": "indicator",
             "Ln_Pop_C": "continuous", "DISTANCE": "continuous", "Flat": "continuous", "Income": "continuous"}
    data = build_model_matrix(records, "total_impact", kinds)
    assert data.names == ["SSHS_1", "SSHS_3", "Coast_Gulf_of_Mexico", "Ln_Pop_C", "DISTANCE"]
    assert data.y.tolist() == [2, 4, 7, 1]
    np.testing.assert_allclose(data.columns(["Ln_Pop_C"])[:, 0], np.log([1000.0, 5000.0, 8000.0, 300.0]))
    assert data.columns(["SSHS_3"])[:, 0].tolist() == [0.0, 1.0, 1.0, 0.0]
    assert data.kinds["SSHS_1"] == "indicator"
    assert "MATRIX_WARNING" in caplog.text
    with pytest.raises(ValidationError):
        build_model_matrix(records, "Degree_difference", kinds)


def test_negative_responses_clipped_and_logged(caplog):
    records = pd.DataFrame({"total_impact": [-2.4, 3.0, -0.6, 5.0], "DISTANCE": [1.0, 2.0, 3.0, 4.0]})
    data = build_model_matrix(records, "total_impact", {"DISTANCE": "continuous"})
    assert data.y.tolist() == [0, 3, 0, 5]
    assert "2 NEGATIVE VALUE(S) CLIPPED" in caplog.text.upper()
