import dataclasses
import json

import numpy as np
import pytest

from gcfpca.errors import ValidationError
from gcfpca.fpca import align_sign
from gcfpca.joint_glmm import CurveBand, fixed_effect_curves, predict_linear_predictor
from gcfpca.pipeline import run_pipeline
from gcfpca.simlab import (
    DEFAULT_TRUTH_COEFS,
    M_TRUE,
    TABLE_COLUMNS,
    SimScenario,
    aggregate,
    compute_metrics,
    generate_dataset,
    load_scenario,
    replicate_seed,
    run_replications,
    save_scenario,
    simulation_config,
    table_row,
    truth_curves,
    write_table,
)

from .oracles import naive_metrics


@pytest.fixture(scope="module")
def small_fit():
    sc = SimScenario(I=60, K=50, seed=3)
    data, truth = generate_dataset(sc)
    res = run_pipeline(data, simulation_config(sc))
    return sc, data, truth, res.fit


def test_score_variances_match_truth():
    sc = SimScenario(I=10_000, K=20, seed=1)
    _, truth = generate_dataset(sc)
    np.testing.assert_allclose(truth.scores.var(axis=0), sc.true_lambda, rtol=0.05)


def test_noiseless_zero_scenario():
    sc = SimScenario(I=5, K=8, family="gaussian_identity", true_lambda=(0, 0, 0, 0), truth_coefs=np.zeros((2, M_TRUE)), noise_sd=0.0)
    data, truth = generate_dataset(sc)
    assert not data.outcomes.any() and not truth.eta.any()


def test_generation_is_deterministic():
    sc = SimScenario(I=20, K=30, seed=9)
    a, _ = generate_dataset(sc)
    b, _ = generate_dataset(sc)
    np.testing.assert_array_equal(a.outcomes, b.outcomes)
    c, _ = generate_dataset(dataclasses.replace(sc, seed=10))
    assert not np.array_equal(a.outcomes, c.outcomes)
    d1, _ = generate_dataset(sc, replicate_seed(sc, 4))
    d2, _ = generate_dataset(sc, replicate_seed(sc, 4))
    np.testing.assert_array_equal(d1.outcomes, d2.outcomes)


@pytest.mark.parametrize("family", ["bernoulli_logit", "poisson_log", "gaussian_identity"])
def test_outcome_supports(family):
    data, _ = generate_dataset(SimScenario(I=30, K=20, family=family))
    y = data.outcomes
    if family == "bernoulli_logit":
        assert set(np.unique(y)) <= {0.0, 1.0}
    elif family == "poisson_log":
        assert np.all(y >= 0) and np.all(y == np.round(y))
    else:
        assert np.unique(y).size == y.size


def test_default_truth_has_balanced_event_rate():
    beta = truth_curves(SimScenario())
    assert abs(np.mean(1 / (1 + np.exp(-beta[0]))) - 0.5) < 0.02
    assert np.asarray(DEFAULT_TRUTH_COEFS).shape == (2, M_TRUE)


def test_metrics_match_naive_loops(small_fit):
    sc, data, truth, fit = small_fit
    rep = compute_metrics(fit, truth)
    bands = fixed_effect_curves(fit, fit.grid)
    mise, ise, ac, mphi = naive_metrics(
        predict_linear_predictor(fit),
        truth.eta,
        [b.estimate for b in bands],
        truth.beta,
        [b.lower for b in bands],
        [b.upper for b in bands],
        fit.eigensystem.eigenfunctions,
        truth.phi,
    )
    assert abs(rep.mise_eta - mise) < 1e-12
    np.testing.assert_allclose(rep.ise_beta, ise, atol=1e-12)
    np.testing.assert_allclose(rep.ac_beta, ac, atol=1e-12)
    assert abs(rep.mise_phi - mphi) < 1e-12


def test_metrics_are_sign_flip_invariant(small_fit):
    _, _, truth, fit = small_fit
    base = compute_metrics(fit, truth)
    flipped = dataclasses.replace(fit, eigensystem=align_sign(fit.eigensystem, -fit.eigensystem.eigenfunctions), scores=-fit.scores)
    other = compute_metrics(flipped, truth)
    assert other.mise_phi == pytest.approx(base.mise_phi, abs=1e-14)
    assert other.mise_eta == pytest.approx(base.mise_eta, abs=1e-12)
    np.testing.assert_allclose(other.score_corr, base.score_corr, atol=1e-12)


def test_ise_of_unit_shift_is_one(small_fit):
    _, _, truth, fit = small_fit
    cis = [CurveBand(fit.grid, truth.beta[r] + 1.0, np.zeros(fit.grid.size), truth.beta[r] + 0.5, truth.beta[r] + 1.5, 1.96) for r in range(2)]
    rep = compute_metrics(fit, truth, cis=cis)
    np.testing.assert_allclose(rep.ise_beta, [1.0, 1.0], atol=1e-12)
    np.testing.assert_array_equal(rep.ac_beta, [0.0, 0.0])


def test_grid_mismatch_raises(small_fit):
    _, _, truth, fit = small_fit
    bad = dataclasses.replace(truth, eta=truth.eta[:, :-1], phi=truth.phi[:-1])
    with pytest.raises(ValidationError):
        compute_metrics(fit, bad)


def test_aggregate_single_replicate():
    med, qs = aggregate([{"a": 2.0, "b": 3.0}])
    assert med == {"a": 2.0, "b": 3.0}
    assert qs["a"] == [2.0] * 4
    assert aggregate([None]) == ({}, {})


def test_replications_independent_of_parallelism():
    sc = SimScenario(I=30, K=30, seed=2)
    a = run_replications(sc, 3, parallelism=1)
    b = run_replications(sc, 3, parallelism=3)
    assert a.n_ok == b.n_ok == 3
    for ra, rb in zip(a.rows, b.rows):
        ra, rb = dict(ra), dict(rb)
        ra.pop("time"), rb.pop("time")
        assert ra == rb
    with pytest.raises(ValidationError):
        run_replications(sc, 0)


def test_scenario_round_trip(tmp_path):
    sc = SimScenario(I=7, K=9, family="poisson_log", seed=4, name="x")
    save_scenario(sc, tmp_path / "s.json")
    assert load_scenario(tmp_path / "s.json") == sc
    (tmp_path / "bad.json").write_text(json.dumps({"I": 3, "colour": "red"}))
    with pytest.raises(ValidationError):
        load_scenario(tmp_path / "bad.json")


@pytest.mark.parametrize("kw", [dict(I=1), dict(eigenbasis="haar"), dict(true_lambda=(1, 1)), dict(noise_sd=-1.0), dict(family="gamma")])
def test_invalid_scenarios(kw):
    with pytest.raises(ValidationError):
        SimScenario(**kw)


def test_table_writer(tmp_path):
    row = table_row("I=100", {"time": 60.0, "mise_eta": 0.3, "ise_beta0": 0.05, "ac_beta0": 0.9, "ise_beta1": 0.1, "ac_beta1": 0.95, "mise_phi": 0.02})
    assert row["time_min"] == 1.0 and row["mise_eta_x10"] == pytest.approx(3.0)
    write_table(tmp_path / "t.csv", [row], header_lines=["gcfpca test"])
    lines = (tmp_path / "t.csv").read_text().splitlines()
    assert lines[0] == "# gcfpca test"
    assert lines[1] == ",".join(TABLE_COLUMNS)
    assert float(lines[2].split(",")[2]) == row["mise_eta_x10"]


def medians(sc, n_reps, key):
    table = run_replications(sc, n_reps, parallelism=4)
    assert table.n_ok >= 0.8 * n_reps
    return table.medians[key]


@pytest.mark.slow
def test_slope_error_falls_with_more_subjects():
    vals = [medians(SimScenario(I=I, K=100, seed=11), 10, "ise_beta1") for I in (100, 200, 500)]
    assert vals[0] > vals[1] > vals[2]


@pytest.mark.slow
def test_linear_predictor_error_falls_with_denser_grid():
    vals = [medians(SimScenario(I=100, K=K, seed=12), 8, "mise_eta") for K in (200, 500, 1000)]
    assert vals[0] > vals[1] > vals[2]
