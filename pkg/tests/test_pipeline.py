import numpy as np
import pytest

from gcfpca.errors import FitError, ValidationError
from gcfpca.pipeline import PipelineConfig, _fill_failed_columns, run_local_steps, run_pipeline
from gcfpca.simlab import SimScenario, generate_dataset, simulation_config


@pytest.fixture(scope="module")
def poisson_run():
    sc = SimScenario(I=50, K=40, family="poisson_log", seed=6)
    data, truth = generate_dataset(sc)
    return data, truth, run_pipeline(data, simulation_config(sc))


def test_pipeline_result_shapes(poisson_run):
    data, _, res = poisson_run
    assert res.bhat.shape == (50, 40) and res.eigensystem.L == 4
    assert res.fit.scores.shape == (50, 4)
    assert set(res.timings) == {"bins", "local", "fpca", "joint", "total"}
    assert res.n_failed_bins == 0 and res.filled_bins == ()


def test_pipeline_recovers_poisson_linear_predictor(poisson_run):
    _, truth, res = poisson_run
    from gcfpca.joint_glmm import predict_linear_predictor

    mise = np.mean((predict_linear_predictor(res.fit) - truth.eta) ** 2)
    assert mise < 0.5 * np.mean((truth.eta - truth.eta.mean()) ** 2)


def test_thread_count_does_not_change_local_steps():
    sc = SimScenario(I=40, K=50, seed=8)
    data, _ = generate_dataset(sc)
    a = run_local_steps(data, simulation_config(sc))
    b = run_local_steps(data, simulation_config(sc, threads=4))
    np.testing.assert_array_equal(a[2], b[2])
    np.testing.assert_array_equal(a[4].eigenfunctions, b[4].eigenfunctions)


def test_outcomes_must_suit_the_family():
    data, _ = generate_dataset(SimScenario(I=10, K=20, family="poisson_log"))
    data.outcomes[0, 0] = 7.0
    with pytest.raises(ValidationError):
        run_pipeline(data, PipelineConfig(family="bernoulli_logit"))


def test_failed_columns_are_interpolated():
    bhat = np.array([[0.0, 9.0, 2.0, 3.0], [1.0, 9.0, 1.0, 1.0]])
    mask = np.array([[False, True, False, False]] * 2)
    filled, m = _fill_failed_columns(bhat, mask, [1])
    np.testing.assert_array_equal(filled[:, 1], [1.0, 1.0])
    assert not m.any()
    with pytest.raises(FitError):
        _fill_failed_columns(bhat, mask, [0, 1, 2, 3])


def test_config_serialises():
    d = PipelineConfig().to_dict()
    assert d["pve"] == 0.95 and d["joint"]["max_outer"] == 50 and d["local"] is not None
