import numpy as np
import pytest

from stdownscale.assembly import GridCovariate, MisalignmentError, ModelSpec, ObservationTable, assemble
from stdownscale.inference import FitConfig, fit
from stdownscale.mesh import build_mesh
from stdownscale.predict import (
    DEFAULT_THRESHOLDS, PredictionError, PredictionRequest, SampleCube, difference,
    population_weighted, predict, prediction_design, read_cube, sample_joint, summarize,
    summary_rasters, write_cube,
)

from oracles import type7_quantile


def fitted(label="ii", transform="none", n_sites=30, n_time=1, ctm_fn=None, seed=3):
    rng = np.random.default_rng(seed)
    s = rng.uniform(1, 19, (n_sites, 2))
    mesh = build_mesh(s, 5.0, 10.0, 3.0)
    ids = np.repeat(np.arange(n_sites), n_time)
    t = np.tile(np.arange(n_time), n_sites)
    loc = s[ids]
    eta = 1.0 + 0.1 * loc[:, 0] + 0.2 * np.sin(loc[:, 1] / 3) + 0.1 * rng.standard_normal(len(ids))
    value = np.exp(eta) if transform == "log" else eta**2 if transform == "sqrt" else eta
    obs = ObservationTable(ids, loc[:, 0], loc[:, 1], t, value, transform)
    vals = rng.uniform(1, 3, (n_time, 10, 10)) if ctm_fn is None else ctm_fn((n_time, 10, 10))
    cov = GridCovariate("ctm", 0, 0, 2.0, 2.0, vals)
    model = assemble(obs, [cov], mesh, n_time, ModelSpec.preset(label, varying=["ctm"]))
    return model, fit(model, FitConfig(strategy="eb")), cov


@pytest.fixture(scope="module")
def bundle_ii():
    return fitted()


def cube_of(arr, times=None):
    arr = np.asarray(arr, dtype=float)
    return SampleCube(arr, 0, "", tuple(range(arr.shape[2])) if times is None else times)


# -- summaries ----------------------------------------------------------------------


def test_summary_of_one_to_hundred():
    x = np.arange(1, 101, dtype=float)
    s = summarize(cube_of(x[:, None, None]), thresholds=(50.0,))
    assert s.exceedance[50.0][0, 0] == 0.5
    assert s.q025[0, 0] == pytest.approx(3.475, abs=1e-12)
    assert s.q025[0, 0] == pytest.approx(type7_quantile(x, 0.025), abs=1e-12)
    assert s.q975[0, 0] == pytest.approx(type7_quantile(x, 0.975), abs=1e-12)
    assert s.median[0, 0] == 50.5
    assert s.sd[0, 0] == pytest.approx(np.std(x, ddof=1), rel=1e-14)


def test_constant_samples():
    s = summarize(cube_of(np.full((20, 1, 1), 7.0)), thresholds=(6.9,))
    assert s.exceedance[6.9][0, 0] == 1.0 and s.median[0, 0] == 7.0 and s.sd[0, 0] == 0.0


def test_infinite_thresholds_and_ordering():
    x = np.random.default_rng(0).normal(size=(500, 4, 2))
    s = summarize(cube_of(x), thresholds=(-np.inf, np.inf))
    assert np.all(s.exceedance[-np.inf] == 1.0) and np.all(s.exceedance[np.inf] == 0.0)
    assert np.all((s.q025 <= s.median) & (s.median <= s.q975))


def test_default_thresholds():
    assert DEFAULT_THRESHOLDS["no2"] == (40.0,) and DEFAULT_THRESHOLDS["pm25"] == (10.0,)
    with pytest.raises(PredictionError):
        PredictionRequest([[0.0, 0.0]], thresholds=(0.0,))


# -- aggregates and differences ---------------------------------------------------------


def test_population_weighted_examples():
    c = cube_of(np.array([[[10.0], [20.0]]]))
    assert population_weighted(c, [1, 3]).samples[0, 0] == 17.5
    rng = np.random.default_rng(1)
    x = cube_of(rng.normal(size=(50, 6, 2)))
    np.testing.assert_array_equal(population_weighted(x, np.ones(6)).samples, x.samples.sum(1) / 6)
    w = np.zeros(6)
    w[4] = 2.5
    np.testing.assert_allclose(population_weighted(x, w).samples, x.samples[:, 4, :], rtol=1e-15, atol=0)
    with pytest.raises(PredictionError):
        population_weighted(x, np.zeros(6))
    with pytest.raises(MisalignmentError):
        population_weighted(x, np.ones(5))


def test_difference_examples():
    rng = np.random.default_rng(2)
    base = rng.normal(size=(200, 3, 1))
    c = cube_of(np.concatenate([base, base + 2.0], axis=2))
    assert np.all(difference(c, 0, 0).samples == 0.0)
    d = difference(c, 0, 1)
    np.testing.assert_allclose(d.summary.median, 2.0, atol=1e-12)
    with pytest.raises(PredictionError):
        difference(c, 0, 5)


def test_paired_difference_narrower_than_independent():
    rng = np.random.default_rng(3)
    n = 4000
    a = rng.normal(10, 2, size=(n, 5))
    b = 0.9 * (a - 10) + 9 + rng.normal(0, 0.8, size=(n, 5))  # positively correlated years
    c = cube_of(np.stack([a, b], axis=2))
    paired = difference(c, 0, 1).summary
    indep = b[rng.permutation(n)] - a
    q = np.quantile(indep, [0.025, 0.975], axis=0)
    assert np.all(paired.q975[:, 0] - paired.q025[:, 0] < q[1] - q[0])


# -- sampling -----------------------------------------------------------------------------


def test_sampling_mean_within_mc_error(bundle_ii):
    _, b, _ = bundle_ii
    assert b.K == 1
    n = 100_000
    draws = sample_joint(b, n, seed=7)
    cond = b.conditional(0)
    se = np.sqrt(np.diag(np.linalg.inv(cond.Q.toarray())) / n)
    assert np.all(np.abs(draws.theta.mean(0) - cond.mean) <= 3 * se + 1e-12)


def test_sampling_covariance_top_entries(bundle_ii):
    _, b, _ = bundle_ii
    S = np.linalg.inv(b.conditional(0).Q.toarray())
    iu = np.triu_indices_from(S)
    top = np.argsort(-np.abs(S[iu]))[:5]
    draws = sample_joint(b, 100_000, seed=8).theta
    C = np.cov(draws.T)
    for t in top:
        i, j = iu[0][t], iu[1][t]
        assert C[i, j] == pytest.approx(S[i, j], rel=0.05)


def test_seed_determinism(bundle_ii):
    _, b, _ = bundle_ii
    req = PredictionRequest([[5.0, 5.0], [10.0, 12.0]], covariates=[bundle_ii[2]])
    x = predict(b, req, 50, seed=11)
    y = predict(b, req, 50, seed=11)
    assert x.samples.tobytes() == y.samples.tobytes()
    assert x.fingerprint == y.fingerprint
    z = predict(b, req, 50, seed=12)
    assert z.samples.tobytes() != x.samples.tobytes()


def test_interpolation_at_observation(bundle_ii):
    model, b, cov = bundle_ii
    i = 4
    loc = model.obs_locations[i]
    A_star, _ = prediction_design(b, PredictionRequest([loc], covariates=[cov]))
    np.testing.assert_allclose(A_star.toarray()[0], model.design().toarray()[i], atol=1e-12)
    fitted_value = A_star.toarray()[0] @ b.means[0]
    cube = predict(b, PredictionRequest([loc], covariates=[cov]), 20_000, seed=1)
    se = cube.samples.std() / np.sqrt(20_000)
    assert abs(cube.samples.mean() - fitted_value) <= 4 * se


def test_zero_covariate_reduces_to_intercept():
    model, b, _ = fitted(label="i", ctm_fn=np.ones)
    zero = GridCovariate("ctm", 0, 0, 2.0, 2.0, np.zeros((1, 10, 10)))
    req = PredictionRequest([[3.0, 3.0], [15.0, 9.0]], covariates=[zero])
    cube = predict(b, req, 100, seed=4)
    beta0 = sample_joint(b, 100, seed=4).theta[:, 0]
    np.testing.assert_allclose(cube.samples[:, 0, 0], beta0, rtol=1e-14)
    np.testing.assert_allclose(cube.samples[:, 1, 0], beta0, rtol=1e-14)


def test_log_model_median_identity():
    model, b, cov = fitted(transform="log")
    req = PredictionRequest([[6.0, 7.0], [12.0, 4.0]], covariates=[cov])
    raw = predict(b, PredictionRequest(req.locations, covariates=[cov], inverse_transform=False),
                  2001, seed=5)
    orig = predict(b, req, 2001, seed=5)
    np.testing.assert_allclose(summarize(orig).median, np.exp(summarize(raw).median), rtol=1e-12)


def test_noise_flag_widens(bundle_ii):
    _, b, cov = bundle_ii
    req = PredictionRequest([[9.0, 9.0]], covariates=[cov])
    plain = predict(b, req, 4000, seed=2).samples.std()
    noisy = predict(b, req, 4000, seed=2, include_noise=True).samples.std()
    assert noisy > plain


def test_spatial_correlation_preserved(bundle_ii):
    _, b, cov = bundle_ii
    pts = [[8.0, 8.0], [8.5, 8.0], [18.0, 18.0]]
    req = PredictionRequest(pts, covariates=[GridCovariate("ctm", 0, 0, 2, 2, np.ones((1, 10, 10)))])
    x = predict(b, req, 5000, seed=3).samples[:, :, 0]
    r = np.corrcoef(x.T)
    assert r[0, 1] > r[0, 2]


def test_unlocatable_prediction_points(bundle_ii):
    _, b, cov = bundle_ii
    req = PredictionRequest([[5.0, 5.0], [-50.0, 5.0], [6.0, 6.0], [500.0, 1.0]], covariates=[cov])
    with pytest.raises(PredictionError) as err:
        predict(b, req, 10)
    assert err.value.indices == [1, 3]


# -- export -------------------------------------------------------------------------------


def test_cube_round_trip(tmp_path, bundle_ii):
    _, b, cov = bundle_ii
    cube = predict(b, PredictionRequest([[5.0, 5.0], [7.0, 3.0]], covariates=[cov]), 30, seed=9)
    write_cube(tmp_path / "c.bin", cube)
    raw = (tmp_path / "c.bin").read_bytes()
    assert len(raw) == 8 + 32 + 30 * 2 * 1 * 8
    back = read_cube(tmp_path / "c.bin")
    assert back.samples.tobytes() == cube.samples.tobytes() and back.seed == 9


def test_summary_rasters_layout():
    x = np.random.default_rng(0).normal(size=(40, 6, 2))
    s = summarize(cube_of(x), thresholds=(0.5,))
    template = GridCovariate("t", 0, 0, 1, 1, np.zeros((2, 3)))
    out = summary_rasters(s, template, (0, 1))
    assert set(out) == {f"pred_{k}_t{t}" for k in ("median", "mean", "sd", "q025", "q975", "exceed_0.5")
                        for t in (0, 1)}
    np.testing.assert_array_equal(out["pred_mean_t1"].values[0], s.mean[:, 1].reshape(2, 3))
    with pytest.raises(MisalignmentError):
        summary_rasters(s, GridCovariate("t", 0, 0, 1, 1, np.zeros((2, 2))), (0, 1))
