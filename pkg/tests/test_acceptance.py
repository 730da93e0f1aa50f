"""Acceptance checks, one group per criterion.

Test names carry the criterion number (``test_criterion_<n>_...``); the
conftest hook prints one PASS/FAIL line per criterion at the end of the run.
Criterion 1 runs the full ten-dataset simulation study (several minutes).
"""

import time

import numpy as np
import pytest
from scipy.integrate import quad
from scipy.linalg import block_diag

from stdownscale.assembly import GridCovariate, ModelSpec, ObservationTable, assemble
from stdownscale.cli import main, predict_rows
from stdownscale.evaluation import (
    Scenario, SimulationConfig, compute_metrics, generate_dataset, run_model_comparison,
    stratified_splits,
)
from stdownscale.inference import (
    FIXED_PRECISION, FieldHyper, FitConfig, HyperParameters, conditional_posterior, fit,
    log_marginal_likelihood,
)
from stdownscale.mesh import build_mesh
from stdownscale.predict import SampleCube, difference, sample_joint
from stdownscale.priors import PriorConfig, ar1_density, range_density, sd_density
from stdownscale.spde import MaternParams, assemble_fem, matern_correlation, precision_alpha2

from oracles import dense_ar1_cov, dense_conditional, dense_fem, dense_log_evidence, dense_precision


# -- 1. simulation-study reproduction ---------------------------------------------------


@pytest.fixture(scope="session")
def simstudy():
    t0 = time.time()
    cfg = SimulationConfig()
    scenario = Scenario(cfg)
    datasets = [generate_dataset(cfg, i, scenario) for i in range(cfg.n_datasets)]
    table = run_model_comparison(datasets)
    elapsed = time.time() - t0
    print("\n" + table.to_text() + f"elapsed {elapsed:.0f} s")
    return table, elapsed


def test_criterion_1_all_fits_succeed(simstudy):
    table, elapsed = simstudy
    assert not table.failures
    assert all(len(table.estimates[m]) == 10 for m in ("i", "ii", "iii"))
    assert elapsed <= 30 * 60


def test_criterion_1_model_i_overestimates_noise(simstudy):
    table, _ = simstudy
    assert table.median_estimate("i", "sigma2_eps") > 0.4


def test_criterion_1_model_iii_biases(simstudy):
    table, _ = simstudy
    assert abs(table.median_bias("iii", "beta0")) < 0.05
    assert abs(table.median_bias("iii", "beta1")) < 0.02
    assert abs(table.median_bias("iii", "sigma2_eps")) < 0.02


def test_criterion_1_model_ii_overestimates_range(simstudy):
    table, _ = simstudy
    assert table.median_bias("ii", "range0") > 0


def test_criterion_1_ordering_iii_beats_i(simstudy):
    table, _ = simstudy
    for p in ("beta0", "beta1", "sigma2_eps"):
        assert abs(table.median_bias("iii", p)) < abs(table.median_bias("i", p))


def test_criterion_1_spatiotemporal_model_iv_not_worse_than_iii():
    # coefficients vary in time (AR(1) fields); compare held-out RMSE
    cfg = SimulationConfig(ncols=50, nrows=50, n_sites=200, n_hotspots=10, sim_max_edge=1.5,
                           sim_buffer=10.0, n_time=3, rho=0.3, seed=11)
    obs, cov, _ = generate_dataset(cfg, 0)
    mesh = build_mesh(obs.locations[obs.t == 0], 5.0, 12.0, 10.0, 1.0)
    splits = stratified_splits(list(obs.t.astype(str)), 3, 0.8, seed=0)
    rmse = {}
    for label in ("iii", "iv"):
        vals = []
        for i, (tr, va) in enumerate(splits):
            model = assemble(obs.subset(tr), [cov], mesh, 3, ModelSpec.preset(label, varying=["ctm"]))
            bundle = fit(model, FitConfig(strategy="eb"))
            held = obs.subset(va)
            pred = predict_rows(bundle, held, [cov], 200, i, False)
            vals.append(compute_metrics(pred, held.value)[1])
        rmse[label] = float(np.median(vals))
    print(f"\nheld-out RMSE: {rmse}")
    assert rmse["iv"] <= rmse["iii"]


# -- 2. GMRF vs Matérn fidelity -----------------------------------------------------------


def test_criterion_2_gmrf_matches_matern():
    t0 = time.time()
    g = np.linspace(0, 1, 21)
    s = np.array([(x, y) for y in g for x in g])
    mesh = build_mesh(s, 0.05, 0.1, 0.5)
    inside = np.all((mesh.vertices >= 0) & (mesh.vertices <= 1), axis=1)
    assert inside.sum() >= 400
    p = MaternParams(0.4, 1.0)
    S = np.linalg.inv(precision_alpha2(assemble_fem(mesh), p).toarray())
    v = mesh.site_vertex
    C = S[np.ix_(v, v)]
    sd = np.sqrt(np.diag(C))
    R = C / np.outer(sd, sd)
    D = np.hypot(s[:, None, 0] - s[None, :, 0], s[:, None, 1] - s[None, :, 1])
    sel = (D >= 0.04) & (D <= 0.5)
    rel = np.abs(R[sel] / matern_correlation(D[sel], p) - 1)
    print(f"\nmax relative correlation error {rel.max():.4f} over {sel.sum()} pairs")
    assert rel.max() <= 0.10
    assert time.time() - t0 <= 60


# -- 3. dense-oracle equivalence -------------------------------------------------------------


def _small_instance(label, n_time, seed):
    rng = np.random.default_rng(seed)
    n_sites = 12
    s = rng.uniform(0, 10, (n_sites, 2))
    mesh = build_mesh(s, 6.0, 12.0, 2.0)
    ids = np.repeat(np.arange(n_sites), n_time)
    t = np.tile(np.arange(n_time), n_sites)
    y = 2 + 0.3 * s[ids, 0] + 0.4 * rng.standard_normal(len(ids))
    obs = ObservationTable(ids, s[ids, 0], s[ids, 1], t, y)
    cov = GridCovariate("ctm", -5, -5, 2.0, 2.0, rng.uniform(1, 3, (n_time, 10, 10)))
    return assemble(obs, [cov], mesh, n_time, ModelSpec.preset(label, varying=["ctm"]))


def _dense_prior(model, hp):
    c, G = dense_fem(model.mesh.vertices, model.mesh.triangles)
    blocks = [np.eye(model.n_fixed) * FIXED_PRECISION]
    for f, fh in zip(model.fields, hp.fields):
        m = MaternParams(fh.range, fh.sigma)
        Q = dense_precision(c, G, m.kappa, m.tau)
        if f.temporal and model.n_time > 1:
            Q = np.kron(np.linalg.inv(dense_ar1_cov(fh.rho, model.n_time)), Q)
        blocks.append(Q)
    return block_diag(*blocks)


@pytest.mark.parametrize("label,n_time,seed", [("iii", 1, 3), ("iv", 2, 7), ("iv", 3, 4)])
def test_criterion_3_dense_oracle(label, n_time, seed):
    model = _small_instance(label, n_time, seed)
    assert len(model.y) <= 50 and model.mesh.n_vertices <= 30
    temporal = label == "iv"
    hp = HyperParameters(0.45, (FieldHyper(0.7, 3.5, 0.5 if temporal else None),
                                FieldHyper(0.2, 5.0, 0.3 if temporal else None)))
    A = model.design().toarray()
    Qp = _dense_prior(model, hp)
    Qc, _, mu = dense_conditional(A, model.y, Qp, hp.sigma_eps**2)
    cond = conditional_posterior(model, hp)
    np.testing.assert_allclose(cond.mean, mu, rtol=1e-8, atol=1e-8 * np.abs(mu).max())
    S = np.linalg.inv(Qc)
    idx = np.unique(np.linspace(0, A.shape[1] - 1, 9).astype(int))
    np.testing.assert_allclose(cond.factor.inverse_columns(idx)[idx], S[np.ix_(idx, idx)], rtol=1e-8)
    ref = dense_log_evidence(A, model.y, Qp, hp.sigma_eps**2)
    assert log_marginal_likelihood(model, hp) == pytest.approx(ref, rel=1e-8)


# -- 4. joint-sampling calibration ------------------------------------------------------------


def test_criterion_4_sample_covariance():
    model = _small_instance("ii", 1, 7)
    bundle = fit(model, FitConfig(strategy="eb"))
    assert bundle.K == 1
    S = np.linalg.inv(bundle.conditional(0).Q.toarray())
    iu = np.triu_indices_from(S)
    top = np.argsort(-np.abs(S[iu]))[:5]
    C = np.cov(sample_joint(bundle, 100_000, seed=1).theta.T)
    for k in top:
        i, j = iu[0][k], iu[1][k]
        assert abs(C[i, j] / S[i, j] - 1) <= 0.05


def test_criterion_4_paired_differences_narrower():
    rng = np.random.default_rng(0)
    n = 5000
    a = rng.normal(20, 3, (n, 8))
    b = a - 1.0 + rng.normal(0, 1.0, (n, 8))
    cube = SampleCube(np.stack([a, b], axis=2), 0, "", (0, 1))
    paired = difference(cube, 0, 1).summary
    q = np.quantile(b[rng.permutation(n)] - a, [0.025, 0.975], axis=0)
    assert np.all(paired.q975[:, 0] - paired.q025[:, 0] < q[1] - q[0])


# -- 5. PC-prior calibration ---------------------------------------------------------------------


def test_criterion_5_pc_priors():
    cfg = PriorConfig()
    p_sd, _ = quad(sd_density, 1.0, np.inf, args=(cfg.lambda_sd,), epsabs=1e-14, epsrel=1e-13)
    p_range, _ = quad(range_density, 0.0, 0.1, args=(cfg.lambda_range,), epsabs=1e-14, epsrel=1e-13)
    p_rho, _ = quad(ar1_density, 0.0, 1.0, args=(cfg.lambda_rho,), epsabs=1e-14, epsrel=1e-13)
    assert abs(p_sd - 0.1) <= 1e-6
    assert abs(p_range - 0.1) <= 1e-6
    assert abs(p_rho - 0.9) <= 1e-6


# -- 6. metric identities --------------------------------------------------------------------------


def test_criterion_6_metrics_and_splits():
    rng = np.random.default_rng(3)
    o = rng.uniform(10, 50, 200)
    r2, rmse, pw = compute_metrics(o, o)
    assert rmse == 0.0 and r2 == pytest.approx(1.0, abs=1e-15)
    p = o + rng.normal(0, 2, 200)
    assert compute_metrics(p, o, np.full(200, 3.0))[2] == compute_metrics(p, o)[1]
    strata = [(t, c) for t, c in zip(rng.choice(["urban", "rural", "traffic"], 400),
                                     rng.choice(["NL", "BE", "DE"], 400))]
    keys = np.array([f"{a}|{b}" for a, b in strata])
    splits = stratified_splits(strata, 25, 0.8, seed=2)
    assert len(splits) == 25
    for tr, va in splits:
        assert len(va) == 80 and len(tr) == 320
        for k in np.unique(keys):
            n = (keys == k).sum()
            m = (keys[va] == k).sum()
            assert np.floor(0.2 * n) <= m <= np.ceil(0.2 * n)


# -- 7. determinism ------------------------------------------------------------------------------


def test_criterion_7_byte_identical_rasters(tmp_path):
    cfg = SimulationConfig(ncols=20, nrows=20, n_sites=40, n_hotspots=4, range0=6.0, range1=8.0,
                           sim_max_edge=1.5, sim_buffer=6.0, n_time=2, rho=0.5, seed=3)
    obs, cov, _ = generate_dataset(cfg, 0)
    obs.write_csv(tmp_path / "obs.csv")
    cov.write(tmp_path / "ctm.txt")
    (tmp_path / "run.ini").write_text(
        "[run]\nseed = 42\npollutant = no2\n[data]\nobservations = obs.csv\ncovariates = ctm.txt\n"
        "[model]\npreset = iv\nvarying = ctm\n"
        "[mesh]\nmax_edge_inner = 5\nmax_edge_outer = 10\nbuffer_width = 4\ncutoff = 0.5\n"
        "[inference]\nstrategy = eb\n[predict]\nn_samples = 100\ndifference = 0, 1\n")
    outs = []
    for run in ("a", "b"):
        out = tmp_path / run
        for cmd in ("fit", "predict"):
            assert main([cmd, "--config", str(tmp_path / "run.ini"), "--out", str(out)]) == 0
        outs.append(out)
    files = sorted(p.name for p in (outs[0] / "rasters").iterdir())
    assert files and files == sorted(p.name for p in (outs[1] / "rasters").iterdir())
    for name in files:
        assert (outs[0] / "rasters" / name).read_bytes() == (outs[1] / "rasters" / name).read_bytes()
