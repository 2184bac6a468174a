import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from lsbi_smc import smc
from lsbi_smc.errors import MaxRoundsExceeded, ParameterError
from oracles import brute_ess, weighted_covariance


def test_ess_equal_weights():
    ll = np.random.default_rng(0).normal(size=50)
    assert smc.ess(ll, 0.0) == 50.0


def test_ess_degenerate():
    ll = np.full(100, -1000.0)
    ll[7] = 1000.0
    assert smc.ess(ll, 1.0) == pytest.approx(1.0)


@given(st.lists(st.floats(-500, 500), min_size=2, max_size=60), st.floats(0, 3))
@settings(max_examples=200, deadline=None)
def test_ess_bounds_and_oracle(ll, dbeta):
    ll = np.array(ll)
    e = smc.ess(ll, dbeta)
    assert 1 - 1e-9 <= e <= len(ll) + 1e-9
    assert e == pytest.approx(brute_ess(ll, dbeta), rel=1e-9)


def test_ess_negative_increment_rejected():
    with pytest.raises(ParameterError):
        smc.ess(np.zeros(3), -0.1)


def test_next_beta_constant_loglik():
    assert smc.find_next_beta(np.full(10, 3.0), 0.0, 0.8) == 1.0


def test_next_beta_clamps_near_one():
    ll = np.random.default_rng(1).uniform(-5, 5, 100)
    assert smc.find_next_beta(ll, 0.999, 0.8) == 1.0


def test_next_beta_root_condition():
    ll = np.random.default_rng(2).normal(0, 10, 1000)
    beta = smc.find_next_beta(ll, 0.0, 0.8, 1000)
    assert 0 < beta < 1
    assert abs(smc.ess(ll, beta) - 800) < 0.5


def test_next_beta_bad_prev():
    with pytest.raises(ParameterError):
        smc.find_next_beta(np.zeros(3), 1.0, 0.8)


def test_systematic_equal_weights_identity():
    rng = np.random.default_rng(3)
    for n in (1, 7, 100, 1000):
        for _ in range(20):
            idx = smc.systematic_resample(np.full(n, 1.0 / n), rng)
            np.testing.assert_array_equal(idx, np.arange(n))


def test_systematic_single_unit_weight():
    w = np.zeros(10)
    w[4] = 1.0
    idx = smc.systematic_resample(w, np.random.default_rng(0))
    assert np.all(idx == 4)


def test_systematic_unbiased_counts():
    rng = np.random.default_rng(4)
    w = rng.dirichlet(np.ones(10))
    reps = 100_000
    counts = np.zeros(10)
    sq = np.zeros(10)
    for _ in range(reps):
        c = np.bincount(smc.systematic_resample(w, rng), minlength=10)
        counts += c
        sq += c * c
    mean = counts / reps
    var = sq / reps - mean**2
    se = np.sqrt(np.maximum(var, 1e-12) / reps)
    assert np.all(np.abs(mean - 10 * w) <= 3 * se + 1e-12)


def test_resample_rejects_bad_weights():
    with pytest.raises(Exception):
        smc.systematic_resample(np.array([0.5, np.nan]), np.random.default_rng(0))


def test_resample_copies_cache():
    pop = smc.ParticlePopulation(np.arange(8.0).reshape(4, 2), np.array([1.0, 2, 3, 4]))
    out = smc.resample(pop, np.array([0, 0, 1.0, 0]), np.random.default_rng(0))
    assert np.all(out.positions == [4.0, 5.0]) and np.all(out.log_lhat == 3.0)


def test_covariance_equal_weights():
    x = np.random.default_rng(5).normal(size=(200, 3))
    cov = smc.proposal_covariance(x, np.ones(200), 0.2)
    expected = 0.04 * np.cov(x.T, bias=True)
    np.testing.assert_allclose(cov, expected + 1e-10 * np.trace(expected) / 3 * np.eye(3),
                               rtol=1e-12)


def test_covariance_scale_law():
    rng = np.random.default_rng(6)
    x, w = rng.normal(size=(100, 4)), rng.uniform(size=100)
    np.testing.assert_allclose(smc.proposal_covariance(x, w, 0.4),
                               4 * smc.proposal_covariance(x, w, 0.2), rtol=1e-12)


def test_covariance_weighted_oracle():
    rng = np.random.default_rng(7)
    x, w = rng.normal(size=(300, 4)), rng.exponential(size=300)
    cov = smc.proposal_covariance(x, w, 0.2)
    ref = 0.04 * weighted_covariance(x, w)
    ref += 1e-10 * np.trace(ref) / 4 * np.eye(4)
    np.testing.assert_allclose(cov, ref, rtol=1e-12)
    np.testing.assert_array_equal(cov, cov.T)
    assert np.all(np.linalg.eigvalsh(cov) > 0)


def test_covariance_degenerate_fallback():
    with pytest.warns(RuntimeWarning):
        cov = smc.proposal_covariance(np.ones((5, 2)), np.ones(5), 0.2)
    np.testing.assert_allclose(cov, 0.04 * 1e-6 * np.eye(2))


def test_move_prior_target_uniform():
    rng = np.random.default_rng(8)
    n = 4000
    lo, hi = np.zeros(2), np.ones(2)
    pop = smc.ParticlePopulation(rng.random((n, 2)), np.zeros(n), beta=0.0)
    calls = []

    def ev(th):
        calls.append(len(th))
        return np.zeros(len(th))

    cov = 0.05 * np.eye(2)
    diag = smc.SMCDiagnostics()
    out, acc = smc.mcmc_move(pop, cov, ev, 20, rng, (lo, hi), diag)
    frac_inside = 1 - diag.n_out_of_box / (n * 20)
    assert acc == pytest.approx(frac_inside, abs=1e-12)
    assert len(calls) == 20 and sum(calls) == diag.n_eval_net
    se = np.sqrt(1 / 12 / n)
    assert np.all(np.abs(out.positions.mean(axis=0) - 0.5) < 4 * se)
    assert np.all(np.abs(out.positions.var(axis=0) - 1 / 12) < 0.01)


def test_move_vanishing_proposal():
    rng = np.random.default_rng(9)
    x = rng.uniform(0.2, 0.8, (500, 2))
    pop = smc.ParticlePopulation(x, -np.sum((x - 0.5) ** 2, axis=1), beta=1.0)
    out, acc = smc.mcmc_move(pop, 1e-18 * np.eye(2), lambda t: -np.sum((t - 0.5) ** 2, axis=1),
                             5, rng, (np.zeros(2), np.ones(2)))
    assert acc > 0.99
    np.testing.assert_allclose(out.positions, x, atol=1e-7)


def test_move_nonfinite_is_rejected():
    rng = np.random.default_rng(10)
    pop = smc.ParticlePopulation(np.full((50, 1), 0.5), np.zeros(50), beta=1.0)
    diag = smc.SMCDiagnostics()
    out, acc = smc.mcmc_move(pop, 0.01 * np.eye(1), lambda t: np.full(len(t), np.nan), 3, rng,
                             (np.zeros(1), np.ones(1)), diag)
    assert acc == 0.0 and np.all(out.positions == 0.5)
    assert diag.n_nonfinite == diag.n_eval_net > 0


def gauss_loglik(th):
    return -0.5 * (th[:, 0] - 1.0) ** 2


def test_run_conjugate_gaussian():
    cfg = smc.SMCConfig(n_particles=2000, rng_seed=1)
    x, diag = smc.run(([-10.0], [10.0]), gauss_loglik, cfg)
    assert abs(x.mean() - 1) < 3 * np.sqrt(x.var() / 2000)
    assert abs(x.var() - 1) < 0.1
    assert diag.betas[-1] == 1.0


def test_run_bimodal_symmetric():
    cfg = smc.SMCConfig(n_particles=10_000, rng_seed=2)
    x, _ = smc.run(([-3.0], [3.0]), lambda t: -((t[:, 0] ** 2 - 1) ** 2) / 0.02, cfg)
    frac_pos = np.mean(x[:, 0] > 0)
    assert abs(frac_pos - 0.5) < 0.05


def test_run_constant_likelihood():
    cfg = smc.SMCConfig(n_particles=500, rng_seed=3)
    x, diag = smc.run(([0.0, 0.0], [1.0, 2.0]), lambda t: np.full(len(t), 5.0), cfg)
    assert diag.betas == [1.0]
    assert diag.log_evidence == pytest.approx(5.0)
    assert abs(x[:, 1].mean() - 1.0) < 0.1


def test_run_determinism_and_invariants():
    cfg = smc.SMCConfig(n_particles=300, rng_seed=4)
    ll = lambda t: -0.5 * np.sum((t - 0.3) ** 2, axis=1) / 0.01
    a, da = smc.run(([-1.0, -1.0], [1.0, 1.0]), ll, cfg)
    b, db = smc.run(([-1.0, -1.0], [1.0, 1.0]), ll, cfg)
    np.testing.assert_array_equal(a, b)
    assert da.betas == db.betas
    assert np.all(np.diff(da.betas) > 0) and da.betas[-1] == 1.0
    assert all(1 <= e <= 300 for e in da.ess)
    assert np.all((a >= -1) & (a <= 1))


def test_run_constant_shift_invariance():
    # log-likelihoods on a coarse dyadic grid so adding the shift is exact
    def ll(t):
        return -np.round(64 * np.sum((t - 0.3) ** 2, axis=1) / 0.02) / 64

    cfg = smc.SMCConfig(n_particles=300, rng_seed=5)
    box = ([-1.0, -1.0], [1.0, 1.0])
    a, da = smc.run(box, ll, cfg)
    b, db = smc.run(box, lambda t: ll(t) + 1024.0, cfg)
    np.testing.assert_array_equal(a, b)
    assert da.betas == db.betas
    assert da.acceptance_rate == db.acceptance_rate


def test_run_max_rounds():
    cfg = smc.SMCConfig(n_particles=100, max_rounds=2, rng_seed=0)
    with pytest.raises(MaxRoundsExceeded) as info:
        smc.run(([-10.0], [10.0]), lambda t: -0.5 * t[:, 0] ** 2 / 1e-6, cfg)
    assert info.value.diagnostics.n_rounds == 2


def test_eval_counter_arithmetic():
    cfg = smc.SMCConfig(n_particles=100, n_mcmc_steps=10, rng_seed=0)
    _, diag = smc.run(([0.0], [1.0]), lambda t: np.zeros(len(t)), cfg)
    assert diag.n_rounds == 1
    assert diag.n_eval_gross == 100 + 100 * 10
    assert diag.n_eval_net == diag.n_eval_gross - diag.n_out_of_box


@pytest.mark.parametrize("kw", [dict(n_particles=1), dict(gamma=1.0), dict(gamma=0.0),
                                dict(b=0.0), dict(n_mcmc_steps=0)])
def test_config_validation(kw):
    with pytest.raises(ParameterError):
        smc.SMCConfig(**kw)


def test_csv_round_trip(tmp_path):
    x = np.random.default_rng(0).normal(size=(10, 4))
    smc.save_samples_csv(tmp_path / "p.csv", x)
    np.testing.assert_array_equal(smc.load_samples_csv(tmp_path / "p.csv"), x)
    _, diag = smc.run(([0.0], [1.0]), lambda t: -t[:, 0] * 20, smc.SMCConfig(n_particles=50))
    diag.to_csv(tmp_path / "d.csv")
    lines = (tmp_path / "d.csv").read_text().splitlines()
    assert lines[0] == "round,beta,ess,acceptance_rate,log_evidence_increment,elapsed_s"
    assert len(lines) == diag.n_rounds + 1
