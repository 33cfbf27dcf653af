import math

import numpy as np
import pytest
from scipy import stats

from conftest import normal_re_data
from rbcopas import _kernel
from rbcopas.distributions import EffectsFamily
from rbcopas.likelihood import fit_sma
from rbcopas.sampler import PARAMS, Chain, PriorConfig, SamplerConfig, _kernel_args, \
    chain_rng, diagnostics, effective_sample_size, gibbs_sweep, initial_state, \
    joint_distribution_draws, posterior_summary, run_chain, run_chains, split_rhat


def test_config_validation():
    with pytest.raises(ValueError):
        SamplerConfig(n_iter=100, burn_in=100)
    with pytest.raises(ValueError):
        PriorConfig(sigma_theta_sq=0)
    assert SamplerConfig(n_iter=100, burn_in=10, thin=3).n_keep == 30


def test_prior_binds_gamma1_upper(biased_data):
    assert PriorConfig().bind(biased_data).gamma1_upper == biased_data.s_max
    assert PriorConfig(gamma1_upper=2.0).bind(biased_data).gamma1_upper == 2.0


def test_initial_state(biased_data):
    st = initial_state(biased_data, PriorConfig())
    sma = fit_sma(biased_data)
    assert st.theta == pytest.approx(sma.theta_hat)
    assert st.tau >= 0.01 * np.mean(biased_data.s)
    assert (st.rho, st.gamma0) == (0.0, -1.0)
    assert st.gamma1 == pytest.approx(min(0.3, biased_data.s_max / 2))
    a = -1.0 + st.gamma1 / biased_data.s
    np.testing.assert_allclose(st.z, a + stats.norm.pdf(a) / stats.norm.cdf(a))
    assert np.all(st.lam == 1.0)


def test_identical_seeds_identical_draws(biased_data):
    cfg = SamplerConfig(n_iter=600, burn_in=300, n_chains=2, seed=42)
    prior = PriorConfig(family=EffectsFamily("t"))
    a = run_chain(biased_data, prior, cfg, chain_id=1)
    b = run_chain(biased_data, prior, cfg, chain_id=1)
    assert np.array_equal(a.draws, b.draws) and np.array_equal(a.mu, b.mu)
    c = run_chain(biased_data, prior, cfg, chain_id=0)
    assert not np.array_equal(a.draws, c.draws)
    pooled = run_chains(biased_data, prior, cfg, max_workers=2)
    assert np.array_equal(pooled[1].draws, a.draws)


def test_chain_shapes_and_csv_round_trip(biased_data):
    cfg = SamplerConfig(n_iter=500, burn_in=200, thin=3, seed=2)
    ch = run_chain(biased_data, PriorConfig(), cfg)
    assert ch.draws.shape == (100, 5) and ch.mu.shape == (100, biased_data.n)
    assert set(ch.acceptance_rates) == {"tau", "tau_rescale", "shift", "rho", "gamma0", "gamma1"}
    back = Chain.from_csv(ch.to_csv(include_mu=True))
    assert np.array_equal(back.draws, ch.draws) and np.array_equal(back.mu, ch.mu)
    assert np.all(ch.param("tau") > 0)
    assert np.all(np.abs(ch.param("rho")) < 1)
    g0, g1 = ch.param("gamma0"), ch.param("gamma1")
    assert np.all((g0 > -2) & (g0 < 2)) and np.all((g1 > 0) & (g1 < biased_data.s_max))


def test_rho_fixed_zero_pins_rho(biased_data):
    cfg = SamplerConfig(n_iter=400, burn_in=200, seed=3)
    ch = run_chain(biased_data, PriorConfig(rho_fixed_zero=True), cfg)
    assert np.all(ch.param("rho") == 0.0)
    assert "rho" not in ch.acceptance_rates


def test_z_conditional_at_rho_zero():
    mean, sd = _kernel.z_conditional(0.7, 0.4, 0.1, 0.0, -1.0, 0.3)
    assert mean == pytest.approx(-1.0 + 0.3 / 0.4)
    assert sd == 1.0


def test_theta_conditional_conjugate_example():
    # one unit-variance observation 0.5 under a N(0, 1e4) prior
    mean, var = _kernel.theta_conditional(np.array([0.5]), 1.0, _kernel.NORMAL, np.ones(1), 1e4)
    assert mean == pytest.approx(0.49995000499950004, abs=1e-15)
    assert var == pytest.approx(0.9999000099990001, abs=1e-15)


def test_z_draws_positive_every_sweep(biased_data):
    prior = PriorConfig(family=EffectsFamily("slash"))
    st = initial_state(biased_data, prior)
    r = chain_rng(0, 0)
    for _ in range(300):
        st = gibbs_sweep(st, biased_data, prior, r)
        assert np.all(st.z > 0)
        assert st.tau > 0 and abs(st.rho) < 1


def test_gibbs_sweep_leaves_input_untouched(biased_data):
    st = initial_state(biased_data, PriorConfig())
    before = st.copy()
    gibbs_sweep(st, biased_data, PriorConfig(), np.random.default_rng(0))
    assert np.array_equal(st.mu, before.mu) and st.theta == before.theta


def test_step_sizes_frozen_after_burn_in(biased_data):
    prior = PriorConfig().bind(biased_data)
    finals = []
    for n_iter in (1500, 2600):
        st = initial_state(biased_data, prior)
        _kernel.run_chain(*_kernel_args(biased_data, prior), st.params(), st.mu, st.z, st.lam,
                          st.step_sizes, n_iter, 1000, 1, 50, chain_rng(5, 0))
        finals.append(st.step_sizes.copy())
    np.testing.assert_array_equal(finals[0], finals[1])


def test_rho0_posterior_matches_sma():
    d = normal_re_data(30, 0.4, 0.2, seed=11)
    cfg = SamplerConfig(n_iter=20_000, burn_in=10_000, n_chains=2, seed=1)
    chains = run_chains(d, PriorConfig(rho_fixed_zero=True), cfg)
    assert abs(posterior_summary(chains, "theta").mean - fit_sma(d).theta_hat) < 0.05


def test_stationarity_from_posterior_draw(biased_data):
    prior = PriorConfig()
    ref = run_chains(biased_data, prior, SamplerConfig(n_iter=60_000, burn_in=10_000,
                                                       n_chains=2, seed=9))
    # restart several short runs from a state drawn at the end of a long run
    long_run = run_chain(biased_data, prior, SamplerConfig(n_iter=20_000, burn_in=10_000,
                                                           seed=10))
    st = initial_state(biased_data, prior)
    p = long_run.draws[-1]
    st.theta, st.tau, st.rho, st.gamma0, st.gamma1 = (float(v) for v in p)
    st.mu = long_run.mu[-1].copy()
    short = [run_chain(biased_data, prior, SamplerConfig(n_iter=1001, burn_in=1, seed=20 + k),
                       state=st) for k in range(8)]
    for name in ("theta", "rho", "gamma0"):
        ref_x = np.concatenate([c.param(name) for c in ref])
        means = np.array([c.param(name).mean() for c in short])
        # between-run spread of the short-run means is the Monte-Carlo error
        se = means.std(ddof=1) / math.sqrt(means.size)
        assert abs(means.mean() - ref_x.mean()) < 4 * se + 0.02, name


def test_rhat_of_iid_chains(rng):
    x = rng.standard_normal((4, 5000))
    assert 0.99 <= split_rhat(x) <= 1.01
    x[0] += 10
    assert split_rhat(x) > 1.1


def test_diagnostics_flags_offset_chain(rng):
    chains = [Chain(rng.standard_normal((2000, 5)), np.empty((2000, 0)), {}, 0, k)
              for k in range(3)]
    assert diagnostics(chains).ok
    chains[0].draws[:, 0] += 10
    rep = diagnostics(chains)
    assert rep.flagged == ["theta"] and not rep.ok
    single = diagnostics(chains[:1])
    assert math.isnan(single.rhat["theta"]) and single.ok


def test_ess_of_ar1():
    r = np.random.default_rng(12)
    phi, n = 0.9, 100_000
    x = np.empty((2, n))
    for c in range(2):
        e = r.standard_normal(n)
        x[c, 0] = e[0] / math.sqrt(1 - phi**2)
        for t in range(1, n):
            x[c, t] = phi * x[c, t - 1] + e[t]
    ratio = effective_sample_size(x) / x.size
    assert ratio == pytest.approx((1 - phi) / (1 + phi), rel=0.3)


def test_ess_of_iid(rng):
    x = rng.standard_normal((4, 4000))
    assert effective_sample_size(x) == pytest.approx(x.size, rel=0.15)


def _const_chain(values, param="theta"):
    draws = np.zeros((len(values), 5))
    draws[:, PARAMS.index(param)] = values
    return Chain(draws, np.empty((len(values), 0)), {}, 0)


def test_summary_of_constant_draws():
    sm = posterior_summary([_const_chain([2.5] * 50)], "theta")
    assert sm.mean == sm.median == 2.5 and sm.ci95 == (2.5, 2.5) and sm.sd == 0


def test_summary_interpolated_quantiles():
    sm = posterior_summary([_const_chain(np.arange(1.0, 51.0)),
                            _const_chain(np.arange(51.0, 101.0))], "theta")
    assert sm.ci95 == pytest.approx((3.475, 97.525), abs=1e-12)
    assert sm.median == 50.5 and sm.point == sm.mean


def test_rho_point_is_median():
    sm = posterior_summary([_const_chain([0.1, 0.2, 0.9], "rho")], "rho")
    assert sm.point == sm.median == 0.2


@pytest.mark.parametrize("kind", ["normal", "laplace", "student_t", "slash"])
def test_joint_distribution_recovers_prior(kind):
    s = np.array([0.5, 0.8, 1.0, 1.2])
    prior = PriorConfig(family=EffectsFamily(kind), sigma_theta_sq=1.0)
    out = joint_distribution_draws(s, prior, n_cycles=5000, seed=11)
    theta, _, rho, g0, g1 = out.T
    assert stats.kstest(theta, stats.norm(0, 1).cdf).pvalue > 0.01
    assert stats.kstest(rho, stats.uniform(-1, 2).cdf).pvalue > 0.01
    assert stats.kstest(g0, stats.uniform(-2, 4).cdf).pvalue > 0.01
    assert stats.kstest(g1, stats.uniform(0, 1.2).cdf).pvalue > 0.01


@pytest.mark.slow
def test_selection_correction_beats_sma_at_high_rho():
    from rbcopas.analysis import derived_seed
    from rbcopas.simulation import SimConfig, simulate_copas
    closer = 0
    for r in range(50):
        seed = derived_seed(77, r)
        d = simulate_copas(SimConfig(rho=0.9, seed=seed))
        cfg = SamplerConfig(n_iter=20_000, burn_in=10_000, n_chains=2, seed=seed)
        rbc = posterior_summary(run_chains(d, PriorConfig(), cfg), "theta").mean
        closer += abs(rbc - 0.4) < abs(fit_sma(d).theta_hat - 0.4)
    assert closer >= 40
