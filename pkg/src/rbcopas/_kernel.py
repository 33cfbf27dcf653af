"""Compiled numerical core shared by the density, likelihood and sampler modules.

Everything here takes an explicit ``numpy.random.Generator`` so that chains
are reproducible and independent.
"""

import math

import numpy as np
from numba import njit

NORMAL, LAPLACE, STUDENT_T, SLASH = 0, 1, 2, 3

# MH blocks, in sweep order
B_TAU, B_TAU_NC, B_SHIFT, B_RHO, B_G0, B_G1 = 0, 1, 2, 3, 4, 5
N_BLOCKS = 6

LOG_2PI = math.log(2.0 * math.pi)
SQRT2 = math.sqrt(2.0)
ASYMPTOTIC_CUT = -8.0


@njit(cache=True)
def log_ndtr(x):
    """log of the standard normal CDF, stable deep in the lower tail."""
    if x > 0.0:
        return math.log1p(-0.5 * math.erfc(x / SQRT2))
    if x > ASYMPTOTIC_CUT:
        return math.log(0.5 * math.erfc(-x / SQRT2))
    # Mills-ratio series; at x = -8 the 12-term truncation error is ~1e-11
    x2 = x * x
    term = 1.0
    total = 1.0
    for k in range(1, 13):
        term *= -(2.0 * k - 1.0) / x2
        total += term
    return -0.5 * x2 - 0.5 * LOG_2PI - math.log(-x) + math.log(total)


@njit(cache=True)
def deviance(y, s, mu, rho, g0, g1):
    r = math.sqrt(1.0 - rho * rho)
    total = 0.0
    for i in range(y.size):
        resid = y[i] - mu[i]
        a = g0 + g1 / s[i]
        v = (g0 + (g1 + rho * resid) / s[i]) / r
        total += resid * resid / (s[i] * s[i]) + 2.0 * log_ndtr(a) - 2.0 * log_ndtr(v)
    return total


@njit(cache=True)
def deviance_draws(y, s, mu, rho, g0, g1):
    out = np.empty(rho.size)
    for k in range(rho.size):
        out[k] = deviance(y, s, mu[k], rho[k], g0[k], g1[k])
    return out


@njit(cache=True)
def truncnorm_lower(mean, sd, lower, rng):
    """Draw from N(mean, sd^2) restricted to (lower, inf).

    Plain rejection when the bound sits below the mean; otherwise the
    exponential proposal with the optimal rate (Robert 1995), which stays
    efficient arbitrarily far into the tail.
    """
    alpha = (lower - mean) / sd
    if alpha <= 0.0:
        while True:
            x = rng.standard_normal()
            if x > alpha:
                out = mean + sd * x
                if out > lower:
                    return out
    lam = 0.5 * (alpha + math.sqrt(alpha * alpha + 4.0))
    while True:
        x = alpha + rng.exponential(1.0 / lam)
        if x > alpha and rng.random() <= math.exp(-0.5 * (x - lam) ** 2):
            out = mean + sd * x
            if out > lower:
                return out


@njit(cache=True)
def truncnorm_lower_many(mean, sd, lower, size, rng):
    out = np.empty(size)
    for k in range(size):
        out[k] = truncnorm_lower(mean, sd, lower, rng)
    return out


@njit(cache=True)
def trunc_gamma_unit(shape, rate, rng):
    """Gamma(shape, rate) restricted to (0, 1]."""
    if rate <= 1e-300:
        while True:
            x = rng.random() ** (1.0 / shape)
            if x > 0.0:
                return x
    if shape * math.log(rate) < math.lgamma(shape + 1.0):
        # Beta(shape, 1) proposal, accept with exp(-rate * x)
        while True:
            x = rng.random() ** (1.0 / shape)
            if x > 0.0 and rng.random() <= math.exp(-rate * x):
                return x
    while True:
        x = rng.gamma(shape, 1.0 / rate)
        if 0.0 < x <= 1.0:
            return x


@njit(cache=True)
def var_multiplier(kind, lam):
    if kind == SLASH:
        return 1.0 / lam
    return lam


@njit(cache=True)
def draw_lambda(kind, shape, u, rng):
    """Mixing latent given the standardized effect u."""
    if kind == NORMAL:
        return 1.0
    if kind == LAPLACE:
        # lambda | u ~ GIG(1/2, 1, u^2); its reciprocal is inverse Gaussian
        au = abs(u)
        if au < 1e-8:
            return rng.gamma(0.5, 2.0)
        return 1.0 / rng.wald(1.0 / au, 1.0)
    if kind == STUDENT_T:
        return 0.5 * (shape + u * u) / rng.gamma(0.5 * (shape + 1.0), 1.0)
    return trunc_gamma_unit(shape + 0.5, 0.5 * u * u, rng)


@njit(cache=True)
def draw_lambda_prior(kind, shape, rng):
    if kind == NORMAL:
        return 1.0
    if kind == LAPLACE:
        return rng.exponential(2.0)
    if kind == STUDENT_T:
        return 0.5 * shape / rng.gamma(0.5 * shape, 1.0)
    while True:
        x = rng.random() ** (1.0 / shape)
        if x > 0.0:
            return x


@njit(cache=True)
def _reflect(x, lo, hi):
    width = hi - lo
    y = (x - lo) % (2.0 * width)
    if y > width:
        y = 2.0 * width - y
    return lo + y


@njit(cache=True)
def _log_half_cauchy(tau):
    return math.log(2.0 / math.pi) - math.log1p(tau * tau)


@njit(cache=True)
def _mu_part(y, s, mu, rho, g0, g1):
    """Deviance terms that depend on mu (the a-terms are dropped)."""
    r = math.sqrt(1.0 - rho * rho)
    total = 0.0
    for i in range(y.size):
        resid = y[i] - mu[i]
        v = (g0 + (g1 + rho * resid) / s[i]) / r
        total += resid * resid / (s[i] * s[i]) - 2.0 * log_ndtr(v)
    return total


@njit(cache=True)
def _a_part(s, g0, g1):
    total = 0.0
    for i in range(s.size):
        total += 2.0 * log_ndtr(g0 + g1 / s[i])
    return total


@njit(cache=True)
def z_conditional(y, s, mu, rho, g0, g1):
    """Mean and sd of the untruncated normal for z given (y, mu); truncate at 0."""
    return g0 + g1 / s + rho * (y - mu) / s, math.sqrt(1.0 - rho * rho)


@njit(cache=True)
def theta_conditional(mu, tau, kind, lam, sig2_theta):
    """Mean and variance of the normal full conditional of theta."""
    prec = 1.0 / sig2_theta
    num = 0.0
    tau2 = tau * tau
    for i in range(mu.size):
        w = 1.0 / (tau2 * var_multiplier(kind, lam[i]))
        prec += w
        num += w * mu[i]
    return num / prec, 1.0 / prec


@njit(cache=True)
def sweep(y, s, kind, shape, sig2_theta, rho_fixed, g0_lo, g0_hi, g1_hi,
          p, mu, z, lam, steps, acc, tries, rng):
    """One full Metropolis-within-Gibbs sweep, updating the state in place.

    ``p`` holds (theta, tau, rho, gamma0, gamma1). Blocks (1)-(4) are Gibbs
    and MH moves given the latent propensities z; the remaining moves target
    the posterior with z integrated out, and z is refreshed first thing in
    the next sweep.
    """
    n = y.size
    theta, tau, rho, g0, g1 = p[0], p[1], p[2], p[3], p[4]
    r2 = 1.0 - rho * rho

    # latent propensities
    for i in range(n):
        zm, zs = z_conditional(y[i], s[i], mu[i], rho, g0, g1)
        z[i] = truncnorm_lower(zm, zs, 0.0, rng)

    # study means
    tau2 = tau * tau
    for i in range(n):
        a = g0 + g1 / s[i]
        obs = y[i] - rho * s[i] * (z[i] - a)
        vo = s[i] * s[i] * r2
        vp = tau2 * var_multiplier(kind, lam[i])
        prec = 1.0 / vo + 1.0 / vp
        mu[i] = (obs / vo + theta / vp) / prec + rng.standard_normal() / math.sqrt(prec)

    # mixing latents
    if kind != NORMAL:
        for i in range(n):
            lam[i] = draw_lambda(kind, shape, (mu[i] - theta) / tau, rng)

    # theta | mu, tau, lambda
    tm, tv = theta_conditional(mu, tau, kind, lam, sig2_theta)
    theta = tm + rng.standard_normal() * math.sqrt(tv)

    # tau | mu, theta, lambda on the log scale
    ss = 0.0
    for i in range(n):
        d = mu[i] - theta
        ss += d * d / var_multiplier(kind, lam[i])
    tau_new = tau * math.exp(steps[B_TAU] * rng.standard_normal())
    log_r = (-n * math.log(tau_new) - 0.5 * ss / (tau_new * tau_new) + _log_half_cauchy(tau_new)
             + math.log(tau_new))
    log_r -= -n * math.log(tau) - 0.5 * ss / (tau * tau) + _log_half_cauchy(tau) + math.log(tau)
    tries[B_TAU] += 1
    if math.log(rng.random()) < log_r:
        tau = tau_new
        acc[B_TAU] += 1

    # rescale tau with the standardized effects held fixed
    cur = _mu_part(y, s, mu, rho, g0, g1)
    mu_new = np.empty(n)
    tau_new = tau * math.exp(steps[B_TAU_NC] * rng.standard_normal())
    ratio = tau_new / tau
    for i in range(n):
        mu_new[i] = theta + ratio * (mu[i] - theta)
    prop = _mu_part(y, s, mu_new, rho, g0, g1)
    log_r = (-0.5 * (prop - cur) + _log_half_cauchy(tau_new) - _log_half_cauchy(tau)
             + math.log(ratio))
    tries[B_TAU_NC] += 1
    if math.log(rng.random()) < log_r:
        tau = tau_new
        mu[:] = mu_new
        cur = prop
        acc[B_TAU_NC] += 1

    # shift theta and every mu together
    delta = steps[B_SHIFT] * rng.standard_normal()
    for i in range(n):
        mu_new[i] = mu[i] + delta
    prop = _mu_part(y, s, mu_new, rho, g0, g1)
    theta_new = theta + delta
    log_r = -0.5 * (prop - cur) - 0.5 * (theta_new * theta_new - theta * theta) / sig2_theta
    tries[B_SHIFT] += 1
    if math.log(rng.random()) < log_r:
        theta = theta_new
        mu[:] = mu_new
        cur = prop
        acc[B_SHIFT] += 1

    # selection parameters; at rho = 0 the likelihood ignores gamma
    if rho_fixed:
        tries[B_G0] += 1
        tries[B_G1] += 1
        acc[B_G0] += 1
        acc[B_G1] += 1
        g0 = _reflect(g0 + steps[B_G0] * rng.standard_normal(), g0_lo, g0_hi)
        g1 = _reflect(g1 + steps[B_G1] * rng.standard_normal(), 0.0, g1_hi)
    else:
        # deviance = mu-dependent part (cur) + selection normalizer (a_cur)
        a_cur = _a_part(s, g0, g1)
        eta_new = math.atanh(rho) + steps[B_RHO] * rng.standard_normal()
        rho_new = math.tanh(eta_new)
        tries[B_RHO] += 1
        if abs(rho_new) < 1.0:
            prop = _mu_part(y, s, mu, rho_new, g0, g1)
            # uniform prior on rho, Jacobian of the Fisher-z map
            log_r = (-0.5 * (prop - cur) + math.log1p(-rho_new * rho_new)
                     - math.log1p(-rho * rho))
            if math.log(rng.random()) < log_r:
                rho = rho_new
                cur = prop
                acc[B_RHO] += 1

        g0_new = _reflect(g0 + steps[B_G0] * rng.standard_normal(), g0_lo, g0_hi)
        prop = _mu_part(y, s, mu, rho, g0_new, g1)
        a_new = _a_part(s, g0_new, g1)
        tries[B_G0] += 1
        if math.log(rng.random()) < -0.5 * (prop + a_new - cur - a_cur):
            g0 = g0_new
            cur = prop
            a_cur = a_new
            acc[B_G0] += 1

        g1_new = _reflect(g1 + steps[B_G1] * rng.standard_normal(), 0.0, g1_hi)
        prop = _mu_part(y, s, mu, rho, g0, g1_new)
        a_new = _a_part(s, g0, g1_new)
        tries[B_G1] += 1
        if math.log(rng.random()) < -0.5 * (prop + a_new - cur - a_cur):
            g1 = g1_new
            acc[B_G1] += 1

    p[0], p[1], p[2], p[3], p[4] = theta, tau, rho, g0, g1


@njit(cache=True)
def run_chain(y, s, kind, shape, sig2_theta, rho_fixed, g0_lo, g0_hi, g1_hi,
              p, mu, z, lam, steps, n_iter, burn_in, thin, window, rng):
    """Run one chain; returns (draws, mu_draws, acceptance rates after burn-in)."""
    n = y.size
    n_keep = (n_iter - burn_in) // thin
    draws = np.empty((n_keep, 5))
    mu_draws = np.empty((n_keep, n))
    acc = np.zeros(N_BLOCKS, dtype=np.int64)
    tries = np.zeros(N_BLOCKS, dtype=np.int64)
    batch = 0
    k = 0
    for it in range(n_iter):
        sweep(y, s, kind, shape, sig2_theta, rho_fixed, g0_lo, g0_hi, g1_hi,
              p, mu, z, lam, steps, acc, tries, rng)
        if it < burn_in:
            if (it + 1) % window == 0:
                batch += 1
                delta = min(0.1, 1.0 / math.sqrt(batch))
                for b in range(N_BLOCKS):
                    if tries[b] > 0:
                        if acc[b] / tries[b] > 0.44:
                            steps[b] *= math.exp(delta)
                        else:
                            steps[b] *= math.exp(-delta)
                    acc[b] = 0
                    tries[b] = 0
            if it + 1 == burn_in:
                acc[:] = 0
                tries[:] = 0
        elif (it - burn_in + 1) % thin == 0 and k < n_keep:
            draws[k, 0] = p[0]
            draws[k, 1] = p[1]
            draws[k, 2] = p[2]
            draws[k, 3] = p[3]
            draws[k, 4] = p[4]
            mu_draws[k] = mu
            k += 1
    rates = np.empty(N_BLOCKS)
    for b in range(N_BLOCKS):
        rates[b] = acc[b] / tries[b] if tries[b] > 0 else np.nan
    return draws, mu_draws, rates


@njit(cache=True)
def simulate_published(s, mu, rho, g0, g1, rng):
    """Draw (y, z) from the truncated bivariate normal given the study means."""
    n = s.size
    y = np.empty(n)
    z = np.empty(n)
    r = math.sqrt(1.0 - rho * rho)
    for i in range(n):
        a = g0 + g1 / s[i]
        z[i] = truncnorm_lower(a, 1.0, 0.0, rng)
        y[i] = mu[i] + rho * s[i] * (z[i] - a) + s[i] * r * rng.standard_normal()
    return y, z


@njit(cache=True)
def joint_cycles(s, kind, shape, sig2_theta, rho_fixed, g0_lo, g0_hi, g1_hi,
                 p, mu, z, lam, steps, n_cycles, sweeps_per_cycle, thin, rng):
    """Successive-conditional simulator: alternate sweeps with data redraws.

    One state is recorded every ``thin`` cycles.
    """
    out = np.empty((n_cycles, 5))
    acc = np.zeros(N_BLOCKS, dtype=np.int64)
    tries = np.zeros(N_BLOCKS, dtype=np.int64)
    y, z0 = simulate_published(s, mu, p[2], p[3], p[4], rng)
    z[:] = z0
    for c in range(n_cycles):
        for _ in range(thin):
            for _ in range(sweeps_per_cycle):
                sweep(y, s, kind, shape, sig2_theta, rho_fixed, g0_lo, g0_hi, g1_hi,
                      p, mu, z, lam, steps, acc, tries, rng)
            y, z0 = simulate_published(s, mu, p[2], p[3], p[4], rng)
            z[:] = z0
        out[c] = p
    return out
