"""Copas observed-data deviance, the random-effects likelihood and the SMA baseline."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import optimize

from . import _kernel
from .data import MetaDataset

MAX_FEV = 10_000
FTOL = 1e-10


@dataclass(frozen=True)
class CopasParams:
    mu: np.ndarray
    rho: float
    gamma0: float
    gamma1: float

    def __post_init__(self):
        object.__setattr__(self, "mu", np.asarray(self.mu, dtype=float))
        if not abs(self.rho) < 1:
            raise ValueError(f"rho must lie in (-1, 1), got {self.rho}")
        if self.gamma1 < 0:
            raise ValueError("gamma1 must be non-negative")


def log_ndtr(x):
    """Elementwise log of the standard normal CDF."""
    x = np.asarray(x, dtype=float)
    out = np.array([_kernel.log_ndtr(v) for v in x.ravel()])
    return out.reshape(x.shape) if x.ndim else float(out[0])


def copas_deviance(p: CopasParams, d: MetaDataset) -> float:
    """Deviance of the selection model, up to the constant sum(log(2 pi s_i^2)).

    The sum runs over published studies of
    (y - mu)^2 / s^2 + 2 log Phi(gamma0 + gamma1/s) - 2 log Phi(v),
    where v = (gamma0 + (gamma1 + rho (y - mu)) / s) / sqrt(1 - rho^2).
    """
    if p.mu.shape != (d.n,):
        raise ValueError(f"mu has length {p.mu.size}, dataset has {d.n} studies")
    return float(_kernel.deviance(np.asarray(d.y), np.asarray(d.s), p.mu,
                                  float(p.rho), float(p.gamma0), float(p.gamma1)))


def deviance_draws(d: MetaDataset, mu, rho, gamma0, gamma1) -> np.ndarray:
    """Deviance of each posterior draw; ``mu`` has shape (draws, n)."""
    rho = np.ascontiguousarray(rho, dtype=float)
    if np.any(np.abs(rho) >= 1):
        raise ValueError("rho must lie in (-1, 1)")
    return _kernel.deviance_draws(np.asarray(d.y), np.asarray(d.s),
                                  np.ascontiguousarray(mu, dtype=float), rho,
                                  np.ascontiguousarray(gamma0, dtype=float),
                                  np.ascontiguousarray(gamma1, dtype=float))


def re_neg2_loglik(theta: float, tau: float, d: MetaDataset) -> float:
    if tau < 0:
        raise ValueError("tau must be non-negative")
    var = d.s**2 + tau**2
    return float(np.sum(np.log(2 * math.pi * var) + (d.y - theta) ** 2 / var))


def weighted_mean(d: MetaDataset, tau: float) -> float:
    w = 1.0 / (d.s**2 + tau**2)
    return float(np.sum(w * d.y) / np.sum(w))


class SmaConvergenceError(RuntimeError):
    def __init__(self, message, best):
        super().__init__(message)
        self.best = best


@dataclass(frozen=True)
class SmaFit:
    theta_hat: float
    tau_hat: float
    se_theta: float
    ci95: tuple[float, float]
    loglik: float


def _hessian(f, x, steps):
    k = x.size
    h = np.empty((k, k))
    for i in range(k):
        for j in range(i, k):
            ei = np.zeros(k)
            ej = np.zeros(k)
            ei[i] = steps[i]
            ej[j] = steps[j]
            val = (f(x + ei + ej) - f(x + ei - ej) - f(x - ei + ej) + f(x - ei - ej)) / (
                4 * steps[i] * steps[j])
            h[i, j] = h[j, i] = val
    return h


def fit_sma(d: MetaDataset) -> SmaFit:
    """Maximum-likelihood fit of the normal random-effects model.

    Nelder-Mead on (theta, log tau), compared against the tau = 0 boundary.
    The standard error of theta comes from a central-difference Hessian of
    the -2 log-likelihood at the optimum.
    """
    d.require_fit_size()
    y, s = d.y, d.s

    def obj(x):
        return re_neg2_loglik(x[0], math.exp(x[1]), d)

    # method-of-moments start
    w = 1 / s**2
    theta0 = float(np.sum(w * y) / np.sum(w))
    q = float(np.sum(w * (y - theta0) ** 2))
    c = float(np.sum(w) - np.sum(w**2) / np.sum(w))
    tau0 = math.sqrt(max((q - (d.n - 1)) / c, 0.0)) if c > 0 else 0.0
    tau0 = max(tau0, 0.1 * float(np.mean(s)))

    res = optimize.minimize(obj, np.array([theta0, math.log(tau0)]), method="Nelder-Mead",
                            options={"maxfev": MAX_FEV, "xatol": 1e-10, "fatol": FTOL})
    if not res.success and res.nfev >= MAX_FEV:
        raise SmaConvergenceError(f"Nelder-Mead did not converge in {MAX_FEV} evaluations",
                                  best=(float(res.x[0]), math.exp(res.x[1])))
    theta_hat, tau_hat = float(res.x[0]), math.exp(res.x[1])

    # profile polish: theta is the weighted mean for the chosen tau
    theta_hat = weighted_mean(d, tau_hat)
    best = re_neg2_loglik(theta_hat, tau_hat, d)
    theta_b = weighted_mean(d, 0.0)
    boundary = re_neg2_loglik(theta_b, 0.0, d)
    if boundary <= best + 1e-12 or tau_hat < 1e-8 * float(np.mean(s)):
        theta_hat, tau_hat, best = theta_b, 0.0, boundary

    scale = float(np.mean(s))
    if tau_hat > 0:
        def f(x):
            return re_neg2_loglik(x[0], abs(x[1]), d)

        step = 1e-5 * scale
        hess = _hessian(f, np.array([theta_hat, tau_hat]), [step, min(step, 0.5 * tau_hat)])
        try:
            cov = np.linalg.inv(0.5 * hess)
            var_theta = float(cov[0, 0])
        except np.linalg.LinAlgError:
            var_theta = float("nan")
        if not var_theta > 0:
            var_theta = 2.0 / float(hess[0, 0])
    else:
        step = 1e-5 * scale
        h00 = (re_neg2_loglik(theta_hat + step, 0.0, d) - 2 * best
               + re_neg2_loglik(theta_hat - step, 0.0, d)) / step**2
        var_theta = 2.0 / h00
    se = math.sqrt(var_theta)
    return SmaFit(theta_hat=theta_hat, tau_hat=tau_hat, se_theta=se,
                  ci95=(theta_hat - 1.96 * se, theta_hat + 1.96 * se), loglik=-0.5 * best)
