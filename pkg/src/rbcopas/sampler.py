"""Metropolis-within-Gibbs sampling of the robust Bayesian Copas posterior."""

from __future__ import annotations

import csv
import io
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from . import _kernel
from .data import MetaDataset
from .distributions import EffectsFamily
from .likelihood import fit_sma

PARAMS = ("theta", "tau", "rho", "gamma0", "gamma1")
BLOCKS = ("tau", "tau_rescale", "shift", "rho", "gamma0", "gamma1")
RHAT_THRESHOLD = 1.05


@dataclass(frozen=True)
class PriorConfig:
    """Prior hyperparameters. ``gamma1_upper=None`` means s_max of the data."""

    sigma_theta_sq: float = 1e4
    rho_fixed_zero: bool = False
    family: EffectsFamily = field(default_factory=EffectsFamily)
    gamma1_upper: float | None = None
    gamma0_bounds: tuple[float, float] = (-2.0, 2.0)

    def __post_init__(self):
        if not self.sigma_theta_sq > 0:
            raise ValueError("sigma_theta_sq must be positive")
        if self.gamma1_upper is not None and not self.gamma1_upper > 0:
            raise ValueError("gamma1_upper must be positive")
        lo, hi = self.gamma0_bounds
        if not lo < hi:
            raise ValueError("gamma0_bounds must be increasing")

    def bind(self, d: MetaDataset) -> "PriorConfig":
        if self.gamma1_upper is not None:
            return self
        return replace(self, gamma1_upper=d.s_max)


@dataclass(frozen=True)
class SamplerConfig:
    n_iter: int = 20_000
    burn_in: int = 10_000
    n_chains: int = 4
    thin: int = 1
    seed: int = 0
    adapt_window: int = 50

    def __post_init__(self):
        if not 0 <= self.burn_in < self.n_iter:
            raise ValueError("need 0 <= burn_in < n_iter")
        if self.n_chains < 1 or self.thin < 1 or self.adapt_window < 1:
            raise ValueError("n_chains, thin and adapt_window must be >= 1")

    @property
    def n_keep(self) -> int:
        return (self.n_iter - self.burn_in) // self.thin


@dataclass
class ChainState:
    theta: float
    tau: float
    rho: float
    gamma0: float
    gamma1: float
    mu: np.ndarray
    z: np.ndarray
    lam: np.ndarray
    step_sizes: np.ndarray

    def params(self) -> np.ndarray:
        return np.array([self.theta, self.tau, self.rho, self.gamma0, self.gamma1])

    def copy(self) -> "ChainState":
        return ChainState(self.theta, self.tau, self.rho, self.gamma0, self.gamma1,
                          self.mu.copy(), self.z.copy(), self.lam.copy(),
                          self.step_sizes.copy())


@dataclass
class Chain:
    draws: np.ndarray          # (draws, 5) in PARAMS order
    mu: np.ndarray             # (draws, n)
    acceptance_rates: dict
    seed: int
    chain_id: int = 0

    def __len__(self):
        return self.draws.shape[0]

    def param(self, name: str) -> np.ndarray:
        try:
            return self.draws[:, PARAMS.index(name)]
        except ValueError:
            raise KeyError(f"unknown parameter {name!r}") from None

    def to_csv(self, include_mu: bool = False) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        header = ["iteration", *PARAMS]
        if include_mu:
            header += [f"mu_{i + 1}" for i in range(self.mu.shape[1])]
        writer.writerow(header)
        for k in range(len(self)):
            row = [k + 1, *(repr(float(v)) for v in self.draws[k])]
            if include_mu:
                row += [repr(float(v)) for v in self.mu[k]]
            writer.writerow(row)
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str, seed: int = 0, chain_id: int = 0) -> "Chain":
        rows = list(csv.reader(io.StringIO(text)))
        header = rows[0]
        body = np.array([[float(c) for c in r] for r in rows[1:] if r], dtype=float)
        idx = [header.index(p) for p in PARAMS]
        mu_cols = [i for i, h in enumerate(header) if h.startswith("mu_")]
        mu = body[:, mu_cols] if mu_cols else np.empty((body.shape[0], 0))
        return cls(body[:, idx], mu, {}, seed, chain_id)


def chain_rng(seed: int, chain_id: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed) & 0xFFFFFFFF, int(chain_id)]))


def initial_state(d: MetaDataset, prior: PriorConfig) -> ChainState:
    """Deterministic start at the SMA estimates with neutral selection parameters."""
    prior = prior.bind(d)
    s = np.asarray(d.s)
    try:
        sma = fit_sma(d)
        theta, tau = sma.theta_hat, sma.tau_hat
    except Exception:
        theta, tau = float(np.mean(d.y)), 0.0
    tau = max(tau, 0.01 * float(np.mean(s)))
    rho = 0.0
    lo, hi = prior.gamma0_bounds
    gamma0 = min(max(-1.0, lo + 1e-6), hi - 1e-6)
    gamma1 = min(0.3, prior.gamma1_upper / 2)
    a = gamma0 + gamma1 / s
    from scipy.stats import norm
    z = a + norm.pdf(a) / norm.cdf(a)
    post_sd = 1.0 / math.sqrt(float(np.sum(1.0 / (s**2 + tau**2))))
    steps = np.array([0.3, 0.3, max(post_sd, 1e-3), 0.3, 0.5, 0.3 * prior.gamma1_upper])
    return ChainState(theta, tau, rho, gamma0, gamma1, np.asarray(d.y, dtype=float).copy(),
                      z, np.ones(d.n), steps)


def _kernel_args(d: MetaDataset, prior: PriorConfig):
    fam = prior.family
    lo, hi = prior.gamma0_bounds
    return (np.ascontiguousarray(d.y, dtype=float), np.ascontiguousarray(d.s, dtype=float),
            fam.code, float(fam.shape), float(prior.sigma_theta_sq), bool(prior.rho_fixed_zero),
            float(lo), float(hi), float(prior.gamma1_upper))


def gibbs_sweep(state: ChainState, d: MetaDataset, prior: PriorConfig,
                rng: np.random.Generator) -> ChainState:
    """One full sweep from ``state``; the input is left untouched."""
    prior = prior.bind(d)
    new = state.copy()
    if prior.rho_fixed_zero:
        new.rho = 0.0
    p = new.params()
    acc = np.zeros(_kernel.N_BLOCKS, dtype=np.int64)
    tries = np.zeros(_kernel.N_BLOCKS, dtype=np.int64)
    _kernel.sweep(*_kernel_args(d, prior), p, new.mu, new.z, new.lam, new.step_sizes,
                  acc, tries, rng)
    new.theta, new.tau, new.rho, new.gamma0, new.gamma1 = (float(v) for v in p)
    return new


def run_chain(d: MetaDataset, prior: PriorConfig, cfg: SamplerConfig, chain_id: int = 0,
              state: ChainState | None = None) -> Chain:
    """Run one chain; identical (data, configs, seed, chain_id) give identical draws."""
    d.require_fit_size()
    prior = prior.bind(d)
    rng = chain_rng(cfg.seed, chain_id)
    st = initial_state(d, prior) if state is None else state.copy()
    if prior.rho_fixed_zero:
        st.rho = 0.0
    p = st.params()
    draws, mu_draws, rates = _kernel.run_chain(
        *_kernel_args(d, prior), p, st.mu, st.z, st.lam, st.step_sizes,
        int(cfg.n_iter), int(cfg.burn_in), int(cfg.thin), int(cfg.adapt_window), rng)
    acc = {b: float(r) for b, r in zip(BLOCKS, rates)}
    if prior.rho_fixed_zero:
        acc.pop("rho")
    return Chain(draws=draws, mu=mu_draws, acceptance_rates=acc, seed=cfg.seed,
                 chain_id=chain_id)


def run_chains(d: MetaDataset, prior: PriorConfig, cfg: SamplerConfig,
               max_workers: int | None = None) -> list[Chain]:
    ids = range(cfg.n_chains)
    if max_workers is None or max_workers <= 1 or cfg.n_chains == 1:
        return [run_chain(d, prior, cfg, i) for i in ids]
    with ThreadPoolExecutor(max_workers=max_workers) as pool:
        return list(pool.map(lambda i: run_chain(d, prior, cfg, i), ids))


# ---------------------------------------------------------------------------
# convergence diagnostics


def _autocovariance(x):
    n = x.size
    m = 1 << (2 * n - 1).bit_length()
    xc = x - x.mean()
    f = np.fft.rfft(xc, m)
    acov = np.fft.irfft(f * np.conjugate(f), m)[:n]
    return acov / n


def split_rhat(chains: np.ndarray) -> float:
    """Split potential scale reduction; ``chains`` has shape (chains, draws)."""
    m, n = chains.shape
    half = n // 2
    if half < 2:
        return float("nan")
    parts = np.concatenate([chains[:, :half], chains[:, n - half:]], axis=0)
    means = parts.mean(axis=1)
    w = parts.var(axis=1, ddof=1).mean()
    b = half * means.var(ddof=1)
    if w == 0:
        return 1.0 if b == 0 else float("inf")
    var_plus = (half - 1) / half * w + b / half
    return float(math.sqrt(var_plus / w))


def effective_sample_size(chains: np.ndarray) -> float:
    """Multi-chain ESS with Geyer's initial monotone sequence estimator."""
    chains = np.atleast_2d(np.asarray(chains, dtype=float))
    m, n = chains.shape
    if n < 4:
        return float(m * n)
    acov = np.array([_autocovariance(c) for c in chains])
    means = chains.mean(axis=1)
    w = acov[:, 0].mean() * n / (n - 1)
    var_plus = w * (n - 1) / n
    if m > 1:
        var_plus += means.var(ddof=1)
    if var_plus <= 0:
        return float(m * n)
    rho = 1.0 - (w - acov.mean(axis=0)) / var_plus
    rho[0] = 1.0
    # sum consecutive pairs while positive, forcing them to be non-increasing
    total = 0.0
    prev = math.inf
    t = 0
    while t + 1 < n:
        pair = rho[t] + rho[t + 1]
        if pair < 0:
            break
        pair = min(pair, prev)
        total += pair
        prev = pair
        t += 2
    tau_int = -1.0 + 2.0 * total
    tau_int = max(tau_int, 1.0 / math.log10(m * n + 10))
    return float(m * n / tau_int)


@dataclass
class DiagReport:
    rhat: dict
    ess: dict
    threshold: float = RHAT_THRESHOLD

    @property
    def flagged(self) -> list[str]:
        return [k for k, v in self.rhat.items() if np.isfinite(v) and v > self.threshold]

    @property
    def ok(self) -> bool:
        return not self.flagged


def diagnostics(chains: list[Chain], params=PARAMS) -> DiagReport:
    if not chains:
        raise ValueError("no chains")
    n = min(len(c) for c in chains)
    rhat, ess = {}, {}
    for name in params:
        mat = np.array([c.param(name)[:n] for c in chains])
        if np.ptp(mat) == 0:
            # pinned parameter (rho under rho_fixed_zero)
            rhat[name], ess[name] = float("nan"), float("nan")
            continue
        rhat[name] = split_rhat(mat) if len(chains) >= 2 else float("nan")
        ess[name] = effective_sample_size(mat)
    return DiagReport(rhat=rhat, ess=ess)


# ---------------------------------------------------------------------------
# posterior summaries


@dataclass(frozen=True)
class Summary:
    param: str
    mean: float
    median: float
    sd: float
    ci95: tuple[float, float]
    point: float

    def as_row(self) -> dict:
        return {"param": self.param, "point": self.point, "mean": self.mean,
                "median": self.median, "sd": self.sd, "ci_low": self.ci95[0],
                "ci_high": self.ci95[1]}


def pooled(chains: list[Chain], param: str) -> np.ndarray:
    if param not in PARAMS:
        raise KeyError(f"unknown parameter {param!r}")
    return np.concatenate([c.param(param) for c in chains])


def posterior_summary(chains: list[Chain], param: str) -> Summary:
    """Mean, median, sd and central 95% interval of the pooled draws of ``param``.

    The point estimate is the median for rho, whose posterior is often
    skewed against the boundary, and the mean otherwise.
    """
    x = pooled(chains, param)
    if x.size == 0:
        raise ValueError("no draws")
    lo, med, hi = np.quantile(x, [0.025, 0.5, 0.975])
    mean = float(x.mean())
    sd = float(x.std(ddof=1)) if x.size > 1 else 0.0
    point = float(med) if param == "rho" else mean
    return Summary(param, mean, float(med), sd, (float(lo), float(hi)), point)


# ---------------------------------------------------------------------------
# joint-distribution (successive-conditional) check


def joint_distribution_draws(s, prior: PriorConfig, n_cycles: int = 5000,
                             sweeps_per_cycle: int = 10, thin: int = 20,
                             seed: int = 0) -> np.ndarray:
    """Alternate posterior sweeps with data redraws from the model.

    If the sampler targets the right posterior, the recorded parameters are
    distributed as their priors. Consecutive cycles are strongly dependent, so
    one state is kept every ``thin`` cycles. Returns an array (n_cycles, 5)
    in PARAMS order.
    """
    s = np.ascontiguousarray(s, dtype=float)
    if prior.gamma1_upper is None:
        prior = replace(prior, gamma1_upper=float(s.max()))
    rng = np.random.default_rng(seed)
    from .distributions import sample_prior
    fam = prior.family
    theta = float(sample_prior("theta", prior, rng))
    tau = float(sample_prior("tau", prior, rng))
    rho = 0.0 if prior.rho_fixed_zero else float(sample_prior("rho", prior, rng))
    g0 = float(sample_prior("gamma0", prior, rng))
    g1 = float(sample_prior("gamma1", prior, rng))
    lam = np.array([_kernel.draw_lambda_prior(fam.code, float(fam.shape), rng)
                    for _ in range(s.size)])
    mu = theta + tau * np.sqrt(np.array([_kernel.var_multiplier(fam.code, v) for v in lam])) \
        * rng.standard_normal(s.size)
    p = np.array([theta, tau, rho, g0, g1])
    z = np.ones(s.size)
    steps = np.array([0.5, 0.5, 0.5, 0.5, 0.8, 0.3 * prior.gamma1_upper])
    lo, hi = prior.gamma0_bounds
    return _kernel.joint_cycles(s, fam.code, float(fam.shape), float(prior.sigma_theta_sq),
                                bool(prior.rho_fixed_zero), float(lo), float(hi),
                                float(prior.gamma1_upper), p, mu, z, lam, steps,
                                int(n_cycles), int(sweeps_per_cycle), int(thin), rng)
