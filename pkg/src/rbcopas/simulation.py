"""Simulated meta-analyses under Copas selection and the bias/coverage experiments."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field

import numpy as np

from .analysis import derived_seed, fit_rbc, fit_rho0
from .bias_measure import d_from_chains
from .data import MetaDataset
from .distributions import EffectsFamily, all_families
from .likelihood import fit_sma
from .model_selection import compute_dic, select_model
from .sampler import SamplerConfig

EFFECTS = ("t3", "std_normal", "outlier_mix", "skew_mix")
METHODS = ("RBC-normal", "RBC-laplace", "RBC-t", "RBC-slash", "SMA")
SELECTED = "RBC-DIC"
_METHOD_FAMILY = {"RBC-normal": "normal", "RBC-laplace": "laplace", "RBC-t": "student_t",
                  "RBC-slash": "slash"}

BLOCK = 1024
MAX_CANDIDATES = 10_000_000
MIN_ACCEPT = 1e-4

# (weight, mean, spread) for the two-component mixtures
_MIXTURES = {
    "outlier_mix": ((0.85, 0.0, 0.2), (0.15, 0.0, 20.0)),
    "skew_mix": ((0.9, 0.0, 1.0), (0.1, 5.5, 0.5)),
}

# sampler settings used for each replicate unless overridden
EXPERIMENT_SAMPLER = SamplerConfig(n_iter=20_000, burn_in=10_000, n_chains=2)


class SimulationError(RuntimeError):
    pass


@dataclass(frozen=True)
class SimConfig:
    rho: float = 0.0
    n: int = 30
    theta: float = 0.4
    tau: float = 0.2
    gamma0: float = -1.0
    gamma1: float = 0.3
    s_low: float = 0.2
    s_high: float = 0.8
    effects: str = "std_normal"
    seed: int = 0
    spread_is_sd: bool = False

    def __post_init__(self):
        if not abs(self.rho) < 1:
            raise ValueError(f"rho must lie in (-1, 1), got {self.rho}")
        if not 0 < self.s_low < self.s_high:
            raise ValueError("need 0 < s_low < s_high")
        if self.n < 1:
            raise ValueError("n must be positive")
        if self.tau < 0 or self.gamma1 < 0:
            raise ValueError("tau and gamma1 must be non-negative")
        if self.effects not in EFFECTS:
            raise ValueError(f"unknown effects kind {self.effects!r}; choose from {EFFECTS}")


def draw_random_effect(effects: str, rng: np.random.Generator, size=None,
                       spread_is_sd: bool = False):
    """Standardized random effects u for the simulation designs.

    Mixture components N(m, b) read b as a variance unless ``spread_is_sd``.
    """
    if effects == "t3":
        return rng.standard_t(3, size)
    if effects == "std_normal":
        return rng.standard_normal(size)
    try:
        comps = _MIXTURES[effects]
    except KeyError:
        raise ValueError(f"unknown effects kind {effects!r}") from None
    (w1, m1, b1), (_, m2, b2) = comps
    sd1, sd2 = (b1, b2) if spread_is_sd else (math.sqrt(b1), math.sqrt(b2))
    first = rng.random(size) < w1
    return np.where(first, m1 + sd1 * rng.standard_normal(size),
                    m2 + sd2 * rng.standard_normal(size))


def _candidates(cfg: SimConfig, rng):
    s = rng.uniform(cfg.s_low, cfg.s_high, BLOCK)
    eps = rng.standard_normal(BLOCK)
    delta = cfg.rho * eps + math.sqrt(1 - cfg.rho**2) * rng.standard_normal(BLOCK)
    u = draw_random_effect(cfg.effects, rng, BLOCK, cfg.spread_is_sd)
    y = cfg.theta + cfg.tau * u + s * eps
    z = cfg.gamma0 + cfg.gamma1 / s + delta
    return y, s, z > 0


def simulate_copas(cfg: SimConfig, rng: np.random.Generator | None = None,
                   with_acceptance: bool = False):
    """Draw candidate studies until ``cfg.n`` pass the selection step.

    Returns the dataset, or ``(dataset, acceptance_fraction)`` when
    ``with_acceptance`` is set.
    """
    rng = np.random.default_rng(cfg.seed) if rng is None else rng
    ys, ss = [], []
    kept = tried = 0
    while kept < cfg.n:
        y, s, ok = _candidates(cfg, rng)
        tried += BLOCK
        ys.append(y[ok])
        ss.append(s[ok])
        kept += int(ok.sum())
        if tried >= MAX_CANDIDATES and kept / tried < MIN_ACCEPT:
            raise SimulationError(f"acceptance fraction {kept / tried:.2e} after {tried} "
                                  f"candidates; selection is too strict for gamma0="
                                  f"{cfg.gamma0}, gamma1={cfg.gamma1}")
    y = np.concatenate(ys)[:cfg.n]
    s = np.concatenate(ss)[:cfg.n]
    d = MetaDataset.from_arrays(y, s)
    return (d, kept / tried) if with_acceptance else d


@dataclass(frozen=True)
class ExperimentResult:
    method: str
    bias: float
    coverage: float
    mean_d: float | None
    reps: int
    failures: int = 0
    effects: str = ""
    rho: float = 0.0
    winners: dict = field(default_factory=dict)

    def __post_init__(self):
        if not (0.0 <= self.coverage <= 1.0 or math.isnan(self.coverage)):
            raise ValueError("coverage must lie in [0, 1]")


@dataclass
class _Tally:
    bias: list = field(default_factory=list)
    hit: list = field(default_factory=list)
    d: list = field(default_factory=list)
    failures: int = 0


def _parse_methods(methods):
    methods = list(METHODS if methods is None else methods)
    for m in methods:
        if m not in METHODS and m != SELECTED:
            raise ValueError(f"unknown method {m!r}; choose from {METHODS + (SELECTED,)}")
    return methods


def run_replicate(cfg: SimConfig, methods, sampler: SamplerConfig, with_d: bool = True) -> dict:
    """One simulated dataset analysed by every requested method.

    Returns ``{method: (estimate, ci_low, ci_high, d or None)}``; a method
    that fails maps to its exception instead.
    """
    d = simulate_copas(cfg)
    out = {}
    fams = {m: EffectsFamily(_METHOD_FAMILY[m]) for m in methods if m in _METHOD_FAMILY}
    need_all = with_d or SELECTED in methods
    fits = {}
    kinds = [f.kind for f in (all_families() if need_all else fams.values())]
    for fam in all_families():
        if fam.kind in kinds:
            try:
                fits[fam.kind] = fit_rbc(d, fam, sampler)
            except Exception as exc:  # recorded as a per-rep failure
                fits[fam.kind] = exc
    for m, fam in fams.items():
        fit = fits[fam.kind]
        if isinstance(fit, Exception):
            out[m] = fit
            continue
        sm = fit.summary("theta")
        out[m] = (sm.mean, sm.ci95[0], sm.ci95[1], None)
    if "SMA" in methods:
        try:
            sma = fit_sma(d)
            out["SMA"] = (sma.theta_hat, sma.ci95[0], sma.ci95[1], None)
        except Exception as exc:
            out["SMA"] = exc
    if need_all:
        good = {k: f for k, f in fits.items() if not isinstance(f, Exception)}
        try:
            if not good:
                raise SimulationError("every RBC fit failed")
            sel = select_model([compute_dic(f.chains, d, f.family) for f in good.values()])
            chosen = good[sel.kind]
            dval = None
            if with_d:
                rho0 = fit_rho0(d, chosen, sampler)
                dval = d_from_chains(chosen.chains, rho0.chains, sel).d
            sm = chosen.summary("theta")
            out[SELECTED] = (sm.mean, sm.ci95[0], sm.ci95[1], dval, sel.kind)
        except Exception as exc:
            out[SELECTED] = exc
    return out


def run_experiment(effects: str, rho: float, reps: int = 100, methods=None, seed: int = 0,
                   sampler: SamplerConfig | None = None, with_d: bool = True,
                   spread_is_sd: bool = False, base: SimConfig | None = None,
                   keep_data: list | None = None) -> list[ExperimentResult]:
    """Average bias and 95%-interval coverage of each method over ``reps`` datasets.

    Replicate ``r`` uses a seed derived from (seed, effects, rho, r), so any
    subset of replicates can be recomputed on its own. With ``with_d`` all
    four families are fitted, the DIC winner is reported as an extra
    ``RBC-DIC`` row and its D values are averaged into ``mean_d``.
    """
    if reps < 1:
        raise ValueError("reps must be >= 1")
    methods = _parse_methods(methods)
    sampler = sampler or EXPERIMENT_SAMPLER
    base = base or SimConfig()
    rows = list(methods)
    if with_d and SELECTED not in rows:
        rows.append(SELECTED)
    tallies = {m: _Tally() for m in rows}
    winners: dict = {}
    eff_key = EFFECTS.index(effects) if effects in EFFECTS else -1
    rho_key = int(round(rho * 1e6)) & 0xFFFFFFFF
    for r in range(reps):
        rep_seed = derived_seed(seed, eff_key, rho_key, r)
        cfg = SimConfig(rho=rho, n=base.n, theta=base.theta, tau=base.tau, gamma0=base.gamma0,
                        gamma1=base.gamma1, s_low=base.s_low, s_high=base.s_high,
                        effects=effects, seed=rep_seed, spread_is_sd=spread_is_sd)
        if keep_data is not None:
            keep_data.append(simulate_copas(cfg))
        res = run_replicate(cfg, [m for m in methods if m != SELECTED],
                            SamplerConfig(n_iter=sampler.n_iter, burn_in=sampler.burn_in,
                                          n_chains=sampler.n_chains, thin=sampler.thin,
                                          seed=rep_seed, adapt_window=sampler.adapt_window),
                            with_d=with_d)
        for m in rows:
            t = tallies[m]
            val = res.get(m)
            if val is None or isinstance(val, Exception):
                t.failures += 1
                continue
            est, lo, hi, dval = val[:4]
            t.bias.append(est - cfg.theta)
            t.hit.append(lo <= cfg.theta <= hi)
            if dval is not None:
                t.d.append(dval)
            if m == SELECTED:
                winners[val[4]] = winners.get(val[4], 0) + 1
    out = []
    for m in rows:
        t = tallies[m]
        ok = len(t.bias)
        out.append(ExperimentResult(
            method=m, bias=float(np.mean(t.bias)) if ok else float("nan"),
            coverage=float(np.mean(t.hit)) if ok else float("nan"),
            mean_d=float(np.mean(t.d)) if t.d else None, reps=reps, failures=t.failures,
            effects=effects, rho=rho, winners=dict(sorted(winners.items())) if m == SELECTED else {}))
    return out


def results_csv(results: list[ExperimentResult]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["effects", "rho", "method", "bias", "coverage", "mean_d", "reps", "failures"])
    for r in results:
        writer.writerow([r.effects, repr(float(r.rho)), r.method, repr(r.bias), repr(r.coverage),
                         "" if r.mean_d is None else repr(r.mean_d), r.reps, r.failures])
    return buf.getvalue()
