"""The D measure: Hellinger distance between corrected and uncorrected posteriors."""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .data import MetaDataset
from .distributions import DensityGrid, EffectsFamily, hellinger, kde
from .sampler import PriorConfig, SamplerConfig, pooled, run_chains

MIN_DRAWS = 1000
CATEGORIES = ("negligible", "moderate", "high", "very_high")
_CUTOFFS = (0.25, 0.5, 0.75)
RHO0_SEED_OFFSET = 7_919


def interpret_d(d: float) -> str:
    """Category of a D value; each band is closed at its upper end."""
    d = float(d)
    if not 0.0 <= d <= 1.0:
        raise ValueError(f"D must lie in [0, 1], got {d}")
    for cut, name in zip(_CUTOFFS, CATEGORIES):
        if d <= cut:
            return name
    return CATEGORIES[-1]


@dataclass(frozen=True)
class DReport:
    d: float
    category: str
    grid_rbc: DensityGrid
    grid_rho0: DensityGrid
    family: EffectsFamily | None = None
    param: str = "theta"
    n_rbc: int = 0
    n_rho0: int = 0

    def __post_init__(self):
        if not 0.0 <= self.d <= 1.0:
            raise ValueError("d must lie in [0, 1]")
        if self.category != interpret_d(self.d):
            raise ValueError(f"category {self.category!r} disagrees with d={self.d}")

    def to_text(self) -> str:
        rows = [("param", self.param), ("d", repr(float(self.d))), ("category", self.category),
                ("family", self.family.label if self.family else "unspecified"),
                ("n_draws_rbc", self.n_rbc), ("n_draws_rho0", self.n_rho0)]
        return "".join(f"{k}={v}\n" for k, v in rows)


def compute_d_measure(draws_rbc, draws_rho0, family: EffectsFamily | None = None,
                      param: str = "theta") -> DReport:
    """Hellinger distance between kernel density estimates of two draw sets.

    Both sets should come from fits under the same effects family, one with
    free rho and one with rho pinned at zero.
    """
    a = np.asarray(draws_rbc, dtype=float).ravel()
    b = np.asarray(draws_rho0, dtype=float).ravel()
    for name, x in (("draws_rbc", a), ("draws_rho0", b)):
        if x.size < MIN_DRAWS:
            raise ValueError(f"{name} has {x.size} draws, at least {MIN_DRAWS} are needed")
    f, g = kde(a), kde(b)
    d = hellinger(f, g)
    return DReport(d=d, category=interpret_d(d), grid_rbc=f, grid_rho0=g, family=family,
                   param=param, n_rbc=a.size, n_rho0=b.size)


def rho0_config(cfg: SamplerConfig) -> SamplerConfig:
    """Sampler settings for the rho = 0 companion run (seed shifted by a fixed offset)."""
    return replace(cfg, seed=(cfg.seed + RHO0_SEED_OFFSET) % 2**32)


def rho0_chains(d: MetaDataset, prior: PriorConfig, cfg: SamplerConfig, max_workers=None):
    return run_chains(d, replace(prior, rho_fixed_zero=True), rho0_config(cfg),
                      max_workers=max_workers)


def d_from_chains(chains_rbc, chains_rho0, family=None, param="theta") -> DReport:
    return compute_d_measure(pooled(chains_rbc, param), pooled(chains_rho0, param),
                             family=family, param=param)
