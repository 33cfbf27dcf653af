"""Deviance information criterion for each effects family and family selection."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass

import numpy as np

from .data import MetaDataset
from .distributions import KINDS, EffectsFamily
from .likelihood import deviance_draws
from .sampler import PARAMS, Chain

TIE_TOL = 1e-9


@dataclass(frozen=True)
class DicResult:
    family: EffectsFamily
    mean_deviance: float
    deviance_at_mean: float
    p_d: float
    dic: float


def _pooled_xi(chains: list[Chain]):
    draws = np.concatenate([c.draws for c in chains])
    mu = np.concatenate([c.mu for c in chains])
    i_rho, i_g0, i_g1 = (PARAMS.index(p) for p in ("rho", "gamma0", "gamma1"))
    return mu, draws[:, i_rho], draws[:, i_g0], draws[:, i_g1]


def compute_dic(chains: list[Chain], d: MetaDataset,
                family: EffectsFamily | None = None) -> DicResult:
    """DIC from the pooled post-burn-in draws of (mu, rho, gamma0, gamma1).

    The plug-in point is the componentwise posterior mean, with rho averaged
    on its natural scale. Deviances omit the data-only constant
    sum(log(2 pi s_i^2)), which cancels in any comparison on one dataset.
    """
    if not chains or sum(len(c) for c in chains) == 0:
        raise ValueError("compute_dic needs at least one non-empty chain")
    mu, rho, g0, g1 = _pooled_xi(chains)
    if mu.shape[1] != d.n:
        raise ValueError("chains carry no study-level draws for this dataset "
                         f"(mu has {mu.shape[1]} columns, dataset has {d.n} studies)")
    dev = deviance_draws(d, mu, rho, g0, g1)
    mean_dev = float(dev.mean())
    at_mean = float(deviance_draws(d, mu.mean(axis=0, keepdims=True), rho.mean(keepdims=True),
                                   g0.mean(keepdims=True), g1.mean(keepdims=True))[0])
    p_d = mean_dev - at_mean
    fam = family if family is not None else EffectsFamily()
    return DicResult(family=fam, mean_deviance=mean_dev, deviance_at_mean=at_mean,
                     p_d=p_d, dic=2 * mean_dev - at_mean)


def select_model(results: list[DicResult]) -> EffectsFamily:
    """Family with the smallest DIC; near-ties go to the simpler family."""
    if not results:
        raise ValueError("no DIC results to choose from")
    best = min(r.dic for r in results)
    tied = [r for r in results if r.dic - best < TIE_TOL]
    return min(tied, key=lambda r: KINDS.index(r.family.kind)).family


def dic_table_csv(results: list[DicResult]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["family", "mean_deviance", "p_d", "dic"])
    for r in results:
        writer.writerow([r.family.kind, repr(r.mean_deviance), repr(r.p_d), repr(r.dic)])
    return buf.getvalue()
