"""Random-effects densities, samplers, kernel density estimates and Hellinger distance."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass

import numpy as np
from scipy import integrate, special

from . import _kernel

KINDS = ("normal", "laplace", "student_t", "slash")
_KIND_CODES = {"normal": _kernel.NORMAL, "laplace": _kernel.LAPLACE,
               "student_t": _kernel.STUDENT_T, "slash": _kernel.SLASH}
_ALIASES = {"t": "student_t", "student-t": "student_t", "studentt": "student_t"}

DEFAULT_NU = 4.0
DEFAULT_XI = 1.0
DEFAULT_NGRID = 512


@dataclass(frozen=True)
class EffectsFamily:
    """Distribution of the standardized study effects u_i."""

    kind: str = "normal"
    nu: float | None = None
    xi: float | None = None

    def __post_init__(self):
        kind = _ALIASES.get(self.kind.lower(), self.kind.lower())
        if kind not in KINDS:
            raise ValueError(f"unknown effects family {self.kind!r}")
        object.__setattr__(self, "kind", kind)
        if kind == "student_t":
            nu = DEFAULT_NU if self.nu is None else float(self.nu)
            if not nu > 0:
                raise ValueError("nu must be positive")
            object.__setattr__(self, "nu", nu)
            object.__setattr__(self, "xi", None)
        elif kind == "slash":
            xi = DEFAULT_XI if self.xi is None else float(self.xi)
            if not xi > 0:
                raise ValueError("xi must be positive")
            object.__setattr__(self, "xi", xi)
            object.__setattr__(self, "nu", None)
        else:
            object.__setattr__(self, "nu", None)
            object.__setattr__(self, "xi", None)

    @property
    def code(self) -> int:
        return _KIND_CODES[self.kind]

    @property
    def shape(self) -> float:
        """The single shape hyperparameter (0.0 for families without one)."""
        if self.kind == "student_t":
            return self.nu
        if self.kind == "slash":
            return self.xi
        return 0.0

    @property
    def label(self) -> str:
        if self.kind == "student_t":
            return f"student_t(nu={self.nu:g})"
        if self.kind == "slash":
            return f"slash(xi={self.xi:g})"
        return self.kind


def all_families(nu=DEFAULT_NU, xi=DEFAULT_XI) -> list[EffectsFamily]:
    return [EffectsFamily("normal"), EffectsFamily("laplace"),
            EffectsFamily("student_t", nu=nu), EffectsFamily("slash", xi=xi)]


def _slash_closed_form(u, xi):
    # xi/sqrt(2 pi) * int_0^1 lam^(xi - 1/2) exp(-lam u^2 / 2) dlam
    a = xi + 0.5
    x = 0.5 * u * u
    return (math.log(xi) - 0.5 * _kernel.LOG_2PI + special.gammaln(a)
            + math.log(special.gammainc(a, x)) - a * math.log(x))


def _slash_quadrature(u, xi):
    def integrand(lam):
        return xi * lam ** (xi - 1.0) * math.sqrt(lam) * math.exp(-0.5 * lam * u * u)

    val, _ = integrate.quad(integrand, 0.0, 1.0, epsabs=1e-10, epsrel=1e-12, limit=200)
    return math.log(val) - 0.5 * _kernel.LOG_2PI


def log_density(fam: EffectsFamily, u: float) -> float:
    """Log density of the standardized random effect."""
    u = float(u)
    if fam.kind == "normal":
        return -0.5 * _kernel.LOG_2PI - 0.5 * u * u
    if fam.kind == "laplace":
        return -math.log(2.0) - abs(u)
    if fam.kind == "student_t":
        nu = fam.nu
        return (special.gammaln(0.5 * (nu + 1)) - special.gammaln(0.5 * nu)
                - 0.5 * math.log(nu * math.pi) - 0.5 * (nu + 1) * math.log1p(u * u / nu))
    xi = fam.xi
    if u == 0.0 or 0.5 * u * u < 1e-300:
        return math.log(xi / (xi + 0.5)) - 0.5 * _kernel.LOG_2PI
    if xi == 1.0:
        return _slash_closed_form(u, xi)
    return _slash_quadrature(u, xi)


def sample_truncated_normal(mean: float, sd: float, lower: float, rng: np.random.Generator,
                            size: int | None = None):
    """Draw from N(mean, sd^2) conditioned on exceeding ``lower``."""
    if not sd > 0:
        raise ValueError("sd must be positive")
    if size is None:
        return _kernel.truncnorm_lower(float(mean), float(sd), float(lower), rng)
    return _kernel.truncnorm_lower_many(float(mean), float(sd), float(lower), int(size), rng)


def sample_effects(fam: EffectsFamily, rng: np.random.Generator, size: int) -> np.ndarray:
    """Direct draws of u from a family (no Markov chain involved)."""
    if fam.kind == "normal":
        return rng.standard_normal(size)
    if fam.kind == "laplace":
        return rng.laplace(0.0, 1.0, size)
    if fam.kind == "student_t":
        return rng.standard_t(fam.nu, size)
    lam = rng.random(size) ** (1.0 / fam.xi)
    return rng.standard_normal(size) / np.sqrt(lam)


def sample_prior(which: str, hyper, rng: np.random.Generator, size: int | None = None):
    """Draw one model parameter from its prior.

    ``hyper`` is a :class:`rbcopas.sampler.PriorConfig`; gamma1's upper bound
    must be resolved (not None) before calling.
    """
    if which == "theta":
        return rng.normal(0.0, math.sqrt(hyper.sigma_theta_sq), size)
    if which == "tau":
        return np.abs(rng.standard_cauchy(size))
    if which == "rho":
        return rng.uniform(-1.0, 1.0, size)
    if which == "gamma0":
        lo, hi = hyper.gamma0_bounds
        return rng.uniform(lo, hi, size)
    if which == "gamma1":
        if hyper.gamma1_upper is None:
            raise ValueError("gamma1_upper is unresolved; bind the prior to a dataset first")
        return rng.uniform(0.0, hyper.gamma1_upper, size)
    raise ValueError(f"unknown parameter {which!r}")


@dataclass(frozen=True)
class DensityGrid:
    grid: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        grid = np.asarray(self.grid, dtype=float)
        values = np.asarray(self.values, dtype=float)
        if grid.ndim != 1 or grid.shape != values.shape or grid.size < 2:
            raise ValueError("grid and values must be 1-D arrays of equal length >= 2")
        if np.any(np.diff(grid) <= 0):
            raise ValueError("grid must be strictly increasing")
        if np.any(values < 0):
            raise ValueError("density values must be non-negative")
        object.__setattr__(self, "grid", grid)
        object.__setattr__(self, "values", values)

    @classmethod
    def from_pdf(cls, pdf, lo, hi, n_grid=DEFAULT_NGRID) -> "DensityGrid":
        x = np.linspace(lo, hi, n_grid)
        return cls(x, pdf(x))

    def integral(self) -> float:
        return float(np.trapezoid(self.values, self.grid))

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["x", "density"])
        for x, v in zip(self.grid, self.values):
            writer.writerow([repr(float(x)), repr(float(v))])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "DensityGrid":
        rows = list(csv.reader(io.StringIO(text)))
        body = np.array([[float(a), float(b)] for a, b in rows[1:] if a], dtype=float)
        return cls(body[:, 0], body[:, 1])


def silverman_bandwidth(samples) -> float:
    x = np.asarray(samples, dtype=float)
    sd = x.std(ddof=1)
    q75, q25 = np.percentile(x, [75, 25])
    spread = min(sd, (q75 - q25) / 1.34)
    if spread <= 0:
        spread = sd
    return 0.9 * spread * x.size ** (-0.2)


def kde(samples, n_grid: int = DEFAULT_NGRID, bandwidth: float | None = None) -> DensityGrid:
    """Gaussian kernel density estimate on an equispaced grid.

    Silverman's rule sets the bandwidth unless one is given; the grid spans
    three bandwidths beyond the sample range on each side.
    """
    x = np.asarray(samples, dtype=float).ravel()
    if x.size < 100:
        raise ValueError(f"kde needs at least 100 samples, got {x.size}")
    if not x.var() > 0:
        raise ValueError("kde of degenerate (zero-variance) samples")
    h = silverman_bandwidth(x) if bandwidth is None else float(bandwidth)
    xc = np.sort(x)
    grid = np.linspace(xc[0] - 3 * h, xc[-1] + 3 * h, n_grid)
    dens = np.zeros(n_grid)
    chunk = max(1, 2**22 // n_grid)
    for start in range(0, xc.size, chunk):
        diff = (grid[:, None] - xc[None, start:start + chunk]) / h
        dens += np.exp(-0.5 * diff * diff).sum(axis=1)
    dens /= xc.size * h * math.sqrt(2 * math.pi)
    return DensityGrid(grid, dens)


def _on_grid(f: DensityGrid, x: np.ndarray) -> np.ndarray:
    return np.interp(x, f.grid, f.values, left=0.0, right=0.0)


def hellinger(f: DensityGrid, g: DensityGrid) -> float:
    """Hellinger distance between two gridded densities.

    Both are interpolated (zero outside their support) onto a common grid and
    renormalized there, so quadrature error cancels in the identity case.
    """
    lo = min(f.grid[0], g.grid[0])
    hi = max(f.grid[-1], g.grid[-1])
    n = max(DEFAULT_NGRID, f.grid.size, g.grid.size)
    if (f.grid.size == g.grid.size and np.array_equal(f.grid, g.grid)):
        x = f.grid
    else:
        # both supports get a fine mesh even when they barely overlap
        x = np.union1d(np.linspace(lo, hi, 4 * n), np.union1d(f.grid, g.grid))
    fx = _on_grid(f, x)
    gx = _on_grid(g, x)
    zf = np.trapezoid(fx, x)
    zg = np.trapezoid(gx, x)
    if zf <= 0 or zg <= 0:
        return 1.0
    bc = np.trapezoid(np.sqrt(fx * gx), x) / math.sqrt(zf * zg)
    return float(min(1.0, math.sqrt(max(0.0, 1.0 - bc))))
