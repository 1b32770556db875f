"""Closed-form targets, spectral constants and the explicit error bounds.

Densities live on (-1, 1) and vanish at the endpoints.  The Brownian laws use
the normalization under which ``alpha_Bm`` is a probability density and
``alpha_Bm(eta_Bm) = 1``; with it ``beta_Bm = eta_Bm * alpha_Bm = cos^2(pi x / 2)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Callable

import numpy as np
from scipy.integrate import cumulative_simpson, simpson
from scipy.linalg import solve_banded

__all__ = [
    "DENSITY_NAMES",
    "AnalyticDensity",
    "SpectralConstants",
    "constants",
    "density",
    "get_density",
    "eta_OU",
    "eta_Bm",
    "mean_exit_time_ou",
    "phi",
    "psi",
    "big_F",
    "subcritical_rate_bound",
    "critical_rate_bound",
    "inverse_cdf_table",
]

DENSITY_NAMES = ("alpha_OU", "beta_OU", "alpha_Bm", "beta_Bm", "qed_critical")
QUAD_NODES = 4097
FD_NODES = 8193
LAMBDA_OU = 1.0
LAMBDA_BM = math.pi**2 / 8.0


def _grid(n: int = QUAD_NODES) -> np.ndarray:
    return np.linspace(-1.0, 1.0, n)


@lru_cache(maxsize=1)
def _k_constants() -> tuple[float, float]:
    # lru_cache makes the first computation the only one; recomputation is idempotent anyway
    x = _grid()
    g = np.exp(-0.5 * x * x)
    k = 1.0 / simpson((1 - x * x) * g, x=x)
    k_prime = 1.0 / (k * simpson((1 - x * x) ** 2 * g, x=x))
    return float(k), float(k_prime)


@dataclass(frozen=True)
class SpectralConstants:
    """Principal eigen-data of the two limiting killed processes.

    ``C_*`` and ``gamma_*`` are the constants of the exponential convergence
    rates; they are configuration (default C = 2, gamma = the eigenvalue) and
    are used for reporting only.
    """

    lambda_OU: float
    lambda_Bm: float
    K: float
    K_prime: float
    gamma_Bm: float
    C_Bm: float
    gamma_OU: float
    C_OU: float


def constants(C_Bm: float = 2.0, gamma_Bm: float | None = None,
              C_OU: float = 2.0, gamma_OU: float | None = None) -> SpectralConstants:
    k, k_prime = _k_constants()
    return SpectralConstants(
        lambda_OU=LAMBDA_OU,
        lambda_Bm=LAMBDA_BM,
        K=k,
        K_prime=k_prime,
        gamma_Bm=LAMBDA_BM if gamma_Bm is None else float(gamma_Bm),
        C_Bm=float(C_Bm),
        gamma_OU=LAMBDA_OU if gamma_OU is None else float(gamma_OU),
        C_OU=float(C_OU),
    )


def eta_OU(x):
    """Right eigenfunction K'(1 - x^2) of the killed OU generator."""
    x = np.asarray(x, dtype=np.float64)
    return _k_constants()[1] * (1.0 - x * x)


def eta_Bm(x):
    """Right eigenfunction (4/pi) cos(pi x / 2) of the killed Brownian generator."""
    x = np.asarray(x, dtype=np.float64)
    return (4.0 / math.pi) * np.cos(0.5 * math.pi * x)


@lru_cache(maxsize=1)
def _exit_time_table() -> tuple[np.ndarray, np.ndarray]:
    # (1/2) u'' - (x/2) u' = -1, u(-1) = u(1) = 0, centered differences
    x = _grid(FD_NODES)
    h = x[1] - x[0]
    xi = x[1:-1]
    m = xi.size
    lower = 0.5 / h**2 + xi / (4 * h)  # coefficient of u_{i-1}
    diag = np.full(m, -1.0 / h**2)
    upper = 0.5 / h**2 - xi / (4 * h)  # coefficient of u_{i+1}
    ab = np.zeros((3, m))
    ab[0, 1:] = upper[:-1]
    ab[1] = diag
    ab[2, :-1] = lower[1:]
    u = np.zeros_like(x)
    u[1:-1] = solve_banded((1, 1), ab, -np.ones(m))
    u.setflags(write=False)
    return x, u


def mean_exit_time_ou(x):
    """Mean exit time of the OU process from (-1, 1), from the finite-difference solve."""
    x = np.asarray(x, dtype=np.float64)
    if np.any(np.abs(x) > 1):
        raise ValueError("mean_exit_time_ou needs |x| <= 1")
    grid, u = _exit_time_table()
    out = np.interp(x, grid, u)
    return float(out) if out.ndim == 0 else out


def _alpha_ou(x):
    k, _ = _k_constants()
    return k * (1 - x * x) * np.exp(-0.5 * x * x)


def _beta_ou(x):
    k, k_prime = _k_constants()
    return k * k_prime * (1 - x * x) ** 2 * np.exp(-0.5 * x * x)


def _alpha_bm(x):
    return 0.25 * math.pi * np.cos(0.5 * math.pi * x)


def _beta_bm(x):
    return np.cos(0.5 * math.pi * x) ** 2


def _qed_critical(x):
    return mean_exit_time_ou(x) * _alpha_ou(x)


_RAW: dict[str, Callable[[np.ndarray], np.ndarray]] = {
    "alpha_OU": _alpha_ou,
    "beta_OU": _beta_ou,
    "alpha_Bm": _alpha_bm,
    "beta_Bm": _beta_bm,
    "qed_critical": _qed_critical,
}


@dataclass(frozen=True)
class AnalyticDensity:
    """A named density on (-1, 1); ``normalization`` is the Simpson integral of the raw formula."""

    name: str
    evaluator: Callable[[np.ndarray], np.ndarray] = field(repr=False)
    normalization: float

    domain = (-1.0, 1.0)

    def __call__(self, x):
        x = np.asarray(x, dtype=np.float64)
        if np.any(np.abs(x) > 1):
            raise ValueError(f"{self.name} is defined on [-1, 1]")
        out = self.evaluator(x) / self.normalization
        return float(out) if out.ndim == 0 else out

    def cell_integrals(self, edges: np.ndarray, points: int = 9) -> np.ndarray:
        """Integral over each cell ``[edges[i], edges[i+1]]`` by Simpson's rule."""
        edges = np.asarray(edges, dtype=np.float64)
        t = np.linspace(0.0, 1.0, points)
        xs = edges[:-1, None] + np.diff(edges)[:, None] * t[None, :]
        return simpson(self(xs), x=xs, axis=1)

    def cdf_table(self, n: int = QUAD_NODES) -> tuple[np.ndarray, np.ndarray]:
        x = _grid(n)
        c = cumulative_simpson(self(x), x=x, initial=0.0)
        c /= c[-1]
        return x, np.maximum.accumulate(c)


@lru_cache(maxsize=None)
def get_density(name: str) -> AnalyticDensity:
    if name not in _RAW:
        raise ValueError(f"unknown density {name!r}; expected one of {DENSITY_NAMES}")
    f = _RAW[name]
    x = _grid()
    return AnalyticDensity(name, f, float(simpson(f(x), x=x)))


def density(name: str, x):
    """Normalized value of the named density at ``x`` (|x| <= 1)."""
    return get_density(name)(x)


def inverse_cdf_table(name: str) -> tuple[np.ndarray, np.ndarray]:
    """``(xs, cdf)`` on the quadrature grid, for inverse-CDF sampling."""
    return get_density(name).cdf_table()


def _check_sub(kappa: float) -> None:
    if not 0 < kappa < 0.5:
        raise ValueError(f"needs 0 < kappa < 1/2, got {kappa}")


def phi(s: float, kappa: float) -> float:
    """First-order discrepancy between the X and Y path weights from start time s."""
    _check_sub(kappa)
    if s < 0:
        raise ValueError("s must be >= 0")
    e = (s + 1.0) ** (2 * kappa - 1)
    lower = -math.expm1(-0.5 * kappa * e)
    upper = math.expm1(0.5 * (kappa + kappa**2 / (1 - 2 * kappa)) * e)
    return max(lower, upper)


def psi(s: float, kappa: float) -> float:
    f = phi(s, kappa)
    if f >= 1:
        return math.inf
    return max(1 - 1 / (1 + f), 1 / (1 - f) - 1)


def big_F(s: float, kappa: float) -> float:
    """Uniform bound F(s) = phi + psi (1 + phi); +inf when phi >= 1 (bound vacuous)."""
    f = phi(s, kappa)
    if f >= 1:
        return math.inf
    return f + psi(s, kappa) * (1 + f)


def subcritical_rate_bound(s: float, t: float, kappa: float, C_Bm: float = 2.0,
                           gamma_Bm: float | None = None) -> float:
    """F(t/2) + C_Bm exp(-gamma_Bm v), v the Brownian clock elapsed from t/2 to t."""
    _check_sub(kappa)
    if t < s:
        raise ValueError("need s <= t")
    gamma = LAMBDA_BM if gamma_Bm is None else gamma_Bm
    e = 1 - 2 * kappa
    v = ((t + 1) ** e - (0.5 * t + 1) ** e) / e
    return big_F(0.5 * t, kappa) + C_Bm * math.exp(-gamma * v)


def critical_rate_bound(s: float, t: float, C: float, gamma: float) -> float:
    if t < s:
        raise ValueError("need s <= t")
    return C * ((s + 1.0) / (t + 1.0)) ** gamma
