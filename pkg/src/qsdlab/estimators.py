"""Conditioned laws, occupation laws, Q-process laws and distances.

Every estimator runs one ensemble through :func:`qsdlab.engine.simulate` and
turns it into an :class:`EmpiricalMeasure` on 512 uniform cells of (-1, 1).
With the default ``sampler="guided"`` the ensemble is importance sampled (see
``engine``) and the measures carry the path weights; ``sampler="direct"``
gives plain equal-weight conditioning on survival.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field, replace

import numpy as np

from . import analytic
from .engine import GUIDE_COSINE, GUIDE_NONE, GUIDE_PARABOLA, ParticleEnsemble, simulate
from .processes import Kind, ProcessSpec, Regime
from .sde_core import TimeGrid

__all__ = [
    "DEFAULT_BINS",
    "Budget",
    "ExtinctionError",
    "EmpiricalMeasure",
    "SurvivalCurve",
    "Distance",
    "run_ensemble",
    "guide_for",
    "conditioned_law",
    "quasi_ergodic_law",
    "qprocess_law_reweighted",
    "qprocess_law_finite_horizon",
    "survival_curve",
    "tv_distance",
    "ks_and_w1",
    "eta_ratio",
    "measure_from_samples",
    "fit_slope",
]

DEFAULT_BINS = 512
N_BOOTSTRAP = 200
ESS_WARN_FRACTION = 0.1


class ExtinctionError(RuntimeError):
    """No surviving particle: the conditioned law is undefined."""

    def __init__(self, message: str, checkpoints: list[tuple[float, int]] | None = None):
        super().__init__(message)
        self.checkpoints = checkpoints or []


@dataclass(frozen=True)
class Budget:
    N: int
    dt: float
    seed: int
    sampler: str = "guided"
    bins: int = DEFAULT_BINS

    def __post_init__(self) -> None:
        if self.N < 1:
            raise ValueError("budget needs N >= 1")
        if not self.dt > 0:
            raise ValueError("budget needs dt > 0")
        if self.sampler not in ("guided", "direct"):
            raise ValueError(f"sampler must be 'guided' or 'direct', got {self.sampler!r}")


def guide_for(spec: ProcessSpec, sampler: str) -> int:
    """Guide function used by the guided sampler for this process."""
    if sampler == "direct" or spec.is_q_kernel:
        return GUIDE_NONE
    if spec.kind is Kind.OU:
        return GUIDE_PARABOLA
    if spec.kind is Kind.BM:
        return GUIDE_COSINE
    regime = spec.regime
    if regime == Regime.CRITICAL and spec.kind is Kind.X:
        return GUIDE_PARABOLA
    if regime == Regime.SUPERCRITICAL and spec.kind is Kind.X:
        return GUIDE_NONE  # survival does not decay; plain conditioning is efficient
    return GUIDE_COSINE


def run_ensemble(spec: ProcessSpec, t_end: float, budget: Budget, record_times=(),
                 occupation_until: float | None = None, girsanov: bool = False,
                 bridge: bool = True) -> ParticleEnsemble:
    if not t_end > spec.start_s:
        raise ValueError(f"need t > start_s = {spec.start_s}, got {t_end}")
    marks = [t for t in record_times if spec.start_s < t < t_end]
    if occupation_until is not None and spec.start_s < occupation_until < t_end:
        marks.append(occupation_until)
    grid = TimeGrid.build(spec.start_s, t_end, budget.dt, required=marks)
    table = analytic.inverse_cdf_table(spec.start_law) if spec.start_law else None
    return simulate(spec, grid, budget.N, budget.seed, record_times=record_times,
                    guide=guide_for(spec, budget.sampler), bridge=bridge, girsanov=girsanov,
                    occupation_until=occupation_until, bins=budget.bins, init_table=table)


@dataclass
class EmpiricalMeasure:
    """Weighted histogram on ``bins`` uniform cells of (-1, 1).

    Bootstrap material is kept either as per-particle ``(sample_x, sample_w)``
    or as per-group histograms ``group_hist`` (for path functionals).
    """

    weights: np.ndarray
    n_effective: float
    n_contributing: int
    bins: int = DEFAULT_BINS
    sample_x: np.ndarray | None = field(default=None, repr=False)
    sample_w: np.ndarray | None = field(default=None, repr=False)
    group_hist: np.ndarray | None = field(default=None, repr=False)
    meta: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        self.weights = np.asarray(self.weights, dtype=np.float64)
        if self.weights.shape != (self.bins,):
            raise ValueError("weights must have one entry per bin")
        if np.any(self.weights < 0):
            raise ValueError("weights must be nonnegative")

    @property
    def edges(self) -> np.ndarray:
        return np.linspace(-1.0, 1.0, self.bins + 1)

    @property
    def total_weight(self) -> float:
        return float(self.weights.sum())

    @property
    def normalized(self) -> np.ndarray:
        tw = self.total_weight
        return self.weights / tw if tw > 0 else np.zeros_like(self.weights)

    def moment(self, order: int) -> float:
        """Moment of the normalized histogram (exact from samples when available)."""
        if self.sample_x is not None:
            w = self.sample_w
            return float(np.sum(w * self.sample_x**order) / np.sum(w))
        mid = 0.5 * (self.edges[1:] + self.edges[:-1])
        return float(np.sum(self.normalized * mid**order))

    def bootstrap(self, n_boot: int = N_BOOTSTRAP, seed: int = 0) -> np.ndarray:
        """``(n_boot, bins)`` normalized histograms from resampled particles or groups."""
        rng = np.random.Generator(np.random.Philox(seed))
        out = np.empty((n_boot, self.bins))
        if self.group_hist is not None:
            g = self.group_hist
            for b in range(n_boot):
                counts = rng.multinomial(g.shape[0], np.full(g.shape[0], 1.0 / g.shape[0]))
                h = counts @ g
                out[b] = h / h.sum() if h.sum() > 0 else 0.0
            return out
        if self.sample_x is None:
            raise ValueError("measure carries no bootstrap material")
        idx = _bin_index(self.sample_x, self.bins)
        w = self.sample_w
        n = idx.size
        equal = np.all(w == w[0])
        for b in range(n_boot):
            if equal:
                h = rng.multinomial(n, self.normalized).astype(np.float64)
            else:
                counts = rng.multinomial(n, np.full(n, 1.0 / n))
                h = np.bincount(idx, weights=w * counts, minlength=self.bins)
            out[b] = h / h.sum() if h.sum() > 0 else 0.0
        return out


def _bin_index(x: np.ndarray, bins: int) -> np.ndarray:
    return np.clip(((np.asarray(x) + 1.0) * 0.5 * bins).astype(np.int64), 0, bins - 1)


def measure_from_samples(x: np.ndarray, w: np.ndarray | None = None, bins: int = DEFAULT_BINS,
                         meta: dict | None = None) -> EmpiricalMeasure:
    x = np.asarray(x, dtype=np.float64)
    w = np.ones_like(x) if w is None else np.asarray(w, dtype=np.float64)
    keep = w > 0
    x, w = x[keep], w[keep]
    h = np.bincount(_bin_index(x, bins), weights=w, minlength=bins)
    ess = float(w.sum() ** 2 / np.sum(w * w)) if w.size else 0.0
    return EmpiricalMeasure(h, ess, int(x.size), bins, x, w, meta=dict(meta or {}))


def _checkpoints(ens: ParticleEnsemble, n: int = 20) -> list[tuple[float, int]]:
    nodes = ens.grid.nodes
    marks = np.linspace(nodes[0], nodes[-1], n + 1)[1:]
    idx = np.searchsorted(nodes, marks - 1e-12)
    return [(float(nodes[i]), int(np.sum(ens.last_alive >= i))) for i in idx]


def _weights_at(ens: ParticleEnsemble, t: float, what: str) -> np.ndarray:
    w = ens.weights_at(t)
    if not np.any(w > 0):
        raise ExtinctionError(f"extinction: no particle alive at t={t} ({what})", _checkpoints(ens))
    return w


def conditioned_law(spec: ProcessSpec, t: float, budget: Budget) -> EmpiricalMeasure:
    """Law of the position at ``t`` given survival to ``t``."""
    ens = run_ensemble(spec, t, budget)
    return _conditioned_from(ens, t)


def _conditioned_from(ens: ParticleEnsemble, t: float, weight_fn=None) -> EmpiricalMeasure:
    w = _weights_at(ens, t, "conditioned law")
    x = ens.positions[:, ens.column(t)]
    survivors = int(np.sum(ens.alive_at(t)))
    meta = {"t": t, "survivors": survivors, "survival_estimate": float(w.sum() / ens.n), "N": ens.n}
    alive = w > 0
    if weight_fn is not None:
        w = np.where(alive, w * weight_fn(np.where(alive, x, 0.0)), 0.0)
    return measure_from_samples(np.where(alive, x, 0.0), w, ens.bins, meta)


def quasi_ergodic_law(spec: ProcessSpec, t: float, budget: Budget) -> EmpiricalMeasure:
    """Time-averaged occupation over ``[start_s, t]`` of the paths surviving to ``t``."""
    if not t > spec.start_s:
        raise ValueError("need t > start_s")
    if t - spec.start_s <= budget.dt:
        return conditioned_law(spec, t, budget)
    ens = run_ensemble(spec, t, budget, occupation_until=t)
    w = _weights_at(ens, t, "quasi-ergodic law")
    occ = ens.occupation
    elapsed = t - spec.start_s
    hist = occ.sum(axis=0) / elapsed
    ess = float(w.sum() ** 2 / np.sum(w * w))
    meta = {"t": t, "survivors": int(np.sum(ens.alive_at(t))), "survival_estimate": float(w.sum() / ens.n),
            "N": ens.n}
    return EmpiricalMeasure(hist, ess, int(np.sum(w > 0)), ens.bins, group_hist=occ, meta=meta)


def _eta_for(spec: ProcessSpec):
    if spec.kind is Kind.X and spec.regime == Regime.CRITICAL:
        return analytic.eta_OU
    if spec.kind is Kind.Y:
        return analytic.eta_Bm
    raise ValueError("qprocess_law_reweighted needs X at kappa = 1/2 or Y")


def qprocess_law_reweighted(spec: ProcessSpec, u: float, t_horizon: float, budget: Budget) -> EmpiricalMeasure:
    """Position at ``u`` over paths surviving to ``t_horizon``, weighted by eta(terminal position)."""
    eta = _eta_for(spec)
    if not spec.start_s <= u <= t_horizon:
        raise ValueError("need start_s <= u <= t_horizon")
    ens = run_ensemble(spec, t_horizon, budget, record_times=(u,))
    w = _weights_at(ens, t_horizon, "Q-process law")
    alive = w > 0
    xT = np.where(alive, ens.positions[:, ens.column(t_horizon)], 0.0)
    xu = np.where(alive, ens.positions[:, ens.column(u)], 0.0)
    w = np.where(alive, w * eta(xT), 0.0)
    meta = {"u": u, "T": t_horizon, "survivors": int(alive.sum()), "N": ens.n}
    m = measure_from_samples(xu, w, ens.bins, meta)
    if m.n_effective < ESS_WARN_FRACTION * budget.N:
        warnings.warn(f"effective sample size {m.n_effective:.0f} is below {ESS_WARN_FRACTION:.0%} of N",
                      RuntimeWarning, stacklevel=2)
    return m


def qprocess_law_finite_horizon(spec: ProcessSpec, u: float, horizons, budget: Budget) -> list[EmpiricalMeasure]:
    """Position at ``u`` given survival to each horizon T, from one shared ensemble."""
    horizons = [float(T) for T in horizons]
    if not horizons or u > min(horizons) or u < spec.start_s:
        raise ValueError("need start_s <= u <= min(horizons)")
    t_end = max(horizons)
    if t_end <= spec.start_s:
        raise ValueError("horizons must exceed start_s")
    ens = run_ensemble(spec, t_end, budget, record_times=(u, *horizons))
    out = []
    col_u = ens.column(u)
    for T in horizons:
        w = _weights_at(ens, T, f"horizon T={T}")
        alive = w > 0
        xu = np.where(alive, ens.positions[:, col_u], 0.0)
        meta = {"u": u, "T": T, "survivors": int(alive.sum()), "survival_estimate": float(w.sum() / ens.n),
                "N": ens.n}
        out.append(measure_from_samples(xu, w, ens.bins, meta))
    return out


@dataclass
class SurvivalCurve:
    """Survival estimates on an increasing time grid.

    ``estimates`` are survivor fractions for the direct sampler (hence
    non-increasing and in [0, 1]); with the guided sampler they are mean path
    weights, unbiased at every time but only monotone up to Monte Carlo error.
    """

    times: np.ndarray
    survivors: np.ndarray
    estimates: np.ndarray
    std_errors: np.ndarray
    scaled: np.ndarray | None = None
    slope: float | None = None
    slope_window: tuple[float, float] | None = None
    start_s: float = 0.0
    N: int = 0
    sampler: str = "direct"

    def __post_init__(self) -> None:
        if np.any(np.diff(self.times) <= 0):
            raise ValueError("survival times must increase")
        if self.sampler == "direct":
            if np.any(self.estimates < 0) or np.any(self.estimates > 1):
                raise ValueError("survival estimates must lie in [0, 1]")
            if np.any(np.diff(self.estimates) > 0):
                raise ValueError("direct survival estimates must be non-increasing")

    def at(self, t: float) -> float:
        i = int(np.argmin(np.abs(self.times - t)))
        if abs(self.times[i] - t) > 1e-9 * max(1.0, t):
            raise KeyError(f"time {t} not on the survival grid")
        return float(self.estimates[i])


def fit_slope(x: np.ndarray, y: np.ndarray) -> tuple[float, float]:
    """Least-squares slope and intercept of y on x."""
    slope, intercept = np.polyfit(np.asarray(x, float), np.asarray(y, float), 1)
    return float(slope), float(intercept)


def survival_curve(spec: ProcessSpec, t_max: float, budget: Budget, points: int = 64,
                   extra_times=(), mode: str | None = None) -> SurvivalCurve:
    """Survival on a log-spaced grid of ``points`` times in ``(start_s, t_max]``.

    ``mode`` is "critical" (adds the scaled curve (t+1)/(s+1) P), "exponential"
    (adds the least-squares slope of log P over the final decade) or None to
    choose from the process (critical X -> critical, OU and BM -> exponential).
    """
    s = spec.start_s
    if not t_max > s:
        raise ValueError("need t_max > start_s")
    if mode is None:
        if spec.kind is Kind.X and spec.regime == Regime.CRITICAL:
            mode = "critical"
        elif spec.kind in (Kind.OU, Kind.BM):
            mode = "exponential"
    span = t_max - s
    rel = np.geomspace(min(budget.dt, span / 10), span, points)
    times = np.unique(np.round(np.concatenate([s + rel, np.asarray(extra_times, float)]), 12))
    times = times[(times > s) & (times <= t_max)]
    ens = run_ensemble(spec, t_max, budget, record_times=tuple(times))
    times = ens.record_times[ens.record_times > s]
    cols = [ens.column(t) for t in times]
    w = np.exp(ens.log_weights[:, cols])
    est = w.mean(axis=0)
    se = w.std(axis=0, ddof=1) / math.sqrt(ens.n) if ens.n > 1 else np.zeros_like(est)
    survivors = np.array([int(np.sum(ens.alive_at(t))) for t in times])
    curve = SurvivalCurve(times, survivors, est, se, start_s=s, N=ens.n,
                          sampler="direct" if ens.guide == GUIDE_NONE else "guided")
    if mode == "critical":
        curve.scaled = (times + 1.0) / (s + 1.0) * est
    elif mode == "exponential":
        lo = s + 0.1 * span
        sel = (times >= lo) & (est > 0)
        if sel.sum() >= 2:
            curve.slope, _ = fit_slope(times[sel], np.log(est[sel]))
            curve.slope_window = (lo, t_max)
    return curve


@dataclass(frozen=True)
class Distance:
    value: float
    ci_low: float
    ci_high: float
    se: float


def _target_cells(m: EmpiricalMeasure, target) -> np.ndarray:
    if isinstance(target, str):
        target = analytic.get_density(target)
    if isinstance(target, analytic.AnalyticDensity):
        q = target.cell_integrals(m.edges)
        return q / q.sum()
    raise TypeError("target must be a density name, an AnalyticDensity or an EmpiricalMeasure")


def _summ(value: float, boots: np.ndarray) -> Distance:
    lo, hi = np.percentile(boots, [2.5, 97.5])
    return Distance(float(value), float(lo), float(hi), float(np.std(boots, ddof=1)))


def tv_distance(m: EmpiricalMeasure, target, n_boot: int = N_BOOTSTRAP, seed: int = 0) -> Distance:
    """Total variation distance (half L1 over cells) with a bootstrap interval."""
    p = m.normalized
    if isinstance(target, EmpiricalMeasure):
        if target.bins != m.bins:
            raise ValueError("empirical measures need the same binning")
        q = target.normalized
        value = 0.5 * np.abs(p - q).sum()
        if n_boot <= 0:
            return Distance(float(value), float(value), float(value), 0.0)
        bp = m.bootstrap(n_boot, seed)
        bq = target.bootstrap(n_boot, seed + 1)
        return _summ(value, 0.5 * np.abs(bp - bq).sum(axis=1))
    q = _target_cells(m, target)
    value = 0.5 * np.abs(p - q).sum()
    if n_boot <= 0:
        return Distance(float(value), float(value), float(value), 0.0)
    bp = m.bootstrap(n_boot, seed)
    return _summ(value, 0.5 * np.abs(bp - q[None, :]).sum(axis=1))


def ks_and_w1(m: EmpiricalMeasure, target) -> tuple[float, float]:
    """Kolmogorov-Smirnov gap and Wasserstein-1 distance of the binned CDFs."""
    p = m.normalized
    if isinstance(target, EmpiricalMeasure):
        if target.bins != m.bins:
            raise ValueError("empirical measures need the same binning")
        q = target.normalized
    else:
        q = _target_cells(m, target)
    diff = np.cumsum(p) - np.cumsum(q)
    width = 2.0 / m.bins
    return float(np.max(np.abs(diff))), float(np.sum(np.abs(diff)) * width)


def eta_ratio(spec: ProcessSpec, xs, T: float, budget: Budget) -> np.ndarray:
    """Experimental eta estimate P(tau > T | x, s) / P(tau > T | 0, s) at each x."""
    def surv(x):
        sp = replace(spec, start_x=float(x), start_law=None)
        ens = run_ensemble(sp, T, budget)
        return float(ens.weights_at(T).mean())

    base = surv(0.0)
    if base <= 0:
        raise ExtinctionError("extinction from x = 0")
    return np.array([surv(x) / base for x in xs])
