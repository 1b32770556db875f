"""Transition kernels, killing rules and time changes of the four processes.

All kernels are written in the coordinates where the absorbing set is
``(-1, 1)^c``.  One step of X, Y, OU or BM is an exact Gaussian map

    x1 = r * x0 + sd * z,        z ~ N(0, 1)

and its Brownian-bridge killing probability is
``exp(-2 (1 - x0)(1 - x1) / scale)`` (plus the mirror term), where ``scale``
is the bridge variance seen in the coordinates in which the process is a
Brownian motion, divided by the product of the endpoint barriers.  For X this
is the exact formula for a Brownian motion against the barrier
``(1 + t)^kappa`` interpolated linearly over the step.

The Q-process kernels (OU_Q, BM_Q) are Euler steps of the h-transformed SDEs
and are the only approximate kernels.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import IntEnum

import numba as nb
import numpy as np

from .sde_core import (
    SLOT_STEP,
    SLOT_SUBSTEP,
    RngStream,
    TimeGrid,
    kill_update,
    normal_at,
)

__all__ = [
    "Kind",
    "Regime",
    "ProcessSpec",
    "KilledPath",
    "step_coefficients",
    "step_X",
    "step_Y",
    "step_OU",
    "step_Q",
    "q_drift",
    "time_change_ou",
    "time_change_bm",
    "girsanov_log_weight",
    "girsanov_coefficients",
    "simulate_path",
]

START_LAWS = ("alpha_OU", "alpha_Bm", "beta_OU", "beta_Bm")

# Q-process Euler kernel: refine near the boundary, bounded rejection retries
Q_REFINE_LEVEL = 0.9
Q_REFINE_FACTOR = 10
Q_MAX_ATTEMPTS = 64


class Kind(IntEnum):
    X = 0
    Y = 1
    OU = 2
    BM = 3
    OU_Q = 4
    BM_Q = 5


class Regime:
    SUPERCRITICAL = "supercritical"
    CRITICAL = "critical"
    SUBCRITICAL = "subcritical"


def _as_kind(kind) -> Kind:
    if isinstance(kind, Kind):
        return kind
    try:
        return Kind[str(kind)]
    except KeyError:
        raise ValueError(f"unknown process kind {kind!r}") from None


@dataclass(frozen=True)
class ProcessSpec:
    """Which diffusion to run and where it starts.

    ``start_law`` replaces the point start ``start_x`` by one of the analytic
    laws in :data:`START_LAWS`, sampled by inverse CDF.
    """

    kind: Kind
    kappa: float = 0.5
    start_x: float = 0.0
    start_s: float = 0.0
    start_law: str | None = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "kind", _as_kind(self.kind))
        if not self.kappa > 0 and self.kind in (Kind.X, Kind.Y):
            raise ValueError(f"kappa must be positive, got {self.kappa}")
        if not abs(self.start_x) < 1:
            raise ValueError(f"start_x must lie in (-1, 1), got {self.start_x}")
        if self.start_s < 0:
            raise ValueError(f"start_s must be >= 0, got {self.start_s}")
        if self.start_law is not None and self.start_law not in START_LAWS:
            raise ValueError(f"unknown start law {self.start_law!r}")

    @property
    def regime(self) -> str:
        k = self.kappa
        if math.isclose(k, 0.5, rel_tol=0, abs_tol=1e-12):
            return Regime.CRITICAL
        return Regime.SUPERCRITICAL if k > 0.5 else Regime.SUBCRITICAL

    @property
    def is_q_kernel(self) -> bool:
        return self.kind in (Kind.OU_Q, Kind.BM_Q)


def _y_variance(t0, t1, kappa):
    # integral of (1+u)^(-2 kappa) over [t0, t1]
    e = 1.0 - 2.0 * kappa
    if abs(e) < 1e-12:
        return np.log1p(t1) - np.log1p(t0)
    return ((1.0 + t1) ** e - (1.0 + t0) ** e) / e


def step_coefficients(kind, kappa: float, nodes: np.ndarray):
    """Per-step ``(r, sd, scale)`` arrays of the exact Gaussian kernels on ``nodes``."""
    kind = _as_kind(kind)
    t0 = np.asarray(nodes[:-1], dtype=np.float64)
    t1 = np.asarray(nodes[1:], dtype=np.float64)
    g = t1 - t0
    if kind is Kind.X:
        b0 = (1.0 + t0) ** kappa
        b1 = (1.0 + t1) ** kappa
        return b0 / b1, np.sqrt(g) / b1, g / (b0 * b1)
    if kind is Kind.Y:
        v = _y_variance(t0, t1, kappa)
        return np.ones_like(g), np.sqrt(v), v
    if kind is Kind.OU:
        return np.exp(-0.5 * g), np.sqrt(-np.expm1(-g)), 2.0 * np.sinh(0.5 * g)
    if kind is Kind.BM:
        return np.ones_like(g), np.sqrt(g), g.copy()
    # Q kernels are driftful Euler steps: r, scale unused
    return np.ones_like(g), np.sqrt(g), g.copy()


def step_X(x: float, t: float, gap: float, stream: RngStream, kappa: float) -> float:
    """Exact step of X via its Brownian motion: B = x (1+t)^kappa, B' = B + N(0, gap)."""
    if gap <= 0:
        raise ValueError("gap must be positive")
    b = x * (1.0 + t) ** kappa
    b_next = b + math.sqrt(gap) * stream.normal()
    return b_next / (1.0 + t + gap) ** kappa


def step_Y(x: float, t: float, gap: float, stream: RngStream, kappa: float) -> float:
    """Exact step of Y: x + N(0, v), v the integral of (1+u)^(-2 kappa) over the step."""
    if gap <= 0:
        raise ValueError("gap must be positive")
    v = float(_y_variance(t, t + gap, kappa))
    return x + math.sqrt(v) * stream.normal()


def step_OU(x: float, gap: float, stream: RngStream) -> float:
    """Exact step of the OU process with generator f''/2 - x f'/2."""
    if gap <= 0:
        raise ValueError("gap must be positive")
    return x * math.exp(-0.5 * gap) + math.sqrt(-math.expm1(-gap)) * stream.normal()


@nb.njit(inline="always", cache=True)
def q_drift(kind, x):
    """Drift of the h-transformed (Q-process) SDE with unit diffusion."""
    if kind == 4:
        return -0.5 * x - 2.0 * x / (1.0 - x * x)
    return -0.5 * math.pi * math.tan(0.5 * math.pi * x)


@nb.njit(cache=True)
def q_step(kind, x, gap, seed, particle, counter):
    nsub = Q_REFINE_FACTOR if abs(x) > Q_REFINE_LEVEL else 1
    h = gap / nsub
    sq = math.sqrt(h)
    for j in range(nsub):
        mean = x + q_drift(kind, x) * h
        for a in range(Q_MAX_ATTEMPTS):
            if j == 0 and a == 0:
                slot = SLOT_STEP
            else:
                slot = SLOT_SUBSTEP + 64 * j + a
            y = mean + sq * normal_at(seed, particle, counter, slot)
            if -1.0 < y < 1.0:
                x = y
                break
    return x


def step_Q(kind, x: float, gap: float, stream: RngStream) -> float:
    """Euler step of the OU_Q or BM_Q h-transform SDE, resampling substeps that exit (-1, 1)."""
    kind = _as_kind(kind)
    if kind not in (Kind.OU_Q, Kind.BM_Q):
        raise ValueError("step_Q needs kind OU_Q or BM_Q")
    if not abs(x) < 1:
        raise ValueError("Q-process state must lie in (-1, 1)")
    if gap <= 0:
        raise ValueError("gap must be positive")
    return float(q_step(int(kind), x, gap, stream.master_seed, stream.particle_index,
                        stream.step_counter))


def time_change_ou(s: float, t: float) -> float:
    """OU clock elapsed between X-times s and t in the critical regime."""
    if s < 0 or t < s:
        raise ValueError(f"need 0 <= s <= t, got s={s}, t={t}")
    return math.log((t + 1.0) / (s + 1.0))


def time_change_bm(s: float, t: float, kappa: float) -> float:
    """Brownian clock elapsed between Y-times s and t (subcritical)."""
    if not 0 < kappa < 0.5:
        raise ValueError(f"time_change_bm needs 0 < kappa < 1/2, got {kappa}")
    if s < 0 or t < s:
        raise ValueError(f"need 0 <= s <= t, got s={s}, t={t}")
    return float(_y_variance(s, t, kappa))


def girsanov_coefficients(kappa: float, nodes: np.ndarray):
    """Node arrays used by the X -> Y path weight.

    Returns ``(boundary, integrand, offset)`` with
    boundary = kappa (1+u)^(2 kappa - 1), integrand = kappa (1 - kappa) (1+u)^(2 kappa - 2)
    and offset = (kappa / 2) log((s+1)/(u+1)), so that at node k

        log w = offset_k + (boundary_k x_k^2 - boundary_0 x_0^2 + I_k) / 2

    with I_k the trapezoid integral of integrand * x^2 up to node k.
    """
    u1 = 1.0 + np.asarray(nodes, dtype=np.float64)
    boundary = kappa * u1 ** (2 * kappa - 1)
    integrand = kappa * (1 - kappa) * u1 ** (2 * kappa - 2)
    offset = 0.5 * kappa * np.log(u1[0] / u1)
    return boundary, integrand, offset


@dataclass
class KilledPath:
    """One trajectory on a grid, frozen after its killing step."""

    grid: TimeGrid
    values: np.ndarray
    alive_until: int | None  # last alive node index; None = never killed in horizon
    occupation: np.ndarray = field(repr=False)
    bins: int = 512

    @property
    def survived(self) -> bool:
        return self.alive_until is None

    def last_alive(self) -> int:
        return len(self.grid) - 1 if self.alive_until is None else self.alive_until


def girsanov_log_weight(path: KilledPath, kappa: float) -> float:
    """Log of the density turning X-path expectations into Y-path expectations.

    Averages of ``exp(log_weight) * 1{tau_X > T}`` over X-paths estimate
    ``P^Y(tau_Y > T)``; the two time integrals use the trapezoid rule on the
    path grid.
    """
    if not path.survived:
        raise ValueError("girsanov_log_weight needs a path alive on the whole grid")
    boundary, integrand, offset = girsanov_coefficients(kappa, path.grid.nodes)
    x2 = np.asarray(path.values, dtype=np.float64) ** 2
    f = integrand * x2
    integral = float(np.sum(0.5 * (f[1:] + f[:-1]) * path.grid.gaps))
    n_prime = boundary[-1] * x2[-1] - boundary[0] * x2[0] + integral
    return float(offset[-1] + 0.5 * n_prime)


def simulate_path(spec: ProcessSpec, grid: TimeGrid, seed: int, particle: int = 0,
                  bins: int = 512) -> KilledPath:
    """Simulate one killed path with the scalar kernels (reference implementation)."""
    if spec.start_law is not None:
        raise ValueError("simulate_path takes point starts only")
    stream = RngStream(seed, particle, 0)
    nodes = grid.nodes
    values = np.empty(nodes.size)
    x = spec.start_x
    values[0] = x
    edges = np.linspace(-1.0, 1.0, bins + 1)
    occ = np.zeros(bins)
    node_w = np.zeros(nodes.size)
    if nodes.size > 1:
        g = np.diff(nodes)
        node_w[:-1] += 0.5 * g
        node_w[1:] += 0.5 * g
    alive_until = None
    r, sd, scale = step_coefficients(spec.kind, spec.kappa, nodes)
    for k in range(nodes.size - 1):
        t0, gap = nodes[k], nodes[k + 1] - nodes[k]
        if spec.kind is Kind.X:
            x1 = step_X(x, t0, gap, stream, spec.kappa)
        elif spec.kind is Kind.Y:
            x1 = step_Y(x, t0, gap, stream, spec.kappa)
        elif spec.kind is Kind.OU:
            x1 = step_OU(x, gap, stream)
        elif spec.kind is Kind.BM:
            x1 = x + math.sqrt(gap) * stream.normal()
        else:
            x1 = step_Q(spec.kind, x, gap, stream)
        if not spec.is_q_kernel:
            # kill_update works with a constant bridge; map to the unit-barrier scale
            alive = kill_update((x, x1), scale[k], 1.0, -1.0, stream)
            if not alive:
                alive_until = k
                values[k + 1:] = np.nan
                break
        x = x1
        values[k + 1] = x
        stream.advance()
    last = nodes.size - 1 if alive_until is None else alive_until
    seen = values[: last + 1]
    idx = np.clip(np.searchsorted(edges, seen, side="right") - 1, 0, bins - 1)
    np.add.at(occ, idx, node_w[: last + 1] if alive_until is None else _partial_weights(nodes, last))
    return KilledPath(grid, values, alive_until, occ, bins)


def _partial_weights(nodes, last):
    w = np.zeros(last + 1)
    if last > 0:
        g = np.diff(nodes[: last + 1])
        w[:-1] += 0.5 * g
        w[1:] += 0.5 * g
    return w
