"""Compiled particle-ensemble kernel.

Particles are simulated one whole trajectory at a time inside fixed-size
groups; groups are distributed over threads with ``prange``.  Each particle
writes only to its own rows, and per-group occupation sums are accumulated in
particle order, so outputs are bit-identical for every thread count.

Two sampling modes share the kernel:

* direct: killing is decided by the bridge probability and a uniform draw;
  every surviving path has log weight 0.
* guided: increments get the extra drift ``sd^2 h'(x)/h(x)`` of a guide
  function ``h`` (capped at half the distance to the boundary) and particles
  are never killed at random; instead the exact per-step likelihood ratio and
  the bridge survival factor ``1 - p_kill`` are accumulated in a log weight.
  Weighted averages over the ensemble are unbiased for the direct-mode
  averages, at a much smaller variance when survival is rare.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numba as nb
import numpy as np

from .processes import Kind, ProcessSpec, girsanov_coefficients, q_step, step_coefficients
from .sde_core import SLOT_BESSEL, SLOT_INIT, SLOT_KILL, SLOT_REDRAW, SLOT_STEP, TimeGrid, normal_at, normal_pair, two_sided_kill_prob, uniform_at

__all__ = ["GUIDE_NONE", "GUIDE_PARABOLA", "GUIDE_COSINE", "GROUP_SIZE", "ParticleEnsemble", "simulate"]

GUIDE_NONE = 0
GUIDE_PARABOLA = 1  # h = 1 - x^2
GUIDE_COSINE = 2  # h = cos(pi x / 2)
GROUP_SIZE = 256
MAX_REDRAWS = 64
CAP_FRACTION = 0.5
BESSEL_ZONE = 4.0
# value-safe subset: no assumptions about NaN or infinities
_FASTMATH = {"nsz", "arcp", "contract", "afn", "reassoc"}


@nb.njit(inline="always", cache=True)
def _guide_ratio(guide, x):
    # h'(x) / h(x)
    if guide == 1:
        return -2.0 * x / (1.0 - x * x)
    return -0.5 * math.pi * math.tan(0.5 * math.pi * x)


@nb.njit(inline="always", cache=True)
def _log_mass_inside(mu, s):
    # log P(N(mu, s^2) in (-1, 1))
    b = (1.0 - mu) / s
    a = (1.0 + mu) / s
    if a > 8.0 and b > 8.0:
        return 0.0
    out = 1.0 - 0.5 * math.erfc(b / math.sqrt(2.0)) - 0.5 * math.erfc(a / math.sqrt(2.0))
    return math.log(out) if out > 0.0 else -math.inf


@nb.njit(inline="always", cache=True)
def _guided_move(guide, x, m, s, z, seed, p, k):
    """Proposal move and its log likelihood ratio (target Gaussian over proposal).

    Within ``BESSEL_ZONE`` standard deviations of the nearest barrier the
    distance to it is moved as a 3-d Bessel process (the exact h-transform of
    Brownian motion killed at a flat barrier, h = distance); elsewhere the
    Gaussian step gets the guide drift, truncated to (-1, 1).
    """
    side = 1.0 if m >= 0.0 else -1.0
    d0 = 1.0 - side * m
    if d0 < BESSEL_ZONE * s:
        z2, z3 = normal_pair(seed, p, k, SLOT_BESSEL)
        a = d0 + s * z
        d1 = math.sqrt(a * a + s * s * (z2 * z2 + z3 * z3))
        x1 = side * (1.0 - d1)
        # Bessel density = (d1/d0) * killed Gaussian density; Gaussian parts cancel
        e = 2.0 * d0 * d1 / (s * s)
        return x1, math.log(d0 / d1) - math.log(-math.expm1(-e))
    delta = s * s * _guide_ratio(guide, x)
    cap = CAP_FRACTION * (1.0 - abs(x))
    if delta > cap:
        delta = cap
    elif delta < -cap:
        delta = -cap
    mu = m + delta
    x1 = mu + s * z
    if not (-1.0 < x1 < 1.0):
        for a in range(MAX_REDRAWS):
            z = normal_at(seed, p, k, SLOT_REDRAW + a)
            x1 = mu + s * z
            if -1.0 < x1 < 1.0:
                break
    d = delta / s
    return x1, -0.5 * d * d - d * z + _log_mass_inside(mu, s)


@nb.njit(inline="always", cache=True)
def _initial(seed, p, x_start, init_xs, init_cdf):
    if init_xs.size == 0:
        return x_start
    u = uniform_at(seed, p, 0, SLOT_INIT)
    j = np.searchsorted(init_cdf, u)
    if j <= 0:
        return init_xs[0]
    if j >= init_cdf.size:
        return init_xs[-1]
    c0 = init_cdf[j - 1]
    c1 = init_cdf[j]
    w = (u - c0) / (c1 - c0) if c1 > c0 else 0.5
    return init_xs[j - 1] + w * (init_xs[j] - init_xs[j - 1])


@nb.njit(parallel=True, cache=True, fastmath=_FASTMATH)
def _kernel(kind, nodes, r, sd, scale, seed, n, p_offset, x_start, init_xs, init_cdf,
            guide, bridge, rec_idx, girs, girs_b, girs_i, occ_end, bins, group):
    nsteps = nodes.size - 1
    nrec = rec_idx.size
    rec_x = np.full((n, nrec), np.nan)
    rec_lw = np.full((n, nrec), -np.inf)
    rec_gw = np.full((n if girs else 0, nrec), np.nan)
    last = np.empty(n, dtype=np.int64)
    x_init = np.empty(n)
    ngroups = (n + group - 1) // group
    occ_on = occ_end >= 0
    occ = np.zeros((ngroups if occ_on else 0, bins))
    occ_wsum = np.zeros(ngroups if occ_on else 0)
    q_kind = kind >= 4
    # trapezoid weights on [nodes[0], nodes[occ_end]]
    node_w = np.zeros(nodes.size)
    if occ_on:
        for k in range(occ_end):
            g = nodes[k + 1] - nodes[k]
            node_w[k] += 0.5 * g
            node_w[k + 1] += 0.5 * g

    for gi in nb.prange(ngroups):
        buf = np.zeros(bins if occ_on else 0)
        lo = gi * group
        hi = min(n, lo + group)
        for i in range(lo, hi):
            p = p_offset + i
            x = _initial(seed, p, x_start, init_xs, init_cdf)
            x_init[i] = x
            lw = 0.0
            integral = 0.0
            alive = True
            jr = 0
            if occ_on:
                buf[:] = 0.0
            k_last = nsteps
            lw_occ = 0.0
            z_odd = 0.0
            for k in range(nsteps + 1):
                # node k: the particle is alive here
                while jr < nrec and rec_idx[jr] == k:
                    rec_x[i, jr] = x
                    rec_lw[i, jr] = lw
                    if girs:
                        rec_gw[i, jr] = 0.5 * (girs_b[k] * x * x - girs_b[0] * x_init[i] * x_init[i]
                                               + integral)
                    jr += 1
                if occ_on and k == occ_end:
                    lw_occ = lw
                if occ_on and k <= occ_end:
                    b = int((x + 1.0) * 0.5 * bins)
                    if b >= bins:
                        b = bins - 1
                    elif b < 0:
                        b = 0
                    buf[b] += node_w[k]
                if k == nsteps:
                    break
                # step k -> k + 1
                if q_kind:
                    x1 = q_step(kind, x, nodes[k + 1] - nodes[k], seed, p, k)
                else:
                    m = r[k] * x
                    s = sd[k]
                    if (k & 1) == 0:
                        z, z_odd = normal_pair(seed, p, k >> 1, SLOT_STEP)
                    else:
                        z = z_odd
                    if guide == 0:
                        x1 = m + s * z
                        if not (-1.0 < x1 < 1.0):
                            alive = False
                        elif bridge:
                            pk = two_sided_kill_prob(x, x1, scale[k])
                            if pk > 0.0 and uniform_at(seed, p, k, SLOT_KILL) < pk:
                                alive = False
                    else:
                        x1, dlw = _guided_move(guide, x, m, s, z, seed, p, k)
                        if not (-1.0 < x1 < 1.0):
                            alive = False
                        else:
                            pk = two_sided_kill_prob(x, x1, scale[k]) if bridge else 0.0
                            if pk >= 1.0:
                                alive = False
                            else:
                                lw += dlw + math.log1p(-pk)
                if not alive:
                    k_last = k
                    break
                if girs:
                    integral += 0.5 * (girs_i[k] * x * x + girs_i[k + 1] * x1 * x1) * (nodes[k + 1] - nodes[k])
                x = x1
            last[i] = k_last
            if occ_on and k_last >= occ_end:
                w = math.exp(lw_occ)
                occ_wsum[gi] += w
                for b in range(bins):
                    occ[gi, b] += w * buf[b]
    return rec_x, rec_lw, rec_gw, last, x_init, occ, occ_wsum


@dataclass
class ParticleEnsemble:
    """Outcome of one ensemble run.

    ``last_alive[i]`` is the index of the last grid node at which particle i
    was alive (``len(grid) - 1`` for survivors).  ``positions`` and
    ``log_weights`` hold the state at the requested record nodes (NaN and
    -inf once dead).  ``occupation`` holds per-group weighted occupation
    histograms of the paths alive at ``occupation_index``.
    """

    spec: ProcessSpec
    grid: TimeGrid
    seed: int
    record_index: np.ndarray
    positions: np.ndarray
    log_weights: np.ndarray
    last_alive: np.ndarray
    initial: np.ndarray
    girsanov: np.ndarray | None = None
    occupation: np.ndarray | None = field(default=None, repr=False)
    occupation_weight: np.ndarray | None = None
    occupation_index: int | None = None
    guide: int = GUIDE_NONE
    bins: int = 512

    @property
    def n(self) -> int:
        return self.last_alive.size

    @property
    def record_times(self) -> np.ndarray:
        return self.grid.nodes[self.record_index]

    def column(self, t: float) -> int:
        idx = self.grid.index_of(t)
        hits = np.flatnonzero(self.record_index == idx)
        if hits.size == 0:
            raise KeyError(f"time {t} was not recorded")
        return int(hits[0])

    def alive_at(self, t: float) -> np.ndarray:
        return self.last_alive >= self.grid.index_of(t)

    def weights_at(self, t: float) -> np.ndarray:
        """Importance weights of the paths at time t (0 for dead paths)."""
        return np.exp(self.log_weights[:, self.column(t)])


def simulate(spec: ProcessSpec, grid: TimeGrid, n: int, seed: int, record_times=(),
             guide: int = GUIDE_NONE, bridge: bool = True, girsanov: bool = False,
             occupation_until: float | None = None, bins: int = 512,
             init_table: tuple[np.ndarray, np.ndarray] | None = None,
             particle_offset: int = 0) -> ParticleEnsemble:
    """Run ``n`` particles of ``spec`` over ``grid``.

    ``init_table = (xs, cdf)`` samples the start by inverse CDF; otherwise all
    particles start at ``spec.start_x``.  ``grid.s`` must equal ``spec.start_s``.
    """
    if n < 1:
        raise ValueError("need at least one particle")
    if abs(grid.s - spec.start_s) > 1e-12:
        raise ValueError("grid must start at the process start time")
    if spec.is_q_kernel and guide != GUIDE_NONE:
        raise ValueError("Q-process kernels are not guided")
    if girsanov and spec.kind is not Kind.X:
        raise ValueError("Girsanov weights apply to X paths")
    seed = int(seed)
    if not 0 <= seed < 2**64:
        raise ValueError("seed must be a 64-bit unsigned integer")
    nodes = grid.nodes
    rec = np.unique(np.array([grid.index_of(t) for t in record_times] + [len(grid) - 1], dtype=np.int64))
    r, sd, scale = step_coefficients(spec.kind, spec.kappa, nodes)
    if girsanov:
        gb, gi, _ = girsanov_coefficients(spec.kappa, nodes)
    else:
        gb = gi = np.zeros(1)
    occ_end = -1 if occupation_until is None else grid.index_of(occupation_until)
    if init_table is None:
        xs = cdf = np.zeros(0)
    else:
        xs, cdf = (np.ascontiguousarray(a, dtype=np.float64) for a in init_table)
    out = _kernel(int(spec.kind), nodes, r, sd, scale, np.uint64(seed), int(n), int(particle_offset),
                  float(spec.start_x), xs, cdf, int(guide), bool(bridge), rec, bool(girsanov),
                  gb, gi, int(occ_end), int(bins), GROUP_SIZE)
    rec_x, rec_lw, rec_gw, last, x_init, occ, occ_w = out
    if girsanov:
        _, _, offset = girsanov_coefficients(spec.kappa, nodes)
        rec_gw = rec_gw + offset[rec][None, :]
    return ParticleEnsemble(
        spec=spec, grid=grid, seed=seed, record_index=rec, positions=rec_x, log_weights=rec_lw,
        last_alive=last, initial=x_init, girsanov=rec_gw if girsanov else None,
        occupation=occ if occ_end >= 0 else None, occupation_weight=occ_w if occ_end >= 0 else None,
        occupation_index=occ_end if occ_end >= 0 else None, guide=guide, bins=bins,
    )
