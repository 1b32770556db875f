"""Counter-based random numbers, time grids and Brownian-bridge killing.

Every random draw in the package is a pure function of
``(master_seed, particle_index, step_counter, slot)`` evaluated with the
Philox4x32-10 block cipher (Gaussians by Box-Muller, two consecutive counters
per block), so ensemble results never depend on how particles
are distributed over threads.  Slot 0 carries the Gaussian increment of a step,
slot 1 the uniform used for bridge killing, slot 2 initial-law sampling,
slots 3 and 16-79 the extra variates of guided proposals and slots >= 1024
the extra variates of the Euler substeps of the Q-process kernels.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numba as nb
import numpy as np

__all__ = [
    "RngStream",
    "TimeGrid",
    "gaussian",
    "bridge_crossing_prob",
    "kill_update",
    "philox4x32",
    "SLOT_STEP",
    "SLOT_KILL",
    "SLOT_INIT",
    "SLOT_BESSEL",
    "SLOT_REDRAW",
    "SLOT_SUBSTEP",
]

SLOT_STEP = 0
SLOT_KILL = 1
SLOT_INIT = 2
SLOT_BESSEL = 3
SLOT_REDRAW = 16  # 16 .. 79
SLOT_SUBSTEP = 1024  # 1024 + 64 * substep + attempt

# beyond this exponent the one-sided bridge crossing probability is < 1e-17
BRIDGE_EXPONENT_CUTOFF = 40.0

_M0 = np.uint64(0xD2511F53)
_M1 = np.uint64(0xCD9E8D57)
_W0 = np.uint64(0x9E3779B9)
_W1 = np.uint64(0xBB67AE85)
_MASK32 = np.uint64(0xFFFFFFFF)
_S32 = np.uint64(32)
_S21 = np.uint64(21)
_S11 = np.uint64(11)
_U53 = 2.0**-53


@nb.njit(inline="always", cache=True)
def philox4x32(c0, c1, c2, c3, k0, k1):
    """Philox4x32 with 10 rounds; all arguments are uint64 holding 32-bit words."""
    for _ in range(10):
        p0 = c0 * _M0
        p1 = c2 * _M1
        n0 = (p1 >> _S32) ^ c1 ^ k0
        n2 = (p0 >> _S32) ^ c3 ^ k1
        c1 = p1 & _MASK32
        c3 = p0 & _MASK32
        c0 = n0
        c2 = n2
        k0 = (k0 + _W0) & _MASK32
        k1 = (k1 + _W1) & _MASK32
    return c0, c1, c2, c3


@nb.njit(inline="always", cache=True)
def _u53(hi, lo):
    # open interval (0, 1): never returns exactly 0 or 1
    return (np.float64((hi << _S21) ^ (lo >> _S11)) + 0.5) * _U53


@nb.njit(inline="always", cache=True)
def draw_block(seed, particle, counter, slot):
    """Two uniforms on (0, 1) from one Philox block."""
    k0 = np.uint64(seed) & _MASK32
    k1 = np.uint64(seed) >> _S32
    p = np.uint64(particle)
    w0, w1, w2, w3 = philox4x32(
        np.uint64(counter) & _MASK32, np.uint64(slot) & _MASK32,
        p & _MASK32, p >> _S32, k0, k1,
    )
    return _u53(w0, w1), _u53(w2, w3)


@nb.njit(inline="always", cache=True)
def normal_pair(seed, particle, block, slot):
    """Two independent standard normals (Box-Muller) from one Philox block."""
    u0, u1 = draw_block(seed, particle, block, slot)
    rad = math.sqrt(-2.0 * math.log(u0))
    ang = 2.0 * math.pi * u1
    return rad * math.cos(ang), rad * math.sin(ang)


@nb.njit(inline="always", cache=True)
def normal_at(seed, particle, counter, slot):
    # consecutive counters share a block: even counters take the cosine variate
    z0, z1 = normal_pair(seed, particle, counter >> 1, slot)
    return z0 if (counter & 1) == 0 else z1


@nb.njit(inline="always", cache=True)
def uniform_at(seed, particle, counter, slot):
    u, _ = draw_block(seed, particle, counter, slot)
    return u


@nb.njit(inline="always", cache=True)
def two_sided_kill_prob(x0, x1, scale):
    """Union-bound bridge crossing probability for barriers at +-1.

    ``scale`` is the quadratic variation of the step expressed in the
    coordinates where the barrier is +-1 (for a moving barrier, the product of
    the endpoint barriers enters; see ``processes``).
    """
    eu = 2.0 * (1.0 - x0) * (1.0 - x1) / scale
    el = 2.0 * (1.0 + x0) * (1.0 + x1) / scale
    p = 0.0
    if eu < BRIDGE_EXPONENT_CUTOFF:
        p += math.exp(-eu)
    if el < BRIDGE_EXPONENT_CUTOFF:
        p += math.exp(-el)
    return min(1.0, p)


def _check_seed(seed: int) -> int:
    seed = int(seed)
    if not 0 <= seed < 2**64:
        raise ValueError(f"master_seed must be a 64-bit unsigned integer, got {seed}")
    return seed


@dataclass
class RngStream:
    """Per-particle view of the counter-based generator.

    ``normal()`` and ``uniform()`` read the variates attached to the current
    ``step_counter`` without consuming them; ``advance()`` moves to the next
    step.  ``gaussian(stream)`` is the draw-and-advance shorthand.
    """

    master_seed: int
    particle_index: int = 0
    step_counter: int = 0

    def __post_init__(self) -> None:
        self.master_seed = _check_seed(self.master_seed)
        if self.particle_index < 0 or self.step_counter < 0:
            raise ValueError("particle_index and step_counter must be non-negative")

    def normal(self, slot: int = SLOT_STEP) -> float:
        return float(normal_at(self.master_seed, self.particle_index, self.step_counter, slot))

    def uniform(self, slot: int = SLOT_KILL) -> float:
        return float(uniform_at(self.master_seed, self.particle_index, self.step_counter, slot))

    def advance(self, n: int = 1) -> None:
        self.step_counter += n


def gaussian(stream: RngStream) -> float:
    """Standard normal variate for the stream's current counter, then advance."""
    z = stream.normal()
    stream.advance()
    return z


@dataclass(frozen=True)
class TimeGrid:
    """Strictly increasing simulation nodes from ``s`` to ``t_end``.

    Every gap is at most ``dt``.  Use :meth:`build` to force extra nodes (for
    observation times); between consecutive forced nodes the grid is uniform.
    """

    s: float
    t_end: float
    dt: float
    nodes: np.ndarray = field(repr=False)

    def __post_init__(self) -> None:
        nodes = np.asarray(self.nodes, dtype=np.float64)
        if self.s < 0 or self.dt <= 0:
            raise ValueError("TimeGrid needs s >= 0 and dt > 0")
        if nodes.ndim != 1 or nodes.size < 1:
            raise ValueError("TimeGrid nodes must be a non-empty 1-d array")
        if nodes[0] != self.s or nodes[-1] != self.t_end:
            raise ValueError("TimeGrid nodes must start at s and end at t_end")
        gaps = np.diff(nodes)
        if np.any(gaps <= 0) or np.any(gaps > self.dt * (1 + 1e-9)):
            raise ValueError("TimeGrid gaps must lie in (0, dt]")

    @classmethod
    def build(cls, s: float, t_end: float, dt: float, required=()) -> "TimeGrid":
        if t_end < s:
            raise ValueError(f"t_end={t_end} precedes s={s}")
        if dt <= 0:
            raise ValueError("dt must be positive")
        marks = sorted({float(s), float(t_end), *(float(r) for r in required if s < r < t_end)})
        pieces = [np.array([marks[0]])]
        for a, b in zip(marks[:-1], marks[1:]):
            n = max(1, math.ceil((b - a) / dt - 1e-9))
            seg = np.linspace(a, b, n + 1)[1:]
            seg[-1] = b
            pieces.append(seg)
        return cls(float(s), float(t_end), float(dt), np.concatenate(pieces))

    @property
    def gaps(self) -> np.ndarray:
        return np.diff(self.nodes)

    def __len__(self) -> int:
        return self.nodes.size

    def index_of(self, t: float) -> int:
        """Index of the node equal to ``t`` (within rounding)."""
        i = int(np.argmin(np.abs(self.nodes - t)))
        if abs(self.nodes[i] - t) > 1e-9 * max(1.0, abs(t)):
            raise ValueError(f"time {t} is not a grid node")
        return i


def bridge_crossing_prob(x0: float, x1: float, gap: float, barrier: float,
                         barrier_end: float | None = None) -> float:
    """Probability that a Brownian bridge from ``x0`` to ``x1`` over ``gap`` touches the barrier.

    The barrier is an upper one and is constant unless ``barrier_end`` is
    given, in which case it moves linearly from ``barrier`` to
    ``barrier_end``; the formula is exact in both cases.
    """
    if gap <= 0:
        raise ValueError(f"gap must be positive, got {gap}")
    b1 = barrier if barrier_end is None else barrier_end
    if x0 >= barrier or x1 >= b1:
        return 1.0
    return math.exp(-2.0 * (barrier - x0) * (b1 - x1) / gap)


def kill_update(state: tuple[float, float], gap: float, upper: float, lower: float,
                stream: RngStream) -> bool:
    """Return the alive flag after one step from ``state = (x0, x1)``.

    Dead when ``x1`` leaves ``(lower, upper)``; otherwise dead with the union
    bound of the two one-sided bridge probabilities, decided by the stream's
    kill uniform for the current counter.
    """
    if not lower < upper:
        raise ValueError("need lower < upper")
    x0, x1 = state
    if not lower < x1 < upper:
        return False
    p = bridge_crossing_prob(x0, x1, gap, upper) + bridge_crossing_prob(-x0, -x1, gap, -lower)
    return not stream.uniform() < min(1.0, p)
