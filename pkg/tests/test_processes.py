import math

import numpy as np
import pytest
from scipy import stats

from qsdlab.engine import simulate
from qsdlab.processes import (
    Kind,
    ProcessSpec,
    Regime,
    girsanov_log_weight,
    q_drift,
    simulate_path,
    step_coefficients,
    step_OU,
    step_Q,
    step_X,
    step_Y,
    time_change_bm,
    time_change_ou,
)
from qsdlab.processes import KilledPath
from qsdlab.sde_core import RngStream, TimeGrid


def _draws(fn, n, seed=11):
    return np.array([fn(RngStream(seed, i, 0)) for i in range(n)])


def _within(sample, mean, sd, k=3.0):
    return abs(sample.mean() - mean) <= k * sd / math.sqrt(sample.size)


def test_spec_validation_and_regime():
    assert ProcessSpec("X", 0.75).regime == Regime.SUPERCRITICAL
    assert ProcessSpec("X", 0.5).regime == Regime.CRITICAL
    assert ProcessSpec("X", 0.25).regime == Regime.SUBCRITICAL
    assert ProcessSpec(Kind.OU_Q).is_q_kernel
    for bad in (dict(kind="X", kappa=0.0), dict(kind="X", start_x=1.0), dict(kind="X", start_s=-1.0),
                dict(kind="Z"), dict(kind="OU", start_law="nope")):
        with pytest.raises(ValueError):
            ProcessSpec(**bad)


def test_step_X_moments():
    x, t, gap, k = 0.3, 2.0, 0.5, 0.75
    z = _draws(lambda s: step_X(x, t, gap, s, k), 100_000)
    mean = x * ((1 + t) / (1 + t + gap)) ** k
    var = gap / (1 + t + gap) ** (2 * k)
    assert _within(z, mean, math.sqrt(var))
    se_var = var * math.sqrt(2 / (z.size - 1))
    assert abs(z.var(ddof=1) - var) <= 3 * se_var


def test_step_X_small_gap_continuity():
    s = RngStream(1)
    assert step_X(0.4, 1.0, 1e-12, s, 0.5) == pytest.approx(0.4, abs=1e-5)
    with pytest.raises(ValueError):
        step_X(0.4, 1.0, 0.0, s, 0.5)


def test_step_Y_variance_branches():
    r, sd, scale = step_coefficients(Kind.Y, 0.0, np.array([3.0, 3.7]))
    assert sd[0] ** 2 == pytest.approx(0.7)
    r, sd, scale = step_coefficients(Kind.Y, 0.5, np.array([0.0, math.e - 1]))
    assert sd[0] ** 2 == pytest.approx(1.0, abs=1e-12)
    assert scale[0] == pytest.approx(1.0, abs=1e-12)


def test_step_Y_independent_increments():
    n = 100_000
    a = np.empty(n)
    b = np.empty(n)
    for i in range(n):
        s = RngStream(21, i, 0)
        y1 = step_Y(0.0, 0.0, 0.4, s, 0.25)
        s.advance()
        y2 = step_Y(y1, 0.4, 0.4, s, 0.25)
        a[i], b[i] = y1, y2 - y1
    r = np.corrcoef(a, b)[0, 1]
    assert abs(r) <= 3 / math.sqrt(n)


def test_step_OU_mean_and_stationary_limit():
    z = _draws(lambda s: step_OU(0.5, 2.0, s), 100_000)
    assert _within(z, 0.5 * math.exp(-1), math.sqrt(1 - math.exp(-2)))
    far = _draws(lambda s: step_OU(0.9, 40.0, s), 20_000, seed=4)
    assert abs(far.var() - 1) < 0.05
    small = _draws(lambda s: step_OU(0.0, 1e-4, s), 20_000, seed=5)
    assert abs(small.var() / 1e-4 - 1) < 0.05


def test_q_drifts():
    assert q_drift(4, 0.0) == 0.0 and q_drift(5, 0.0) == 0.0
    assert q_drift(4, 0.5) == pytest.approx(-0.25 - 1.0 / 0.75)
    assert q_drift(5, 0.5) == pytest.approx(-0.5 * math.pi * math.tan(math.pi / 4))


def test_step_Q_stays_inside():
    for kind in ("OU_Q", "BM_Q"):
        for x in (-0.999, -0.95, 0.0, 0.93, 0.9999):
            for i in range(200):
                y = step_Q(kind, x, 0.01, RngStream(8, i, 3))
                assert -1 < y < 1
    with pytest.raises(ValueError):
        step_Q("OU", 0.0, 0.01, RngStream(1))
    with pytest.raises(ValueError):
        step_Q("OU_Q", 1.0, 0.01, RngStream(1))


def test_time_changes():
    assert time_change_ou(0, 0) == 0
    assert time_change_ou(0, math.e - 1) == pytest.approx(1)
    assert time_change_ou(1, 3) + time_change_ou(3, 7) == pytest.approx(time_change_ou(1, 7))
    with pytest.raises(ValueError):
        time_change_ou(2, 1)
    assert time_change_bm(2, 2, 0.25) == 0
    assert time_change_bm(0, 3, 0.25) == pytest.approx(2)
    assert time_change_bm(1, 4, 1e-9) == pytest.approx(3, rel=1e-6)
    with pytest.raises(ValueError):
        time_change_bm(0, 1, 0.5)
    with pytest.raises(ValueError):
        time_change_bm(0, 1, 0.7)


def test_time_change_consistency_ks():
    # unkilled X from (x, s) at t has the law of OU after the clock log((t+1)/(s+1))
    x0, s, t, n = 0.3, 1.0, 3.0, 20_000
    steps = np.linspace(s, t, 5)
    xs = np.empty(n)
    for i in range(n):
        st = RngStream(31, i, 0)
        x = x0
        for a, b in zip(steps[:-1], steps[1:]):
            x = step_X(x, a, b - a, st, 0.5)
            st.advance()
        xs[i] = x
    zs = _draws(lambda st: step_OU(x0, time_change_ou(s, t), st), n, seed=32)
    assert stats.ks_2samp(xs, zs).pvalue > 0.01


def test_dubins_schwartz_consistency_ks():
    x0, s, t, n, k = -0.2, 2.0, 6.0, 20_000, 0.25
    ys = np.empty(n)
    for i in range(n):
        st = RngStream(41, i, 0)
        y = step_Y(x0, s, 2.0, st, k)
        st.advance()
        ys[i] = step_Y(y, s + 2.0, 2.0, st, k)
    v = time_change_bm(s, t, k)
    bs = x0 + math.sqrt(v) * _draws(lambda st: st.normal(), n, seed=42)
    assert stats.ks_2samp(ys, bs).pvalue > 0.01


def test_kernel_exactness_coefficients():
    nodes = np.array([0.0, 0.25, 1.0])
    r, sd, scale = step_coefficients(Kind.X, 0.5, nodes)
    assert r[1] == pytest.approx((1.25 / 2.0) ** 0.5)
    assert sd[1] ** 2 == pytest.approx(0.75 / 2.0)
    r, sd, scale = step_coefficients(Kind.OU, 0.5, nodes)
    assert r[0] == pytest.approx(math.exp(-0.125))
    assert sd[0] ** 2 == pytest.approx(1 - math.exp(-0.25))


def _zero_path(s, T, kappa=0.5):
    g = TimeGrid.build(s, T, 0.1)
    return KilledPath(g, np.zeros(len(g)), None, np.zeros(8), 8)


def test_girsanov_zero_path():
    s, T, k = 1.0, 6.0, 0.3
    assert girsanov_log_weight(_zero_path(s, T), k) == pytest.approx(0.5 * k * math.log((s + 1) / (T + 1)))


def test_girsanov_vanishes_as_kappa_to_zero():
    g = TimeGrid.build(0.0, 2.0, 0.05)
    path = simulate_path(ProcessSpec("X", 1e-10, 0.2), g, seed=3)
    if path.survived:
        assert abs(girsanov_log_weight(path, 1e-10)) < 1e-8
    rng = np.random.default_rng(0)
    vals = np.clip(rng.normal(0, 0.3, len(g)), -0.9, 0.9)
    assert abs(girsanov_log_weight(KilledPath(g, vals, None, np.zeros(4), 4), 1e-12)) < 1e-10


def test_girsanov_rejects_killed_paths():
    g = TimeGrid.build(0.0, 1.0, 0.1)
    path = KilledPath(g, np.zeros(len(g)), 3, np.zeros(4), 4)
    with pytest.raises(ValueError):
        girsanov_log_weight(path, 0.25)


def test_girsanov_weights_positive_finite_and_match_engine():
    spec = ProcessSpec("X", 0.25, 0.0)
    g = TimeGrid.build(0.0, 3.0, 0.01)
    ens = simulate(spec, g, 300, 17, girsanov=True)
    for i in range(300):
        p = simulate_path(spec, g, 17, particle=i)
        assert (p.alive_until is None) == (ens.last_alive[i] == len(g) - 1)
        if p.survived:
            lw = girsanov_log_weight(p, 0.25)
            assert np.isfinite(lw) and math.exp(lw) > 0
            assert ens.girsanov[i, -1] == pytest.approx(lw, abs=1e-9)
            assert ens.positions[i, -1] == pytest.approx(p.values[-1], abs=1e-12)


def test_killed_path_invariants():
    g = TimeGrid.build(0.0, 20.0, 0.01)
    for seed in range(5):
        p = simulate_path(ProcessSpec("OU", start_x=0.5), g, seed, bins=64)
        last = p.last_alive()
        assert np.all(np.abs(p.values[: last + 1]) < 1)
        assert p.occupation.sum() == pytest.approx(g.nodes[last] - g.nodes[0], abs=1e-9)
