import math

import numpy as np
import pytest
from scipy import stats

from qsdlab.analytic import inverse_cdf_table
from qsdlab.engine import GROUP_SIZE, GUIDE_COSINE, GUIDE_NONE, GUIDE_PARABOLA, simulate
from qsdlab.processes import ProcessSpec, simulate_path
from qsdlab.sde_core import TimeGrid


@pytest.mark.parametrize("kind,kappa,x0", [("X", 0.5, 0.1), ("Y", 0.25, -0.3), ("OU", 0.5, 0.6), ("BM", 0.5, 0.0)])
def test_direct_kernel_matches_scalar_reference(kind, kappa, x0):
    spec = ProcessSpec(kind, kappa, x0)
    g = TimeGrid.build(0.0, 2.0, 0.01, required=[0.5])
    n = 200
    ens = simulate(spec, g, n, 99, record_times=(0.5,))
    assert ens.positions.shape == (n, 2)
    for i in range(n):
        p = simulate_path(spec, g, 99, particle=i)
        assert ens.last_alive[i] == p.last_alive()
        if p.survived:
            assert ens.positions[i, -1] == pytest.approx(p.values[-1], abs=1e-12)
            assert ens.log_weights[i, -1] == 0.0
        else:
            assert np.isnan(ens.positions[i, -1]) and ens.log_weights[i, -1] == -np.inf


def test_particle_offset_reproduces_rows():
    spec = ProcessSpec("OU", start_x=0.2)
    g = TimeGrid.build(0.0, 1.0, 0.01)
    full = simulate(spec, g, 2 * GROUP_SIZE + 7, 5, guide=GUIDE_PARABOLA)
    part = simulate(spec, g, 40, 5, guide=GUIDE_PARABOLA, particle_offset=300)
    assert np.array_equal(full.positions[300:340], part.positions)
    assert np.array_equal(full.log_weights[300:340], part.log_weights)


def test_seed_changes_output():
    spec = ProcessSpec("OU")
    g = TimeGrid.build(0.0, 0.5, 0.01)
    a = simulate(spec, g, 100, 1)
    b = simulate(spec, g, 100, 2)
    c = simulate(spec, g, 100, 1)
    assert np.array_equal(a.last_alive, c.last_alive)
    assert not np.array_equal(np.nan_to_num(a.positions), np.nan_to_num(b.positions))


@pytest.mark.parametrize("kind,guide", [("OU", GUIDE_PARABOLA), ("BM", GUIDE_COSINE), ("OU", GUIDE_COSINE)])
def test_guided_survival_is_unbiased(kind, guide):
    spec = ProcessSpec(kind, 0.5, 0.3)
    g = TimeGrid.build(0.0, 3.0, 0.01)
    n = 40_000
    d = simulate(spec, g, n, 7)
    w = np.exp(simulate(spec, g, n, 8, guide=guide).log_weights[:, -1])
    alive = (d.last_alive == len(g) - 1).astype(float)
    se = math.sqrt(alive.var() / n + w.var() / n)
    assert abs(alive.mean() - w.mean()) < 4 * se


def test_guided_conditioned_mean_matches_direct():
    spec = ProcessSpec("X", 0.25, 0.5)
    g = TimeGrid.build(0.0, 4.0, 0.01)
    n = 60_000
    d = simulate(spec, g, n, 10)
    gd = simulate(spec, g, n, 11, guide=GUIDE_COSINE)
    xd = d.positions[d.last_alive == len(g) - 1, -1]
    w = np.exp(gd.log_weights[:, -1])
    xg = np.nan_to_num(gd.positions[:, -1])
    for f in (lambda x: x, lambda x: x * x):
        md, mg = f(xd).mean(), np.sum(w * f(xg)) / w.sum()
        ess = w.sum() ** 2 / np.sum(w * w)
        se = math.sqrt(f(xd).var() / xd.size + f(xd).var() / ess)
        assert abs(md - mg) < 4 * se


def test_guided_weights_bounded_without_kill_draws():
    spec = ProcessSpec("OU")
    g = TimeGrid.build(0.0, 5.0, 0.01)
    ens = simulate(spec, g, 5000, 3, guide=GUIDE_PARABOLA)
    lw = ens.log_weights[:, -1]
    assert np.all(np.isfinite(lw[ens.last_alive == len(g) - 1]))
    w = np.exp(lw)
    assert w.sum() ** 2 / np.sum(w * w) > 0.4 * ens.n


def test_bridge_off_kills_less():
    spec = ProcessSpec("BM")
    g = TimeGrid.build(0.0, 1.0, 0.05)
    on = simulate(spec, g, 20_000, 4, bridge=True)
    off = simulate(spec, g, 20_000, 4, bridge=False)
    assert np.sum(off.last_alive == len(g) - 1) > np.sum(on.last_alive == len(g) - 1)


@pytest.mark.parametrize("kind", ["OU_Q", "BM_Q"])
def test_q_kernels_never_die(kind):
    spec = ProcessSpec(kind, start_x=0.97)
    g = TimeGrid.build(0.0, 2.0, 0.01)
    ens = simulate(spec, g, 2000, 12)
    assert np.all(ens.last_alive == len(g) - 1)
    assert np.all(np.abs(ens.positions) < 1)
    with pytest.raises(ValueError):
        simulate(spec, g, 10, 1, guide=GUIDE_PARABOLA)


def test_initial_law_sampling():
    spec = ProcessSpec("OU", start_law="alpha_OU")
    g = TimeGrid.build(0.0, 0.02, 0.01)
    ens = simulate(spec, g, 20_000, 13, init_table=inverse_cdf_table("alpha_OU"))
    k = math.exp(0.5) / 2
    cdf = lambda x: k * (x * np.exp(-x * x / 2) + math.exp(-0.5))
    assert stats.kstest(ens.initial, cdf).pvalue > 0.01


def test_occupation_totals():
    spec = ProcessSpec("OU", start_x=0.0)
    g = TimeGrid.build(0.0, 2.0, 0.01, required=[1.5])
    for guide in (GUIDE_NONE, GUIDE_PARABOLA):
        ens = simulate(spec, g, 3000, 14, guide=guide, occupation_until=1.5, bins=64)
        assert ens.occupation.shape == (math.ceil(3000 / GROUP_SIZE), 64)
        idx = g.index_of(1.5)
        assert ens.occupation.sum() == pytest.approx(1.5 * ens.occupation_weight.sum(), rel=1e-9)
        if guide == GUIDE_NONE:
            assert ens.occupation_weight.sum() == pytest.approx(np.sum(ens.last_alive >= idx))


def test_girsanov_only_for_X():
    g = TimeGrid.build(0.0, 1.0, 0.01)
    with pytest.raises(ValueError):
        simulate(ProcessSpec("Y", 0.25), g, 10, 1, girsanov=True)


def test_argument_validation():
    g = TimeGrid.build(0.0, 1.0, 0.01)
    with pytest.raises(ValueError):
        simulate(ProcessSpec("OU"), g, 0, 1)
    with pytest.raises(ValueError):
        simulate(ProcessSpec("OU", start_s=0.5), g, 10, 1)
    with pytest.raises(ValueError):
        simulate(ProcessSpec("OU"), g, 10, -1)


def test_weights_at_and_columns():
    spec = ProcessSpec("OU", start_x=0.1)
    g = TimeGrid.build(0.0, 1.0, 0.01, required=[0.25])
    ens = simulate(spec, g, 500, 15, record_times=(0.25,))
    assert np.allclose(ens.record_times, [0.25, 1.0])
    assert np.array_equal(ens.weights_at(1.0) > 0, ens.alive_at(1.0))
    with pytest.raises(KeyError):
        ens.column(0.5)
