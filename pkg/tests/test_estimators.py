import math

import numpy as np
import pytest

from qsdlab.analytic import get_density, inverse_cdf_table
from qsdlab.estimators import (
    Budget,
    EmpiricalMeasure,
    ExtinctionError,
    SurvivalCurve,
    conditioned_law,
    fit_slope,
    ks_and_w1,
    measure_from_samples,
    qprocess_law_finite_horizon,
    qprocess_law_reweighted,
    quasi_ergodic_law,
    survival_curve,
    tv_distance,
)
from qsdlab.processes import ProcessSpec


def _sample(name, n, seed=0):
    xs, cdf = inverse_cdf_table(name)
    u = np.random.default_rng(seed).random(n)
    return np.interp(u, cdf, xs)


def test_budget_validation():
    for bad in (dict(N=0, dt=0.01, seed=1), dict(N=10, dt=0.0, seed=1), dict(N=10, dt=0.01, seed=1, sampler="x")):
        with pytest.raises(ValueError):
            Budget(**bad)


def test_measure_basics():
    m = measure_from_samples(np.array([-0.5, 0.5, 0.5]), bins=4)
    assert m.total_weight == 3
    assert np.allclose(m.normalized, [0, 1 / 3, 0, 2 / 3])
    assert m.moment(1) == pytest.approx(0.5 / 3)
    assert m.n_effective == pytest.approx(3)
    with pytest.raises(ValueError):
        EmpiricalMeasure(np.ones(3), 1.0, 1, bins=4)
    with pytest.raises(ValueError):
        EmpiricalMeasure(-np.ones(4), 1.0, 1, bins=4)


def test_tv_exact_and_noise_floor():
    n = 200_000
    m = measure_from_samples(_sample("alpha_OU", n), bins=512)
    d = tv_distance(m, "alpha_OU")
    # multinomial noise floor for 512 cells is about 8.1 / sqrt(n)
    assert d.value < 12 / math.sqrt(n)
    # resampling adds a second layer of noise, so the interval sits above the point value
    assert d.value <= d.ci_high and d.se > 0
    assert tv_distance(m, "beta_OU").value > 3 * d.value


def test_tv_empirical_pair_and_bins_mismatch():
    a = measure_from_samples(_sample("alpha_Bm", 50_000, 1), bins=64)
    b = measure_from_samples(_sample("alpha_Bm", 50_000, 2), bins=64)
    assert tv_distance(a, b).value < 0.03
    with pytest.raises(ValueError):
        tv_distance(a, measure_from_samples(np.zeros(3), bins=32))
    with pytest.raises(TypeError):
        tv_distance(a, 3.0)


def test_ks_w1_zero_for_exact_cells():
    q = get_density("beta_Bm").cell_integrals(np.linspace(-1, 1, 129))
    m = EmpiricalMeasure(q, 1e9, 1, bins=128)
    ks, w1 = ks_and_w1(m, "beta_Bm")
    assert ks < 1e-12 and w1 < 1e-12


def test_bootstrap_weighted_and_grouped():
    rng = np.random.default_rng(3)
    x = rng.uniform(-1, 1, 5000)
    w = rng.exponential(size=5000)
    m = measure_from_samples(x, w, bins=16)
    b = m.bootstrap(20, seed=1)
    assert b.shape == (20, 16) and np.allclose(b.sum(axis=1), 1)
    assert np.array_equal(b, m.bootstrap(20, seed=1))
    g = EmpiricalMeasure(np.ones(16), 1.0, 1, bins=16, group_hist=rng.random((10, 16)))
    assert np.allclose(g.bootstrap(5).sum(axis=1), 1)
    with pytest.raises(ValueError):
        EmpiricalMeasure(np.ones(16), 1.0, 1, bins=16).bootstrap(2)


def test_conditioned_law_guided_vs_direct():
    spec = ProcessSpec("OU", start_x=0.0)
    a = conditioned_law(spec, 3.0, Budget(40_000, 0.01, 1, bins=16))
    b = conditioned_law(spec, 3.0, Budget(40_000, 0.01, 2, sampler="direct", bins=16))
    assert a.meta["survival_estimate"] == pytest.approx(b.meta["survival_estimate"], rel=0.05)
    # about 2400 direct survivors: the TV noise floor on 16 cells is about 0.03
    assert tv_distance(a, b, n_boot=0).value < 0.08
    assert abs(a.moment(2) - b.moment(2)) < 0.02


def test_extinction_raises_with_checkpoints():
    spec = ProcessSpec("BM", start_x=0.0)
    with pytest.raises(ExtinctionError) as info:
        conditioned_law(spec, 30.0, Budget(50, 0.01, 1, sampler="direct"))
    assert info.value.checkpoints and info.value.checkpoints[-1][1] == 0


def test_quasi_ergodic_short_horizon_is_conditioned_law():
    spec = ProcessSpec("OU", start_x=0.2)
    bud = Budget(2000, 0.01, 4, bins=32)
    a = quasi_ergodic_law(spec, 0.01, bud)
    b = conditioned_law(spec, 0.01, bud)
    assert np.array_equal(a.weights, b.weights)
    with pytest.raises(ValueError):
        quasi_ergodic_law(spec, 0.0, bud)


def test_quasi_ergodic_mass_is_time_weighted():
    spec = ProcessSpec("OU", start_x=0.0)
    m = quasi_ergodic_law(spec, 2.0, Budget(3000, 0.01, 5, sampler="direct", bins=32))
    assert m.total_weight == pytest.approx(m.meta["survivors"], rel=1e-9)
    assert m.group_hist is not None


def test_qprocess_reweighted_requires_known_eta():
    with pytest.raises(ValueError):
        qprocess_law_reweighted(ProcessSpec("OU"), 1.0, 2.0, Budget(100, 0.01, 1))
    with pytest.raises(ValueError):
        qprocess_law_reweighted(ProcessSpec("X", 0.5), 3.0, 2.0, Budget(100, 0.01, 1))


def test_finite_horizon_shares_ensemble():
    spec = ProcessSpec("X", 0.5, 0.0)
    out = qprocess_law_finite_horizon(spec, 1.0, [2.0, 3.0], Budget(3000, 0.01, 6, sampler="direct", bins=32))
    assert [m.meta["T"] for m in out] == [2.0, 3.0]
    assert out[0].meta["survivors"] >= out[1].meta["survivors"]
    with pytest.raises(ValueError):
        qprocess_law_finite_horizon(spec, 2.5, [2.0], Budget(10, 0.01, 1))


def test_survival_curve_direct_invariants_and_rate():
    spec = ProcessSpec("OU", start_x=0.0)
    c = survival_curve(spec, 6.0, Budget(50_000, 0.01, 7, sampler="direct"), points=32)
    assert c.sampler == "direct" and np.all(np.diff(c.estimates) <= 0)
    assert c.slope == pytest.approx(-1.0, abs=0.1)
    with pytest.raises(KeyError):
        c.at(3.3333)
    assert c.at(float(c.times[-1])) == c.estimates[-1]


def test_survival_curve_critical_scaled():
    spec = ProcessSpec("X", 0.5, 0.0)
    c = survival_curve(spec, 10.0, Budget(20_000, 0.01, 8), points=16, extra_times=(5.0,))
    assert 5.0 in c.times
    assert np.allclose(c.scaled, (c.times + 1) * c.estimates)


def test_survival_curve_validation():
    with pytest.raises(ValueError):
        SurvivalCurve(np.array([1.0, 2.0]), np.array([3, 4]), np.array([0.5, 0.6]), np.zeros(2))
    with pytest.raises(ValueError):
        SurvivalCurve(np.array([2.0, 1.0]), np.array([3, 4]), np.array([0.5, 0.4]), np.zeros(2))
    SurvivalCurve(np.array([1.0, 2.0]), np.array([3, 4]), np.array([0.5, 0.6]), np.zeros(2), sampler="guided")


def test_fit_slope():
    x = np.linspace(0, 5, 11)
    s, b = fit_slope(x, 2 - 0.7 * x)
    assert s == pytest.approx(-0.7) and b == pytest.approx(2)
