"""Experiment drivers: simulation, estimation and analytic targets bound into reports.

Experiments are data: :class:`ExperimentConfig` names one of
:data:`EXPERIMENTS` and :func:`run` dispatches on it.  Every gated metric in an
:class:`ExperimentReport` carries its value and threshold; CSV artifacts are a
pure function of the config (no timings), so reruns are byte-identical.
"""

from __future__ import annotations

import io
import math
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
from scipy.integrate import simpson
from scipy.special import erf

from . import __version__, analytic
from .engine import simulate
from .estimators import (
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
    run_ensemble,
    survival_curve,
    tv_distance,
)
from .processes import Kind, ProcessSpec, Regime, step_Y
from .sde_core import RngStream, TimeGrid

__all__ = [
    "EXPERIMENTS",
    "ConfigError",
    "ExperimentConfig",
    "ExperimentReport",
    "Metric",
    "run",
    "oracle_check",
    "load_config_file",
    "write_histogram_csv",
    "write_survival_csv",
    "write_report_csv",
]

EXPERIMENTS = (
    "supercritical_collapse",
    "critical_qld",
    "critical_survival",
    "critical_qed",
    "critical_qprocess",
    "subcritical_qld",
    "subcritical_qed",
    "subcritical_qprocess",
    "girsanov_bound",
    "survival_order",
    "oracle_check",
)

_REGIME = {
    "supercritical_collapse": Regime.SUPERCRITICAL,
    "critical_qld": Regime.CRITICAL,
    "critical_survival": Regime.CRITICAL,
    "critical_qed": Regime.CRITICAL,
    "critical_qprocess": Regime.CRITICAL,
    "subcritical_qld": Regime.SUBCRITICAL,
    "subcritical_qed": Regime.SUBCRITICAL,
    "subcritical_qprocess": Regime.SUBCRITICAL,
    "girsanov_bound": Regime.SUBCRITICAL,
    "survival_order": Regime.SUBCRITICAL,
}

# acceptance budgets; any field may be overridden by the config
_DEFAULTS = {
    "supercritical_collapse": dict(kappa=0.75, t=200.0, N=50_000),
    "critical_qld": dict(kappa=0.5, t=50.0, N=200_000, fixed_point_t=20.0, fixed_point_N=600_000),
    "critical_survival": dict(kappa=0.5, t=50.0, N=100_000, x0_list=(0.0, 0.5), rate_t=8.0,
                              rate_N=100_000),
    "critical_qed": dict(kappa=0.5, t=60.0, N=100_000),
    "critical_qprocess": dict(kappa=0.5, t=30.0, horizon=30.0, N=400_000, q_dt=5e-3),
    "subcritical_qld": dict(kappa=0.25, t=100.0, N=100_000),
    "subcritical_qed": dict(kappa=0.25, t=100.0, N=100_000),
    "subcritical_qprocess": dict(kappa=0.25, t=10.0, horizon=80.0, N=400_000),
    "girsanov_bound": dict(kappa=0.25, s_list=(10.0, 100.0), offset=20.0, N=200_000),
    "survival_order": dict(kappa=0.25, t=120.0, t_fit_low=20.0, N=100_000, rate_t=4.0, rate_N=100_000),
    "oracle_check": dict(kappa=0.5, t=5.0, N=100_000),
}

_BASE = dict(kappa=0.5, x0=0.0, s0=0.0, t=1.0, horizon=None, N=100_000, dt=1e-2, seed=None,
             bins=512, sampler="guided", q_dt=5e-3, fixed_point_t=20.0, fixed_point_N=0,
             x0_list=None, rate_t=8.0, rate_N=100_000, s_list=(10.0, 100.0), offset=20.0,
             t_fit_low=20.0, C=2.0, gamma=None)


class ConfigError(ValueError):
    """Invalid experiment configuration."""


@dataclass(frozen=True)
class ExperimentConfig:
    """One experiment run.  ``None`` fields take the experiment's default budget.

    ``horizon`` is the conditioning horizon T (Q-process experiments);
    ``x0_list``, ``s_list``/``offset``, ``rate_t``/``rate_N``, ``q_dt``,
    ``fixed_point_*`` and ``t_fit_low`` configure the secondary parts of
    particular experiments.
    """

    experiment: str
    seed: int | None = None
    kappa: float | None = None
    x0: float | None = None
    s0: float | None = None
    t: float | None = None
    horizon: float | None = None
    N: int | None = None
    dt: float | None = None
    bins: int | None = None
    out_dir: str | None = None
    sampler: str | None = None
    q_dt: float | None = None
    fixed_point_t: float | None = None
    fixed_point_N: int | None = None
    x0_list: tuple | None = None
    rate_t: float | None = None
    rate_N: int | None = None
    s_list: tuple | None = None
    offset: float | None = None
    t_fit_low: float | None = None
    C: float | None = None
    gamma: float | None = None
    prefix: str | None = None

    def resolved(self) -> "ExperimentConfig":
        """Fill defaults and validate; raises :class:`ConfigError`."""
        if self.experiment not in EXPERIMENTS:
            raise ConfigError(f"unknown experiment {self.experiment!r}")
        vals = dict(_BASE)
        vals.update(_DEFAULTS[self.experiment])
        for f in fields(self):
            v = getattr(self, f.name)
            if v is not None:
                vals[f.name] = v
        vals["experiment"] = self.experiment
        vals.setdefault("out_dir", None)
        vals["prefix"] = vals.get("prefix") or self.experiment
        known = {f.name for f in fields(self)}
        cfg = ExperimentConfig(**{k: v for k, v in vals.items() if k in known})
        cfg._validate()
        return cfg

    def _validate(self) -> None:
        if self.seed is None:
            raise ConfigError("seed is mandatory")
        if not 0 <= int(self.seed) < 2**64:
            raise ConfigError("seed must be a 64-bit unsigned integer")
        if self.N < 1000:
            raise ConfigError(f"N must be >= 1000, got {self.N}")
        if not 0 < self.dt <= 1e-2 * (1 + 1e-12):
            raise ConfigError(f"dt must lie in (0, 1e-2], got {self.dt}")
        if not self.kappa > 0:
            raise ConfigError("kappa must be positive")
        if not abs(self.x0) < 1:
            raise ConfigError("x0 must lie in (-1, 1)")
        if self.s0 < 0:
            raise ConfigError("s0 must be >= 0")
        if self.bins < 2:
            raise ConfigError("bins must be >= 2")
        if self.sampler not in ("guided", "direct"):
            raise ConfigError("sampler must be 'guided' or 'direct'")
        if self.experiment != "girsanov_bound" and not self.t > self.s0:
            raise ConfigError("t must exceed s0")
        want = _REGIME.get(self.experiment)
        if want is not None:
            got = ProcessSpec(Kind.X, self.kappa).regime
            if got != want:
                raise ConfigError(f"{self.experiment} needs a {want} kappa, got kappa={self.kappa} ({got})")
        if self.horizon is not None and self.horizon < self.t:
            raise ConfigError("horizon must be >= t")

    def budget(self, N: int | None = None, dt: float | None = None, sampler: str | None = None,
               salt: int = 0) -> Budget:
        seed = (int(self.seed) + 0x9E3779B97F4A7C15 * salt) % 2**64
        return Budget(N or self.N, dt or self.dt, seed, sampler or self.sampler, self.bins)

    def as_text(self) -> str:
        lines = []
        for k, v in asdict(self).items():
            if v is None:
                continue
            if isinstance(v, tuple):
                v = ",".join(repr(float(a)) for a in v)
            lines.append(f"{k}={v}")
        return "\n".join(lines) + "\n"


@dataclass(frozen=True)
class Metric:
    name: str
    value: float
    ci_low: float | None = None
    ci_high: float | None = None
    threshold: float | None = None
    passed: bool | None = None  # None: informational


@dataclass
class ExperimentReport:
    config: ExperimentConfig
    metrics: list[Metric] = field(default_factory=list)
    histograms: dict[str, tuple[EmpiricalMeasure, str | None]] = field(default_factory=dict)
    survival: dict[str, SurvivalCurve] = field(default_factory=dict)
    runtime: float = 0.0
    version: str = __version__
    paths: list[str] = field(default_factory=list)
    # wall-clock gate; kept out of the CSVs, which must be reproducible byte for byte
    timing: Metric | None = None

    @property
    def passed(self) -> bool:
        ok = all(m.passed for m in self.metrics if m.passed is not None)
        return ok and (self.timing is None or bool(self.timing.passed))

    def time_gate(self, name: str, seconds: float, limit: float) -> None:
        self.timing = Metric(name, float(seconds), None, None, float(limit), seconds <= limit)

    def metric(self, name: str) -> Metric:
        for m in self.metrics:
            if m.name == name:
                return m
        raise KeyError(name)

    def gate(self, name, value, threshold, ok, ci=(None, None)) -> Metric:
        m = Metric(name, float(value), ci[0], ci[1], float(threshold), bool(ok))
        self.metrics.append(m)
        return m

    def info(self, name, value, ci=(None, None)) -> Metric:
        m = Metric(name, float(value), ci[0], ci[1])
        self.metrics.append(m)
        return m

    def failures(self) -> list[Metric]:
        return [m for m in self.metrics if m.passed is False]


# --------------------------------------------------------------------- helpers


def _spec(cfg: ExperimentConfig, kind="X", **kw) -> ProcessSpec:
    base = dict(kind=kind, kappa=cfg.kappa, start_x=cfg.x0, start_s=cfg.s0)
    base.update(kw)
    return ProcessSpec(**base)


def _add_distances(rep: ExperimentReport, tag: str, m: EmpiricalMeasure, target, threshold=None,
                   seed: int = 0):
    d = tv_distance(m, target, seed=seed)
    ci = (d.ci_low, d.ci_high)
    if threshold is None:
        rep.info(f"tv_{tag}", d.value, ci)
    else:
        rep.gate(f"tv_{tag}", d.value, threshold, d.value <= threshold, ci)
    ks, w1 = ks_and_w1(m, target)
    rep.info(f"ks_{tag}", ks)
    rep.info(f"w1_{tag}", w1)
    return d


def _exit_rate(spec: ProcessSpec, t_max: float, budget: Budget) -> SurvivalCurve:
    return survival_curve(spec, t_max, budget, mode="exponential")


def _gate_rate(rep: ExperimentReport, name: str, curve: SurvivalCurve, expected: float, tol: float):
    rate = -curve.slope
    rel = abs(rate / expected - 1.0)
    rep.info(f"{name}_fitted", rate)
    rep.gate(f"{name}_relative_error", rel, tol, rel <= tol)


# ----------------------------------------------------------------- experiments


def _critical_qld(cfg, rep):
    t0 = time.perf_counter()
    m = conditioned_law(_spec(cfg), cfg.t, cfg.budget())
    rep.time_gate("runtime_seconds", time.perf_counter() - t0, 180.0)
    rep.histograms["hist"] = (m, "alpha_OU")
    _add_distances(rep, "alpha_OU", m, "alpha_OU", 0.05)
    rep.info("survivors", m.meta["survivors"])
    rep.info("survival_estimate", m.meta["survival_estimate"])
    rep.info("n_effective", m.n_effective)
    if cfg.fixed_point_N:
        spec = _spec(cfg, start_x=0.0, start_law="alpha_OU")
        fp = conditioned_law(spec, cfg.s0 + cfg.fixed_point_t, cfg.budget(N=cfg.fixed_point_N, salt=1))
        rep.histograms["hist_fixed_point"] = (fp, "alpha_OU")
        _add_distances(rep, "fixed_point_alpha_OU", fp, "alpha_OU", 0.02, seed=1)
        rep.info("fixed_point_n_effective", fp.n_effective)


def _critical_survival(cfg, rep):
    k_prime = analytic.constants().K_prime
    x0s = cfg.x0_list if cfg.x0_list else (cfg.x0,)
    for i, x0 in enumerate(x0s):
        spec = _spec(cfg, start_x=float(x0))
        curve = survival_curve(spec, cfg.t, cfg.budget(salt=i), extra_times=(cfg.t,), mode="critical")
        key = "survival" if i == 0 else f"survival_x0_{x0:g}"
        rep.survival[key] = curve
        scaled = (cfg.t + 1) / (cfg.s0 + 1) * curve.at(cfg.t)
        target = k_prime * (1 - x0**2)
        rel = abs(scaled / target - 1)
        rep.info(f"scaled_survival_x0_{x0:g}", scaled)
        rep.info(f"scaled_survival_target_x0_{x0:g}", target)
        rep.gate(f"scaled_survival_relative_error_x0_{x0:g}", rel, 0.10, rel <= 0.10)
    if cfg.rate_N:
        ou = ProcessSpec(Kind.OU, start_law="alpha_OU")
        curve = _exit_rate(ou, cfg.rate_t, cfg.budget(N=cfg.rate_N, salt=17))
        rep.survival["survival_ou_rate"] = curve
        _gate_rate(rep, "ou_exit_rate", curve, analytic.LAMBDA_OU, 0.05)


def _critical_qed(cfg, rep):
    m = quasi_ergodic_law(_spec(cfg), cfg.t, cfg.budget())
    rep.histograms["hist"] = (m, "qed_critical")
    _add_distances(rep, "qed_critical", m, "qed_critical", 0.08)
    x = np.linspace(-1, 1, analytic.QUAD_NODES)
    integral = simpson(analytic.mean_exit_time_ou(x) * analytic.density("alpha_OU", x), x=x)
    rep.gate("exit_time_alpha_OU_integral_error", abs(integral - 1), 1e-6, abs(integral - 1) <= 1e-6)
    rep.info("n_effective", m.n_effective)


def _critical_qprocess(cfg, rep):
    u = cfg.t
    T = cfg.horizon if cfg.horizon is not None else u
    rw = qprocess_law_reweighted(_spec(cfg), u, T, cfg.budget())
    rep.histograms["hist"] = (rw, "beta_OU")
    _add_distances(rep, "reweighted_beta_OU", rw, "beta_OU", 0.05)
    rep.info("reweighted_n_effective", rw.n_effective)
    # the X Q-process at time u is the OU Q-process after the clock log((u+1)/(s+1))
    q_spec = ProcessSpec(Kind.OU_Q, start_x=cfg.x0)
    clock = math.log((u + 1) / (cfg.s0 + 1))
    q = conditioned_law(q_spec, clock, cfg.budget(dt=cfg.q_dt, sampler="direct", salt=2))
    rep.histograms["hist_q_sampler"] = (q, "beta_OU")
    _add_distances(rep, "q_sampler_beta_OU", q, "beta_OU", seed=1)
    d = tv_distance(q, rw, seed=2)
    rep.gate("tv_q_sampler_vs_reweighted", d.value, 0.03, d.value <= 0.03, (d.ci_low, d.ci_high))


def _subcritical_qld(cfg, rep):
    t0 = time.perf_counter()
    m = conditioned_law(_spec(cfg), cfg.t, cfg.budget())
    rep.time_gate("runtime_seconds", time.perf_counter() - t0, 300.0)
    rep.histograms["hist"] = (m, "alpha_Bm")
    _add_distances(rep, "alpha_Bm", m, "alpha_Bm", 0.08)
    rep.info("survival_estimate", m.meta["survival_estimate"])
    rep.info("n_effective", m.n_effective)
    const = analytic.constants(C_Bm=cfg.C, gamma_Bm=cfg.gamma)
    if cfg.s0 == 0:
        rep.info("rate_bound", analytic.subcritical_rate_bound(0.0, cfg.t, cfg.kappa, const.C_Bm, const.gamma_Bm))


def _subcritical_qed(cfg, rep):
    m = quasi_ergodic_law(_spec(cfg), cfg.t, cfg.budget())
    rep.histograms["hist"] = (m, "beta_Bm")
    _add_distances(rep, "beta_Bm", m, "beta_Bm", 0.08)
    rep.info("n_effective", m.n_effective)


def _subcritical_qprocess(cfg, rep):
    u = cfg.t
    T_max = cfg.horizon if cfg.horizon is not None else 8 * u
    horizons = (T_max / 4, T_max / 2, T_max)
    laws = qprocess_law_finite_horizon(_spec(cfg), u, horizons, cfg.budget())
    for T, m in zip(horizons, laws):
        rep.histograms[f"hist_T{T:g}"] = (m, None)
        rep.info(f"n_effective_T{T:g}", m.n_effective)
    g1 = tv_distance(laws[0], laws[1], seed=3)
    g2 = tv_distance(laws[1], laws[2], seed=4)
    names = [f"{a:g}_{b:g}" for a, b in zip(horizons[:-1], horizons[1:])]
    rep.info(f"tv_gap_T{names[0]}", g1.value, (g1.ci_low, g1.ci_high))
    rep.gate(f"tv_gap_T{names[1]}", g2.value, 0.05, g2.value <= 0.05, (g2.ci_low, g2.ci_high))
    rep.gate("tv_gap_shrinks", g2.value - g1.value, 0.0, g2.value <= g1.value)


def _girsanov_bound(cfg, rep):
    F = {}
    for i, s in enumerate(cfg.s_list):
        s = float(s)
        T = s + cfg.offset
        x_spec = _spec(cfg, start_s=s)
        y_spec = _spec(cfg, kind="Y", start_s=s)
        bx = cfg.budget(salt=10 + 2 * i)
        ens = run_ensemble(x_spec, T, bx, girsanov=True)
        wx = ens.weights_at(T)
        if not np.any(wx > 0):
            raise ExtinctionError(f"extinction of X from s={s}")
        xT = np.where(wx > 0, ens.positions[:, ens.column(T)], 0.0)
        mx = measure_from_samples(xT, wx, cfg.bins)
        my = conditioned_law(y_spec, T, cfg.budget(salt=11 + 2 * i))
        # Girsanov-reweighted X paths estimate the Y law as well
        gw = np.where(wx > 0, wx * np.exp(np.nan_to_num(ens.girsanov[:, ens.column(T)], nan=-np.inf)), 0.0)
        mg = measure_from_samples(xT, gw, cfg.bins)
        rep.histograms[f"hist_X_s{s:g}"] = (mx, None)
        rep.histograms[f"hist_Y_s{s:g}"] = (my, None)
        F[s] = analytic.big_F(s, cfg.kappa)
        d = tv_distance(mx, my, seed=20 + i)
        rep.info(f"big_F_s{s:g}", F[s])
        rep.info(f"tv_se_s{s:g}", d.se)
        bound = F[s] + 3 * d.se
        rep.gate(f"tv_X_vs_Y_s{s:g}", d.value, bound, d.value <= bound, (d.ci_low, d.ci_high))
        dg = tv_distance(mg, my, n_boot=0)
        rep.info(f"tv_girsanov_reweighted_X_vs_Y_s{s:g}", dg.value)
        rep.info(f"survival_X_s{s:g}", float(wx.mean()))
        rep.info(f"survival_Y_s{s:g}", my.meta["survival_estimate"])
        rep.info(f"survival_Y_from_X_s{s:g}", float(gw.mean()))
    if 10.0 in F and 100.0 in F:
        rep.gate("big_F_decreases", F[100.0] - F[10.0], 0.0, F[100.0] < F[10.0])


def _supercritical_collapse(cfg, rep):
    t = cfg.t
    half = cfg.s0 + 0.5 * (t - cfg.s0)
    curve = survival_curve(_spec(cfg), t, cfg.budget(sampler="direct"), extra_times=(half, t))
    rep.survival["survival"] = curve
    ens_law = conditioned_law(_spec(cfg), t, cfg.budget(sampler="direct"))
    rep.histograms["hist"] = (ens_law, None)
    m2 = ens_law.moment(2)
    rep.gate("conditioned_second_moment", m2, 0.01, m2 <= 0.01)
    p_t, p_half = curve.at(t), curve.at(half)
    rep.gate("survival_plateau_gap", abs(p_t - p_half), 0.01, abs(p_t - p_half) <= 0.01)
    rep.gate("survival_at_t", p_t, 0.1, p_t >= 0.1)


def _survival_order(cfg, rep):
    k = cfg.kappa
    lam = analytic.LAMBDA_BM
    curve = survival_curve(_spec(cfg), cfg.t, cfg.budget(), points=96, extra_times=(cfg.t_fit_low,))
    rep.survival["survival"] = curve
    sel = (curve.times >= cfg.t_fit_low) & (curve.times <= cfg.t) & (curve.estimates > 0)
    tt = curve.times[sel]
    e = 1 - 2 * k
    clock = -lam * ((tt + 1) ** e - 1) / e
    logp = np.log(curve.estimates[sel])
    slope, _ = fit_slope(clock, logp)
    rep.gate("survival_order_slope_error", abs(slope - 1), 0.10, abs(slope - 1) <= 0.10)
    rep.info("survival_order_slope", slope)
    # residual trend after the (kappa/2) log(t+1) correction
    resid = logp - clock - 0.5 * k * np.log(tt + 1)
    trend, _ = fit_slope(tt, resid)
    rep.info("residual_trend_per_unit_time", trend)
    if cfg.rate_N:
        bm = ProcessSpec(Kind.BM, start_law="alpha_Bm")
        c = _exit_rate(bm, cfg.rate_t, cfg.budget(N=cfg.rate_N, salt=17))
        rep.survival["survival_bm_rate"] = c
        _gate_rate(rep, "bm_exit_rate", c, lam, 0.05)


_RUNNERS = {
    "supercritical_collapse": _supercritical_collapse,
    "critical_qld": _critical_qld,
    "critical_survival": _critical_survival,
    "critical_qed": _critical_qed,
    "critical_qprocess": _critical_qprocess,
    "subcritical_qld": _subcritical_qld,
    "subcritical_qed": _subcritical_qed,
    "subcritical_qprocess": _subcritical_qprocess,
    "girsanov_bound": _girsanov_bound,
    "survival_order": _survival_order,
}


# ------------------------------------------------------------------- oracles


def _oracles(cfg, rep):
    # K and K' against Gaussian-moment identities
    const = analytic.constants()
    x = np.linspace(-1, 1, analytic.QUAD_NODES)
    rt = const.K * simpson((1 - x * x) * np.exp(-0.5 * x * x), x=x)
    rep.gate("K_round_trip_error", abs(rt - 1), 1e-8, abs(rt - 1) <= 1e-8)
    e = math.exp(-0.5)
    i0 = math.sqrt(2 * math.pi) * erf(1 / math.sqrt(2))
    k_id = 1 / (2 * e)
    kp_id = e / (i0 - 2 * e)
    rep.gate("K_identity_error", abs(const.K - k_id), 1e-8, abs(const.K - k_id) <= 1e-8)
    rep.gate("K_prime_identity_error", abs(const.K_prime - kp_id), 1e-8, abs(const.K_prime - kp_id) <= 1e-8)
    rt2 = simpson(analytic.density("alpha_OU", x) * analytic.eta_OU(x), x=x)
    rep.gate("alpha_OU_eta_OU_error", abs(rt2 - 1), 1e-8, abs(rt2 - 1) <= 1e-8)

    # finite-difference mean exit time vs Monte Carlo exit time of OU from 0
    b = cfg.budget(N=cfg.N, dt=1e-3, sampler="direct", salt=31)
    grid = TimeGrid.build(0.0, 40.0, b.dt)
    ens = simulate(ProcessSpec(Kind.OU), grid, b.N, b.seed)
    # killed during step k: exit time taken at the step midpoint
    k = np.minimum(ens.last_alive, len(grid) - 2)
    mid = 0.5 * (grid.nodes[k] + grid.nodes[k + 1])
    tau = np.where(ens.last_alive < len(grid) - 1, mid, grid.nodes[-1])
    mc = float(tau.mean())
    half = 1.96 * tau.std() / math.sqrt(tau.size)
    fd = analytic.mean_exit_time_ou(0.0)
    rel = abs(fd / mc - 1)
    rep.info("exit_time_fd", fd)
    rep.info("exit_time_mc", mc, (mc - half, mc + half))
    rep.gate("exit_time_fd_vs_mc_relative_gap", rel, 0.02, rel <= 0.02)

    # bridge-corrected coarse steps vs a 16x finer grid (OU killed at +-1, t = 5)
    t_ref = 5.0
    coarse = survival_curve(ProcessSpec(Kind.OU), t_ref, cfg.budget(dt=cfg.dt, salt=32), points=24, mode=None)
    fine = survival_curve(ProcessSpec(Kind.OU), t_ref, cfg.budget(dt=cfg.dt / 16, salt=33), points=24, mode=None)
    common = np.intersect1d(np.round(coarse.times, 9), np.round(fine.times, 9))
    pc = np.array([coarse.at(t) for t in common])
    pf = np.array([fine.at(t) for t in common])
    gap = float(np.max(np.abs(pc - pf)))
    rep.info("bridge_refinement_survival_coarse_t5", coarse.at(t_ref))
    rep.info("bridge_refinement_survival_fine_t5", fine.at(t_ref))
    rep.gate("bridge_refinement_max_survival_gap", gap, 0.005, gap <= 0.005)

    # Girsanov: reweighted X survival vs direct Y survival, kappa = 1/4, s = 0, T = 10
    kap, T = 0.25, 10.0
    bx = cfg.budget(N=2 * cfg.N, sampler="direct", salt=34)
    ex = run_ensemble(ProcessSpec(Kind.X, kap), T, bx, girsanov=True)
    gw_log = ex.girsanov[:, ex.column(T)]
    gw = np.where(ex.alive_at(T), np.exp(np.nan_to_num(gw_log, nan=-np.inf)), 0.0)
    ey = run_ensemble(ProcessSpec(Kind.Y, kap), T, cfg.budget(N=2 * cfg.N, sampler="direct", salt=35))
    yw = ey.alive_at(T).astype(float)
    rng = np.random.Generator(np.random.Philox(int(cfg.seed)))
    bs_x = [gw[rng.integers(0, gw.size, gw.size)].mean() for _ in range(200)]
    bs_y = [yw[rng.integers(0, yw.size, yw.size)].mean() for _ in range(200)]
    se = math.sqrt(np.var(bs_x, ddof=1) + np.var(bs_y, ddof=1))
    diff = abs(gw.mean() - yw.mean())
    rep.info("girsanov_survival_X_reweighted", gw.mean())
    rep.info("girsanov_survival_Y_direct", yw.mean())
    rep.gate("girsanov_survival_gap", diff, 3 * se, diff <= 3 * se)

    # Q-process sampler vs reweighting (critical X, u = T = 10)
    u = 10.0
    rw = qprocess_law_reweighted(ProcessSpec(Kind.X, 0.5), u, u, cfg.budget(N=4 * cfg.N, salt=36))
    q = conditioned_law(ProcessSpec(Kind.OU_Q), math.log(u + 1),
                        cfg.budget(N=4 * cfg.N, dt=cfg.q_dt, sampler="direct", salt=37))
    d = tv_distance(q, rw, seed=5)
    rep.gate("q_sampler_vs_reweighted_tv", d.value, 0.03, d.value <= 0.03, (d.ci_low, d.ci_high))

    # step_Y at kappa = 0 is a Brownian increment
    n, gap_t = 100_000, 0.37
    z = np.array([step_Y(0.0, 1.0, gap_t, RngStream(int(cfg.seed), i, 0), 0.0) for i in range(n)])
    v = z.var(ddof=1)
    se_v = v * math.sqrt(2.0 / (n - 1))
    rep.gate("step_Y_kappa0_variance_gap", abs(v - gap_t), 3 * se_v, abs(v - gap_t) <= 3 * se_v)


def oracle_check(seed: int = 1, N: int | None = None, out_dir: str | None = None) -> ExperimentReport:
    """Run the internal two-method oracles and return their report."""
    return run(ExperimentConfig("oracle_check", seed=seed, N=N, out_dir=out_dir))


# ----------------------------------------------------------------------- run


def run(config: ExperimentConfig) -> ExperimentReport:
    """Validate ``config``, run the experiment, write CSV artifacts when ``out_dir`` is set."""
    cfg = config.resolved()
    rep = ExperimentReport(cfg)
    t0 = time.perf_counter()
    if cfg.experiment == "oracle_check":
        _oracles(cfg, rep)
    else:
        _RUNNERS[cfg.experiment](cfg, rep)
    rep.runtime = time.perf_counter() - t0
    if cfg.out_dir:
        write_artifacts(rep, cfg.out_dir)
    return rep


# ---------------------------------------------------------------------- CSVs


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, str):
        return v
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    v = float(v)
    if math.isnan(v):
        return "nan"
    if math.isinf(v):
        return "inf" if v > 0 else "-inf"
    return repr(v)


def _write(path: Path, header: str, rows) -> None:
    buf = io.StringIO(newline="")
    buf.write(header + "\n")
    for r in rows:
        buf.write(",".join(_fmt(v) for v in r) + "\n")
    path.write_bytes(buf.getvalue().encode("utf-8"))


def write_histogram_csv(path, m: EmpiricalMeasure, target: str | None = None) -> None:
    edges = m.edges
    dens = None
    if target is not None:
        dens = analytic.get_density(target).cell_integrals(edges) / np.diff(edges)
    rows = []
    norm = m.normalized
    for i in range(m.bins):
        rows.append((edges[i], edges[i + 1], m.weights[i], norm[i], None if dens is None else dens[i]))
    _write(Path(path), "bin_left,bin_right,weight,normalized,target_density_cellavg", rows)


def write_survival_csv(path, c: SurvivalCurve) -> None:
    rows = []
    for i, t in enumerate(c.times):
        rows.append((t, int(c.survivors[i]), c.estimates[i], None if c.scaled is None else c.scaled[i]))
    _write(Path(path), "t,survivors,estimate,scaled_estimate", rows)


def write_report_csv(path, rep: ExperimentReport) -> None:
    rows = [(m.name, m.value, m.ci_low, m.ci_high, m.threshold, m.passed) for m in rep.metrics]
    _write(Path(path), "metric,value,ci_low,ci_high,threshold,pass", rows)


def write_artifacts(rep: ExperimentReport, out_dir) -> list[str]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    pre = rep.config.prefix
    paths = []
    for key, (m, target) in rep.histograms.items():
        p = out / f"{pre}_{key}.csv"
        write_histogram_csv(p, m, target)
        paths.append(str(p))
    for key, c in rep.survival.items():
        p = out / f"{pre}_{key}.csv"
        write_survival_csv(p, c)
        paths.append(str(p))
    p = out / f"{pre}_report.csv"
    write_report_csv(p, rep)
    paths.append(str(p))
    # provenance and timings (not byte-reproducible by nature)
    prov = out / f"{pre}_run.txt"
    lines = [rep.config.as_text().rstrip("\n"), f"version={rep.version}", f"runtime_seconds={rep.runtime:.3f}",
             f"passed={'true' if rep.passed else 'false'}"]
    if rep.timing is not None:
        lines.append(f"{rep.timing.name}={rep.timing.value:.3f}")
        lines.append(f"{rep.timing.name}_threshold={rep.timing.threshold:g}")
        lines.append(f"{rep.timing.name}_pass={'true' if rep.timing.passed else 'false'}")
    prov.write_bytes(("\n".join(lines) + "\n").encode("utf-8"))
    paths.append(str(prov))
    rep.paths = paths
    return paths


# --------------------------------------------------------------- config file

_FLOAT_KEYS = {"kappa", "x0", "s0", "t", "horizon", "dt", "q_dt", "fixed_point_t", "rate_t", "offset",
               "t_fit_low", "C", "gamma"}
_INT_KEYS = {"N", "seed", "bins", "fixed_point_N", "rate_N"}
_TUPLE_KEYS = {"x0_list", "s_list"}
_STR_KEYS = {"experiment", "out_dir", "sampler", "prefix"}
_ALIASES = {"particles": "N", "out": "out_dir", "threads": "threads"}


def parse_value(key: str, raw: str):
    key = _ALIASES.get(key, key)
    raw = raw.strip()
    try:
        if key in _FLOAT_KEYS:
            return key, float(raw)
        if key in _INT_KEYS or key == "threads":
            return key, int(float(raw)) if key != "seed" else int(raw, 0)
        if key in _TUPLE_KEYS:
            return key, tuple(float(a) for a in raw.split(",") if a.strip())
        if key in _STR_KEYS:
            return key, raw
    except ValueError as exc:
        raise ConfigError(f"bad value for {key}: {raw!r}") from exc
    raise ConfigError(f"unknown config key {key!r}")


def load_config_file(path) -> dict:
    """Parse a flat ``key=value`` file (``#`` comments, blank lines ignored)."""
    out = {}
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc.strerror}") from exc
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{n}: expected key=value")
        k, v = line.split("=", 1)
        k, v = parse_value(k.strip(), v)
        out[k] = v
    return out
