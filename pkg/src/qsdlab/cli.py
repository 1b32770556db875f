"""Command-line front end.

Usage: ``qsdlab SUBCOMMAND [--config FILE] [flags] --seed N``.  Subcommands
pick the experiment from the regime of ``--kappa``.  Exit status: 0 when all
executed gates pass, 1 when one fails, 2 on configuration errors, 3 on
extinction.  Report paths go to stdout, diagnostics to stderr.
"""

from __future__ import annotations

import argparse
import math
import os
import sys

EXIT_PASS, EXIT_FAIL, EXIT_CONFIG, EXIT_EXTINCTION = 0, 1, 2, 3

SUBCOMMANDS = ("qld", "qed", "qprocess", "survival", "supercritical", "bound", "oracle-check", "all")

# subcommand -> experiment for (critical, subcritical, supercritical) kappa
_BY_REGIME = {
    "qld": ("critical_qld", "subcritical_qld", None),
    "qed": ("critical_qed", "subcritical_qed", None),
    "qprocess": ("critical_qprocess", "subcritical_qprocess", None),
    "survival": ("critical_survival", "survival_order", "supercritical_collapse"),
    "supercritical": (None, None, "supercritical_collapse"),
    "bound": (None, "girsanov_bound", None),
}
_DEFAULT_KAPPA = {"supercritical": 0.75, "bound": 0.25}

# options shared by every experiment of `all`
_GLOBAL_KEYS = ("seed", "dt", "bins", "out_dir", "sampler")


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="qsdlab", description=__doc__.split("\n\n")[0])
    p.add_argument("subcommand", choices=SUBCOMMANDS)
    p.add_argument("--config", help="flat key=value file; flags override its values")
    p.add_argument("--kappa", type=float)
    p.add_argument("--x0", type=float)
    p.add_argument("--t", type=float)
    p.add_argument("--horizon", type=float)
    p.add_argument("--particles", type=int)
    p.add_argument("--dt", type=float)
    p.add_argument("--seed", type=lambda s: int(s, 0))
    p.add_argument("--bins", type=int)
    p.add_argument("--threads", type=int)
    p.add_argument("--out")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="any other config key, e.g. --set sampler=direct")
    return p


def _regime_index(kappa: float) -> int:
    if math.isclose(kappa, 0.5, rel_tol=0, abs_tol=1e-12):
        return 0
    return 1 if kappa < 0.5 else 2


def _collect(args, load_config_file, parse_value, ConfigError) -> dict:
    values = load_config_file(args.config) if args.config else {}
    flags = {"kappa": args.kappa, "x0": args.x0, "t": args.t, "horizon": args.horizon, "N": args.particles,
             "dt": args.dt, "seed": args.seed, "bins": args.bins, "out_dir": args.out, "threads": args.threads}
    for item in args.set:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        k, v = parse_value(*item.split("=", 1))
        values[k] = v
    values.update({k: v for k, v in flags.items() if v is not None})
    return values


def _configure_threads(threads: int | None) -> None:
    # must run before numba is imported for thread counts above the core count
    if threads is not None and threads < 1:
        raise ValueError("--threads must be >= 1")
    if "numba" not in sys.modules:
        want = max(threads or 1, os.cpu_count() or 1)
        os.environ["NUMBA_NUM_THREADS"] = str(want)
        os.environ.setdefault("NUMBA_THREADING_LAYER", "workqueue")
    import numba

    if threads is not None:
        numba.set_num_threads(min(threads, numba.config.NUMBA_NUM_THREADS))


def _print_report(rep, err) -> None:
    for m in rep.metrics:
        if m.passed is None:
            continue
        flag = "PASS" if m.passed else "FAIL"
        print(f"[{flag}] {rep.config.prefix}:{m.name} = {m.value:.6g} (threshold {m.threshold:.6g})", file=err)
    if rep.timing is not None:
        t = rep.timing
        flag = "PASS" if t.passed else "FAIL"
        print(f"[{flag}] {rep.config.prefix}:{t.name} = {t.value:.1f} (threshold {t.threshold:g})", file=err)


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    err = sys.stderr
    try:
        _configure_threads(args.threads)
    except ValueError as exc:
        print(f"config error: {exc}", file=err)
        return EXIT_CONFIG
    from .estimators import ExtinctionError
    from .experiments import EXPERIMENTS, ConfigError, ExperimentConfig, load_config_file, parse_value, run

    try:
        values = _collect(args, load_config_file, parse_value, ConfigError)
        values.pop("threads", None)
        values.pop("experiment", None)
        if "seed" not in values:
            raise ConfigError("--seed is mandatory")
        values.setdefault("out_dir", os.environ.get("QSDLAB_OUT", "."))
        sub = args.subcommand
        if sub == "all":
            shared = {k: values[k] for k in _GLOBAL_KEYS if k in values}
            configs = [ExperimentConfig(e, **shared).resolved() for e in EXPERIMENTS]
        else:
            if sub == "oracle-check":
                exp = "oracle_check"
            else:
                kappa = values.setdefault("kappa", _DEFAULT_KAPPA.get(sub, 0.5))
                exp = _BY_REGIME[sub][_regime_index(kappa)]
                if exp is None:
                    raise ConfigError(f"'{sub}' has no experiment for kappa={kappa}")
            values.setdefault("prefix", sub.replace("-", "_"))
            configs = [ExperimentConfig(exp, **values).resolved()]
    except (ConfigError, TypeError, ValueError) as exc:
        print(f"config error: {exc}", file=err)
        return EXIT_CONFIG

    code = EXIT_PASS
    for cfg in configs:
        try:
            rep = run(cfg)
        except ExtinctionError as exc:
            print(f"extinction in {cfg.experiment}: {exc}", file=err)
            for t, n in exc.checkpoints:
                print(f"  t={t:g} survivors={n}", file=err)
            code = EXIT_EXTINCTION
            continue
        _print_report(rep, err)
        for p in rep.paths:
            print(p)
        if not rep.passed and code == EXIT_PASS:
            code = EXIT_FAIL
    return code


if __name__ == "__main__":
    raise SystemExit(main())
