"""Command line entry point: ``gnda {truth,run,param,compare,sweep}``.

Every configuration field can be set with ``--<section>-<key> VALUE``
(for example ``--data-gamma 0.01`` or ``--window-components 0,2,4``).
Flags override the ``--config`` file.

Exit status: 0 on success, 2 if every realization raised NoAlphaFound,
3 if every realization was ill-posed, 1 on any other failure.
"""
from __future__ import annotations

import argparse
import ast
import dataclasses
import logging
import sys
import warnings

from . import experiments as ex
from .window import write_observations_csv, write_trajectory_csv

log = logging.getLogger("gnda")

EXIT_OK, EXIT_ERROR, EXIT_NO_ALPHA, EXIT_ILL_POSED = 0, 1, 2, 3
SWEEP_KINDS = {"alpha": "sweep_alpha", "gamma": "sweep_gamma", "obs": "sweep_obs",
               "window": "sweep_window"}


def _parse_value(text):
    try:
        v = ast.literal_eval(text)
    except (ValueError, SyntaxError):
        low = text.lower()
        if low in ("true", "false"):
            return low == "true"
        if low in ("none", "null"):
            return None
        return text
    return list(v) if isinstance(v, tuple) else v


def _field_flags(parser):
    top = parser.add_argument_group("experiment")
    top.add_argument("--ensemble-size", dest="set:ensemble_size", type=int)
    top.add_argument("--seed", "--master-seed", dest="set:master_seed", type=int)
    top.add_argument("--workers", dest="set:workers", type=int)
    for name, cls in ex.SECTIONS.items():
        grp = parser.add_argument_group(f"[{name}]")
        for f in dataclasses.fields(cls):
            grp.add_argument(f"--{name}-{f.name.replace('_', '-')}", dest=f"set:{name}.{f.name}",
                             type=_parse_value, metavar="VALUE")


def build_parser():
    p = argparse.ArgumentParser(prog="gnda", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)
    cmds = {
        "truth": "write truth, observations and background CSVs for one realization",
        "run": "Gauss-Newton ensemble (noise-free or noisy)",
        "param": "joint state and parameter estimation ensemble",
        "compare": "Gauss-Newton versus weak-constraint 4D-Var on identical data",
        "sweep": "ensembles over alpha, gamma, observed-component count or window length",
    }
    for cmd, help_text in cmds.items():
        sp = sub.add_parser(cmd, help=help_text)
        sp.add_argument("--config", help="TOML file, or a config.json from a previous run")
        sp.add_argument("--out", help=f"output directory (default ${ex.OUTPUT_ENV} or ./gnda-output)")
        if cmd == "truth":
            sp.add_argument("--index", type=int, default=0, help="realization index")
        if cmd == "sweep":
            sp.add_argument("--kind", choices=sorted(SWEEP_KINDS))
            sp.add_argument("--values", type=_parse_value, help="comma-separated sweep values")
        _field_flags(sp)
    return p


def resolve_config(args):
    if args.config:
        cfg, source = ex.load_config(args.config)
        d = cfg.to_dict()
    else:
        d, source = ex.ExperimentConfig().to_dict(), None
    overrides = {k[4:]: v for k, v in vars(args).items() if k.startswith("set:") and v is not None}
    for key, value in overrides.items():
        ex._set_dotted(d, key, value)
    cmd = args.command
    if cmd == "run":
        if d["mode"] not in ("noisefree", "noisy"):
            d["mode"] = "noisy" if d["data"]["gamma"] > 0 else "noisefree"
    elif cmd == "param":
        d["mode"] = "param"
    elif cmd == "compare":
        d["mode"] = "compare_wc"
    elif cmd == "sweep":
        if args.kind:
            d["mode"] = SWEEP_KINDS[args.kind]
        if not d["mode"].startswith("sweep"):
            raise ex.ConfigError("sweep needs --kind or a sweep mode in the config")
        if args.values is not None:
            values = args.values if isinstance(args.values, list) else [args.values]
            d["sweep"][ex.SWEEPS[d["mode"]][0]] = values
    if getattr(args, "out", None):
        d["output_dir"] = args.out
    return ex.config_from_dict(d), source


def exit_status(outcomes):
    if not outcomes or any(o.ok for o in outcomes):
        return EXIT_OK
    kinds = {o.status for o in outcomes}
    if kinds == {"NoAlphaFound"}:
        return EXIT_NO_ALPHA
    if kinds == {"IllPosed"}:
        return EXIT_ILL_POSED
    if kinds == {"Skipped"}:
        return EXIT_OK
    return EXIT_ERROR


def cmd_truth(cfg, args):
    real = ex.build_realization(cfg, args.index)
    out = ex.output_dir(cfg)
    write_trajectory_csv(out / "truth.csv", real.truth)
    write_trajectory_csv(out / "background.csv", real.u_b)
    write_observations_csv(out / "observations.csv", real.H, real.y)
    ex.write_config_json(out / "config.json", cfg)
    print(f"wrote truth, background and observations for realization {args.index} to {out}")
    return EXIT_OK


def _report(cfg, outcomes, summary):
    done = sum(o.ok for o in outcomes)
    print(f"{cfg.mode}: {done}/{len(outcomes)} realizations completed")
    for status in sorted({o.status for o in outcomes if not o.ok}):
        print(f"  {status}: {sum(o.status == status for o in outcomes)}")
    if summary is not None and summary.median.get("err_total") is not None:
        print(f"  terminal median err_total {summary.median['err_total'][-1]:.4e}")


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("always", RuntimeWarning)
            cfg, source = resolve_config(args)
            if args.command == "truth":
                return cmd_truth(cfg, args)
            out = ex.output_dir(cfg)
            result = ex.run_experiment(cfg)
            if cfg.mode in ex.SWEEPS:
                rows = ex.emit_sweep(result, cfg, out, source)
                for r in rows:
                    print(f"{r['value']!r}: completed {r['completed']}, failed {r['failed']}"
                          f" ({r['failure_kinds'] or '-'}), iterations {r['iterations_median']},"
                          f" err_total {r['err_total_median']}")
                outcomes = ex.all_outcomes(result)
            else:
                summary = ex.emit(result, cfg, out, source)
                _report(cfg, result, summary)
                outcomes = result
            for o in outcomes:
                if not o.ok:
                    log.info("realization %d: %s: %s", o.index, o.status, o.message)
            print(f"outputs in {out}")
            return exit_status(outcomes)
    except (ex.ConfigError, OSError, ValueError) as exc:
        print(f"gnda: error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
