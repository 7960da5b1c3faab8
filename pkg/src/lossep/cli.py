"""Command-line entry point: ``lossep {clutter-demo,two-point,sweep,validate}``.

Exit codes: 0 success, 1 a run failed (did not converge, raised, or a check
failed), 2 bad configuration or arguments.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

EXIT_OK, EXIT_FAIL, EXIT_CONFIG = 0, 1, 2

log = logging.getLogger("lossep")


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="lossep", description="Loss-calibrated expectation propagation experiments.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    c = sub.add_parser("clutter-demo", help="reactor decision on clutter data: exact vs EP vs Loss-EP")
    g = c.add_mutually_exclusive_group()
    g.add_argument("--seed", type=int, help="instance seed (default: the pinned instance)")
    g.add_argument("--search", action="store_true", help="search seeds for a decision flip")
    c.add_argument("--start", type=int, default=0, help="first seed tried by --search")
    c.add_argument("--budget", type=int, default=None, help="seeds tried by --search (default 100000)")
    c.add_argument("--out", default="results/clutter", help="output directory")

    t = sub.add_parser("two-point", help="two-point GP classification on a dense grid")
    t.add_argument("--out", default="results/two_point", help="output directory")

    s = sub.add_parser("sweep", help="utility asymmetry x covariate shift sweep")
    s.add_argument("--config", help="JSON file with SweepConfig fields")
    s.add_argument("--out", default="results/sweep", help="output directory")
    s.add_argument("--jobs", type=int, default=1, help="worker processes")
    s.add_argument("--seed", type=int, help="overrides base_seed")

    v = sub.add_parser("validate", help="run every oracle cross-check")
    v.add_argument("--only", nargs="+", help="subset of checks to run")
    return p


def _load_config(path, seed):
    from lossep.experiments import ConfigError, SweepConfig

    data = {}
    if path:
        try:
            data = json.loads(Path(path).read_text(encoding="utf-8"))
        except OSError as e:
            raise ConfigError(f"cannot read config: {e}") from None
        except json.JSONDecodeError as e:
            raise ConfigError(f"config is not valid JSON: {e}") from None
        if not isinstance(data, dict):
            raise ConfigError("config must be a JSON object")
    if seed is not None:
        data = dict(data, base_seed=seed)
    return SweepConfig.from_dict(data)


def cmd_clutter(args) -> int:
    from lossep import demos

    if args.search:
        budget = demos.SEARCH_BUDGET if args.budget is None else args.budget
        if budget < 1 or args.start < 0:
            print("error: --budget must be positive and --start non-negative", file=sys.stderr)
            return EXIT_CONFIG
        try:
            demo = demos.search_clutter_seed(args.start, budget)
        except demos.SearchExhausted as e:
            print(f"error: {e}", file=sys.stderr)
            return EXIT_FAIL
    else:
        seed = demos.PINNED_SEED if args.seed is None else args.seed
        if seed < 0:
            print("error: --seed must be non-negative", file=sys.stderr)
            return EXIT_CONFIG
        demo = demos.clutter_demo(seed)
    summary = demos.write_clutter_demo(demo, args.out)
    a = summary["actions"]
    print(
        f"seed {summary['seed']}  N={summary['n']}  tau_crit={summary['tau_crit']:g}  modes={summary['n_modes']}\n"
        f"  bayes {a['bayes']}  (P(phi>=tau) = {demo.p_high['bayes']:.4f})\n"
        f"  ep    {a['ep']}  ({demo.p_high['ep']:.4f})\n"
        f"  lossep {a['lossep']}  ({demo.p_high['lossep']:.4f})\n"
        f"  flip pattern: {'yes' if demo.flip else 'no'}; written to {args.out}"
    )
    if not all(demo.converged.values()):
        print("error: EP or Loss-EP did not converge", file=sys.stderr)
        return EXIT_FAIL
    return EXIT_OK


def cmd_two_point(args) -> int:
    from lossep import demos

    demo = demos.two_point_demo()
    s = demos.write_two_point_demo(demo, args.out)
    print(
        f"trace: exact {s['trace_exact_posterior']:.4f}, utility-weighted {s['trace_exact_utility_weighted']:.4f}, "
        f"EP {s['trace_ep']:.4f}, Loss-EP q {s['trace_lossep_q']:.4f}, "
        f"Loss-EP q with utility {s['trace_lossep_qbar']:.4f}\n"
        f"max mean shift (Loss-EP with utility vs EP): {s['max_mean_shift']:.4f}; written to {args.out}"
    )
    if not all(s["converged"].values()):
        print("error: EP or Loss-EP did not converge", file=sys.stderr)
        return EXIT_FAIL
    return EXIT_OK


def cmd_sweep(args) -> int:
    from lossep.experiments import ConfigError, run_sweep, write_sweep

    try:
        config = _load_config(args.config, args.seed)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    if args.jobs < 1:
        print("config error: --jobs must be >= 1", file=sys.stderr)
        return EXIT_CONFIG

    def progress(k, n):
        log.info("repeat %d/%d done", k, n)

    result = run_sweep(config, jobs=args.jobs, progress=progress)
    write_sweep(result, args.out)
    worst = max((c[5] for c in result.cells if c[5] == c[5]), default=float("nan"))
    n_sig = sum(1 for t in result.tests if t[9])
    print(
        f"{len(result.rows)} runs in {result.elapsed:.1f}s; worst cell mean metric {worst:.4g}; "
        f"{n_sig} significant cells after Bonferroni; written to {args.out}"
    )
    fails = result.failures
    if fails:
        errors = sum(1 for r in fails if r.error)
        print(f"error: {len(fails)} runs failed ({errors} raised, {len(fails) - errors} did not converge)", file=sys.stderr)
        return EXIT_FAIL
    return EXIT_OK


def cmd_validate(args) -> int:
    from lossep import validation

    if args.only:
        unknown = sorted(set(args.only) - set(validation.CHECKS))
        if unknown:
            print(f"error: unknown checks {', '.join(unknown)}; choose from {', '.join(validation.CHECKS)}", file=sys.stderr)
            return EXIT_CONFIG
    results = validation.run_all(args.only, report=lambda r: print(r.line(), flush=True))
    return EXIT_OK if all(r.passed for r in results) else EXIT_FAIL


COMMANDS = {
    "clutter-demo": cmd_clutter,
    "two-point": cmd_two_point,
    "sweep": cmd_sweep,
    "validate": cmd_validate,
}


def main(argv=None) -> int:
    parser = _parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_CONFIG if e.code else EXIT_OK
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    return COMMANDS[args.command](args)


if __name__ == "__main__":
    sys.exit(main())
