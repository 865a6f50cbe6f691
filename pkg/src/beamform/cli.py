"""
Command-line entry point: ``beamform {run,summarize,gradcheck}``.

Exit codes: 0 success, 1 solver or numeric failure, 2 usage error.
"""

import argparse
import logging
import sys

from . import bench, gradcheck
from .errors import BeamformError
from .meta import MlbfConfig
from .wmmse import WmmseConfig

log = logging.getLogger('beamform')

EXIT_OK, EXIT_SOLVER, EXIT_USAGE = 0, 1, 2

DESK = dict(channels=20, restarts=3, outer_steps=200)
PAPER = dict(channels=1000, restarts=10, outer_steps=500)


def _snr_list(text):
    try:
        values = [float(s) for s in text.split(',') if s.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a comma list of numbers, got {text!r}")
    if not values:
        raise argparse.ArgumentTypeError("empty SNR list")
    return values


def _algos(text):
    names = bench.ALGOS if text == 'both' else tuple(a.strip() for a in text.split(','))
    bad = [a for a in names if a not in bench.ALGOS]
    if bad:
        raise argparse.ArgumentTypeError(f"unknown algorithm(s) {bad}; choose from wmmse, mlbf, both")
    return names


def build_parser():
    parser = argparse.ArgumentParser(
        prog='beamform', description="WMMSE and meta-learned beamforming for MISO sum-rate maximization.")
    sub = parser.add_subparsers(dest='command', required=True)

    run = sub.add_parser('run', help="run a benchmark sweep and write per-iteration rows as CSV")
    run.add_argument('--config', help="flat key=value file; command-line flags take precedence")
    run.add_argument('--snr-db', type=_snr_list, default=[0.0, 10.0, 20.0, 30.0],
                     help="comma-separated SNR points in dB (default: 0,10,20,30)")
    run.add_argument('--channels', type=int, help="channel realizations (desk default 20)")
    run.add_argument('--restarts', type=int, help="random initializations per channel (desk default 3)")
    run.add_argument('--algo', type=_algos, default=bench.ALGOS, help="wmmse, mlbf or both (default)")
    run.add_argument('--seed', type=int, default=0)
    run.add_argument('--out', help="CSV path for per-iteration rows")
    run.add_argument('--summary-out', help="CSV path for the summary table (default: stdout)")
    run.add_argument('--paper-scale', action='store_true',
                     help="1000 channels, 10 restarts, T=500 unless overridden")
    run.add_argument('--outer-steps', type=int, help="MLBF outer steps T (desk default 200)")
    run.add_argument('--inner-steps', type=int, default=10, help="inner steps K=I=J (default 10)")
    run.add_argument('--t-u', type=int, default=5, help="meta-update window length (default 5)")
    run.add_argument('--hidden', type=int, default=200, help="LSTM hidden units (default 200)")
    run.add_argument('--lr', type=float, default=1e-4, help="Adam learning rate for all learners")
    run.add_argument('--mu', type=float, default=0.0, help="power multiplier in the MLBF loss")
    run.add_argument('--projection', choices=('inner', 'outer'), default='inner')
    run.add_argument('--antennas', type=int, default=4, help="transmit antennas M")
    run.add_argument('--users', type=int, default=4, help="single-antenna users N")
    run.add_argument('--power-mode', choices=('fixed-noise', 'fixed-power'), default='fixed-noise',
                     help="fixed-noise: sigma2=1, P=SNR; fixed-power: P=1, sigma2=1/SNR")
    run.add_argument('--wmmse-iters', type=int, default=100)
    run.add_argument('--eps', type=float, default=1e-4, help="WMMSE stopping tolerance on WSR")
    run.add_argument('--workers', type=int, default=1,
                     help="worker processes, capped by BEAMFORM_THREADS")
    run.add_argument('-v', '--verbose', action='store_true')

    summ = sub.add_parser('summarize', help="summarize a results CSV")
    summ.add_argument('csv')
    summ.add_argument('--ratio', action='store_true',
                      help="also print the paired MLBF/WMMSE ratio per SNR")

    sub.add_parser('gradcheck', help="run the finite-difference gradient suites")
    return parser


def _config_tokens(path, parser):
    """Turn a key=value file into argv tokens placed before the real flags."""
    flags = {a.dest: a for a in parser._actions if a.option_strings}
    tokens = []
    try:
        fh = open(path, encoding='utf-8')
    except OSError as exc:
        parser.error(f"cannot read config: {exc}")
    with fh:
        for n, line in enumerate(fh, 1):
            line = line.split('#', 1)[0].strip()
            if not line:
                continue
            key, sep, value = line.partition('=')
            dest = key.strip().lstrip('-').replace('-', '_')
            if not sep or dest not in flags or dest == 'config':
                parser.error(f"{path}:{n}: unknown config entry {line!r}")
            action, value = flags[dest], value.strip()
            if isinstance(action, argparse._StoreTrueAction):
                if value.lower() in ('1', 'true', 'yes', 'on'):
                    tokens.append(action.option_strings[-1])
            else:
                tokens += [action.option_strings[-1], value]
    return tokens


def spec_from_args(args):
    scale = PAPER if args.paper_scale else DESK
    pick = lambda name: getattr(args, name) if getattr(args, name) is not None else scale[name]
    steps = args.inner_steps
    mlbf = MlbfConfig(T=pick('outer_steps'), K=steps, I=steps, J=steps, t_u=args.t_u,
                      lr_V=args.lr, lr_u=args.lr, lr_w=args.lr, hidden=args.hidden,
                      mu=args.mu, projection=args.projection)
    wmmse = WmmseConfig(max_iters=args.wmmse_iters, eps=args.eps)
    return bench.ExperimentSpec(
        snr_db_list=args.snr_db, n_channels=pick('channels'), n_restarts=pick('restarts'),
        algos=args.algo, seed=args.seed, M=args.antennas, N=args.users,
        power_mode=args.power_mode, wmmse=wmmse, mlbf=mlbf, workers=args.workers)


def _progress(done, total, key):
    log.info("[%d/%d] snr=%g channel=%d restart=%d %s", done, total, *key)


def cmd_run(args):
    spec = spec_from_args(args)
    result = bench.run_experiment(spec, progress=_progress)
    if args.out:
        bench.write_rows(result.rows, args.out)
    if result.rows:
        summary = bench.summarize(result.rows)
        if args.summary_out:
            with open(args.summary_out, 'w', newline='', encoding='utf-8') as fh:
                bench.write_summary(summary, fh)
        else:
            bench.write_summary(summary, sys.stdout)
    if result.failures:
        print(f"{len(result.failures)} solve(s) failed and were excluded", file=sys.stderr)
        return EXIT_SOLVER
    return EXIT_OK


def cmd_summarize(args):
    rows = bench.read_rows(args.csv)
    bench.write_summary(bench.summarize(rows), sys.stdout)
    if args.ratio:
        print("snr_db,ratio_mlbf_wmmse,stderr")
        for snr in sorted({r.snr_db for r in rows}):
            try:
                ratio, err = bench.paired_ratio(rows, snr)
            except ValueError:
                continue
            print(f"{snr!r},{ratio:.6f},{err:.6f}")
    return EXIT_OK


def cmd_gradcheck(args):
    results = gradcheck.run_all()
    for r in results:
        print(r.line())
    failed = [r for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} checks passed")
    return EXIT_SOLVER if failed else EXIT_OK


def main(argv=None):
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if getattr(args, 'config', None):
            run_parser = parser._subparsers._group_actions[0].choices['run']
            argv = argv[:1] + _config_tokens(args.config, run_parser) + argv[1:]
            args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if getattr(args, 'verbose', False) else logging.WARNING,
                        format='%(message)s', stream=sys.stderr)
    handler = {'run': cmd_run, 'summarize': cmd_summarize, 'gradcheck': cmd_gradcheck}[args.command]
    try:
        return handler(args)
    except BeamformError as exc:
        print(f"beamform: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_SOLVER
    except (ValueError, OSError) as exc:
        print(f"beamform: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
