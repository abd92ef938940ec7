"""Command-line entry point: ``batchode {sweep,run,reference,bench}``."""
from __future__ import annotations

import argparse
import sys

from . import harness
from ._accel import backend_name
from .harness import SweepConfig


def _common(p):
    p.add_argument("--config", help="key = value file; flags given on the command line win")
    p.add_argument("--model", help="linear | robertson | robertson-scaled | ignition")
    p.add_argument("--approach", help="comma-separated approaches, e.g. 1A,2B")
    p.add_argument("--dt-cfd", help="comma-separated outer interval widths (s)")
    p.add_argument("--eta", help="comma-separated tolerance scale factors")
    p.add_argument("--rtol", type=float)
    p.add_argument("--t-end", type=float)
    p.add_argument("--cells", type=int, help="cells per reactor batch")
    p.add_argument("--perturbation", type=float, help="random spread of the monitored component")
    p.add_argument("--workers", type=int)
    p.add_argument("--tile-size", type=int)
    p.add_argument("--layout", choices=["CY", "YC"])
    p.add_argument("--typical-update", help="interval:N | reference | initial")
    p.add_argument("--seed", type=int)
    p.add_argument("--timeout", type=float, help="wall-clock budget per sweep row (s)")
    p.add_argument("--cache-dir", help="directory for cached reference solutions")
    p.add_argument("--reference-max-step", type=float)
    p.add_argument("--parallel-rows", type=int)
    p.add_argument("--out", help="CSV output path (default: stdout)")
    p.add_argument("--print-config", action="store_true", help="print the effective configuration and exit")


def build_config(args) -> SweepConfig:
    overrides = dict(
        model=args.model, approaches=args.approach, dt_cfd_list=args.dt_cfd, eta_list=args.eta,
        rtol=args.rtol, t_end=args.t_end, n_cells=args.cells, perturbation=args.perturbation,
        workers=args.workers, tile_size=args.tile_size, layout=args.layout,
        typical_update=args.typical_update, seed=args.seed, timeout_seconds=args.timeout,
        cache_dir=args.cache_dir, reference_max_step=args.reference_max_step,
        parallel_rows=args.parallel_rows)
    if args.config:
        return SweepConfig.from_file(args.config, **overrides)
    return SweepConfig(**{k: v for k, v in overrides.items() if v is not None})


def _emit(rows, out):
    if out:
        harness.write_csv(rows, out)
    else:
        harness.write_csv(rows, sys.stdout)


def cmd_sweep(args):
    cfg = build_config(args)
    rows = harness.run_sweep(cfg, with_reference=not args.no_reference)
    _emit(rows, args.out)
    return 0


def cmd_run(args):
    cfg = build_config(args)
    if len(cfg.approaches) != 1 or len(cfg.dt_cfd_list) != 1 or len(cfg.eta_list) > 1:
        print("run takes exactly one approach, dt_cfd and eta", file=sys.stderr)
        return 2
    ref = None if args.no_reference else harness.reference_for(cfg)
    eta = cfg.eta_list[0] if cfg.eta_list else cfg.fixed_atol
    row = harness.run_row(cfg, cfg.approaches[0], cfg.dt_cfd_list[0], eta, reference=ref)
    _emit([row], args.out)
    if row.detail:
        print(row.detail, file=sys.stderr)
    return 0


def cmd_reference(args):
    cfg = build_config(args)
    ref = harness.reference_for(cfg)
    idx = harness.get_model(cfg.model).monitor_index
    print(f"reference: {len(ref.times)} samples, final monitored value {ref.states[-1, :, idx].tolist()}")
    if cfg.cache_dir is None:
        print("(not cached; pass --cache-dir to keep it)", file=sys.stderr)
    return 0


def cmd_bench(args):
    cfg = build_config(args)
    counts = tuple(int(x) for x in args.sizes.split(","))
    t_end = args.interval
    table = harness.bench_table(cfg.model, cfg.approaches, counts, t_end=t_end, rtol=cfg.rtol,
                                eta=cfg.eta_list[0] if cfg.eta_list else cfg.fixed_atol, seed=cfg.seed,
                                perturbation=cfg.perturbation)
    print(f"# backend: {backend_name()}")
    print(f"{'approach':>8} {'cells':>6} {'wall_s':>10} {'per_cell_s':>12} {'steps':>7} {'rhs':>8}")
    for r in table:
        print(f"{r['approach']:>8} {r['n_cells']:>6} {r['wall_time_s']:>10.4f} {r['per_cell_s']:>12.3e} "
              f"{r['n_steps']:>7} {r['n_rhs']:>8}")
    return 0


def make_parser():
    parser = argparse.ArgumentParser(prog="batchode", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    p = sub.add_parser("sweep", help="run the approach x dt_cfd x eta grid and write CSV")
    _common(p)
    p.add_argument("--no-reference", action="store_true", help="skip the reference (no error column)")
    p.set_defaults(func=cmd_sweep)
    p = sub.add_parser("run", help="run a single sweep row")
    _common(p)
    p.add_argument("--no-reference", action="store_true")
    p.set_defaults(func=cmd_run)
    p = sub.add_parser("reference", help="build (and cache) the reference solution")
    _common(p)
    p.set_defaults(func=cmd_reference)
    p = sub.add_parser("bench", help="batch size x solver timing table")
    _common(p)
    p.add_argument("--sizes", default="1,8,64,256", help="comma-separated batch sizes")
    p.add_argument("--interval", type=float, default=1e-3, help="integration interval (s)")
    p.set_defaults(func=cmd_bench)
    return parser


def main(argv=None):
    parser = make_parser()
    args = parser.parse_args(argv)
    try:
        cfg = build_config(args)
    except (ValueError, KeyError) as exc:
        parser.error(str(exc))
    if args.print_config:
        sys.stdout.write(cfg.to_text())
        return 0
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
