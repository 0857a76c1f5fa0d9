"""Command line interface.

Subcommands:
  run     execute a configured simulation, writing CSV records
  verify  run the invariant suite on one time step of a config
  oracle  cross-check the state solver against active-set enumeration

Exit codes: 0 success, 2 config error, 3 solver failure, 4 I/O error.
"""

from __future__ import annotations

import argparse
import logging
import sys

import numpy as np

from . import __version__
from .control import kkt_residual, evaluate_J, evaluate_J_gamma
from .driver import apply_fast_mode, load_config, run_simulation
from .errors import ConfigError, SolverError
from .state import solve_state, solve_state_enumerate, \
    random_admissible_instance


def _cmd_run(args) -> int:
    config = load_config(args.config)
    if args.output_dir:
        from dataclasses import replace
        config = replace(config, output_dir=args.output_dir)
    if args.fast:
        config = apply_fast_mode(config)
    result = run_simulation(config)
    last = result.records[-1]
    print(f"completed {len(result.records)} steps; final J={last.J:.6g}, "
          f"complementarity={last.comp_residual:.3e}, "
          f"max kkt residual={last.kkt.max:.3e}")
    if config.output_dir:
        print(f"records written to {config.output_dir}/records.csv")
    return 0


def _cmd_verify(args) -> int:
    """One-step invariant suite for a configuration."""
    from dataclasses import replace
    config = replace(load_config(args.config), n_steps=1, output_dir=None)
    checks = []

    def check(name, ok, detail=""):
        checks.append(ok)
        print(f"{'PASS' if ok else 'FAIL'}  {name}{'  ' + detail if detail else ''}")

    from .driver import _build_mesh
    from .fem import assemble_operators
    mesh = _build_mesh(config)
    ops = assemble_operators(mesh, config.kappa, config.tau)

    # mesh/operator invariants
    coords = mesh.node_coords
    if mesh.dimension == 1:
        vol = float(np.sum(np.diff(coords[:, 0])))
        exact = config.extents[0]
    else:
        tri = mesh.element_connectivity
        a, b, c = coords[tri[:, 0]], coords[tri[:, 1]], coords[tri[:, 2]]
        e1, e2 = b - a, c - a
        vol = float(np.sum(0.5 * np.abs(e1[:, 0] * e2[:, 1]
                                        - e1[:, 1] * e2[:, 0])))
        exact = config.extents[0] * config.extents[1]
    check("element volumes sum to domain measure",
          abs(vol - exact) <= 1e-12 * exact, f"sum={vol!r}")
    sym = abs(ops.A - ops.A.T).max()
    check("state operator symmetric", sym <= 1e-14 * abs(ops.A).max())
    free = ops.free_mask
    rng = np.random.default_rng(0)
    phi = np.zeros(mesh.n_nodes)
    phi[free] = rng.standard_normal(int(free.sum()))
    qa = float(phi @ (ops.A @ phi))
    qh = float(phi @ ((ops.M + (ops.H1 - ops.M)) @ phi))
    kappa_min = float(np.min(ops.kappa))
    check("coercivity against the H1 form",
          qa >= min(1.0, ops.tau * kappa_min) * qh * (1 - 1e-12))

    config_run = replace(config, output_dir=None)
    try:
        result = run_simulation(config_run, collect_traces=True)
    except SolverError as exc:
        check("one-step simulation solves", False, str(exc))
        return 0 if all(checks) else 3
    rec = result.records[0]
    check("one-step simulation solves", True)
    check("maximum principle on stored state",
          result.min_y >= -1e-12 and result.min_xi >= -1e-12
          and result.max_xi <= 1 + 1e-12,
          f"min_y={result.min_y:.2e}, xi in [{result.min_xi:.2e}, "
          f"{result.max_xi:.8f}]")
    if config.benchmark not in ("uncontrolled",):
        check("KKT residuals within tolerance", rec.kkt.max <= 1e-6,
              f"max={rec.kkt.max:.2e}")
        trace = result.traces[0]
        check("penalty endpoint below path start",
              trace[-1].penalty <= trace[0].penalty + 1e-30,
              f"{trace[0].penalty:.3e} -> {trace[-1].penalty:.3e}")
        check("J_gamma dominates J along the path",
              all(pt.J_gamma >= pt.J - 1e-12 * max(1, abs(pt.J))
                  for pt in trace))
    return 0 if all(checks) else 3


def _cmd_oracle(args) -> int:
    rng = np.random.default_rng(args.seed)
    worst_y = worst_xi = 0.0
    for _ in range(args.instances):
        ops, u, adv = random_admissible_instance(rng,
                                                 max_free_nodes=args.nodes)
        got = solve_state(ops, u, adv)
        ref = solve_state_enumerate(ops, u, adv)
        worst_y = max(worst_y, float(np.max(np.abs(got.y - ref.y))))
        worst_xi = max(worst_xi, float(np.max(np.abs(got.xi - ref.xi))))
    print(f"{args.instances} random instances (<= {args.nodes} free nodes): "
          f"max |dy| = {worst_y:.3e}, max |dxi| = {worst_xi:.3e}")
    ok = worst_y <= 1e-10 and worst_xi <= 1e-10
    print("PASS" if ok else "FAIL")
    return 0 if ok else 3


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="meltctrl",
        description="Instantaneous boundary control of a melting problem")
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true",
                        help="per-step logging to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="run a configured simulation")
    p_run.add_argument("--config", required=True)
    p_run.add_argument("--output-dir", default=None)
    p_run.add_argument("--fast", action="store_true",
                       help="desk-scale CI mode (example1: 100 steps, "
                            "example2: 25x50 grid)")
    p_run.set_defaults(func=_cmd_run)

    p_ver = sub.add_parser("verify", help="invariant suite on one step")
    p_ver.add_argument("--config", required=True)
    p_ver.set_defaults(func=_cmd_verify)

    p_or = sub.add_parser("oracle",
                          help="state solver vs active-set enumeration")
    p_or.add_argument("--nodes", type=int, default=10)
    p_or.add_argument("--instances", type=int, default=50)
    p_or.add_argument("--seed", type=int, default=0)
    p_or.set_defaults(func=_cmd_oracle)

    args = parser.parse_args(argv)
    logging.basicConfig(stream=sys.stderr, format="%(message)s",
                        level=logging.INFO if args.verbose else logging.WARNING)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except SolverError as exc:
        print(f"solver failure: {exc}", file=sys.stderr)
        return 3
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
