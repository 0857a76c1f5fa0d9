"""Benchmark definitions, time loop, config files and CSV output.

The time loop is strictly sequential: at each step the previous fields
are transported along the characteristics, the desired state for the
current time is sampled nodally, the penalised control path is
followed, and the resulting (y, xi, u) becomes the next step's input.
Per-step one-line summaries go to stderr; machine-readable records go
to CSV only.
"""

from __future__ import annotations

import configparser
import logging
import math
import time as _time
from dataclasses import dataclass, field, replace

import numpy as np

from .control import (
    ControlProblemData,
    KktResiduals,
    KktState,
    PathSchedule,
    evaluate_J_terms,
    kkt_residual,
    penalty_term,
    solve_penalized_step,
)
from .errors import ConfigError, SolverError
from .fem import assemble_operators
from .mesh import BoundaryTag, StructuredMesh, build_interval_mesh, \
    build_rectangle_mesh
from .semilag import AdvectedPair, VelocityField, advect, characteristic_feet
from .state import check_maximum_principle, solve_state

logger = logging.getLogger("meltctrl")

BENCHMARKS = ("example1", "example2", "zero", "uncontrolled")

#: nodes within this distance of the analytic front count as solid
#: (closed-set sampling convention, robust to last-ulp grid arithmetic)
_FRONT_TOL = 1e-9


@dataclass(frozen=True)
class SimulationConfig:
    dimension: int
    extents: tuple
    cells: tuple
    tags: tuple | dict
    tau: float
    n_steps: int
    kappa: float
    velocity: tuple
    xi0: float
    nu: float
    benchmark: str
    schedule: PathSchedule
    output_dir: str | None = None
    write_fields_every: int = 0
    record_wall_ms: bool = False

    def validate(self):
        if self.tau <= 0:
            raise ConfigError(f"tau must be positive, got {self.tau}")
        if self.n_steps < 1:
            raise ConfigError(f"steps must be >= 1, got {self.n_steps}")
        if self.benchmark not in BENCHMARKS:
            raise ConfigError(f"unknown benchmark {self.benchmark!r}; "
                              f"choose from {BENCHMARKS}")
        if self.benchmark == "example1" and self.dimension != 1:
            raise ConfigError("example1 is a 1D benchmark")
        if self.benchmark == "example2" and self.dimension != 2:
            raise ConfigError("example2 is a 2D benchmark")
        if not 0.0 <= self.xi0 <= 1.0:
            raise ConfigError("initial solid fraction must lie in [0, 1]")
        if len(self.velocity) != self.dimension:
            raise ConfigError("velocity dimension does not match mesh")


@dataclass(frozen=True)
class TimeStepRecord:
    step: int
    time: float
    u: np.ndarray
    J: float
    J_state_term: float
    J_xi_term: float
    J_u_term: float
    penalty_end: float
    comp_residual: float
    kkt: KktResiduals
    err_y_l2: float
    err_u_rel: float
    wall_ms: float


@dataclass
class SimulationResult:
    records: list
    mesh: StructuredMesh
    ops: object
    final_y: np.ndarray
    final_xi: np.ndarray
    final_u: np.ndarray
    min_y: float
    min_xi: float
    max_xi: float
    max_clamped_fraction: float
    traces: list | None = None
    snapshots: dict = field(default_factory=dict)


# ---------------------------------------------------------------------------
# benchmark fields


def example1_fields(t: float, mesh: StructuredMesh):
    """Analytic desired state of the 1D benchmark at time t.

    Temperature exp(t-x)-1 behind the front x = t, zero ahead; the
    solid indicator takes the solid value 1 on the front itself.  The
    matching exact boundary flux is exp(t).
    """
    if t < 0:
        raise ValueError(f"time must be nonnegative, got {t}")
    x = mesh.node_coords[:, 0]
    y_d = np.maximum(np.exp(t - x) - 1.0, 0.0)
    xi_d = np.where(x < t - _FRONT_TOL, 0.0, 1.0)
    return y_d, xi_d, math.exp(t)


def example2_fields(mesh: StructuredMesh):
    """Time-independent desired state of the 2D benchmark.

    Parabolic melt pocket x1 <= (4 - x2)*x2/4 of maximum depth 1.
    """
    if mesh.dimension != 2:
        raise ValueError("example2 fields require a 2D mesh")
    x1 = mesh.node_coords[:, 0]
    x2 = mesh.node_coords[:, 1]
    front = 0.25 * (4.0 - x2) * x2
    y_d = np.maximum(np.exp(front - x1) - 1.0, 0.0)
    xi_d = np.where(x1 < front - _FRONT_TOL, 0.0, 1.0)
    return y_d, xi_d


# ---------------------------------------------------------------------------
# config files


_KNOWN_KEYS = {
    "mesh": {"dimension", "extents", "cells", "tags"},
    "time": {"tau", "steps"},
    "physics": {"kappa", "velocity", "xi0"},
    "control": {"nu", "benchmark"},
    "schedule": {"gamma0", "growth", "count", "epsilon_rule"},
    "output": {"dir", "write_fields_every", "record_wall_ms"},
}

_DEFAULT_TAGS_1D = ("control", "dirichlet")
_DEFAULT_TAGS_2D = {"left": "control", "right": "neumann",
                    "bottom": "dirichlet", "top": "dirichlet"}


def _parse_tuple(text: str, n: int, cast):
    parts = [p.strip() for p in text.split(",")]
    if len(parts) != n:
        raise ConfigError(f"expected {n} comma-separated values, "
                          f"got {text!r}")
    return tuple(cast(p) for p in parts)


def _parse_tags(text: str, dimension: int):
    if dimension == 1:
        return _parse_tuple(text, 2, str)
    tags = {}
    for item in text.split(","):
        side, _, tag = item.partition(":")
        side, tag = side.strip(), tag.strip()
        if side not in ("left", "right", "bottom", "top") or not tag:
            raise ConfigError(f"bad 2D tags entry {item!r}; use "
                              "side:tag with sides left/right/bottom/top")
        tags[side] = tag
    missing = {"left", "right", "bottom", "top"} - set(tags)
    if missing:
        raise ConfigError(f"tags missing sides {sorted(missing)}")
    return tags


def load_config(path: str) -> SimulationConfig:
    """Parse the sectioned key-value config file (unknown keys error)."""
    parser = configparser.ConfigParser(interpolation=None)
    read = parser.read(path)
    if not read:
        raise ConfigError(f"cannot read config file {path!r}")
    for section in parser.sections():
        if section not in _KNOWN_KEYS:
            raise ConfigError(f"unknown config section [{section}]")
        for key in parser[section]:
            if key not in _KNOWN_KEYS[section]:
                raise ConfigError(f"unknown key {key!r} in [{section}]")
    for section in _KNOWN_KEYS:
        if section not in parser:
            raise ConfigError(f"missing config section [{section}]")

    def get(section, key, cast=str, default=None):
        if key not in parser[section]:
            if default is None:
                raise ConfigError(f"missing key {key!r} in [{section}]")
            return default
        try:
            return cast(parser[section][key])
        except (ValueError, TypeError) as exc:
            raise ConfigError(f"bad value for {key!r} in [{section}]: "
                              f"{exc}") from exc

    try:
        dim = get("mesh", "dimension", int)
        if dim not in (1, 2):
            raise ConfigError(f"dimension must be 1 or 2, got {dim}")
        extents = _parse_tuple(get("mesh", "extents"), dim, float)
        cells = _parse_tuple(get("mesh", "cells"), dim, int)
        benchmark = get("control", "benchmark")
        if "tags" in parser["mesh"]:
            tags = _parse_tags(parser["mesh"]["tags"], dim)
        elif dim == 1:
            tags = _DEFAULT_TAGS_1D if benchmark != "uncontrolled" \
                else ("neumann", "neumann")
        else:
            tags = dict(_DEFAULT_TAGS_2D) if benchmark != "uncontrolled" \
                else {s: "neumann" for s in _DEFAULT_TAGS_2D}
        velocity_text = get("physics", "velocity")
        if velocity_text.strip() in ("0", "zero"):
            velocity = (0.0,) * dim
        else:
            velocity = _parse_tuple(velocity_text, dim, float)
        schedule = PathSchedule.default(
            gamma0=get("schedule", "gamma0", float),
            growth=get("schedule", "growth", float),
            count=get("schedule", "count", int),
            epsilon_rule=get("schedule", "epsilon_rule"),
        )
        config = SimulationConfig(
            dimension=dim, extents=extents, cells=cells, tags=tags,
            tau=get("time", "tau", float),
            n_steps=get("time", "steps", int),
            kappa=get("physics", "kappa", float),
            velocity=velocity,
            xi0=get("physics", "xi0", float, default=1.0),
            nu=get("control", "nu", float),
            benchmark=benchmark,
            schedule=schedule,
            output_dir=get("output", "dir", str, default="") or None,
            write_fields_every=get("output", "write_fields_every", int,
                                   default=0),
            record_wall_ms=get("output", "record_wall_ms",
                               lambda s: s.lower() in ("1", "true", "yes"),
                               default=False),
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    config.validate()
    return config


def apply_fast_mode(config: SimulationConfig) -> SimulationConfig:
    """Desk-scale CI mode: example1 caps at 100 steps, example2 runs
    the documented 25x50 grid."""
    if config.benchmark == "example1":
        return replace(config, n_steps=min(100, config.n_steps))
    if config.benchmark == "example2":
        return replace(config, cells=(25, 50))
    return config


# ---------------------------------------------------------------------------
# CSV output

_CSV_HEADER = ("step,time,J,J_state_term,J_xi_term,J_u_term,penalty_end,"
               "comp_residual,kkt_r1,kkt_r2,kkt_r3,kkt_r4,kkt_r5,"
               "err_y_l2,err_u_rel,wall_ms")


def _fmt(v: float) -> str:
    return f"{v:.17g}"


def _record_row(r: TimeStepRecord) -> str:
    vals = [r.time, r.J, r.J_state_term, r.J_xi_term, r.J_u_term,
            r.penalty_end, r.comp_residual, *r.kkt.as_tuple(),
            r.err_y_l2, r.err_u_rel, r.wall_ms]
    return f"{r.step}," + ",".join(_fmt(v) for v in vals)


def write_records(records, path):
    """Write the records CSV (17 significant digits, stable columns)."""
    try:
        with open(path, "w", encoding="ascii") as fh:
            fh.write(_CSV_HEADER + "\n")
            for rec in records:
                fh.write(_record_row(rec) + "\n")
    except OSError as exc:
        raise OSError(f"cannot write records to {path!r}: {exc}") from exc


def _write_fields(mesh, y, xi, path):
    coords = mesh.node_coords
    cols = "node_index,x,temperature,solid_fraction" if mesh.dimension == 1 \
        else "node_index,x,y,temperature,solid_fraction"
    with open(path, "w", encoding="ascii") as fh:
        fh.write(cols + "\n")
        for k in range(mesh.n_nodes):
            xy = ",".join(_fmt(c) for c in coords[k])
            fh.write(f"{k},{xy},{_fmt(y[k])},{_fmt(xi[k])}\n")


def _write_control(mesh, control_nodes, u, path):
    coords = mesh.node_coords
    cols = "node_index,x,u" if mesh.dimension == 1 else "node_index,x,y,u"
    with open(path, "w", encoding="ascii") as fh:
        fh.write(cols + "\n")
        for k, node in enumerate(control_nodes):
            xy = ",".join(_fmt(c) for c in coords[node])
            fh.write(f"{node},{xy},{_fmt(u[k])}\n")


# ---------------------------------------------------------------------------
# time loop


def _build_mesh(config: SimulationConfig) -> StructuredMesh:
    if config.dimension == 1:
        return build_interval_mesh(config.extents[0], config.cells[0],
                                   config.tags)
    return build_rectangle_mesh(config.extents[0], config.extents[1],
                                config.cells[0], config.cells[1],
                                config.tags)


def _desired_provider(config: SimulationConfig, mesh: StructuredMesh,
                      xi_init: np.ndarray):
    if config.benchmark == "example1":
        def provider(t):
            return example1_fields(t, mesh)
    elif config.benchmark == "example2":
        y_d, xi_d = example2_fields(mesh)

        def provider(t):
            return y_d, xi_d, None
    elif config.benchmark == "zero":
        y0 = np.zeros(mesh.n_nodes)

        def provider(t):
            return y0, xi_init, None
    else:
        def provider(t):
            return None, None, None
    return provider


def _relative_l2(ops, diff, ref):
    num = math.sqrt(float(np.sum(ops.lumped_mass * diff * diff)))
    den = math.sqrt(float(np.sum(ops.lumped_mass * ref * ref)))
    return num / den if den > 0 else math.nan


def run_simulation(config: SimulationConfig, snapshot_steps=(),
                   collect_traces: bool = False) -> SimulationResult:
    """Run the instantaneous-control time loop.

    Writes records.csv (and periodic field/control CSVs) when an output
    directory is configured; on solver failure the records completed so
    far are flushed before the error propagates.
    """
    config.validate()
    mesh = _build_mesh(config)
    ops = assemble_operators(mesh, config.kappa, config.tau)
    controlled = config.benchmark != "uncontrolled"
    if controlled and ops.n_controls == 0:
        raise ConfigError("benchmark needs a Control-tagged boundary")
    vel = VelocityField.constant(config.velocity) \
        if any(v != 0.0 for v in config.velocity) \
        else VelocityField.zero(config.dimension)

    y = np.zeros(mesh.n_nodes)             # substance starts at melting point
    xi = np.full(mesh.n_nodes, config.xi0)
    provider = _desired_provider(config, mesh, xi.copy())
    schedule = config.schedule
    snapshot_steps = set(int(s) for s in snapshot_steps)

    records: list[TimeStepRecord] = []
    traces = [] if collect_traces else None
    snapshots = {}
    min_y, min_xi, max_xi = math.inf, math.inf, -math.inf
    max_clamped = 0.0
    warm = None
    u_final = np.zeros(ops.n_controls)

    out = None
    if config.output_dir:
        import os
        os.makedirs(config.output_dir, exist_ok=True)
        out = open(os.path.join(config.output_dir, "records.csv"),
                   "w", encoding="ascii")
        out.write(_CSV_HEADER + "\n")

    try:
        for n in range(1, config.n_steps + 1):
            t0 = _time.perf_counter()
            t = n * config.tau
            feet, clamped = characteristic_feet(mesh, vel, t, config.tau)
            adv = advect(mesh, feet, y, xi, clamped)
            max_clamped = max(max_clamped, clamped)
            y_d, xi_d, u_ex = provider(t)

            if controlled:
                data = ControlProblemData(y_d=y_d, xi_d=xi_d, nu=config.nu,
                                          advected=adv)
                if warm is not None:
                    warm = KktState(y=np.zeros(mesh.n_nodes),
                                    xi=np.asarray(adv.xi_bar).copy(),
                                    u=warm.u, p=np.zeros(mesh.n_nodes),
                                    lam=np.zeros(mesh.n_nodes),
                                    gamma=warm.gamma, epsilon=warm.epsilon)
                try:
                    state, trace = solve_penalized_step(data, ops, schedule,
                                                        warm_start=warm)
                except SolverError as exc:
                    raise SolverError(
                        f"step {n} (t={t:.6g}): {exc}",
                        history=exc.history, trace=exc.trace) from exc
                warm = state
                # instantaneous control: the path solve yields the flux;
                # the system marches with the exact complementarity state
                # under that flux (Theorem-1 range holds for it)
                sol = solve_state(ops, state.u, adv)
                y, xi, u = sol.y.copy(), sol.xi.copy(), state.u.copy()
                terms = evaluate_J_terms(data, ops, y, xi, u)
                pen = trace[-1].penalty
                res = trace[-1].residuals
                if traces is not None:
                    traces.append(trace)
            else:
                sol = solve_state(ops, np.zeros(ops.n_controls), adv)
                y, xi, u = sol.y.copy(), sol.xi.copy(), \
                    np.zeros(ops.n_controls)
                terms = (0.0, 0.0, 0.0)
                pen = 0.0
                res = KktResiduals(0.0, 0.0, 0.0, 0.0, 0.0)

            report = check_maximum_principle(_FieldPair(y, xi))
            if not report.passed:
                raise SolverError(
                    f"step {n}: stored state violates the maximum "
                    f"principle (worst y {report.worst_y:.3e} at node "
                    f"{report.worst_y_node}, xi range "
                    f"[{report.worst_xi_low:.3e}, "
                    f"{report.worst_xi_high + 0:.6f}])")
            min_y = min(min_y, float(y.min()))
            min_xi = min(min_xi, float(xi.min()))
            max_xi = max(max_xi, float(xi.max()))

            comp = float(np.sum(ops.lumped_mass * xi * y))
            err_y = math.nan
            err_u = math.nan
            if config.benchmark == "example1":
                y_ex, _, u_exact = example1_fields(t, mesh)
                err_y = _relative_l2(ops, y - y_ex, y_ex)
                err_u = abs(u[0] - u_exact) / u_exact if u.size else math.nan
            wall_ms = (_time.perf_counter() - t0) * 1e3
            rec = TimeStepRecord(
                step=n, time=t, u=u.copy(), J=sum(terms),
                J_state_term=terms[0], J_xi_term=terms[1],
                J_u_term=terms[2], penalty_end=pen, comp_residual=comp,
                kkt=res, err_y_l2=err_y, err_u_rel=err_u,
                wall_ms=wall_ms if config.record_wall_ms else 0.0)
            records.append(rec)
            u_final = u
            if out is not None:
                out.write(_record_row(rec) + "\n")
                out.flush()
                every = config.write_fields_every
                if every > 0 and n % every == 0:
                    import os
                    _write_fields(mesh, y, xi, os.path.join(
                        config.output_dir, f"fields_{n}.csv"))
                    if controlled:
                        _write_control(mesh, ops.control_nodes, u,
                                       os.path.join(config.output_dir,
                                                    f"control_{n}.csv"))
            if n in snapshot_steps:
                snapshots[n] = (y.copy(), xi.copy())
            logger.info(
                "step %4d  t=%-8.4g J=%-12.6g pen=%-10.3g kkt=%-9.2e "
                "wall=%.0fms", n, t, sum(terms), pen, res.max, wall_ms)
    finally:
        if out is not None:
            out.close()

    return SimulationResult(
        records=records, mesh=mesh, ops=ops, final_y=y, final_xi=xi,
        final_u=u_final, min_y=min_y, min_xi=min_xi, max_xi=max_xi,
        max_clamped_fraction=max_clamped, traces=traces,
        snapshots=snapshots)


class _FieldPair:
    """Duck-typed (y, xi) holder for the maximum-principle check."""

    def __init__(self, y, xi):
        self.y = y
        self.xi = xi
