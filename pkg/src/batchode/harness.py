"""Zero-dimensional reactor experiments: outer-loop emulation, references, error metric, sweeps.

An experiment advances a batch of cells through uniform outer intervals of
width ``dt_cfd``; each interval is a fresh integration whose endpoint seeds
the next one, as in an operator-split flow solver. Solution approaches
combine a solver stack (digit) with a tolerance strategy (letter):

    1: inexact Newton, scaled GMRES, difference-quotient Jv
    2: modified Newton, batched direct LU, analytic Jacobian
    3: modified Newton, batched direct LU, difference-quotient Jacobian
    A: absolute tolerance fixed at eta for every component
    B: absolute tolerance eta * typical value per component
"""
from __future__ import annotations

import csv
import dataclasses
import enum
import hashlib
import io
import json
import math
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple, Optional

import numpy as np

from .batching import BatchWork, make_integrator, make_patches, partition_patches, rebalance_if_improved, run_concurrent
from .core import DEFAULT_ETA, IntegratorStats, ToleranceSpec, TypicalValues, VectorPool, stats_sum, update_typical_values
from .errors import GridMismatch, IntegrationError, IntegrationTimeout, ReferenceFailed
from .integrators import SolverChoice
from .layout import CellBlock, Layout
from .models import OdeSystem, get_model

REFERENCE_FORMAT = "batchode-ref-v1"
CSV_COLUMNS = ("approach", "dt_cfd", "eta", "avg_mse_T", "wall_time_s", "outcome", "n_steps", "n_rhs",
               "n_newton", "n_lin", "n_jac", "n_err_fail", "n_conv_fail")


@dataclass(frozen=True)
class Approach:
    name: str
    solver: SolverChoice
    typical: bool
    layout: Layout


APPROACHES = {
    "1A": Approach("1A", SolverChoice.inexact_newton_gmres(), False, Layout.YC),
    "1B": Approach("1B", SolverChoice.inexact_newton_gmres(), True, Layout.YC),
    "2A": Approach("2A", SolverChoice.modified_newton_direct("analytic"), False, Layout.CY),
    "2B": Approach("2B", SolverChoice.modified_newton_direct("analytic"), True, Layout.CY),
    "3A": Approach("3A", SolverChoice.modified_newton_direct("numerical"), False, Layout.CY),
    "3B": Approach("3B", SolverChoice.modified_newton_direct("numerical"), True, Layout.CY),
}


def get_approach(name) -> Approach:
    try:
        return APPROACHES[str(name).upper()]
    except KeyError:
        raise KeyError(f"unknown approach {name!r}; choose from {sorted(APPROACHES)}") from None


class Outcome(str, enum.Enum):
    COMPLETED = "Completed"
    TIMED_OUT = "TimedOut"
    NO_IGNITION = "NoIgnition"
    FAILED = "Failed"


# ---------------------------------------------------------------- configuration

@dataclass
class SweepConfig:
    model: str = "ignition"
    approaches: tuple = ("1B",)
    dt_cfd_list: tuple = (1e-4,)
    eta_list: tuple = (DEFAULT_ETA,)
    rtol: float = 1e-7
    t_end: float = 0.1
    n_cells: int = 1
    timeout_seconds: float = 60.0
    # "interval:N" refreshes from the batch every N intervals; "reference" takes
    # the midpoints of the reference trajectory's range; "initial" freezes the first
    typical_update: str = "interval:1"
    seed: int = 0
    # half-width of the uniform random offset applied to each cell's monitored component
    perturbation: float = 0.0
    workers: int = 1
    tile_size: int = 1024
    layout: Optional[str] = None
    fixed_atol: float = DEFAULT_ETA
    reference_rtol: float = 1e-12
    reference_atol: float = 1e-12
    # widest internal step of the reference; None means 1e-6 * t_end
    reference_max_step: Optional[float] = None
    cache_dir: Optional[str] = None
    parallel_rows: int = 1

    def __post_init__(self):
        self.approaches = tuple(get_approach(a).name for a in _as_tuple(self.approaches))
        self.dt_cfd_list = tuple(float(x) for x in _as_tuple(self.dt_cfd_list))
        self.eta_list = tuple(float(x) for x in _as_tuple(self.eta_list))
        if self.rtol <= 0 or self.t_end <= 0:
            raise ValueError("rtol and t_end must be positive")
        if any(dt <= 0 for dt in self.dt_cfd_list):
            raise ValueError("dt_cfd values must be positive")
        if self.n_cells < 1 or self.workers < 1 or self.tile_size < 1:
            raise ValueError("n_cells, workers and tile_size must be at least 1")
        _parse_typical_policy(self.typical_update)

    @property
    def max_reference_step(self):
        return self.reference_max_step if self.reference_max_step is not None else 1e-6 * self.t_end

    def to_text(self):
        lines = []
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            if isinstance(v, tuple):
                v = ",".join(repr(x) if isinstance(x, float) else str(x) for x in v)
            lines.append(f"{f.name} = {'' if v is None else v}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text, **overrides):
        values = parse_config_text(text)
        values.update({k: v for k, v in overrides.items() if v is not None})
        return cls(**values)

    @classmethod
    def from_file(cls, path, **overrides):
        return cls.from_text(Path(path).read_text(), **overrides)


def _as_tuple(v):
    if isinstance(v, str):
        return tuple(x.strip() for x in v.split(",") if x.strip())
    if np.isscalar(v):
        return (v,)
    return tuple(v)


def parse_config_text(text):
    """Flat ``key = value`` lines; ``#`` starts a comment; values are coerced by field type."""
    types = {f.name: f.type for f in dataclasses.fields(SweepConfig)}
    out = {}
    for n, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {n}: expected key = value")
        key, val = (s.strip() for s in line.split("=", 1))
        key = key.replace("-", "_")
        if key not in types:
            raise ValueError(f"line {n}: unknown key {key!r}")
        out[key] = _coerce(types[key], val)
    return out


def _coerce(typ, val):
    typ = str(typ)
    if val == "" and "Optional" in typ:
        return None
    if "tuple" in typ:
        return val
    if "int" in typ:
        return int(val)
    if "float" in typ:
        return float(val)
    return val


def _parse_typical_policy(text):
    text = str(text)
    if text in ("reference", "initial"):
        return text, None
    if text.startswith("interval:"):
        n = int(text.split(":", 1)[1])
        if n < 1:
            raise ValueError("typical-value interval must be at least 1")
        return "interval", n
    raise ValueError(f"unknown typical-value policy {text!r}")


# ---------------------------------------------------------------- grids and initial data

def interval_grid(t_end, dt_cfd, t0=0.0):
    """Interval endpoints; the last interval is shortened to land on ``t_end``."""
    n = max(1, int(math.ceil((t_end - t0) / dt_cfd - 1e-9)))
    times = t0 + dt_cfd * np.arange(1, n + 1)
    times[-1] = t_end
    return times


def initial_cells(system: OdeSystem, n_cells, perturbation=0.0, seed=0):
    y0 = np.array(system.y0 if system.y0 is not None else np.zeros(system.n_comp), dtype=float)
    cells = np.tile(y0, (n_cells, 1))
    if perturbation > 0.0:
        rng = np.random.default_rng(seed)
        cells[:, system.monitor_index] += rng.uniform(-perturbation, perturbation, n_cells)
    return cells


# ---------------------------------------------------------------- outer loop

@dataclass
class OuterLoopResult:
    times: np.ndarray              # interval endpoints, shape (K,)
    states: np.ndarray             # (K, n_cells, n_comp)
    stats: IntegratorStats
    interval_stats: list
    pool_fresh: list               # total fresh pool allocations after each interval
    y0: np.ndarray


def _tolerance(cfg, approach, eta, cells, tv_state, k, n_comp, reference_tv):
    if not approach.typical:
        return ToleranceSpec.fixed(cfg.rtol, eta, n_comp), tv_state
    policy, every = _parse_typical_policy(cfg.typical_update)
    if policy == "reference":
        if reference_tv is None:
            raise ValueError("typical_update=reference needs reference typical values")
        tv_state = TypicalValues(np.asarray(reference_tv, dtype=float), 0)
    elif tv_state is None or (policy == "interval" and k % every == 0):
        tv_state = update_typical_values(cells, tv_state, step=k)
    return ToleranceSpec.typical(cfg.rtol, tv_state, eta), tv_state


def run_outer_loop(cfg: SweepConfig, approach, dt_cfd, eta, *, system=None, deadline=None,
                   reference_tv=None, f_ext=None, solver_override=None) -> OuterLoopResult:
    """Integrate the configured batch interval by interval from 0 to ``cfg.t_end``."""
    approach = get_approach(approach) if isinstance(approach, str) else approach
    system = system or get_model(cfg.model)
    layout = Layout.parse(cfg.layout) if cfg.layout else approach.layout
    solver = solver_override if solver_override is not None else approach.solver
    cells = initial_cells(system, cfg.n_cells, cfg.perturbation, cfg.seed)
    y0 = cells.copy()
    times = interval_grid(cfg.t_end, dt_cfd)
    patches = make_patches(cfg.n_cells, cfg.tile_size, cfg.tile_size)
    plan = partition_patches(patches, cfg.workers)
    instances = [make_integrator(system, solver, layout, pool=VectorPool()) for _ in range(cfg.workers)]
    states = np.empty((len(times), cfg.n_cells, system.n_comp))
    per_interval = []
    fresh = []
    tv_state = None
    t = 0.0
    for k, t_next in enumerate(times):
        tol, tv_state = _tolerance(cfg, approach, eta, cells, tv_state, k, system.n_comp, reference_tv)
        work = [BatchWork(i, CellBlock.from_cells(cells[p.start:p.stop], layout), t, t_next, tol,
                          None if f_ext is None else np.broadcast_to(f_ext, cells.shape)[p.start:p.stop])
                for i, p in enumerate(patches)]
        res = run_concurrent(work, cfg.workers, plan=plan, deadline=deadline, instances=instances)
        for r, p in zip(res.results, patches):
            cells[p.start:p.stop] = r.block.cells()
            p.work_estimate = float(r.stats.n_rhs_evals)
        plan = rebalance_if_improved(plan, patches).plan
        states[k] = cells
        per_interval.append(res.stats)
        fresh.append(sum(inst.pool.stats.fresh_allocations for inst in instances))
        t = t_next
    return OuterLoopResult(times, states, stats_sum(per_interval), per_interval, fresh, y0)


# ---------------------------------------------------------------- reference

class Reference(NamedTuple):
    times: np.ndarray
    states: np.ndarray           # (K, n_cells, n_comp)

    def typical_values(self, y0=None):
        """Per-component midpoint of the range over all cells and sample times."""
        arr = self.states.reshape(-1, self.states.shape[-1])
        if y0 is not None:
            arr = np.vstack((arr, np.atleast_2d(y0)))
        return 0.5 * (arr.min(axis=0) + arr.max(axis=0))

    def at(self, times):
        idx = _match_grid(times, self.times)
        return self.states[idx]


def _cache_key(system, cells, t_end, sample_times, rtol, atol, max_step):
    h = hashlib.sha256()
    meta = dict(format=REFERENCE_FORMAT, model=system.name,
                params={k: np.asarray(v).tolist() for k, v in system.params.items()},
                t_end=t_end, rtol=rtol, atol=atol, max_step=max_step)
    h.update(json.dumps(meta, sort_keys=True).encode())
    h.update(np.ascontiguousarray(cells).tobytes())
    h.update(np.ascontiguousarray(sample_times).tobytes())
    return h.hexdigest()[:24]


def compute_reference(system: OdeSystem, t_end, sample_times=None, *, cells=None, rtol=1e-12, atol=1e-12,
                      max_step=None, cache_dir=None, timeout=None) -> Reference:
    """Tight-tolerance solution sampled at ``sample_times`` (modified Newton, numerical Jacobian).

    Internal steps never exceed ``max_step`` (default ``1e-6 * t_end``).
    Results are cached as ``.npz`` under ``cache_dir`` keyed by model,
    parameters, tolerances, initial cells and the sample grid.
    """
    cells = np.atleast_2d(np.asarray(system.y0 if cells is None else cells, dtype=float))
    sample = np.unique(np.append(np.asarray([] if sample_times is None else sample_times, float), t_end))
    if sample[0] <= 0.0:
        raise ValueError("sample times must be positive")
    max_step = 1e-6 * t_end if max_step is None else float(max_step)
    path = None
    if cache_dir is not None:
        key = _cache_key(system, cells, t_end, sample, rtol, atol, max_step)
        path = Path(cache_dir) / f"ref-{system.name}-{key}.npz"
        if path.exists():
            with np.load(path, allow_pickle=False) as z:
                if str(z["format"]) == REFERENCE_FORMAT:
                    return Reference(z["times"], z["states"])
    deadline = None if timeout is None else time.perf_counter() + timeout
    integ = make_integrator(system, SolverChoice.modified_newton_direct("numerical"), Layout.CY,
                            h_max=max_step, max_steps=10 ** 9)
    tol = ToleranceSpec.fixed(rtol, atol, system.n_comp)
    states = np.empty((len(sample),) + cells.shape)
    y = cells.copy()
    t = 0.0
    try:
        for k, tk in enumerate(sample):
            y, _ = integ.integrate(y, t, tk, tol, deadline=deadline)
            states[k] = y
            t = tk
    except IntegrationError as exc:
        raise ReferenceFailed(f"reference integration failed at t={exc.t}: {exc}") from exc
    if path is not None:
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp = path.with_suffix(".tmp.npz")
        np.savez(tmp, format=REFERENCE_FORMAT, times=sample, states=states)
        os.replace(tmp, path)
    return Reference(sample, states)


# ---------------------------------------------------------------- error metric

def _match_grid(times, ref_times, rel=1e-12):
    times = np.asarray(times, dtype=float)
    ref_times = np.asarray(ref_times, dtype=float)
    idx = np.searchsorted(ref_times, times)
    out = np.empty(len(times), dtype=int)
    for j, (t, i) in enumerate(zip(times, idx)):
        cands = [c for c in (i - 1, i) if 0 <= c < len(ref_times)]
        best = min(cands, key=lambda c: abs(ref_times[c] - t), default=None)
        if best is None or abs(ref_times[best] - t) > rel * max(abs(t), 1e-300):
            raise GridMismatch(f"time {t!r} is not on the reference grid")
        out[j] = best
    return out


def error_metric(run_T, reference_T):
    """Average over interval endpoints of the squared monitored-component error.

    Both arguments are (K,) or (K, n_cells) arrays on the same time grid;
    with several cells the squared error is also averaged over cells.
    """
    a = np.asarray(run_T, dtype=float)
    b = np.asarray(reference_T, dtype=float)
    if a.shape != b.shape:
        raise GridMismatch(f"run has shape {a.shape}, reference has {b.shape}")
    if a.size == 0:
        raise GridMismatch("no endpoints to compare")
    return float(np.mean((a - b) ** 2))


def trajectory_error(result: OuterLoopResult, ref: Reference, index):
    ref_states = ref.at(result.times)
    return error_metric(result.states[..., index], ref_states[..., index])


# ---------------------------------------------------------------- sweeps

@dataclass
class SweepResultRow:
    approach: str
    dt_cfd: float
    eta: float
    avg_mse_T: Optional[float]
    wall_time_s: float
    outcome: Outcome
    stats: IntegratorStats = field(default_factory=IntegratorStats)
    detail: str = ""

    def as_csv(self):
        s = self.stats
        return {
            "approach": self.approach, "dt_cfd": repr(self.dt_cfd), "eta": repr(self.eta),
            "avg_mse_T": "" if self.avg_mse_T is None else repr(self.avg_mse_T),
            "wall_time_s": f"{self.wall_time_s:.6f}", "outcome": self.outcome.value,
            "n_steps": s.n_steps, "n_rhs": s.n_rhs_evals, "n_newton": s.n_newton_iters,
            "n_lin": s.n_lin_iters, "n_jac": s.n_jac_evals, "n_err_fail": s.n_err_test_fails,
            "n_conv_fail": s.n_conv_fails,
        }


def sweep_grid(cfg: SweepConfig):
    """Rows in deterministic order: approach, then dt_cfd, then eta."""
    rows = []
    for a in cfg.approaches:
        etas = cfg.eta_list
        if not etas:
            etas = (cfg.fixed_atol,) if not get_approach(a).typical else (DEFAULT_ETA,)
        for dt in cfg.dt_cfd_list:
            for eta in etas:
                rows.append((a, dt, eta))
    return rows


def reference_for(cfg: SweepConfig, system=None) -> Reference:
    system = system or get_model(cfg.model)
    grid = np.unique(np.concatenate([interval_grid(cfg.t_end, dt) for dt in cfg.dt_cfd_list]))
    cells = initial_cells(system, cfg.n_cells, cfg.perturbation, cfg.seed)
    return compute_reference(system, cfg.t_end, grid, cells=cells, rtol=cfg.reference_rtol,
                             atol=cfg.reference_atol, max_step=cfg.max_reference_step,
                             cache_dir=cfg.cache_dir)


def _ignited(system, y0, peak):
    if system.ignition_threshold is None:
        return np.ones(len(y0), dtype=bool)
    return peak >= system.ignition_threshold(y0)


def run_row(cfg: SweepConfig, approach, dt_cfd, eta, reference: Reference | None = None,
            system=None) -> SweepResultRow:
    system = system or get_model(cfg.model)
    idx = system.monitor_index
    ref_tv = None
    if reference is not None:
        ref_tv = reference.typical_values(initial_cells(system, cfg.n_cells, cfg.perturbation, cfg.seed))
    start = time.perf_counter()
    deadline = start + cfg.timeout_seconds if cfg.timeout_seconds else None
    try:
        res = run_outer_loop(cfg, approach, dt_cfd, eta, system=system, deadline=deadline,
                             reference_tv=ref_tv)
    except IntegrationTimeout:
        return SweepResultRow(approach, dt_cfd, eta, None, time.perf_counter() - start, Outcome.TIMED_OUT)
    except IntegrationError as exc:
        return SweepResultRow(approach, dt_cfd, eta, None, time.perf_counter() - start, Outcome.FAILED,
                              detail=f"{type(exc).__name__}: {exc}")
    wall = time.perf_counter() - start
    if reference is None:
        return SweepResultRow(approach, dt_cfd, eta, None, wall, Outcome.COMPLETED, res.stats)
    peak = res.states[..., idx].max(axis=0)
    ref_peak = reference.states[..., idx].max(axis=0)
    should_ignite = _ignited(system, res.y0, ref_peak)
    if np.any(should_ignite & ~_ignited(system, res.y0, peak)):
        return SweepResultRow(approach, dt_cfd, eta, None, wall, Outcome.NO_IGNITION, res.stats)
    mse = trajectory_error(res, reference, idx)
    return SweepResultRow(approach, dt_cfd, eta, mse, wall, Outcome.COMPLETED, res.stats)


def run_sweep(cfg: SweepConfig, out=None, reference: Reference | None = None, with_reference=True):
    """Run every grid row; returns the rows and writes CSV to ``out`` (path or file) when given."""
    system = get_model(cfg.model)
    if reference is None and with_reference:
        reference = reference_for(cfg, system)
    grid = sweep_grid(cfg)
    if cfg.parallel_rows > 1:
        with ThreadPoolExecutor(max_workers=cfg.parallel_rows) as ex:
            rows = list(ex.map(lambda r: run_row(cfg, *r, reference=reference, system=system), grid))
    else:
        rows = [run_row(cfg, *r, reference=reference, system=system) for r in grid]
    if out is not None:
        write_csv(rows, out)
    return rows


def write_csv(rows, out):
    if isinstance(out, (str, os.PathLike)):
        with open(out, "w", newline="") as fh:
            return write_csv(rows, fh)
    writer = csv.DictWriter(out, fieldnames=CSV_COLUMNS, lineterminator="\n")
    writer.writeheader()
    for r in rows:
        writer.writerow(r.as_csv())
    return out


def rows_to_csv_text(rows):
    buf = io.StringIO()
    write_csv(rows, buf)
    return buf.getvalue()


# ---------------------------------------------------------------- benchmark table

def bench_table(model="robertson", approaches=("1A", "2A", "3A"), cell_counts=(1, 8, 64, 256), t_end=1e-3,
                rtol=1e-7, eta=DEFAULT_ETA, seed=0, perturbation=0.0, repeats=1):
    """Wall time per cell for each approach and batch size (one interval of length ``t_end``)."""
    system = get_model(model)
    out = []
    for a in approaches:
        ap = get_approach(a)
        for n in cell_counts:
            cfg = SweepConfig(model=model, approaches=(a,), dt_cfd_list=(t_end,), eta_list=(eta,), rtol=rtol,
                              t_end=t_end, n_cells=n, seed=seed, perturbation=perturbation, tile_size=n,
                              timeout_seconds=0)
            best = math.inf
            for _ in range(repeats):
                t0 = time.perf_counter()
                res = run_outer_loop(cfg, ap, t_end, eta, system=system)
                best = min(best, time.perf_counter() - t0)
            out.append(dict(approach=a, n_cells=n, wall_time_s=best, per_cell_s=best / n,
                            n_steps=res.stats.n_steps, n_rhs=res.stats.n_rhs_evals))
    return out
