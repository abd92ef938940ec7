"""Patches, load balancing, lockstep batch integration and the concurrent driver."""
from __future__ import annotations

import queue
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, NamedTuple, Optional

import numpy as np

from .core import IntegratorStats, ToleranceSpec, VectorPool, stats_sum
from .errors import BatchOdeError, EmptyBatch, IntegrationError
from .integrators import BdfIntegrator, ErkIntegrator, SolverChoice
from .layout import CellBlock, Layout, reorder

__all__ = [
    "CellBlock", "Layout", "reorder", "Patch", "Tile", "BatchPlan", "RebalanceDecision",
    "partition_patches", "plan_makespan", "rebalance_if_improved", "tile", "make_patches",
    "integrate_batch", "BatchWork", "BatchResult", "ConcurrentResult", "run_concurrent",
    "DEFAULT_TILE_SIZE", "ERK",
]

DEFAULT_TILE_SIZE = 1024
ERK = "erk"


# ---------------------------------------------------------------- patches and plans

@dataclass
class Patch:
    start: int
    stop: int
    work_estimate: Optional[float] = None
    tile_size: int = DEFAULT_TILE_SIZE

    def __post_init__(self):
        if self.stop < self.start:
            raise ValueError("patch range is reversed")
        if self.work_estimate is None:
            # never integrated: assume work proportional to size
            self.work_estimate = float(self.n_cells)
        if self.work_estimate < 0:
            raise ValueError("work_estimate must be non-negative")

    @property
    def n_cells(self):
        return self.stop - self.start


class Tile(NamedTuple):
    start: int
    stop: int


def make_patches(n_cells, patch_size, tile_size=DEFAULT_TILE_SIZE):
    return [Patch(s, min(s + patch_size, n_cells), tile_size=tile_size)
            for s in range(0, n_cells, patch_size)]


def tile(patch: Patch, tile_size=None):
    """Split a patch into contiguous tiles of at most ``tile_size`` cells."""
    size = patch.tile_size if tile_size is None else tile_size
    if size < 1:
        raise ValueError("tile_size must be at least 1")
    return [Tile(s, min(s + size, patch.stop)) for s in range(patch.start, patch.stop, size)]


@dataclass
class BatchPlan:
    assignments: dict           # worker -> list of patch indices, in assignment order
    predicted_makespan: float
    n_workers: int
    order: list = field(default_factory=list)    # global dispatch order of patch indices

    def loads(self, works):
        return [float(sum(works[i] for i in self.assignments[k])) for k in range(self.n_workers)]

    def worker_of(self, patch_index):
        for k, items in self.assignments.items():
            if patch_index in items:
                return k
        raise KeyError(patch_index)


def partition_patches(patches, n_workers) -> BatchPlan:
    """Greedy longest-processing-time assignment.

    Patches go in order of decreasing work (ties: lower index first) to the
    least-loaded worker (ties: lower worker index).
    """
    if n_workers < 1:
        raise ValueError("n_workers must be at least 1")
    works = [float(p.work_estimate) for p in patches]
    order = sorted(range(len(works)), key=lambda i: (-works[i], i))
    loads = [0.0] * n_workers
    assignments = {k: [] for k in range(n_workers)}
    for i in order:
        k = min(range(n_workers), key=lambda j: (loads[j], j))
        assignments[k].append(i)
        loads[k] += works[i]
    return BatchPlan(assignments, max(loads), n_workers, order)


def plan_makespan(plan: BatchPlan, patches):
    works = [float(p.work_estimate) for p in patches]
    return max(plan.loads(works), default=0.0)


class RebalanceDecision(NamedTuple):
    deploy: bool
    plan: BatchPlan
    current_makespan: float
    tentative_makespan: float

    @property
    def improvement(self):
        if self.current_makespan <= 0:
            return 0.0
        return 1.0 - self.tentative_makespan / self.current_makespan


def deploy_threshold_met(current_makespan, tentative_makespan, threshold=0.05):
    """True when the tentative plan is at least ``threshold`` cheaper."""
    if not 0.0 < threshold < 1.0:
        raise ValueError("threshold must lie in (0, 1)")
    if current_makespan <= 0:
        return False
    # relative slack absorbs rounding in (1 - threshold) * current
    return tentative_makespan <= (1.0 - threshold) * current_makespan * (1.0 + 1e-12)


def rebalance_if_improved(current: BatchPlan, patches, threshold=0.05) -> RebalanceDecision:
    """Keep ``current`` unless a fresh LPT plan beats it by ``threshold`` under refreshed estimates."""
    cur = plan_makespan(current, patches)
    tentative = partition_patches(patches, current.n_workers)
    new = tentative.predicted_makespan
    if deploy_threshold_met(cur, new, threshold):
        return RebalanceDecision(True, tentative, cur, new)
    kept = BatchPlan(current.assignments, cur, current.n_workers, current.order)
    return RebalanceDecision(False, kept, cur, new)


# ---------------------------------------------------------------- batch integration

def make_integrator(system, solver, layout=Layout.CY, pool=None, **options):
    if solver == ERK:
        return ErkIntegrator(system, layout=layout, pool=pool, **options)
    return BdfIntegrator(system, solver, layout=layout, pool=pool, **options)


def integrate_batch(block: CellBlock, f_ext, t0, t_end, tol: ToleranceSpec, solver=SolverChoice(), *,
                    system=None, integrator=None, batch_id=None, deadline=None):
    """Advance every cell of ``block`` in lockstep; returns (CellBlock, IntegratorStats).

    ``solver`` is a SolverChoice or ``"erk"``. Pass an existing
    ``integrator`` to reuse its buffers; otherwise one is built for
    ``system``. The result keeps the input layout. Integrator failures are
    re-raised with ``batch_id`` attached.
    """
    if block.n_cells == 0:
        raise EmptyBatch("cannot integrate an empty batch")
    if integrator is None:
        if system is None:
            raise ValueError("need a system or an integrator")
        integrator = make_integrator(system, solver, block.layout)
    elif integrator.layout is not block.layout:
        raise ValueError("integrator layout differs from the block layout")
    cells = block.cells()
    try:
        y_end, stats = integrator.integrate(np.ascontiguousarray(cells), t0, t_end, tol, f_ext,
                                            deadline=deadline)
    except IntegrationError as exc:
        exc.batch_id = batch_id
        raise
    return CellBlock.from_cells(y_end, block.layout), stats


@dataclass
class BatchWork:
    batch_id: int
    block: CellBlock
    t0: float
    t_end: float
    tol: ToleranceSpec
    f_ext: Optional[np.ndarray] = None


class BatchResult(NamedTuple):
    batch_id: int
    block: Optional[CellBlock]
    stats: IntegratorStats
    worker: int
    error: Optional[BaseException] = None


@dataclass
class ConcurrentResult:
    results: list               # BatchResult ordered by batch_id
    stats: IntegratorStats
    per_worker: list            # batches processed by each worker

    @property
    def errors(self):
        return [r for r in self.results if r.error is not None]

    def raise_first(self):
        bad = self.errors
        if bad:
            raise bad[0].error


def run_concurrent(work, n_workers, factory: Callable | None = None, plan: BatchPlan | None = None,
                   deadline=None, raise_on_error=True, instances=None) -> ConcurrentResult:
    """Integrate independent batches on ``n_workers`` threads sharing one queue.

    ``factory(pool)`` builds the worker's private integrator around its
    private VectorPool. Batches are queued in ``plan.order`` when a plan is
    given, else in list order. Every batch writes its own result slot, so
    the final states do not depend on the worker count. A failing batch is
    recorded with its id while the others drain; with ``raise_on_error`` the
    lowest failing batch id is raised at the end. ``instances`` supplies
    long-lived per-worker integrators instead of ``factory``.
    """
    if n_workers < 1:
        raise ValueError("n_workers must be at least 1")
    if instances is None and factory is None:
        raise ValueError("need a factory or per-worker instances")
    if instances is not None and len(instances) < n_workers:
        raise ValueError("fewer integrator instances than workers")
    work = list(work)
    order = list(plan.order) if plan is not None else list(range(len(work)))
    if sorted(order) != list(range(len(work))):
        raise ValueError("plan does not cover every batch exactly once")
    q = queue.SimpleQueue()
    for i in order:
        q.put(i)
    slots = [None] * len(work)
    counts = [0] * n_workers

    def worker(k):
        integ = instances[k] if instances is not None else factory(VectorPool())
        while True:
            try:
                i = q.get_nowait()
            except queue.Empty:
                return
            item = work[i]
            counts[k] += 1
            try:
                block, stats = integrate_batch(item.block, item.f_ext, item.t0, item.t_end, item.tol,
                                               integrator=integ, batch_id=item.batch_id,
                                               deadline=deadline)
                slots[i] = BatchResult(item.batch_id, block, stats, k)
            except BatchOdeError as exc:
                if getattr(exc, "batch_id", None) is None:
                    exc.batch_id = item.batch_id
                slots[i] = BatchResult(item.batch_id, None, IntegratorStats(), k, exc)

    if n_workers == 1:
        worker(0)
    else:
        with ThreadPoolExecutor(max_workers=n_workers) as ex:
            futures = [ex.submit(worker, k) for k in range(n_workers)]
            for f in futures:
                f.result()
    results = sorted(slots, key=lambda r: r.batch_id)
    out = ConcurrentResult(results, stats_sum(r.stats for r in results), counts)
    if raise_on_error:
        out.raise_first()
    return out
