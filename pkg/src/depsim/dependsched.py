"""Fault tolerance on top of scheduling: DAG list scheduling (baseline, ETF,
MCP), timeout watches, rescheduling DAG execution, checkpoint/restore and
quorum replication."""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass, field
from typing import Any, Callable, Hashable, Sequence

from .engine import Engine, SimulationError, format_float
from .faults import Monitor, Notice
from .resources import Grid, ProcessingUnit, Transfer
from .workload import Dag, Job, JobState, Scheduler

POLICIES = ("baseline", "etf", "mcp")
NOMINAL_BPS = 1e9


class NoPus(SimulationError):
    pass


class JobNotRunning(SimulationError):
    pass


class NotEnoughPus(SimulationError):
    pass


# --------------------------------------------------------------------------
# static DAG planning


@dataclass(frozen=True)
class Assignment:
    pu: str
    start: float
    finish: float


@dataclass
class Schedule:
    assignments: dict[str, Assignment] = field(default_factory=dict)
    policy: str = "baseline"

    @property
    def makespan(self) -> float:
        return max((a.finish for a in self.assignments.values()), default=0.0)

    def pu_of(self, tid: str) -> str:
        return self.assignments[tid].pu


CommCost = Callable[[str, str, float], float]


def nominal_comm(src_pu: str, dst_pu: str, nbytes: float) -> float:
    """Default planning estimate: free on the same PU, 1 Gb/s otherwise."""
    return 0.0 if src_pu == dst_pu else nbytes * 8.0 / NOMINAL_BPS


class _Planner:
    def __init__(self, dag: Dag, pus: Sequence, comm: CommCost, now: float,
                 pu_ready: dict[str, list[float]] | None):
        if not pus:
            raise NoPus("no processing units to plan on")
        self.dag = dag
        self.tasks = dag.task_map
        self.pus = sorted(pus, key=lambda p: p.id)
        self.power = {p.id: p.power for p in self.pus}
        self.comm = comm
        self.now = now
        self.slots = {}
        for p in self.pus:
            ready = list((pu_ready or {}).get(p.id, []))
            ready = [max(now, t) for t in ready][: p.slots]
            ready += [now] * (p.slots - len(ready))
            self.slots[p.id] = sorted(ready)
        self.parents = {t: [] for t in self.tasks}
        for a, b, nbytes in dag.edges:
            self.parents[b].append((a, nbytes))
        self.placed: dict[str, Assignment] = {}

    def cost(self, tid: str, pu: str) -> float:
        job = self.tasks[tid]
        return max(job.work - job.progress, 0.0) / self.power[pu]

    def data_ready(self, tid: str, pu: str) -> float:
        t = self.now
        for par, nbytes in self.parents[tid]:
            a = self.placed[par]
            t = max(t, a.finish + self.comm(a.pu, pu, nbytes))
        return t

    def est(self, tid: str, pu: str) -> float:
        return max(self.data_ready(tid, pu), self.slots[pu][0])

    def commit(self, tid: str, pu: str) -> Assignment:
        start = self.est(tid, pu)
        a = Assignment(pu, start, start + self.cost(tid, pu))
        slots = self.slots[pu]
        slots[0] = a.finish
        slots.sort()
        self.placed[tid] = a
        return a

    def ready(self) -> list[str]:
        return sorted(
            t for t in self.tasks
            if t not in self.placed and all(p in self.placed for p, _ in self.parents[t])
        )


def plan_dag(
    dag: Dag,
    pus: Sequence,
    policy: str = "etf",
    comm: CommCost | None = None,
    now: float = 0.0,
    pu_ready: dict[str, list[float]] | None = None,
) -> Schedule:
    """Plan ``dag`` on ``pus`` with a list-scheduling policy.

    ``etf`` repeatedly places the ready (task, PU) pair with the earliest
    estimated finish time; ``mcp`` orders tasks by ALAP start time along
    the critical path and gives each the PU where it can start earliest,
    preferring the earlier finish among equal starts; ``baseline`` walks the tasks topologically and uses the PU with the
    fewest planned tasks.  All ties break on the smaller id.  ``comm``
    estimates the transfer time of an edge between two PUs.
    """
    if policy not in POLICIES:
        raise ValueError(f"unknown policy {policy!r} (expected one of {POLICIES})")
    order = dag.topological_order()  # raises CyclicDag
    for p in pus:
        if not getattr(p, "operational", True):
            raise NoPus(f"{p.id} is not operational")
    pl = _Planner(dag, pus, comm or nominal_comm, now, pu_ready)
    pu_ids = [p.id for p in pl.pus]

    if policy == "etf":
        while len(pl.placed) < len(order):
            best = None
            for tid in pl.ready():
                for pu in pu_ids:
                    key = (pl.est(tid, pu) + pl.cost(tid, pu), tid, pu)
                    if best is None or key < best:
                        best = key
            pl.commit(best[1], best[2])
    elif policy == "mcp":
        alap = _alap(dag, pl, order)
        while len(pl.placed) < len(order):
            tid = min(pl.ready(), key=lambda t: (alap[t], t))
            pu = min(pu_ids, key=lambda p: (pl.est(tid, p), pl.est(tid, p) + pl.cost(tid, p), p))
            pl.commit(tid, pu)
    else:
        count = {p: 0 for p in pu_ids}
        for tid in order:
            pu = min(pu_ids, key=lambda p: (count[p], p))
            count[pu] += 1
            pl.commit(tid, pu)
    return Schedule(dict(sorted(pl.placed.items())), policy)


def _alap(dag: Dag, pl: _Planner, order: list[str]) -> dict[str, float]:
    """Latest possible start times from nominal task and edge costs."""
    ids = [p.id for p in pl.pus]
    mean_power = sum(pl.power.values()) / len(ids)
    pairs = [(a, b) for a in ids for b in ids if a != b]

    def edge(nbytes: float) -> float:
        if not pairs:
            return 0.0
        return sum(pl.comm(a, b, nbytes) for a, b in pairs) / len(pairs)

    children: dict[str, list[tuple[str, float]]] = {t: [] for t in order}
    for a, b, nbytes in dag.edges:
        children[a].append((b, nbytes))
    blevel: dict[str, float] = {}
    for tid in reversed(order):
        job = pl.tasks[tid]
        w = max(job.work - job.progress, 0.0) / mean_power
        blevel[tid] = w + max((edge(nb) + blevel[c] for c, nb in children[tid]), default=0.0)
    cp = max(blevel.values(), default=0.0)
    return {t: cp - blevel[t] for t in order}


# --------------------------------------------------------------------------
# timeout watches


@dataclass(eq=False)
class TimeoutWatch:
    id: str
    job: str
    deadline: float
    engine: Engine = field(repr=False)
    state: str = "armed"  # armed | fired | disarmed
    eid: int | None = None

    def disarm(self) -> bool:
        if self.state != "armed":
            return False
        self.engine.cancel(self.eid)
        self.state = "disarmed"
        self.engine.record("disarm", "watch", self.job, self.id)
        return True


def watch_timeout(engine: Engine, job: str, timeout: float,
                  on_fire: Callable[[TimeoutWatch], None]) -> TimeoutWatch:
    """Arm a deadline for ``job``; exactly one of disarm/fire takes effect."""
    if not timeout >= 0:
        raise ValueError("timeout must be >= 0")
    watch = TimeoutWatch(engine.next_id("w"), job, engine.now + timeout, engine)

    def fire(ev):
        if watch.state == "armed":
            watch.state = "fired"
            on_fire(watch)

    watch.eid = engine.schedule(watch.deadline, job, "timeout", source="watch", info=watch.id, action=fire)
    return watch


def watch_transfer(grid: Grid, transfer: Transfer, timeout: float, requester: str | None = None) -> TimeoutWatch:
    """Cancel ``transfer`` (and interrupt the waiting process) if it is not
    done within ``timeout`` seconds."""
    engine = grid.engine

    def on_fire(watch):
        grid.network.cancel(transfer, "timeout")
        if requester is not None:
            engine.interrupt(requester, "transfer-timeout")

    watch = watch_timeout(engine, transfer.id, timeout, on_fire)
    prev_done, prev_fail = transfer.on_done, transfer.on_fail

    def done(t):
        watch.disarm()
        if prev_done is not None:
            prev_done(t)

    def failed(t, reason):
        watch.disarm()
        if prev_fail is not None:
            prev_fail(t, reason)

    transfer.on_done, transfer.on_fail = done, failed
    return watch


# --------------------------------------------------------------------------
# checkpointing


@dataclass(frozen=True)
class Snapshot:
    id: str
    job: str
    taken_at: float
    work_done: float
    payload: dict = field(default_factory=dict, compare=False)


class Checkpointer:
    """Takes and restores job snapshots kept in the centers' storage.

    Static checkpointing snapshots a running job every ``interval``
    seconds; dynamic checkpointing snapshots it whenever a monitor
    notification matches the given trigger filter.  Writing a snapshot
    costs ``cost`` seconds of the job's time (zero by default).
    """

    def __init__(self, grid: Grid, monitor: Monitor | None = None, cost: float = 0.0,
                 interval: float | None = None):
        if interval is not None and not interval > 0:
            raise ValueError("checkpoint interval must be positive")
        self.grid = grid
        self.interval = interval
        self.engine = grid.engine
        self.monitor = monitor
        self.cost = cost
        self.snapshots: dict[str, list[Snapshot]] = {}
        self.jobs: dict[str, Job] = {}
        self._static: dict[str, float] = {}
        self._ticks: dict[str, int] = {}
        self._dynamic: dict[str, int] = {}

    def checkpoint(self, job: Job) -> Snapshot:
        if job.state != JobState.RUNNING or job.pu is None or job.id not in self.grid.pus[job.pu].running:
            raise JobNotRunning(f"job {job.id} is {job.state.value}")
        done = self.grid.work_done(job.pu, job.id)
        snap = Snapshot(
            self.engine.next_id("s"), job.id, self.engine.now, done,
            {"work": job.work, "pu": job.pu, "result": job.expected_result},
        )
        self.snapshots.setdefault(job.id, []).append(snap)
        self.jobs[job.id] = job
        self.grid.centers[self.grid.pus[job.pu].center].snapshots.append(snap)
        self.engine.record("snapshot", job.pu, job.id, f"{snap.id} work_done={format_float(done)}")
        if self.cost > 0:
            run = self.grid.pus[job.pu].running[job.id]
            run.eid = self.engine.postpone(run.eid, self.cost)
            run.started += self.cost
        return snap

    def latest(self, job_id: str) -> Snapshot | None:
        snaps = self.snapshots.get(job_id)
        return snaps[-1] if snaps else None

    def static(self, job: Job, interval: float) -> None:
        if not interval > 0:
            raise ValueError("checkpoint interval must be positive")
        self._static[job.id] = interval
        self.jobs[job.id] = job
        if job.state == JobState.RUNNING:
            self.on_start(job)

    def dynamic(self, job: Job, components=(), kinds=(), centers=()) -> None:
        if self.monitor is None:
            raise ValueError("dynamic checkpointing needs a monitor")
        self.jobs[job.id] = job

        def trigger(notice: Notice, job=job):
            if job.state == JobState.RUNNING and not notice.recovery:
                try:
                    self.checkpoint(job)
                except JobNotRunning:
                    pass

        self._dynamic[job.id] = self.monitor.subscribe(
            f"ckpt:{job.id}", trigger, components, kinds, centers)

    def on_start(self, job: Job) -> None:
        interval = self._static.get(job.id, self.interval)
        if interval is None:
            return
        self.engine.cancel(self._ticks.pop(job.id, None))

        def tick(ev, job=job):
            self._ticks.pop(job.id, None)
            if job.state != JobState.RUNNING:
                return
            self.checkpoint(job)
            self._ticks[job.id] = self.engine.after(interval, job.id, "checkpoint", source="ckpt", action=tick)

        self._ticks[job.id] = self.engine.after(interval, job.id, "checkpoint", source="ckpt", action=tick)

    def on_stop(self, job: Job) -> None:
        self.engine.cancel(self._ticks.pop(job.id, None))

    def restore(self, snapshot: Snapshot, pu: str,
                on_finish: Callable[[Job], None] | None = None) -> str:
        """Run the rest of the snapshotted job on ``pu``; returns the new job id."""
        total = snapshot.payload.get("work")
        if total is None:
            total = self.jobs[snapshot.job].work
        cont = Job(f"{snapshot.job}~{snapshot.id}", work=max(total - snapshot.work_done, 0.0),
                   expected=snapshot.payload.get("result"))
        cont.state = JobState.RUNNING
        cont.pu = pu
        self.grid.execute(cont, pu, on_finish)  # raises PuDown
        self.engine.record("restore", pu, cont.id,
                           f"{snapshot.id} remaining={format_float(cont.work)}")
        return cont.id


# --------------------------------------------------------------------------
# replication


def vote(results: Sequence[Hashable]) -> Hashable | None:
    """Strict-majority value of the received results, or None."""
    if not results:
        return None
    value, n = Counter(results).most_common(1)[0]
    return value if 2 * n > len(results) else None


@dataclass(eq=False)
class ReplicaGroup:
    id: str
    original: str
    k: int
    replicas: list[Job]
    voter: Job
    results: dict[str, Any] = field(default_factory=dict)
    decided: Any = None
    failed: bool = False
    done: bool = False

    @property
    def replica_ids(self) -> list[str]:
        return [r.id for r in self.replicas]


class Replicator:
    """Runs ``k`` copies of a job on distinct PUs plus a voter job that
    takes the strict-majority result."""

    def __init__(self, scheduler: Scheduler, voter_work: float = 0.0):
        self.scheduler = scheduler
        self.grid = scheduler.grid
        self.engine = scheduler.engine
        self.voter_work = voter_work
        self.groups: dict[str, ReplicaGroup] = {}
        self._owner: dict[str, ReplicaGroup] = {}
        scheduler.listeners.append(self._on_job)

    def replicate(self, job: Job, k: int, distinct: bool = True) -> ReplicaGroup:
        if k < 1:
            raise ValueError("replica count must be >= 1")
        sch = self.scheduler
        pus = sorted((p for p in sch.pu_ids if self.grid.pus[p].operational),
                     key=lambda p: (sch.load(p), p))
        if not pus:
            raise NotEnoughPus("no operational PU")
        if distinct and k > len(pus):
            raise NotEnoughPus(f"{k} replicas need {k} distinct PUs, {len(pus)} available")
        replicas = []
        for i in range(k):
            r = Job(f"{job.id}#{i}", job.work, vo=job.vo, credential=job.credential,
                    memory=job.memory, expected=job.expected_result, timeout=job.timeout)
            r.pinned = pus[i % len(pus)]
            replicas.append(r)
        hosts = {r.pinned for r in replicas}
        free = [p for p in pus if p not in hosts]
        voter = Job(f"{job.id}#vote", self.voter_work, expected=job.expected_result)
        voter.pinned = free[0] if free else pus[0]
        group = ReplicaGroup(self.engine.next_id("g"), job.id, k, replicas, voter)
        self.groups[group.id] = group
        for r in replicas:
            self._owner[r.id] = group
        self._owner[voter.id] = group
        for r in replicas:
            sch.submit_job(r)
        return group

    def _on_job(self, job: Job) -> None:
        group = self._owner.get(job.id)
        if group is None or group.done:
            return
        if job is group.voter:
            self._decide(group)
            return
        if job.state == JobState.FINISHED:
            group.results[job.id] = job.result
        elif job.state == JobState.FAILED:
            group.results[job.id] = None
        if len(group.results) == group.k and group.voter.state == JobState.CREATED:
            self.scheduler.submit_job(group.voter)

    def _decide(self, group: ReplicaGroup) -> None:
        group.done = True
        received = [v for v in group.results.values() if v is not None]
        if group.voter.state != JobState.FINISHED:
            group.failed = True
        else:
            group.decided = vote(received)
            group.failed = group.decided is None
        self.engine.record(
            "vote", group.voter.pu or "-", group.original,
            f"{group.id} responses={len(received)} decided={group.decided}",
        )


# --------------------------------------------------------------------------
# fault-tolerant DAG execution


@dataclass(eq=False)
class _DagRun:
    dag: Dag
    plan: dict[str, str]
    done_on: dict[str, str] = field(default_factory=dict)
    delivered: set = field(default_factory=set)
    staging: dict[tuple[str, str], tuple[str, Transfer]] = field(default_factory=dict)
    released: set = field(default_factory=set)


class DagScheduler(Scheduler):
    """Runs DAGs on a static plan and re-plans when PUs crash.

    A task is released to the queue (and counted as submitted) once all
    its parents finished and their outputs reached the task's planned PU.
    Lost tasks are rescheduled per the retry budget; not-yet-started
    tasks planned on a crashed PU are always moved to operational ones.
    """

    def __init__(self, grid: Grid, monitor: Monitor, sid: str = "sched", pus=None,
                 policy: str = "etf", reschedule: bool = True, max_retries: int = 3,
                 checkpointer: Any = None):
        if policy not in POLICIES:
            raise ValueError(f"unknown policy {policy!r}")
        super().__init__(grid, monitor, sid, pus, reschedule, max_retries, checkpointer)
        self.policy = policy
        self.runs: dict[str, _DagRun] = {}
        self._task_run: dict[str, _DagRun] = {}

    def comm_estimate(self, a: str, b: str, nbytes: float) -> float:
        if a == b:
            return 0.0
        try:
            return self.grid.nominal_transfer_time(a, b, nbytes)
        except SimulationError:
            return math.inf

    def _live_pus(self) -> list[ProcessingUnit]:
        return [self.grid.pus[p] for p in self.pu_ids if self.grid.pus[p].operational]

    def submit_dag(self, dag: Dag) -> Schedule:
        if dag.id in self.runs:
            raise ValueError(f"dag {dag.id} already submitted")
        for t in dag.tasks:
            if t.state != JobState.CREATED:
                raise ValueError(f"task {t.id} is not in the created state")
        sched = plan_dag(dag, self._live_pus(), self.policy, self.comm_estimate,
                         self.engine.now, self._pu_ready())
        run = _DagRun(dag, {t: a.pu for t, a in sched.assignments.items()})
        self.runs[dag.id] = run
        for t in dag.tasks:
            t.dag = dag.id
            self._task_run[t.id] = run
        self.engine.record("plan", self.id, dag.id,
                           f"{self.policy} makespan={format_float(sched.makespan)}")
        for tid in dag.topological_order():
            self._maybe_release(run, tid)
        return sched

    def _pu_ready(self) -> dict[str, list[float]]:
        out = {}
        for p in self.pu_ids:
            pu = self.grid.pus[p]
            times = []
            for run in pu.running.values():
                ev = self.engine.pending(run.eid)
                times.append(ev.time if ev is not None else self.engine.now)
            out[p] = times
        return out

    def _maybe_release(self, run: _DagRun, tid: str) -> None:
        if tid in run.released:
            return
        parents = run.dag.parents(tid)
        if any(p not in run.done_on for p, _ in parents):
            return
        if any((p, tid) not in run.delivered for p, _ in parents):
            return
        run.released.add(tid)
        job = run.dag.task_map[tid]
        job.pinned = run.plan[tid]
        self.submit_job(job)

    def job_finished(self, job: Job) -> None:
        run = self._task_run.get(job.id)
        if run is None:
            return
        run.done_on[job.id] = job.pu
        for child, nbytes in run.dag.children(job.id):
            self._stage(run, job.id, child, nbytes)

    def _stage(self, run: _DagRun, parent: str, child: str, nbytes: float) -> None:
        """Move ``parent``'s output to ``child``'s planned PU."""
        key = (parent, child)
        if child in run.released or key in run.delivered:
            return
        dst = run.plan[child]
        src = run.done_on[parent]
        if src == dst:
            run.delivered.add(key)
            self._maybe_release(run, child)
            return
        pending = run.staging.get(key)
        if pending is not None:
            if pending[0] == dst:
                return
            self.grid.network.cancel(pending[1], "replanned")
        if not self.grid.pus[src].operational:
            src = self.grid.pus[src].center  # output staged at the center

        def arrived(t, key=key, dst=dst):
            run.staging.pop(key, None)
            if run.plan[child] == dst:
                run.delivered.add(key)
                self._maybe_release(run, child)

        def failed(t, reason, key=key, dst=dst):
            if run.staging.get(key, (None, None))[1] is not t:
                return
            run.staging.pop(key, None)
            self.engine.record("stage-fail", self.id, child, f"{parent} {reason}")
            if run.plan[child] == dst and self.grid.pus[dst].operational:
                self._stage(run, parent, child, nbytes)

        t = self.grid.network.request(src, dst, nbytes, on_done=arrived, on_fail=failed,
                                      tag=f"{parent}>{child}")
        run.staging[key] = (dst, t)

    def job_failed(self, job: Job) -> None:
        run = self._task_run.get(job.id)
        if run is not None:
            run.released.add(job.id)

    def on_notice(self, notice: Notice) -> None:
        super().on_notice(notice)
        self._replan()

    def _replan(self) -> None:
        live = self._live_pus()
        if not live:
            return
        live_ids = {p.id for p in live}
        for run in self.runs.values():
            tasks = run.dag.task_map
            movable = [
                tid for tid, job in tasks.items()
                if job.state in (JobState.CREATED, JobState.QUEUED)
                and (tid not in run.released or job.state == JobState.QUEUED)
                and run.plan[tid] not in live_ids
                and not self._blocked(run, tid)
            ]
            if not movable:
                continue
            pending = [
                tid for tid, job in tasks.items()
                if job.state in (JobState.CREATED, JobState.QUEUED) and not self._blocked(run, tid)
            ]
            sub = Dag(
                f"{run.dag.id}/replan",
                [tasks[t] for t in sorted(pending)],
                [(a, b, n) for a, b, n in run.dag.edges if a in pending and b in pending],
            )
            sched = plan_dag(sub, live, self.policy, self.comm_estimate,
                             self.engine.now, self._pu_ready())
            for tid in movable:
                new = sched.assignments[tid].pu
                self.engine.record("replan", self.id, tid, f"{run.plan[tid]}->{new}")
                run.plan[tid] = new
                job = tasks[tid]
                if job.state == JobState.QUEUED:
                    job.pinned = new
                    continue
                for parent, nbytes in run.dag.parents(tid):
                    run.delivered.discard((parent, tid))
                    if parent in run.done_on:
                        self._stage(run, parent, tid, nbytes)
        self.dispatch()

    def _blocked(self, run: _DagRun, tid: str) -> bool:
        """True if some ancestor failed, so ``tid`` can never run."""
        tasks = run.dag.task_map
        stack = [p for p, _ in run.dag.parents(tid)]
        seen = set()
        while stack:
            p = stack.pop()
            if p in seen:
                continue
            seen.add(p)
            if tasks[p].state == JobState.FAILED:
                return True
            stack.extend(q for q, _ in run.dag.parents(p))
        return False
