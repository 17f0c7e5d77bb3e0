"""Jobs, DAG-structured activities, arrival generators and the baseline
job scheduler."""

from __future__ import annotations

import heapq
import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Callable, Iterable

from .engine import SeededRng, SimulationError, format_float
from .faults import CRASH, Monitor, Notice
from .resources import OPERATIONAL, Grid


class JobState(str, Enum):
    CREATED = "created"
    QUEUED = "queued"
    RUNNING = "running"
    FINISHED = "finished"
    FAILED = "failed"
    RESCHEDULED = "rescheduled"


_LEGAL = {
    JobState.CREATED: {JobState.QUEUED},
    JobState.QUEUED: {JobState.RUNNING},
    JobState.RUNNING: {JobState.FINISHED, JobState.FAILED, JobState.RESCHEDULED},
    JobState.RESCHEDULED: {JobState.QUEUED},
    JobState.FINISHED: set(),
    JobState.FAILED: set(),
}


class IllegalTransition(SimulationError):
    pass


class NoScheduler(SimulationError):
    pass


class CyclicDag(SimulationError):
    pass


class BadPattern(SimulationError, ValueError):
    pass


@dataclass(eq=False)
class Job:
    id: str
    work: float
    input_size: float = 0.0
    output_size: float = 0.0
    timeout: float | None = None
    vo: str | None = None
    credential: Any = None
    memory: float = 0.0
    state: JobState = JobState.CREATED
    progress: float = 0.0
    retries_used: int = 0
    result: Any = None
    home: str | None = None
    output_to: str | None = None
    pu: str | None = None
    pinned: str | None = None
    submitted_at: float | None = None
    finished_at: float | None = None
    dag: str | None = None
    expected: str | None = None

    def __post_init__(self):
        if self.work < 0:
            raise ValueError(f"job {self.id}: work must be >= 0")

    @property
    def expected_result(self) -> str:
        return self.expected if self.expected is not None else f"ok:{self.id}"

    def transition(self, new: JobState) -> None:
        if new not in _LEGAL[self.state]:
            raise IllegalTransition(f"job {self.id}: {self.state.value} -> {new.value}")
        self.state = new


@dataclass(eq=False)
class Dag:
    id: str
    tasks: list[Job]
    edges: list[tuple[str, str, float]] = field(default_factory=list)

    def __post_init__(self):
        ids = [t.id for t in self.tasks]
        if len(set(ids)) != len(ids):
            raise ValueError(f"dag {self.id}: duplicate task ids")
        known = set(ids)
        for p, c, nbytes in self.edges:
            if p not in known or c not in known:
                raise ValueError(f"dag {self.id}: edge {p}->{c} names an unknown task")
            if nbytes < 0:
                raise ValueError(f"dag {self.id}: negative communication volume on {p}->{c}")

    @property
    def task_map(self) -> dict[str, Job]:
        return {t.id: t for t in self.tasks}

    def parents(self, tid: str) -> list[tuple[str, float]]:
        return [(p, b) for p, c, b in self.edges if c == tid]

    def children(self, tid: str) -> list[tuple[str, float]]:
        return [(c, b) for p, c, b in self.edges if p == tid]

    def topological_order(self) -> list[str]:
        """Kahn's algorithm, smallest id first among ready tasks."""
        indeg = {t.id: 0 for t in self.tasks}
        for _, c, _ in self.edges:
            indeg[c] += 1
        ready = [tid for tid, d in indeg.items() if d == 0]
        heapq.heapify(ready)
        order = []
        while ready:
            tid = heapq.heappop(ready)
            order.append(tid)
            for c, _ in self.children(tid):
                indeg[c] -= 1
                if indeg[c] == 0:
                    heapq.heappush(ready, c)
        if len(order) != len(self.tasks):
            raise CyclicDag(f"dag {self.id} contains a cycle")
        return order


ACTIVITY_PATTERNS = ("batch", "poisson", "dos")


@dataclass
class Activity:
    """A generator of work: ``batch`` submits ``count`` items at ``start``;
    ``poisson`` draws exponential gaps of mean ``1/rate`` inside
    ``[start, end]`` (at most ``count`` items when given); ``dos`` is an
    attack pattern handled by the security model."""

    id: str
    pattern: str
    count: int | None = None
    rate: float = 0.0
    start: float = 0.0
    end: float = math.inf
    template: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        if self.pattern not in ACTIVITY_PATTERNS:
            raise BadPattern(f"activity {self.id}: unknown pattern {self.pattern!r}")
        if self.count is not None and self.count < 0:
            raise BadPattern(f"activity {self.id}: count must be >= 0")
        if self.rate < 0:
            raise BadPattern(f"activity {self.id}: rate must be >= 0")
        if self.end < self.start:
            raise BadPattern(f"activity {self.id}: end before start")
        if self.pattern == "batch" and self.count is None:
            raise BadPattern(f"activity {self.id}: batch needs a count")
        if self.pattern == "poisson" and self.count is None and math.isinf(self.end):
            raise BadPattern(f"activity {self.id}: poisson needs a count or an end")


def arrival_times(activity: Activity, rng: SeededRng) -> list[float]:
    """Submission instants of an activity, drawn from its own substream."""
    if activity.pattern == "batch":
        return [activity.start] * activity.count
    if activity.pattern == "dos":
        raise BadPattern("dos activities are generated by the security model")
    out: list[float] = []
    if activity.rate == 0 or activity.count == 0:
        return out
    t = activity.start
    limit = math.inf if activity.count is None else activity.count
    mean_gap = 1.0 / activity.rate
    while len(out) < limit:
        t += float(rng.gen.exponential(mean_gap))
        if t > activity.end:
            break
        out.append(t)
    return out


def generate(engine, activity: Activity, submit: Callable[[int, float], None]) -> list[float]:
    """Schedule ``submit(index, time)`` at every arrival of ``activity``."""
    times = arrival_times(activity, engine.rng(f"activity:{activity.id}"))
    for i, t in enumerate(times):
        engine.schedule(t, activity.id, "arrival", source=activity.id, info=str(i),
                        action=lambda ev, i=i, t=t: submit(i, t))
    return times


# --------------------------------------------------------------------------
# schedulers


class Scheduler:
    """Baseline scheduler: jobs wait in one FIFO queue and start on the
    least-loaded operational PU with a free slot (ties by PU id).

    The scheduler subscribes to the monitor for its PUs.  A job lost to a
    crash (or a timeout) is re-queued while its retry budget lasts when
    ``reschedule`` is on, and marked failed otherwise.  ``max_retries < 0``
    means unlimited retries.
    """

    kind = "scheduler"

    def __init__(
        self,
        grid: Grid,
        monitor: Monitor,
        sid: str = "sched",
        pus: Iterable[str] | None = None,
        reschedule: bool = True,
        max_retries: int = 3,
        checkpointer: Any = None,
    ):
        self.id = sid
        self.grid = grid
        self.engine = grid.engine
        self.metrics = grid.metrics
        self.monitor = monitor
        self.pu_ids = sorted(pus) if pus is not None else sorted(grid.pus)
        for p in self.pu_ids:
            grid.component(p)
        self.reschedule = reschedule
        self.max_retries = max_retries
        self.checkpointer = checkpointer
        self.center = None
        self.state = OPERATIONAL
        self.permanent_down = False
        self.byzantine_pending = False
        self.queue: list[Job] = []
        self.jobs: dict[str, Job] = {}
        self.watches: dict[str, Any] = {}
        self.listeners: list[Callable[[Job], None]] = []
        grid.register(self)
        monitor.subscribe(sid, self.on_notice, components=self.pu_ids)

    # -- submission ---------------------------------------------------------

    def submit_job(self, job: Job) -> None:
        if job.state != JobState.CREATED:
            raise IllegalTransition(f"job {job.id} was already submitted ({job.state.value})")
        job.transition(JobState.QUEUED)
        job.submitted_at = self.engine.now
        self.jobs[job.id] = job
        self.metrics.incr("submitted", self.id)
        self.engine.record("submit", self.id, job.id, f"work={format_float(job.work)}")
        self._arm_watch(job)
        self.queue.append(job)
        self.dispatch()

    def _arm_watch(self, job: Job) -> None:
        if job.timeout is None:
            return
        from .dependsched import watch_timeout

        self.watches[job.id] = watch_timeout(self.engine, job.id, job.timeout, self._on_timeout)

    def _disarm(self, job: Job) -> None:
        watch = self.watches.pop(job.id, None)
        if watch is not None:
            watch.disarm()

    # -- placement ----------------------------------------------------------

    def eligible(self) -> list[str]:
        return [p for p in self.pu_ids if self.grid.pus[p].free_slots > 0]

    def load(self, pu_id: str) -> int:
        return len(self.grid.pus[pu_id].running)

    def choose_pu(self, job: Job, candidates: list[str]) -> str | None:
        if job.pinned is not None:
            return job.pinned if job.pinned in candidates else None
        if not candidates:
            return None
        if self.byzantine_pending:
            self.byzantine_pending = False
            rng = self.engine.rng(f"byzantine:{self.id}")
            pick = candidates[int(rng.gen.integers(len(candidates)))]
            self.engine.record("byzantine", self.id, job.id, f"random placement {pick}")
            return pick
        return min(candidates, key=lambda p: (self.load(p), p))

    def next_job(self, candidates: list[str]) -> tuple[Job, str] | None:
        for job in self.queue:
            pu = self.choose_pu(job, candidates)
            if pu is not None:
                return job, pu
        return None

    def dispatch(self) -> None:
        while self.queue:
            candidates = self.eligible()
            if not candidates:
                return
            pick = self.next_job(candidates)
            if pick is None:
                return
            job, pu = pick
            self.queue.remove(job)
            self._start(job, pu)

    def _start(self, job: Job, pu: str) -> None:
        job.transition(JobState.RUNNING)
        job.pu = pu
        job.result = None
        self.engine.record("place", self.id, job.id, pu)
        self.grid.execute(job, pu, self._on_finish)
        if self.checkpointer is not None:
            self.checkpointer.on_start(job)

    # -- completion and loss -------------------------------------------------

    def _on_finish(self, job: Job) -> None:
        job.transition(JobState.FINISHED)
        job.finished_at = self.engine.now
        self._disarm(job)
        self.metrics.incr("finished", self.id)
        self.engine.record("finish", job.pu or self.id, job.id, str(job.result))
        if job.output_size > 0 and job.output_to is not None:
            self.grid.network.request(job.pu, job.output_to, job.output_size, tag=f"output:{job.id}")
        for cb in self.listeners:
            cb(job)
        self.job_finished(job)
        self.dispatch()

    def job_finished(self, job: Job) -> None:
        """Hook for subclasses."""

    def on_notice(self, notice: Notice) -> None:
        if notice.recovery:
            self.dispatch()
            return
        if notice.fault.kind.name != CRASH:
            return
        for jid in notice.lost:
            job = self.jobs.get(jid)
            if job is not None and job.state == JobState.RUNNING:
                self.lose(job, f"fault={notice.seq}")
        self.pu_lost(notice.component)
        self.dispatch()

    def pu_lost(self, pu_id: str) -> None:
        """Hook for subclasses; called after the jobs lost on ``pu_id`` were handled."""

    def _on_timeout(self, watch) -> None:
        job = self.jobs[watch.job]
        if job.state == JobState.RUNNING:
            pu = self.grid.pus[job.pu]
            if job.id in pu.running:
                self.grid.abort(job.pu, job.id, "timeout")
            self.watches.pop(job.id, None)
            self.lose(job, f"timeout={watch.id}")
            self.dispatch()

    def lose(self, job: Job, cause: str) -> None:
        self._disarm(job)
        if self.checkpointer is not None:
            self.checkpointer.on_stop(job)
        retry_ok = self.max_retries < 0 or job.retries_used < self.max_retries
        if self.reschedule and retry_ok:
            job.transition(JobState.RESCHEDULED)
            job.retries_used += 1
            if self.checkpointer is not None:
                snap = self.checkpointer.latest(job.id)
                job.progress = snap.work_done if snap is not None else 0.0
            else:
                job.progress = 0.0
            self.metrics.incr("rescheduled", self.id)
            self.engine.record("reschedule", self.id, job.id, cause)
            job.transition(JobState.QUEUED)
            self._arm_watch(job)
            self.requeue(job)
        else:
            job.transition(JobState.FAILED)
            self.metrics.incr("failed", self.id)
            self.engine.record("fail", self.id, job.id, cause)
            self.job_failed(job)
            for cb in self.listeners:
                cb(job)

    def requeue(self, job: Job) -> None:
        if job.pinned is not None and not self.grid.pus[job.pinned].operational:
            job.pinned = None
        job.pu = None
        self.queue.append(job)

    def job_failed(self, job: Job) -> None:
        """Hook for subclasses."""

    # -- accounting ---------------------------------------------------------

    def counts(self) -> dict[str, int]:
        m = self.metrics
        return {
            "submitted": int(m.count("submitted", self.id)),
            "finished": int(m.count("finished", self.id)),
            "failed": int(m.count("failed", self.id)),
            "rescheduled": int(m.count("rescheduled", self.id)),
        }
