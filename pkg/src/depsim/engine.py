"""Discrete-event core: clock, future event list, processes and random streams.

Events are ordered by ``(time, seq)`` where ``seq`` is assigned when the
event is scheduled, so simultaneous events run in scheduling order and a
run is fully determined by the scenario and the root seed.
"""

from __future__ import annotations

import hashlib
import heapq
import math
from dataclasses import dataclass, field
from typing import Any, Callable, Generator, Iterable, Iterator

import numpy as np

__all__ = [
    "BadParams",
    "Distribution",
    "Engine",
    "Event",
    "Hold",
    "Interrupt",
    "OwnerDown",
    "PastTime",
    "RunStats",
    "SeededRng",
    "Signal",
    "SimProcess",
    "SimulationError",
    "TRACE_HEADER",
    "format_float",
    "sample",
]

TRACE_HEADER = "seq,time,kind,source,target,info"


class SimulationError(Exception):
    """Base class for errors raised by the simulator."""


class PastTime(SimulationError):
    pass


class OwnerDown(SimulationError):
    pass


class BadParams(SimulationError, ValueError):
    pass


def format_float(value: float) -> str:
    """Print a float with exactly nine significant digits."""
    if math.isinf(value):
        return "inf" if value > 0 else "-inf"
    if value == 0:
        value = 0.0  # drop the sign of -0.0
    return format(value, "#.9g")


@dataclass(eq=False)
class Event:
    seq: int
    time: float
    target: str
    kind: str
    payload: Any = None
    source: str = ""
    info: str = ""
    action: Callable[["Event"], None] | None = field(default=None, repr=False)
    cancelled: bool = False
    fired: bool = False

    def __lt__(self, other: "Event") -> bool:
        return (self.time, self.seq) < (other.time, other.seq)


@dataclass(frozen=True)
class RunStats:
    events_processed: int
    final_time: float


# --------------------------------------------------------------------------
# random numbers


class SeededRng:
    """Deterministic generator for one named stream under a root seed.

    The stream key is hashed into the seed sequence, so every consumer
    (a fault profile, an activity, ...) draws from its own substream and
    adding a consumer never perturbs the draws of the others.
    """

    def __init__(self, seed: int, key: str = ""):
        if not 0 <= seed < 2**64:
            raise BadParams(f"seed must be a 64-bit unsigned integer, got {seed}")
        self.seed = seed
        self.key = key
        digest = hashlib.sha256(key.encode("utf-8")).digest()
        words = [int.from_bytes(digest[i : i + 4], "little") for i in range(0, 32, 4)]
        entropy = [seed & 0xFFFFFFFF, seed >> 32, *words]
        self.gen = np.random.Generator(np.random.PCG64(np.random.SeedSequence(entropy)))

    def __repr__(self) -> str:
        return f"SeededRng(seed={self.seed}, key={self.key!r})"


_FAMILIES = {
    "exponential": ("mean",),
    "gaussian": ("mean", "sigma"),
    "uniform": ("a", "b"),
    "binomial": ("n", "p"),
    "poisson": ("lam",),
}


@dataclass(frozen=True)
class Distribution:
    family: str
    params: tuple[float, ...]

    def __post_init__(self):
        names = _FAMILIES.get(self.family)
        if names is None:
            raise BadParams(f"unknown distribution family {self.family!r}")
        if len(self.params) != len(names):
            raise BadParams(f"{self.family} takes parameters {names}")
        p = [float(v) for v in self.params]
        if any(math.isnan(v) for v in p):
            raise BadParams("distribution parameters must not be NaN")
        fam = self.family
        if fam == "exponential" and not (p[0] > 0 and math.isfinite(p[0])):
            raise BadParams("exponential mean must be positive and finite")
        if fam == "gaussian" and not (math.isfinite(p[0]) and p[1] >= 0 and math.isfinite(p[1])):
            raise BadParams("gaussian needs a finite mean and sigma >= 0")
        if fam == "uniform" and not (math.isfinite(p[0]) and math.isfinite(p[1]) and p[0] <= p[1]):
            raise BadParams("uniform needs finite a <= b")
        if fam == "binomial" and not (p[0] >= 0 and p[0] == int(p[0]) and 0 <= p[1] <= 1):
            raise BadParams("binomial needs integer n >= 0 and 0 <= p <= 1")
        if fam == "poisson" and not (p[0] >= 0 and math.isfinite(p[0])):
            raise BadParams("poisson rate must be >= 0")

    @classmethod
    def exponential(cls, mean: float) -> "Distribution":
        return cls("exponential", (mean,))

    @classmethod
    def gaussian(cls, mean: float, sigma: float) -> "Distribution":
        return cls("gaussian", (mean, sigma))

    @classmethod
    def uniform(cls, a: float = 0.0, b: float = 1.0) -> "Distribution":
        return cls("uniform", (a, b))

    @classmethod
    def binomial(cls, n: int, p: float) -> "Distribution":
        return cls("binomial", (n, p))

    @classmethod
    def poisson(cls, lam: float) -> "Distribution":
        return cls("poisson", (lam,))

    @classmethod
    def with_mean(
        cls, family: str, mean: float, sigma: float | None = None, p: float | None = None
    ) -> "Distribution":
        """Parameterize ``family`` so that its mean equals ``mean``.

        Used to couple an MTTF (or MTTR) with a distribution family:
        exponential with that mean, uniform on ``[0, 2*mean]``, gaussian
        centred on it with the given sigma (default ``mean / 4``),
        binomial with ``n = round(mean / p)`` (default ``p = 0.5``) and
        poisson with rate ``mean``.
        """
        if not (mean > 0 and math.isfinite(mean)):
            raise BadParams(f"mean must be positive and finite, got {mean}")
        if family == "exponential":
            return cls.exponential(mean)
        if family == "uniform":
            return cls.uniform(0.0, 2.0 * mean)
        if family == "gaussian":
            return cls.gaussian(mean, mean / 4.0 if sigma is None else sigma)
        if family == "binomial":
            prob = 0.5 if p is None else p
            if not 0 < prob <= 1:
                raise BadParams("binomial p must lie in (0, 1]")
            return cls.binomial(max(1, round(mean / prob)), prob)
        if family == "poisson":
            return cls.poisson(mean)
        raise BadParams(f"unknown distribution family {family!r}")

    @property
    def mean(self) -> float:
        p = self.params
        if self.family in ("exponential", "gaussian"):
            return float(p[0])
        if self.family == "uniform":
            return (p[0] + p[1]) / 2.0
        if self.family == "binomial":
            return p[0] * p[1]
        return float(p[0])


def sample(rng: SeededRng, dist: Distribution) -> float:
    """Draw one variate of ``dist`` from ``rng``."""
    g = rng.gen
    p = dist.params
    fam = dist.family
    if fam == "exponential":
        return float(g.exponential(p[0]))
    if fam == "gaussian":
        return float(g.normal(p[0], p[1]))
    if fam == "uniform":
        return float(g.uniform(p[0], p[1])) if p[0] < p[1] else float(p[0])
    if fam == "binomial":
        return float(g.binomial(int(p[0]), p[1]))
    if fam == "poisson":
        return float(g.poisson(p[0]))
    raise BadParams(f"unknown distribution family {fam!r}")  # pragma: no cover


# --------------------------------------------------------------------------
# processes


class Interrupt(Exception):
    """Thrown into a process that was interrupted while waiting."""

    def __init__(self, reason: Any):
        super().__init__(reason)
        self.reason = reason


@dataclass(frozen=True)
class Hold:
    delay: float


class Signal:
    """A one-shot condition that processes can wait on.

    ``on_abandon`` is called when a waiting process is interrupted, so
    the owner of the signal can cancel the work behind it (for instance
    a network transfer nobody waits for anymore).
    """

    def __init__(self, engine: "Engine", name: str = "", on_abandon: Callable[[], None] | None = None):
        self.engine = engine
        self.name = name
        self.on_abandon = on_abandon
        self.triggered = False
        self.value: Any = None
        self._waiters: list[SimProcess] = []

    def succeed(self, value: Any = None) -> None:
        if self.triggered:
            return
        self.triggered = True
        self.value = value
        waiters, self._waiters = self._waiters, []
        for proc in waiters:
            proc._waiting_on = None
            self.engine._schedule_resume(proc, value)


Behavior = Generator[Any, Any, Any]


class SimProcess:
    RUNNABLE = "runnable"
    BLOCKED = "blocked-on-event"
    INTERRUPTED = "interrupted"
    TERMINATED = "terminated"

    def __init__(self, pid: str, owner: str, gen: Behavior):
        self.id = pid
        self.owner = owner
        self.state = self.RUNNABLE
        self._gen = gen
        self._wake: int | None = None
        self._waiting_on: Signal | None = None
        self._interrupt: Any = None
        self._has_interrupt = False
        self.result: Any = None

    def __repr__(self) -> str:
        return f"SimProcess({self.id!r}, owner={self.owner!r}, state={self.state})"


# --------------------------------------------------------------------------
# engine


class Engine:
    """Single-threaded discrete-event executor.

    Parameters
    ----------
    seed : int
        Root seed; every named random stream is derived from it.
    trace : bool
        Keep the executed-event trace in memory (needed for export and
        for the trace-based invariant checks).
    """

    def __init__(self, seed: int = 42, trace: bool = True):
        self.seed = seed
        self.now = 0.0
        self._queue: list[Event] = []
        self._pending: dict[int, Event] = {}
        self._seq = 0
        self._current = 0
        self._streams: dict[str, SeededRng] = {}
        self._procs: dict[str, SimProcess] = {}
        self._nproc = 0
        self.keep_trace = trace
        # rows: (seq, time, kind, source, target, info, is_event)
        self.trace: list[tuple[int, float, str, str, str, str, bool]] = []
        self.events_processed = 0
        self.is_up: Callable[[str], bool] = lambda owner: True
        self._ids: dict[str, int] = {}

    def next_id(self, prefix: str) -> str:
        """Run-local identifier ``prefix1``, ``prefix2``, ..."""
        n = self._ids.get(prefix, 0) + 1
        self._ids[prefix] = n
        return f"{prefix}{n}"

    # -- scheduling ---------------------------------------------------------

    def schedule(
        self,
        time: float,
        target: str,
        kind: str,
        payload: Any = None,
        *,
        action: Callable[[Event], None] | None = None,
        source: str = "",
        info: str = "",
    ) -> int:
        """Enqueue an event and return its id (the sequence number)."""
        if math.isnan(time) or time < self.now:
            raise PastTime(f"cannot schedule at {time!r}, clock is {self.now!r}")
        self._seq += 1
        ev = Event(self._seq, float(time), target, kind, payload, source, info, action)
        heapq.heappush(self._queue, ev)
        self._pending[ev.seq] = ev
        return ev.seq

    def after(self, delay: float, target: str, kind: str, payload: Any = None, **kw) -> int:
        return self.schedule(self.now + delay, target, kind, payload, **kw)

    def cancel(self, event_id: int | None) -> bool:
        if event_id is None:
            return False
        ev = self._pending.pop(event_id, None)
        if ev is None:
            return False
        ev.cancelled = True
        return True

    def pending(self, event_id: int | None) -> Event | None:
        if event_id is None:
            return None
        return self._pending.get(event_id)

    def postpone(self, event_id: int, delay: float) -> int | None:
        """Move a pending event ``delay`` seconds later; returns the new id."""
        ev = self._pending.get(event_id)
        if ev is None:
            return None
        self.cancel(event_id)
        return self.schedule(
            ev.time + delay, ev.target, ev.kind, ev.payload,
            action=ev.action, source=ev.source, info=ev.info,
        )

    def peek(self) -> float:
        self._drop_cancelled()
        return self._queue[0].time if self._queue else math.inf

    def _drop_cancelled(self) -> None:
        q = self._queue
        while q and q[0].cancelled:
            heapq.heappop(q)

    def record(self, kind: str, source: str = "", target: str = "", info: str = "") -> None:
        """Append an annotation row to the trace under the current event."""
        if self.keep_trace:
            self.trace.append((self._current, self.now, kind, source, target, info, False))

    def run_until(self, t_end: float) -> RunStats:
        if t_end < self.now:
            raise PastTime(f"run_until({t_end!r}) is before the clock {self.now!r}")
        processed = 0
        q = self._queue
        while True:
            self._drop_cancelled()
            if not q or q[0].time > t_end:
                break
            ev = heapq.heappop(q)
            del self._pending[ev.seq]
            self.now = ev.time
            self._current = ev.seq
            ev.fired = True
            if self.keep_trace:
                self.trace.append((ev.seq, ev.time, ev.kind, ev.source, ev.target, ev.info, True))
            processed += 1
            if ev.action is not None:
                ev.action(ev)
        if q and math.isfinite(t_end):
            self.now = t_end
        self.events_processed += processed
        return RunStats(processed, self.now)

    # -- random streams -----------------------------------------------------

    def rng(self, key: str) -> SeededRng:
        stream = self._streams.get(key)
        if stream is None:
            stream = self._streams[key] = SeededRng(self.seed, key)
        return stream

    # -- processes ----------------------------------------------------------

    def spawn(self, owner: str, behavior: Behavior, name: str | None = None) -> str:
        if not self.is_up(owner):
            raise OwnerDown(f"owner {owner!r} is not operational")
        self._nproc += 1
        pid = name or f"{owner}/p{self._nproc}"
        if pid in self._procs:
            pid = f"{pid}#{self._nproc}"
        proc = SimProcess(pid, owner, behavior)
        self._procs[pid] = proc
        self._schedule_resume(proc, None)
        return pid

    def process(self, pid: str) -> SimProcess:
        return self._procs[pid]

    def processes_of(self, owner: str) -> list[SimProcess]:
        return [p for p in self._procs.values() if p.owner == owner and p.state != SimProcess.TERMINATED]

    def interrupt(self, pid: str, reason: Any) -> None:
        proc = self._procs[pid]
        if proc.state == SimProcess.TERMINATED:
            return
        if proc._has_interrupt:
            self.record("interrupt-dropped", proc.owner, proc.id, str(reason))
            return
        proc._has_interrupt = True
        proc._interrupt = reason
        proc.state = SimProcess.INTERRUPTED
        self.cancel(proc._wake)
        proc._wake = None
        sig = proc._waiting_on
        if sig is not None:
            proc._waiting_on = None
            if proc in sig._waiters:
                sig._waiters.remove(proc)
            if sig.on_abandon is not None:
                sig.on_abandon()
        self.record("interrupt", proc.owner, proc.id, str(reason))
        proc._wake = self.schedule(
            self.now, proc.id, "resume", source=proc.id, info="interrupt",
            action=lambda ev, p=proc: self._step(p, None),
        )

    def _schedule_resume(self, proc: SimProcess, value: Any, delay: float = 0.0) -> None:
        proc._wake = self.schedule(
            self.now + delay, proc.id, "resume", source=proc.id,
            action=lambda ev, p=proc, v=value: self._step(p, v),
        )

    def _step(self, proc: SimProcess, value: Any) -> None:
        proc._wake = None
        if proc.state == SimProcess.TERMINATED:
            return
        try:
            if proc._has_interrupt:
                reason = proc._interrupt
                proc._has_interrupt = False
                proc._interrupt = None
                proc.state = SimProcess.RUNNABLE
                cmd = proc._gen.throw(Interrupt(reason))
            else:
                proc.state = SimProcess.RUNNABLE
                cmd = proc._gen.send(value)
        except StopIteration as stop:
            proc.state = SimProcess.TERMINATED
            proc.result = stop.value
            return
        except Interrupt:
            proc.state = SimProcess.TERMINATED
            return
        self._block(proc, cmd)

    def _block(self, proc: SimProcess, cmd: Any) -> None:
        if cmd is None:
            cmd = Hold(0.0)
        elif isinstance(cmd, (int, float)):
            cmd = Hold(float(cmd))
        if isinstance(cmd, Hold):
            if cmd.delay < 0 or math.isnan(cmd.delay):
                raise PastTime(f"process {proc.id} asked to hold for {cmd.delay}")
            proc.state = SimProcess.BLOCKED
            self._schedule_resume(proc, None, cmd.delay)
        elif isinstance(cmd, Signal):
            proc.state = SimProcess.BLOCKED
            if cmd.triggered:
                self._schedule_resume(proc, cmd.value)
            else:
                proc._waiting_on = cmd
                cmd._waiters.append(proc)
        else:
            raise SimulationError(f"process {proc.id} yielded unsupported {cmd!r}")

    # -- trace export -------------------------------------------------------

    def trace_lines(self) -> Iterator[str]:
        yield TRACE_HEADER
        for seq, t, kind, src, tgt, info, _ in self.trace:
            yield ",".join((str(seq), format_float(t), _csv(kind), _csv(src), _csv(tgt), _csv(info)))

    def executed_events(self) -> Iterable[tuple[int, float, str, str, str, str, bool]]:
        return (row for row in self.trace if row[6])


def _csv(text: str) -> str:
    if any(c in text for c in ',"\n\r'):
        return '"' + text.replace('"', '""') + '"'
    return text
