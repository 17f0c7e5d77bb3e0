"""Fault injection and the monitoring component.

Faults reach the system either from per-component profiles (an MTTF
coupled with a distribution family) or from the Byzantine storm, which
hits random components without any user-given rate.  Every injection goes
through :class:`Monitor`, which applies the state update first and then
notifies the matching subscribers at the same simulated time.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

from .engine import BadParams, Distribution, SeededRng, SimulationError, sample
from .resources import (
    OPERATIONAL,
    DatabaseServer,
    Grid,
    Link,
    ProcessingUnit,
    Router,
)

CRASH = "crash"
OMISSION = "omission"
TIMING = "timing"
BYZANTINE = "byzantine"
FAULT_KINDS = (CRASH, OMISSION, TIMING, BYZANTINE)

DEFAULT_STORM_RATE = 1.0  # events per 1e4 simulated seconds
STORM_PERIOD = 1e4


class AlreadyDown(SimulationError):
    pass


class PermanentlyDown(SimulationError):
    pass


@dataclass(frozen=True)
class FaultKind:
    name: str
    loss_fraction: float = 1.0
    extra_delay: Distribution | None = None

    def __post_init__(self):
        if self.name not in FAULT_KINDS:
            raise BadParams(f"unknown fault kind {self.name!r}")
        if self.name == OMISSION and not 0 < self.loss_fraction <= 1:
            raise BadParams("omission loss_fraction must lie in (0, 1]")
        if self.name == TIMING and self.extra_delay is None:
            raise BadParams("timing faults need an extra_delay distribution")

    @classmethod
    def crash(cls) -> "FaultKind":
        return cls(CRASH)

    @classmethod
    def omission(cls, loss_fraction: float) -> "FaultKind":
        return cls(OMISSION, loss_fraction=loss_fraction)

    @classmethod
    def timing(cls, extra_delay: Distribution | float) -> "FaultKind":
        if not isinstance(extra_delay, Distribution):
            extra_delay = Distribution.uniform(float(extra_delay), float(extra_delay))
        return cls(TIMING, extra_delay=extra_delay)

    @classmethod
    def byzantine(cls) -> "FaultKind":
        return cls(BYZANTINE)

    def __str__(self) -> str:
        if self.name == OMISSION:
            return f"omission({self.loss_fraction:g})"
        return self.name


@dataclass
class FaultProfile:
    """Stochastic failure description of one component.

    The inter-fault time distribution has mean ``mttf`` (see
    :meth:`Distribution.with_mean`); ``mttf = inf`` means the component
    never fails.  Transient crashes need an ``mttr``.
    """

    component: str
    mttf: float
    kind: FaultKind = field(default_factory=FaultKind.crash)
    permanent: bool = False
    family: str = "exponential"
    sigma: float | None = None
    p: float | None = None
    mttr: float | None = None
    mttr_family: str = "exponential"

    def __post_init__(self):
        if not self.mttf > 0:
            raise BadParams(f"{self.component}: mttf must be positive")
        if self.permanent and self.mttr is not None:
            raise BadParams(f"{self.component}: a permanent fault has no mttr")
        if self.mttr is not None and not (self.mttr > 0 and math.isfinite(self.mttr)):
            raise BadParams(f"{self.component}: mttr must be positive and finite")
        if self.kind.name == CRASH and not self.permanent and self.mttr is None:
            raise BadParams(f"{self.component}: a transient crash needs an mttr")
        if math.isfinite(self.mttf):
            self.dist  # validate the family eagerly

    @property
    def dist(self) -> Distribution:
        return Distribution.with_mean(self.family, self.mttf, self.sigma, self.p)

    @property
    def mttr_dist(self) -> Distribution | None:
        if self.mttr is None:
            return None
        return Distribution.with_mean(self.mttr_family, self.mttr)


@dataclass(frozen=True)
class FaultEvent:
    time: float
    component: str
    kind: FaultKind
    permanent: bool


@dataclass(frozen=True)
class Notice:
    """What a subscriber receives: a fault, or the end of one."""

    fault: FaultEvent
    recovery: bool = False
    lost: tuple[str, ...] = ()
    center: str | None = None
    seq: int = 0

    @property
    def component(self) -> str:
        return self.fault.component


@dataclass
class MonitorSubscription:
    subscriber: str
    callback: Callable[[Notice], None]
    components: frozenset[str] = frozenset()
    kinds: frozenset[str] = frozenset()
    centers: frozenset[str] = frozenset()

    def matches(self, notice: Notice) -> bool:
        if self.components and notice.component not in self.components:
            return False
        if self.centers and notice.center not in self.centers:
            return False
        if self.kinds:
            kind = "recovery" if notice.recovery else notice.fault.kind.name
            if kind not in self.kinds:
                return False
        return True


def draw_interval(rng: SeededRng, dist: Distribution) -> float:
    """Sample a strictly positive duration (non-positive draws are redrawn)."""
    for _ in range(1000):
        x = sample(rng, dist)
        if x > 0:
            return x
    raise BadParams(f"{dist} keeps producing non-positive durations")


def _faultable(comp, kind: str) -> bool:
    if isinstance(comp, (ProcessingUnit, DatabaseServer, Link, Router)):
        return True
    return kind == BYZANTINE


class Monitor:
    """Receives fault events, updates the system state, informs subscribers."""

    def __init__(self, grid: Grid):
        self.grid = grid
        self.engine = grid.engine
        self._subs: dict[int, MonitorSubscription] = {}
        self._n = 0

    def subscribe(
        self,
        subscriber: str,
        callback: Callable[[Notice], None],
        components=(),
        kinds=(),
        centers=(),
    ) -> int:
        self._n += 1
        self._subs[self._n] = MonitorSubscription(
            subscriber, callback, frozenset(components), frozenset(kinds), frozenset(centers)
        )
        return self._n

    def unsubscribe(self, sid: int) -> bool:
        return self._subs.pop(sid, None) is not None

    def dispatch(self, fault: FaultEvent, rng: SeededRng) -> Notice:
        """Apply the state update for ``fault``, then schedule notifications."""
        grid = self.grid
        cid = fault.component
        kind = fault.kind
        lost: tuple[str, ...] = ()
        if kind.name == CRASH:
            lost = tuple(grid.crash(cid, fault.permanent))
        elif kind.name == OMISSION:
            grid.omission(cid, kind.loss_fraction)
        elif kind.name == TIMING:
            grid.delay(cid, draw_interval(rng, kind.extra_delay))
        else:
            what = grid.byzantine(cid, rng)
            self.engine.record("byzantine", "monitor", cid, what)
        notice = Notice(fault, False, lost, self._center(cid), self.engine._current)
        self._notify(notice)
        return notice

    def dispatch_recovery(self, fault: FaultEvent) -> Notice:
        notice = Notice(fault, True, (), self._center(fault.component), self.engine._current)
        self._notify(notice)
        return notice

    def _center(self, cid: str) -> str | None:
        return getattr(self.grid.components.get(cid), "center", None)

    def _notify(self, notice: Notice) -> None:
        what = "recovery" if notice.recovery else str(notice.fault.kind)
        info = f"{notice.component} {what} fault={notice.seq}"
        for sub in list(self._subs.values()):
            if sub.matches(notice):
                self.engine.schedule(
                    self.engine.now, sub.subscriber, "notify", notice,
                    source="monitor", info=info,
                    action=lambda ev, cb=sub.callback, n=notice: cb(n),
                )


class FaultInjector:
    """Drives fault profiles, direct injections, recoveries and the storm."""

    def __init__(self, grid: Grid, monitor: Monitor):
        self.grid = grid
        self.monitor = monitor
        self.engine = grid.engine
        self.profiles: list[FaultProfile] = []
        self._active: dict[str, FaultEvent] = {}
        self._storm_event: int | None = None
        self.storm_rate = 0.0

    # -- profiles -----------------------------------------------------------

    def attach_profile(self, profile: FaultProfile) -> None:
        comp = self.grid.component(profile.component)
        if not _faultable(comp, profile.kind.name):
            raise BadParams(f"{profile.component} cannot suffer {profile.kind.name} faults")
        self.profiles.append(profile)
        if math.isinf(profile.mttf):
            return
        rng = self.engine.rng(f"fault:{profile.component}")
        self._arm(profile, rng, self.engine.now)

    def _arm(self, profile: FaultProfile, rng: SeededRng, start: float) -> None:
        when = start + draw_interval(rng, profile.dist)
        self.engine.schedule(
            when, profile.component, "timer", source="injector",
            info=f"fault {profile.kind}",
            action=lambda ev: self._fire(profile, rng),
        )

    def _fire(self, profile: FaultProfile, rng: SeededRng) -> None:
        cid = profile.component
        comp = self.grid.component(cid)
        if comp.state != OPERATIONAL:
            self.engine.record("skip", "injector", cid, f"{profile.kind} target down")
            if not comp.permanent_down:
                self._arm(profile, rng, self.engine.now)
            return
        self._apply(cid, profile.kind, profile.permanent, rng)
        if profile.permanent:
            return
        if profile.mttr is not None:
            end = self.engine.now + draw_interval(rng, profile.mttr_dist)
            self.engine.schedule(
                end, cid, "timer", source="injector", info="recovery",
                action=lambda ev: self._end_fault(profile, rng),
            )
        else:
            self._arm(profile, rng, self.engine.now)

    def _end_fault(self, profile: FaultProfile, rng: SeededRng) -> None:
        if self._active.get(profile.component) is not None:
            self.recover(profile.component)
        self._arm(profile, rng, self.engine.now)

    # -- direct control -----------------------------------------------------

    def inject(self, component: str, kind: FaultKind, permanent: bool = False) -> FaultEvent:
        comp = self.grid.component(component)
        if comp.state != OPERATIONAL:
            raise AlreadyDown(f"{component} is {comp.state}")
        if not _faultable(comp, kind.name):
            raise BadParams(f"{component} cannot suffer {kind.name} faults")
        return self._apply(component, kind, permanent, self.engine.rng(f"fault:{component}"))

    def _apply(self, cid: str, kind: FaultKind, permanent: bool, rng: SeededRng) -> FaultEvent:
        fault = FaultEvent(self.engine.now, cid, kind, permanent)
        self.engine.record("fault", "injector", cid, f"{kind} {'permanent' if permanent else 'transient'}")
        self.grid.metrics.incr("faults", cid)
        if kind.name != BYZANTINE:
            self._active[cid] = fault
        self.monitor.dispatch(fault, rng)
        return fault

    def recover(self, component: str) -> None:
        comp = self.grid.component(component)
        if comp.permanent_down:
            raise PermanentlyDown(f"{component} crashed permanently")
        fault = self._active.pop(component, None)
        if fault is None:
            return
        if fault.kind.name == OMISSION and isinstance(comp, Link):
            comp.loss_fraction = 0.0
        if fault.kind.name == CRASH:
            self.grid.recover(component)
        self.engine.record("recovery", "injector", component, str(fault.kind))
        self.monitor.dispatch_recovery(fault)

    # -- storm --------------------------------------------------------------

    def byzantine_storm(self, enable: bool, mean_rate: float | None = None) -> None:
        """Inject transient Byzantine faults into uniformly random components.

        ``mean_rate`` is in events per 1e4 simulated seconds.
        """
        self.engine.cancel(self._storm_event)
        self._storm_event = None
        if not enable:
            self.storm_rate = 0.0
            return
        rate = DEFAULT_STORM_RATE if mean_rate is None else mean_rate
        if rate < 0:
            raise BadParams("storm rate must be >= 0")
        self.storm_rate = rate
        if rate == 0:
            return
        self._storm_tick(self.engine.rng("storm"), schedule_only=True)

    def _storm_tick(self, rng: SeededRng, schedule_only: bool = False) -> None:
        if not schedule_only:
            ids = sorted(self.grid.components)
            cid = ids[int(rng.gen.integers(len(ids)))]
            if self.grid.components[cid].state != OPERATIONAL:
                self.engine.record("skip", "storm", cid, "byzantine target down")
            else:
                self._apply(cid, FaultKind.byzantine(), False, rng)
        gap = float(rng.gen.exponential(STORM_PERIOD / self.storm_rate))
        self._storm_event = self.engine.after(
            gap, "storm", "timer", source="injector", info="storm",
            action=lambda ev: self._storm_tick(rng),
        )
