"""Physical resources: regional centers, processing units, database servers,
links and routers, with a flow-level fair-share network.

Every link splits its capacity equally among the flows crossing it and a
transfer moves at the smallest share along its path.  Rates are
recomputed whenever a flow starts or stops or a fault changes a link, and
the completion events of the flows whose rate changed are re-scheduled.
"""

from __future__ import annotations

import heapq
import math
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Any, Callable

from .engine import Engine, Signal, SimulationError, format_float
from .metrics import MetricsStore

OPERATIONAL = "operational"
CRASHED = "crashed"
RECOVERING = "recovering"


class NoRoute(SimulationError):
    pass


class NoSlot(SimulationError):
    pass


class PuDown(SimulationError):
    pass


class ServerDown(SimulationError):
    pass


class UnknownComponent(SimulationError, KeyError):
    pass


class Denied(SimulationError):
    def __init__(self, message: str, attack: bool = False):
        super().__init__(message)
        self.attack = attack


@dataclass(eq=False)
class Component:
    id: str
    center: str | None = None
    state: str = OPERATIONAL
    permanent_down: bool = False
    byzantine_pending: bool = False

    @property
    def operational(self) -> bool:
        return self.state == OPERATIONAL

    kind = "component"


@dataclass(eq=False)
class _Run:
    job: Any
    started: float
    eid: int
    base: float
    on_finish: Callable[[Any], None] | None


@dataclass(eq=False)
class ProcessingUnit(Component):
    power: float = 1.0
    slots: int = 1
    vo: str | None = None
    memory: float = math.inf
    running: dict[str, _Run] = field(default_factory=dict)

    kind = "pu"

    def __post_init__(self):
        if not self.power > 0:
            raise ValueError(f"PU {self.id}: power must be positive")
        if self.slots < 1:
            raise ValueError(f"PU {self.id}: needs at least one slot")

    @property
    def free_slots(self) -> int:
        return self.slots - len(self.running) if self.operational else 0


@dataclass(eq=False)
class Link(Component):
    a: str = ""
    b: str = ""
    capacity: float = 1e9
    latency: float = 0.0
    loss_fraction: float = 0.0
    lan: bool = False

    kind = "link"

    def __post_init__(self):
        if not self.capacity > 0:
            raise ValueError(f"link {self.id}: capacity must be positive")
        if self.latency < 0:
            raise ValueError(f"link {self.id}: latency must be >= 0")

    @property
    def endpoints(self) -> tuple[str, str]:
        return (self.a, self.b)


@dataclass(eq=False)
class Router(Component):
    kind = "router"


@dataclass(eq=False)
class DatabaseServer(Component):
    base_latency: float = 0.0
    throughput: float = 1e8
    policy: Any = None
    storage: bool = False
    attacks_detected: int = 0
    pending: dict[int, Callable[[str], None] | None] = field(default_factory=dict)

    kind = "db"

    def service_time(self, size: float) -> float:
        return self.base_latency + size / self.throughput


@dataclass(eq=False)
class RegionalCenter:
    id: str
    lan: Link
    processing_units: list[ProcessingUnit] = field(default_factory=list)
    db_servers: list[DatabaseServer] = field(default_factory=list)
    storages: list[DatabaseServer] = field(default_factory=list)
    snapshots: list[Any] = field(default_factory=list)


@dataclass
class DbOp:
    kind: str  # read | write | create | get
    size: float = 0.0
    credential: Any = None
    requester: str = ""
    work: float = 0.0
    memory: float = 0.0


# --------------------------------------------------------------------------
# network


@dataclass(eq=False)
class Transfer:
    id: str
    src: str
    dst: str
    total_bytes: float
    remaining_bytes: float
    path: list[str]
    routers: list[str]
    done: Signal
    rate: float = 0.0
    retries_used: int = 0
    state: str = "latency"  # waiting | latency | active | done | failed | cancelled
    requested_at: float = 0.0
    finished_at: float | None = None
    window: float = 0.0
    last_update: float = 0.0
    stalled_until: float = 0.0
    eid: int | None = None
    on_done: Callable[["Transfer"], None] | None = None
    on_fail: Callable[["Transfer", str], None] | None = None
    duplicate: bool = False
    tag: str = ""

    @property
    def live(self) -> bool:
        return self.state in ("waiting", "latency", "active")


class Network:
    """Flow-level transport over the grid's links.

    ``max_retries`` bounds how often one transfer may be interrupted
    (bytes lost to a fault, or no route available) before it fails;
    a negative value means unlimited.
    """

    def __init__(self, grid: "Grid", max_retries: int = 10, retry_backoff: float = 1.0):
        self.grid = grid
        self.engine = grid.engine
        self.metrics = grid.metrics
        self.max_retries = max_retries
        self.retry_backoff = retry_backoff
        self.transfers: dict[str, Transfer] = {}
        self._live: dict[str, Transfer] = {}
        self._n = 0

    # -- public API ---------------------------------------------------------

    def start_transfer(self, src: str, dst: str, nbytes: float, **kw) -> Transfer:
        """Start a transfer now; raises :class:`NoRoute` when none exists."""
        if nbytes < 0:
            raise ValueError("transfer size must be >= 0")
        path = self.grid.route(src, dst)
        t = self._new(src, dst, nbytes, **kw)
        self._launch(t, path)
        return t

    def request(self, src: str, dst: str, nbytes: float, **kw) -> Transfer:
        """Like :meth:`start_transfer` but waits for a route, retrying every
        ``retry_backoff`` seconds within the retry budget."""
        if nbytes < 0:
            raise ValueError("transfer size must be >= 0")
        t = self._new(src, dst, nbytes, **kw)
        self._try_launch(t)
        return t

    def cancel(self, t: Transfer, reason: str = "cancelled") -> bool:
        if not t.live:
            return False
        self._settle()
        self.engine.cancel(t.eid)
        t.eid = None
        t.state = "cancelled"
        t.finished_at = self.engine.now
        self._live.pop(t.id, None)
        self.engine.record("transfer-cancel", t.src, t.dst, f"{t.id} {reason}")
        self._reflow()
        return True

    def active(self) -> list[Transfer]:
        return list(self._live.values())

    def flow_rates(self) -> dict[str, float]:
        return {t.id: t.rate for t in self._live.values() if t.state == "active"}

    # -- lifecycle ----------------------------------------------------------

    def _new(self, src, dst, nbytes, on_done=None, on_fail=None, tag="") -> Transfer:
        self._n += 1
        tid = f"t{self._n}"
        t = Transfer(
            tid, src, dst, float(nbytes), float(nbytes), [], [],
            Signal(self.engine, tid), requested_at=self.engine.now,
            on_done=on_done, on_fail=on_fail, tag=tag,
        )
        t.done.on_abandon = lambda t=t: self.cancel(t, "abandoned")
        self.transfers[tid] = t
        self._live[tid] = t
        self.metrics.incr("requested_bytes", "net", nbytes)
        self.engine.record("transfer-start", src, dst, f"{tid} bytes={format_float(nbytes)}")
        return t

    def _try_launch(self, t: Transfer) -> None:
        if not t.live:
            return
        try:
            path = self.grid.route(t.src, t.dst)
        except NoRoute:
            t.state = "waiting"
            t.retries_used += 1
            if self._exhausted(t):
                self._fail(t, "no-route")
                return
            t.eid = self.engine.after(
                self.retry_backoff, t.dst, "retry", source=t.src, info=t.id,
                action=lambda ev, t=t: self._try_launch(t),
            )
            return
        self._launch(t, path)

    def _launch(self, t: Transfer, path: list[str]) -> None:
        t.path = list(path)
        t.routers = self.grid.routers_on(path)
        latency = sum(self.grid.links[l].latency for l in path)
        t.state = "latency"
        t.eid = None
        if latency > 0:
            t.eid = self.engine.after(
                latency, t.dst, "propagate", source=t.src, info=t.id,
                action=lambda ev, t=t: self._activate(t),
            )
        else:
            self._activate(t)

    def _activate(self, t: Transfer) -> None:
        self._settle()
        t.eid = None
        t.state = "active"
        t.last_update = self.engine.now
        self._reflow()

    def _flowing(self, t: Transfer) -> bool:
        if t.state != "active" or self.engine.now < t.stalled_until:
            return False
        links = self.grid.links
        routers = self.grid.routers
        return all(links[l].operational for l in t.path) and all(routers[r].operational for r in t.routers)

    def _settle(self) -> None:
        now = self.engine.now
        for t in self._live.values():
            if t.state != "active":
                continue
            if t.rate > 0 and now > t.last_update:
                sent = min(t.remaining_bytes, (now - t.last_update) * t.rate / 8.0)
                t.remaining_bytes -= sent
                t.window += sent
            t.last_update = now

    def _reflow(self) -> None:
        """Recompute every flow's fair-share rate and fix completion events."""
        self._settle()
        flowing = [t for t in self._live.values() if self._flowing(t)]
        counts: dict[str, int] = defaultdict(int)
        for t in flowing:
            for l in t.path:
                counts[l] += 1
        links = self.grid.links
        now = self.engine.now
        moving = {t.id for t in flowing}
        for t in list(self._live.values()):
            if t.state != "active":
                continue
            if t.id in moving:
                rate = min((links[l].capacity / counts[l] for l in t.path), default=math.inf)
            else:
                rate = 0.0
            if rate == t.rate and (t.eid is not None or rate == 0):
                continue
            self.engine.cancel(t.eid)
            t.eid = None
            t.rate = rate
            if rate > 0:
                delay = 0.0 if math.isinf(rate) else t.remaining_bytes * 8.0 / rate
                t.eid = self.engine.schedule(
                    now + delay, t.dst, "completion", source=t.src, info=t.id,
                    action=lambda ev, t=t: self._complete(t),
                )

    def _complete(self, t: Transfer) -> None:
        self._settle()
        t.eid = None
        t.remaining_bytes = 0.0
        t.window = 0.0
        t.rate = 0.0
        t.state = "done"
        t.finished_at = now = self.engine.now
        del self._live[t.id]
        self._reflow()
        duration = now - t.requested_at
        self.metrics.incr("delivered_bytes", "net", t.total_bytes)
        self.metrics.incr("transfers_done", "net")
        self.metrics.observe("transfer_time", "net", now, duration)
        self.engine.record(
            "transfer-done", t.src, t.dst,
            f"{t.id} bytes={format_float(t.total_bytes)} duration={format_float(duration)}",
        )
        if t.duplicate:
            self.metrics.incr("duplicates", "net")
            self.engine.record("duplicate", t.src, t.dst, t.id)
        if t.on_done is not None:
            t.on_done(t)
        t.done.succeed(t)

    def _fail(self, t: Transfer, reason: str) -> None:
        self._settle()
        self.engine.cancel(t.eid)
        t.eid = None
        lost = t.remaining_bytes + t.window
        t.state = "failed"
        t.finished_at = self.engine.now
        t.rate = 0.0
        self._live.pop(t.id, None)
        if lost > 0:
            self._lose(t, lost)
        self.metrics.incr("transfers_failed", "net")
        self.engine.record("transfer-fail", t.src, t.dst, f"{t.id} {reason}")
        self._reflow()
        if t.on_fail is not None:
            t.on_fail(t, reason)
        t.done.succeed(t)

    def _lose(self, t: Transfer, nbytes: float) -> None:
        self.metrics.incr("lost_bytes", "net", nbytes)
        self.engine.record("loss", t.src, t.dst, f"{t.id} bytes={format_float(nbytes)}")

    def _exhausted(self, t: Transfer) -> bool:
        return self.max_retries >= 0 and t.retries_used > self.max_retries

    def _discard(self, t: Transfer, fraction: float) -> None:
        """Drop ``fraction`` of the bytes sent since the last loss; they are re-sent."""
        lost = t.window * fraction
        t.window = 0.0
        t.retries_used += 1
        if lost > 0:
            t.remaining_bytes += lost
            self._lose(t, lost)
        self.engine.cancel(t.eid)
        t.eid = None

    # -- fault hooks --------------------------------------------------------

    def _using(self, component: str) -> list[Transfer]:
        out = []
        for t in self._live.values():
            if t.state == "waiting":
                continue
            if component in t.path or component in t.routers:
                out.append(t)
        return out

    def path_element_down(self, component: str, permanent: bool) -> None:
        self._settle()
        for t in self._using(component):
            if t.state != "active":
                if permanent:
                    self._reroute_or_fail(t)
                continue
            if permanent:
                self._reroute_or_fail(t)
                continue
            self._discard(t, 1.0)
            if self._exhausted(t):
                self._fail(t, "retries-exhausted")
        self._reflow()

    def _reroute_or_fail(self, t: Transfer) -> None:
        try:
            path = self.grid.route(t.src, t.dst)
        except NoRoute:
            self._fail(t, "no-route")
            return
        self._discard(t, 1.0)
        if self._exhausted(t):
            self._fail(t, "retries-exhausted")
            return
        self.engine.record("reroute", t.src, t.dst, f"{t.id} via={'|'.join(path)}")
        if t.state == "latency":
            self._launch(t, path)
        else:
            t.path = list(path)
            t.routers = self.grid.routers_on(path)

    def path_element_up(self, component: str) -> None:
        self._reflow()

    def endpoint_down(self, node: str) -> None:
        self._settle()
        for t in list(self._live.values()):
            if t.src == node or t.dst == node:
                self._fail(t, "endpoint-crash")
        self._reflow()

    def omission(self, component: str, fraction: float) -> None:
        self._settle()
        for t in list(self._live.values()):
            if t.state != "active":
                continue
            if component in t.path or t.src == component or t.dst == component:
                self._discard(t, fraction)
                if self._exhausted(t):
                    self._fail(t, "retries-exhausted")
        self._reflow()

    def stall(self, component: str, delay: float) -> None:
        self._settle()
        until = self.engine.now + delay
        for t in self._using(component):
            if t.state == "latency" and t.eid is not None:
                t.eid = self.engine.postpone(t.eid, delay)
            elif t.state == "active":
                t.stalled_until = max(t.stalled_until, until)
                self.engine.record("delay", component, t.id, format_float(delay))
                self.engine.cancel(t.eid)
                t.eid = None
                self.engine.schedule(until, t.dst, "unstall", source=component, info=t.id,
                                     action=lambda ev: self._reflow())
        self._reflow()

    def mark_duplicate(self, link: str) -> bool:
        for t in self._using(link):
            if t.state == "active" and not t.duplicate:
                t.duplicate = True
                return True
        return False


# --------------------------------------------------------------------------
# the modeled system


class Grid:
    """All physical resources of one simulated system, plus the network."""

    def __init__(
        self,
        engine: Engine,
        metrics: MetricsStore | None = None,
        transfer_retries: int = 10,
        retry_backoff: float = 1.0,
    ):
        self.engine = engine
        self.metrics = metrics if metrics is not None else MetricsStore()
        self.centers: dict[str, RegionalCenter] = {}
        self.pus: dict[str, ProcessingUnit] = {}
        self.links: dict[str, Link] = {}
        self.routers: dict[str, Router] = {}
        self.dbs: dict[str, DatabaseServer] = {}
        self.components: dict[str, Any] = {}
        self.security: Any = None
        self.network = Network(self, transfer_retries, retry_backoff)
        self._routes: dict[tuple[str, str], tuple[str, ...] | None] = {}
        engine.is_up = self.is_up

    # -- construction -------------------------------------------------------

    def _add(self, comp):
        if comp.id in self.components or comp.id in self.centers:
            raise ValueError(f"duplicate component id {comp.id!r}")
        self.components[comp.id] = comp
        return comp

    def register(self, comp) -> None:
        """Register a non-physical component (e.g. a scheduler) by id."""
        self._add(comp)

    def add_center(self, cid: str, lan_capacity: float = 1e9, lan_latency: float = 0.0) -> RegionalCenter:
        if cid in self.centers or cid in self.components:
            raise ValueError(f"duplicate component id {cid!r}")
        lan = Link(f"{cid}.lan", center=cid, a=cid, b=cid, capacity=lan_capacity,
                   latency=lan_latency, lan=True)
        center = RegionalCenter(cid, lan)
        self.centers[cid] = center
        self.links[lan.id] = self._add(lan)
        return center

    def add_pu(self, pid: str, center: str, power: float, slots: int = 1,
               vo: str | None = None, memory: float = math.inf) -> ProcessingUnit:
        pu = ProcessingUnit(pid, center=self._center(center).id, power=power, slots=slots, vo=vo, memory=memory)
        self.pus[pid] = self._add(pu)
        self.centers[center].processing_units.append(pu)
        return pu

    def add_db(self, did: str, center: str, base_latency: float = 0.0,
               throughput: float = 1e8, storage: bool = False) -> DatabaseServer:
        if not throughput > 0:
            raise ValueError(f"db {did}: throughput must be positive")
        db = DatabaseServer(did, center=self._center(center).id, base_latency=base_latency,
                            throughput=throughput, storage=storage)
        self.dbs[did] = self._add(db)
        c = self.centers[center]
        (c.storages if storage else c.db_servers).append(db)
        return db

    def add_router(self, rid: str) -> Router:
        r = Router(rid)
        self.routers[rid] = self._add(r)
        return r

    def add_link(self, lid: str, a: str, b: str, capacity: float, latency: float = 0.0) -> Link:
        for end in (a, b):
            if end not in self.centers and end not in self.routers:
                raise UnknownComponent(f"link {lid}: endpoint {end!r} is neither a center nor a router")
        link = Link(lid, a=a, b=b, capacity=capacity, latency=latency)
        self.links[lid] = self._add(link)
        self.topology_changed()
        return link

    def _center(self, cid: str) -> RegionalCenter:
        try:
            return self.centers[cid]
        except KeyError:
            raise UnknownComponent(f"unknown center {cid!r}") from None

    def component(self, cid: str):
        try:
            return self.components[cid]
        except KeyError:
            raise UnknownComponent(f"unknown component {cid!r}") from None

    def is_up(self, cid: str) -> bool:
        comp = self.components.get(cid)
        return comp is None or getattr(comp, "state", OPERATIONAL) == OPERATIONAL

    def center_of(self, node: str) -> str:
        if node in self.centers:
            return node
        comp = self.component(node)
        if comp.center is None:
            raise UnknownComponent(f"{node!r} is not attached to a center")
        return comp.center

    # -- routing ------------------------------------------------------------

    def topology_changed(self) -> None:
        self._routes.clear()

    def route(self, src: str, dst: str) -> list[str]:
        """Fewest-link path over operational links and routers.

        Ties between equally short paths go to the lexicographically
        smallest sequence of link ids.  Centers are path endpoints only.
        """
        cs, cd = self.center_of(src), self.center_of(dst)
        if src == dst:
            return []
        lan_s, lan_d = self.centers[cs].lan, self.centers[cd].lan
        if cs == cd:
            if not lan_s.operational:
                raise NoRoute(f"{src} -> {dst}: LAN {lan_s.id} is down")
            return [lan_s.id]
        key = (cs, cd)
        if key not in self._routes:
            self._routes[key] = self._wan_path(cs, cd)
        wan = self._routes[key]
        if wan is None or not lan_s.operational or not lan_d.operational:
            raise NoRoute(f"no operational path from {src} to {dst}")
        return [lan_s.id, *wan, lan_d.id]

    def _wan_path(self, cs: str, cd: str) -> tuple[str, ...] | None:
        adj: dict[str, list[tuple[str, str]]] = defaultdict(list)
        for link in self.links.values():
            if link.lan or not link.operational:
                continue
            if any(e in self.routers and not self.routers[e].operational for e in link.endpoints):
                continue
            adj[link.a].append((link.id, link.b))
            adj[link.b].append((link.id, link.a))
        best: dict[str, tuple[int, tuple[str, ...]]] = {cs: (0, ())}
        heap: list[tuple[int, tuple[str, ...], str]] = [(0, (), cs)]
        while heap:
            n, path, node = heapq.heappop(heap)
            if best.get(node) != (n, path):
                continue
            if node == cd:
                return path
            if node != cs and node in self.centers:
                continue  # no transit through centers
            for lid, nxt in adj[node]:
                cand = (n + 1, path + (lid,))
                if nxt not in best or cand < best[nxt]:
                    best[nxt] = cand
                    heapq.heappush(heap, (cand[0], cand[1], nxt))
        return None

    def routers_on(self, path: list[str]) -> list[str]:
        out = []
        for lid in path:
            for end in self.links[lid].endpoints:
                if end in self.routers and end not in out:
                    out.append(end)
        return out

    def path_latency(self, path: list[str]) -> float:
        return sum(self.links[l].latency for l in path)

    def nominal_transfer_time(self, src: str, dst: str, nbytes: float) -> float:
        """Transfer time if the flow were alone on its path (planning estimate)."""
        if src == dst:
            return 0.0
        path = self.route(src, dst)
        cap = min(self.links[l].capacity for l in path)
        return self.path_latency(path) + nbytes * 8.0 / cap

    # -- CPU ----------------------------------------------------------------

    def execute(self, job, pu_id: str, on_finish: Callable[[Any], None] | None = None) -> int:
        """Run ``job`` in a free slot of ``pu_id``; returns the completion event id."""
        pu = self.pus[pu_id]
        if not pu.operational:
            raise PuDown(f"{pu_id} is {pu.state}")
        if len(pu.running) >= pu.slots:
            raise NoSlot(f"{pu_id} has no free slot")
        remaining = max(job.work - job.progress, 0.0)
        eid = self.engine.after(
            remaining / pu.power, job.id, "completion", source=pu_id,
            action=lambda ev, pu=pu, jid=job.id: self._job_done(pu, jid),
        )
        pu.running[job.id] = _Run(job, self.engine.now, eid, job.progress, on_finish)
        self.engine.record("start", pu_id, job.id, f"work={format_float(remaining)}")
        return eid

    def _job_done(self, pu: ProcessingUnit, job_id: str) -> None:
        run = pu.running.pop(job_id)
        job = run.job
        job.progress = job.work
        if pu.byzantine_pending:
            pu.byzantine_pending = False
            job.result = f"corrupt:{job.id}"
        elif job.result is None:
            job.result = job.expected_result
        if run.on_finish is not None:
            run.on_finish(job)

    def work_done(self, pu_id: str, job_id: str) -> float:
        pu = self.pus[pu_id]
        run = pu.running[job_id]
        done = run.base + max(self.engine.now - run.started, 0.0) * pu.power
        return min(done, run.job.work)

    def abort(self, pu_id: str, job_id: str, reason: str):
        """Stop a running job; its completion event is cancelled."""
        pu = self.pus[pu_id]
        run = pu.running.pop(job_id)
        self.engine.cancel(run.eid)
        self.engine.record("interrupt", pu_id, job_id, reason)
        return run.job

    # -- database servers ---------------------------------------------------

    def db_op(self, server_id: str, op: DbOp, on_done: Callable[[str], None] | None = None) -> float:
        """Serve one database operation; returns its service delay.

        Raises :class:`ServerDown` or :class:`Denied`.  With ``on_done``
        the completion is simulated and ``on_done(value)`` is called when
        the operation finishes.
        """
        srv = self.dbs[server_id]
        if not srv.operational:
            raise ServerDown(f"{server_id} is {srv.state}")
        self.engine.record("dbop", op.requester, server_id, f"{op.kind} size={format_float(op.size)}")
        if self.security is not None and srv.policy is not None:
            allowed, attack = self.security.check_db(srv, op)
            if not allowed:
                subject = getattr(op.credential, "subject", "-")
                self.engine.record("deny", server_id, op.requester, f"{op.kind} subject={subject}")
                if attack:
                    srv.attacks_detected += 1
                    self.metrics.incr("attacks_detected", server_id)
                    self.engine.record("attack", op.requester, server_id, op.kind)
                raise Denied(f"{op.kind} on {server_id} denied", attack)
        delay = srv.service_time(op.size)
        value = "ok"
        if op.kind in ("read", "get") and srv.byzantine_pending:
            srv.byzantine_pending = False
            value = "wrong-value"
        self.metrics.incr("db_ops", server_id)
        if on_done is not None:
            holder: list[int] = []

            def finish(ev, holder=holder, value=value):
                srv.pending.pop(holder[0], None)
                on_done(value)

            eid = self.engine.after(delay, op.requester or server_id, "completion",
                                    source=server_id, info=op.kind, action=finish)
            holder.append(eid)
            srv.pending[eid] = on_done
        return delay

    # -- fault semantics ----------------------------------------------------

    def crash(self, cid: str, permanent: bool) -> list[str]:
        """Apply a crash; returns the ids of jobs that were stopped."""
        comp = self.component(cid)
        comp.state = CRASHED
        comp.permanent_down = permanent
        lost: list[str] = []
        if isinstance(comp, ProcessingUnit):
            for jid in sorted(comp.running):
                self.abort(cid, jid, "crash")
                lost.append(jid)
            self.network.endpoint_down(cid)
        elif isinstance(comp, DatabaseServer):
            for eid in sorted(comp.pending):
                self.engine.cancel(eid)
                self.engine.record("interrupt", cid, str(eid), "crash")
            comp.pending.clear()
            self.network.endpoint_down(cid)
        elif isinstance(comp, (Link, Router)):
            self.topology_changed()
            self.network.path_element_down(cid, permanent)
        for proc in self.engine.processes_of(cid):
            self.engine.interrupt(proc.id, "crash")
        return lost

    def recover(self, cid: str) -> None:
        comp = self.component(cid)
        comp.state = OPERATIONAL
        if isinstance(comp, (Link, Router)):
            self.topology_changed()
            self.network.path_element_up(cid)

    def omission(self, cid: str, fraction: float) -> None:
        comp = self.component(cid)
        if isinstance(comp, Link):
            comp.loss_fraction = fraction
        self.network.omission(cid, fraction)

    def delay(self, cid: str, delay: float) -> None:
        """Postpone the termination events of the component's pending work."""
        comp = self.component(cid)
        if isinstance(comp, ProcessingUnit):
            for jid in sorted(comp.running):
                run = comp.running[jid]
                run.eid = self.engine.postpone(run.eid, delay)
                run.started += delay
                self.engine.record("delay", cid, jid, format_float(delay))
        elif isinstance(comp, DatabaseServer):
            for eid in sorted(comp.pending):
                cb = comp.pending.pop(eid)
                new = self.engine.postpone(eid, delay)
                if new is not None:
                    comp.pending[new] = cb
                    self.engine.record("delay", cid, str(new), format_float(delay))
        elif isinstance(comp, (Link, Router)):
            self.network.stall(cid, delay)

    def byzantine(self, cid: str, rng) -> str:
        """Apply one arbitrary-but-legal perturbation; returns what was done."""
        comp = self.component(cid)
        if isinstance(comp, ProcessingUnit):
            running = sorted(comp.running)
            if running:
                jid = running[int(rng.gen.integers(len(running)))]
                comp.running[jid].job.result = f"corrupt:{jid}"
                return f"corrupt-result {jid}"
            comp.byzantine_pending = True
            return "corrupt-next-result"
        if isinstance(comp, DatabaseServer):
            comp.byzantine_pending = True
            return "wrong-value"
        if isinstance(comp, Link):
            if self.network.mark_duplicate(cid):
                return "duplicate-delivery"
            return "no-traffic"
        comp.byzantine_pending = True
        return "erroneous-decision"
