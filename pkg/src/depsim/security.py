"""Virtual organizations, certificates, authentication, access policies,
message protection cost, traffic filtering and attack generation.

Cryptography is cost modeling only: no key material exists.  Sessions
cost time to set up and protected messages cost bytes and CPU time.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from fnmatch import fnmatchcase
from typing import Callable, Iterable

from .engine import SimulationError, format_float
from .resources import DbOp, Denied, Grid, NoRoute, ProcessingUnit, ServerDown, Transfer
from .workload import arrival_times, Activity

VALID = "valid"
EXPIRED = "expired"
NOT_YET_VALID = "not-yet-valid"
UNKNOWN_ISSUER = "unknown-issuer"
REVOKED = "revoked"

MUTUAL = "mutual"
UNIDIRECTIONAL = "unidirectional"

PERMISSION_OF = {"read": "r", "get": "r", "write": "w", "create": "w", "execute": "x"}


class DuplicateVo(SimulationError):
    pass


class UnknownVo(SimulationError):
    pass


class AuthFailed(SimulationError):
    def __init__(self, reason: str):
        super().__init__(reason)
        self.reason = reason


class NoSession(SimulationError):
    pass


@dataclass
class VirtualOrganization:
    name: str
    components: set[str] = field(default_factory=set)
    subjects: set[str] = field(default_factory=set)


@dataclass(frozen=True)
class Certificate:
    subject: str
    issuer: str
    not_before: float = 0.0
    not_after: float = math.inf
    vos: frozenset[str] = frozenset()
    revoked: bool = False
    proxy_of: str | None = None

    def proxy(self, now: float, lifetime: float) -> "Certificate":
        """Delegated credential with the same VO rights and bounded validity."""
        if not lifetime > 0:
            raise ValueError("proxy lifetime must be positive")
        return replace(
            self, subject=f"{self.subject}/proxy", issuer=self.issuer, not_before=now,
            not_after=min(now + lifetime, self.not_after), proxy_of=self.subject,
        )


def validate_cert(cert: Certificate, at: float, trust: Iterable[str]) -> str:
    """``"valid"`` or the first failing reason."""
    if cert.revoked:
        return REVOKED
    if cert.issuer not in set(trust):
        return UNKNOWN_ISSUER
    if at < cert.not_before:
        return NOT_YET_VALID
    if at > cert.not_after:
        return EXPIRED
    return VALID


@dataclass(frozen=True)
class Session:
    a: str
    b: str
    established_at: float
    mode: str = MUTUAL
    overhead: float = 1.0
    cpu_per_byte: float = 0.0
    open: bool = True

    @property
    def peers(self) -> tuple[str, str]:
        return (self.a, self.b)


@dataclass(frozen=True)
class Protected:
    nbytes: int
    cpu_time: float


@dataclass
class AccessPolicy:
    resource: str
    grants: dict[str, frozenset[str]] = field(default_factory=dict)
    attack_ops: frozenset[str] = frozenset()
    work_caps: dict[str, float] = field(default_factory=dict)
    memory_caps: dict[str, float] = field(default_factory=dict)

    def grant(self, vo: str, perms: str) -> None:
        bad = set(perms) - set("rwx")
        if bad:
            raise ValueError(f"unknown permission letters {''.join(sorted(bad))!r}")
        self.grants[vo] = frozenset(perms)


@dataclass(frozen=True)
class Decision:
    allowed: bool
    attack: bool = False
    reason: str = ""


def authorize(cert: Certificate | None, policy: AccessPolicy | None, action: str,
              work: float = 0.0, memory: float = 0.0) -> Decision:
    """Deny-by-default authorization of ``action`` under ``policy``.

    Attack-classified actions are always denied and flagged.  Otherwise
    some VO of the certificate must hold the action's permission and, if
    that VO has caps, the request must stay within them.
    """
    if policy is None:
        return Decision(False, False, "no-policy")
    if action in policy.attack_ops:
        return Decision(False, True, "attack-classified")
    if cert is None:
        return Decision(False, False, "no-credential")
    perm = PERMISSION_OF.get(action)
    if perm is None:
        return Decision(False, False, f"unknown-action {action}")
    over_cap = False
    for vo in sorted(cert.vos):
        if perm not in policy.grants.get(vo, ()):
            continue
        if work > policy.work_caps.get(vo, math.inf) or memory > policy.memory_caps.get(vo, math.inf):
            over_cap = True
            continue
        return Decision(True, False, vo)
    return Decision(False, False, "over-cap" if over_cap else "no-grant")


@dataclass(frozen=True)
class FilterRule:
    position: int
    src: str = "*"
    dst: str = "*"
    msg_type: str = "*"
    action: str = "deny"

    def __post_init__(self):
        if self.action not in ("allow", "deny"):
            raise ValueError(f"filter action must be allow or deny, not {self.action!r}")

    def matches(self, src: str, dst: str, msg_type: str) -> bool:
        return (fnmatchcase(src, self.src) and fnmatchcase(dst, self.dst)
                and fnmatchcase(msg_type, self.msg_type))


def evaluate(rules: Iterable[FilterRule], src: str, dst: str, msg_type: str) -> str:
    """First matching rule in position order wins; no match allows."""
    for rule in sorted(rules, key=lambda r: r.position):
        if rule.matches(src, dst, msg_type):
            return rule.action
    return "allow"


@dataclass(frozen=True)
class AttackPattern:
    sources: tuple[str, ...]
    target: str
    rate: float
    start: float
    end: float
    kind: str = "dos"
    op: str = "get"
    size: float = 1000.0
    credential: Certificate | None = None

    def __post_init__(self):
        if self.kind != "dos":
            raise ValueError(f"unknown attack kind {self.kind!r}")
        if not self.end >= self.start or self.rate < 0:
            raise ValueError("attack window must satisfy start <= end and rate >= 0")


class SecurityManager:
    """Security state of one grid: VOs, credentials, policies, filters."""

    def __init__(self, grid: Grid, trust: Iterable[str] = ("ca",), handshake_cost: float = 0.0,
                 overhead: float = 1.0, cpu_per_byte: float = 0.0):
        self.grid = grid
        self.engine = grid.engine
        self.metrics = grid.metrics
        self.trust = set(trust)
        self.handshake_cost = handshake_cost
        self.overhead = overhead
        self.cpu_per_byte = cpu_per_byte
        self.vos: dict[str, VirtualOrganization] = {}
        self.certs: dict[str, Certificate] = {}
        self.policies: dict[str, AccessPolicy] = {}
        self.filters: dict[str, list[FilterRule]] = {}
        self.attacks: list[AttackPattern] = []
        grid.security = self

    # -- VOs ----------------------------------------------------------------

    def create_vo(self, name: str, members: Iterable[str] = ()) -> VirtualOrganization:
        if name in self.vos:
            raise DuplicateVo(f"VO {name!r} already exists")
        vo = self.vos[name] = VirtualOrganization(name)
        for m in members:
            self.join_vo(name, m)
        return vo

    def join_vo(self, name: str, member: str) -> None:
        """Add a component id or a certificate subject to a VO."""
        vo = self.vos.get(name)
        if vo is None:
            raise UnknownVo(f"unknown VO {name!r}")
        comp = self.grid.components.get(member)
        if comp is None:
            vo.subjects.add(member)
            return
        vo.components.add(member)
        if isinstance(comp, ProcessingUnit) and comp.vo is None:
            comp.vo = name

    # -- credentials and sessions ---------------------------------------------

    def issue(self, holder: str, subject: str | None = None, issuer: str = "ca",
              not_before: float = 0.0, not_after: float = math.inf,
              vos: Iterable[str] = ()) -> Certificate:
        for v in vos:
            if v not in self.vos:
                raise UnknownVo(f"unknown VO {v!r}")
        cert = Certificate(subject or holder, issuer, not_before, not_after, frozenset(vos))
        self.certs[holder] = cert
        for v in vos:
            self.vos[v].subjects.add(cert.subject)
        return cert

    def revoke(self, holder: str) -> None:
        self.certs[holder] = replace(self.certs[holder], revoked=True)

    def validate(self, cert: Certificate | None) -> str:
        if cert is None:
            return "no-certificate"
        return validate_cert(cert, self.engine.now, self.trust)

    def authenticate(self, a: str, b: str, mode: str = MUTUAL) -> Session:
        """Handshake between ``a`` (initiator) and ``b`` (responder).

        Costs two round trips on the current route plus the configured
        handshake cost; the session is usable from ``established_at``.
        """
        if mode not in (MUTUAL, UNIDIRECTIONAL):
            raise ValueError(f"unknown authentication mode {mode!r}")
        path = self.grid.route(a, b)  # NoRoute propagates
        rtt = 2.0 * self.grid.path_latency(path)
        checks = [b] if mode == UNIDIRECTIONAL else [b, a]
        for who in checks:
            reason = self.validate(self.certs.get(who))
            if reason != VALID:
                self.engine.record("auth-fail", a, b, f"{mode} {who} {reason}")
                raise AuthFailed(reason)
        ready = self.engine.now + 2.0 * rtt + self.handshake_cost
        self.engine.record("auth-ok", a, b, f"{mode} ready={format_float(ready)}")
        return Session(a, b, ready, mode, self.overhead, self.cpu_per_byte)

    def protect_message(self, session: Session | None, nbytes: float) -> Protected:
        if session is None or not session.open:
            raise NoSession("message protection needs an established session")
        cpu = session.cpu_per_byte * nbytes
        for end in session.peers:
            self.metrics.incr("crypto_cpu_s", end, cpu)
        return Protected(int(round(nbytes * session.overhead)), cpu)

    # -- authorization --------------------------------------------------------

    def set_policy(self, policy: AccessPolicy) -> None:
        self.policies[policy.resource] = policy
        comp = self.grid.components.get(policy.resource)
        if comp is not None and hasattr(comp, "policy"):
            comp.policy = policy

    def authorize(self, cert: Certificate | None, resource: str, action: str,
                  work: float = 0.0, memory: float = 0.0) -> Decision:
        return authorize(cert, self.policies.get(resource), action, work, memory)

    def check_db(self, srv, op: DbOp) -> tuple[bool, bool]:
        """Hook used by database servers: ``(allowed, attack)``."""
        policy = self.policies.get(srv.id, srv.policy)
        if op.kind not in policy.attack_ops:
            reason = self.validate(op.credential)
            if reason != VALID:
                return False, False
        d = authorize(op.credential, policy, op.kind, op.work, op.memory)
        return d.allowed, d.attack

    # -- traffic filtering ----------------------------------------------------

    def add_rule(self, component: str, rule: FilterRule) -> None:
        """Install a rule now (statically at load time or during the run)."""
        rules = self.filters.setdefault(component, [])
        rules.append(rule)
        rules.sort(key=lambda r: r.position)
        self.engine.record("filter-rule", "security", component,
                           f"{rule.position} {rule.action} {rule.src}>{rule.dst}:{rule.msg_type}")

    def filter(self, component: str, src: str, dst: str, msg_type: str) -> bool:
        """True if the packet passes ``component``'s rules; drops are recorded."""
        action = evaluate(self.filters.get(component, ()), src, dst, msg_type)
        if action == "deny":
            self.metrics.incr("filtered", component)
            self.engine.record("filter-drop", src, component, f"{dst} {msg_type}")
            return False
        return True

    def admit(self, src: str, dst: str, msg_type: str) -> bool:
        """Check the destination center's rules, then the destination's own."""
        center = self.grid.center_of(dst)
        if center != dst and not self.filter(center, src, dst, msg_type):
            return False
        return self.filter(dst, src, dst, msg_type)

    # -- connections and attacks ----------------------------------------------

    def connect(self, src: str, target: str, op: DbOp,
                on_done: Callable[[str], None] | None = None) -> Transfer:
        """Send a request from ``src`` to database ``target`` and serve it.

        On arrival the packet passes the filters, is counted as a received
        connection and then executed as a database operation.
        """
        self.metrics.track_window("connections_received", target)
        self.metrics.track_window("throughput_bps", target, rate=True)

        def arrived(t: Transfer):
            if not self.admit(src, target, op.kind):
                return
            now = self.engine.now
            self.metrics.bin("connections_received", target, now, 1.0)
            self.metrics.bin("throughput_bps", target, now, t.total_bytes * 8.0)
            try:
                self.grid.db_op(target, op, on_done)
            except (Denied, ServerDown):
                pass

        return self.grid.network.request(src, target, op.size, on_done=arrived,
                                         tag=f"conn:{op.kind}")

    def launch_attack(self, pattern: AttackPattern) -> int:
        """Schedule the attack's connections; returns how many were generated."""
        self.attacks.append(pattern)
        self.metrics.track_window("connections_received", pattern.target)
        self.metrics.track_window("throughput_bps", pattern.target, rate=True)
        if pattern.rate == 0:
            return 0
        n = 0
        for src in pattern.sources:
            act = Activity(f"attack:{src}", "poisson", rate=pattern.rate,
                           start=pattern.start, end=pattern.end)
            times = arrival_times(act, self.engine.rng(f"attack:{src}"))
            cred = pattern.credential or self.certs.get(src)
            for t in times:
                op = DbOp(pattern.op, pattern.size, cred, src)
                self.engine.schedule(
                    t, src, "connect", source=src, info=f"{pattern.kind} {pattern.target}",
                    action=lambda ev, src=src, op=op: self._attack_connect(src, pattern.target, op),
                )
                n += 1
        return n

    def _attack_connect(self, src: str, target: str, op: DbOp) -> None:
        self.metrics.incr("attack_connections", src)
        try:
            self.connect(src, target, op)
        except NoRoute:
            pass
