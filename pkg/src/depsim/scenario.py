"""Scenario files: parsing, validation, canonical writing, running and
CSV export.

A scenario is a list of sections::

    # comment
    [center C1]
    lan_capacity_bps = 1e9

    [pu P1]
    center = C1
    power_wups = 2

Each section has a kind and (except ``engine`` and ``security``) a name.
Values stay as text in :class:`ScenarioConfig`; :func:`validate` checks
them and :func:`build` turns them into a live model.
"""

from __future__ import annotations

import math
import os
import re
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Any, Callable

from .dependsched import POLICIES, Checkpointer, DagScheduler, Replicator
from .engine import Engine, SimulationError
from .faults import CRASH, FAULT_KINDS, OMISSION, TIMING, FaultInjector, FaultKind, FaultProfile, Monitor
from .metrics import MetricsStore, RunReport
from .resources import DbOp, Grid
from .security import AccessPolicy, AttackPattern, FilterRule, SecurityManager
from .workload import Activity, CyclicDag, Dag, Job, Scheduler, generate

SHIPPED = ("net-faults-4centers", "dag-ft", "vo-attack")


class ParseError(SimulationError):
    def __init__(self, message: str, line: int, source: str = "<string>"):
        super().__init__(f"{source}:{line}: {message}")
        self.line = line


class ValidationError(SimulationError):
    def __init__(self, diagnostics: list[str]):
        super().__init__("\n".join(diagnostics))
        self.diagnostics = diagnostics


@dataclass
class Section:
    kind: str
    name: str | None = None
    values: dict[str, str] = field(default_factory=dict)
    line: int = field(default=0, compare=False)
    key_lines: dict[str, int] = field(default_factory=dict, compare=False)

    @property
    def label(self) -> str:
        return self.kind if self.name is None else f"{self.kind} {self.name}"


@dataclass
class ScenarioConfig:
    name: str
    sections: list[Section] = field(default_factory=list)
    source: str = field(default="<string>", compare=False)

    def of(self, kind: str) -> list[Section]:
        return [s for s in self.sections if s.kind == kind]

    def find(self, kind: str, name: str | None = None) -> Section | None:
        for s in self.sections:
            if s.kind == kind and s.name == name:
                return s
        return None

    def get(self, kind: str, name: str | None = None) -> Section:
        s = self.find(kind, name)
        if s is None:
            s = Section(kind, name)
            self.sections.append(s)
        return s

    def set(self, kind: str, name: str | None, key: str, value: Any) -> None:
        self.get(kind, name).values[key] = _text(value)

    def remove(self, kind: str, name: str | None = None) -> None:
        self.sections = [s for s in self.sections if not (s.kind == kind and s.name == name)]

    def copy(self) -> "ScenarioConfig":
        return ScenarioConfig(
            self.name,
            [Section(s.kind, s.name, dict(s.values), s.line, dict(s.key_lines)) for s in self.sections],
            self.source,
        )


def _text(value: Any) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (list, tuple)):
        return ", ".join(_text(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


# --------------------------------------------------------------------------
# parsing and writing

_HEADER = re.compile(r"^\[\s*([A-Za-z_]+)(?:\s+([^\s\]]+))?\s*\]$")
_KEY = re.compile(r"^[A-Za-z_][A-Za-z0-9_.\-]*$")
UNNAMED = ("engine", "security")


def parse_scenario(text: str, name: str = "scenario", source: str = "<string>") -> ScenarioConfig:
    cfg = ScenarioConfig(name, [], source)
    current: Section | None = None
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("["):
            m = _HEADER.match(line)
            if m is None:
                raise ParseError(f"malformed section header {raw.strip()!r}", lineno, source)
            current = Section(m.group(1), m.group(2), {}, lineno)
            cfg.sections.append(current)
            continue
        if "=" not in line:
            raise ParseError(f"expected 'key = value', got {raw.strip()!r}", lineno, source)
        if current is None:
            raise ParseError("key outside of any section", lineno, source)
        key, value = (p.strip() for p in line.split("=", 1))
        if not _KEY.match(key):
            raise ParseError(f"invalid key {key!r}", lineno, source)
        if key in current.values:
            raise ParseError(f"duplicate key {key!r} in [{current.label}]", lineno, source)
        current.values[key] = value
        current.key_lines[key] = lineno
    return cfg


def write_scenario(cfg: ScenarioConfig) -> str:
    """Canonical text form; ``parse_scenario(write_scenario(c)) == c``."""
    out = []
    for s in cfg.sections:
        out.append(f"[{s.label}]")
        out.extend(f"{k} = {v}" for k, v in s.values.items())
        out.append("")
    return "\n".join(out)


def load_scenario(path: str | os.PathLike, check: bool = True) -> ScenarioConfig:
    """Read a scenario file (or a shipped scenario by name) and validate it."""
    p = Path(path)
    if not p.exists() and str(path) in SHIPPED:
        text = resources.files("depsim.scenarios").joinpath(f"{path}.scn").read_text("utf-8")
        cfg = parse_scenario(text, str(path), f"{path}.scn")
    else:
        text = p.read_text(encoding="utf-8")
        cfg = parse_scenario(text, p.stem, str(p))
    if check:
        validate(cfg)
    return cfg


def shipped_scenario(name: str) -> ScenarioConfig:
    return load_scenario(name)


# --------------------------------------------------------------------------
# validation


def _float(v: str) -> float:
    x = float(v)
    if math.isnan(x):
        raise ValueError("NaN")
    return x


def _nonneg(v: str) -> float:
    x = _float(v)
    if x < 0:
        raise ValueError("must be >= 0")
    return x


def _pos(v: str) -> float:
    x = _float(v)
    if not x > 0:
        raise ValueError("must be > 0")
    return x


def _fraction(v: str) -> float:
    x = _float(v)
    if not 0 < x <= 1:
        raise ValueError("must lie in (0, 1]")
    return x


def _int(v: str) -> int:
    return int(v)


def _count(v: str) -> int:
    x = int(v)
    if x < 0:
        raise ValueError("must be >= 0")
    return x


def _pos_int(v: str) -> int:
    x = int(v)
    if x < 1:
        raise ValueError("must be >= 1")
    return x


def _bool(v: str) -> bool:
    low = v.lower()
    if low in ("true", "yes", "on", "1"):
        return True
    if low in ("false", "no", "off", "0"):
        return False
    raise ValueError("expected true or false")


def _str(v: str) -> str:
    if not v:
        raise ValueError("must not be empty")
    return v


def _list(v: str) -> list[str]:
    return [x.strip() for x in v.split(",") if x.strip()]


def _floats(v: str) -> list[float]:
    return [_nonneg(x) for x in _list(v)]


def _choice(*options: str) -> Callable[[str], str]:
    def check(v: str) -> str:
        if v not in options:
            raise ValueError(f"expected one of {', '.join(options)}")
        return v
    return check


def _perms(v: str) -> str:
    if set(v) - set("rwx"):
        raise ValueError("permissions are letters from 'rwx'")
    return v


def _rule(v: str) -> tuple[str, str, str, str]:
    parts = v.split()
    if len(parts) != 4 or parts[0] not in ("allow", "deny"):
        raise ValueError("expected 'allow|deny SRC DST TYPE'")
    return tuple(parts)  # type: ignore[return-value]


FAMILIES = ("exponential", "uniform", "gaussian", "binomial", "poisson")

SCHEMA: dict[str, dict[str, Callable[[str], Any]]] = {
    "engine": {
        "horizon_s": _pos, "seed": _int, "metric_window_s": _pos, "byzantine_storm": _bool,
        "storm_rate": _nonneg, "transfer_retries": _int, "retry_backoff_s": _pos, "trace": _bool,
    },
    "center": {"lan_capacity_bps": _pos, "lan_latency_s": _nonneg},
    "pu": {"center": _str, "power_wups": _pos, "slots": _pos_int, "memory": _pos},
    "db": {"center": _str, "base_latency_s": _nonneg, "throughput_Bps": _pos, "storage": _bool},
    "router": {},
    "link": {"a": _str, "b": _str, "capacity_bps": _pos, "latency_s": _nonneg},
    "fault": {
        "kind": _choice(*FAULT_KINDS), "mttf_s": _pos, "family": _choice(*FAMILIES),
        "sigma_s": _pos, "p": _fraction, "permanent": _bool, "mttr_s": _pos,
        "mttr_family": _choice(*FAMILIES), "loss_fraction": _fraction, "delay_s": _nonneg,
        "at_s": _floats, "repair_s": _pos,
    },
    "vo": {"members": _list, "subjects": _list},
    "cert": {"subject": _str, "issuer": _str, "not_before_s": _float, "not_after_s": _float,
             "vos": _list, "revoked": _bool},
    "security": {"trust": _list, "handshake_cost_s": _nonneg, "overhead": _float,
                 "cpu_per_byte_s": _nonneg},
    "policy": {"attack_ops": _list, "grant.*": _perms, "work_cap.*": _nonneg, "memory_cap.*": _nonneg},
    "filter": {"rule.*": _rule, "at.*": _nonneg},
    "activity": {
        "pattern": _choice("batch", "poisson", "dos"), "count": _count, "rate_per_s": _nonneg,
        "start_s": _nonneg, "end_s": _nonneg, "payload": _choice("job", "transfer", "db"),
        "scheduler": _str, "work": _nonneg, "output_bytes": _nonneg, "output_to": _str,
        "timeout_s": _nonneg, "vo": _str, "credential": _str, "memory": _nonneg,
        "replicas": _pos_int, "src": _list, "dst": _list, "endpoints": _list, "bytes": _nonneg,
        "op": _choice("read", "write", "create", "get", "execute"), "target": _str,
        "sources": _list, "requester": _list,
    },
    "dag": {"scheduler": _str, "submit_s": _nonneg, "task.*": _nonneg, "edge.*": _nonneg},
    "scheduler": {
        "type": _choice("fifo", "dag"), "policy": _choice(*POLICIES), "pus": _list,
        "reschedule": _bool, "max_retries": _int, "checkpoint_s": _pos, "checkpoint_cost_s": _nonneg,
    },
}
REQUIRED = {
    "pu": ("center", "power_wups"),
    "db": ("center",),
    "link": ("a", "b", "capacity_bps"),
    "fault": ("kind",),
    "activity": ("pattern",),
}


def _checker(kind: str, key: str):
    schema = SCHEMA[kind]
    if key in schema:
        return schema[key]
    if "." in key:
        wildcard = key.split(".", 1)[0] + ".*"
        if wildcard in schema:
            return schema[wildcard]
    return None


def parsed(section: Section) -> dict[str, Any]:
    """Typed values of an already validated section."""
    return {k: _checker(section.kind, k)(v) for k, v in section.values.items()}


def validate(cfg: ScenarioConfig) -> None:
    """Raise :class:`ValidationError` listing every problem found."""
    diags: list[str] = []

    def err(section: Section, msg: str, key: str | None = None) -> None:
        line = section.key_lines.get(key, section.line) if key else section.line
        diags.append(f"{cfg.source}:{line}: [{section.label}] {msg}")

    typed: dict[int, dict[str, Any]] = {}
    seen: set[tuple[str, str | None]] = set()
    for s in cfg.sections:
        if s.kind not in SCHEMA:
            err(s, f"unknown section kind {s.kind!r}")
            continue
        if (s.name is None) != (s.kind in UNNAMED):
            err(s, "takes no name" if s.kind in UNNAMED else "needs a name")
        if (s.kind, s.name) in seen:
            err(s, "duplicate section")
        seen.add((s.kind, s.name))
        vals = {}
        for k, v in s.values.items():
            check = _checker(s.kind, k)
            if check is None:
                err(s, f"unknown key {k!r}", k)
                continue
            try:
                vals[k] = check(v)
            except ValueError as e:
                err(s, f"bad value for {k!r}: {v!r} ({e})", k)
        for k in REQUIRED.get(s.kind, ()):
            if k not in s.values:
                err(s, f"missing required key {k!r}")
        typed[id(s)] = vals
    if diags:
        raise ValidationError(diags)

    names = {kind: {s.name for s in cfg.of(kind)} for kind in SCHEMA}
    components = names["pu"] | names["db"] | names["router"] | names["link"] | {f"{c}.lan" for c in names["center"]}
    all_ids = components | names["center"]
    clash = (names["pu"] | names["db"] | names["router"] | names["link"]) & (names["center"] | {f"{c}.lan" for c in names["center"]})
    for s in cfg.sections:
        if s.name in clash and s.kind in ("pu", "db", "router", "link"):
            err(s, f"id {s.name!r} is used by more than one component")
    schedulers = {s.name: typed[id(s)].get("type", "fifo") for s in cfg.of("scheduler")}

    def ref(s: Section, key: str, pool: set, what: str) -> None:
        vals = typed[id(s)].get(key)
        if vals is None:
            return
        for v in vals if isinstance(vals, list) else [vals]:
            if v not in pool:
                err(s, f"{key} refers to unknown {what} {v!r}", key)

    for s in cfg.sections:
        v = typed[id(s)]
        if s.kind in ("pu", "db"):
            ref(s, "center", names["center"], "center")
        elif s.kind == "link":
            ref(s, "a", names["center"] | names["router"], "center or router")
            ref(s, "b", names["center"] | names["router"], "center or router")
        elif s.kind == "fault":
            if s.name not in components:
                err(s, f"unknown component {s.name!r}")
            if "mttf_s" not in v and "at_s" not in v:
                err(s, "needs mttf_s or at_s")
            kind = v.get("kind")
            if kind == OMISSION and "loss_fraction" not in v:
                err(s, "omission faults need loss_fraction")
            if kind == TIMING and "delay_s" not in v:
                err(s, "timing faults need delay_s")
            if v.get("permanent") and ("mttr_s" in v or "repair_s" in v):
                err(s, "a permanent fault cannot have mttr_s or repair_s")
            if kind == CRASH and not v.get("permanent"):
                if "mttf_s" in v and "mttr_s" not in v:
                    err(s, "a transient crash needs mttr_s")
                if "at_s" in v and "repair_s" not in v:
                    err(s, "a transient crash at fixed times needs repair_s")
            if s.name in names["center"]:
                err(s, "centers cannot fail; target their components")
        elif s.kind == "vo":
            ref(s, "members", components, "component")
        elif s.kind == "cert":
            ref(s, "vos", names["vo"], "VO")
        elif s.kind == "policy":
            if s.name not in names["db"] | names["pu"]:
                err(s, f"policy resource {s.name!r} is not a PU or database server")
            for k in v:
                if "." in k and k.split(".", 1)[1] not in names["vo"]:
                    err(s, f"{k} names an unknown VO", k)
        elif s.kind == "filter":
            if s.name not in all_ids:
                err(s, f"unknown component {s.name!r}")
            for k in v:
                if k.startswith("at.") and f"rule.{k[3:]}" not in v:
                    err(s, f"{k} has no matching rule", k)
        elif s.kind == "scheduler":
            ref(s, "pus", names["pu"], "PU")
            if v.get("type", "fifo") != "dag" and "policy" in v:
                err(s, "policy applies to dag schedulers only", "policy")
        elif s.kind == "dag":
            sched = v.get("scheduler")
            if sched is None or schedulers.get(sched) != "dag":
                err(s, "needs a scheduler of type dag")
            tasks = {k[5:] for k in v if k.startswith("task.")}
            if not tasks:
                err(s, "has no tasks")
            edges = []
            for k in v:
                if k.startswith("edge."):
                    parts = k.split(".")
                    if len(parts) != 3 or parts[1] not in tasks or parts[2] not in tasks:
                        err(s, f"{k} must be edge.PARENT.CHILD over declared tasks", k)
                    else:
                        edges.append((parts[1], parts[2], v[k]))
            try:
                Dag(s.name, [Job(t, 0.0) for t in sorted(tasks)], edges).topological_order()
            except CyclicDag:
                err(s, "the task graph has a cycle")
            except ValueError as e:
                err(s, str(e))
        elif s.kind == "activity":
            _validate_activity(s, v, err, names, components, all_ids, schedulers, ref)
    if diags:
        raise ValidationError(diags)


def _validate_activity(s, v, err, names, components, all_ids, schedulers, ref):
    pattern = v.get("pattern")
    if pattern == "batch" and "count" not in v:
        err(s, "batch activities need count")
    if pattern == "poisson" and "rate_per_s" not in v:
        err(s, "poisson activities need rate_per_s")
    if pattern == "poisson" and "count" not in v and "end_s" not in v:
        err(s, "poisson activities need count or end_s")
    if v.get("end_s", math.inf) < v.get("start_s", 0.0):
        err(s, "end_s is before start_s")
    if pattern == "dos":
        for k in ("sources", "target", "rate_per_s", "end_s"):
            if k not in v:
                err(s, f"dos activities need {k}")
        ref(s, "sources", components, "component")
        ref(s, "target", names["db"], "database server")
        ref(s, "credential", names["cert"], "certificate")
        return
    payload = v.get("payload", "job")
    if payload == "job":
        if "work" not in v:
            err(s, "job activities need work")
        sched = v.get("scheduler")
        if sched is not None and sched not in schedulers:
            err(s, f"unknown scheduler {sched!r}", "scheduler")
        if sched is None and len(schedulers) > 1:
            err(s, "several schedulers exist; name one")
        ref(s, "vo", names["vo"], "VO")
        ref(s, "output_to", all_ids, "component")
        ref(s, "credential", names["cert"], "certificate")
    elif payload == "transfer":
        if "bytes" not in v:
            err(s, "transfer activities need bytes")
        if "endpoints" in v:
            if len(v["endpoints"]) < 2:
                err(s, "endpoints needs at least two entries")
        elif "src" not in v or "dst" not in v:
            err(s, "transfer activities need src and dst (or endpoints)")
        for k in ("src", "dst", "endpoints"):
            ref(s, k, all_ids, "component")
    else:
        for k in ("requester", "target", "op"):
            if k not in v:
                err(s, f"db activities need {k}")
        ref(s, "requester", all_ids, "component")
        ref(s, "target", names["db"], "database server")
        ref(s, "credential", names["cert"], "certificate")


# --------------------------------------------------------------------------
# building and running


@dataclass
class Simulation:
    config: ScenarioConfig
    seed: int
    horizon: float
    engine: Engine
    grid: Grid
    monitor: Monitor
    injector: FaultInjector
    security: SecurityManager | None
    schedulers: dict[str, Scheduler]
    checkpointers: dict[str, Checkpointer]
    replicators: dict[str, Replicator]
    jobs: dict[str, Job] = field(default_factory=dict)
    dags: dict[str, Dag] = field(default_factory=dict)


@dataclass
class RunResult:
    metrics: MetricsStore
    report: RunReport
    sim: Simulation

    @property
    def engine(self) -> Engine:
        return self.sim.engine

    def trace_text(self) -> str:
        return "\n".join(self.sim.engine.trace_lines()) + "\n"

    def metrics_text(self) -> str:
        return "\n".join(self.metrics.csv_lines(self.report.run_id, self.report.seed, self.report.horizon)) + "\n"

    def report_text(self) -> str:
        return RunReport.header() + "\n" + self.report.csv_row() + "\n"


def build(cfg: ScenarioConfig, seed: int | None = None, until: float | None = None,
          policy: str | None = None, reschedule: bool | None = None) -> Simulation:
    """Instantiate the model described by ``cfg``; nothing runs yet."""
    validate(cfg)
    eng_cfg = parsed(cfg.find("engine")) if cfg.find("engine") else {}
    seed = eng_cfg.get("seed", 42) if seed is None else seed
    horizon = until if until is not None else eng_cfg.get("horizon_s", 1000.0)
    engine = Engine(seed, trace=eng_cfg.get("trace", True))
    metrics = MetricsStore(eng_cfg.get("metric_window_s", 1.0))
    grid = Grid(engine, metrics, eng_cfg.get("transfer_retries", 10), eng_cfg.get("retry_backoff_s", 1.0))

    for s in cfg.of("center"):
        v = parsed(s)
        grid.add_center(s.name, v.get("lan_capacity_bps", 1e9), v.get("lan_latency_s", 0.0))
    for s in cfg.of("router"):
        grid.add_router(s.name)
    for s in cfg.of("link"):
        v = parsed(s)
        grid.add_link(s.name, v["a"], v["b"], v["capacity_bps"], v.get("latency_s", 0.0))
    for s in cfg.of("pu"):
        v = parsed(s)
        grid.add_pu(s.name, v["center"], v["power_wups"], v.get("slots", 1), memory=v.get("memory", math.inf))
    for s in cfg.of("db"):
        v = parsed(s)
        grid.add_db(s.name, v["center"], v.get("base_latency_s", 0.0), v.get("throughput_Bps", 1e8),
                    v.get("storage", False))

    monitor = Monitor(grid)
    injector = FaultInjector(grid, monitor)
    security = _build_security(cfg, grid)

    schedulers: dict[str, Scheduler] = {}
    checkpointers: dict[str, Checkpointer] = {}
    replicators: dict[str, Replicator] = {}
    sched_sections = cfg.of("scheduler")
    needs_default = not sched_sections and any(
        parsed(a).get("payload", "job") == "job" and parsed(a)["pattern"] != "dos" for a in cfg.of("activity"))
    if needs_default:
        sched_sections = [Section("scheduler", "sched")]
    for s in sched_sections:
        v = parsed(s)
        ckpt = None
        if "checkpoint_s" in v:
            ckpt = Checkpointer(grid, monitor, v.get("checkpoint_cost_s", 0.0), v["checkpoint_s"])
            checkpointers[s.name] = ckpt
        resched = v.get("reschedule", True) if reschedule is None else reschedule
        common = dict(sid=s.name, pus=v.get("pus"), reschedule=resched,
                      max_retries=v.get("max_retries", 3), checkpointer=ckpt)
        if v.get("type", "fifo") == "dag":
            sch = DagScheduler(grid, monitor, policy=policy or v.get("policy", "etf"), **common)
        else:
            sch = Scheduler(grid, monitor, **common)
        schedulers[s.name] = sch
        replicators[s.name] = Replicator(sch)

    sim = Simulation(cfg, seed, horizon, engine, grid, monitor, injector, security,
                     schedulers, checkpointers, replicators)
    for s in cfg.of("fault"):
        _build_fault(sim, s)
    for s in cfg.of("dag"):
        _build_dag(sim, s)
    for s in cfg.of("activity"):
        _build_activity(sim, s)
    if eng_cfg.get("byzantine_storm", False):
        injector.byzantine_storm(True, eng_cfg.get("storm_rate"))
    return sim


def _build_security(cfg: ScenarioConfig, grid: Grid) -> SecurityManager | None:
    wanted = any(cfg.of(k) for k in ("security", "vo", "cert", "policy", "filter")) or any(
        parsed(a)["pattern"] == "dos" for a in cfg.of("activity"))
    if not wanted:
        return None
    sec_s = cfg.find("security")
    v = parsed(sec_s) if sec_s else {}
    sec = SecurityManager(grid, v.get("trust", ["ca"]), v.get("handshake_cost_s", 0.0),
                          v.get("overhead", 1.0), v.get("cpu_per_byte_s", 0.0))
    for s in cfg.of("vo"):
        vv = parsed(s)
        sec.create_vo(s.name, vv.get("members", []) + vv.get("subjects", []))
    for s in cfg.of("cert"):
        vv = parsed(s)
        sec.issue(s.name, vv.get("subject"), vv.get("issuer", "ca"), vv.get("not_before_s", 0.0),
                  vv.get("not_after_s", math.inf), vv.get("vos", []))
        if vv.get("revoked"):
            sec.revoke(s.name)
    for s in cfg.of("policy"):
        vv = parsed(s)
        pol = AccessPolicy(s.name, attack_ops=frozenset(vv.get("attack_ops", [])))
        for k, val in vv.items():
            head, _, vo = k.partition(".")
            if head == "grant":
                pol.grant(vo, val)
            elif head == "work_cap":
                pol.work_caps[vo] = val
            elif head == "memory_cap":
                pol.memory_caps[vo] = val
        sec.set_policy(pol)
    for s in cfg.of("filter"):
        vv = parsed(s)
        for k in sorted((k for k in vv if k.startswith("rule.")), key=_rule_pos):
            pos = _rule_pos(k)
            action, src, dst, typ = vv[k]
            rule = FilterRule(pos, src, dst, typ, action)
            at = vv.get(f"at.{k[5:]}")
            if at is None or at == 0:
                sec.add_rule(s.name, rule)
            else:
                grid.engine.schedule(at, s.name, "filter-update", source="security", info=str(pos),
                                     action=lambda ev, c=s.name, r=rule: sec.add_rule(c, r))
    return sec


def _rule_pos(key: str) -> int:
    tail = key.split(".", 1)[1]
    return int(tail) if tail.isdigit() else 0


def _fault_kind(v: dict) -> FaultKind:
    kind = v["kind"]
    if kind == OMISSION:
        return FaultKind.omission(v["loss_fraction"])
    if kind == TIMING:
        return FaultKind.timing(v["delay_s"])
    if kind == CRASH:
        return FaultKind.crash()
    return FaultKind.byzantine()


def _build_fault(sim: Simulation, s: Section) -> None:
    v = parsed(s)
    kind = _fault_kind(v)
    permanent = v.get("permanent", False)
    if "mttf_s" in v:
        sim.injector.attach_profile(FaultProfile(
            s.name, v["mttf_s"], kind, permanent, v.get("family", "exponential"),
            v.get("sigma_s"), v.get("p"), v.get("mttr_s"), v.get("mttr_family", "exponential"),
        ))
    engine = sim.engine
    for t in v.get("at_s", []):
        def hit(ev, cid=s.name, repair=v.get("repair_s")):
            comp = sim.grid.component(cid)
            if not comp.operational:
                engine.record("skip", "injector", cid, f"{kind} target down")
                return
            sim.injector.inject(cid, kind, permanent)
            if repair is not None:
                engine.after(repair, cid, "timer", source="injector", info="recovery",
                             action=lambda ev: sim.injector.recover(cid))
        engine.schedule(t, s.name, "timer", source="injector", info=f"fault {kind}", action=hit)


def _scheduler_for(sim: Simulation, name: str | None) -> Scheduler:
    if name is None:
        return next(iter(sim.schedulers.values()))
    return sim.schedulers[name]


def _build_dag(sim: Simulation, s: Section) -> None:
    v = parsed(s)
    tasks = [Job(f"{s.name}:{k[5:]}", v[k]) for k in v if k.startswith("task.")]
    edges = []
    for k in v:
        if k.startswith("edge."):
            _, a, b = k.split(".")
            edges.append((f"{s.name}:{a}", f"{s.name}:{b}", v[k]))
    dag = Dag(s.name, sorted(tasks, key=lambda j: j.id), edges)
    sim.dags[s.name] = dag
    for t in dag.tasks:
        sim.jobs[t.id] = t
    sched = sim.schedulers[v["scheduler"]]
    sim.engine.schedule(v.get("submit_s", 0.0), sched.id, "arrival", source=s.name, info="dag",
                        action=lambda ev: sched.submit_dag(dag))


def _build_activity(sim: Simulation, s: Section) -> None:
    v = parsed(s)
    sec = sim.security
    if v["pattern"] == "dos":
        cred = sec.certs.get(v["credential"]) if "credential" in v else None
        sec.launch_attack(AttackPattern(
            tuple(v["sources"]), v["target"], v["rate_per_s"], v.get("start_s", 0.0), v["end_s"],
            op=v.get("op", "get"), size=v.get("bytes", 1000.0), credential=cred,
        ))
        return
    act = Activity(s.name, v["pattern"], v.get("count"), v.get("rate_per_s", 0.0),
                   v.get("start_s", 0.0), v.get("end_s", math.inf))
    payload = v.get("payload", "job")
    engine = sim.engine

    if payload == "job":
        sched = _scheduler_for(sim, v.get("scheduler"))
        cred = sec.certs.get(v["credential"]) if sec is not None and "credential" in v else None
        replicas = v.get("replicas", 1)

        def submit(i, t):
            job = Job(f"{s.name}-{i}", v["work"], output_size=v.get("output_bytes", 0.0),
                      timeout=v.get("timeout_s"), vo=v.get("vo"), credential=cred,
                      memory=v.get("memory", 0.0), output_to=v.get("output_to"))
            sim.jobs[job.id] = job
            if replicas > 1:
                sim.replicators[sched.id].replicate(job, replicas, distinct=False)
            else:
                sched.submit_job(job)
    elif payload == "transfer":
        if "endpoints" in v:
            eps = v["endpoints"]
            pairs = [(a, b) for a in eps for b in eps if a != b]
        else:
            pairs = [(a, b) for a in v["src"] for b in v["dst"] if a != b]

        def submit(i, t):
            a, b = pairs[i % len(pairs)]
            sim.grid.network.request(a, b, v["bytes"], tag=s.name)
    else:
        requesters = v["requester"]
        cred = sec.certs.get(v["credential"]) if sec is not None and "credential" in v else None

        def submit(i, t):
            who = requesters[i % len(requesters)]
            op = DbOp(v["op"], v.get("bytes", 0.0), cred or (sec.certs.get(who) if sec else None), who)
            if sec is not None:
                sec.connect(who, v["target"], op)
            else:
                sim.grid.network.request(
                    who, v["target"], op.size, tag=s.name,
                    on_done=lambda tr, op=op: _serve(sim.grid, v["target"], op))

    generate(engine, act, submit)


def _serve(grid: Grid, target: str, op: DbOp) -> None:
    try:
        grid.db_op(target, op)
    except SimulationError:
        pass


def report_of(sim: Simulation) -> RunReport:
    m = sim.grid.metrics
    counts = {"submitted": 0, "finished": 0, "failed": 0, "rescheduled": 0}
    for sch in sim.schedulers.values():
        for k, n in sch.counts().items():
            counts[k] += n
    times = [x for _, x in m.series.get(("transfer_time", "net"), [])]
    return RunReport(
        run_id=sim.config.name, seed=sim.seed, horizon=sim.horizon,
        lost_bytes=m.count("lost_bytes", "net"),
        mean_transfer_time=sum(times) / len(times) if times else 0.0,
        attacks_detected=int(m.count("attacks_detected")),
        **counts,
    )


def run(cfg: ScenarioConfig, seed: int | None = None, until: float | None = None,
        policy: str | None = None, reschedule: bool | None = None) -> RunResult:
    """Build and execute ``cfg`` up to its horizon."""
    sim = build(cfg, seed, until, policy, reschedule)
    sim.engine.run_until(sim.horizon)
    sim.grid.metrics.close_windows(sim.horizon)
    return RunResult(sim.grid.metrics, report_of(sim), sim)


def export(result: RunResult, out_dir: str | os.PathLike) -> list[Path]:
    """Write ``metrics.csv``, ``report.csv`` and ``trace.csv`` into ``out_dir``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    files = []
    for name, text in (("metrics.csv", result.metrics_text()),
                       ("report.csv", result.report_text()),
                       ("trace.csv", result.trace_text())):
        path = out / name
        with open(path, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        files.append(path)
    return files


def mttf_for_level(p: float, horizon: float) -> float:
    """MTTF giving an exponential failure probability ``p`` within ``horizon``."""
    if not 0 < p < 1:
        raise ValueError("fault-probability level must lie in (0, 1)")
    return -horizon / math.log1p(-p)
