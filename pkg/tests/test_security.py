import math

import pytest
from hypothesis import given
from hypothesis import strategies as st

from depsim.engine import Engine
from depsim.resources import DbOp, Denied, Grid
from depsim.security import (
    EXPIRED,
    MUTUAL,
    NOT_YET_VALID,
    REVOKED,
    UNIDIRECTIONAL,
    UNKNOWN_ISSUER,
    VALID,
    AccessPolicy,
    AttackPattern,
    AuthFailed,
    Certificate,
    DuplicateVo,
    FilterRule,
    NoSession,
    SecurityManager,
    UnknownVo,
    authorize,
    evaluate,
    validate_cert,
)


def world():
    eng = Engine(8)
    g = Grid(eng)
    g.add_center("C1")
    g.add_center("C2")
    g.add_link("L", "C1", "C2", 1e8, 0.05)
    for p, c in (("P1", "C1"), ("P2", "C2"), ("X", "C2")):
        g.add_pu(p, c, 1.0)
    g.add_db("DB", "C1", base_latency=0.001)
    sec = SecurityManager(g, trust=["ca"], handshake_cost=0.3)
    return eng, g, sec


def test_certificate_validity():
    c = Certificate("alice", "ca", 10.0, 20.0)
    assert validate_cert(c, 15.0, {"ca"}) == VALID
    assert validate_cert(c, 25.0, {"ca"}) == EXPIRED
    assert validate_cert(c, 5.0, {"ca"}) == NOT_YET_VALID
    assert validate_cert(c, 15.0, {"other"}) == UNKNOWN_ISSUER
    assert validate_cert(Certificate("a", "ca", revoked=True), 0, {"ca"}) == REVOKED


def test_proxy_keeps_rights_with_bounded_lifetime():
    c = Certificate("alice", "ca", 0.0, 100.0, frozenset({"vo"}))
    p = c.proxy(now=90.0, lifetime=30.0)
    assert p.vos == c.vos and p.not_after == 100.0 and p.proxy_of == "alice"


def test_vo_management():
    eng, g, sec = world()
    sec.create_vo("vo", ["P1", "DB", "alice"])
    assert sec.vos["vo"].components == {"P1", "DB"} and sec.vos["vo"].subjects == {"alice"}
    assert g.pus["P1"].vo == "vo"
    sec.join_vo("vo", "P1")  # idempotent
    assert sec.vos["vo"].components == {"P1", "DB"}
    with pytest.raises(DuplicateVo):
        sec.create_vo("vo")
    with pytest.raises(UnknownVo):
        sec.join_vo("nope", "P2")


def test_authenticate_cost_and_modes():
    eng, g, sec = world()
    sec.issue("P1")
    sec.issue("P2")
    s = sec.authenticate("P1", "P2", MUTUAL)
    rtt = 2 * 0.05
    assert s.established_at == pytest.approx(2 * rtt + 0.3)
    sec.issue("P1", not_after=-1.0)  # expired client
    with pytest.raises(AuthFailed) as e:
        sec.authenticate("P1", "P2", MUTUAL)
    assert e.value.reason == EXPIRED
    assert sec.authenticate("P1", "P2", UNIDIRECTIONAL).mode == UNIDIRECTIONAL
    kinds = [r[2] for r in eng.trace]
    assert kinds.count("auth-ok") == 2 and kinds.count("auth-fail") == 1


@given(st.booleans(), st.booleans(), st.booleans(), st.booleans())
def test_mutual_authentication_is_symmetric(a_expired, b_expired, a_revoked, b_untrusted):
    eng, g, sec = world()
    sec.issue("P1", not_after=-1.0 if a_expired else math.inf)
    sec.issue("P2", issuer="rogue" if b_untrusted else "ca", not_after=-1.0 if b_expired else math.inf)
    if a_revoked:
        sec.revoke("P1")

    def ok(a, b):
        try:
            sec.authenticate(a, b, MUTUAL)
            return True
        except AuthFailed:
            return False

    assert ok("P1", "P2") == ok("P2", "P1")


def test_authorize_examples():
    pol = AccessPolicy("DB", attack_ops=frozenset({"get"}))
    pol.grant("vo", "rw")
    member = Certificate("m", "ca", vos=frozenset({"vo"}))
    outsider = Certificate("o", "ca")
    assert authorize(member, pol, "write").allowed
    assert authorize(member, pol, "read").allowed
    assert not authorize(member, pol, "execute").allowed
    d = authorize(member, pol, "get")
    assert not d.allowed and d.attack
    d = authorize(outsider, pol, "read")
    assert not d.allowed and not d.attack
    assert not authorize(member, None, "read").allowed


def test_resource_caps():
    pol = AccessPolicy("P1")
    pol.grant("vo", "x")
    pol.work_caps["vo"] = 100.0
    pol.memory_caps["vo"] = 2.0
    c = Certificate("m", "ca", vos=frozenset({"vo"}))
    assert authorize(c, pol, "execute", work=50, memory=1).allowed
    assert not authorize(c, pol, "execute", work=500).allowed
    assert authorize(c, pol, "execute", work=500).reason == "over-cap"
    assert not authorize(c, pol, "execute", memory=3).allowed


actions = st.sampled_from(["read", "write", "create", "get", "execute"])
vo_names = st.sampled_from(["v1", "v2", "v3"])


@given(st.dictionaries(vo_names, st.sets(st.sampled_from("rwx")).map("".join)),
       st.sets(actions), st.sets(vo_names), actions)
def test_authorize_is_pure_and_deny_by_default(grants, attack_ops, vos, action):
    pol = AccessPolicy("R", attack_ops=frozenset(attack_ops))
    for vo, perms in grants.items():
        pol.grant(vo, perms)
    cert = Certificate("s", "ca", vos=frozenset(vos))
    first = authorize(cert, pol, action)
    assert all(authorize(cert, pol, action) == first for _ in range(3))
    # removing every grant denies every action
    bare = AccessPolicy("R", attack_ops=frozenset(attack_ops))
    d = authorize(cert, bare, action)
    assert not d.allowed and d.attack == (action in attack_ops)


patterns = st.sampled_from(["*", "X", "X*", "P?", "DB", "get", "read", "*e*"])
rules = st.builds(FilterRule, st.integers(0, 20), patterns, patterns, patterns, st.sampled_from(["allow", "deny"]))
names = st.sampled_from(["X", "X1", "P1", "P2", "DB", "get", "read"])


@given(st.lists(rules, max_size=8), names, names, names)
def test_filter_first_match_equals_linear_scan(rule_list, src, dst, typ):
    from fnmatch import fnmatchcase

    expected = "allow"
    for r in sorted(rule_list, key=lambda r: r.position):
        if fnmatchcase(src, r.src) and fnmatchcase(dst, r.dst) and fnmatchcase(typ, r.msg_type):
            expected = r.action
            break
    assert evaluate(rule_list, src, dst, typ) == expected


def test_filter_examples():
    assert evaluate([], "a", "b", "c") == "allow"
    rl = [FilterRule(1, src="X"), FilterRule(2, action="allow")]
    assert evaluate(rl, "X", "DB", "get") == "deny"
    assert evaluate(rl, "Y", "DB", "get") == "allow"


def test_protect_message_cost():
    eng, g, sec = world()
    sec.issue("P1")
    sec.issue("P2")
    sec.overhead = 1.1
    sec.cpu_per_byte = 1e-8
    s = sec.authenticate("P1", "P2")
    p = sec.protect_message(s, 1e6)
    assert p.nbytes == 1_100_000 and p.cpu_time == pytest.approx(0.01)
    assert g.metrics.count("crypto_cpu_s", "P1") == pytest.approx(0.01)
    with pytest.raises(NoSession):
        sec.protect_message(None, 10)


def test_db_denial_counts_attacks():
    eng, g, sec = world()
    sec.create_vo("vo", ["P1", "DB"])
    sec.issue("P1", vos=["vo"])
    sec.issue("X")
    pol = AccessPolicy("DB", attack_ops=frozenset({"get"}))
    pol.grant("vo", "rw")
    sec.set_policy(pol)
    g.db_op("DB", DbOp("read", credential=sec.certs["P1"], requester="P1"))
    with pytest.raises(Denied) as e:
        g.db_op("DB", DbOp("get", credential=sec.certs["P1"], requester="P1"))
    assert e.value.attack
    with pytest.raises(Denied) as e:
        g.db_op("DB", DbOp("read", credential=sec.certs["X"], requester="X"))
    assert not e.value.attack
    assert g.dbs["DB"].attacks_detected == 1
    assert g.metrics.count("attacks_detected", "DB") == 1


def attack_world(rate=20.0, rule_at=None):
    eng, g, sec = world()
    sec.issue("X")
    pol = AccessPolicy("DB", attack_ops=frozenset({"get"}))
    sec.set_policy(pol)
    n = sec.launch_attack(AttackPattern(("X",), "DB", rate, 10.0, 30.0))
    if rule_at is not None:
        eng.schedule(rule_at, "C1", "user",
                     action=lambda ev: sec.add_rule("C1", FilterRule(1, src="X", action="deny")))
    eng.run_until(40.0)
    g.metrics.close_windows(40.0)
    return eng, g, n


def test_attack_accounting_matches_trace():
    eng, g, n = attack_world()
    injected = sum(1 for r in eng.trace if r[2] == "dbop" and r[5].startswith("get"))
    assert n == injected == g.metrics.count("attacks_detected", "DB")
    conns = g.metrics.window_values("connections_received", "DB")
    assert sum(v for _, v in conns) == n
    assert all(v == 0 for t, v in conns if t < 10 or t >= 31)


def test_attack_rate_zero_generates_nothing():
    eng, g, n = attack_world(rate=0.0)
    assert n == 0 and g.metrics.count("attacks_detected") == 0


def test_dynamic_filter_rule_flattens_connections():
    eng, g, n = attack_world(rule_at=20.0)
    conns = dict(g.metrics.window_values("connections_received", "DB"))
    assert sum(conns[t] for t in range(10, 20)) > 0
    assert all(conns[t] == 0 for t in range(21, 40))
    drops = sum(1 for r in eng.trace if r[2] == "filter-drop")
    assert drops > 0
    assert drops + sum(conns.values()) == n
