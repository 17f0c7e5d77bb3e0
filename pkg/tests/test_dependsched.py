from itertools import combinations

import pytest
from hypothesis import given
from hypothesis import strategies as st

from depsim.dependsched import (
    Checkpointer,
    DagScheduler,
    JobNotRunning,
    NoPus,
    NotEnoughPus,
    Replicator,
    nominal_comm,
    plan_dag,
    vote,
    watch_timeout,
    watch_transfer,
)
from depsim.engine import Engine
from depsim.faults import FaultInjector, FaultKind, FaultProfile, Monitor
from depsim.resources import Grid, ProcessingUnit
from depsim.workload import CyclicDag, Dag, Job, JobState, Scheduler

from oracles import best_makespan, etf_reference


def pus(*powers, slots=1):
    return [ProcessingUnit(f"P{i + 1}", power=p, slots=slots) for i, p in enumerate(powers)]


@st.composite
def small_dags(draw, max_tasks=6):
    n = draw(st.integers(1, max_tasks))
    ids = [f"t{i}" for i in range(n)]
    work = {t: draw(st.integers(1, 20)) * 1.0 for t in ids}
    edges = []
    for b in range(n):
        for a in range(b):
            if draw(st.booleans()):
                edges.append((ids[a], ids[b], draw(st.integers(0, 4)) * 1e8))
    return work, edges


def make_dag(work, edges):
    return Dag("d", [Job(t, w) for t, w in work.items()], list(edges))


@given(small_dags(), st.lists(st.sampled_from([1.0, 2.0, 3.0]), min_size=1, max_size=3))
def test_etf_matches_reference_implementation(case, powers):
    work, edges = case
    plist = pus(*powers)
    got = plan_dag(make_dag(work, edges), plist, "etf")
    ref = etf_reference(work, edges, {p.id: p.power for p in plist}, nominal_comm)
    for t, (pu, start, fin) in ref.items():
        a = got.assignments[t]
        assert (a.pu, a.start, a.finish) == (pu, pytest.approx(start), pytest.approx(fin))


@given(small_dags(max_tasks=4), st.lists(st.sampled_from([1.0, 2.0]), min_size=1, max_size=2))
def test_heuristics_never_beat_the_optimum(case, powers):
    work, edges = case
    plist = pus(*powers)
    opt = best_makespan(work, edges, {p.id: p.power for p in plist}, nominal_comm)
    for policy in ("etf", "mcp", "baseline"):
        assert plan_dag(make_dag(work, edges), plist, policy).makespan >= opt - 1e-9


@given(small_dags(), st.lists(st.sampled_from([1.0, 2.0, 4.0]), min_size=1, max_size=3),
       st.integers(1, 2), st.sampled_from(["etf", "mcp", "baseline"]))
def test_plans_respect_precedence_and_capacity(case, powers, slots, policy):
    work, edges = case
    plist = pus(*powers, slots=slots)
    sched = plan_dag(make_dag(work, edges), plist, policy)
    a = sched.assignments
    assert set(a) == set(work)
    for p, c, nbytes in edges:
        assert a[c].start >= a[p].finish + nominal_comm(a[p].pu, a[c].pu, nbytes) - 1e-9
    for pu in plist:
        spans = sorted((x.start, x.finish) for x in a.values() if x.pu == pu.id)
        # at no instant more than `slots` tasks overlap
        for s, _ in spans:
            assert sum(1 for s2, f2 in spans if s2 <= s < f2) <= pu.slots
    for t, x in a.items():
        power = next(p.power for p in plist if p.id == x.pu)
        assert x.finish - x.start == pytest.approx(work[t] / power)


def test_etf_prefers_fast_pu_and_avoids_communication():
    work = {"a": 10.0, "b": 10.0}
    edges = [("a", "b", 1e9)]  # 8 s to move between PUs
    s = plan_dag(make_dag(work, edges), pus(1.0, 2.0), "etf")
    assert s.assignments["a"].pu == "P2" and s.assignments["b"].pu == "P2"
    assert s.makespan == pytest.approx(10.0)


def test_mcp_orders_by_critical_path():
    # c heads the long path, so MCP places it before the short b
    work = {"a": 1.0, "b": 1.0, "c": 5.0, "d": 5.0}
    edges = [("c", "d", 0.0)]
    s = plan_dag(make_dag(work, edges), pus(1.0), "mcp")
    order = sorted(s.assignments, key=lambda t: s.assignments[t].start)
    assert order[0] == "c"
    base = plan_dag(make_dag(work, edges), pus(1.0, 1.0), "baseline")
    assert [base.assignments[t].pu for t in ("a", "b", "c", "d")] == ["P1", "P2", "P1", "P2"]


def test_plan_errors():
    with pytest.raises(NoPus):
        plan_dag(make_dag({"a": 1.0}, []), [], "etf")
    with pytest.raises(ValueError):
        plan_dag(make_dag({"a": 1.0}, []), pus(1.0), "heft")
    with pytest.raises(CyclicDag):
        plan_dag(make_dag({"a": 1.0, "b": 1.0}, [("a", "b", 0), ("b", "a", 0)]), pus(1.0))
    down = pus(1.0)[0]
    down.state = "crashed"
    with pytest.raises(NoPus):
        plan_dag(make_dag({"a": 1.0}, []), [down])


# -- watches -----------------------------------------------------------------


@given(st.floats(0, 10), st.one_of(st.none(), st.floats(0, 20)))
def test_watch_exclusivity(timeout, disarm_at):
    eng = Engine()
    fired = []
    w = watch_timeout(eng, "j", timeout, fired.append)
    outcome = []
    if disarm_at is not None:
        eng.schedule(disarm_at, "j", "user", action=lambda ev: outcome.append(w.disarm()))
    eng.run_until(100)
    disarmed = bool(outcome and outcome[0])
    assert disarmed + len(fired) == 1
    assert w.state == ("disarmed" if disarmed else "fired")
    kinds = [r[2] for r in eng.trace if r[2] in ("timeout", "disarm")]
    assert kinds.count("disarm") == int(disarmed)


def test_watch_transfer_cancels_slow_transfer():
    eng = Engine()
    g = Grid(eng)
    g.add_center("A", lan_capacity=1e6)
    g.add_pu("P1", "A", 1.0)
    g.add_pu("P2", "A", 1.0)
    slow = g.network.start_transfer("P1", "P2", 1e6)  # 8 s
    fast = g.network.start_transfer("P1", "P2", 1e4)
    w1 = watch_transfer(g, slow, 2.0)
    w2 = watch_transfer(g, fast, 2.0)
    eng.run_until(20)
    assert slow.state == "cancelled" and w1.state == "fired"
    assert fast.state == "done" and w2.state == "disarmed"


# -- checkpointing -------------------------------------------------------------


def ckpt_setup(interval=None):
    eng = Engine(2)
    g = Grid(eng)
    g.add_center("A")
    g.add_pu("P1", "A", 2.0)
    g.add_pu("P2", "A", 1.0)
    mon = Monitor(g)
    inj = FaultInjector(g, mon)
    ck = Checkpointer(g, mon, interval=interval)
    sch = Scheduler(g, mon, pus=["P1", "P2"], checkpointer=ck)
    return eng, g, mon, inj, ck, sch


def test_checkpoint_requires_running_job():
    eng, g, mon, inj, ck, sch = ckpt_setup()
    with pytest.raises(JobNotRunning):
        ck.checkpoint(Job("x", 1.0))


@given(st.floats(1, 100), st.floats(0.01, 0.99))
def test_checkpoint_conservation(work, frac):
    eng, g, mon, inj, ck, sch = ckpt_setup()
    job = Job("j", work)
    sch.submit_job(job)
    at = frac * work / 2.0  # P1 has power 2
    snaps = []
    eng.schedule(at, "x", "user", action=lambda ev: snaps.append(ck.checkpoint(job)))
    eng.run_until(at)
    snap = snaps[0]
    assert snap.work_done == pytest.approx(frac * work)
    cont_id = ck.restore(snap, "P2")
    cont = g.pus["P2"].running[cont_id].job
    assert snap.work_done + cont.work == pytest.approx(work)
    assert g.centers["A"].snapshots[-1] is snap


def test_static_checkpoints_shorten_recovery():
    def finish_time(interval):
        eng, g, mon, inj, ck, sch = ckpt_setup(interval)
        job = Job("j", 40.0)
        sch.submit_job(job)  # P1, 20 s
        eng.schedule(15.0, "x", "user", action=lambda ev: inj.inject("P1", FaultKind.crash()))
        eng.run_until(200)
        assert job.state == JobState.FINISHED
        return job.finished_at, sum(1 for r in eng.trace if r[2] == "snapshot")

    plain, n0 = finish_time(None)
    ckpt, n = finish_time(4.0)
    assert n0 == 0 and n >= 3
    assert plain == pytest.approx(15.0 + 40.0)  # restart from scratch on P2
    assert ckpt == pytest.approx(15.0 + (40.0 - 24.0))  # resume from t=12 snapshot (24 units)


def test_dynamic_checkpoint_on_notification():
    eng, g, mon, inj, ck, sch = ckpt_setup()
    job = Job("j", 40.0)
    sch.submit_job(job)
    ck.dynamic(job, components=["P2"])
    eng.schedule(5.0, "x", "user", action=lambda ev: inj.inject("P2", FaultKind.omission(0.5)))
    eng.run_until(6.0)
    assert ck.latest("j").work_done == pytest.approx(10.0)


# -- replication ---------------------------------------------------------------


@pytest.mark.parametrize("k", [1, 3, 5])
def test_quorum_exhaustive(k):
    good = "ok:j"
    for bad in range((k - 1) // 2 + 1):
        for corrupted in combinations(range(k), bad):
            for same_wrong in (True, False):
                results = [
                    ("corrupt" if same_wrong else f"corrupt{i}") if i in corrupted else good
                    for i in range(k)
                ]
                assert vote(results) == good


def test_vote_without_majority():
    assert vote([]) is None
    assert vote(["a", "b"]) is None
    assert vote(["a", "b", "a", "b"]) is None
    assert vote(["a", "a", "b"]) == "a"


def repl_setup(n=5):
    eng = Engine(4)
    g = Grid(eng)
    g.add_center("A")
    for i in range(1, n + 1):
        g.add_pu(f"P{i}", "A", 1.0)
    mon = Monitor(g)
    inj = FaultInjector(g, mon)
    sch = Scheduler(g, mon)
    return eng, g, inj, sch, Replicator(sch)


@pytest.mark.parametrize("k, corrupt", [(1, 0), (3, 1), (5, 2)])
def test_replication_masks_byzantine_pus(k, corrupt):
    eng, g, inj, sch, rep = repl_setup(6)
    group = rep.replicate(Job("j", 10.0), k)
    hosts = sorted({r.pinned for r in group.replicas})
    assert len(hosts) == k
    assert group.voter.pinned not in hosts
    for pu in hosts[:corrupt]:
        eng.schedule(1.0, pu, "user", action=lambda ev, pu=pu: inj.inject(pu, FaultKind.byzantine()))
    eng.run_until(100)
    assert group.done and group.decided == "ok:j"
    assert sum(1 for r in group.results.values() if r != "ok:j") == corrupt
    assert any(r[2] == "vote" for r in eng.trace)


def test_replication_needs_enough_pus():
    eng, g, inj, sch, rep = repl_setup(2)
    with pytest.raises(NotEnoughPus):
        rep.replicate(Job("j", 1.0), 3)


# -- fault-tolerant DAG execution ------------------------------------------------


def dag_world(seed=1, reschedule=True, policy="etf"):
    eng = Engine(seed)
    g = Grid(eng)
    g.add_center("A", 1e9, 0.001)
    for i, p in enumerate([1.0, 1.5, 2.0], 1):
        g.add_pu(f"P{i}", "A", p)
    mon = Monitor(g)
    inj = FaultInjector(g, mon)
    sch = DagScheduler(g, mon, policy=policy, reschedule=reschedule, max_retries=-1)
    tasks = [Job(t, w) for t, w in [("a", 10), ("b", 20), ("c", 15), ("d", 12), ("e", 8)]]
    dag = Dag("d", tasks, [("a", "b", 1e6), ("a", "c", 1e6), ("b", "d", 1e6), ("c", "d", 1e6), ("d", "e", 0)])
    return eng, g, inj, sch, dag


@pytest.mark.parametrize("policy", ["etf", "mcp", "baseline"])
def test_dag_runs_in_dependency_order(policy):
    eng, g, inj, sch, dag = dag_world(policy=policy)
    sch.submit_dag(dag)
    eng.run_until(1000)
    tasks = dag.task_map
    assert all(t.state == JobState.FINISHED for t in tasks.values())
    for a, b, _ in dag.edges:
        assert tasks[b].submitted_at >= tasks[a].finished_at


@given(st.integers(0, 1000), st.sampled_from(["etf", "mcp"]))
def test_dag_survives_crashes_with_rescheduling(seed, policy):
    eng, g, inj, sch, dag = dag_world(seed, True, policy)
    for p in ("P2", "P3"):
        inj.attach_profile(FaultProfile(p, mttf=8.0, mttr=4.0))
    sch.submit_dag(dag)
    eng.run_until(5000)
    c = sch.counts()
    assert c["finished"] == c["submitted"] == 5


@given(st.integers(0, 1000), st.sampled_from(["etf", "mcp"]))
def test_dag_without_rescheduling_loses_exactly_the_interrupted(seed, policy):
    eng, g, inj, sch, dag = dag_world(seed, False, policy)
    for p in ("P2", "P3"):
        inj.attach_profile(FaultProfile(p, mttf=8.0, mttr=4.0))
    sch.submit_dag(dag)
    eng.run_until(5000)
    c = sch.counts()
    interrupted = sum(1 for r in eng.trace if r[2] == "interrupt" and r[5] == "crash" and r[4] in dag.task_map)
    assert c["submitted"] - c["finished"] == interrupted == c["failed"]
