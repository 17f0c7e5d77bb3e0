"""End-to-end acceptance checks; each records a pass/fail line in the summary."""

import statistics
import time
from itertools import combinations, product

from scipy.stats import spearmanr

import conftest
from checks import FLOW_CASES, mttf_gap_check, rel_err, run_flow_case, sampler_pvalues
from depsim.dependsched import vote
from depsim.scenario import SHIPPED, export, load_scenario, mttf_for_level, run


def record(n, ok, detail):
    conftest.ACCEPTANCE[n] = (bool(ok), detail)
    assert ok, detail


def test_criterion_1_determinism(tmp_path):
    worst, diffs = 0.0, []
    for name in SHIPPED:
        cfg = load_scenario(name)
        for tag in ("a", "b"):
            t0 = time.perf_counter()
            export(run(cfg, seed=42), tmp_path / name / tag)
            worst = max(worst, time.perf_counter() - t0)
        for f in ("trace.csv", "metrics.csv", "report.csv"):
            if (tmp_path / name / "a" / f).read_bytes() != (tmp_path / name / "b" / f).read_bytes():
                diffs.append(f"{name}/{f}")
    record(1, not diffs and worst < 10.0,
           f"{len(SHIPPED)} scenarios byte-identical={not diffs} slowest run {worst:.2f}s (<10s)")


def test_criterion_2_fair_share_oracle():
    worst = 0.0
    for case in FLOW_CASES:
        sim, oracle = run_flow_case(case)
        worst = max([worst, *(rel_err(s, o) for s, o in zip(sim, oracle))])
    record(2, len(FLOW_CASES) >= 10 and worst <= 1e-9,
           f"{len(FLOW_CASES)} topologies, max relative error {worst:.2e} (<=1e-9)")


def _transient_variant(base, loss):
    cfg = base.copy()
    for s in cfg.of("fault"):
        s.values["loss_fraction"] = str(loss)
    return cfg


def _permanent_variant(base, level):
    cfg = base.copy()
    cfg.set("engine", None, "transfer_retries", 10)
    for s in list(cfg.of("fault")):
        cfg.remove("fault", s.name)
    for s in cfg.of("link") + cfg.of("router"):
        cfg.set("fault", s.name, "kind", "crash")
        cfg.set("fault", s.name, "permanent", True)
        cfg.set("fault", s.name, "mttf_s", mttf_for_level(level, 600.0))
    return cfg


def test_criterion_3_network_faults():
    t0 = time.perf_counter()
    base = load_scenario("net-faults-4centers")
    assert base.of("fault") and base.find("engine").values["transfer_retries"] == "-1"
    means, ratios = [], []
    for loss in (0.1, 0.3, 0.5):
        cfg = _transient_variant(base, loss)
        per_seed = []
        for seed in range(20):
            res = run(cfg, seed)
            m = res.metrics
            ratios.append(m.count("delivered_bytes", "net") / m.count("requested_bytes", "net"))
            per_seed.append(res.report.mean_transfer_time)
        means.append(statistics.mean(per_seed))
    part_a = all(r == 1.0 for r in ratios) and means[0] < means[1] < means[2]

    levels = (0.1, 0.2, 0.3, 0.4, 0.5)
    lost = []
    for p in levels:
        cfg = _permanent_variant(base, p)
        lost.append(statistics.mean(run(cfg, seed).report.lost_bytes for seed in range(20)))
    rho = spearmanr(levels, lost).statistic
    part_b = all(a <= b for a, b in zip(lost, lost[1:])) and rho >= 0.9
    elapsed = time.perf_counter() - t0
    record(3, part_a and part_b and elapsed < 120,
           f"delivered/requested min {min(ratios):.3f}, mean transfer "
           + "/".join(f"{x:.1f}" for x in means) + "s; lost bytes "
           + "/".join(f"{x:.3g}" for x in lost) + f", spearman {rho:.2f}; {elapsed:.1f}s (<120s)")


def test_criterion_4_dag_finalized_vs_submitted():
    t0 = time.perf_counter()
    cfg = load_scenario("dag-ft")
    problems = []
    runs = 0
    for policy in ("etf", "mcp"):
        for seed in range(42, 52):
            res = run(cfg, seed, policy=policy)
            on = res.report
            if not on.submitted == on.finished == len(res.sim.jobs):
                problems.append(f"{policy}/{seed} resched {on.finished}/{on.submitted}")
            off = run(cfg, seed, policy=policy, reschedule=False)
            r = off.report
            tasks = set(off.sim.jobs)
            interrupted = sum(1 for row in off.engine.trace
                              if row[2] == "interrupt" and row[5] == "crash" and row[4] in tasks)
            if not (r.finished < r.submitted and r.submitted - r.finished == interrupted):
                problems.append(f"{policy}/{seed} no-resched {r.finished}/{r.submitted} vs {interrupted}")
            runs += 2
    elapsed = time.perf_counter() - t0
    record(4, not problems and elapsed < 60,
           f"{runs} runs (etf, mcp x 10 seeds), mismatches {problems or 'none'}; {elapsed:.1f}s (<60s)")


def test_criterion_5_attack_window():
    res = run(load_scenario("vo-attack"))
    m = res.metrics
    start, end = 40.0, 70.0
    verdicts = []
    for metric in ("connections_received", "throughput_bps"):
        series = m.window_values(metric, "DB1")
        baseline = statistics.mean(v for t, v in series if t + 1 <= start)
        inside = [v for t, v in series if t >= start and t + 1 <= end]
        verdicts.append((metric, baseline, min(inside), len(inside), min(inside) > baseline))
    injected = sum(1 for row in res.engine.trace if row[2] == "dbop" and row[5].startswith("get"))
    detected = res.report.attacks_detected
    ok = all(v[-1] for v in verdicts) and detected == injected and injected > 0
    record(5, ok, "; ".join(f"{n} baseline {b:.3g} < min in-attack {lo:.3g} over {k} windows"
                            for n, b, lo, k, _ in verdicts)
           + f"; attacks_detected {detected} == injected get ops {injected}")


def test_criterion_6_sampler_statistics():
    pvals = sampler_pvalues(n=10_000)
    mean, se = mttf_gap_check(mttf=50.0, n=10_000)
    ok = len(pvals) == 5 and all(p >= 0.01 for p in pvals.values()) and abs(mean - 50.0) <= 3 * se
    record(6, ok, ", ".join(f"{k} p={p:.3f}" for k, p in sorted(pvals.items()))
           + f"; MTTF mean {mean:.2f} vs 50 (3 SE = {3 * se:.2f})")


def test_criterion_7_quorum():
    good = "ok:j"
    cases = 0
    bad_outcomes = 0
    for k in (1, 3, 5):
        for nbad in range((k - 1) // 2 + 1):
            for corrupted in combinations(range(k), nbad):
                # every way the corrupted replicas can agree or disagree among themselves
                for labels in product(range(nbad), repeat=nbad):
                    results = [good] * k
                    for i, lab in zip(corrupted, labels):
                        results[i] = f"corrupt{lab}"
                    cases += 1
                    bad_outcomes += vote(results) != good
    record(7, bad_outcomes == 0, f"{cases} corruption patterns for k in 1/3/5, wrong decisions {bad_outcomes}")


def test_criterion_8_invariant_suite():
    import test_dependsched
    import test_engine
    import test_faults
    import test_resources
    import test_security

    suite = {
        "event ordering": test_engine.test_executed_events_are_ordered_by_time_then_seq,
        "crash isolation": test_resources.test_crash_isolation,
        "notification ordering": test_faults.test_every_subscriber_sees_every_fault_in_order,
        "watch exclusivity": test_dependsched.test_watch_exclusivity,
        "checkpoint conservation": test_dependsched.test_checkpoint_conservation,
        "authorize purity": test_security.test_authorize_is_pure_and_deny_by_default,
        "filter first-match": test_security.test_filter_first_match_equals_linear_scan,
    }
    t0 = time.perf_counter()
    failed = []
    for name, prop in suite.items():
        try:
            prop()
        except Exception as e:  # report every failing property, not just the first
            failed.append(f"{name}: {type(e).__name__}")
    elapsed = time.perf_counter() - t0
    record(8, not failed and elapsed < 60,
           f"{len(suite)} properties, failures {failed or 'none'}; {elapsed:.1f}s (<60s)")
