"""Independent reference computations used by the tests."""

from __future__ import annotations

from fractions import Fraction
from itertools import permutations, product


def fair_share_times(links, flows):
    """Completion times of flows under per-link equal sharing.

    ``links`` maps link id -> (capacity_bps, latency_s); ``flows`` is a
    list of (start_s, nbytes, [link ids]).  A flow starts moving after its
    path latency and its rate is the smallest capacity/active-flow share
    along its path.  Exact rational arithmetic, event by event.
    """
    F = Fraction
    n = len(flows)
    act = [F(s) + sum(F(links[l][1]) for l in path) for s, _, path in flows]
    left = [F(b) * 8 for _, b, _ in flows]  # bits
    done: list[Fraction | None] = [None] * n
    now = F(0)
    while any(d is None for d in done):
        active = [i for i in range(n) if done[i] is None and act[i] <= now]
        for i in active:
            if left[i] == 0:
                done[i] = now
        active = [i for i in active if done[i] is None]
        count: dict[str, int] = {}
        for i in active:
            for l in flows[i][2]:
                count[l] = count.get(l, 0) + 1
        rate = {i: min(F(links[l][0]) / count[l] for l in flows[i][2]) for i in active}
        nxt = [act[i] for i in range(n) if done[i] is None and act[i] > now]
        nxt += [now + left[i] / rate[i] for i in active]
        t = min(nxt)
        for i in active:
            left[i] -= rate[i] * (t - now)
        now = t
        for i in active:
            if left[i] == 0:
                done[i] = now
    return [float(d) for d in done]


def etf_reference(tasks, edges, pus, comm):
    """Greedy earliest-finish-time list schedule, written from scratch.

    ``tasks``: id -> work, ``edges``: (a, b, bytes), ``pus``: id -> power
    (one slot each), ``comm(pa, pb, bytes)``.  Returns id -> (pu, start, finish).
    """
    parents = {t: [(a, w) for a, b, w in edges if b == t] for t in tasks}
    free = {p: 0.0 for p in pus}
    out = {}
    while len(out) < len(tasks):
        cands = []
        for t in sorted(tasks):
            if t in out or any(a not in out for a, _ in parents[t]):
                continue
            for p in sorted(pus):
                ready = max([0.0] + [out[a][2] + comm(out[a][0], p, w) for a, w in parents[t]])
                start = max(ready, free[p])
                cands.append((start + tasks[t] / pus[p], t, p, start))
        fin, t, p, start = min(cands)
        out[t] = (p, start, fin)
        free[p] = fin
    return out


def best_makespan(tasks, edges, pus, comm):
    """Optimal makespan by exhaustive search over orders and placements
    (tiny instances only)."""
    ids = sorted(tasks)
    parents = {t: [(a, w) for a, b, w in edges if b == t] for t in tasks}
    best = float("inf")
    for order in permutations(ids):
        pos = {t: i for i, t in enumerate(order)}
        if any(pos[a] > pos[b] for a, b, _ in edges):
            continue
        for place in product(sorted(pus), repeat=len(ids)):
            where = dict(zip(order, place))
            free = {p: 0.0 for p in pus}
            fin = {}
            for t in order:
                p = where[t]
                ready = max([0.0] + [fin[a] + comm(where[a], p, w) for a, w in parents[t]])
                start = max(ready, free[p])
                fin[t] = start + tasks[t] / pus[p]
                free[p] = fin[t]
            best = min(best, max(fin.values()))
    return best
