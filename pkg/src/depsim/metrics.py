"""Counters and time series collected during a run."""

from __future__ import annotations

import math
from collections import defaultdict
from dataclasses import dataclass, fields

from .engine import format_float

METRICS_HEADER = "run_id,seed,time,metric,component,value"


class MetricsStore:
    """Named counters and time series, both keyed by ``(metric, component)``.

    Windowed metrics (connections, throughput) are accumulated into bins
    of ``window`` seconds with :meth:`bin` and turned into series by
    :meth:`close_windows` at the end of a run.
    """

    def __init__(self, window: float = 1.0):
        if not window > 0:
            raise ValueError("metric window must be positive")
        self.window = window
        self.counters: dict[tuple[str, str], float] = defaultdict(float)
        self.series: dict[tuple[str, str], list[tuple[float, float]]] = defaultdict(list)
        self._bins: dict[tuple[str, str], dict[int, float]] = {}
        self._per_second: set[str] = set()

    def incr(self, metric: str, component: str, amount: float = 1.0) -> None:
        self.counters[(metric, component)] += amount

    def count(self, metric: str, component: str | None = None) -> float:
        if component is not None:
            return self.counters.get((metric, component), 0.0)
        return sum(v for (m, _), v in self.counters.items() if m == metric)

    def observe(self, metric: str, component: str, time: float, value: float) -> None:
        points = self.series[(metric, component)]
        if points and time < points[-1][0]:
            raise ValueError(f"series {metric}/{component} went back in time")
        points.append((time, value))

    def track_window(self, metric: str, component: str, rate: bool = False) -> None:
        """Declare a windowed series so empty windows are reported as zero."""
        self._bins.setdefault((metric, component), {})
        if rate:
            self._per_second.add(metric)

    def bin(self, metric: str, component: str, time: float, amount: float) -> None:
        bins = self._bins.setdefault((metric, component), {})
        idx = int(math.floor(time / self.window))
        bins[idx] = bins.get(idx, 0.0) + amount

    def close_windows(self, horizon: float) -> None:
        nwin = int(math.ceil(horizon / self.window)) if horizon > 0 else 0
        for key in sorted(self._bins):
            bins = self._bins[key]
            scale = 1.0 / self.window if key[0] in self._per_second else 1.0
            last = max([nwin - 1, *bins]) if bins else nwin - 1
            points = self.series[key]
            for i in range(last + 1):
                points.append((i * self.window, bins.get(i, 0.0) * scale))
        self._bins.clear()

    def window_values(self, metric: str, component: str) -> list[tuple[float, float]]:
        return list(self.series.get((metric, component), []))

    def rows(self, horizon: float) -> list[tuple[float, str, str, float]]:
        """All values as ``(time, metric, component, value)`` sorted for export."""
        out = [(horizon, m, c, v) for (m, c), v in self.counters.items()]
        for (m, c), points in self.series.items():
            out.extend((t, m, c, v) for t, v in points)
        out.sort(key=lambda r: (r[0], r[1], r[2]))
        return out

    def csv_lines(self, run_id: str, seed: int, horizon: float):
        yield METRICS_HEADER
        for t, m, c, v in self.rows(horizon):
            yield f"{run_id},{seed},{format_float(t)},{m},{c},{format_float(v)}"


@dataclass
class RunReport:
    run_id: str
    seed: int
    horizon: float
    submitted: int = 0
    finished: int = 0
    failed: int = 0
    rescheduled: int = 0
    lost_bytes: float = 0.0
    mean_transfer_time: float = 0.0
    attacks_detected: int = 0

    @classmethod
    def header(cls) -> str:
        return ",".join(f.name for f in fields(cls))

    def csv_row(self) -> str:
        cells = []
        for f in fields(self):
            v = getattr(self, f.name)
            cells.append(format_float(v) if isinstance(v, float) else str(v))
        return ",".join(cells)

    @property
    def in_flight(self) -> int:
        return self.submitted - self.finished - self.failed
