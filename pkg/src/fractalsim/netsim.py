"""Deterministic flow-level network simulation.

A single SimClock drives everything through a priority queue ordered by
(time, insertion sequence): equal-time events fire in the order they were
scheduled, never in hash or identity order, which is what makes same-seed
runs byte-identical. There is no wall clock anywhere.

Replica service is processor sharing over a bounded in-service set: a
replica serves at an effective byte rate split evenly over up to max_active
concurrent requests, and later arrivals wait FIFO for a slot. The
implementation tracks virtual service time so each arrival or departure
costs O(log n), not a rescan. Host core limits squeeze the effective rate
when a host runs more instances than it has usable cores.
"""

from __future__ import annotations

import heapq
import math
from collections import deque
from dataclasses import dataclass, field
from typing import Callable

from .switchfab import FlowKey


class SchedulePast(Exception):
    pass


class Event:
    __slots__ = ("time", "seq", "fn", "cancelled")

    def __init__(self, time: float, seq: int, fn: Callable[[], None]):
        self.time = time
        self.seq = seq
        self.fn = fn
        self.cancelled = False

    def cancel(self) -> None:
        self.cancelled = True


class SimClock:
    """Event loop over (time, seq)-ordered callbacks."""

    def __init__(self) -> None:
        self.now = 0.0
        self._heap: list[tuple[float, int, Event]] = []
        self._seq = 0

    def schedule(self, at: float, fn: Callable[[], None]) -> Event:
        if at < self.now - 1e-12:
            raise SchedulePast(f"schedule at {at} before now {self.now}")
        ev = Event(max(at, self.now), self._seq, fn)
        self._seq += 1
        heapq.heappush(self._heap, (ev.time, ev.seq, ev))
        return ev

    def after(self, delay: float, fn: Callable[[], None]) -> Event:
        return self.schedule(self.now + delay, fn)

    def run_until(self, t: float) -> None:
        """Fire everything scheduled at or before t, then set now = t."""
        while self._heap and self._heap[0][0] <= t:
            _, _, ev = heapq.heappop(self._heap)
            if ev.cancelled:
                continue
            self.now = ev.time
            ev.fn()
        self.now = max(self.now, t)

    def pending(self) -> int:
        return sum(1 for _, _, ev in self._heap if not ev.cancelled)


@dataclass
class Job:
    """One request being served; tag carries the caller's flow record."""

    job_id: int
    size: float
    tag: object = None


DEFAULT_MAX_ACTIVE = 32


class ReplicaQueue:
    """Processor-sharing server: rate is split evenly over in-service jobs.

    At most max_active jobs are in service at once; later arrivals wait in
    FIFO order for a slot. The cap keeps a saturated server completing jobs
    at its capacity instead of spreading service ever thinner over an
    unbounded set, while light load still sees the sharing slowdown.

    Virtual time bookkeeping: v advances at rate/n per real second while n
    jobs are in service, and a job of size s entering at virtual time v0
    completes when v reaches v0 + s. Completions therefore pop off a heap in
    target order without per-tick scanning.
    """

    def __init__(self, clock: SimClock, rate: float,
                 on_complete: Callable[[Job], None],
                 max_active: int = DEFAULT_MAX_ACTIVE):
        if rate <= 0:
            raise ValueError("rate must be positive")
        if max_active < 1:
            raise ValueError("max_active must be at least 1")
        self.clock = clock
        self.rate = rate
        self.on_complete = on_complete
        self.max_active = max_active
        self._jobs: dict[int, Job] = {}
        self._pending: deque[Job] = deque()
        self._targets: list[tuple[float, int]] = []
        self._v = 0.0
        self._v_at = clock.now
        self._wake: Event | None = None
        self._busy_accum = 0.0
        self._busy_since: float | None = None
        self._served_bytes = 0.0

    def __len__(self) -> int:
        return len(self._jobs) + len(self._pending)

    # -- Virtual time --

    def _advance(self) -> None:
        now = self.clock.now
        if self._jobs:
            self._v += (now - self._v_at) * self.rate / len(self._jobs)
        self._v_at = now

    def _reschedule(self) -> None:
        if self._wake is not None:
            self._wake.cancel()
            self._wake = None
        while self._targets and self._targets[0][1] not in self._jobs:
            heapq.heappop(self._targets)
        if not self._targets:
            return
        target_v = self._targets[0][0]
        dt = (target_v - self._v) * len(self._jobs) / self.rate
        self._wake = self.clock.schedule(self.clock.now + max(dt, 0.0), self._fire)

    def _fire(self) -> None:
        self._wake = None
        self._advance()
        eps = 1e-9 * max(1.0, abs(self._v))
        finished = []
        while self._targets:
            target_v, job_id = self._targets[0]
            if job_id not in self._jobs:
                heapq.heappop(self._targets)
                continue
            if target_v > self._v + eps:
                break
            heapq.heappop(self._targets)
            finished.append(self._jobs.pop(job_id))
        self._admit()
        self._note_busy()
        for job in finished:
            self._served_bytes += job.size
            self.on_complete(job)
        self._reschedule()

    def _admit(self) -> None:
        while self._pending and len(self._jobs) < self.max_active:
            job = self._pending.popleft()
            self._jobs[job.job_id] = job
            heapq.heappush(self._targets, (self._v + job.size, job.job_id))

    def _note_busy(self) -> None:
        now = self.clock.now
        if self._jobs and self._busy_since is None:
            self._busy_since = now
        elif not self._jobs and self._busy_since is not None:
            self._busy_accum += now - self._busy_since
            self._busy_since = None

    # -- Operations --

    def add(self, job: Job) -> None:
        self._advance()
        if len(self._jobs) < self.max_active:
            self._jobs[job.job_id] = job
            heapq.heappush(self._targets, (self._v + job.size, job.job_id))
            self._note_busy()
            self._reschedule()
        else:
            self._pending.append(job)

    def set_rate(self, rate: float) -> None:
        if rate <= 0:
            raise ValueError("rate must be positive")
        self._advance()
        self.rate = rate
        self._reschedule()

    def fail_all(self) -> list[Job]:
        """Abort every in-flight job (crash/reboot); returns them."""
        self._advance()
        failed = [self._jobs[j] for j in sorted(self._jobs)]
        failed.extend(self._pending)
        self._jobs.clear()
        self._pending.clear()
        self._targets.clear()
        self._note_busy()
        if self._wake is not None:
            self._wake.cancel()
            self._wake = None
        return failed

    def busy_total(self, now: float) -> float:
        """Cumulative busy seconds up to now."""
        extra = (now - self._busy_since) if self._busy_since is not None else 0.0
        return self._busy_accum + extra

    @property
    def served_bytes(self) -> float:
        return self._served_bytes


@dataclass
class HostModel:
    """Core budget of one host; the agent reserves cores for itself."""

    cores: int = 6
    reserved: int = 2

    @property
    def usable(self) -> int:
        return self.cores - self.reserved

    def share(self, instances: int) -> float:
        """Fraction of one core's rate each of n single-core instances gets."""
        if instances <= 0:
            return 1.0
        return min(1.0, self.usable / instances)


# -- Workload --

@dataclass
class WorkloadSpec:
    """Open-loop request generator description."""

    schedule: list[tuple[float, float]]      # (start_s, rps) steps
    pages: list[tuple[int, float]]           # (size_bytes, frequency)
    dst_ip: str = "10.0.0.18"
    dst_port: int = 80
    url_count: int = 100
    jitter: float = 0.1

    def rate_at(self, t: float) -> float:
        rate = 0.0
        for start, rps in self.schedule:
            if start <= t:
                rate = rps
            else:
                break
        return rate

    def mean_page(self) -> float:
        total = sum(f for _, f in self.pages)
        return sum(s * f for s, f in self.pages) / total


def build_urls(spec: WorkloadSpec, rng) -> list[int]:
    """Fixed URL seed list: sizes by largest-remainder quota, then shuffled."""
    total_freq = sum(f for _, f in spec.pages)
    quotas = [(s, f / total_freq * spec.url_count) for s, f in spec.pages]
    counts = {s: int(math.floor(q)) for s, q in quotas}
    remainder = spec.url_count - sum(counts.values())
    by_frac = sorted(quotas, key=lambda sq: (-(sq[1] - math.floor(sq[1])), sq[0]))
    for s, _ in by_frac[:remainder]:
        counts[s] += 1
    urls = [s for s, _ in spec.pages for _ in range(counts[s])]
    rng.shuffle(urls)
    return urls


class Workload:
    """Schedules arrivals on the clock and emits one flow per request.

    Arrivals are evenly spaced at the scheduled rate with ±jitter seeded
    noise. Each request gets a unique client 5-tuple and a page size cycled
    from the URL seed list.
    """

    def __init__(self, clock: SimClock, spec: WorkloadSpec, rng,
                 start_flow: Callable[[FlowKey, int, float], None],
                 horizon: float):
        self.clock = clock
        self.spec = spec
        self.rng = rng
        self.start_flow = start_flow
        self.horizon = horizon
        self.urls = build_urls(spec, rng)
        self.count = 0

    def start(self) -> None:
        first = self._next_active_time(0.0)
        if first is not None:
            self.clock.schedule(first, self._arrive)

    def _next_active_time(self, t: float) -> float | None:
        if self.spec.rate_at(t) > 0:
            return t
        for start, rps in self.spec.schedule:
            if start > t and rps > 0:
                return start
        return None

    def _arrive(self) -> None:
        now = self.clock.now
        if now >= self.horizon:
            return
        size = self.urls[self.count % len(self.urls)]
        key = self._client_key(self.count)
        self.count += 1
        self.start_flow(key, size, now)
        rate = self.spec.rate_at(now)
        if rate <= 0:
            nxt = self._next_active_time(now + 1e-9)
            if nxt is not None and nxt < self.horizon:
                self.clock.schedule(nxt, self._arrive)
            return
        gap = (1.0 / rate) * (1.0 + self.spec.jitter * self.rng.uniform(-1.0, 1.0))
        if now + gap < self.horizon:
            self.clock.schedule(now + gap, self._arrive)

    def _client_key(self, c: int) -> FlowKey:
        hi, lo = divmod(c, 60000)
        src_ip = f"172.16.{(hi >> 8) & 255}.{hi & 255}"
        return FlowKey(src_ip, self.spec.dst_ip, 6, 1024 + lo, self.spec.dst_port)


# -- Metrics --

METRIC_COLUMNS = ("time_s", "service", "replica_id", "host_id", "rps",
                  "utilization", "mean_latency_ms", "p99_latency_ms",
                  "replica_count", "delivery_failures")


def mean_latency_ms(latencies_ms: list[float]) -> float:
    return sum(latencies_ms) / len(latencies_ms) if latencies_ms else 0.0


def percentile(values: list[float], q: float) -> float:
    """Nearest-rank percentile, q in (0, 1]."""
    if not values:
        return 0.0
    ordered = sorted(values)
    idx = math.ceil(q * len(ordered)) - 1
    return ordered[max(idx, 0)]


def p99_latency_ms(latencies_ms: list[float]) -> float:
    return percentile(latencies_ms, 0.99)


def format_row(time_s: float, service: str, replica_id: str, host_id: str,
               rps: float, utilization: float, mean_ms: float, p99_ms: float,
               replica_count: int, delivery_failures: int) -> str:
    """Fixed formatting so identical runs render identical bytes."""
    return (f"{time_s:.1f},{service},{replica_id},{host_id},{rps:.1f},"
            f"{min(max(utilization, 0.0), 1.0):.3f},{mean_ms:.3f},{p99_ms:.3f},"
            f"{replica_count},{delivery_failures}")


class MetricsWriter:
    """Append-only CSV sink; header first, one flush per window."""

    def __init__(self, path):
        self.path = path
        self._fh = open(path, "w")
        self._fh.write(",".join(METRIC_COLUMNS) + "\n")
        self._fh.flush()

    def write_row(self, line: str) -> None:
        self._fh.write(line + "\n")

    def flush(self) -> None:
        self._fh.flush()

    def close(self) -> None:
        self._fh.flush()
        self._fh.close()
