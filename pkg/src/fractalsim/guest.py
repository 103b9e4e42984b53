"""Guest-side library: invocation client, scaling policy, and poll loop.

Every instance (first instance and replica alike) runs the same code: a
client that talks to its local control plane purely through store writes,
and a poll loop that compares the trailing completion rate against the
policy band. Replication triggers immediately on a high sample; halting
needs poll_halt consecutive quiet polls first, and invocation errors reset
that counter, so a replica backs off when the control plane says Retry.

Scale-down ordering: halt success -> wait until in-service requests drain
-> push the service log back to the first instance -> die. The die request
is only issued once the merge is applied, so log entries cannot be lost to
destruction.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass

from .kvstore import Store, encode_list, decode_list
from .orchestrator import (
    ERR_PENDING,
    RequestRecord,
    encode_request,
    parse_response,
    request_key,
    response_key,
    vm_id,
)


@dataclass
class ScalePolicy:
    """Thresholds for the poll loop; defaults follow the reference setup."""

    lo_rps: float = 100.0
    hi_rps: float = 1000.0
    poll_halt: int = 10
    period: float = 1.0
    window: float = 1.0


class ServiceLog:
    """Append-only per-instance log merged back on scale-down.

    Entries are (id, ts, desc) with globally unique ids <instance>/<seq>,
    encoded as S(id@ts@desc) atoms in a bracketed list.
    """

    def __init__(self, instance: str):
        self.instance = instance
        self.entries: list[tuple[str, float, str]] = []
        self._seq = 0

    def append(self, ts: float, desc: str) -> str:
        eid = f"{self.instance}/{self._seq}"
        self._seq += 1
        self.entries.append((eid, ts, desc))
        return eid

    def encode(self) -> str:
        return encode_list(
            [("S", f"{eid}@{ts:.6f}@{desc}") for eid, ts, desc in self.entries])

    def load(self, value: str) -> None:
        self.entries = []
        top = 0
        for _, text in decode_list(value):
            eid, ts, desc = text.split("@", 2)
            self.entries.append((eid, float(ts), desc))
            if eid.startswith(self.instance + "/"):
                try:
                    top = max(top, int(eid.rsplit("/", 1)[1]) + 1)
                except ValueError:
                    pass
        self._seq = top

    def __len__(self) -> int:
        return len(self.entries)


class FractalClient:
    """Store-backed invocation endpoint for one instance.

    At most one invocation may be outstanding: a second invoke is rejected
    locally with InvocationPending and never touches the store.
    """

    def __init__(self, name: str, store: Store):
        self.name = name
        self.store = store
        self._outstanding = False
        self._handler = None
        self._watch = store.watch_key(response_key(name), self._on_response)

    def invoke(self, verb: str, target: str, handler) -> None:
        if self._outstanding:
            handler(("error", ERR_PENDING))
            return
        self._outstanding = True
        self._handler = handler
        value = encode_request(RequestRecord(self.name, verb, target))
        self.store.put(request_key(self.name), value, identity=vm_id(self.name))

    def replicate(self, service: str, handler) -> None:
        self.invoke("replicate", service, handler)

    def halt(self, handler) -> None:
        self.invoke("halt", self.name, handler)

    def die(self, handler) -> None:
        self.invoke("die", self.name, handler)

    def _on_response(self, ev) -> None:
        if ev.deleted or ev.value is None or not self._outstanding:
            return
        self._outstanding = False
        handler, self._handler = self._handler, None
        handler(parse_response(ev.value))

    def close(self) -> None:
        self._watch.cancel()


class GuestInstance:
    """The application loop one instance runs.

    Dependencies are plain callables so the unit tests can drive the loop
    with synthetic metrics: metric() yields the load sample (defaults to the
    trailing completion rate), in_flight() the current in-service request
    count, and push_log(value, on_applied) merges the encoded log into the
    first instance's store.
    """

    def __init__(self, name: str, service: str, kind: str, clock,
                 client: FractalClient, policy: ScalePolicy,
                 in_flight=lambda: 0, push_log=None, metric=None,
                 scaling_enabled: bool = True, seed_log: str | None = None):
        self.name = name
        self.service = service
        self.kind = kind
        self.clock = clock
        self.client = client
        self.policy = policy
        self.in_flight = in_flight
        self.push_log = push_log
        self.metric = metric or self.current_rps
        self.state = "running"
        self.poll_n = 0
        self.polls = 0
        self.halt_poll: int | None = None
        self.replicate_calls = 0
        self.halt_calls = 0
        self.die_calls = 0
        self.events: list[tuple[float, str]] = []
        self.log = ServiceLog(name)
        if seed_log:
            self.log.load(seed_log)
        self._completions: deque[float] = deque()
        self.window_latencies: list[float] = []
        self._poll_ev = None
        if scaling_enabled:
            self._poll_ev = clock.after(policy.period, self._poll)

    # -- Serving --

    def record_completion(self, t: float, latency_ms: float, desc: str) -> None:
        self._completions.append(t)
        self.window_latencies.append(latency_ms)
        self.log.append(t, desc)
        if self.state == "draining" and self.in_flight() == 0:
            self._merge_state()

    def current_rps(self) -> float:
        """Completed requests in the trailing window, per second."""
        now = self.clock.now
        cutoff = now - self.policy.window
        while self._completions and self._completions[0] <= cutoff:
            self._completions.popleft()
        return len(self._completions) / self.policy.window

    # -- Poll loop --

    def _poll(self) -> None:
        self._poll_ev = None
        if self.state != "running":
            return
        self.polls += 1
        rps = self.metric()
        if rps >= self.policy.hi_rps:
            self.poll_n = 0
            self.replicate_calls += 1
            self.events.append((self.clock.now, "replicate"))
            self.client.replicate(self.service, self._on_replicate)
        elif self.poll_n < self.policy.poll_halt:
            self.poll_n += 1
        elif rps <= self.policy.lo_rps:
            self.halt_calls += 1
            self.halt_poll = self.polls
            self.events.append((self.clock.now, "halt"))
            self.client.halt(self._on_halt)
        else:
            self.poll_n = 0
        if self.state == "running":
            self._poll_ev = self.clock.after(self.policy.period, self._poll)

    def _on_replicate(self, response) -> None:
        status, msg = response
        self.events.append((self.clock.now, f"replicate:{status}"))
        if status == "error":
            self.poll_n = 0

    def _on_halt(self, response) -> None:
        status, msg = response
        self.events.append((self.clock.now, f"halt:{status}"))
        if status == "error":
            # Retry/refusal: keep serving, start the quiet count over.
            self.poll_n = 0
            return
        self.state = "draining"
        if self.in_flight() == 0:
            self._merge_state()

    # -- Scale-down tail --

    def _merge_state(self) -> None:
        self.state = "merging"
        if self.push_log is None:
            self._send_die()
            return
        self.push_log(self.log.encode(), self._send_die)

    def _send_die(self) -> None:
        self.die_calls += 1
        self.events.append((self.clock.now, "die"))
        self.client.die(self._on_die)

    def _on_die(self, response) -> None:
        status, _ = response
        self.events.append((self.clock.now, f"die:{status}"))
        if status == "ok":
            self.state = "dead"

    def stop(self) -> None:
        """Instance destroyed or host gone: no more polls or responses."""
        self.state = "dead"
        if self._poll_ev is not None:
            self._poll_ev.cancel()
            self._poll_ev = None
        self.client.close()
