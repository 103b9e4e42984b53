"""Scenario files: flat `section.key = value` lines with '#' comments.

Sections: sim, cluster, scaling, service (service2, service3, ... for more),
workload (workload2, ... likewise, each bound to a service), and numbered
event.<n> lines. validate() returns (level, key, message) diagnostics; any
"error" level means the scenario must not run.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field

from .guest import ScalePolicy
from .orchestrator import ServiceConfig

DEFAULT_PAGES = [(4096, 0.35), (16384, 0.30), (65536, 0.20),
                 (131072, 0.10), (262144, 0.05)]
DEFAULT_SCHEDULE = [(0.0, 400.0), (20.0, 800.0), (40.0, 1200.0),
                    (60.0, 1600.0), (80.0, 2000.0), (100.0, 2400.0)]

EVENT_ACTIONS = ("kill-host", "crash-replica", "reboot-replica",
                 "halt-replica", "replicate")


@dataclass
class SimSection:
    seed: int = 42
    horizon_s: float = 120.0
    backend: str = "group"
    store_delay_ms: float = 0.5
    metrics_cadence_s: float = 1.0


@dataclass
class ClusterSection:
    hosts: list[str] = field(default_factory=lambda: ["host0"])
    capacity_mbps: float = 104.0
    cores: int = 6
    reserved_cores: int = 2
    placement_capacity: int = 0          # 0: use usable core count
    first_domid: int = 16
    boot_delay_s: float = 0.2
    monitor_period_s: float = 1.0
    heartbeat_interval_s: float = 2.0
    heartbeat_multiplier: int = 2
    destroy_bound_s: float = 5.0
    failover_detect_s: float = 4.0
    base_latency_ms: float = 2.5
    hop_latency_ms: float = 0.2


@dataclass
class ScalingSection:
    enabled: bool = True
    lo_rps: float = 100.0
    hi_rps: float = 1000.0
    poll_halt: int = 10
    period_s: float = 1.0

    def policy(self) -> ScalePolicy:
        return ScalePolicy(self.lo_rps, self.hi_rps, self.poll_halt,
                           self.period_s, self.period_s)


@dataclass
class ServiceSpec:
    config: ServiceConfig
    initial_replicas: int = 0


@dataclass
class WorkloadSection:
    service: str = ""
    enabled: bool = True
    schedule: list[tuple[float, float]] = field(default_factory=lambda: list(DEFAULT_SCHEDULE))
    pages: list[tuple[int, float]] = field(default_factory=lambda: list(DEFAULT_PAGES))
    url_count: int = 100
    jitter: float = 0.1


@dataclass
class EventSpec:
    time_s: float
    action: str
    args: list[str]


@dataclass
class Scenario:
    sim: SimSection = field(default_factory=SimSection)
    cluster: ClusterSection = field(default_factory=ClusterSection)
    scaling: ScalingSection = field(default_factory=ScalingSection)
    services: list[ServiceSpec] = field(default_factory=list)
    workloads: list[WorkloadSection] = field(default_factory=list)
    events: list[EventSpec] = field(default_factory=list)


def _parse_pairs(text: str, what: str):
    out = []
    for item in text.split(","):
        item = item.strip()
        if not item:
            continue
        left, sep, right = item.partition(":")
        if not sep:
            raise ValueError(f"bad {what} item {item!r}")
        out.append((float(left), float(right)))
    if not out:
        raise ValueError(f"empty {what}")
    return out


def parse_schedule(text: str) -> list[tuple[float, float]]:
    pairs = _parse_pairs(text, "schedule")
    return sorted((t, r) for t, r in pairs)


def parse_pages(text: str) -> list[tuple[int, float]]:
    return [(int(s), f) for s, f in _parse_pairs(text, "pages")]


def _parse_bool(text: str) -> bool:
    if text.lower() in ("true", "yes", "on", "1"):
        return True
    if text.lower() in ("false", "no", "off", "0"):
        return False
    raise ValueError(f"bad bool {text!r}")


_SECTION_RE = re.compile(r"^(sim|cluster|scaling|service\d*|workload\d*|event)\.(.+)$")


def parse_scenario(text: str) -> tuple[Scenario, list[tuple[str, str, str]]]:
    """Parse scenario text; returns (scenario, diagnostics)."""
    diags: list[tuple[str, str, str]] = []
    raw: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        key, sep, value = stripped.partition("=")
        if not sep:
            diags.append(("error", f"line {lineno}", f"not a key = value line: {line!r}"))
            continue
        key = key.strip()
        if key in raw:
            diags.append(("warning", key, "duplicate key, later value wins"))
        raw[key] = value.strip()

    sc = Scenario()
    service_secs: dict[str, dict[str, str]] = {}
    workload_secs: dict[str, dict[str, str]] = {}
    events_raw: dict[str, str] = {}

    for key, value in raw.items():
        m = _SECTION_RE.match(key)
        if not m:
            diags.append(("warning", key, "unknown key ignored"))
            continue
        section, rest = m.group(1), m.group(2)
        if section == "sim":
            _set_typed(sc.sim, rest, value, key, diags, {
                "seed": int, "horizon_s": float, "backend": str,
                "store_delay_ms": float, "metrics_cadence_s": float})
        elif section == "cluster":
            _set_typed(sc.cluster, rest, value, key, diags, {
                "hosts": lambda v: [h.strip() for h in v.split(",") if h.strip()],
                "capacity_mbps": float, "cores": int, "reserved_cores": int,
                "placement_capacity": int, "first_domid": int,
                "boot_delay_s": float, "monitor_period_s": float,
                "heartbeat_interval_s": float, "heartbeat_multiplier": int,
                "destroy_bound_s": float, "failover_detect_s": float,
                "base_latency_ms": float, "hop_latency_ms": float})
        elif section == "scaling":
            _set_typed(sc.scaling, rest, value, key, diags, {
                "enabled": _parse_bool, "lo_rps": float, "hi_rps": float,
                "poll_halt": int, "period_s": float})
        elif section.startswith("service"):
            service_secs.setdefault(section, {})[rest] = value
        elif section.startswith("workload"):
            workload_secs.setdefault(section, {})[rest] = value
        elif section == "event":
            events_raw[rest] = value

    for section in sorted(service_secs, key=lambda s: (len(s), s)):
        spec = _parse_service(section, service_secs[section], diags)
        if spec is not None:
            sc.services.append(spec)

    for section in sorted(workload_secs, key=lambda s: (len(s), s)):
        sec = workload_secs[section]
        w = WorkloadSection()
        for k, v in sec.items():
            _set_typed(w, k, v, f"{section}.{k}", diags, {
                "service": str, "enabled": _parse_bool,
                "schedule": parse_schedule, "pages": parse_pages,
                "url_count": int, "jitter": float})
        if not w.service and sc.services:
            w.service = sc.services[0].config.name
        sc.workloads.append(w)

    for n in sorted(events_raw, key=lambda x: (len(x), x)):
        parts = events_raw[n].split()
        if len(parts) < 2:
            diags.append(("error", f"event.{n}", f"bad event {events_raw[n]!r}"))
            continue
        try:
            t = float(parts[0])
        except ValueError:
            diags.append(("error", f"event.{n}", f"bad event time {parts[0]!r}"))
            continue
        sc.events.append(EventSpec(t, parts[1], parts[2:]))
    sc.events.sort(key=lambda e: e.time_s)
    return sc, diags


def _set_typed(obj, attr, value, key, diags, types) -> None:
    if attr not in types:
        diags.append(("warning", key, "unknown key ignored"))
        return
    try:
        setattr(obj, attr, types[attr](value))
    except (ValueError, TypeError) as exc:
        diags.append(("error", key, f"bad value {value!r}: {exc}"))


def _parse_service(section, sec, diags) -> ServiceSpec | None:
    required = ("name", "host", "ip")
    missing = [k for k in required if k not in sec]
    if missing:
        diags.append(("error", section, f"missing keys: {', '.join(missing)}"))
        return None
    cfg = ServiceConfig(name=sec["name"], host=sec["host"], ip=sec["ip"],
                        private_ip=sec.get("private_ip", ""))
    if not cfg.private_ip:
        # Default private address mirrors the public one on the 10.0.1 net.
        cfg.private_ip = "10.0.1." + cfg.ip.rsplit(".", 1)[1]
    spec = ServiceSpec(cfg)
    setters = {"port": int, "mac": str, "image": str, "ttl": int,
               "stop_mode": str, "dns": str, "dns_ttl": int}
    for k, v in sec.items():
        if k in required or k == "private_ip":
            continue
        if k == "initial_replicas":
            try:
                spec.initial_replicas = int(v)
            except ValueError:
                diags.append(("error", f"{section}.{k}", f"bad value {v!r}"))
        elif k in setters:
            try:
                setattr(cfg, "dns_name" if k == "dns" else k, setters[k](v))
            except ValueError as exc:
                diags.append(("error", f"{section}.{k}", f"bad value {v!r}: {exc}"))
        else:
            diags.append(("warning", f"{section}.{k}", "unknown key ignored"))
    if not cfg.image:
        cfg.image = f"{cfg.name}.xen"
    return spec


def validate(sc: Scenario) -> list[tuple[str, str, str]]:
    """Semantic checks beyond parsing."""
    diags: list[tuple[str, str, str]] = []
    if sc.sim.backend not in ("group", "learn"):
        diags.append(("error", "sim.backend", f"must be group or learn, got {sc.sim.backend!r}"))
    if sc.sim.horizon_s <= 0:
        diags.append(("error", "sim.horizon_s", "must be positive"))
    if not sc.cluster.hosts:
        diags.append(("error", "cluster.hosts", "at least one host required"))
    if len(set(sc.cluster.hosts)) != len(sc.cluster.hosts):
        diags.append(("error", "cluster.hosts", "duplicate host names"))
    if sc.cluster.cores <= sc.cluster.reserved_cores:
        diags.append(("error", "cluster.cores", "no usable cores after reservation"))
    if sc.cluster.capacity_mbps <= 0:
        diags.append(("error", "cluster.capacity_mbps", "must be positive"))
    if sc.scaling.lo_rps >= sc.scaling.hi_rps:
        diags.append(("error", "scaling.lo_rps", "lo_rps must be below hi_rps"))
    if sc.scaling.poll_halt < 0:
        diags.append(("error", "scaling.poll_halt", "must be non-negative"))
    if not sc.services:
        diags.append(("error", "service", "at least one service required"))
    names = [s.config.name for s in sc.services]
    if len(set(names)) != len(names):
        diags.append(("error", "service.name", "duplicate service names"))
    ips = [s.config.ip for s in sc.services]
    if len(set(ips)) != len(ips):
        diags.append(("error", "service.ip", "duplicate service ips"))
    for spec in sc.services:
        if spec.config.host not in sc.cluster.hosts:
            diags.append(("error", "service.host",
                          f"{spec.config.name} on unknown host {spec.config.host!r}"))
        if spec.initial_replicas < 0:
            diags.append(("error", "service.initial_replicas", "must be non-negative"))
    for w in sc.workloads:
        if w.service not in names:
            diags.append(("error", "workload.service", f"unknown service {w.service!r}"))
        if any(r < 0 for _, r in w.schedule):
            diags.append(("error", "workload.schedule", "negative rate"))
        if any(s <= 0 or f < 0 for s, f in w.pages):
            diags.append(("error", "workload.pages", "sizes must be positive, freqs non-negative"))
        freq = sum(f for _, f in w.pages)
        if abs(freq - 1.0) > 1e-6:
            diags.append(("warning", "workload.pages",
                          f"frequencies sum to {freq:g}; they are normalized"))
        if w.url_count <= 0:
            diags.append(("error", "workload.url_count", "must be positive"))
        if not 0 <= w.jitter < 1:
            diags.append(("error", "workload.jitter", "must be in [0, 1)"))
    for ev in sc.events:
        if ev.action not in EVENT_ACTIONS:
            diags.append(("error", "event", f"unknown action {ev.action!r}"))
            continue
        if ev.time_s < 0:
            diags.append(("error", "event", f"negative time {ev.time_s}"))
        if ev.action == "kill-host":
            if len(ev.args) != 1 or ev.args[0] not in sc.cluster.hosts:
                diags.append(("error", "event", f"kill-host needs a known host: {ev.args}"))
        elif ev.action == "replicate":
            if len(ev.args) != 1 or ev.args[0] not in names:
                diags.append(("error", "event", f"replicate needs a known service: {ev.args}"))
        else:
            if len(ev.args) != 2 or ev.args[0] not in names:
                diags.append(("error", "event",
                              f"{ev.action} needs <service> <replica-index>: {ev.args}"))
            else:
                try:
                    int(ev.args[1])
                except ValueError:
                    diags.append(("error", "event", f"bad replica index {ev.args[1]!r}"))
    return diags


def load_scenario(text: str) -> tuple[Scenario, list[tuple[str, str, str]]]:
    sc, diags = parse_scenario(text)
    diags.extend(validate(sc))
    return sc, diags


def apply_overrides(sc: Scenario, overrides: list[str],
                    diags: list[tuple[str, str, str]]) -> None:
    """Apply CLI --set section.key=value pairs on top of a parsed scenario."""
    for line in overrides:
        key, sep, value = line.partition("=")
        if not sep:
            diags.append(("error", line, "override must be section.key=value"))
            continue
        _apply_one(sc, key.strip(), value.strip(), diags)


def _apply_one(sc: Scenario, key: str, value: str, diags) -> None:
    m = _SECTION_RE.match(key)
    if not m:
        diags.append(("error", key, "unknown override section"))
        return
    section, rest = m.group(1), m.group(2)
    if section == "sim":
        _set_typed(sc.sim, rest, value, key, diags, {
            "seed": int, "horizon_s": float, "backend": str,
            "store_delay_ms": float, "metrics_cadence_s": float})
    elif section == "cluster":
        _set_typed(sc.cluster, rest, value, key, diags, {
            "hosts": lambda v: [h.strip() for h in v.split(",") if h.strip()],
            "capacity_mbps": float, "cores": int, "reserved_cores": int,
            "placement_capacity": int, "first_domid": int,
            "boot_delay_s": float, "monitor_period_s": float,
            "heartbeat_interval_s": float, "heartbeat_multiplier": int,
            "destroy_bound_s": float, "failover_detect_s": float,
            "base_latency_ms": float, "hop_latency_ms": float})
    elif section == "scaling":
        _set_typed(sc.scaling, rest, value, key, diags, {
            "enabled": _parse_bool, "lo_rps": float, "hi_rps": float,
            "poll_halt": int, "period_s": float})
    elif section.startswith("workload"):
        idx = int(section[8:] or "1") - 1
        if idx >= len(sc.workloads):
            diags.append(("error", key, "no such workload section"))
            return
        _set_typed(sc.workloads[idx], rest, value, key, diags, {
            "service": str, "enabled": _parse_bool, "schedule": parse_schedule,
            "pages": parse_pages, "url_count": int, "jitter": float})
    elif section.startswith("service"):
        idx = int(section[7:] or "1") - 1
        if idx >= len(sc.services):
            diags.append(("error", key, "no such service section"))
            return
        spec = sc.services[idx]
        if rest == "initial_replicas":
            _set_typed(spec, rest, value, key, diags, {"initial_replicas": int})
            return
        _set_typed(spec.config, "dns_name" if rest == "dns" else rest,
                   value, key, diags, {
                       "name": str, "host": str, "ip": str, "private_ip": str,
                       "port": int, "mac": str, "image": str, "ttl": int,
                       "stop_mode": str, "dns_name": str, "dns_ttl": int})
    else:
        diags.append(("error", key,
                      "overrides support sim/cluster/scaling/service/workload keys"))
