"""Cluster assembly and run loop: hosts, flow routing, events, metrics.

This module is the fabric the orchestrators talk through. It owns the
shared clock, builds one store/switch/registry/orchestrator per host,
routes generated flows through the switches into replica queues, applies
scripted events (crashes, host kills, failover), samples metrics, and
enforces the run-wide conservation invariant: every started flow ends
completed or failed, or is still in flight at the horizon.
"""

from __future__ import annotations

import ipaddress
import random
from dataclasses import dataclass

from .guest import FractalClient, GuestInstance
from .kvstore import Store, merge_logs
from .netsim import (
    HostModel,
    Job,
    MetricsWriter,
    ReplicaQueue,
    SimClock,
    Workload,
    WorkloadSpec,
    format_row,
    mean_latency_ms,
    p99_latency_ms,
    percentile,
)
from .orchestrator import (
    HostedVm,
    HypervisorRegistry,
    Orchestrator,
    OrchestratorConfig,
    ServiceConfig,
    HostLoad,
    orch_id,
    place_local_first,
    response_key,
    vm_id,
    vm_root,
)
from .scenario import Scenario
from .switchfab import FlowKey, SoftSwitch


@dataclass
class Host:
    name: str
    store: Store
    switch: SoftSwitch
    registry: HypervisorRegistry
    orch: Orchestrator
    model: HostModel
    alive: bool = True


class FlowRecord:
    __slots__ = ("flow_id", "key", "size", "service", "start", "state",
                 "net_ms", "replica", "host", "reason")

    def __init__(self, flow_id, key, size, service, start):
        self.flow_id = flow_id
        self.key = key
        self.size = size
        self.service = service
        self.start = start
        self.state = "open"
        self.net_ms = 0.0
        self.replica = None
        self.host = None
        self.reason = None


class InvariantViolation(Exception):
    pass


class Cluster:
    """One simulated deployment built from a scenario."""

    def __init__(self, sc: Scenario, metrics_path=None, trace_flows: bool = False):
        self.sc = sc
        self.clock = SimClock()
        self.trace_flows = trace_flows
        self.capacity_bps = sc.cluster.capacity_mbps * 1e6
        self.base_ms = sc.cluster.base_latency_ms
        self.hop_ms = sc.cluster.hop_latency_ms
        self.store_delay = sc.sim.store_delay_ms / 1000.0
        self.policy = sc.scaling.policy()
        self.hosts: dict[str, Host] = {}
        self.services: dict[str, ServiceConfig] = {}
        self.app_ids: dict[str, ServiceConfig] = {}
        self.instances: dict[str, GuestInstance] = {}
        self.queues: dict[str, ReplicaQueue] = {}
        self.vm_host: dict[str, str] = {}
        self.vif_map: dict[str, dict[str, str]] = {}
        self.instance_order: dict[str, list[str]] = {}
        self.replica_order: dict[str, list[str]] = {}
        self.started: dict[str, int] = {}
        self.completed: dict[str, int] = {}
        self.failed: dict[str, int] = {}
        self.latencies: dict[str, list[float]] = {}
        self.misdeliveries = 0
        self.actions: list[tuple[float, str, str]] = []
        self._open: dict[int, FlowRecord] = {}
        self.flow_log: list[FlowRecord] = []
        self._flow_seq = 0
        self._job_seq = 0
        self._gre = 0
        self._replica_ip = 0
        self._mac_seq: dict[str, int] = {}
        self.master = min(sc.cluster.hosts)
        self._prev_busy: dict[str, float] = {}
        self.writer = MetricsWriter(metrics_path) if metrics_path else None
        self._row_sink: list[str] | None = None if metrics_path else []
        self._build()

    # -- Assembly --

    def _build(self) -> None:
        sc = self.sc
        cfg = OrchestratorConfig(
            monitor_period=sc.cluster.monitor_period_s,
            heartbeat_interval=sc.cluster.heartbeat_interval_s,
            heartbeat_multiplier=sc.cluster.heartbeat_multiplier,
            destroy_bound=sc.cluster.destroy_bound_s,
            boot_delay=sc.cluster.boot_delay_s,
            placement_capacity=sc.cluster.placement_capacity
            or (sc.cluster.cores - sc.cluster.reserved_cores))
        for idx, name in enumerate(sc.cluster.hosts):
            store = Store(orch_id(name), name)
            switch = SoftSwitch(name, mode=sc.sim.backend, hash_seed=sc.sim.seed)
            registry = HypervisorRegistry(name, first_domid=sc.cluster.first_domid)
            orch = Orchestrator(name, store, switch, registry, self, cfg)
            model = HostModel(sc.cluster.cores, sc.cluster.reserved_cores)
            self.hosts[name] = Host(name, store, switch, registry, orch, model)
            self.vif_map[name] = {}
            self._mac_seq[name] = 0
        from .kvstore import AccessScope
        for name, host in self.hosts.items():
            peers = {orch_id(p) for p in self.hosts if p != name}
            host.store.set_scope("jitsu/heartbeats",
                                 AccessScope(orch_id(name), writable_by=set(peers)))
            for peer in self.hosts:
                if peer == name:
                    continue
                host.store.set_scope(f"jitsu/requests/{peer}", AccessScope(
                    orch_id(name), readable_by={orch_id(peer)},
                    writable_by={orch_id(peer)}))
                # Peer watches its response key on this store; delivery is
                # delayed like any cross-store traffic.
                host.store.watch_key(
                    response_key(peer),
                    lambda ev, a=peer, b=name: self._deliver_remote_response(a, b, ev))
        for spec in sc.services:
            svc = spec.config
            self.services[svc.name] = svc
            self.app_ids[svc.app_id] = svc
            self.started[svc.name] = 0
            self.completed[svc.name] = 0
            self.failed[svc.name] = 0
            self.latencies[svc.name] = []
            self.instance_order[svc.name] = []
            self.replica_order[svc.name] = []
            self.hosts[svc.host].orch.boot_first_instance(svc)
        for spec in sc.services:
            svc = spec.config
            for _ in range(spec.initial_replicas):
                # Pre-provisioned replicas follow the same placement rule
                # as runtime replication.
                target = place_local_first(svc.host, self.host_loads())
                if target is None:
                    self.log_action(svc.host,
                                    f"no capacity for initial replica of {svc.name}")
                    break
                self.hosts[target].orch._boot_replica(svc, requested_by="",
                                                      done=lambda v: None)
        self.workloads = []
        for i, w in enumerate(sc.workloads):
            if not w.enabled:
                continue
            svc = self.services[w.service]
            spec = WorkloadSpec(schedule=w.schedule, pages=w.pages,
                                dst_ip=svc.ip, dst_port=svc.port,
                                url_count=w.url_count, jitter=w.jitter)
            rng = random.Random(f"{sc.sim.seed}:wl:{i}")
            self.workloads.append(Workload(
                self.clock, spec, rng,
                lambda key, size, t, s=svc.name: self.start_flow(s, key, size),
                sc.sim.horizon_s))

    def _deliver_remote_response(self, requester: str, executor: str, ev) -> None:
        if ev.deleted or ev.value is None:
            return
        self.clock.after(self.store_delay,
                         lambda: self.hosts[requester].orch.on_remote_response(
                             executor, ev.value) if self.hosts[requester].alive else None)

    # -- Fabric interface used by orchestrators and guests --

    def now(self) -> float:
        return self.clock.now

    def after(self, delay: float, fn):
        return self.clock.after(delay, fn)

    def host_names(self) -> list[str]:
        return list(self.hosts)

    def is_alive(self, host: str) -> bool:
        return host in self.hosts and self.hosts[host].alive

    def store_of(self, host: str) -> Store:
        return self.hosts[host].store

    def switch_of(self, host: str) -> SoftSwitch:
        return self.hosts[host].switch

    def orchestrator_of(self, host: str) -> Orchestrator:
        return self.hosts[host].orch

    def registry_of(self, host: str) -> HypervisorRegistry:
        return self.hosts[host].registry

    def host_loads(self) -> list[HostLoad]:
        return [HostLoad(h.name, h.orch.config.placement_capacity,
                         h.orch.vm_count(), h.alive)
                for h in self.hosts.values()]

    def remote_put(self, src: str, dst: str, path: str, value: str,
                   identity: str, merge=None, on_applied=None) -> None:
        if not self.is_alive(dst):
            self.log_action(src, f"remote put to dead host {dst} dropped")
            return

        def deliver():
            if not self.is_alive(dst):
                return
            store = self.hosts[dst].store
            if merge is not None:
                store.merge_put(path, value, identity=identity, merge=merge)
            else:
                store.put(path, value, identity=identity)
            if on_applied is not None:
                on_applied()

        self.clock.after(self.store_delay, deliver)

    def next_gre_key(self) -> int:
        self._gre += 1
        return self._gre

    def alloc_replica_ip(self) -> str:
        ip = str(ipaddress.IPv4Address("10.0.1.200") + self._replica_ip)
        self._replica_ip += 1
        return ip

    def alloc_mac(self, host: str) -> str:
        n = self._mac_seq[host]
        self._mac_seq[host] += 1
        hidx = list(self.hosts).index(host)
        return f"02:16:3e:{hidx:02x}:{(n >> 8) & 255:02x}:{n & 255:02x}"

    def service_by_app_id(self, app_id: str) -> ServiceConfig | None:
        return self.app_ids.get(app_id)

    def service_named(self, name: str) -> ServiceConfig | None:
        return self.services.get(name)

    def log_action(self, host: str, text: str) -> None:
        self.actions.append((self.clock.now, host, text))

    # -- VM lifecycle callbacks --

    def _recompute_rates(self, host: str) -> None:
        names = [n for n, h in self.vm_host.items() if h == host]
        if not names:
            return
        share = self.hosts[host].model.share(len(names))
        for n in names:
            self.queues[n].set_rate(self.capacity_bps * share)

    def vm_started(self, host: str, vm: HostedVm) -> None:
        name = vm.name
        self.vm_host[name] = host
        queue = ReplicaQueue(self.clock, self.capacity_bps,
                             lambda job, n=name: self._job_done(n, job))
        self.queues[name] = queue
        self.vif_map[host][vm.vif] = name
        self.instance_order[vm.service].append(name)
        if vm.kind == "replica":
            self.replica_order[vm.service].append(name)
        self._recompute_rates(host)
        self._make_guest(host, vm)

    def _make_guest(self, host: str, vm: HostedVm) -> None:
        svc = self.services[vm.service]
        store = self.hosts[host].store
        seed_log = store.get(f"{vm_root(vm.name)}/log")
        client = FractalClient(vm.name, store)
        queue = self.queues[vm.name]
        inst = GuestInstance(
            vm.name, vm.service, vm.kind, self.clock, client, self.policy,
            in_flight=lambda: len(queue),
            push_log=self._log_pusher(host, vm.name, svc),
            scaling_enabled=self.sc.scaling.enabled,
            seed_log=seed_log)
        self.instances[vm.name] = inst

    def _log_pusher(self, host: str, name: str, svc: ServiceConfig):
        target_key = f"{vm_root(svc.name)}/log"

        def push(value: str, on_applied) -> None:
            store = self.hosts[host].store
            store.put(f"{vm_root(name)}/log", value, identity=vm_id(name))
            if host == svc.host:
                store.merge_put(target_key, value, identity=vm_id(name),
                                merge=merge_logs)
                on_applied()
            else:
                self.remote_put(host, svc.host, target_key, value,
                                vm_id(name), merge=merge_logs,
                                on_applied=on_applied)

        return push

    def vm_rebooted(self, host: str, vm: HostedVm) -> None:
        old = self.instances.get(vm.name)
        if old is not None:
            old.stop()
        queue = self.queues.get(vm.name)
        if queue is not None:
            for job in queue.fail_all():
                self._fail_flow(job.tag, "rebooted")
        self.vif_map[host] = {v.vif: n for n, v in
                              self.hosts[host].orch.hosted.items()}
        self._make_guest(host, vm)

    def vm_destroyed(self, host: str, name: str, reason: str) -> None:
        inst = self.instances.pop(name, None)
        if inst is not None:
            inst.stop()
        queue = self.queues.pop(name, None)
        if queue is not None:
            for job in queue.fail_all():
                self._fail_flow(job.tag, reason)
        self.vm_host.pop(name, None)
        self.vif_map[host] = {v.vif: n for n, v in
                              self.hosts[host].orch.hosted.items()}
        for order in (self.instance_order, self.replica_order):
            for names in order.values():
                if name in names:
                    names.remove(name)
        self._recompute_rates(host)

    def fail_flows(self, keys, reason: str) -> None:
        if not keys:
            return
        wanted = set(keys)
        for fr in list(self._open.values()):
            if fr.key in wanted:
                self._fail_flow(fr, reason)

    # -- Flow path --

    def start_flow(self, service: str, key: FlowKey, size: int) -> FlowRecord:
        self._flow_seq += 1
        fr = FlowRecord(self._flow_seq, key, size, service, self.clock.now)
        self.started[service] += 1
        self._open[fr.flow_id] = fr
        if self.trace_flows:
            self.flow_log.append(fr)
        svc = self.services[service]
        if not self.is_alive(svc.host):
            self._fail_flow(fr, "first-host-dead")
            return fr
        first_sw = self.hosts[svc.host].switch
        d = first_sw.classify(key, SoftSwitch.NIC)
        if d.verdict != "deliver":
            self._fail_flow(fr, d.verdict)
            return fr
        hops = 0
        host, port, out_key = svc.host, d.egress_port, d.out_key
        tun = first_sw.tunnel(port)
        if tun is not None:
            hops = 1
            if not self.is_alive(tun.remote_host):
                first_sw.expire_flow(key)
                self._fail_flow(fr, "tunnel-host-dead")
                return fr
            d2 = self.hosts[tun.remote_host].switch.classify(out_key, port)
            if d2.verdict != "deliver":
                first_sw.expire_flow(key)
                self._fail_flow(fr, d2.verdict)
                return fr
            host, port, out_key = tun.remote_host, d2.egress_port, d2.out_key
        name = self.vif_map[host].get(port)
        inst = self.instances.get(name) if name else None
        if inst is None or inst.state in ("dead",):
            first_sw.expire_flow(key)
            self._fail_flow(fr, "no-instance")
            return fr
        fr.replica, fr.host = name, host
        fr.net_ms = self.base_ms + hops * self.hop_ms
        fr.state = "serving"
        self._job_seq += 1
        self.queues[name].add(Job(self._job_seq, float(size), tag=fr))
        return fr

    def _job_done(self, name: str, job: Job) -> None:
        fr: FlowRecord = job.tag
        if fr.state != "serving":
            return
        inst = self.instances.get(name)
        svc = self.services[fr.service]
        host = fr.host
        if inst is None or inst.state == "dead" or not self.is_alive(host):
            self._fail_flow(fr, "stale-instance")
            return
        vmrec = self.hosts[host].orch.hosted.get(name)
        served_ip = vmrec.ip if vmrec else svc.ip
        response = FlowKey(served_ip, fr.key.src_ip, fr.key.proto,
                           svc.port, fr.key.src_port)
        d = self.hosts[host].switch.classify(response, vmrec.vif if vmrec else "nic")
        ok = (d.verdict == "deliver" and d.egress_port == SoftSwitch.NIC
              and d.out_key.src_ip == svc.ip)
        self.hosts[svc.host].switch.expire_flow(fr.key)
        if not ok:
            self.misdeliveries += 1
            self._fail_flow(fr, "misdelivered-response")
            return
        fr.state = "completed"
        self._open.pop(fr.flow_id, None)
        self.completed[fr.service] += 1
        latency = (self.clock.now - fr.start) * 1000.0 + fr.net_ms
        self.latencies[fr.service].append(latency)
        inst.record_completion(self.clock.now, latency,
                               f"{fr.key.src_ip}:{fr.key.src_port}")

    def _fail_flow(self, fr: FlowRecord, reason: str) -> None:
        if fr.state in ("completed", "failed"):
            return
        fr.state = "failed"
        fr.reason = reason
        self._open.pop(fr.flow_id, None)
        self.failed[fr.service] += 1
        svc = self.services[fr.service]
        if self.is_alive(svc.host):
            self.hosts[svc.host].switch.expire_flow(fr.key)

    # -- Events --

    def apply_event(self, action: str, args: list[str]) -> None:
        self.log_action("-", f"event {action} {' '.join(args)}")
        if action == "kill-host":
            self.kill_host(args[0])
        elif action == "crash-replica":
            name = self._replica_by_index(args[0], int(args[1]))
            if name is not None:
                self.crash_vm(name)
        elif action == "reboot-replica":
            name = self._replica_by_index(args[0], int(args[1]))
            if name is not None:
                self.reboot_vm(name)
        elif action == "halt-replica":
            name = self._replica_by_index(args[0], int(args[1]))
            inst = self.instances.get(name) if name else None
            if inst is not None:
                inst.client.halt(inst._on_halt)
        elif action == "replicate":
            first = self.instances.get(args[0])
            if first is not None:
                first.client.replicate(args[0], first._on_replicate)
        else:
            raise ValueError(f"unknown event {action}")

    def _replica_by_index(self, service: str, index: int) -> str | None:
        order = self.replica_order.get(service, [])
        if 1 <= index <= len(order):
            return order[index - 1]
        self.log_action("-", f"event target {service} replica {index} not present")
        return None

    def crash_vm(self, name: str) -> None:
        host = self.vm_host.get(name)
        if host is None:
            return
        self.hosts[host].registry.crash(name)
        inst = self.instances.get(name)
        if inst is not None:
            inst.stop()
        for job in self.queues[name].fail_all():
            self._fail_flow(job.tag, "crashed")

    def reboot_vm(self, name: str) -> None:
        host = self.vm_host.get(name)
        if host is None:
            return
        self.hosts[host].registry.reboot(name)
        inst = self.instances.get(name)
        if inst is not None:
            inst.stop()
        for job in self.queues[name].fail_all():
            self._fail_flow(job.tag, "rebooted")

    def kill_host(self, name: str) -> None:
        host = self.hosts[name]
        if not host.alive:
            return
        host.alive = False
        host.orch.kill()
        for vm_name, vm_host in list(self.vm_host.items()):
            if vm_host != name:
                continue
            inst = self.instances.get(vm_name)
            if inst is not None:
                inst.stop()
            for job in self.queues[vm_name].fail_all():
                self._fail_flow(job.tag, "host-killed")
        if name == self.master:
            self.clock.after(self.sc.cluster.failover_detect_s,
                             self.master_failover)

    def master_failover(self) -> None:
        live = sorted(h for h in self.hosts if self.hosts[h].alive)
        if not live:
            return
        self.master = live[0]
        self.log_action(self.master, "elected master")
        self.hosts[self.master].orch.become_master()

    # -- Metrics --

    def _sample_metrics(self) -> None:
        t = self.clock.now
        cadence = self.sc.sim.metrics_cadence_s
        rows = []
        for svc_name in self.services:
            live = [n for n in self.instance_order[svc_name]
                    if n in self.instances]
            count = len(live)
            fails = self.failed[svc_name]
            for name in live:
                inst = self.instances[name]
                queue = self.queues[name]
                busy = queue.busy_total(t)
                util = (busy - self._prev_busy.get(name, 0.0)) / cadence
                self._prev_busy[name] = busy
                lats = inst.window_latencies
                rows.append(format_row(
                    t, svc_name, name, self.vm_host[name],
                    len(lats) / cadence, util, mean_latency_ms(lats),
                    p99_latency_ms(lats), count, fails))
                inst.window_latencies = []
        for row in rows:
            if self.writer is not None:
                self.writer.write_row(row)
            else:
                self._row_sink.append(row)
        if self.writer is not None:
            self.writer.flush()

    @property
    def rows(self) -> list[str]:
        return self._row_sink or []

    # -- Run loop --

    def run(self) -> None:
        sc = self.sc
        period = sc.cluster.monitor_period_s
        for name in self.hosts:
            self._schedule_monitor(name, period)
            self._schedule_heartbeat(name, sc.cluster.heartbeat_interval_s)
        for ev in sc.events:
            self.clock.schedule(ev.time_s,
                                lambda e=ev: self.apply_event(e.action, e.args))
        for w in self.workloads:
            w.start()
        self.clock.after(sc.sim.metrics_cadence_s, self._metrics_tick)
        self.clock.run_until(sc.sim.horizon_s)
        if self.writer is not None:
            self.writer.close()

    def _schedule_monitor(self, host: str, period: float) -> None:
        def tick():
            if self.hosts[host].alive:
                self.hosts[host].orch.monitor_tick()
            self.clock.after(period, tick)

        self.clock.after(period, tick)

    def _schedule_heartbeat(self, host: str, interval: float) -> None:
        def beat():
            if self.hosts[host].alive:
                self.hosts[host].orch.send_heartbeats()
            self.clock.after(interval, beat)

        self.clock.after(interval, beat)

    def _metrics_tick(self) -> None:
        self._sample_metrics()
        self.clock.after(self.sc.sim.metrics_cadence_s, self._metrics_tick)

    # -- Reporting --

    def flush_logs(self) -> None:
        """Merge live first-instance in-memory logs into their stores."""
        for svc_name, svc in self.services.items():
            inst = self.instances.get(svc_name)
            if inst is None or not self.is_alive(svc.host):
                continue
            store = self.hosts[svc.host].store
            store.merge_put(f"{vm_root(svc_name)}/log", inst.log.encode(),
                            merge=merge_logs)

    def dump_state(self) -> str:
        self.flush_logs()
        parts = []
        for name in self.hosts:
            host = self.hosts[name]
            parts.append(f"== store {name} ==\n{host.store.dump()}")
            parts.append(f"== flows {name} ==\n{host.switch.dump_flows()}")
            parts.append(f"== groups {name} ==\n{host.switch.dump_groups()}")
        return "".join(parts)

    def in_flight(self) -> int:
        return len(self._open)

    def check_invariants(self) -> list[str]:
        problems = []
        for svc in self.services:
            opened = sum(1 for fr in self._open.values() if fr.service == svc)
            total = self.completed[svc] + self.failed[svc] + opened
            if total != self.started[svc]:
                problems.append(
                    f"{svc}: started {self.started[svc]} != completed "
                    f"{self.completed[svc]} + failed {self.failed[svc]} "
                    f"+ in-flight {opened}")
        for name, host in self.hosts.items():
            if not host.alive:
                continue
            for g in host.switch.groups():
                for b in g.buckets:
                    if host.switch.live_pinned(g.gid, b.bucket_id) < 0:
                        problems.append(f"{name}: negative pin count {g.gid}/{b.bucket_id}")
        return problems

    def summary(self) -> str:
        lines = [f"seed={self.sc.sim.seed} backend={self.sc.sim.backend} "
                 f"horizon={self.sc.sim.horizon_s:g}"]
        for svc in self.services:
            live = [n for n in self.instance_order[svc] if n in self.instances]
            lats = self.latencies[svc]
            lines.append(
                f"service={svc} started={self.started[svc]} "
                f"completed={self.completed[svc]} failed={self.failed[svc]} "
                f"in_flight={sum(1 for fr in self._open.values() if fr.service == svc)} "
                f"replicas_final={len(live)} "
                f"mean_ms={mean_latency_ms(lats):.3f} "
                f"p50_ms={percentile(lats, 0.5):.3f} "
                f"p99_ms={percentile(lats, 0.99):.3f}")
        lines.append(f"misdeliveries={self.misdeliveries}")
        return "\n".join(lines) + "\n"
