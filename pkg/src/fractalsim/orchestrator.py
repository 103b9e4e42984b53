"""Per-host control plane: request dispatch, VM lifecycle, failure handling.

One Orchestrator runs per host. Guests and peer orchestrators talk to it
only through store writes: a requester owns `jitsu/requests/<NAME>/request`
on the executing host's store and the response appears next to it. Guests
write locally; a peer writes across stores and watches the response key
remotely (the cluster fabric adds the delivery delay both ways).

VM records live under `jitsu/vms/<NAME>` on the hosting store; the
remote-boot marker is `jitsu/vm/<NAME>/initial_xs` (singular, a separate
tree). First instances are named by service hostname, replicas by MAC
address. The monitor loop garbage-collects, reconciles dom-ids against the
hypervisor registry, and drives heartbeat failure detection.

The cluster wiring object ("fabric") must provide: now(), host_names(),
is_alive(h), store_of(h), switch_of(h), orchestrator_of(h), registry_of(h),
remote_put(...), next_gre_key(), alloc_replica_ip(), alloc_mac(h),
service_by_app_id(a), service_named(s), vm_started/vm_rebooted/vm_destroyed
callbacks, fail_flows(keys, reason), and log_action(host, text).
"""

from __future__ import annotations

import ipaddress
from dataclasses import dataclass, field

from .kvstore import AccessScope, Store, decode_list, encode_list
from .switchfab import (
    Bucket,
    Match,
    SoftSwitch,
    output,
    set_dst_ip,
    set_dst_mac,
    to_group,
)

# -- Identities and paths --

def orch_id(host: str) -> str:
    return f"orch:{host}"


def vm_id(name: str) -> str:
    return f"vm:{name}"


def vm_root(name: str) -> str:
    return f"jitsu/vms/{name}"


def boot_root(name: str) -> str:
    return f"jitsu/vm/{name}"


def req_root(name: str) -> str:
    return f"jitsu/requests/{name}"


def request_key(name: str) -> str:
    return f"jitsu/requests/{name}/request"


def response_key(name: str) -> str:
    return f"jitsu/requests/{name}/response"


def heartbeat_key(host: str) -> str:
    return f"jitsu/heartbeats/{host}"


def app_id_of(service_ip: str) -> str:
    """app-id is the service's public IPv4, hex encoded."""
    return f"{int(ipaddress.IPv4Address(service_ip)):08x}"


def ip_of_app_id(app_id: str) -> str:
    return str(ipaddress.IPv4Address(int(app_id, 16)))


# -- Wire format --

SUCCESS_RESPONSE = "[S(success);]"

VERBS = ("replicate", "halt", "die")


@dataclass
class RequestRecord:
    requester: str
    verb: str
    target: str
    app_id: str | None = None
    ttl: int | None = None
    stop_mode: str | None = None
    image: str | None = None

    @property
    def is_remote_form(self) -> bool:
        return self.app_id is not None


def encode_request(rec: RequestRecord) -> str:
    atoms = [("S", rec.verb), ("S", rec.target)]
    if rec.is_remote_form:
        atoms += [("I", rec.app_id), ("I", str(rec.ttl)),
                  ("S", rec.stop_mode), ("S", rec.image)]
    return encode_list(atoms)


def parse_request(value: str, requester: str) -> RequestRecord:
    """Decode a request value; raises ValueError on malformed input."""
    atoms = decode_list(value)
    if len(atoms) not in (2, 6):
        raise ValueError(f"bad request arity: {value!r}")
    if atoms[0][0] != "S" or atoms[1][0] != "S":
        raise ValueError(f"bad request atoms: {value!r}")
    verb, target = atoms[0][1], atoms[1][1]
    if verb not in VERBS:
        raise ValueError(f"unknown verb {verb!r}")
    rec = RequestRecord(requester, verb, target)
    if len(atoms) == 6:
        if verb != "replicate":
            raise ValueError(f"remote form only carries replicate: {value!r}")
        tags = [a[0] for a in atoms[2:]]
        if tags != ["I", "I", "S", "S"]:
            raise ValueError(f"bad remote request atoms: {value!r}")
        rec.app_id = atoms[2][1]
        rec.ttl = int(atoms[3][1])
        rec.stop_mode = atoms[4][1]
        rec.image = atoms[5][1]
    return rec


def error_response(message: str) -> str:
    return encode_list([("S", "error"), ("S", message)])


def parse_response(value: str) -> tuple[str, str | None]:
    """Returns ("ok", None) or ("error", message)."""
    atoms = decode_list(value)
    if atoms and atoms[0] == ("S", "success"):
        return ("ok", None)
    if len(atoms) == 2 and atoms[0] == ("S", "error"):
        return ("error", atoms[1][1])
    raise ValueError(f"bad response: {value!r}")


# Error message vocabulary; the poll loop only distinguishes ok from error,
# tests match on these prefixes.
ERR_NO_CAPACITY = "NoCapacity"
ERR_PERMISSION = "PermissionDenied"
ERR_NOT_RUNNING = "NotRunning"
ERR_NOT_HALTING = "NotHalting"
ERR_RETRY = "Retry"
ERR_PENDING = "InvocationPending"
ERR_MALFORMED = "Malformed"
ERR_HOST_FAILED = "HostFailed"


# -- Configuration --

@dataclass
class OrchestratorConfig:
    monitor_period: float = 1.0
    heartbeat_interval: float = 2.0
    heartbeat_multiplier: int = 2
    destroy_bound: float = 5.0
    boot_delay: float = 0.2
    placement_capacity: int = 4
    ingress_priority: int = 10
    response_priority: int = 20


@dataclass
class ServiceConfig:
    """Cluster-wide description of one service."""

    name: str
    host: str
    ip: str
    private_ip: str
    port: int = 80
    mac: str = ""
    image: str = ""
    ttl: int = 300
    stop_mode: str = "shutdown"
    dns_name: str = ""
    dns_ttl: int = 500

    @property
    def app_id(self) -> str:
        return app_id_of(self.ip)


# -- Hypervisor registry (the crash-consistent ground truth) --

class HypervisorRegistry:
    """Names and dom-ids of VMs actually running on one host."""

    def __init__(self, host: str, first_domid: int = 1):
        self.host = host
        self._next = first_domid
        self._by_name: dict[str, int] = {}

    def create(self, name: str) -> int:
        if name in self._by_name:
            raise ValueError(f"{name} already running on {self.host}")
        domid = self._next
        self._next += 1
        self._by_name[name] = domid
        return domid

    def destroy(self, name: str) -> None:
        self._by_name.pop(name, None)

    def crash(self, name: str) -> None:
        # A crashed VM simply vanishes from the registry.
        self._by_name.pop(name, None)

    def reboot(self, name: str) -> int:
        if name not in self._by_name:
            raise ValueError(f"{name} not running on {self.host}")
        domid = self._next
        self._next += 1
        self._by_name[name] = domid
        return domid

    def domid(self, name: str) -> int | None:
        return self._by_name.get(name)

    def names(self) -> list[str]:
        return sorted(self._by_name)


# -- Placement --

@dataclass
class HostLoad:
    host: str
    capacity: int
    vms: int
    alive: bool


def place_local_first(local: str, loads: list[HostLoad]) -> str | None:
    """Default policy: fill the local host, then least-loaded, ties by name."""
    by_name = {l.host: l for l in loads}
    mine = by_name.get(local)
    if mine is not None and mine.alive and mine.vms < mine.capacity:
        return local
    remote = [l for l in loads
              if l.host != local and l.alive and l.vms < l.capacity]
    if not remote:
        return None
    return min(remote, key=lambda l: (l.vms, l.host)).host


# -- Runtime records --

@dataclass
class HostedVm:
    name: str
    service: str
    kind: str                     # "first" | "replica"
    domid: int
    ip: str
    mac: str
    state: str                    # provisioning | running | halting | dead
    first_host: str
    vif: str
    bucket_id: int | None = None
    tunnel_local: str | None = None
    tunnel_first: str | None = None
    ingress_rule: int | None = None
    response_rule: int | None = None
    ttl: int = 300
    ttl_zero_at: float | None = None
    requested_by: str = ""


@dataclass
class ReplicaRef:
    name: str
    host: str
    bucket_id: int


@dataclass
class ServiceRoster:
    """First-instance-side view of one service's replica set."""

    service: str
    gid: str
    next_bucket: int = 1
    halting: str | None = None
    members: dict[str, ReplicaRef] = field(default_factory=dict)


@dataclass
class PendingLocal:
    requester: str
    record: RequestRecord


class Orchestrator:
    """Control plane for one host."""

    def __init__(self, host: str, store: Store, switch: SoftSwitch,
                 registry: HypervisorRegistry, fabric,
                 config: OrchestratorConfig | None = None,
                 placement=place_local_first):
        self.host = host
        self.store = store
        self.switch = switch
        self.registry = registry
        self.fabric = fabric
        self.config = config or OrchestratorConfig()
        self.placement = placement
        self.alive = True
        self.is_master = False
        self.hosted: dict[str, HostedVm] = {}
        self.rosters: dict[str, ServiceRoster] = {}
        self._in_flight: dict[str, RequestRecord] = {}
        # Outgoing remote ops per peer: head is awaiting its response.
        self._outbox: dict[str, list[PendingLocal]] = {}
        self._hb_last: dict[str, float] = {}
        self._hb_failed: set[str] = set()
        self.actions: list[tuple[float, str]] = []
        store.watch_subtree("jitsu", self._on_local_event)

    # -- Small helpers --

    def _now(self) -> float:
        return self.fabric.now()

    def _log(self, text: str) -> None:
        self.actions.append((self._now(), text))
        self.fabric.log_action(self.host, text)

    def vif_name(self, domid: int, iface: int = 1) -> str:
        return f"vif{domid}.{iface}"

    def vm_count(self) -> int:
        return sum(1 for vm in self.hosted.values() if vm.state != "dead")

    # -- Store event dispatch --

    def _on_local_event(self, ev) -> None:
        if not self.alive or ev.deleted or ev.value is None:
            return
        parts = ev.path.split("/")
        if len(parts) == 4 and parts[1] == "requests" and parts[3] == "request":
            self._dispatch_request(parts[2], ev.value)
        elif len(parts) == 3 and parts[1] == "heartbeats":
            self._hb_last[parts[2]] = self._now()

    def on_remote_response(self, peer: str, value: str) -> None:
        """Response key on peer's store changed (delivered after delay)."""
        if not self.alive:
            return
        queue = self._outbox.get(peer, [])
        if not queue:
            return
        pending = queue.pop(0)
        self._finish_guest_request(pending, value)
        self._send_next_remote(peer)

    def _finish_guest_request(self, pending: PendingLocal, value: str) -> None:
        self._in_flight.pop(pending.requester, None)
        self._respond_local(pending.requester, value)

    def _respond_local(self, requester: str, value: str) -> None:
        self.store.put(response_key(requester), value)

    def _respond(self, requester: str, remote: bool, value: str) -> None:
        if remote:
            # Peer requester: the response lands next to its request key on
            # this store; the peer's cross-store watch picks it up.
            self.store.put(response_key(requester), value)
        else:
            self._respond_local(requester, value)

    def _dispatch_request(self, requester: str, value: str) -> None:
        is_remote = requester not in self.hosted and requester in self.fabric.host_names()
        if requester in self._in_flight:
            # Second request before the first response: immediate error, the
            # request being processed is unaffected.
            self._respond(requester, is_remote, error_response(ERR_PENDING))
            return
        try:
            rec = parse_request(value, requester)
        except ValueError as exc:
            self._respond(requester, is_remote, error_response(f"{ERR_MALFORMED}: {exc}"))
            return
        self._in_flight[requester] = rec
        if is_remote:
            self._handle_remote_replicate(rec)
            return
        vm = self.hosted.get(requester)
        if vm is None:
            self._in_flight.pop(requester, None)
            self._respond_local(requester, error_response(f"{ERR_PERMISSION}: unknown requester"))
            return
        handler = {"replicate": self._handle_replicate,
                   "halt": self._handle_halt,
                   "die": self._handle_die}[rec.verb]
        handler(vm, rec)

    def _reply_and_clear(self, requester: str, remote: bool, value: str) -> None:
        self._in_flight.pop(requester, None)
        self._respond(requester, remote, value)

    # -- Replicate --

    def _handle_replicate(self, vm: HostedVm, rec: RequestRecord) -> None:
        service = self.fabric.service_named(vm.service)
        if rec.target != service.name:
            self._reply_and_clear(rec.requester, False,
                                  error_response(f"{ERR_MALFORMED}: bad target"))
            return
        loads = self.fabric.host_loads()
        target = self.placement(self.host, loads)
        if target is None:
            self._reply_and_clear(rec.requester, False, error_response(ERR_NO_CAPACITY))
            return
        if target == self.host:
            self._boot_replica(service, requested_by="",
                               done=lambda v: self._reply_and_clear(rec.requester, False, v))
        else:
            remote = RequestRecord(self.host, "replicate", target,
                                   app_id=service.app_id, ttl=service.ttl,
                                   stop_mode=service.stop_mode, image=service.image)
            self._outbox.setdefault(target, []).append(PendingLocal(rec.requester, remote))
            if len(self._outbox[target]) == 1:
                self._send_next_remote(target)

    def _send_next_remote(self, peer: str) -> None:
        queue = self._outbox.get(peer, [])
        if not queue:
            return
        head = queue[0]
        self.fabric.remote_put(self.host, peer, request_key(self.host),
                               encode_request(head.record), orch_id(self.host))

    def _handle_remote_replicate(self, rec: RequestRecord) -> None:
        if not rec.is_remote_form or rec.target != self.host:
            self._reply_and_clear(rec.requester, True,
                                  error_response(f"{ERR_MALFORMED}: bad remote form"))
            return
        service = self.fabric.service_by_app_id(rec.app_id)
        if service is None:
            self._reply_and_clear(rec.requester, True,
                                  error_response(f"{ERR_MALFORMED}: unknown app-id"))
            return
        if self.vm_count() >= self.config.placement_capacity:
            self._reply_and_clear(rec.requester, True, error_response(ERR_NO_CAPACITY))
            return
        self._boot_replica(service, requested_by=rec.requester,
                           done=lambda v: self._reply_and_clear(rec.requester, True, v),
                           ttl=rec.ttl, stop_mode=rec.stop_mode)

    # -- Boot --

    def boot_first_instance(self, service: ServiceConfig) -> HostedVm:
        """Create a service's first instance on this host (cluster setup)."""
        domid = self.registry.create(service.name)
        vif1 = self.vif_name(domid, 1)
        vif2 = self.vif_name(domid, 2)
        mac = service.mac or self.fabric.alloc_mac(self.host)
        vm = HostedVm(service.name, service.name, "first", domid, service.ip,
                      mac, "running", self.host, vif1, bucket_id=0,
                      ttl=service.ttl)
        self.hosted[service.name] = vm
        self.switch.add_port(vif1)
        self.switch.add_port(vif2)
        gid = service.app_id
        self.switch.create_group(gid, [
            Bucket(0, 1, (set_dst_ip(service.ip), set_dst_mac(mac), output(vif1)))])
        self.switch.install_flow(
            self.config.ingress_priority,
            Match(in_port=SoftSwitch.NIC, dst_ip=service.ip, dst_port=service.port),
            (to_group(gid),))
        vm.response_rule = self.switch.install_flow(
            self.config.response_priority,
            Match(src_ip=service.ip, src_port=service.port),
            (output(SoftSwitch.NIC),))
        self.rosters[service.name] = ServiceRoster(service.name, gid)
        dns = service.dns_name or service.name
        root = vm_root(service.name)
        self.store.set_scope(root, AccessScope(
            orch_id(self.host), writable_by={vm_id(service.name)}))
        self._set_request_scopes(service.name)
        self.store.put_many({
            f"{root}/dom-id": str(domid),
            f"{root}/app-id": service.app_id,
            f"{root}/state": "running",
            f"{root}/stop-mode": service.stop_mode,
            f"{root}/ips/{vif1}": service.ip,
            f"{root}/ips/{vif2}": service.private_ip,
            f"{root}/first-instance": "true",
            f"{root}/mac": mac,
            f"{root}/dns/{dns}/ttl": str(service.dns_ttl),
        })
        self.fabric.vm_started(self.host, vm)
        self._log(f"boot first-instance {service.name} dom{domid}")
        return vm

    def _set_request_scopes(self, name: str) -> None:
        self.store.set_scope(req_root(name), AccessScope(
            orch_id(self.host), readable_by={vm_id(name)}, writable_by=set()))
        self.store.set_scope(request_key(name), AccessScope(
            orch_id(self.host), writable_by={vm_id(name)}))

    def _boot_replica(self, service: ServiceConfig, requested_by: str, done,
                      ttl: int | None = None, stop_mode: str | None = None) -> None:
        mac = self.fabric.alloc_mac(self.host)
        name = mac
        ip = self.fabric.alloc_replica_ip()
        domid = self.registry.create(name)
        vif = self.vif_name(domid, 1)
        vm = HostedVm(name, service.name, "replica", domid, ip, mac,
                      "provisioning", service.host, vif,
                      ttl=ttl if ttl is not None else service.ttl,
                      requested_by=requested_by)
        self.hosted[name] = vm
        self.switch.add_port(vif)
        vm.response_rule = self.switch.install_snat(
            service.ip, service.port, ip, priority=self.config.response_priority)
        if service.host != self.host:
            key = self.fabric.next_gre_key()
            vm.tunnel_local = self.switch.create_tunnel(service.host, key).port_id
            vm.tunnel_first = self.fabric.switch_of(service.host).create_tunnel(self.host, key).port_id
            vm.ingress_rule = self.switch.install_flow(
                self.config.ingress_priority,
                Match(in_port=vm.tunnel_local, dst_ip=ip),
                (output(vif),))
        root = vm_root(name)
        self.store.set_scope(root, AccessScope(
            orch_id(self.host), writable_by={vm_id(name)}))
        self._set_request_scopes(name)
        self.store.put_many({
            f"{root}/dom-id": str(domid),
            f"{root}/app-id": service.app_id,
            f"{root}/state": "provisioning",
            f"{root}/stop-mode": stop_mode or service.stop_mode,
            f"{root}/ip": ip,
            f"{root}/first-instance": "false",
            f"{root}/first-instance-host": service.host,
            f"{boot_root(name)}/initial_xs": requested_by,
        })
        self._log(f"boot replica {name} of {service.name} dom{domid}")
        self.fabric.after(self.config.boot_delay,
                          lambda: self._finish_boot(name, service, done))

    def _finish_boot(self, name: str, service: ServiceConfig, done) -> None:
        vm = self.hosted.get(name)
        if vm is None or not self.alive:
            # Crashed or swept away during provisioning.
            done(error_response(f"{ERR_NOT_RUNNING}: boot interrupted"))
            return
        vm.state = "running"
        self.store.put(f"{vm_root(name)}/state", "running")
        first = self.fabric.orchestrator_of(service.host)
        roster = first.rosters[service.name]
        bid = roster.next_bucket
        roster.next_bucket += 1
        vm.bucket_id = bid
        out_port = vm.tunnel_first if vm.tunnel_first else vm.vif
        first.switch.add_bucket(roster.gid, Bucket(
            bid, 1, (set_dst_ip(vm.ip), set_dst_mac(vm.mac), output(out_port))))
        roster.members[name] = ReplicaRef(name, self.host, bid)
        # Replicas of a service may write its subtree (state merge-back).
        first.grant_service_access(service.name, name, self.host)
        if self.host != service.host:
            first.expect_heartbeats(self.host)
        self.fabric.vm_started(self.host, vm)
        self._log(f"replica {name} running (bucket {bid})")
        done(SUCCESS_RESPONSE)

    def grant_service_access(self, service: str, replica: str, replica_host: str) -> None:
        scope = self.store._scope_for(vm_root(service))
        if scope is not None:
            scope.writable_by.add(vm_id(replica))
            scope.writable_by.add(orch_id(replica_host))

    def revoke_service_access(self, service: str, replica: str) -> None:
        scope = self.store._scope_for(vm_root(service))
        if scope is not None:
            scope.writable_by.discard(vm_id(replica))

    def expect_heartbeats(self, host: str) -> None:
        if host not in self._hb_last:
            self._hb_last[host] = self._now()

    # -- Halt and die --

    def _handle_halt(self, vm: HostedVm, rec: RequestRecord) -> None:
        if vm.kind == "first":
            self._reply_and_clear(rec.requester, False,
                                  error_response(f"{ERR_PERMISSION}: first instance never halts"))
            return
        if vm.state != "running":
            self._reply_and_clear(rec.requester, False, error_response(ERR_NOT_RUNNING))
            return
        first = self.fabric.orchestrator_of(vm.first_host)
        roster = first.rosters.get(vm.service)
        if roster is None:
            self._reply_and_clear(rec.requester, False, error_response(ERR_NOT_RUNNING))
            return
        if roster.halting is not None and roster.halting != vm.name:
            # One halting replica per service; others come back later.
            self._reply_and_clear(rec.requester, False, error_response(ERR_RETRY))
            return
        roster.halting = vm.name
        first.switch.set_bucket_weight(roster.gid, vm.bucket_id, 0)
        vm.state = "halting"
        self.store.put(f"{vm_root(vm.name)}/state", "halting")
        self._log(f"halt {vm.name} (weight 0)")
        self._reply_and_clear(rec.requester, False, SUCCESS_RESPONSE)

    def _handle_die(self, vm: HostedVm, rec: RequestRecord) -> None:
        if vm.state != "halting":
            self._reply_and_clear(rec.requester, False, error_response(ERR_NOT_HALTING))
            return
        vm.ttl = 0
        vm.ttl_zero_at = self._now()
        self.store.put(f"{vm_root(vm.name)}/ttl", "0")
        self._log(f"die {vm.name} (ttl 0)")
        # Best-effort response: the instance may be destroyed before reading it.
        self._reply_and_clear(rec.requester, False, SUCCESS_RESPONSE)

    # -- Monitor --

    def monitor_tick(self) -> None:
        if not self.alive:
            return
        self._gc_expired()
        self._gc_crashed()
        self._reconcile_domids()
        self._check_heartbeats()

    def _gc_expired(self) -> None:
        now = self._now()
        for name in sorted(self.hosted):
            vm = self.hosted[name]
            if vm.ttl != 0 or vm.ttl_zero_at is None:
                continue
            first = self.fabric.orchestrator_of(vm.first_host)
            roster = first.rosters.get(vm.service) if first else None
            live = 0
            if roster is not None and vm.bucket_id is not None:
                live = first.switch.live_pinned(roster.gid, vm.bucket_id)
            overdue = now >= vm.ttl_zero_at + self.config.destroy_bound
            if live == 0 or overdue:
                self._destroy_replica(vm, forced=live > 0)

    def _gc_crashed(self) -> None:
        for name in sorted(self.hosted):
            if self.registry.domid(name) is not None:
                continue
            vm = self.hosted[name]
            self._log(f"crash gc {name}")
            if vm.kind == "first":
                self._teardown_first_instance(vm)
            else:
                self._destroy_replica(vm, forced=True, crashed=True)

    def _reconcile_domids(self) -> None:
        for name in sorted(self.hosted):
            vm = self.hosted[name]
            actual = self.registry.domid(name)
            if actual is None or actual == vm.domid:
                continue
            old_vif = vm.vif
            vm.domid = actual
            vm.vif = self.vif_name(actual, 1)
            self.switch.remove_port(old_vif)
            self.switch.add_port(vm.vif)
            root = vm_root(name)
            updates = {f"{root}/dom-id": str(actual)}
            if vm.kind == "first":
                old2 = old_vif.rsplit(".", 1)[0] + ".2"
                new2 = self.vif_name(actual, 2)
                self.switch.remove_port(old2)
                self.switch.add_port(new2)
                service = self.fabric.service_named(vm.service)
                self.store.remove_subtree(f"{root}/ips")
                updates[f"{root}/ips/{vm.vif}"] = service.ip
                updates[f"{root}/ips/{new2}"] = service.private_ip
            self.store.put_many(updates)
            first = self.fabric.orchestrator_of(vm.first_host)
            roster = first.rosters.get(vm.service)
            if roster is not None and vm.bucket_id is not None:
                out_port = vm.tunnel_first if vm.tunnel_first else vm.vif
                expired = first.switch.update_bucket_actions(
                    roster.gid, vm.bucket_id,
                    (set_dst_ip(vm.ip), set_dst_mac(vm.mac), output(out_port)))
                self.fabric.fail_flows(expired, "rebooted")
            self.fabric.vm_rebooted(self.host, vm)
            self._log(f"reconcile {name} dom{actual}")

    def _check_heartbeats(self) -> None:
        now = self._now()
        bound = self.config.heartbeat_interval * self.config.heartbeat_multiplier
        for host in sorted(self._hb_last):
            if host in self._hb_failed:
                continue
            if now - self._hb_last[host] > bound:
                self._hb_failed.add(host)
                self._log(f"declare host {host} failed")
                self.on_replica_host_failure(host)

    def send_heartbeats(self) -> None:
        """Beat toward every first-instance host this host serves replicas for."""
        if not self.alive:
            return
        targets = sorted({vm.first_host for vm in self.hosted.values()
                          if vm.kind == "replica" and vm.first_host != self.host})
        for target in targets:
            if self.fabric.is_alive(target):
                self.fabric.remote_put(self.host, target,
                                       heartbeat_key(self.host),
                                       f"{self._now():.3f}", orch_id(self.host))

    # -- Teardown paths --

    def _destroy_replica(self, vm: HostedVm, forced: bool = False,
                         crashed: bool = False) -> None:
        first = self.fabric.orchestrator_of(vm.first_host)
        roster = first.rosters.get(vm.service) if first else None
        if roster is not None and vm.bucket_id is not None and first.alive:
            if forced:
                expired = first.switch.force_remove_bucket(roster.gid, vm.bucket_id)
                self.fabric.fail_flows(expired, "crashed" if crashed else "expired")
            else:
                first.switch.set_bucket_weight(roster.gid, vm.bucket_id, 0)
                first.switch.remove_bucket(roster.gid, vm.bucket_id)
            roster.members.pop(vm.name, None)
            if roster.halting == vm.name:
                roster.halting = None
            first.revoke_service_access(vm.service, vm.name)
            if vm.tunnel_first:
                first.switch.remove_tunnel(vm.tunnel_first)
            if not any(m.host == self.host for m in roster.members.values()):
                first.stop_expecting_heartbeats(self.host)
        self._teardown_local(vm, crashed)
        self._log(f"destroy {vm.name}" + (" (crash)" if crashed else ""))

    def stop_expecting_heartbeats(self, host: str) -> None:
        if not any(m.host == host
                   for r in self.rosters.values() for m in r.members.values()):
            self._hb_last.pop(host, None)
            self._hb_failed.discard(host)

    def _teardown_local(self, vm: HostedVm, crashed: bool) -> None:
        self.registry.destroy(vm.name)
        if vm.ingress_rule is not None:
            self.switch.remove_flow(vm.ingress_rule)
        if vm.response_rule is not None:
            self.switch.remove_flow(vm.response_rule)
        if vm.tunnel_local:
            self.switch.remove_tunnel(vm.tunnel_local)
        self.switch.remove_port(vm.vif)
        for root in (vm_root(vm.name), boot_root(vm.name), req_root(vm.name)):
            self.store.remove_subtree(root)
        self.store.drop_scope(vm_root(vm.name))
        self.store.drop_scope(req_root(vm.name))
        self.store.drop_scope(request_key(vm.name))
        self.hosted.pop(vm.name, None)
        self._in_flight.pop(vm.name, None)
        self.fabric.vm_destroyed(self.host, vm.name, "crashed" if crashed else "destroyed")

    def _teardown_first_instance(self, vm: HostedVm) -> None:
        """A first instance crashed at VM level: tear the service down."""
        roster = self.rosters.pop(vm.service, None)
        if roster is not None:
            for ref in sorted(roster.members.values(), key=lambda r: r.name):
                peer = self.fabric.orchestrator_of(ref.host)
                member = peer.hosted.get(ref.name)
                if member is not None:
                    peer._destroy_replica(member, forced=True)
            try:
                self.switch.remove_group(roster.gid)
            except Exception:
                pass
        self._teardown_local(vm, crashed=True)

    # -- Host failure handling --

    def on_replica_host_failure(self, host: str) -> None:
        """Heartbeat silence: drop every replica the dead host served for us."""
        for roster in [self.rosters[s] for s in sorted(self.rosters)]:
            doomed = [ref for ref in roster.members.values() if ref.host == host]
            for ref in sorted(doomed, key=lambda r: r.name):
                expired = self.switch.force_remove_bucket(roster.gid, ref.bucket_id)
                self.fabric.fail_flows(expired, "host-failed")
                roster.members.pop(ref.name, None)
                if roster.halting == ref.name:
                    roster.halting = None
                self.revoke_service_access(roster.service, ref.name)
        for tun in self.switch.tunnels():
            if tun.remote_host == host:
                self.switch.remove_tunnel(tun.port_id)
        self._hb_last.pop(host, None)
        self.store.remove_subtree(heartbeat_key(host))
        # Outstanding remote ops toward the dead host never complete.
        for pending in self._outbox.pop(host, []):
            self._finish_guest_request(pending, error_response(ERR_HOST_FAILED))

    def kill(self) -> None:
        """Host power-off: everything on it stops instantly."""
        self.alive = False

    # -- Master failover --

    def become_master(self) -> None:
        """Take over as master: reset fabric state and reboot first instances.

        Every live switch is cleared, every replica destroyed, and each
        surviving service restarts from its first instance alone; the poll
        loops rebuild the replica sets from load.
        """
        self.is_master = True
        live = [h for h in self.fabric.host_names() if self.fabric.is_alive(h)]
        plans = []
        for host in live:
            orch = self.fabric.orchestrator_of(host)
            for name in sorted(orch.rosters):
                plans.append((host, name))
        # Destroy replicas everywhere first.
        for host in live:
            orch = self.fabric.orchestrator_of(host)
            for name in sorted(orch.hosted):
                vm = orch.hosted.get(name)
                if vm is not None and vm.kind == "replica":
                    orch.registry.destroy(name)
                    orch._teardown_local(vm, crashed=False)
            orch.rosters.clear()
            orch._outbox.clear()
            orch._in_flight.clear()
            orch._hb_last.clear()
            orch._hb_failed.clear()
            orch.switch.reset()
        for host, service_name in plans:
            orch = self.fabric.orchestrator_of(host)
            service = self.fabric.service_named(service_name)
            vm = orch.hosted.get(service_name)
            if vm is None or service is None:
                continue
            orch._reboot_first_instance(vm, service)
        self._log("master takeover complete")

    def _reboot_first_instance(self, vm: HostedVm, service: ServiceConfig) -> None:
        domid = self.registry.reboot(vm.name)
        vm.domid = domid
        vm.vif = self.vif_name(domid, 1)
        vif2 = self.vif_name(domid, 2)
        self.switch.add_port(vm.vif)
        self.switch.add_port(vif2)
        gid = service.app_id
        self.switch.create_group(gid, [
            Bucket(0, 1, (set_dst_ip(service.ip), set_dst_mac(vm.mac), output(vm.vif)))])
        self.switch.install_flow(
            self.config.ingress_priority,
            Match(in_port=SoftSwitch.NIC, dst_ip=service.ip, dst_port=service.port),
            (to_group(gid),))
        vm.response_rule = self.switch.install_flow(
            self.config.response_priority,
            Match(src_ip=service.ip, src_port=service.port),
            (output(SoftSwitch.NIC),))
        self.rosters[service.name] = ServiceRoster(service.name, gid)
        root = vm_root(service.name)
        self.store.remove_subtree(f"{root}/ips")
        self.store.put_many({
            f"{root}/dom-id": str(domid),
            f"{root}/state": "running",
            f"{root}/ips/{vm.vif}": service.ip,
            f"{root}/ips/{vif2}": service.private_ip,
        })
        self.fabric.vm_rebooted(self.host, vm)
        self._log(f"reboot first-instance {service.name} dom{domid}")
