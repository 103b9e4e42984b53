"""Software switch fabric: flow tables, select groups, and pinned flows.

Each host runs one SoftSwitch. Rules match on a 5-tuple plus ingress port
and either rewrite-and-output directly or hand the flow to a select group
whose weighted buckets spread new flows across replicas. The first decision
for a flow is pinned: group reconfiguration (adding buckets, changing
weights) never moves an established flow, which is what lets replicas drain
gracefully behind a weight of zero.

Two backends share the selection logic and differ only in where pinned
state lives: "group" keeps it in a kernel-style exact-match cache invisible
to the flow dump, "learn" materializes a learned exact-match rule per flow
at LEARNED_PRIORITY, visible in the dump. A real learn-mode switch adapts
its choices dynamically and cannot hold weighted proportions this exactly;
here both backends honor weights so their external behavior is identical.
"""

from __future__ import annotations

import ipaddress
from dataclasses import dataclass, field
from functools import lru_cache


class SwitchError(Exception):
    pass


class DuplicateExactRule(SwitchError):
    pass


class NoSuchRule(SwitchError):
    pass


class NoSuchGroup(SwitchError):
    pass


class DuplicateGroup(SwitchError):
    pass


class NoSuchBucket(SwitchError):
    pass


class DuplicateBucket(SwitchError):
    pass


class BucketStillDraining(SwitchError):
    pass


class DuplicateKey(SwitchError):
    pass


class NoSuchPort(SwitchError):
    pass


class ModeChangeAfterTraffic(SwitchError):
    pass


# Priority of learned exact-match rules; above anything the control plane
# installs so pinned flows win in learn mode just as the cache does in
# group mode.
LEARNED_PRIORITY = 1000


@dataclass(frozen=True, slots=True)
class FlowKey:
    """Canonical 5-tuple identifying one flow."""

    src_ip: str
    dst_ip: str
    proto: int
    src_port: int
    dst_port: int

    def reversed(self) -> "FlowKey":
        return FlowKey(self.dst_ip, self.src_ip, self.proto, self.dst_port, self.src_port)


@dataclass(frozen=True, slots=True)
class Action:
    kind: str  # rewrite-dst-ip | rewrite-dst-mac | rewrite-src-ip | output | group
    arg: str

    def render(self) -> str:
        return f"{self.kind}:{self.arg}"


def output(port: str) -> Action:
    return Action("output", port)


def set_dst_ip(ip: str) -> Action:
    return Action("rewrite-dst-ip", ip)


def set_dst_mac(mac: str) -> Action:
    return Action("rewrite-dst-mac", mac)


def set_src_ip(ip: str) -> Action:
    return Action("rewrite-src-ip", ip)


def to_group(gid: str) -> Action:
    return Action("group", gid)


_MATCH_FIELDS = ("in_port", "src_ip", "dst_ip", "proto", "src_port", "dst_port")


@dataclass(frozen=True, slots=True)
class Match:
    """Partial match on ingress port and 5-tuple fields; None is wildcard."""

    in_port: str | None = None
    src_ip: str | None = None
    dst_ip: str | None = None
    proto: int | None = None
    src_port: int | None = None
    dst_port: int | None = None

    def matches(self, key: FlowKey, in_port: str) -> bool:
        return ((self.in_port is None or self.in_port == in_port)
                and (self.src_ip is None or self.src_ip == key.src_ip)
                and (self.dst_ip is None or self.dst_ip == key.dst_ip)
                and (self.proto is None or self.proto == key.proto)
                and (self.src_port is None or self.src_port == key.src_port)
                and (self.dst_port is None or self.dst_port == key.dst_port))

    def render(self) -> str:
        parts = [f"{f}={getattr(self, f)}" for f in _MATCH_FIELDS
                 if getattr(self, f) is not None]
        return ",".join(parts)


def exact_match(key: FlowKey, in_port: str | None = None) -> Match:
    return Match(in_port=in_port, src_ip=key.src_ip, dst_ip=key.dst_ip,
                 proto=key.proto, src_port=key.src_port, dst_port=key.dst_port)


@dataclass
class FlowRule:
    rule_id: int
    priority: int
    match: Match
    actions: tuple[Action, ...]
    seq: int


@dataclass
class Bucket:
    bucket_id: int
    weight: int
    actions: tuple[Action, ...]


@dataclass
class GroupEntry:
    gid: str
    buckets: list[Bucket] = field(default_factory=list)

    def bucket(self, bucket_id: int) -> Bucket:
        for b in self.buckets:
            if b.bucket_id == bucket_id:
                return b
        raise NoSuchBucket(f"group {self.gid} has no bucket {bucket_id}")


@dataclass(slots=True)
class Decision:
    """Outcome of classifying one packet-in: deliver, drop, or error."""

    verdict: str  # deliver | drop | no-live-bucket
    out_key: FlowKey | None = None
    egress_port: str | None = None
    dst_mac: str | None = None
    gid: str | None = None
    bucket_id: int | None = None
    pinned: bool = False


@dataclass(slots=True)
class CachedFlow:
    key: FlowKey
    actions: tuple[Action, ...]
    gid: str
    bucket_id: int


@dataclass
class TunnelPort:
    port_id: str
    remote_host: str
    gre_key: int


@lru_cache(maxsize=4096)
def _ip_int(ip: str) -> int:
    return int(ipaddress.IPv4Address(ip))


_M64 = (1 << 64) - 1


def _mix64(x: int) -> int:
    # splitmix64 finalizer; a full-avalanche 64-bit mixer.
    x = (x + 0x9E3779B97F4A7C15) & _M64
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & _M64
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & _M64
    return x ^ (x >> 31)


@lru_cache(maxsize=64)
def _seed_mix(seed: int) -> int:
    return _mix64(seed & _M64)


def flow_hash(seed: int, key: FlowKey) -> int:
    """Seeded 64-bit hash of the canonical 5-tuple encoding."""
    h = _mix64(_seed_mix(seed) ^ _ip_int(key.src_ip))
    h = _mix64(h ^ _ip_int(key.dst_ip))
    h = _mix64(h ^ key.proto)
    h = _mix64(h ^ key.src_port)
    return _mix64(h ^ key.dst_port)


class SoftSwitch:
    """Priority flow table plus select groups for one host."""

    NIC = "nic"

    def __init__(self, host_id: str, mode: str = "group", hash_seed: int = 0):
        if mode not in ("group", "learn"):
            raise ValueError(f"bad mode {mode!r}")
        self.host_id = host_id
        self.mode = mode
        self.hash_seed = hash_seed
        self._rules: dict[int, FlowRule] = {}
        self._groups: dict[str, GroupEntry] = {}
        self._cache: dict[FlowKey, CachedFlow] = {}
        self._live: dict[tuple[str, int], int] = {}
        self._tunnels: dict[str, TunnelPort] = {}
        self._ports: set[str] = {self.NIC}
        self._next_rule = 1
        self._next_seq = 0
        self._classified = False

    # -- Ports --

    def add_port(self, port_id: str) -> None:
        self._ports.add(port_id)

    def remove_port(self, port_id: str) -> None:
        self._ports.discard(port_id)

    def has_port(self, port_id: str) -> bool:
        return port_id in self._ports

    def create_tunnel(self, remote_host: str, gre_key: int) -> TunnelPort:
        """GRE-style port toward remote_host; keys are unique per switch."""
        for t in self._tunnels.values():
            if t.gre_key == gre_key:
                raise DuplicateKey(f"gre key {gre_key} already in use on {self.host_id}")
        port_id = f"gre{gre_key}"
        tun = TunnelPort(port_id, remote_host, gre_key)
        self._tunnels[port_id] = tun
        self._ports.add(port_id)
        return tun

    def remove_tunnel(self, port_id: str) -> None:
        self._tunnels.pop(port_id, None)
        self._ports.discard(port_id)

    def tunnel(self, port_id: str) -> TunnelPort | None:
        return self._tunnels.get(port_id)

    def tunnels(self) -> list[TunnelPort]:
        return [self._tunnels[p] for p in sorted(self._tunnels)]

    # -- Backend selection --

    def select_backend_mode(self, mode: str) -> None:
        if mode not in ("group", "learn"):
            raise ValueError(f"bad mode {mode!r}")
        if self._classified:
            raise ModeChangeAfterTraffic("traffic already classified")
        self.mode = mode

    # -- Flow table --

    def _check_actions(self, actions: tuple[Action, ...], allow_group: bool) -> None:
        outs = [a for a in actions if a.kind == "output"]
        groups = [a for a in actions if a.kind == "group"]
        if groups:
            if not allow_group or len(groups) != 1 or outs or actions[-1].kind != "group":
                raise SwitchError(f"bad action list {actions}")
            return
        if len(outs) != 1 or actions[-1].kind != "output":
            raise SwitchError(f"actions must end with exactly one output: {actions}")
        if not self.has_port(actions[-1].arg):
            raise NoSuchPort(f"{self.host_id}: no port {actions[-1].arg}")

    def install_flow(self, priority: int, match: Match,
                     actions: tuple[Action, ...]) -> int:
        for r in self._rules.values():
            if r.priority == priority and r.match == match:
                raise DuplicateExactRule(f"rule at priority {priority} match {match} exists")
        self._check_actions(actions, allow_group=True)
        rid = self._next_rule
        self._next_rule += 1
        self._rules[rid] = FlowRule(rid, priority, match, actions, self._next_seq)
        self._next_seq += 1
        return rid

    def remove_flow(self, rule_id: int) -> None:
        if rule_id not in self._rules:
            raise NoSuchRule(f"no rule {rule_id}")
        del self._rules[rule_id]

    def install_snat(self, service_ip: str, service_port: int, replica_ip: str,
                     priority: int = 20) -> int:
        """Rewrite a replica's response source back to the service address."""
        match = Match(src_ip=replica_ip, src_port=service_port)
        actions = (set_src_ip(service_ip), output(self.NIC))
        return self.install_flow(priority, match, actions)

    # -- Groups --

    def create_group(self, gid: str, buckets: list[Bucket] | None = None) -> GroupEntry:
        if gid in self._groups:
            raise DuplicateGroup(f"group {gid} exists")
        entry = GroupEntry(gid)
        self._groups[gid] = entry
        for b in buckets or []:
            self.add_bucket(gid, b)
        return entry

    def remove_group(self, gid: str) -> None:
        group = self._group(gid)
        for b in list(group.buckets):
            self.force_remove_bucket(gid, b.bucket_id)
        del self._groups[gid]

    def _group(self, gid: str) -> GroupEntry:
        if gid not in self._groups:
            raise NoSuchGroup(f"no group {gid}")
        return self._groups[gid]

    def group(self, gid: str) -> GroupEntry:
        return self._group(gid)

    def groups(self) -> list[GroupEntry]:
        return [self._groups[g] for g in sorted(self._groups)]

    def add_bucket(self, gid: str, bucket: Bucket) -> int:
        group = self._group(gid)
        if any(b.bucket_id == bucket.bucket_id for b in group.buckets):
            raise DuplicateBucket(f"group {gid} bucket {bucket.bucket_id} exists")
        if bucket.weight < 0:
            raise SwitchError("negative weight")
        self._check_actions(bucket.actions, allow_group=False)
        group.buckets.append(bucket)
        return bucket.bucket_id

    def set_bucket_weight(self, gid: str, bucket_id: int, weight: int) -> None:
        if weight < 0:
            raise SwitchError("negative weight")
        self._group(gid).bucket(bucket_id).weight = weight

    def remove_bucket(self, gid: str, bucket_id: int) -> None:
        """Remove a drained bucket: weight 0 and no live pinned flow."""
        group = self._group(gid)
        bucket = group.bucket(bucket_id)
        if bucket.weight != 0 or self._live.get((gid, bucket_id), 0) > 0:
            raise BucketStillDraining(
                f"group {gid} bucket {bucket_id}: weight={bucket.weight} "
                f"live={self._live.get((gid, bucket_id), 0)}")
        group.buckets.remove(bucket)
        self._live.pop((gid, bucket_id), None)

    def force_remove_bucket(self, gid: str, bucket_id: int) -> list[FlowKey]:
        """Remove a bucket regardless of drain state, expiring its pinned flows.

        Used by crash GC and host-failure handling; the returned keys let the
        caller account each broken connection as a delivery failure.
        """
        group = self._group(gid)
        bucket = group.bucket(bucket_id)
        group.buckets.remove(bucket)
        expired = [k for k, c in self._cache.items()
                   if c.gid == gid and c.bucket_id == bucket_id]
        for k in expired:
            del self._cache[k]
        self._live.pop((gid, bucket_id), None)
        return expired

    def update_bucket_actions(self, gid: str, bucket_id: int,
                              actions: tuple[Action, ...]) -> list[FlowKey]:
        """Repoint a bucket (dom-id reconciliation); old pinned flows expire.

        A changed dom-id means the instance restarted, so connections pinned
        to the old port are gone; they are expired and returned.
        """
        self._check_actions(actions, allow_group=False)
        bucket = self._group(gid).bucket(bucket_id)
        bucket.actions = actions
        expired = [k for k, c in self._cache.items()
                   if c.gid == gid and c.bucket_id == bucket_id]
        for k in expired:
            del self._cache[k]
            self._live[(gid, bucket_id)] -= 1
        return expired

    def live_pinned(self, gid: str, bucket_id: int) -> int:
        return self._live.get((gid, bucket_id), 0)

    # -- Classification --

    def _select_bucket(self, group: GroupEntry, key: FlowKey) -> Bucket | None:
        live = [b for b in group.buckets if b.weight > 0]
        if not live:
            return None
        total = sum(b.weight for b in live)
        slot = flow_hash(self.hash_seed, key) % total
        acc = 0
        for b in live:
            acc += b.weight
            if slot < acc:
                return b
        raise AssertionError("unreachable")

    def _apply(self, key: FlowKey, actions: tuple[Action, ...]) -> Decision:
        src_ip = key.src_ip
        dst_ip = key.dst_ip
        mac = None
        port = None
        for a in actions:
            kind = a.kind
            if kind == "rewrite-dst-ip":
                dst_ip = a.arg
            elif kind == "rewrite-src-ip":
                src_ip = a.arg
            elif kind == "rewrite-dst-mac":
                mac = a.arg
            elif kind == "output":
                port = a.arg
        assert port is not None, "resolved actions lost their output"
        if src_ip is key.src_ip and dst_ip is key.dst_ip:
            out = key
        else:
            out = FlowKey(src_ip, dst_ip, key.proto, key.src_port, key.dst_port)
        return Decision("deliver", out_key=out, egress_port=port, dst_mac=mac)

    def classify(self, key: FlowKey, in_port: str) -> Decision:
        """Route one packet-in; the first group decision for a flow pins it."""
        self._classified = True
        cached = self._cache.get(key)
        if cached is not None:
            d = self._apply(key, cached.actions)
            d.gid, d.bucket_id, d.pinned = cached.gid, cached.bucket_id, True
            return d
        rule = self._match_rule(key, in_port)
        if rule is None:
            return Decision("drop")
        actions = rule.actions
        if actions[-1].kind == "group":
            gid = actions[-1].arg
            bucket = self._select_bucket(self._group(gid), key)
            if bucket is None:
                return Decision("no-live-bucket", gid=gid)
            resolved = actions[:-1] + bucket.actions
            self._cache[key] = CachedFlow(key, resolved, gid, bucket.bucket_id)
            self._live[(gid, bucket.bucket_id)] = self._live.get((gid, bucket.bucket_id), 0) + 1
            d = self._apply(key, resolved)
            d.gid, d.bucket_id = gid, bucket.bucket_id
            return d
        return self._apply(key, actions)

    def _match_rule(self, key: FlowKey, in_port: str) -> FlowRule | None:
        best = None
        for r in self._rules.values():
            if r.match.matches(key, in_port):
                if best is None or (-r.priority, r.seq) < (-best.priority, best.seq):
                    best = r
        return best

    def expire_flow(self, key: FlowKey) -> bool:
        """Drop a closed flow's pinned entry; True if one existed."""
        cached = self._cache.pop(key, None)
        if cached is None:
            return False
        self._live[(cached.gid, cached.bucket_id)] -= 1
        return True

    def pinned_decision(self, key: FlowKey) -> Decision | None:
        cached = self._cache.get(key)
        if cached is None:
            return None
        d = self._apply(key, cached.actions)
        d.gid, d.bucket_id, d.pinned = cached.gid, cached.bucket_id, True
        return d

    def reset(self) -> None:
        """Clear all rules, groups, pinned flows, and tunnels (HA reset)."""
        self._rules.clear()
        self._groups.clear()
        self._cache.clear()
        self._live.clear()
        self._tunnels.clear()
        self._ports = {self.NIC}

    # -- Dump formats --

    def dump_flows(self) -> str:
        """'priority=.. match=.. actions=..' lines, priority desc then age."""
        rules = sorted(self._rules.values(), key=lambda r: (-r.priority, r.seq))
        lines = [self._render_rule(r.priority, r.match, r.actions) for r in rules]
        if self.mode == "learn":
            # Learned pinned flows are real table entries in this backend.
            for key in sorted(self._cache, key=lambda k: (k.src_ip, k.src_port, k.dst_ip, k.dst_port, k.proto)):
                c = self._cache[key]
                lines.insert(0, self._render_rule(LEARNED_PRIORITY, exact_match(key), c.actions))
        return "".join(line + "\n" for line in lines)

    @staticmethod
    def _render_rule(priority: int, match: Match, actions: tuple[Action, ...]) -> str:
        acts = ";".join(a.render() for a in actions)
        return f"priority={priority} match={match.render()} actions={acts}"

    def dump_groups(self) -> str:
        lines = []
        for g in self.groups():
            parts = [f"group={g.gid}", "type=select"]
            for b in g.buckets:
                acts = ";".join(a.render() for a in b.actions)
                parts.append(f"bucket={b.bucket_id}:w={b.weight}:{acts}")
            lines.append(" ".join(parts))
        return "".join(line + "\n" for line in lines)
