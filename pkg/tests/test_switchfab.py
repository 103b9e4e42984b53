"""Switch fabric: rule matching, select groups, pinning, drains, dumps."""

import random

import pytest

from fractalsim.switchfab import (
    Bucket,
    BucketStillDraining,
    Decision,
    DuplicateBucket,
    DuplicateExactRule,
    DuplicateGroup,
    DuplicateKey,
    FlowKey,
    Match,
    ModeChangeAfterTraffic,
    NoSuchGroup,
    NoSuchPort,
    SoftSwitch,
    exact_match,
    flow_hash,
    output,
    set_dst_ip,
    set_dst_mac,
    set_src_ip,
    to_group,
)


def _key(i, dst="10.0.0.18", dport=80):
    return FlowKey(f"172.16.{(i >> 8) & 255}.{i & 255}", dst, 6, 1024 + (i % 60000), dport)


def _switch(mode="group", nbuckets=2, weights=None):
    sw = SoftSwitch("host0", mode=mode, hash_seed=7)
    weights = weights or [1] * nbuckets
    buckets = []
    for i, w in enumerate(weights):
        port = f"vif{16 + i}.1"
        sw.add_port(port)
        buckets.append(Bucket(i, w, (set_dst_ip(f"10.0.1.{200 + i}"), output(port))))
    sw.create_group("g1", buckets)
    sw.install_flow(10, Match(in_port=SoftSwitch.NIC, dst_ip="10.0.0.18", dst_port=80),
                    (to_group("g1"),))
    return sw


# -- Flow table basics --

def test_highest_priority_rule_wins():
    sw = SoftSwitch("h", hash_seed=1)
    sw.add_port("vif1.1")
    sw.add_port("vif2.1")
    sw.install_flow(5, Match(dst_ip="10.0.0.18"), (output("vif1.1"),))
    sw.install_flow(9, Match(dst_ip="10.0.0.18", dst_port=80), (output("vif2.1"),))
    d = sw.classify(_key(0), SoftSwitch.NIC)
    assert d.verdict == "deliver" and d.egress_port == "vif2.1"


def test_equal_priority_ties_break_by_age():
    sw = SoftSwitch("h", hash_seed=1)
    sw.add_port("vif1.1")
    sw.add_port("vif2.1")
    sw.install_flow(5, Match(dst_ip="10.0.0.18"), (output("vif1.1"),))
    sw.install_flow(5, Match(dst_port=80), (output("vif2.1"),))
    assert sw.classify(_key(0), SoftSwitch.NIC).egress_port == "vif1.1"


def test_duplicate_exact_rule_rejected():
    sw = SoftSwitch("h")
    sw.add_port("vif1.1")
    m = Match(dst_ip="10.0.0.18")
    sw.install_flow(5, m, (output("vif1.1"),))
    with pytest.raises(DuplicateExactRule):
        sw.install_flow(5, m, (output("vif1.1"),))


def test_unmatched_traffic_drops():
    sw = SoftSwitch("h")
    assert sw.classify(_key(1), SoftSwitch.NIC).verdict == "drop"


def test_spoofed_traffic_drops_at_destination_switch():
    # A replica spraying packets at an arbitrary address finds no rule on
    # the destination host's switch.
    dst = SoftSwitch("victim")
    spoof = FlowKey("10.0.1.200", "10.0.0.99", 6, 4444, 22)
    assert dst.classify(spoof, SoftSwitch.NIC).verdict == "drop"


def test_actions_must_end_with_one_output():
    sw = SoftSwitch("h")
    sw.add_port("vif1.1")
    with pytest.raises(Exception):
        sw.install_flow(5, Match(), (set_dst_ip("1.2.3.4"),))
    with pytest.raises(Exception):
        sw.install_flow(5, Match(), (output("vif1.1"), set_dst_ip("1.2.3.4")))


def test_output_to_unknown_port_rejected():
    sw = SoftSwitch("h")
    with pytest.raises(NoSuchPort):
        sw.install_flow(5, Match(), (output("vif9.1"),))


# -- Groups and selection --

def test_duplicate_group_and_bucket_rejected():
    sw = _switch()
    with pytest.raises(DuplicateGroup):
        sw.create_group("g1")
    with pytest.raises(DuplicateBucket):
        sw.add_bucket("g1", Bucket(0, 1, (output("vif16.1"),)))
    with pytest.raises(NoSuchGroup):
        sw.add_bucket("nope", Bucket(9, 1, (output("vif16.1"),)))


def test_selection_spreads_over_live_buckets():
    sw = _switch(nbuckets=3)
    counts = [0, 0, 0]
    for i in range(3000):
        d = sw.classify(_key(i), SoftSwitch.NIC)
        counts[d.bucket_id] += 1
    for c in counts:
        assert 800 < c < 1200, counts


def test_weighted_selection_tracks_weights():
    sw = _switch(weights=[2, 1])
    counts = [0, 0]
    for i in range(3000):
        counts[sw.classify(_key(i), SoftSwitch.NIC).bucket_id] += 1
    assert 1850 < counts[0] < 2150, counts


def test_zero_weight_bucket_gets_no_new_flows():
    sw = _switch(weights=[1, 1])
    sw.set_bucket_weight("g1", 0, 0)
    for i in range(200):
        assert sw.classify(_key(1000 + i), SoftSwitch.NIC).bucket_id == 1


def test_no_live_bucket_error_when_all_weights_zero():
    sw = _switch(weights=[1])
    sw.set_bucket_weight("g1", 0, 0)
    d = sw.classify(_key(5), SoftSwitch.NIC)
    assert d.verdict == "no-live-bucket"
    # The failed classify must not pin anything.
    assert sw.pinned_decision(_key(5)) is None


def test_group_rewrites_apply_before_output():
    sw = _switch(nbuckets=1)
    d = sw.classify(_key(3), SoftSwitch.NIC)
    assert d.out_key.dst_ip == "10.0.1.200"
    assert d.egress_port == "vif16.1"


# -- Pinning contract --

def test_pinned_flow_survives_weight_change():
    sw = _switch(weights=[1, 1])
    key = _key(42)
    before = sw.classify(key, SoftSwitch.NIC)
    sw.set_bucket_weight("g1", before.bucket_id, 0)
    after = sw.classify(key, SoftSwitch.NIC)
    assert after.pinned and after.bucket_id == before.bucket_id
    assert after.egress_port == before.egress_port


def test_pinned_flow_survives_bucket_add():
    sw = _switch(nbuckets=2)
    keys = [_key(i) for i in range(50)]
    before = {k: sw.classify(k, SoftSwitch.NIC).bucket_id for k in keys}
    sw.add_port("vif99.1")
    sw.add_bucket("g1", Bucket(9, 5, (set_dst_ip("10.0.1.250"), output("vif99.1"))))
    for k in keys:
        assert sw.classify(k, SoftSwitch.NIC).bucket_id == before[k]


def test_random_group_ops_never_move_pinned_flows():
    rng = random.Random(1234)
    sw = _switch(nbuckets=2)
    keys = [_key(i) for i in range(100)]
    pinned = {k: sw.classify(k, SoftSwitch.NIC).bucket_id for k in keys}
    next_bid = 100
    for _ in range(30):
        op = rng.choice(["add", "weight"])
        gids = [b.bucket_id for b in sw.group("g1").buckets]
        if op == "add":
            port = f"vif{next_bid}.1"
            sw.add_port(port)
            sw.add_bucket("g1", Bucket(next_bid, rng.randint(1, 3),
                                       (set_dst_ip("10.0.1.9"), output(port))))
            next_bid += 1
        else:
            sw.set_bucket_weight("g1", rng.choice(gids), rng.randint(0, 3))
        if all(b.weight == 0 for b in sw.group("g1").buckets):
            sw.set_bucket_weight("g1", gids[0], 1)
        for k in keys:
            assert sw.classify(k, SoftSwitch.NIC).bucket_id == pinned[k]


# -- Drain and removal --

def test_remove_bucket_with_weight_refused():
    sw = _switch(weights=[1, 1])
    with pytest.raises(BucketStillDraining):
        sw.remove_bucket("g1", 0)


def test_remove_bucket_with_live_flows_refused():
    sw = _switch(weights=[1])
    key = _key(7)
    sw.classify(key, SoftSwitch.NIC)
    sw.set_bucket_weight("g1", 0, 0)
    with pytest.raises(BucketStillDraining):
        sw.remove_bucket("g1", 0)
    sw.expire_flow(key)
    sw.remove_bucket("g1", 0)
    assert sw.group("g1").buckets == []


def test_force_remove_returns_expired_keys():
    sw = _switch(weights=[1])
    keys = [_key(i) for i in range(5)]
    for k in keys:
        sw.classify(k, SoftSwitch.NIC)
    expired = sw.force_remove_bucket("g1", 0)
    assert sorted(expired, key=str) == sorted(keys, key=str)
    assert sw.pinned_decision(keys[0]) is None


def test_update_bucket_actions_expires_old_pins():
    sw = _switch(weights=[1])
    key = _key(3)
    sw.classify(key, SoftSwitch.NIC)
    sw.add_port("vif30.1")
    expired = sw.update_bucket_actions(
        "g1", 0, (set_dst_ip("10.0.1.200"), output("vif30.1")))
    assert expired == [key]
    assert sw.classify(key, SoftSwitch.NIC).egress_port == "vif30.1"
    assert sw.live_pinned("g1", 0) == 1


def test_expire_decrements_live_count():
    sw = _switch(weights=[1])
    key = _key(11)
    sw.classify(key, SoftSwitch.NIC)
    assert sw.live_pinned("g1", 0) == 1
    assert sw.expire_flow(key)
    assert sw.live_pinned("g1", 0) == 0
    assert not sw.expire_flow(key)


# -- Tunnels and SNAT --

def test_tunnel_keys_unique_per_switch():
    sw = SoftSwitch("h")
    sw.create_tunnel("host1", 5)
    with pytest.raises(DuplicateKey):
        sw.create_tunnel("host2", 5)
    assert sw.create_tunnel("host1", 6).port_id == "gre6"


def test_snat_rewrites_response_source():
    sw = SoftSwitch("h")
    sw.install_snat("10.0.0.18", 80, "10.0.1.200")
    response = FlowKey("10.0.1.200", "172.16.0.1", 6, 80, 50000)
    d = sw.classify(response, "vif23.1")
    assert d.verdict == "deliver"
    assert d.out_key.src_ip == "10.0.0.18"
    assert d.egress_port == SoftSwitch.NIC


# -- Backends --

def test_mode_change_after_traffic_refused():
    sw = _switch()
    sw.classify(_key(0), SoftSwitch.NIC)
    with pytest.raises(ModeChangeAfterTraffic):
        sw.select_backend_mode("learn")


def test_backends_assign_flows_identically():
    for weights in ([1, 1, 1], [2, 1], [3, 2, 1]):
        a = _switch(mode="group", weights=weights)
        b = _switch(mode="learn", weights=weights)
        for i in range(500):
            da = a.classify(_key(i), SoftSwitch.NIC)
            db = b.classify(_key(i), SoftSwitch.NIC)
            assert da.bucket_id == db.bucket_id


def test_learn_mode_pins_visibly_in_flow_dump():
    sw = _switch(mode="learn", nbuckets=1)
    key = _key(9)
    sw.classify(key, SoftSwitch.NIC)
    dump = sw.dump_flows()
    assert f"src_ip={key.src_ip}" in dump
    assert "priority=1000" in dump


def test_group_mode_keeps_cache_out_of_flow_dump():
    sw = _switch(mode="group", nbuckets=1)
    sw.classify(_key(9), SoftSwitch.NIC)
    assert "priority=1000" not in sw.dump_flows()


# -- Dump formats --

def test_flow_dump_format():
    sw = SoftSwitch("h")
    sw.add_port("vif16.1")
    sw.install_flow(10, Match(in_port="nic", dst_ip="10.0.0.18", dst_port=80),
                    (set_dst_mac("12:43:3d:a3:d3:02"), output("vif16.1")))
    assert sw.dump_flows() == (
        "priority=10 match=in_port=nic,dst_ip=10.0.0.18,dst_port=80 "
        "actions=rewrite-dst-mac:12:43:3d:a3:d3:02;output:vif16.1\n")


def test_group_dump_format():
    sw = _switch(weights=[2, 1])
    assert sw.dump_groups() == (
        "group=g1 type=select "
        "bucket=0:w=2:rewrite-dst-ip:10.0.1.200;output:vif16.1 "
        "bucket=1:w=1:rewrite-dst-ip:10.0.1.201;output:vif17.1\n")


# -- Hash --

def test_flow_hash_deterministic_and_seeded():
    k = _key(123)
    assert flow_hash(7, k) == flow_hash(7, k)
    assert flow_hash(7, k) != flow_hash(8, k)


def test_conservation_every_delivery_has_one_egress():
    sw = _switch(nbuckets=3)
    for i in range(300):
        d = sw.classify(_key(i), SoftSwitch.NIC)
        if d.verdict == "deliver":
            assert d.egress_port is not None
