"""Scenario parsing, validation, and override tests."""

from fractalsim.scenario import (
    DEFAULT_PAGES,
    DEFAULT_SCHEDULE,
    apply_overrides,
    load_scenario,
    parse_pages,
    parse_scenario,
    parse_schedule,
    validate,
)

MINIMAL = """
service.name = web
service.host = host0
service.ip = 10.0.0.18
"""

FULL = """
# full scenario exercising every section
sim.seed = 9
sim.horizon_s = 60
sim.backend = learn
sim.store_delay_ms = 1.5
sim.metrics_cadence_s = 0.5

cluster.hosts = alpha, beta
cluster.capacity_mbps = 50
cluster.cores = 8
cluster.reserved_cores = 2
cluster.placement_capacity = 3
cluster.first_domid = 4
cluster.boot_delay_s = 0.1

scaling.enabled = false
scaling.lo_rps = 50
scaling.hi_rps = 500
scaling.poll_halt = 5
scaling.period_s = 0.5

service.name = web
service.host = alpha
service.ip = 10.0.0.18
service.mac = 12:43:3d:a3:d3:02
service.dns = service.name
service.dns_ttl = 400
service.ttl = 120
service.initial_replicas = 2

service2.name = api
service2.host = beta
service2.ip = 10.0.0.19
service2.image = api-image.xen

workload.service = web
workload.schedule = 0:100, 30:900
workload.pages = 1000:0.5, 2000:0.5
workload.url_count = 10
workload.jitter = 0.05

workload2.service = api
workload2.enabled = false

event.1 = 30 kill-host beta
event.2 = 10 replicate web
"""


def errors(diags):
    return [d for d in diags if d[0] == "error"]


def test_minimal_scenario_gets_defaults():
    sc, diags = load_scenario(MINIMAL)
    assert errors(diags) == []
    assert sc.sim.seed == 42
    assert sc.sim.horizon_s == 120.0
    assert sc.sim.backend == "group"
    assert sc.cluster.hosts == ["host0"]
    assert sc.cluster.capacity_mbps == 104.0
    assert sc.scaling.enabled is True
    assert sc.scaling.lo_rps == 100.0 and sc.scaling.hi_rps == 1000.0
    assert len(sc.services) == 1
    svc = sc.services[0].config
    assert svc.name == "web"
    assert svc.private_ip == "10.0.1.18"
    assert svc.image == "web.xen"
    assert svc.port == 80 and svc.ttl == 300
    assert sc.workloads == [] and sc.events == []


def test_full_scenario_round_trip():
    sc, diags = load_scenario(FULL)
    assert errors(diags) == []
    assert sc.sim.backend == "learn"
    assert sc.cluster.hosts == ["alpha", "beta"]
    assert sc.scaling.enabled is False
    names = [s.config.name for s in sc.services]
    assert names == ["web", "api"]
    web = sc.services[0]
    assert web.initial_replicas == 2
    assert web.config.mac == "12:43:3d:a3:d3:02"
    assert web.config.dns_name == "service.name"
    assert web.config.dns_ttl == 400
    assert sc.services[1].config.image == "api-image.xen"
    assert len(sc.workloads) == 2
    assert sc.workloads[0].schedule == [(0.0, 100.0), (30.0, 900.0)]
    assert sc.workloads[0].pages == [(1000, 0.5), (2000, 0.5)]
    assert sc.workloads[1].enabled is False
    # events come back sorted by time
    assert [(e.time_s, e.action) for e in sc.events] == [
        (10.0, "replicate"), (30.0, "kill-host")]
    assert sc.events[1].args == ["beta"]


def test_workload_defaults_bind_first_service():
    sc, diags = load_scenario(MINIMAL + "workload.url_count = 20\n")
    assert errors(diags) == []
    w = sc.workloads[0]
    assert w.service == "web"
    assert w.schedule == DEFAULT_SCHEDULE
    assert w.pages == DEFAULT_PAGES


def test_comments_and_blank_lines_ignored():
    sc, diags = parse_scenario("# header\n\nsim.seed = 3   # trailing\n")
    assert diags == []
    assert sc.sim.seed == 3


def test_duplicate_key_warns_later_wins():
    sc, diags = parse_scenario("sim.seed = 1\nsim.seed = 2\n")
    assert ("warning", "sim.seed", "duplicate key, later value wins") in diags
    assert sc.sim.seed == 2


def test_unknown_key_and_section_warn():
    _, diags = parse_scenario("sim.nope = 1\nwhatever.x = 2\n")
    kinds = {(lvl, key) for lvl, key, _ in diags}
    assert ("warning", "sim.nope") in kinds
    assert ("warning", "whatever.x") in kinds


def test_bad_value_is_error_diag():
    sc, diags = parse_scenario("sim.seed = banana\n")
    assert any(lvl == "error" and key == "sim.seed" for lvl, key, _ in diags)
    assert sc.sim.seed == 42


def test_missing_service_keys_error():
    _, diags = load_scenario("service.name = web\n")
    assert any("missing keys" in msg for lvl, _, msg in diags if lvl == "error")


def test_parse_schedule_sorts_and_rejects_garbage():
    assert parse_schedule("10:5, 0:1") == [(0.0, 1.0), (10.0, 5.0)]
    try:
        parse_schedule("nope")
    except ValueError:
        pass
    else:
        raise AssertionError("expected ValueError")


def test_parse_pages_int_sizes():
    assert parse_pages("4096:0.6, 8192:0.4") == [(4096, 0.6), (8192, 0.4)]


def test_validate_rejects_bad_band_and_hosts():
    sc, _ = parse_scenario(MINIMAL)
    sc.scaling.lo_rps = 500.0
    sc.scaling.hi_rps = 100.0
    sc.services[0].config.host = "ghost"
    diags = validate(sc)
    keys = {key for lvl, key, _ in diags if lvl == "error"}
    assert "scaling.lo_rps" in keys
    assert "service.host" in keys


def test_validate_rejects_duplicate_services():
    text = MINIMAL + """
service2.name = web
service2.host = host0
service2.ip = 10.0.0.18
"""
    _, diags = load_scenario(text)
    keys = {key for lvl, key, _ in diags if lvl == "error"}
    assert "service.name" in keys and "service.ip" in keys


def test_validate_event_arguments():
    base = MINIMAL + "event.1 = 5 kill-host nowhere\n"
    _, diags = load_scenario(base)
    assert any("kill-host" in msg for lvl, _, msg in errors(diags))
    _, diags = load_scenario(MINIMAL + "event.1 = 5 crash-replica web x\n")
    assert any("replica index" in msg for lvl, _, msg in errors(diags))
    _, diags = load_scenario(MINIMAL + "event.1 = 5 explode web\n")
    assert any("unknown action" in msg for lvl, _, msg in errors(diags))


def test_validate_backend_and_jitter():
    sc, _ = parse_scenario(MINIMAL + "workload.jitter = 1.5\n")
    sc.sim.backend = "fancy"
    keys = {key for lvl, key, _ in validate(sc) if lvl == "error"}
    assert "sim.backend" in keys and "workload.jitter" in keys


def test_apply_overrides():
    sc, diags = load_scenario(FULL)
    apply_overrides(sc, ["sim.seed=100", "scaling.enabled=true",
                         "cluster.hosts=one,two,three",
                         "workload.url_count=99",
                         "workload2.enabled=true"], diags)
    assert errors(diags) == []
    assert sc.sim.seed == 100
    assert sc.scaling.enabled is True
    assert sc.cluster.hosts == ["one", "two", "three"]
    assert sc.workloads[0].url_count == 99
    assert sc.workloads[1].enabled is True


def test_apply_override_diagnostics():
    sc, _ = load_scenario(FULL)
    diags = []
    apply_overrides(sc, ["noequals", "nosuch.ttl=1", "workload9.jitter=0"],
                    diags)
    assert len(errors(diags)) == 3


def test_apply_override_service_keys():
    sc, diags = load_scenario(FULL)
    apply_overrides(sc, ["service.initial_replicas=2", "service.ttl=90",
                         "service2.port=8080", "service9.ttl=1"], diags)
    assert sc.services[0].initial_replicas == 2
    assert sc.services[0].config.ttl == 90
    assert sc.services[1].config.port == 8080
    assert len(errors(diags)) == 1
