import json
import random
import threading
import time
from datetime import timedelta
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dtds.api import ServerThread
from dtds.errors import AlreadyExists, FederationUnavailable, IdMismatch, InvalidEndpoint, NotFound
from dtds.federation import ContextSourceRegistration, Federation, match_registrations, merge_entities
from dtds.model import Entity, prop, serialize_entity
from dtds.service import DTDS, ServiceConfig
from dtds.store import ContextStore, QueryFilter

from support import T0, load_fixture_scene, merge_oracle, random_merge_case, urn

VID = urn("Vehicle", "v1")


def reg(name="r", types=("Vehicle",), endpoint="http://127.0.0.1:9", pattern=None, tenant="", timeout_ms=2000):
    return ContextSourceRegistration(urn("ContextSourceRegistration", name), tenant, frozenset(types), endpoint, pattern, timeout_ms)


def vehicle(eid=VID, **attrs):
    return Entity(eid, "Vehicle", dict(attrs))


def at(seconds):
    return T0 + timedelta(seconds=seconds)


# -- merge ----------------------------------------------------------------------


def test_merge_examples():
    local = vehicle(speed=prop(1, at(0)))
    remote = vehicle(speed=prop(2, at(1)))
    assert merge_entities(local, [remote]).attrs["speed"].value == 2
    tie = vehicle(speed=prop(3, at(0)))
    assert merge_entities(local, [tie]).attrs["speed"].value == 1
    disjoint = vehicle(fuel=prop(0.5))
    assert set(merge_entities(local, [disjoint]).attrs) == {"speed", "fuel"}
    with pytest.raises(IdMismatch):
        merge_entities(local, [vehicle(urn("Vehicle", "other"))])


def test_merge_matches_sorting_oracle():
    rng = random.Random(11)
    for _ in range(1000):
        local, remotes = random_merge_case(rng)
        assert merge_entities(local, remotes).attrs == merge_oracle(local, remotes)


@settings(max_examples=200)
@given(st.integers(0, 2**32 - 1))
def test_merge_is_idempotent(seed):
    local, remotes = random_merge_case(random.Random(seed))
    merged = merge_entities(local, remotes)
    assert merge_entities(merged, [merged]) == merged
    assert merge_entities(merged, []) == merged


@settings(max_examples=200)
@given(st.integers(0, 2**32 - 1))
def test_merge_order_only_matters_for_ties(seed):
    rng = random.Random(seed)
    local, remotes = random_merge_case(rng)
    shuffled = remotes[:]
    rng.shuffle(shuffled)
    a, b = merge_entities(local, remotes), merge_entities(local, shuffled)
    for name in a.attrs:
        assert a.attrs[name].observed_at == b.attrs[name].observed_at


# -- registrations ----------------------------------------------------------------


def test_registration_rules():
    fed = Federation(ContextStore())
    try:
        fed.register_context_source(reg())
        with pytest.raises(AlreadyExists):
            fed.register_context_source(reg())
        with pytest.raises(InvalidEndpoint):
            fed.register_context_source(reg("ftp", endpoint="ftp://example.org/"))
        with pytest.raises(InvalidEndpoint):
            fed.register_context_source(reg("none", types=()))
        fed.delete_registration("", reg().id)
        with pytest.raises(NotFound):
            fed.delete_registration("", reg().id)
    finally:
        fed.close()


def test_registration_document_round_trip():
    r = reg(pattern="fleet", tenant="t", timeout_ms=500)
    assert ContextSourceRegistration.from_json(r.to_json(), "t") == r


def test_match_registrations():
    regs = [reg("a"), reg("b", types=("Car",)), reg("c", pattern="fleetA"), reg("d", tenant="x")]
    assert [r.id for r in match_registrations("", QueryFilter(type="Vehicle"), regs)] == [regs[0].id, regs[2].id]
    assert match_registrations("", QueryFilter(type="Bus"), regs) == []
    got = match_registrations("", QueryFilter(type="Vehicle"), regs, entity_id=urn("Vehicle", "fleetB-1"))
    assert [r.id for r in got] == [regs[0].id]
    got = match_registrations("", QueryFilter(type="Vehicle", id_pattern="fleetB"), regs)
    assert [r.id for r in got] == [regs[0].id]


# -- federated reads ---------------------------------------------------------------


@pytest.fixture
def remote(tmp_path):
    svc = DTDS(ServiceConfig(data_dir=str(tmp_path / "remote"), persist=False))
    thread = ServerThread(svc).start()
    yield thread
    thread.stop(drain_timeout=0)


class SlowSource:
    def __init__(self, delay):
        delay_s = delay

        class Handler(BaseHTTPRequestHandler):
            def do_GET(self):
                time.sleep(delay_s)
                body = json.dumps(vehicle(speed=prop(99, at(5))).to_json()).encode()
                self.send_response(200)
                self.send_header("Content-Type", "application/json")
                self.send_header("Content-Length", str(len(body)))
                self.end_headers()
                self.wfile.write(body)

            def log_message(self, *args):
                pass

        self.server = ThreadingHTTPServer(("127.0.0.1", 0), Handler)
        self.server.daemon_threads = True
        threading.Thread(target=self.server.serve_forever, daemon=True).start()
        self.url = f"http://127.0.0.1:{self.server.server_address[1]}"

    def close(self):
        self.server.shutdown()
        self.server.server_close()


def test_local_only(service):
    service.store.create_entity("", vehicle(speed=prop(1, at(0))))
    assert service.federation.federated_get("", VID).value.attrs["speed"].value == 1


def test_remote_only(service, remote):
    remote.service.store.create_entity("", vehicle(speed=prop(2, at(0))))
    service.federation.register_context_source(reg(endpoint=remote.url))
    result = service.federation.federated_get("", VID)
    assert result.value.attrs["speed"].value == 2 and result.warnings == []


def test_newer_remote_wins_in_query(service, remote):
    service.store.create_entity("", vehicle(speed=prop(1, at(0))))
    remote.service.store.create_entity("", vehicle(speed=prop(2, at(1))))
    other = urn("Vehicle", "v2")
    remote.service.store.create_entity("", vehicle(other, speed=prop(7)))
    service.federation.register_context_source(reg(endpoint=remote.url))
    result = service.federation.federated_query("", QueryFilter(type="Vehicle"))
    assert [e.id for e in result.value] == [VID, other]
    assert result.value[0].attrs["speed"].value == 2


def test_tenant_header_forwarded(service, remote):
    remote.service.store.create_entity("fleet", vehicle(speed=prop(5)))
    service.federation.register_context_source(reg(endpoint=remote.url, tenant="fleet"))
    assert service.federation.federated_get("fleet", VID).value.attrs["speed"].value == 5
    with pytest.raises(NotFound):
        service.federation.federated_get("", VID)


def test_timeout_degrades_to_local_with_warning(service):
    slow = SlowSource(1.0)
    try:
        service.store.create_entity("", vehicle(speed=prop(1, at(0))))
        r = reg(endpoint=slow.url, timeout_ms=200)
        service.federation.register_context_source(r)
        start = time.monotonic()
        result = service.federation.federated_get("", VID)
        assert time.monotonic() - start < 0.9
        assert result.value.attrs["speed"].value == 1
        assert result.warnings == [f"SOURCE_TIMEOUT:{r.id}"]
    finally:
        slow.close()


def test_all_sources_failing_without_local_copy(service):
    service.federation.register_context_source(reg(endpoint="http://127.0.0.1:9", timeout_ms=300))
    with pytest.raises(FederationUnavailable) as info:
        service.federation.federated_get("", VID)
    assert info.value.status == 503


def test_zero_registrations_equal_local_query_on_fixtures(service):
    load_fixture_scene(service.store)
    entities = service.store.all_entities("")
    filters = [QueryFilter(type=t) for t in sorted({e.type for e in entities})]
    filters += [QueryFilter(id_pattern=p) for p in ("virtual", "poc", ":")]
    filters += [QueryFilter(rel_name="hasAsset", rel_target=e.id) for e in entities]
    filters += [QueryFilter(bbox=(21.7, 38.2, 21.8, 38.3)), QueryFilter(bbox=(0, 0, 1, 1))]
    for flt in filters:
        local = [serialize_entity(e) for e in service.store.query_entities("", flt)]
        fed = service.federation.federated_query("", flt)
        assert [serialize_entity(e) for e in fed.value] == local
        assert fed.warnings == []
