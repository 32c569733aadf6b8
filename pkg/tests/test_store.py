import random
import threading
from datetime import timedelta

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dtds.errors import AllStale, AlreadyExists, EmptyFilter, InvalidTenant, NotFound, ValidationFailed
from dtds.model import Entity, geo, prop, rel, serialize_entity
from dtds.ontology import validate_scene_graph
from dtds.store import CREATED, DELETED, ContextStore, QueryFilter, read_log, replay

from support import T0, _asset, _head, _repo, _rr, urn


def car(name="c1", lon=21.73, lat=38.25, at=T0):
    e = Entity(urn("DynamicAsset", name), "DynamicAsset")
    e.attrs["position"] = geo(lon, lat, observed_at=at)
    return e


@pytest.fixture
def store(tmp_path):
    s = ContextStore(tmp_path / "log.ndjson")
    yield s
    s.close()


def test_create_then_get(store):
    e = car()
    seq = store.create_entity("", e)
    assert seq == 1
    assert store.get_entity("", e.id) == e


def test_create_emits_created_plus_one_event_per_attribute(store):
    e = car()
    e.attrs["speed"] = prop(3.0)
    store.create_entity("", e)
    events = store.events("")
    assert [ev.attr_name for ev in events] == [CREATED, "position", "speed"]
    assert [ev.seq for ev in events] == [1, 2, 3]


def test_duplicate_create(store):
    store.create_entity("", car())
    with pytest.raises(AlreadyExists):
        store.create_entity("", car())


def test_create_validates(store):
    bad = car()
    bad.attrs["position"] = geo(1, 2)
    with pytest.raises(ValidationFailed) as info:
        store.create_entity("", bad)
    assert info.value.status == 400


def test_tenant_isolation(store):
    a, b = car(lon=1), car(lon=2)
    store.create_entity("a", a)
    store.create_entity("b", b)
    assert store.get_entity("a", a.id).position().lon == 1
    assert store.get_entity("b", b.id).position().lon == 2
    with pytest.raises(NotFound):
        store.get_entity("", a.id)
    assert store.latest_seq("a") == store.latest_seq("b") == 2


@pytest.mark.parametrize("tenant", ["x/y", "t" * 65])
def test_bad_tenants(store, tenant):
    with pytest.raises(InvalidTenant):
        store.create_entity(tenant, car())


def test_unknown_entity(store):
    with pytest.raises(NotFound):
        store.get_entity("", urn("X", "nope"))
    with pytest.raises(NotFound):
        store.delete_entity("", urn("X", "nope"))
    with pytest.raises(NotFound):
        store.patch_attributes("", urn("X", "nope"), {"a": prop(1)})


def test_patch_newer_and_older(store):
    e = car()
    store.create_entity("", e)
    newer = geo(1, 1, observed_at=T0 + timedelta(seconds=1))
    result = store.patch_attributes("", e.id, {"position": newer})
    assert len(result.events) == 1 and not result.skipped
    assert store.get_entity("", e.id).attrs["position"] == newer
    with pytest.raises(AllStale):
        store.patch_attributes("", e.id, {"position": geo(2, 2, observed_at=T0)})
    assert store.get_entity("", e.id).attrs["position"] == newer


def test_equal_timestamp_is_accepted(store):
    e = car()
    store.create_entity("", e)
    result = store.patch_attributes("", e.id, {"position": geo(5, 5, observed_at=T0)})
    assert len(result.events) == 1


def test_partial_acceptance(store):
    e = car()
    e.attrs["speed"] = prop(1, observed_at=T0)
    store.create_entity("", e)
    later = T0 + timedelta(seconds=1)
    result = store.patch_attributes(
        "", e.id, {"position": geo(3, 3, observed_at=later), "speed": prop(9, observed_at=T0 - timedelta(seconds=1))}
    )
    assert [ev.attr_name for ev in result.events] == ["position"]
    assert result.skipped == ["speed"]


def test_missing_observed_at_gets_receipt_time(tmp_path):
    clock = [T0 + timedelta(minutes=5)]
    store = ContextStore(clock=lambda: clock[0])
    e = car()
    store.create_entity("", e)
    store.patch_attributes("", e.id, {"speed": prop(4)})
    assert store.get_entity("", e.id).attrs["speed"].observed_at == clock[0]


def test_patch_cannot_invalidate(store):
    e = car()
    store.create_entity("", e)
    with pytest.raises(ValidationFailed):
        store.patch_attributes("", e.id, {"syncChannel": prop("not a relationship")})


def test_delete(store):
    e = car()
    store.create_entity("", e)
    store.delete_entity("", e.id)
    with pytest.raises(NotFound):
        store.get_entity("", e.id)
    assert store.events("")[-1].attr_name == DELETED


def test_deleted_rr_surfaces_in_validation(store):
    repo = _repo("r")
    rr = _rr("p", repo.id, "gltf")
    asset = _asset("StaticAsset", "a")
    asset.attrs["hasRepresentation"] = rel(rr.id)
    head = _head("s", [asset.id])
    for e in (repo, rr, asset, head):
        store.create_entity("", e)
    store.delete_entity("", rr.id)
    report = validate_scene_graph(head.id, store.all_entities(""))
    assert "RR_UNRESOLVED" in {f.code for f in report.errors}


def test_queries(store):
    a, b = car("a", 10, 10), car("b", 20, 20)
    head = _head("s", [a.id])
    for e in (a, b, head):
        store.create_entity("", e)
    assert [e.id for e in store.query_entities("", QueryFilter(type="DynamicAsset"))] == [a.id, b.id]
    assert [e.id for e in store.query_entities("", QueryFilter(rel_name="hasAsset", rel_target=a.id))] == [head.id]
    assert store.query_entities("", QueryFilter(bbox=(0, 0, 1, 1))) == []
    assert [e.id for e in store.query_entities("", QueryFilter(bbox=(15, 15, 25, 25)))] == [b.id]
    assert [e.id for e in store.query_entities("", QueryFilter(type="DynamicAsset", id_pattern=":b"))] == [b.id]
    with pytest.raises(EmptyFilter):
        store.query_entities("", QueryFilter())


def test_changes_since(store):
    e = car()
    store.create_entity("", e)
    latest = store.latest_seq("")
    assert store.changes_since("", latest).events == []
    for k in (1, 2):
        store.patch_attributes("", e.id, {"position": geo(k, k, observed_at=T0 + timedelta(seconds=k))})
    page = store.changes_since("", latest)
    assert [ev.seq for ev in page.events] == [latest + 1, latest + 2]
    assert page.next_after is None
    with pytest.raises(ValueError):
        store.changes_since("", -1)


def test_pagination_completeness():
    store = ContextStore(page_size=1)
    e = car()
    e.attrs["speed"] = prop(1)
    store.create_entity("", e)
    pages, after = [], 0
    while True:
        page = store.changes_since("", after)
        pages.append(page.events)
        if page.next_after is None:
            break
        after = page.next_after
    assert len(pages) == 3
    assert [ev for p in pages for ev in p] == store.events("")


def test_log_reopen_restores_state(tmp_path):
    path = tmp_path / "log.ndjson"
    s = ContextStore(path)
    e = car()
    s.create_entity("t", e)
    s.patch_attributes("t", e.id, {"position": geo(2, 2, observed_at=T0 + timedelta(seconds=1))})
    before = serialize_entity(s.get_entity("t", e.id))
    s.close()
    s2 = ContextStore(path)
    assert serialize_entity(s2.get_entity("t", e.id)) == before
    s2.patch_attributes("t", e.id, {"speed": prop(1)})
    assert s2.latest_seq("t") == 4
    s2.close()


def test_listener_sees_batches_in_order(store):
    seen = []
    store.add_listener(lambda events: seen.append([ev.seq for ev in events]))
    store.add_listener(lambda events: 1 / 0)
    store.create_entity("", car())
    assert seen == [[1, 2]]


def test_concurrent_writers_small(tmp_path):
    store = ContextStore(tmp_path / "log.ndjson")
    ids = [car(f"c{i}").id for i in range(4)]
    for i in range(4):
        store.create_entity("", car(f"c{i}"))

    def writer(w):
        rng = random.Random(w)
        for k in range(200):
            at = T0 + timedelta(milliseconds=rng.randint(0, 5000))
            try:
                store.patch_attributes("", rng.choice(ids), {"position": geo(w, k / 1000, observed_at=at)})
            except AllStale:
                pass

    threads = [threading.Thread(target=writer, args=(w,)) for w in range(4)]
    [t.start() for t in threads]
    [t.join() for t in threads]
    events = store.events("")
    assert [ev.seq for ev in events] == list(range(1, len(events) + 1))
    state = replay(read_log(tmp_path / "log.ndjson"))[""]
    assert {k: serialize_entity(v) for k, v in state.items()} == {
        e.id: serialize_entity(e) for e in store.all_entities("")
    }


ops = st.lists(
    st.tuples(st.integers(0, 2), st.sampled_from(["position", "speed"]), st.integers(0, 20)),
    min_size=1,
    max_size=40,
)


@settings(max_examples=150, deadline=None)
@given(ops)
def test_last_write_wins_matches_max_observed(ops):
    """Final attribute = the max-observedAt write; ties go to the later commit."""
    store = ContextStore()
    ids = [urn("DynamicAsset", f"c{i}") for i in range(3)]
    for eid in ids:
        store.create_entity("", Entity(eid, "DynamicAsset", {"position": geo(0, 0, observed_at=T0)}))
    expected = {(eid, "position"): (T0, geo(0, 0, observed_at=T0)) for eid in ids}
    for k, (i, name, ms) in enumerate(ops):
        at = T0 + timedelta(milliseconds=ms)
        attr = geo(k / 100, 0, observed_at=at) if name == "position" else prop(k, observed_at=at)
        key = (ids[i], name)
        if key not in expected or at >= expected[key][0]:
            expected[key] = (at, attr)
        try:
            store.patch_attributes("", ids[i], {name: attr})
        except AllStale:
            pass
    for (eid, name), (_, attr) in expected.items():
        assert store.get_entity("", eid).attrs[name] == attr
    events = store.events("")
    assert all(a.committed_at <= b.committed_at for a, b in zip(events, events[1:]))
