"""Random scene graphs and brute-force oracles shared by several test modules.

The oracles deliberately share no code with ``dtds.ontology`` or
``dtds.scene``: link tables, reachability and cycle search are restated
here in the most literal form available.
"""

from __future__ import annotations

import random
from dataclasses import dataclass, field
from datetime import timedelta

from dtds.model import Entity, from_epoch, geo, prop, rel

SA, DA = "StaticAsset", "DynamicAsset"
ASSETS = {SA, DA}
FORMATS = ["gltf", "las", "splat", "3dtiles"]
MODALITY_OF = {"gltf": "mesh", "las": "pointcloud", "splat": "gaussian-splat", "3dtiles": "tiles"}
T0 = from_epoch(1_790_000_000)


def urn(kind: str, name: str) -> str:
    return f"urn:ngsi-ld:{kind}:{name}"


@dataclass
class Graph:
    scene_id: str
    entities: dict[str, Entity]
    defective: bool = False
    """True when the generator broke a per-entity rule on purpose."""
    notes: list[str] = field(default_factory=list)


# -- generator ----------------------------------------------------------------


def _head(name: str, assets: list[str]) -> Entity:
    e = Entity(urn("SceneHead", name), "SceneHead")
    e.attrs["name"] = prop(name)
    e.attrs["areaOrigin"] = geo(21.73, 38.25)
    e.attrs["areaBounds"] = prop([21.7, 38.2, 21.8, 38.3])
    if assets:
        e.attrs["hasAsset"] = rel(assets)
    return e


def _repo(name: str) -> Entity:
    e = Entity(urn("AssetRepositoryDescriptor", name), "AssetRepositoryDescriptor")
    e.attrs["baseUri"] = prop("http://repo.test")
    e.attrs["accessMethods"] = prop(
        [
            {"name": "internal", "kind": "internal"},
            {"name": "cdn", "kind": "http-get-template", "urlTemplate": "https://cdn.test/{resourceId}"},
        ]
    )
    return e


def _acm(name: str) -> Entity:
    e = Entity(urn("ACM", name), "ACM")
    e.attrs["protocol"] = prop("mqtt")
    e.attrs["endpoint"] = prop("mqtt://127.0.0.1:1883")
    e.attrs["topic"] = prop(f"dtds/test/{name}")
    e.attrs["qos"] = prop(1)
    return e


def _rr(name: str, repo: str, fmt: str) -> Entity:
    e = Entity(urn("RepresentationReference", name), "RepresentationReference")
    e.attrs["modality"] = prop(MODALITY_OF[fmt])
    e.attrs["format"] = prop(fmt)
    e.attrs["resourceId"] = prop(f"res-{name}")
    e.attrs["inRepository"] = rel(repo)
    return e


def _cr(name: str, source: str, acm: str | None) -> Entity:
    e = Entity(urn("ContextReference", name), "ContextReference")
    e.attrs["sourceEntity"] = rel(source)
    e.attrs["attributeMap"] = prop({"speed": "speed"})
    if acm:
        e.attrs["syncChannel"] = rel(acm)
    return e


def _asset(kind: str, name: str) -> Entity:
    e = Entity(urn(kind, name), kind)
    if kind == DA:
        e.attrs["position"] = geo(21.73, 38.25, observed_at=T0)
        e.attrs["pose"] = prop({"orientation": {"roll": 0.0, "pitch": 0.0, "yaw": 10.0}}, observed_at=T0)
    else:
        e.attrs["position"] = geo(21.74, 38.26)
    return e


def _add_target(e: Entity, name: str, target: str) -> None:
    current = e.targets(name)
    if target not in current:
        e.attrs[name] = rel(current + [target]) if current else rel(target)


# one per-entity rule break per kind; each must be an error-severity finding
def _defect(rng: random.Random, e: Entity) -> str:
    if e.type == "ACM":
        e.attrs["topic"] = prop("dtds/#")
    elif e.type == "RepresentationReference":
        e.attrs["modality"] = prop("voxels")
    elif e.type == "ContextReference":
        e.attrs["attributeMap"] = prop({"position": "position"})
    elif e.type == "AssetRepositoryDescriptor":
        e.attrs["accessMethods"] = prop([{"name": "x", "kind": "http-get-template", "urlTemplate": "https://a/"}])
    elif e.type == DA:
        e.attrs["position"] = geo(21.73, 38.25)
    elif e.type == SA:
        e.attrs["hasContextRef"] = rel(urn("ContextReference", "anything"))
        return "static-context-ref"
    elif e.type == "SceneHead":
        e.attrs["areaBounds"] = prop([0, 0, 1, 1])
    return e.type


def random_graph(rng: random.Random, max_entities: int = 50, name: str = "g") -> Graph:
    """A scene graph of at most ``max_entities`` entities; roughly half are invalid."""
    noisy = rng.random() < 0.5
    if max_entities < 3:
        raise ValueError("a scene graph needs room for a head, a repository and an asset")
    budget = max_entities - 1
    n_repos = rng.randint(1, min(2, budget - 1))
    budget -= n_repos
    n_assets = rng.randint(1, min(25, budget))
    budget -= n_assets
    n_acms = rng.randint(0, min(2, budget))
    budget -= n_acms
    n_rrs = rng.randint(0, min(8, budget))
    n_crs = rng.randint(0, min(6, budget - n_rrs))

    repos = [_repo(f"{name}r{i}") for i in range(n_repos)]
    acms = [_acm(f"{name}m{i}") for i in range(n_acms)]
    assets = [_asset(rng.choice([SA, DA]), f"{name}a{i}") for i in range(n_assets)]
    rrs = [_rr(f"{name}p{i}", rng.choice(repos).id, rng.choice(FORMATS)) for i in range(n_rrs)]
    dyn = [a for a in assets if a.type == DA]
    crs = []
    for i in range(n_crs):
        source = rng.choice(dyn).id if dyn and rng.random() < 0.7 else urn("Vehicle", f"remote{i}")
        crs.append(_cr(f"{name}c{i}", source, rng.choice(acms).id if acms and rng.random() < 0.5 else None))

    # a random forest: each asset may hang below an earlier asset of its kind
    for i, child in enumerate(assets):
        candidates = [p for p in assets[:i] if p.type == child.type]
        if candidates and rng.random() < 0.6:
            parent = rng.choice(candidates)
            _add_target(parent, "childAsset", child.id)
            if rng.random() < 0.5:
                child.attrs["parentAsset"] = rel(parent.id)
    roots = [a.id for a in assets if "parentAsset" not in a.attrs and not any(a.id in p.targets("childAsset") for p in assets)]
    for a in assets:
        for rr in rrs:
            if rng.random() < 0.25:
                _add_target(a, "hasRepresentation", rr.id)
        if a.type == DA:
            for cr in crs:
                if rng.random() < 0.3:
                    _add_target(a, "hasContextRef", cr.id)
            if acms and rng.random() < 0.3:
                a.attrs["syncChannel"] = rel(rng.choice(acms).id)
    head_assets = [r for r in roots if rng.random() < 0.9]
    head = _head(name, head_assets)

    graph = Graph(head.id, {})
    for e in [head, *repos, *acms, *rrs, *crs, *assets]:
        graph.entities[e.id] = e

    if noisy:
        for _ in range(rng.randint(1, 3)):
            graph.notes.append(_structural_noise(rng, graph, assets, rrs, crs, acms))
    if rng.random() < 0.15:
        victim = rng.choice(list(graph.entities.values()))
        graph.notes.append("defect:" + _defect(rng, victim))
        graph.defective = True
    return graph


def _structural_noise(rng, graph, assets, rrs, crs, acms) -> str:
    head = graph.entities[graph.scene_id]
    if not assets:
        return "none"
    kind = rng.choice(["child", "parent", "self", "dangling", "wrongtype", "dropnode", "head"])
    a = rng.choice(assets)
    b = rng.choice(assets)
    if kind == "child":
        _add_target(a, "childAsset", b.id)
    elif kind == "parent":
        b.attrs["parentAsset"] = rel(a.id)
    elif kind == "self":
        a.attrs["parentAsset"] = rel(a.id)
    elif kind == "dangling":
        name = rng.choice(["hasRepresentation", "childAsset", "syncChannel", "hasContextRef"])
        if name == "hasContextRef" and a.type != DA:
            name = "hasRepresentation"
        _add_target(a, name, urn("Missing", f"x{rng.randint(0, 9)}"))
    elif kind == "wrongtype":
        target = rng.choice([e.id for e in [*rrs, *crs, *acms]] or [head.id])
        name = rng.choice(["childAsset", "hasRepresentation"])
        _add_target(a, name, target)
    elif kind == "dropnode":
        # remove an entity other referencing entities may point at
        pool = [e for e in [*rrs, *acms, *assets] if e.id in graph.entities]
        if pool:
            victim = rng.choice(pool)
            del graph.entities[victim.id]
            if victim in assets:
                assets.remove(victim)
            return f"drop:{victim.type}"
    elif kind == "head":
        _add_target(head, "hasAsset", rng.choice([a.id, urn("Missing", "head")]))
    return kind


# -- oracles ------------------------------------------------------------------

# (relationship, required target types) per source type; "SAME" means the source's own type
LINKS = {
    "SceneHead": [("hasAsset", {SA, DA})],
    SA: [("parentAsset", "SAME"), ("childAsset", "SAME"), ("hasRepresentation", {"RepresentationReference"}),
         ("hasContextRef", {"ContextReference"}), ("syncChannel", {"ACM"})],
    DA: [("parentAsset", "SAME"), ("childAsset", "SAME"), ("hasRepresentation", {"RepresentationReference"}),
         ("hasContextRef", {"ContextReference"}), ("syncChannel", {"ACM"})],
    "RepresentationReference": [("inRepository", {"AssetRepositoryDescriptor"})],
    "ContextReference": [("syncChannel", {"ACM"})],
}


def targets(e: Entity, name: str) -> list[str]:
    attr = e.attrs.get(name)
    if attr is None or attr.object is None:
        return []
    return [attr.object] if isinstance(attr.object, str) else list(attr.object)


def structural_errors(scene_id: str, entities: dict[str, Entity]) -> list[str]:
    """Brute-force structural check: every reference enumerated, every cycle searched."""
    problems = []
    for e in entities.values():
        for name, allowed in LINKS.get(e.type, []):
            want = {e.type} if allowed == "SAME" else allowed
            for t in targets(e, name):
                if t not in entities:
                    problems.append(f"unresolved {e.id}.{name} -> {t}")
                elif entities[t].type not in want:
                    problems.append(f"type {e.id}.{name} -> {entities[t].type}")
    assets = [eid for eid, e in entities.items() if e.type in ASSETS]
    succ = {a: set() for a in assets}
    for a in assets:
        for c in targets(entities[a], "childAsset"):
            if c in succ:
                succ[a].add(c)
        for p in targets(entities[a], "parentAsset"):
            if p in succ:
                succ[p].add(a)
    # explicit DFS from every node, looking for a path back to the start
    for start in assets:
        stack, seen = list(succ[start]), set()
        while stack:
            node = stack.pop()
            if node == start:
                problems.append(f"cycle through {start}")
                break
            if node not in seen:
                seen.add(node)
                stack.extend(succ[node])
    listed_by: dict[str, list[str]] = {}
    for a in assets:
        for c in targets(entities[a], "childAsset"):
            if c in succ:
                listed_by.setdefault(c, []).append(a)
                declared = targets(entities[c], "parentAsset")
                if declared and declared != [a]:
                    problems.append(f"asymmetric {a} -> {c}")
    for c, parents in listed_by.items():
        if len(set(parents)) > 1:
            problems.append(f"multiple parents of {c}")
    return problems


def linked_closure(scene_id: str, entities: dict[str, Entity]) -> dict[str, Entity]:
    """Entities reachable from the head over any descriptor link, grown to a fixed point."""
    members = {scene_id}
    while True:
        grown = set(members)
        for eid in members:
            e = entities[eid]
            for name, _ in LINKS.get(e.type, []):
                grown |= {t for t in targets(e, name) if t in entities}
        if grown == members:
            return {eid: entities[eid] for eid in members}
        members = grown


def oracle_valid(graph: Graph) -> bool:
    return not graph.defective and not structural_errors(graph.scene_id, graph.entities)


def reachable(scene_id: str, entities: dict[str, Entity]) -> set[str]:
    """Fixed-point closure over hasAsset and childAsset, restricted to assets."""
    nodes = {t for t in targets(entities[scene_id], "hasAsset") if t in entities and entities[t].type in ASSETS}
    while True:
        grown = set(nodes)
        for n in nodes:
            grown |= {c for c in targets(entities[n], "childAsset") if c in entities and entities[c].type in ASSETS}
        if grown == nodes:
            return nodes
        nodes = grown


def tree_edges(nodes: set[str], entities: dict[str, Entity]) -> set[tuple[str, str]]:
    out = set()
    for a in nodes:
        for b in nodes:
            if b in targets(entities[a], "childAsset") or a in targets(entities[b], "parentAsset"):
                out.add((a, b))
    return out


# -- road networks ------------------------------------------------------------


def random_network_doc(rng: random.Random, lanes: int | None = None) -> dict:
    """A handful of random polylines within a 400 m square."""
    doc = {"origin": {"lat": 38.25, "lon": 21.73}, "lanes": [], "connections": []}
    for i in range(lanes or rng.randint(1, 4)):
        x, y = rng.uniform(-200, 200), rng.uniform(-200, 200)
        points = [[x, y]]
        for _ in range(rng.randint(1, 5)):
            x, y = x + rng.uniform(-80, 80), y + rng.uniform(-80, 80)
            points.append([x, y])
        doc["lanes"].append({"id": f"L{i}", "points": points, "speedLimit": rng.uniform(5, 20)})
    return doc


def sample_lanes(doc: dict, step: float = 0.01):
    """Every lane polyline sampled at spacing <= ``step``; returns (xy array, lane index per row)."""
    import numpy as np

    xs, lane_idx = [], []
    for k, lane in enumerate(doc["lanes"]):
        pts = np.asarray(lane["points"], dtype=float)
        for a, b in zip(pts, pts[1:]):
            n = max(2, int(np.ceil(np.hypot(*(b - a)) / step)) + 1)
            t = np.linspace(0.0, 1.0, n)[:, None]
            xs.append(a + t * (b - a))
            lane_idx.append(np.full(n, k))
    return np.vstack(xs), np.concatenate(lane_idx)


def sampled_nearest(samples, point) -> float:
    import numpy as np

    xy, _ = samples
    return float(np.min(np.hypot(xy[:, 0] - point[0], xy[:, 1] - point[1])))


def load_fixture_scene(store, tenant: str = "", path=None) -> list[str]:
    """Create every entity of a scene directory in dependency order; returns their ids."""
    from pathlib import Path

    from dtds.cli import creation_order, load_scene_dir
    from dtds.model import entity_from_json

    path = path or Path(__file__).parent.parent / "fixtures" / "scene1"
    ids = []
    for doc in creation_order(load_scene_dir(path)):
        store.create_entity(tenant, entity_from_json(doc))
        ids.append(doc["id"])
    return ids


# -- platoons -----------------------------------------------------------------


def random_platoon(rng: random.Random):
    """A random lane (loop or open), config with dt <= tau, and a gap-respecting initial platoon."""
    from dtds.geo import network_from_json
    from dtds.poc.sim import SimConfig, SimState, Vehicle

    loop = rng.random() < 0.5
    length = rng.uniform(150, 1500)
    net = network_from_json({
        "origin": {"lat": 38.25, "lon": 21.73},
        "lanes": [{"id": "L", "points": [[0, 0], [length, 0]], "speedLimit": rng.uniform(5, 25)}],
        "connections": [{"from": "L", "to": "L"}] if loop else [],
    })
    tau = rng.uniform(0.3, 2.0)
    cfg = SimConfig(
        dt=rng.uniform(0.01, tau),
        g_min=rng.uniform(0.5, 5.0),
        tau=tau,
        a_accel=rng.uniform(0.5, 4.0),
        seed=rng.randrange(1 << 30),
    )
    n = rng.randint(2, 8)
    veh_len = rng.uniform(3.0, 6.0)
    slot = veh_len + cfg.g_min
    # random extra spacing, scaled so the platoon fits the lane with its wrap-around gap intact
    extras = [rng.uniform(0, 30) for _ in range(n)]
    room = length - n * slot
    scale = min(1.0, room / sum(extras)) if sum(extras) > 0 else 0.0
    s, vehicles = 0.0, []
    real_index = rng.randrange(n) if rng.random() < 0.3 else None
    for i in range(n):
        s += extras[i] * scale
        is_real = i == real_index
        v = 0.0 if is_real else rng.uniform(0, 15)
        vehicles.append(Vehicle(f"v{i}", "L", s, v, veh_len, rng.uniform(5, 20), is_real=is_real))
        s += slot
    return SimState(net, tuple(vehicles)), cfg


# -- federation merge ---------------------------------------------------------


def merge_oracle(local, remotes):
    """Sort every (attribute, source) pair by (observedAt desc, source rank asc); first wins."""
    sources = ([local] if local is not None else []) + remotes
    pairs = []
    for rank, source in enumerate(sources):
        for name, attr in source.attrs.items():
            stamp = attr.observed_at.timestamp() if attr.observed_at else float("-inf")
            pairs.append((name, -stamp, rank, attr))
    pairs.sort(key=lambda p: (p[0], p[1], p[2]))
    out = {}
    for name, _, _, attr in pairs:
        out.setdefault(name, attr)
    return out


def random_merge_case(rng):
    names = ["a", "b", "c", "d"]

    def make(tag):
        attrs = {}
        for n in rng.sample(names, rng.randint(0, 4)):
            stamp = None if rng.random() < 0.2 else T0 + timedelta(seconds=rng.randint(0, 3))
            attrs[n] = prop(f"{tag}-{n}", stamp)
        return Entity(urn("Vehicle", "v1"), "Vehicle", attrs)

    local = make("local") if rng.random() < 0.8 else None
    remotes = [make(f"r{i}") for i in range(rng.randint(0 if local else 1, 4))]
    return local, remotes
