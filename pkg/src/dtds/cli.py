"""dtdsctl: serve, inspect and drive a DTDS instance from the shell.

Exit codes: 0 success, 1 domain error, 2 usage error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path
from typing import Any

from dtds.errors import DTDSError, MalformedDocument, SceneHeadMissing
from dtds.model import entity_from_json, loads
from dtds.ontology import (
    ACM,
    ASSET_REPOSITORY,
    ASSET_TYPES,
    CONTEXT_REF,
    REPRESENTATION_REF,
    SCENE_HEAD,
    validate_scene_graph,
)

DEFAULT_SERVER = "http://127.0.0.1:8080"
DEFAULT_BROKER = "mqtt://127.0.0.1:1883"
CREATE_RANK = {ASSET_REPOSITORY: 0, ACM: 1, REPRESENTATION_REF: 2, CONTEXT_REF: 2, SCENE_HEAD: 5}


def _print_json(doc: Any) -> None:
    print(json.dumps(doc, indent=2, ensure_ascii=False))


def _json_arg(text: str) -> Any:
    """Inline JSON, or ``@path`` to read it from a file."""
    if text.startswith("@"):
        text = Path(text[1:]).read_text(encoding="utf-8")
    return loads(text)


def _client(args):
    from dtds.client import DTDSClient

    return DTDSClient(args.server, args.tenant)


def load_scene_dir(path: str | Path) -> list[dict[str, Any]]:
    """Every entity document in ``*.json`` files of a directory (a file may hold a list)."""
    docs: list[dict[str, Any]] = []
    files = sorted(Path(path).glob("*.json"))
    if not files:
        raise MalformedDocument(f"no *.json entity documents in {path}")
    for f in files:
        doc = loads(f.read_bytes())
        docs.extend(doc if isinstance(doc, list) else [doc])
    return docs


def creation_order(docs: list[dict[str, Any]]) -> list[dict[str, Any]]:
    def rank(doc):
        t = doc.get("type")
        return CREATE_RANK.get(t, 4 if t in ASSET_TYPES else 3)

    return sorted(docs, key=lambda d: (rank(d), str(d.get("id"))))


# -- commands -----------------------------------------------------------------


def cmd_serve(args) -> int:
    from dtds.api import http_serve
    from dtds.service import ServiceConfig

    config = ServiceConfig(
        data_dir=args.data_dir,
        base_uri=args.base_uri or f"http://{args.host}:{args.port}",
        default_broker=args.broker,
        persist=not args.no_persist,
    )
    http_serve(config, args.host, args.port)
    return 0


def cmd_entity(args) -> int:
    with _client(args) as c:
        if args.action == "get":
            _print_json(c.get_entity(args.id, local=args.local).to_json())
        elif args.action == "create":
            doc = _json_arg(args.document)
            for d in doc if isinstance(doc, list) else [doc]:
                c.create_entity(d)
                print(d.get("id"))
        elif args.action == "patch":
            result = c.patch(args.id, _json_arg(args.fragment))
            if result is not None:
                _print_json(result)
        elif args.action == "delete":
            c.delete_entity(args.id)
        elif args.action == "query":
            found = c.query(type=args.type, idPattern=args.id_pattern, bbox=args.bbox, local="true" if args.local else None)
            _print_json([e.to_json() for e in found])
    return 0


def cmd_scene(args) -> int:
    if args.action == "validate" and Path(args.target).is_dir():
        docs = load_scene_dir(args.target)
        entities = [entity_from_json(d) for d in docs]
        heads = [e.id for e in entities if e.type == SCENE_HEAD]
        if len(heads) != 1:
            raise SceneHeadMissing(f"expected exactly one SceneHead in {args.target}, found {len(heads)}")
        report = validate_scene_graph(heads[0], entities)
        for f in report.findings:
            print(f"{f.severity}: {f.code} {f.entity_id}: {f.message}")
        print(f"{len(report.errors)} errors, {len(report.warnings)} warnings")
        return 0 if report.valid else 1
    with _client(args) as c:
        if args.action == "validate":
            report = c.validate_scene(args.target)
            for f in report["findings"]:
                print(f"{f['severity']}: {f['code']} {f['entityId']}: {f['message']}")
            print(f"{report['errors']} errors, {report['warnings']} warnings")
            return 0 if report["valid"] else 1
        if args.action == "create":
            from dtds.errors import AlreadyExists

            for doc in creation_order(load_scene_dir(args.target)):
                try:
                    c.create_entity(doc)
                    print(f"created {doc.get('id')}")
                except AlreadyExists:
                    if not args.skip_existing:
                        raise
                    print(f"exists  {doc.get('id')}")
        elif args.action == "resolve":
            _print_json(c.resolve_scene(args.target, args.formats, args.modalities))
        elif args.action == "watch":
            _print_json(c.watch_scene(args.target, args.endpoint, args.topic, args.qos))
    return 0


def cmd_asset(args) -> int:
    with _client(args) as c:
        if args.action == "put":
            print(c.put_asset_file(args.path, args.format, args.modality))
        elif args.action == "get":
            data = c.get_asset(args.resource_id)
            if args.output:
                Path(args.output).write_bytes(data)
            else:
                sys.stdout.buffer.write(data)
        elif args.action == "meta":
            _print_json(c.asset_meta(args.resource_id))
    return 0


def cmd_sub(args) -> int:
    with _client(args) as c:
        if args.action == "create":
            print(c.create_subscription(_json_arg(args.document)))
        elif args.action == "delete":
            c.delete_subscription(args.id)
        elif args.action == "stats":
            _print_json(c.subscription_stats(args.id))
    return 0


def cmd_csource(args) -> int:
    with _client(args) as c:
        print(c.register_source(_json_arg(args.document)))
    return 0


def cmd_replay(args) -> int:
    from dtds.poc.trace import default_ingest_topic, load_trace, replay_trace

    trace = load_trace(args.trace)
    topic = args.topic or default_ingest_topic(args.tenant, args.vehicle)
    sent = replay_trace(trace, args.speed_factor, args.broker, topic)
    print(f"published {sent} fixes to {topic}")
    return 0


def cmd_sample(args) -> int:
    from dtds.poc.sampler import Sampler
    from dtds.poc.trace import default_ingest_topic

    topic = args.topic or default_ingest_topic(args.tenant, args.vehicle)
    sampler = Sampler(args.broker, topic, args.server, args.tenant, args.vehicle, args.period)
    try:
        sampler.run()
    except KeyboardInterrupt:
        pass
    return 0


def cmd_sim(args) -> int:
    from dtds.client import DTDSClient
    from dtds.geo import load_network
    from dtds.poc.controller import SimController, locate_real
    from dtds.poc.fixtures import loop_network
    from dtds.poc.sim import SimConfig, spawn_vehicles

    network = load_network(args.network) if args.network else loop_network()
    cfg = SimConfig(
        dt=args.dt, g_min=args.g_min, tau=args.tau, a_accel=args.a_accel,
        publish_period=args.publish_period, n_virtual=args.n_virtual, seed=args.seed,
    )
    real = None
    if args.real_car:
        with DTDSClient(args.server, args.tenant) as c:
            try:
                real = locate_real(network, c.get_entity(args.real_car, local=True).position(), args.real_car)
            except DTDSError:
                real = None
    vehicles = spawn_vehicles(network, cfg, real=real if real and real.active else None)
    controller = SimController(args.server, args.tenant, network, cfg, vehicles, args.real_car)
    controller.ensure_entities()
    controller.start(args.duration)
    try:
        controller.join()
    except KeyboardInterrupt:
        pass
    finally:
        controller.stop()
    _print_json(controller.stats.to_json())
    return 0 if controller.stats.violations == 0 else 1


def cmd_watch(args) -> int:
    from dtds.poc.watcher import Watcher

    def emit(line):
        print(json.dumps(line), flush=True)

    watcher = Watcher(args.server, args.tenant, args.scene, args.broker, args.qos, None if args.table else emit)
    watcher.start()
    try:
        deadline = time.monotonic() + args.duration if args.duration else None
        while deadline is None or time.monotonic() < deadline:
            time.sleep(args.refresh if args.table else 0.2)
            if args.table:
                print("\x1b[2J\x1b[H" + watcher.table(), flush=True)
    except KeyboardInterrupt:
        pass
    finally:
        watcher.stop()
    return 0


def cmd_scenario(args) -> int:
    from dtds.poc.scenario import load_config, render_histogram, run_scenario

    report = run_scenario(load_config(args.config))
    if args.output:
        Path(args.output).write_text(json.dumps(report, indent=2))
    for name, h in (report.get("latency") or {}).items():
        print(render_histogram(name, h), file=sys.stderr)
    _print_json({k: v for k, v in report.items() if k != "latency"})
    return 1 if report["aborted"] else 0


def cmd_trace(args) -> int:
    from dtds.geo import load_network
    from dtds.poc.fixtures import loop_network
    from dtds.poc.trace import synthetic_trace, write_trace

    network = load_network(args.network) if args.network else loop_network()
    lane = args.lane or sorted(network.lanes)[0]
    write_trace(args.output, synthetic_trace(network, lane, args.speed, args.duration, args.rate))
    return 0


# -- parser -------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dtdsctl", description="Digital Twin Descriptor Service control tool")
    p.add_argument("--server", default=DEFAULT_SERVER, help="service base URL")
    p.add_argument("--tenant", default="", help="NGSILD-Tenant to act in")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("serve", help="run the HTTP service")
    s.add_argument("--host", default="127.0.0.1")
    s.add_argument("--port", type=int, default=8080)
    s.add_argument("--data-dir")
    s.add_argument("--base-uri")
    s.add_argument("--broker", help="default MQTT broker for scene watches")
    s.add_argument("--no-persist", action="store_true", help="keep the change log in memory only")
    s.set_defaults(func=cmd_serve)

    e = sub.add_parser("entity", help="entity CRUD").add_subparsers(dest="action", required=True)
    g = e.add_parser("get")
    g.add_argument("id")
    g.add_argument("--local", action="store_true", help="skip federation")
    e.add_parser("create").add_argument("document", help="JSON or @file")
    pa = e.add_parser("patch")
    pa.add_argument("id")
    pa.add_argument("fragment", help="JSON or @file")
    e.add_parser("delete").add_argument("id")
    q = e.add_parser("query")
    q.add_argument("--type")
    q.add_argument("--id-pattern")
    q.add_argument("--bbox")
    q.add_argument("--local", action="store_true")
    for parser in e.choices.values():
        parser.set_defaults(func=cmd_entity)

    sc = sub.add_parser("scene", help="scene descriptors").add_subparsers(dest="action", required=True)
    cr = sc.add_parser("create", help="create all entity documents of a directory")
    cr.add_argument("target", metavar="dir")
    cr.add_argument("--skip-existing", action="store_true")
    sc.add_parser("validate", help="validate a directory offline or a stored scene").add_argument("target")
    rs = sc.add_parser("resolve")
    rs.add_argument("target", metavar="scene_id")
    rs.add_argument("--formats")
    rs.add_argument("--modalities")
    w = sc.add_parser("watch")
    w.add_argument("target", metavar="scene_id")
    w.add_argument("--endpoint")
    w.add_argument("--topic")
    w.add_argument("--qos", type=int, default=0, choices=(0, 1))
    for parser in sc.choices.values():
        parser.set_defaults(func=cmd_scene)

    a = sub.add_parser("asset", help="content-addressed assets").add_subparsers(dest="action", required=True)
    put = a.add_parser("put")
    put.add_argument("path")
    put.add_argument("--format", required=True)
    put.add_argument("--modality", required=True)
    get = a.add_parser("get")
    get.add_argument("resource_id")
    get.add_argument("-o", "--output")
    a.add_parser("meta").add_argument("resource_id")
    for parser in a.choices.values():
        parser.set_defaults(func=cmd_asset)

    su = sub.add_parser("sub", help="subscriptions").add_subparsers(dest="action", required=True)
    su.add_parser("create").add_argument("document", help="JSON or @file")
    su.add_parser("delete").add_argument("id")
    su.add_parser("stats").add_argument("id")
    for parser in su.choices.values():
        parser.set_defaults(func=cmd_sub)

    cs = sub.add_parser("csource", help="context source registrations").add_subparsers(dest="action", required=True)
    cs.add_parser("register").add_argument("document", help="JSON or @file")
    cs.choices["register"].set_defaults(func=cmd_csource)

    r = sub.add_parser("replay", help="replay a GPS trace over MQTT")
    r.add_argument("trace")
    r.add_argument("--broker", default=DEFAULT_BROKER)
    r.add_argument("--vehicle", default="urn:ngsi-ld:DynamicAsset:realcar")
    r.add_argument("--topic")
    r.add_argument("--speed-factor", type=float, default=1.0)
    r.set_defaults(func=cmd_replay)

    sa = sub.add_parser("sample", help="bridge MQTT fixes into a DynamicAsset")
    sa.add_argument("--broker", default=DEFAULT_BROKER)
    sa.add_argument("--vehicle", default="urn:ngsi-ld:DynamicAsset:realcar")
    sa.add_argument("--topic")
    sa.add_argument("--period", type=float, default=0.1)
    sa.set_defaults(func=cmd_sample)

    si = sub.add_parser("sim", help="run the traffic simulator controller")
    si.add_argument("--network", help="road network JSON (default: built-in ring)")
    si.add_argument("--real-car", default="urn:ngsi-ld:DynamicAsset:realcar")
    si.add_argument("--duration", type=float)
    si.add_argument("--n-virtual", type=int, default=5)
    si.add_argument("--dt", type=float, default=0.1)
    si.add_argument("--g-min", type=float, default=2.0)
    si.add_argument("--tau", type=float, default=1.0)
    si.add_argument("--a-accel", type=float, default=2.0)
    si.add_argument("--publish-period", type=float, default=0.1)
    si.add_argument("--seed", type=int, default=0)
    si.set_defaults(func=cmd_sim)

    wa = sub.add_parser("watch", help="print live scene notifications")
    wa.add_argument("scene")
    wa.add_argument("--broker", help="MQTT broker (default: the service's)")
    wa.add_argument("--qos", type=int, default=0, choices=(0, 1))
    wa.add_argument("--table", action="store_true", help="refreshing state table instead of NDJSON")
    wa.add_argument("--refresh", type=float, default=0.5)
    wa.add_argument("--duration", type=float, help="stop after this many seconds")
    wa.set_defaults(func=cmd_watch)

    sn = sub.add_parser("scenario", help="run an end-to-end scenario from a JSON config")
    sn.add_argument("config")
    sn.add_argument("-o", "--output", help="write the full report JSON here")
    sn.set_defaults(func=cmd_scenario)

    t = sub.add_parser("trace", help="write a synthetic constant-speed trace")
    t.add_argument("output")
    t.add_argument("--network")
    t.add_argument("--lane")
    t.add_argument("--speed", type=float, default=5.0)
    t.add_argument("--duration", type=float, default=60.0)
    t.add_argument("--rate", type=float, default=10.0)
    t.set_defaults(func=cmd_trace)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except DTDSError as exc:
        print(f"error: {exc.code}: {exc}", file=sys.stderr)
        return 1
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
