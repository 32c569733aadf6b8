"""Small paho-mqtt helpers shared by the harness processes."""

from __future__ import annotations

import threading
import uuid
from typing import Callable
from urllib.parse import urlparse

import paho.mqtt.client as mqtt

from dtds.errors import BrokerUnreachable


def split_endpoint(endpoint: str) -> tuple[str, int]:
    parsed = urlparse(endpoint if "://" in endpoint else f"mqtt://{endpoint}")
    return parsed.hostname or "localhost", parsed.port or 1883


def connect(
    endpoint: str,
    prefix: str,
    topics: list[tuple[str, int]] | None = None,
    on_message: Callable[[mqtt.MQTTMessage], None] | None = None,
    timeout: float = 5.0,
) -> mqtt.Client:
    """Connected client with its network loop running; topics are re-subscribed on reconnect."""
    host, port = split_endpoint(endpoint)
    client = mqtt.Client(mqtt.CallbackAPIVersion.VERSION2, client_id=f"{prefix}-{uuid.uuid4().hex[:10]}")
    client.max_inflight_messages_set(1000)
    client.reconnect_delay_set(0.1, 2.0)
    connected = threading.Event()

    def on_connect(c, userdata, flags, rc, props=None):
        if rc.is_failure:
            return
        for topic, qos in topics or []:
            c.subscribe(topic, qos)
        connected.set()

    client.on_connect = on_connect
    if on_message is not None:
        client.on_message = lambda c, u, msg: on_message(msg)
    try:
        client.connect(host, port, keepalive=30)
    except OSError as exc:
        raise BrokerUnreachable(f"MQTT broker {host}:{port}: {exc}") from exc
    client.loop_start()
    if not connected.wait(timeout):
        client.loop_stop()
        raise BrokerUnreachable(f"MQTT broker {host}:{port} did not accept the connection")
    return client


def close(client: mqtt.Client) -> None:
    client.disconnect()
    client.loop_stop()
