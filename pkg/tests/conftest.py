import os
import socket
import subprocess
import sys
import time
from pathlib import Path

import httpx
import pytest

from dtds.api import ServerThread
from dtds.client import DTDSClient
from dtds.service import DTDS, ServiceConfig

TESTS = Path(__file__).parent
ROOT = TESTS.parent
FIXTURES = ROOT / "fixtures"


def free_port() -> int:
    with socket.socket() as s:
        s.bind(("127.0.0.1", 0))
        return s.getsockname()[1]


class Broker:
    """A loopback MQTT broker in a child process."""

    def __init__(self) -> None:
        self.port = free_port()
        self.proc = None

    @property
    def endpoint(self) -> str:
        return f"mqtt://127.0.0.1:{self.port}"

    def start(self) -> "Broker":
        self.proc = subprocess.Popen(
            [sys.executable, str(TESTS / "mqtt_broker.py"), str(self.port)],
            stdout=subprocess.PIPE,
            stderr=subprocess.DEVNULL,
            text=True,
        )
        line = self.proc.stdout.readline()
        if "ready" not in line:
            self.stop()
            raise RuntimeError("MQTT broker did not start")
        return self

    def stop(self) -> None:
        if self.proc is not None and self.proc.poll() is None:
            self.proc.terminate()
            try:
                self.proc.wait(5)
            except subprocess.TimeoutExpired:
                self.proc.kill()
                self.proc.wait()

    def restart(self) -> None:
        self.stop()
        time.sleep(0.2)
        self.start()


@pytest.fixture(scope="session")
def broker():
    b = Broker().start()
    yield b
    b.stop()


@pytest.fixture
def service(tmp_path):
    svc = DTDS(ServiceConfig(data_dir=str(tmp_path / "data")))
    yield svc
    svc.close(drain_timeout=0)


@pytest.fixture
def server(tmp_path, broker):
    svc = DTDS(ServiceConfig(data_dir=str(tmp_path / "srv"), default_broker=broker.endpoint))
    thread = ServerThread(svc).start()
    yield thread
    thread.stop(drain_timeout=1.0)


@pytest.fixture
def client(server):
    with DTDSClient(server.url) as c:
        yield c


def wait_for(predicate, timeout: float = 5.0, interval: float = 0.01) -> bool:
    deadline = time.monotonic() + timeout
    while time.monotonic() < deadline:
        if predicate():
            return True
        time.sleep(interval)
    return predicate()


def run_cli(*args: str, timeout: float = 60, input: str | None = None) -> subprocess.CompletedProcess:
    env = dict(os.environ, PYTHONUNBUFFERED="1")
    return subprocess.run(
        [sys.executable, "-m", "dtds.cli", *args],
        capture_output=True,
        text=True,
        timeout=timeout,
        env=env,
        input=input,
        cwd=ROOT,
    )


# -- acceptance reporting -------------------------------------------------------

ACCEPTANCE: dict[int, str] = {}


class Criterion:
    """Record one PASS/FAIL line for an acceptance criterion, whatever way the body exits."""

    def __init__(self, number: int, title: str) -> None:
        self.number = number
        self.title = title
        self.details: list[str] = []

    def note(self, text: str) -> None:
        self.details.append(text)

    def __enter__(self) -> "Criterion":
        return self

    def __exit__(self, exc_type, exc, tb) -> bool:
        verdict = "PASS" if exc_type is None else "FAIL"
        detail = "; ".join(self.details)
        if exc_type is not None:
            reason = str(exc).splitlines()[0] if str(exc) else exc_type.__name__
            detail = f"{detail}; {reason}" if detail else reason
        line = f"[{verdict}] criterion {self.number:>2}: {self.title} ({detail})"
        ACCEPTANCE[self.number] = line
        print(line)
        return False


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for number in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[number])


class ServedProcess:
    """``dtdsctl serve`` in a child process, so load generators do not share its interpreter."""

    def __init__(self, data_dir: Path, broker: str) -> None:
        self.port = free_port()
        self.url = f"http://127.0.0.1:{self.port}"
        self.proc = subprocess.Popen(
            [sys.executable, "-m", "dtds.cli", "serve", "--port", str(self.port),
             "--data-dir", str(data_dir), "--broker", broker],
            stdout=subprocess.DEVNULL,
            stderr=subprocess.DEVNULL,
            cwd=ROOT,
        )
        deadline = time.monotonic() + 20
        while True:
            try:
                httpx.get(f"{self.url}/dtds/v1/health", timeout=1.0).raise_for_status()
                return
            except httpx.HTTPError:
                if self.proc.poll() is not None or time.monotonic() > deadline:
                    self.stop()
                    raise RuntimeError("dtdsctl serve did not come up")
                time.sleep(0.1)

    def stop(self) -> None:
        if self.proc.poll() is None:
            self.proc.terminate()
            try:
                self.proc.wait(10)
            except subprocess.TimeoutExpired:
                self.proc.kill()
                self.proc.wait()
