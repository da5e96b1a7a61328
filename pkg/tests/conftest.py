"""Shared fixtures: stub LLM HTTP server and config/daemon builders."""

import json
import socket
import threading
import time
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from pathlib import Path

import pytest

from shellpot import sshwire


class StubLlmServer:
    """Local HTTP server speaking the generate API, fully scriptable.

    responses: command-line -> completion text (the prompt's Command: line
    is parsed back out to pick the reply). Unknown commands use default.
    """

    def __init__(self, responses=None, default="stub output\n", delay_s=0.0,
                 status=200, body_override=None, abort_first=False):
        self.responses = dict(responses or {})
        self.default = default
        self.delay_s = delay_s
        self.status = status
        self.body_override = body_override
        self.abort_first = abort_first
        self.requests = []
        self.hits = 0
        self.in_flight = 0
        self.max_in_flight = 0
        self._gauge_lock = threading.Lock()

        stub = self

        class Handler(BaseHTTPRequestHandler):
            def do_POST(self):
                stub.hits += 1
                with stub._gauge_lock:
                    stub.in_flight += 1
                    stub.max_in_flight = max(stub.max_in_flight, stub.in_flight)
                try:
                    self._respond()
                finally:
                    with stub._gauge_lock:
                        stub.in_flight -= 1

            def _respond(self):
                if stub.abort_first and stub.hits == 1:
                    self.connection.close()  # mid-request transport failure
                    return
                length = int(self.headers.get("Content-Length", "0"))
                body = json.loads(self.rfile.read(length) or b"{}")
                stub.requests.append(body)
                if stub.delay_s:
                    time.sleep(stub.delay_s)
                if stub.body_override is not None:
                    payload = stub.body_override
                else:
                    prompt = body.get("prompt", "")
                    command = ""
                    for line in prompt.splitlines():
                        if line.startswith("Command: "):
                            command = line[len("Command: "):]
                    text = stub.responses.get(command, stub.default)
                    payload = json.dumps({"model": body.get("model", ""),
                                          "response": text}).encode()
                self.send_response(stub.status)
                self.send_header("Content-Type", "application/json")
                self.send_header("Content-Length", str(len(payload)))
                self.end_headers()
                self.wfile.write(payload)

            def log_message(self, *args):
                pass

        self._server = ThreadingHTTPServer(("127.0.0.1", 0), Handler)
        self._thread = threading.Thread(target=self._server.serve_forever, daemon=True)
        self._thread.start()

    @property
    def endpoint(self) -> str:
        host, port = self._server.server_address
        return f"http://{host}:{port}/api/generate"

    def close(self):
        self._server.shutdown()
        self._server.server_close()


@pytest.fixture
def stub_llm():
    servers = []

    def factory(**kwargs) -> StubLlmServer:
        server = StubLlmServer(**kwargs)
        servers.append(server)
        return server

    yield factory
    for server in servers:
        server.close()


def free_port() -> int:
    with socket.socket() as sock:
        sock.bind(("127.0.0.1", 0))
        return sock.getsockname()[1]


@pytest.fixture
def host_key(tmp_path) -> Path:
    path = tmp_path / "ssh_host_key"
    sshwire.generate_host_key(path)
    return path


def write_daemon_config(tmp_path, *, provider="replay", endpoint="", users="root:toor",
                        replay: dict | None = None, extra_llm="", extra_ssh="",
                        timeout_s=30) -> Path:
    """Build a config.ini (plus host key and replay file) under tmp_path."""
    tmp_path.mkdir(parents=True, exist_ok=True)
    if not (tmp_path / "ssh_host_key").exists():
        sshwire.generate_host_key(tmp_path / "ssh_host_key")
    replay_line = ""
    if provider == "replay":
        replay_path = tmp_path / "replay.json"
        replay_path.write_text(json.dumps({
            "version": 1,
            "default_latency_ms": 2,
            "responses": replay or {},
        }))
        replay_line = "replay_file = replay.json"
    body = f"""
[ssh]
port = 8022
host_key = ssh_host_key
{extra_ssh}
[auth]
users = {users}
[llm]
provider = {provider}
endpoint = {endpoint}
model = stub-model
timeout_s = {timeout_s}
{replay_line}
{extra_llm}
[logging]
log_dir = logs
"""
    path = tmp_path / "config.ini"
    path.write_text(body)
    return path
