"""Shared pytest fixtures: toy repositories, canned gateways and a counting fake HTTP server."""

import json
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from pathlib import Path
from typing import Dict, List, Optional

import pytest

from app.models import BackendConfig, CompletionTask
from app.services.llm_engine import Gateways, LLMGateway, OracleBackend, ScriptedBackend, ScriptedResponse


@pytest.fixture(autouse=True)
def _isolated_env(monkeypatch):
    """Keep tests away from log files and stray backend settings."""
    monkeypatch.setenv("LOG_DIR", "")
    for name in ("ACTOR_BACKEND", "REFLECTOR_BACKEND", "MODE", "MAX_ITER", "BLIND", "FINAL"):
        monkeypatch.delenv(name, raising=False)


@pytest.fixture
def make_repo(tmp_path):
    """Factory writing {relative path: text} into a fresh directory."""

    def _make(files: Dict[str, object], name: str = "repo", parent: Optional[Path] = None) -> Path:
        root = (parent or tmp_path) / name
        root.mkdir(parents=True, exist_ok=True)
        for rel, content in files.items():
            path = root / rel
            path.parent.mkdir(parents=True, exist_ok=True)
            if isinstance(content, bytes):
                path.write_bytes(content)
            else:
                path.write_text(content, encoding="utf-8")
        return root

    return _make


def make_task(prefix: List[str], ground_truth: str, task_id: str = "toy/t.py:1", repo_name: str = "toy",
              file_path: str = "t.py") -> CompletionTask:
    return CompletionTask(
        task_id=task_id,
        repo_name=repo_name,
        file_path=file_path,
        line_no=len(prefix) + 1,
        prefix=prefix,
        ground_truth=ground_truth,
    )


@pytest.fixture
def scripted_gateways():
    """Factory: Gateways backed by scripted actor and reflector replies."""

    def _make(actor: List[object], reflector: Optional[List[object]] = None) -> Gateways:
        def responses(role, items):
            out = []
            for item in items or []:
                if isinstance(item, tuple):
                    text, match = item
                    out.append(ScriptedResponse(role_tag=role, text=text, match=match))
                else:
                    out.append(ScriptedResponse(role_tag=role, text=item))
            return out

        backend = ScriptedBackend(responses("actor", actor) + responses("reflector", reflector))
        config = BackendConfig(kind="scripted")
        return Gateways(actor=LLMGateway(config, backend=backend), reflector=LLMGateway(config, backend=backend))

    return _make


@pytest.fixture
def oracle_gateways():
    def _make(answers: Dict[str, str], sentinel: str = "__ORACLE_SENTINEL__") -> Gateways:
        backend = OracleBackend(answers=answers, sentinel=sentinel)
        config = BackendConfig(kind="oracle", sentinel=sentinel)
        return Gateways(actor=LLMGateway(config, backend=backend), reflector=LLMGateway(config, backend=backend))

    return _make


class FakeChatServer:
    """Chat-completions stand-in on 127.0.0.1 that counts requests."""

    def __init__(self):
        self.status = 200
        self.reply = "return x"
        self.requests: List[dict] = []
        self.headers: List[dict] = []
        server = self

        class Handler(BaseHTTPRequestHandler):
            def do_POST(self):
                length = int(self.headers.get("Content-Length", 0))
                body = self.rfile.read(length)
                server.requests.append(json.loads(body or b"{}"))
                server.headers.append(dict(self.headers))
                if server.status == 200:
                    payload = json.dumps({
                        "choices": [{"message": {"role": "assistant", "content": server.reply}}],
                        "usage": {"prompt_tokens": 5, "completion_tokens": 2, "details": {"cached": 0}},
                    }).encode()
                else:
                    payload = b'{"error": "unavailable"}'
                self.send_response(server.status)
                self.send_header("Content-Type", "application/json")
                self.send_header("Content-Length", str(len(payload)))
                self.end_headers()
                self.wfile.write(payload)

            def log_message(self, *args):
                pass

        self._httpd = ThreadingHTTPServer(("127.0.0.1", 0), Handler)
        self.url = f"http://127.0.0.1:{self._httpd.server_address[1]}/v1"
        self._thread = threading.Thread(target=self._httpd.serve_forever, daemon=True)

    @property
    def count(self) -> int:
        return len(self.requests)

    def start(self):
        self._thread.start()
        return self

    def stop(self):
        self._httpd.shutdown()
        self._httpd.server_close()


@pytest.fixture
def fake_server():
    server = FakeChatServer().start()
    yield server
    server.stop()


@pytest.fixture
def http_config(fake_server, monkeypatch):
    """Fast-retry chat backend pointed at the fake server."""
    monkeypatch.setenv("TEST_CHAT_KEY", "sk-test-secret")
    return BackendConfig(
        kind="http_chat",
        endpoint_url=fake_server.url,
        model_name="fake-model",
        api_key_env="TEST_CHAT_KEY",
        timeout=5.0,
        max_retries=2,
        retry_backoff=0.0,
    )
