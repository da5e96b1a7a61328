"""LLM backend clients against a scriptable stub HTTP server."""

import json
import time

import pytest

from shellpot import backend as llm
from shellpot.backend import (
    ApiError,
    BackendSpec,
    BudgetExceeded,
    PromptBundle,
    Timeout,
    TransportError,
    build_prompt,
    check_available,
    generate,
    reset_backend,
)


def spec_for(server, **kwargs) -> BackendSpec:
    defaults = dict(provider="local_server", endpoint=server.endpoint,
                    model_id="stub-model", timeout_s=5.0)
    defaults.update(kwargs)
    return BackendSpec(**defaults)


def prompt_for(command="df -h") -> PromptBundle:
    return build_prompt("cwd=/root", command)


class TestBuildPrompt:
    def test_substitution(self):
        bundle = build_prompt("cwd=/root", "df -h")
        assert bundle.command == "df -h"
        assert "cwd=/root" in bundle.state
        serialized = bundle.serialize()
        assert serialized.count("Command: df -h") == 1

    def test_empty_command_rejected(self):
        with pytest.raises(ValueError):
            build_prompt("x", "")

    def test_budget_exceeded(self):
        with pytest.raises(BudgetExceeded):
            build_prompt("x" * 1_000_000, "df -h", budget=8000)

    def test_default_template_locks_role(self):
        template = llm.load_default_template()
        lowered = template.lower()
        assert "never" in lowered and "ai" in lowered
        assert "markdown" in lowered


class TestGenerate:
    def test_healthy_roundtrip(self, stub_llm):
        server = stub_llm(responses={"df -h": "Filesystem Size\n"})
        text, latency = generate(spec_for(server), prompt_for("df -h"))
        assert text == "Filesystem Size\n"
        assert latency >= 0

    def test_latency_not_exceeding_wall_time(self, stub_llm):
        server = stub_llm(delay_s=0.05)
        start = time.monotonic()
        _, latency = generate(spec_for(server), prompt_for())
        wall_ms = (time.monotonic() - start) * 1000
        assert latency <= wall_ms + 1

    def test_truncation_to_max_output_chars(self, stub_llm):
        server = stub_llm(default="x" * 10_000)
        text, _ = generate(spec_for(server, max_output_chars=100), prompt_for())
        assert len(text) == 100

    def test_unreachable_endpoint_is_transport_error(self):
        spec = BackendSpec(provider="local_server",
                           endpoint="http://127.0.0.1:9/api/generate",
                           model_id="m", timeout_s=3.0)
        start = time.monotonic()
        with pytest.raises(TransportError):
            generate(spec, prompt_for())
        assert time.monotonic() - start < 3.0

    def test_stalled_server_times_out_near_deadline(self, stub_llm):
        server = stub_llm(delay_s=10.0)
        spec = spec_for(server, timeout_s=1.5)
        start = time.monotonic()
        with pytest.raises(Timeout) as err:
            generate(spec, prompt_for())
        elapsed = time.monotonic() - start
        assert elapsed == pytest.approx(1.5, abs=0.5)
        assert err.value.elapsed_ms >= 1000

    def test_api_error_on_http_failure(self, stub_llm):
        server = stub_llm(status=500)
        with pytest.raises(ApiError) as err:
            generate(spec_for(server), prompt_for())
        assert err.value.status == 500

    def test_malformed_body_is_api_error(self, stub_llm):
        server = stub_llm(body_override=b"not json")
        with pytest.raises(ApiError):
            generate(spec_for(server), prompt_for())

    def test_never_blocks_past_timeout_plus_one(self, stub_llm):
        server = stub_llm(delay_s=8.0)
        spec = spec_for(server, timeout_s=1.0)
        start = time.monotonic()
        with pytest.raises(Timeout):
            generate(spec, prompt_for())
        assert time.monotonic() - start < spec.timeout_s + 1.0

    def test_request_shape(self, stub_llm):
        server = stub_llm()
        generate(spec_for(server, temperature=0.25, max_tokens=64), prompt_for("uptime"))
        body = server.requests[-1]
        assert body["model"] == "stub-model"
        assert body["stream"] is False
        assert body["options"] == {"temperature": 0.25, "num_predict": 64}
        assert "Command: uptime" in body["prompt"]


class TestRetryPolicy:
    def test_one_retry_on_transport_error(self, stub_llm):
        server = stub_llm(abort_first=True, default="after retry\n")
        text, _ = generate(spec_for(server), prompt_for())
        assert text == "after retry\n"
        assert server.hits == 2

    def test_no_retry_on_timeout(self, stub_llm):
        server = stub_llm(delay_s=5.0)
        spec = spec_for(server, timeout_s=1.0)
        with pytest.raises(Timeout):
            generate(spec, prompt_for())
        assert server.hits == 1


class TestConcurrencyLimit:
    def test_in_flight_requests_capped(self, stub_llm):
        import threading

        server = stub_llm(delay_s=0.15)
        spec = spec_for(server, concurrency=2, timeout_s=10.0)
        errors = []

        def worker():
            try:
                generate(spec, prompt_for("uptime"))
            except Exception as exc:  # surfaced after the join below
                errors.append(exc)

        threads = [threading.Thread(target=worker) for _ in range(8)]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
        assert not errors
        assert server.hits == 8
        assert server.max_in_flight <= 2


class TestReplayProvider:
    def make_spec(self, tmp_path, responses, default_latency=7) -> BackendSpec:
        path = tmp_path / "replay.json"
        path.write_text(json.dumps({
            "version": 1,
            "default_latency_ms": default_latency,
            "responses": responses,
        }))
        return BackendSpec(provider="replay", replay_file=str(path), model_id="replay")

    def test_canned_response_and_latency(self, tmp_path):
        spec = self.make_spec(tmp_path, {
            "df -h": {"text": "Filesystem\n", "latency_ms": 123},
        })
        assert generate(spec, prompt_for("df -h")) == ("Filesystem\n", 123)

    def test_string_entry_uses_default_latency(self, tmp_path):
        spec = self.make_spec(tmp_path, {"uptime": "up 1 day\n"})
        assert generate(spec, prompt_for("uptime")) == ("up 1 day\n", 7)

    def test_miss_yields_empty(self, tmp_path):
        spec = self.make_spec(tmp_path, {})
        assert generate(spec, prompt_for("unknown"))[0] == ""


class TestCheckAvailable:
    def test_healthy(self, stub_llm):
        assert check_available(spec_for(stub_llm()), timeout_s=5.0)

    def test_no_server(self):
        spec = BackendSpec(provider="local_server",
                           endpoint="http://127.0.0.1:9/api/generate",
                           model_id="m", timeout_s=2.0)
        assert check_available(spec, timeout_s=2.0) is False

    def test_cloud_without_key_env(self, monkeypatch):
        monkeypatch.delenv("SHELLPOT_TEST_KEY", raising=False)
        spec = BackendSpec(provider="cloud_api", endpoint="https://example.invalid",
                           model_id="m", api_key_env="SHELLPOT_TEST_KEY")
        assert check_available(spec, timeout_s=1.0) is False


class TestResetBackend:
    def test_cloud_is_noop_true(self):
        spec = BackendSpec(provider="cloud_api", endpoint="https://example.invalid",
                           model_id="m", api_key_env="NOPE_KEY")
        assert reset_backend(spec) is True

    def test_reset_hook_success_then_available(self, stub_llm, tmp_path):
        marker = tmp_path / "reset-ran"
        server = stub_llm()
        spec = spec_for(server, reset_cmd=f"touch {marker}")
        assert reset_backend(spec) is True
        assert marker.exists()

    def test_reset_hook_nonzero_fails(self, stub_llm):
        spec = spec_for(stub_llm(), reset_cmd="false")
        assert reset_backend(spec) is False


class TestSecretsHygiene:
    def test_api_key_never_in_errors(self, monkeypatch, stub_llm, caplog):
        secret = "sk-SUPER-SECRET-VALUE"
        monkeypatch.setenv("LLM_API_KEY", secret)
        server = stub_llm(status=403)
        spec = BackendSpec(provider="cloud_api", endpoint=server.endpoint.rsplit("/", 2)[0],
                           model_id="gem", timeout_s=3.0)
        with pytest.raises(ApiError) as err:
            generate(spec, prompt_for())
        assert secret not in str(err.value)
        assert all(secret not in r.getMessage() for r in caplog.records)

    def test_key_sent_in_header_not_url(self, monkeypatch, stub_llm):
        monkeypatch.setenv("LLM_API_KEY", "k-123")
        server = stub_llm(body_override=json.dumps({
            "candidates": [{"content": {"parts": [{"text": "ok"}]}}]
        }).encode())
        base = server.endpoint.rsplit("/", 2)[0]
        spec = BackendSpec(provider="cloud_api", endpoint=base, model_id="gem",
                           timeout_s=3.0)
        text, _ = generate(spec, prompt_for())
        assert text == "ok"


class TestBackendSpecValidation:
    def test_bad_provider(self):
        with pytest.raises(ValueError):
            BackendSpec(provider="mystery")

    def test_nonpositive_timeout(self):
        with pytest.raises(ValueError):
            BackendSpec(provider="local_server", timeout_s=0)

    def test_nonpositive_output_chars(self):
        with pytest.raises(ValueError):
            BackendSpec(provider="local_server", max_output_chars=0)
