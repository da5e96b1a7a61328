"""Evaluation harness: corpus loading, model runs, summaries, output tree."""

import csv
import json

import pytest

from shellpot.backend import BackendSpec
from shellpot.harness import (
    CSV_COLUMNS,
    CommandCase,
    CsvError,
    EmptyCorpus,
    EmptyResults,
    HarnessOptions,
    evaluate_models,
    load_cases,
    measure_memory_delta,
    run_model,
    summarize,
    write_outputs,
)
from shellpot.vfs import DATA_DIR


def write_corpus(tmp_path, rows, header="command,expected_output"):
    path = tmp_path / "corpus.csv"
    body = header + "\n" if header else ""
    with open(path, "w", newline="") as fh:
        if header:
            fh.write(header + "\n")
        writer = csv.writer(fh)
        writer.writerows(rows)
    return path


def replay_spec(tmp_path, responses, default_latency=4, **kwargs) -> BackendSpec:
    path = tmp_path / "replay.json"
    path.write_text(json.dumps({
        "version": 1,
        "default_latency_ms": default_latency,
        "responses": responses,
    }))
    defaults = dict(provider="replay", replay_file=str(path), model_id="replay-model")
    defaults.update(kwargs)
    return BackendSpec(**defaults)


class TestLoadCases:
    def test_starter_corpus_loads_in_order(self):
        cases = load_cases(DATA_DIR / "starter_commands.csv")
        assert len(cases) >= 30
        assert cases[0].command == "pwd"
        assert all(case.command for case in cases)

    def test_embedded_newline_preserved(self, tmp_path):
        path = write_corpus(tmp_path, [["ls -la", "total 0\ndrwxr-xr-x . .."]])
        cases = load_cases(path)
        assert len(cases) == 1
        assert "\n" in cases[0].expected_output

    def test_missing_header(self, tmp_path):
        path = tmp_path / "corpus.csv"
        path.write_text("ls,listing\n")
        with pytest.raises(CsvError) as err:
            load_cases(path)
        assert err.value.row == 1

    def test_empty_corpus(self, tmp_path):
        path = tmp_path / "corpus.csv"
        path.write_text("command,expected_output\n")
        with pytest.raises(EmptyCorpus):
            load_cases(path)

    def test_empty_command_rejected(self, tmp_path):
        path = write_corpus(tmp_path, [["", "output"]])
        with pytest.raises(CsvError):
            load_cases(path)

    def test_order_preserved(self, tmp_path):
        rows = [[f"cmd{i}", f"out{i}"] for i in range(10)]
        path = write_corpus(tmp_path, rows)
        assert [c.command for c in load_cases(path)] == [f"cmd{i}" for i in range(10)]


class TestMemoryDelta:
    def test_zero(self):
        assert measure_memory_delta(100 << 20, 100 << 20) == 0.0

    def test_one_mib(self):
        assert measure_memory_delta(100 << 20, 101 << 20) == 1.0

    def test_negative_preserved(self):
        assert measure_memory_delta(101 << 20, 100 << 20) == -1.0


class TestRunModel:
    def test_healthy_run_produces_results(self, tmp_path):
        cases = [CommandCase("pwd", "/root\n"), CommandCase("whoami", "root\n"),
                 CommandCase("mystery", "???\n")]
        spec = replay_spec(tmp_path, {"pwd": "/root\n", "whoami": "root\n"})
        run = run_model(spec, cases, HarnessOptions())
        assert run.skipped is None
        assert len(run.results) == 3
        assert all(r.latency_ms >= 0 for r in run.results)
        assert run.results[0].report.exact
        assert not run.results[2].report.success

    def test_unavailable_backend_is_skipped(self):
        spec = BackendSpec(provider="local_server",
                           endpoint="http://127.0.0.1:9/api/generate",
                           model_id="dead", timeout_s=1.0)
        run = run_model(spec, [CommandCase("pwd", "/root\n")],
                        HarnessOptions(availability_timeout_s=1.0))
        assert run.skipped is not None
        assert run.results == []

    def test_default_mode_is_llm_only(self, tmp_path):
        # builtin-able command still goes to the model in the default mode
        cases = [CommandCase("pwd", "/root\n")]
        spec = replay_spec(tmp_path, {"pwd": "NOT-THE-BUILTIN\n"})
        run = run_model(spec, cases, HarnessOptions())
        assert run.results[0].tier == "llm"
        assert run.results[0].actual == "NOT-THE-BUILTIN\n"

    def test_with_cache_mode_uses_full_routing(self, tmp_path):
        cases = [CommandCase("pwd", "/root\n"), CommandCase("uname -a", "Linux\n"),
                 CommandCase("mystery", "m\n")]
        spec = replay_spec(tmp_path, {"mystery": "m\n"})
        run = run_model(spec, cases, HarnessOptions(with_cache=True))
        tiers = [r.tier for r in run.results]
        assert tiers == ["builtin", "cache", "llm"]
        assert run.results[0].actual == "/root\n"

    def test_timeout_case_recorded_and_run_continues(self, stub_llm, tmp_path):
        server = stub_llm(delay_s=5.0)
        spec = BackendSpec(provider="local_server", endpoint=server.endpoint,
                           model_id="slow", timeout_s=1.0)
        marker = tmp_path / "reset-ran"
        spec = BackendSpec(provider="local_server", endpoint=server.endpoint,
                           model_id="slow", timeout_s=1.0,
                           reset_cmd=f"touch {marker}")
        cases = [CommandCase("first", "a\n"), CommandCase("second", "b\n")]
        run = run_model(spec, cases, HarnessOptions(availability_timeout_s=8.0))
        assert len(run.results) == 2
        first = run.results[0]
        assert first.timed_out
        assert first.actual == ""
        assert not first.report.success
        assert first.latency_ms == 1000
        assert marker.exists(), "reset hook must run after a timeout"

    def test_abort_after_consecutive_transport_errors(self, stub_llm):
        server = stub_llm()
        spec = BackendSpec(provider="local_server", endpoint=server.endpoint,
                           model_id="flaky", timeout_s=2.0)
        cases = [CommandCase(f"cmd{i}", "x\n") for i in range(10)]
        # kill the server after the availability probe
        assert run_model(spec, cases[:0] or [], HarnessOptions(abort_after=3)).results == []
        server.close()
        run = run_model(spec, cases, HarnessOptions(abort_after=3,
                                                    availability_timeout_s=2.0))
        assert run.skipped is not None  # probe already fails once it is down
        # now validate the mid-run abort path with a server that dies later
        server2 = stub_llm()
        spec2 = BackendSpec(provider="local_server", endpoint=server2.endpoint,
                            model_id="flaky2", timeout_s=2.0)

        class DyingOptions(HarnessOptions):
            pass

        opts = DyingOptions(abort_after=2, availability_timeout_s=5.0)
        original_route = None
        # simplest: close the server after the probe by monkeypatching route
        from shellpot import session as session_mod
        original = session_mod.CommandRouter.route
        calls = {"n": 0}

        def dying_route(self, state, line):
            calls["n"] += 1
            if calls["n"] == 2:
                server2.close()
            return original(self, state, line)

        session_mod.CommandRouter.route = dying_route
        try:
            run2 = run_model(spec2, cases, opts)
        finally:
            session_mod.CommandRouter.route = original
        assert run2.aborted is not None
        assert len(run2.results) < len(cases)


class TestSummarize:
    def make_results(self, tmp_path):
        cases = [CommandCase("pwd", "/root\n"), CommandCase("whoami", "root\n"),
                 CommandCase("q", "very different text entirely\n")]
        spec = replay_spec(tmp_path, {"pwd": "/root\n", "whoami": "root\n", "q": "zz\n"},
                           default_latency=10)
        return run_model(spec, cases, HarnessOptions()).results

    def test_means_match_independent_recomputation(self, tmp_path):
        results = self.make_results(tmp_path)
        summary = summarize(results)
        assert summary.n_cases == len(results)
        assert summary.mean_latency_ms == pytest.approx(
            sum(r.latency_ms for r in results) / len(results), abs=1e-9)
        assert summary.mean_cosine_tfidf == pytest.approx(
            sum(r.report.cosine_tfidf for r in results) / len(results), abs=1e-9)
        assert summary.success_rate == pytest.approx(
            sum(r.report.success for r in results) / len(results), abs=1e-9)
        assert summary.hallucination_rate == pytest.approx(
            sum(r.report.hallucination for r in results) / len(results), abs=1e-9)

    def test_empty_results_error(self):
        with pytest.raises(EmptyResults):
            summarize([])

    def test_mixed_models_rejected(self, tmp_path):
        results = self.make_results(tmp_path)
        results[0].model_id = "other"
        with pytest.raises(ValueError):
            summarize(results)


class TestWriteOutputs:
    def run_two_models(self, tmp_path, out):
        cases = [CommandCase("pwd", "/root\n"), CommandCase("whoami", "root\n"),
                 CommandCase("nope", "x\n")]
        spec_a = replay_spec(tmp_path, {"pwd": "/root\n"}, model_id="model-a")
        dead = BackendSpec(provider="local_server",
                           endpoint="http://127.0.0.1:9/api/generate",
                           model_id="dead-model", timeout_s=1.0)
        opts = HarnessOptions(deterministic=True, availability_timeout_s=1.0)
        return evaluate_models([spec_a, dead], cases, opts, out)

    def test_layout_and_counts(self, tmp_path):
        out = tmp_path / "out"
        runs, manifest = self.run_two_models(tmp_path, out)
        assert (out / "combined_results.json").exists()
        assert (out / "model_comparison.csv").exists()
        assert (out / "metrics" / "model-a.json").exists()
        raw = sorted((out / "raw_outputs" / "model-a").glob("*.txt"))
        assert [p.name for p in raw] == ["000.txt", "001.txt", "002.txt"]
        assert not manifest["failed"]

    def test_skipped_model_recorded(self, tmp_path):
        out = tmp_path / "out"
        runs, _ = self.run_two_models(tmp_path, out)
        combined = json.loads((out / "combined_results.json").read_text())
        assert combined["skipped"] == [
            {"model": "dead-model", "reason": "backend unavailable (availability probe failed)"}
        ]
        assert "model-a" in combined["models"]

    def test_csv_columns_and_rows(self, tmp_path):
        out = tmp_path / "out"
        self.run_two_models(tmp_path, out)
        lines = (out / "model_comparison.csv").read_text().splitlines()
        assert lines[0] == ",".join(CSV_COLUMNS)
        assert len(lines) == 2  # one attempted model with results
        assert lines[1].startswith("model-a,")

    def test_reruns_byte_identical(self, tmp_path, monkeypatch):
        monkeypatch.setenv("SOURCE_DATE_EPOCH", "1700000000")
        out1, out2 = tmp_path / "o1", tmp_path / "o2"
        self.run_two_models(tmp_path, out1)
        self.run_two_models(tmp_path, out2)
        for name in ("combined_results.json", "model_comparison.csv"):
            assert (out1 / name).read_bytes() == (out2 / name).read_bytes()

    def test_unwritable_out_dir_reports_failures(self, tmp_path):
        out = tmp_path / "blocked"
        out.write_text("a file, not a directory")
        cases = [CommandCase("pwd", "/root\n")]
        spec = replay_spec(tmp_path, {"pwd": "/root\n"})
        runs = [run_model(spec, cases, HarnessOptions(deterministic=True))]
        manifest = write_outputs(runs, out)
        assert manifest["failed"]

    def test_raw_outputs_verbatim(self, tmp_path):
        out = tmp_path / "out"
        cases = [CommandCase("pwd", "/root\n")]
        spec = replay_spec(tmp_path, {"pwd": "VERBATIM\nBYTES\n"}, model_id="m-x")
        evaluate_models([spec], cases, HarnessOptions(deterministic=True), out)
        assert (out / "raw_outputs" / "m-x" / "000.txt").read_text() == "VERBATIM\nBYTES\n"


class TestCli:
    def test_eval_exit_codes(self, tmp_path, capsys):
        from shellpot.cli import main
        replay = tmp_path / "replay.json"
        replay.write_text(json.dumps({"version": 1, "responses": {"pwd": "/root\n"}}))
        corpus = write_corpus(tmp_path, [["pwd", "/root\n"]])
        # full success
        code = main(["eval", "--commands", str(corpus), "--models", "m1",
                     "--provider", "replay", "--replay-file", str(replay),
                     "--out", str(tmp_path / "ok"), "--deterministic"])
        assert code == 0
        # partial: one model unavailable
        code = main(["eval", "--commands", str(corpus), "--models", "m1",
                     "--provider", "local_server",
                     "--endpoint", "http://127.0.0.1:9/api/generate",
                     "--timeout-s", "1", "--availability-timeout", "1",
                     "--out", str(tmp_path / "partial")])
        assert code == 2
        # fatal: bad corpus
        bad = tmp_path / "bad.csv"
        bad.write_text("not,the,right,header\n")
        code = main(["eval", "--commands", str(bad), "--models", "m1",
                     "--provider", "replay", "--replay-file", str(replay),
                     "--out", str(tmp_path / "fatal")])
        assert code == 1

    def test_eval_with_cache_scores_deployed_system(self, tmp_path):
        # with full routing, builtin/cache answers should match the starter
        # corpus ground truth far better than an empty replay model alone
        from shellpot.cli import main
        from shellpot.vfs import DATA_DIR
        replay = tmp_path / "replay.json"
        replay.write_text(json.dumps({"version": 1, "responses": {}}))
        out = tmp_path / "wc-out"
        code = main(["eval", "--commands", str(DATA_DIR / "starter_commands.csv"),
                     "--models", "deployed", "--provider", "replay",
                     "--replay-file", str(replay), "--out", str(out),
                     "--with-cache", "--deterministic"])
        assert code == 0
        doc = json.loads((out / "metrics" / "deployed.json").read_text())
        tiers = {c["tier"] for c in doc["cases"]}
        assert {"cache", "builtin", "llm"} <= tiers
        assert doc["summary"]["mean_exact"] > 0.4
        assert doc["summary"]["success_rate"] > 0.6

    def test_keygen_and_init_config(self, tmp_path):
        from shellpot.cli import main
        key = tmp_path / "hk"
        assert main(["keygen", "--out", str(key)]) == 0
        assert key.exists() and (tmp_path / "hk.pub").exists()
        assert main(["keygen", "--out", str(key)]) == 1  # no overwrite
        cfg = tmp_path / "c.ini"
        assert main(["init-config", "--out", str(cfg)]) == 0
        assert cfg.exists()
