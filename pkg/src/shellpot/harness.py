"""Evaluation harness: replay a command corpus against LLM backends through
the honeypot's routing path and score every response.

The default scoring path is LLM-only so the numbers measure the model;
--with-cache routes through the full cache -> builtin -> LLM stack instead
and measures the deployed system. Output layout under --out:

    raw_outputs/<model>/<case-index>.txt
    metrics/<model>.json
    combined_results.json
    model_comparison.csv

JSON is deterministic (sorted keys, floats rounded to 6 places). With a
replay backend and deterministic mode the whole pipeline is byte-stable.
"""

from __future__ import annotations

import csv
import json
import logging
import os
import re
import time
from dataclasses import dataclass, field, replace
from datetime import datetime, timezone
from pathlib import Path

import psutil

from . import backend as llm
from . import metrics, vfs
from .cache import DictionaryCache
from .metrics import MetricReport
from .session import CommandRouter

logger = logging.getLogger(__name__)

MEBI = float(1 << 20)


class CsvError(Exception):
    def __init__(self, message: str, row: int):
        super().__init__(f"row {row}: {message}")
        self.row = row


class EmptyCorpus(Exception):
    pass


class EmptyResults(Exception):
    pass


@dataclass(frozen=True)
class CommandCase:
    command: str
    expected_output: str


@dataclass
class RunResult:
    model_id: str
    case: CommandCase
    actual: str
    latency_ms: int
    mem_delta_mb: float
    report: MetricReport
    tier: str
    timed_out: bool
    server_mem_delta_mb: float | None = None


@dataclass
class ModelSummary:
    model_id: str
    n_cases: int
    mean_latency_ms: float
    mean_mem_delta_mb: float
    mean_exact: float
    mean_token_accuracy: float
    mean_cosine_tfidf: float
    mean_jaro_winkler: float
    mean_levenshtein_ratio: float
    mean_sequence_ratio: float
    mean_bleu4: float
    success_rate: float
    hallucination_rate: float
    metadata: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        doc = {k: v for k, v in self.__dict__.items()}
        return doc


@dataclass
class HarnessOptions:
    with_cache: bool = False
    timeout_s: float | None = None
    seed_manifest: str = ""
    cache_file: str = ""
    deterministic: bool = False
    abort_after: int = 10
    availability_timeout_s: float = 30.0
    server_pid: int | None = None
    hostname: str = "svr04"
    username: str = "root"
    prompt_template: str | None = None


@dataclass
class ModelRun:
    model_id: str
    results: list[RunResult] = field(default_factory=list)
    skipped: str | None = None
    aborted: str | None = None


def load_cases(path) -> list[CommandCase]:
    """Parse the RFC-4180 corpus with a command,expected_output header."""
    path = Path(path)
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise CsvError("missing header", 1) from None
        if [h.strip().lower() for h in header[:2]] != ["command", "expected_output"]:
            raise CsvError("header must be command,expected_output", 1)
        cases = []
        for row_number, row in enumerate(reader, 2):
            if not row:
                continue
            if len(row) != 2:
                raise CsvError(f"expected 2 fields, got {len(row)}", row_number)
            command, expected = row[0], row[1]
            if not command:
                raise CsvError("command must be non-empty", row_number)
            cases.append(CommandCase(command=command, expected_output=expected))
    if not cases:
        raise EmptyCorpus(f"{path} contains no cases")
    return cases


def measure_memory_delta(before: int, after: int) -> float:
    """(after - before) in MiB; negative deltas are preserved."""
    return (after - before) / MEBI


def _rss(process: psutil.Process) -> int:
    try:
        return process.memory_info().rss
    except psutil.Error:
        return 0


def run_model(spec: llm.BackendSpec, cases: list[CommandCase],
              opts: HarnessOptions | None = None) -> ModelRun:
    """Sequentially evaluate one backend over the corpus."""
    opts = opts or HarnessOptions()
    run = ModelRun(model_id=spec.model_id)
    if opts.timeout_s is not None:
        spec = replace(spec, timeout_s=opts.timeout_s)

    if not llm.check_available(spec, timeout_s=opts.availability_timeout_s):
        run.skipped = "backend unavailable (availability probe failed)"
        logger.warning("skipping %s: %s", spec.model_id, run.skipped)
        return run

    seed_root = vfs.load_seed_image(opts.seed_manifest or None, hostname=opts.hostname)
    cache = (DictionaryCache.from_file(opts.cache_file) if opts.cache_file
             else DictionaryCache.default())
    router = CommandRouter(
        cache,
        spec,
        prompt_template=opts.prompt_template,
        use_cache=opts.with_cache,
        use_builtins=opts.with_cache,
    )
    state = vfs.new_state(opts.username, opts.hostname, seed_root)

    process = psutil.Process()
    server_process = None
    if opts.server_pid is not None:
        try:
            server_process = psutil.Process(opts.server_pid)
        except psutil.Error as exc:
            logger.warning("cannot observe server pid %d: %s", opts.server_pid, exc)

    consecutive_transport_errors = 0
    for case in cases:
        mem_before = 0 if opts.deterministic else _rss(process)
        server_before = _rss(server_process) if server_process else None
        outcome = router.route(state, case.command)
        mem_after = 0 if opts.deterministic else _rss(process)
        server_after = _rss(server_process) if server_process else None

        timed_out = outcome.error_kind == "timeout"
        if timed_out:
            actual = ""
            latency_ms = int(spec.timeout_s * 1000)
            logger.warning("case %r timed out; resetting backend", case.command)
            llm.reset_backend(spec)
        else:
            actual = outcome.output
            latency_ms = outcome.latency_ms

        if outcome.error_kind == "transport":
            consecutive_transport_errors += 1
        else:
            consecutive_transport_errors = 0

        report = metrics.score_pair(
            case.command,
            case.expected_output,
            actual,
            hallucination=outcome.hallucination_flagged,
        )
        run.results.append(RunResult(
            model_id=spec.model_id,
            case=case,
            actual=actual,
            latency_ms=latency_ms,
            mem_delta_mb=0.0 if opts.deterministic else measure_memory_delta(mem_before, mem_after),
            report=report,
            tier=outcome.tier,
            timed_out=timed_out,
            server_mem_delta_mb=(
                measure_memory_delta(server_before, server_after)
                if server_before is not None and server_after is not None else None
            ),
        ))
        if consecutive_transport_errors >= opts.abort_after:
            run.aborted = (
                f"aborted after {consecutive_transport_errors} consecutive transport errors"
            )
            logger.error("%s: %s", spec.model_id, run.aborted)
            break
    return run


def _mean(values) -> float:
    values = list(values)
    return sum(values) / len(values)


def summarize(results: list[RunResult], metadata: dict | None = None) -> ModelSummary:
    """Arithmetic means over exactly the given results."""
    if not results:
        raise EmptyResults("no results to summarize")
    model_ids = {r.model_id for r in results}
    if len(model_ids) != 1:
        raise ValueError(f"results span multiple models: {sorted(model_ids)}")
    return ModelSummary(
        model_id=results[0].model_id,
        n_cases=len(results),
        mean_latency_ms=_mean(r.latency_ms for r in results),
        mean_mem_delta_mb=_mean(r.mem_delta_mb for r in results),
        mean_exact=_mean(float(r.report.exact) for r in results),
        mean_token_accuracy=_mean(r.report.token_accuracy for r in results),
        mean_cosine_tfidf=_mean(r.report.cosine_tfidf for r in results),
        mean_jaro_winkler=_mean(r.report.jaro_winkler for r in results),
        mean_levenshtein_ratio=_mean(r.report.levenshtein_ratio for r in results),
        mean_sequence_ratio=_mean(r.report.sequence_ratio for r in results),
        mean_bleu4=_mean(r.report.bleu4 for r in results),
        success_rate=_mean(float(r.report.success) for r in results),
        hallucination_rate=_mean(float(r.report.hallucination) for r in results),
        metadata=dict(metadata or {}),
    )


def _round_floats(value):
    if isinstance(value, float):
        return round(value, 6)
    if isinstance(value, dict):
        return {k: _round_floats(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_round_floats(v) for v in value]
    return value


def _dump_json(doc) -> str:
    return json.dumps(_round_floats(doc), sort_keys=True, indent=2) + "\n"


def model_slug(model_id: str) -> str:
    return re.sub(r"[^A-Za-z0-9._-]+", "_", model_id) or "model"


def _timestamp(deterministic: bool) -> str:
    if deterministic:
        epoch = int(os.environ.get("SOURCE_DATE_EPOCH", "0"))
        moment = datetime.fromtimestamp(epoch, timezone.utc)
    else:
        moment = datetime.now(timezone.utc)
    return moment.strftime("%Y-%m-%dT%H:%M:%SZ")


def backend_metadata(spec: llm.BackendSpec, opts: HarnessOptions) -> dict:
    return {
        "provider": spec.provider,
        "endpoint": spec.endpoint,
        "model": spec.model_id,
        "timeout_s": spec.timeout_s,
        "max_output_chars": spec.max_output_chars,
        "temperature": spec.temperature,
        "max_tokens": spec.max_tokens,
        "mode": "with_cache" if opts.with_cache else "llm_only",
        "deterministic": opts.deterministic,
        "generated_at": _timestamp(opts.deterministic),
    }


def _case_dict(index: int, result: RunResult) -> dict:
    doc = {
        "index": index,
        "command": result.case.command,
        "tier": result.tier,
        "timed_out": result.timed_out,
        "latency_ms": result.latency_ms,
        "mem_delta_mb": result.mem_delta_mb,
        "report": result.report.to_dict(),
    }
    if result.server_mem_delta_mb is not None:
        doc["server_mem_delta_mb"] = result.server_mem_delta_mb
    return doc


def _model_doc(run: ModelRun, summary: ModelSummary | None) -> dict:
    doc: dict = {}
    if summary is not None:
        doc["summary"] = summary.to_dict()
    doc["cases"] = [_case_dict(i, r) for i, r in enumerate(run.results)]
    if run.aborted:
        doc["aborted"] = run.aborted
    return doc


CSV_COLUMNS = (
    "model", "latency_ms", "mem_delta_mb", "bleu",
    "halluc_pct", "cosine", "jaro_winkler",
)


def write_outputs(runs: list[ModelRun], out_dir,
                  opts_by_model: dict[str, tuple[llm.BackendSpec, HarnessOptions]] | None = None
                  ) -> dict:
    """Write the full artifact layout; returns a written/failed manifest."""
    out_dir = Path(out_dir)
    manifest = {"written": [], "failed": []}

    def emit(path: Path, data: str) -> None:
        try:
            path.parent.mkdir(parents=True, exist_ok=True)
            path.write_text(data, encoding="utf-8")
            manifest["written"].append(str(path))
        except OSError as exc:
            logger.error("cannot write %s: %s", path, exc)
            manifest["failed"].append({"path": str(path), "error": str(exc)})

    combined: dict = {"models": {}, "skipped": []}
    csv_rows = []
    for run in runs:
        slug = model_slug(run.model_id)
        if run.skipped:
            combined["skipped"].append({"model": run.model_id, "reason": run.skipped})
            continue
        metadata = {}
        if opts_by_model and run.model_id in opts_by_model:
            spec, opts = opts_by_model[run.model_id]
            metadata = backend_metadata(spec, opts)
        summary = summarize(run.results, metadata) if run.results else None
        for index, result in enumerate(run.results):
            emit(out_dir / "raw_outputs" / slug / f"{index:03d}.txt", result.actual)
        emit(out_dir / "metrics" / f"{slug}.json", _dump_json(_model_doc(run, summary)))
        combined["models"][run.model_id] = _model_doc(run, summary)
        if summary is not None:
            csv_rows.append((
                run.model_id,
                f"{summary.mean_latency_ms:.6f}",
                f"{summary.mean_mem_delta_mb:.6f}",
                f"{summary.mean_bleu4:.6f}",
                f"{summary.hallucination_rate * 100:.6f}",
                f"{summary.mean_cosine_tfidf:.6f}",
                f"{summary.mean_jaro_winkler:.6f}",
            ))

    emit(out_dir / "combined_results.json", _dump_json(combined))
    csv_text = ",".join(CSV_COLUMNS) + "\n"
    for row in csv_rows:
        csv_text += ",".join(row) + "\n"
    emit(out_dir / "model_comparison.csv", csv_text)
    return manifest


def evaluate_models(specs: list[llm.BackendSpec], cases: list[CommandCase],
                    opts: HarnessOptions, out_dir) -> tuple[list[ModelRun], dict]:
    """Run every model in series and write the artifact tree."""
    runs = []
    opts_by_model = {}
    for spec in specs:
        opts_by_model[spec.model_id] = (spec, opts)
        runs.append(run_model(spec, cases, opts))
    manifest = write_outputs(runs, out_dir, opts_by_model)
    return runs, manifest
