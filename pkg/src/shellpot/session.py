"""Per-session command handling: route lines through cache -> builtins ->
LLM, sanitize model output, track state, and log every event.

CommandRouter is the single routing implementation; the SSH daemon drives
it per connection and the evaluation harness drives it directly, so a
command scored offline gets exactly the response a live attacker would see.
"""

from __future__ import annotations

import logging
import time
import uuid as uuidlib
from dataclasses import dataclass, field
from datetime import datetime, timezone

from . import backend as llm
from . import builtins, cmdparse, sanitize, vfs
from .cache import DictionaryCache
from .config import HoneypotConfig
from .logstore import EventRecord, LogStore
from .vfs import VfsState

logger = logging.getLogger(__name__)

TIER_CACHE = "cache"
TIER_BUILTIN = "builtin"
TIER_LLM = "llm"
TIER_LLM_ERROR = "llm_error_fallback"

FALLBACK_EXIT_CODE = 127


@dataclass
class RouteOutcome:
    tier: str
    output: str
    latency_ms: int
    hallucination_flagged: bool = False
    exit_code: int = 0
    terminate: bool = False
    error_kind: str | None = None  # "timeout" | "transport" | "api" | "budget"


def sanitize_output(command: str, raw: str) -> tuple[str, bool]:
    """Strip fences/blank padding and flag illusion-breaking replies.

    When flagged, the cleaned text is replaced by a realistic
    "command not found" error for the command.
    """
    return sanitize.evaluate(command, raw)


class CommandRouter:
    """Routes one line at a time against a session's VfsState."""

    def __init__(
        self,
        cache: DictionaryCache,
        backend_spec: llm.BackendSpec | None,
        prompt_template: str | None = None,
        digest_max_len: int = 1000,
        prompt_budget: int = llm.DEFAULT_PROMPT_BUDGET,
        use_cache: bool = True,
        use_builtins: bool = True,
    ):
        self.cache = cache
        self.backend_spec = backend_spec
        self.prompt_template = (
            prompt_template if prompt_template is not None else llm.load_default_template()
        )
        self.digest_max_len = digest_max_len
        self.prompt_budget = prompt_budget
        self.use_cache = use_cache
        self.use_builtins = use_builtins

    def route(self, state: VfsState, line: str) -> RouteOutcome:
        start = time.monotonic()

        def ms() -> int:
            return int((time.monotonic() - start) * 1000)

        if self.use_cache:
            hit = self.cache.lookup(state, line)
            if hit is not None:
                state.last_exit_code = 0
                return RouteOutcome(TIER_CACHE, hit, ms())

        if self.use_builtins and not cmdparse.has_shell_syntax(line):
            try:
                parsed = cmdparse.parse_command_line(line)
            except cmdparse.UnterminatedQuote:
                state.last_exit_code = 2
                output = (
                    "bash: unexpected EOF while looking for matching `''\n"
                    "bash: syntax error: unexpected end of file\n"
                )
                return RouteOutcome(TIER_BUILTIN, output, ms(), exit_code=2)
            except cmdparse.UnsupportedSyntax:
                parsed = None
            if parsed is not None:
                result = builtins.execute_builtin(state, parsed)
                if result is not None:
                    return RouteOutcome(
                        TIER_BUILTIN,
                        result.output,
                        ms(),
                        exit_code=result.exit_code,
                        terminate=result.terminate,
                    )

        return self._route_llm(state, line)

    def _route_llm(self, state: VfsState, line: str) -> RouteOutcome:
        program = sanitize.command_program(line)
        fallback = sanitize.fallback_error(line) + "\n"
        if self.backend_spec is None:
            state.last_exit_code = FALLBACK_EXIT_CODE
            return RouteOutcome(TIER_LLM_ERROR, fallback, 0, exit_code=FALLBACK_EXIT_CODE)
        try:
            digest = vfs.state_summary(state, self.digest_max_len)
            prompt = llm.build_prompt(digest, line, self.prompt_template, self.prompt_budget)
            raw, latency_ms = llm.generate(self.backend_spec, prompt)
        except llm.BackendError as exc:
            logger.warning("LLM tier failed for %r: %s", program, exc)
            state.last_exit_code = FALLBACK_EXIT_CODE
            kind = (
                "timeout" if isinstance(exc, llm.Timeout)
                else "transport" if isinstance(exc, llm.TransportError)
                else "api"
            )
            return RouteOutcome(
                TIER_LLM_ERROR, fallback, exc.elapsed_ms, exit_code=FALLBACK_EXIT_CODE,
                error_kind=kind,
            )
        except llm.BudgetExceeded as exc:
            logger.warning("prompt budget exceeded for %r: %s", program, exc)
            state.last_exit_code = FALLBACK_EXIT_CODE
            return RouteOutcome(TIER_LLM_ERROR, fallback, 0, exit_code=FALLBACK_EXIT_CODE,
                                error_kind="budget")

        clean, flagged = sanitize_output(line, raw)
        if clean and not clean.endswith("\n"):
            clean += "\n"
        exit_code = FALLBACK_EXIT_CODE if flagged else 0
        state.last_exit_code = exit_code
        return RouteOutcome(TIER_LLM, clean, latency_ms, hallucination_flagged=flagged,
                            exit_code=exit_code)


@dataclass
class Session:
    uuid: str
    peer: tuple[str, int]
    username: str
    started_at: datetime
    vfs: VfsState
    command_count: int = 0
    closed: bool = False
    tier_counts: dict = field(default_factory=dict)
    close_record: EventRecord | None = None


class SessionEngine:
    """Binds the router, the seed image, and the logstore for live sessions."""

    def __init__(self, cfg: HoneypotConfig, store: LogStore | None = None,
                 clock=time.time):
        self.cfg = cfg
        self.clock = clock
        self.cache = (
            DictionaryCache.from_file(cfg.cache_file) if cfg.cache_file
            else DictionaryCache.default()
        )
        self.seed_root = vfs.load_seed_image(cfg.seed_manifest or None, hostname=cfg.hostname)
        template = None
        if cfg.prompt_template_file:
            with open(cfg.prompt_template_file, encoding="utf-8") as fh:
                template = fh.read()
        self.router = CommandRouter(
            self.cache,
            cfg.backend,
            prompt_template=template,
            digest_max_len=cfg.digest_max_len,
            prompt_budget=cfg.prompt_budget,
        )
        self.store = store if store is not None else LogStore(
            cfg.log_dir, max_bytes=cfg.log_max_bytes, archives=cfg.log_archives
        )

    # -- lifecycle ------------------------------------------------------

    def new_connection_uuid(self) -> str:
        return str(uuidlib.uuid4())

    def log_auth(self, conn_uuid: str, peer: tuple[str, int], username: str,
                 password: str, success: bool) -> None:
        self.store.append(EventRecord.now(conn_uuid, "auth", peer, {
            "username": username,
            "password": password,
            "success": success,
        }))

    def open_session(self, conn_uuid: str, peer: tuple[str, int], username: str) -> Session:
        state = vfs.new_state(username, self.cfg.hostname, self.seed_root, clock=self.clock)
        session = Session(
            uuid=conn_uuid,
            peer=tuple(peer),
            username=username,
            started_at=datetime.now(timezone.utc),
            vfs=state,
        )
        self.store.append(EventRecord.now(session.uuid, "session_open", session.peer,
                                          {"username": username}))
        return session

    def handle_line(self, session: Session, line: str) -> RouteOutcome | None:
        """Route one input line; blank lines re-prompt without logging."""
        if session.closed:
            raise RuntimeError("session is closed")
        line = line.rstrip("\r\n")
        if not line.strip():
            return None
        session.command_count += 1
        session.vfs.history.append(line)
        self.store.append(EventRecord.now(session.uuid, "command", session.peer,
                                          {"line": line, "seq": session.command_count}))
        outcome = self.router.route(session.vfs, line)
        session.tier_counts[outcome.tier] = session.tier_counts.get(outcome.tier, 0) + 1
        self.store.append(EventRecord.now(session.uuid, "response", session.peer, {
            "seq": session.command_count,
            "tier": outcome.tier,
            "latency_ms": outcome.latency_ms,
            "flagged": outcome.hallucination_flagged,
            "exit_code": outcome.exit_code,
            "output": outcome.output,
        }))
        return outcome

    def render_prompt(self, session: Session) -> str:
        state = session.vfs
        home = vfs.home_dir(state.user)
        cwd = state.cwd
        if cwd == home:
            cwd = "~"
        elif cwd.startswith(home + "/"):
            cwd = "~" + cwd[len(home):]
        return (
            self.cfg.shell_prompt
            .replace("{user}", state.user)
            .replace("{host}", state.hostname)
            .replace("{cwd}", cwd)
        )

    def close_session(self, session: Session, reason: str) -> EventRecord:
        """Flush the final summary record; idempotent."""
        if session.close_record is not None:
            return session.close_record
        session.closed = True
        duration_ms = int((datetime.now(timezone.utc) - session.started_at).total_seconds() * 1000)
        record = EventRecord.now(session.uuid, "session_close", session.peer, {
            "reason": reason,
            "command_count": session.command_count,
            "duration_ms": duration_ms,
        })
        self.store.append(record)
        session.close_record = record
        return record
