"""INI configuration for the honeypot daemon and harness.

Sections are [ssh], [auth], [llm], [shell], [logging]; keys are
case-insensitive, values verbatim, and # or ; start full-line comments.
Relative paths resolve against the config file's directory. The loaded
config is immutable and shared read-only across sessions.
"""

from __future__ import annotations

import configparser
from dataclasses import dataclass
from pathlib import Path

from .backend import BackendSpec

DEFAULT_PORT = 8022
DEFAULT_HOSTNAME = "svr04"
DEFAULT_BANNER = "SSH-2.0-OpenSSH_8.2p1 Ubuntu-4ubuntu0.5"
DEFAULT_PROMPT = "{user}@{host}:{cwd}$ "
DEFAULT_TIMEOUT_S = 30.0
DEFAULT_USERS = "root:toor"
DEFAULT_MOTD = (
    "Welcome to Ubuntu 20.04.6 LTS (GNU/Linux 5.15.0-78-generic x86_64)\n"
    "\n"
    " * Documentation:  https://help.ubuntu.com\n"
    " * Management:     https://landscape.canonical.com\n"
    " * Support:        https://ubuntu.com/advantage\n"
)


class ConfigError(Exception):
    pass


class MissingFile(ConfigError):
    pass


class ParseError(ConfigError):
    def __init__(self, message: str, line: int = 0):
        super().__init__(message)
        self.line = line


class ValidationError(ConfigError):
    """Names the violated invariant in .invariant."""

    def __init__(self, invariant: str, message: str = ""):
        super().__init__(message or f"invalid configuration: {invariant}")
        self.invariant = invariant


@dataclass(frozen=True)
class HoneypotConfig:
    """All runtime settings, validated and with defaults applied."""

    port: int
    host_key_path: str
    credentials: tuple[tuple[str, str], ...]
    backend: BackendSpec
    banner: str
    shell_prompt: str
    hostname: str
    log_dir: str
    motd: str = DEFAULT_MOTD
    cache_file: str = ""
    seed_manifest: str = ""
    prompt_template_file: str = ""
    prompt_budget: int = 8000
    digest_max_len: int = 1000
    ip_connection_cap: int = 10
    log_max_bytes: int = 1_000_000
    log_archives: int = 10


def _unquote(value: str) -> str:
    # Surrounding double quotes protect significant leading/trailing
    # whitespace (configparser strips bare whitespace from values).
    if len(value) >= 2 and value[0] == '"' and value[-1] == '"':
        return value[1:-1]
    return value


def _parse_credentials(raw: str) -> tuple[tuple[str, str], ...]:
    pairs = []
    for item in raw.split(","):
        item = item.strip()
        if not item:
            continue
        if ":" not in item:
            raise ValidationError("credentials", f"credential entry {item!r} is not user:password")
        user, password = item.split(":", 1)
        pairs.append((user, password))
    return tuple(pairs)


def _resolve(base: Path, value: str) -> str:
    if not value:
        return ""
    path = Path(value)
    return str(path if path.is_absolute() else base / path)


def load_config(path) -> HoneypotConfig:
    """Parse, validate, and default-fill the INI file at path."""
    path = Path(path)
    if not path.is_file():
        raise MissingFile(f"config file not found: {path}")
    base = path.resolve().parent

    parser = configparser.ConfigParser(interpolation=None)
    try:
        with open(path, encoding="utf-8") as handle:
            parser.read_file(handle, source=str(path))
    except configparser.ParsingError as exc:
        line = exc.errors[0][0] if exc.errors else 0
        raise ParseError(str(exc), line=line) from exc
    except configparser.MissingSectionHeaderError as exc:
        raise ParseError(str(exc), line=exc.lineno) from exc
    except configparser.Error as exc:
        raise ParseError(str(exc)) from exc

    def get(section: str, key: str, default: str) -> str:
        return _unquote(parser.get(section, key, fallback=default))

    try:
        port = parser.getint("ssh", "port", fallback=DEFAULT_PORT)
    except ValueError as exc:
        raise ValidationError("port", f"port is not an integer: {exc}") from exc
    if not 1 <= port <= 65535:
        raise ValidationError("port", f"port {port} outside [1, 65535]")

    host_key_path = _resolve(base, get("ssh", "host_key", "ssh_host_key"))
    if not host_key_path:
        raise ValidationError("host_key_path", "host_key must be non-empty")

    credentials = _parse_credentials(get("auth", "users", DEFAULT_USERS))
    if not credentials:
        raise ValidationError("credentials", "at least one user:password pair is required")

    def get_float(section: str, key: str, default: float, invariant: str) -> float:
        try:
            return parser.getfloat(section, key, fallback=default)
        except ValueError as exc:
            raise ValidationError(invariant, f"{key} is not a number: {exc}") from exc

    def get_int(section: str, key: str, default: int, invariant: str) -> int:
        try:
            return parser.getint(section, key, fallback=default)
        except ValueError as exc:
            raise ValidationError(invariant, f"{key} is not an integer: {exc}") from exc

    timeout_s = get_float("llm", "timeout_s", DEFAULT_TIMEOUT_S, "backend.timeout_s")
    if timeout_s <= 0:
        raise ValidationError("backend.timeout_s", "timeout_s must be > 0")
    max_output_chars = get_int("llm", "max_output_chars", 8192, "backend.max_output_chars")
    if max_output_chars <= 0:
        raise ValidationError("backend.max_output_chars", "max_output_chars must be > 0")

    temperature_raw = get("llm", "temperature", "")
    max_tokens_raw = get("llm", "max_tokens", "")
    try:
        backend = BackendSpec(
            provider=get("llm", "provider", "local_server"),
            endpoint=get("llm", "endpoint", "http://127.0.0.1:11434/api/generate"),
            model_id=get("llm", "model", "qwen2.5:1.5b"),
            api_key_env=get("llm", "api_key_env", "LLM_API_KEY"),
            timeout_s=timeout_s,
            max_output_chars=max_output_chars,
            temperature=float(temperature_raw) if temperature_raw else None,
            max_tokens=int(max_tokens_raw) if max_tokens_raw else None,
            reset_cmd=get("llm", "reset_cmd", ""),
            replay_file=_resolve(base, get("llm", "replay_file", "")),
            concurrency=get_int("llm", "concurrency", 4, "backend.concurrency"),
        )
    except ValueError as exc:
        raise ValidationError("backend", str(exc)) from exc

    return HoneypotConfig(
        port=port,
        host_key_path=host_key_path,
        credentials=credentials,
        backend=backend,
        banner=get("ssh", "banner", DEFAULT_BANNER),
        shell_prompt=get("shell", "prompt", DEFAULT_PROMPT),
        hostname=get("shell", "hostname", DEFAULT_HOSTNAME),
        log_dir=_resolve(base, get("logging", "log_dir", "logs")),
        motd=get("shell", "motd", DEFAULT_MOTD).replace("\\n", "\n"),
        cache_file=_resolve(base, get("shell", "cache_file", "")),
        seed_manifest=_resolve(base, get("shell", "seed_manifest", "")),
        prompt_template_file=_resolve(base, get("llm", "prompt_template", "")),
        prompt_budget=get_int("llm", "prompt_budget", 8000, "prompt_budget"),
        digest_max_len=get_int("shell", "digest_max_len", 1000, "digest_max_len"),
        ip_connection_cap=get_int("ssh", "ip_connection_cap", 10, "ip_connection_cap"),
        log_max_bytes=get_int("logging", "max_bytes", 1_000_000, "log_max_bytes"),
        log_archives=get_int("logging", "archives", 10, "log_archives"),
    )


def validate_credentials(cfg: HoneypotConfig, user: str, password: str) -> bool:
    """Byte-exact, case-sensitive membership in the configured pairs."""
    return (user, password) in cfg.credentials


def dump_config(cfg: HoneypotConfig) -> str:
    """Serialize a config back to INI text; load_config(dump) round-trips."""
    users = ",".join(f"{u}:{p}" for u, p in cfg.credentials)
    b = cfg.backend
    lines = [
        "[ssh]",
        f"port = {cfg.port}",
        f"host_key = {cfg.host_key_path}",
        f'banner = "{cfg.banner}"',
        f"ip_connection_cap = {cfg.ip_connection_cap}",
        "",
        "[auth]",
        f"users = {users}",
        "",
        "[llm]",
        f"provider = {b.provider}",
        f"endpoint = {b.endpoint}",
        f"model = {b.model_id}",
        f"api_key_env = {b.api_key_env}",
        f"timeout_s = {b.timeout_s}",
        f"max_output_chars = {b.max_output_chars}",
        f"concurrency = {b.concurrency}",
        f"prompt_budget = {cfg.prompt_budget}",
    ]
    if b.temperature is not None:
        lines.append(f"temperature = {b.temperature}")
    if b.max_tokens is not None:
        lines.append(f"max_tokens = {b.max_tokens}")
    if b.reset_cmd:
        lines.append(f"reset_cmd = {b.reset_cmd}")
    if b.replay_file:
        lines.append(f"replay_file = {b.replay_file}")
    if cfg.prompt_template_file:
        lines.append(f"prompt_template = {cfg.prompt_template_file}")
    escaped_motd = cfg.motd.replace("\n", "\\n")
    lines += [
        "",
        "[shell]",
        f"hostname = {cfg.hostname}",
        f'prompt = "{cfg.shell_prompt}"',
        f'motd = "{escaped_motd}"',
        f"digest_max_len = {cfg.digest_max_len}",
    ]
    if cfg.cache_file:
        lines.append(f"cache_file = {cfg.cache_file}")
    if cfg.seed_manifest:
        lines.append(f"seed_manifest = {cfg.seed_manifest}")
    lines += [
        "",
        "[logging]",
        f"log_dir = {cfg.log_dir}",
        f"max_bytes = {cfg.log_max_bytes}",
        f"archives = {cfg.log_archives}",
        "",
    ]
    return "\n".join(lines)
