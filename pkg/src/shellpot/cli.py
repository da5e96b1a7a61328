"""Command-line entry points: run the daemon, evaluate backends, manage keys.

    shellpot serve --config config.ini
    shellpot eval --commands corpus.csv --models qwen2.5:1.5b --out results/
    shellpot keygen --out ssh_host_key
    shellpot init-config --out config.ini

Exit codes for eval: 0 full success, 2 partial (models skipped or aborted),
1 fatal (bad corpus, unwritable output, no usable models).
"""

from __future__ import annotations

import argparse
import asyncio
import logging
import sys
from pathlib import Path

from . import backend as llm
from . import sshwire
from .config import ConfigError, load_config
from .harness import (
    CsvError,
    EmptyCorpus,
    HarnessOptions,
    evaluate_models,
    load_cases,
)
from .vfs import DATA_DIR

logger = logging.getLogger(__name__)

SAMPLE_CONFIG = """\
# shellpot honeypot configuration
[ssh]
port = 8022
host_key = ssh_host_key
banner = "SSH-2.0-OpenSSH_8.2p1 Ubuntu-4ubuntu0.5"
ip_connection_cap = 10

[auth]
# comma-separated user:password pairs accepted at login
users = root:toor,admin:admin123

[llm]
# provider: local_server | cloud_api | replay
provider = local_server
endpoint = http://127.0.0.1:11434/api/generate
model = qwen2.5:1.5b
timeout_s = 30
max_output_chars = 8192
# api_key_env = LLM_API_KEY
# reset_cmd = systemctl restart ollama
# temperature = 0.2
# max_tokens = 512

[shell]
hostname = svr04
prompt = "{user}@{host}:{cwd}$ "
digest_max_len = 1000

[logging]
log_dir = logs
max_bytes = 1000000
archives = 10
"""


def _add_serve(subparsers) -> None:
    p = subparsers.add_parser("serve", help="run the honeypot daemon")
    p.add_argument("--config", required=True, help="path to config.ini")
    p.add_argument("--host", default="0.0.0.0")
    p.add_argument("--port", type=int, default=None, help="override the configured port")
    p.set_defaults(func=cmd_serve)


def _add_eval(subparsers) -> None:
    p = subparsers.add_parser("eval", help="score backends against a command corpus")
    p.add_argument("--commands", default=str(DATA_DIR / "starter_commands.csv"),
                   help="corpus CSV (command,expected_output)")
    p.add_argument("--models", required=True,
                   help="comma-separated model identifiers")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--with-cache", action="store_true",
                   help="route through cache and builtins instead of LLM-only")
    p.add_argument("--timeout-s", type=float, default=None)
    p.add_argument("--seed-image", default="", help="VFS seed manifest override")
    p.add_argument("--cache-file", default="", help="dictionary cache override")
    p.add_argument("--config", default=None,
                   help="config.ini supplying backend defaults")
    p.add_argument("--provider", choices=llm.PROVIDERS, default=None)
    p.add_argument("--endpoint", default=None)
    p.add_argument("--api-key-env", default=None)
    p.add_argument("--replay-file", default=None)
    p.add_argument("--temperature", type=float, default=None)
    p.add_argument("--max-tokens", type=int, default=None)
    p.add_argument("--abort-after", type=int, default=10,
                   help="abort a model after N consecutive transport errors")
    p.add_argument("--availability-timeout", type=float, default=30.0)
    p.add_argument("--server-pid", type=int, default=None,
                   help="also sample this process's RSS per case")
    p.add_argument("--deterministic", action="store_true",
                   help="byte-reproducible outputs: fixed timestamp, no memory sampling")
    p.set_defaults(func=cmd_eval)


def _add_keygen(subparsers) -> None:
    p = subparsers.add_parser("keygen", help="generate an ed25519 host key")
    p.add_argument("--out", default="ssh_host_key")
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_keygen)


def _add_init_config(subparsers) -> None:
    p = subparsers.add_parser("init-config", help="write a commented sample config")
    p.add_argument("--out", default="config.ini")
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_init_config)


def cmd_serve(args) -> int:
    from .gateway import BindError, HoneypotDaemon, HostKeyError

    try:
        cfg = load_config(args.config)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1

    async def run():
        daemon = HoneypotDaemon(cfg, host=args.host, port=args.port)
        await daemon.start()
        print(f"shellpot listening on {args.host}:{daemon.port}")
        try:
            await daemon.serve_forever()
        finally:
            await daemon.close()
            daemon.engine.store.close()

    try:
        asyncio.run(run())
    except (BindError, HostKeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except KeyboardInterrupt:
        print("shutting down")
    return 0


def _build_specs(args, cfg) -> list[llm.BackendSpec]:
    base = cfg.backend if cfg is not None else llm.BackendSpec(
        provider="local_server", endpoint="http://127.0.0.1:11434/api/generate"
    )
    provider = args.provider or base.provider
    endpoint = args.endpoint if args.endpoint is not None else base.endpoint
    specs = []
    for model_id in [m.strip() for m in args.models.split(",") if m.strip()]:
        specs.append(llm.BackendSpec(
            provider=provider,
            endpoint=endpoint,
            model_id=model_id,
            api_key_env=args.api_key_env or base.api_key_env,
            timeout_s=args.timeout_s or base.timeout_s,
            max_output_chars=base.max_output_chars,
            temperature=args.temperature if args.temperature is not None else base.temperature,
            max_tokens=args.max_tokens if args.max_tokens is not None else base.max_tokens,
            reset_cmd=base.reset_cmd,
            replay_file=args.replay_file if args.replay_file is not None else base.replay_file,
            concurrency=base.concurrency,
        ))
    return specs


def cmd_eval(args) -> int:
    cfg = None
    if args.config:
        try:
            cfg = load_config(args.config)
        except ConfigError as exc:
            print(f"error: {exc}", file=sys.stderr)
            return 1
    try:
        cases = load_cases(args.commands)
    except (CsvError, EmptyCorpus, OSError) as exc:
        print(f"error: cannot load corpus: {exc}", file=sys.stderr)
        return 1

    specs = _build_specs(args, cfg)
    if not specs:
        print("error: no models given", file=sys.stderr)
        return 1

    template = None
    if cfg is not None and cfg.prompt_template_file:
        template = Path(cfg.prompt_template_file).read_text(encoding="utf-8")

    opts = HarnessOptions(
        with_cache=args.with_cache,
        timeout_s=args.timeout_s,
        seed_manifest=args.seed_image,
        cache_file=args.cache_file or (cfg.cache_file if cfg else ""),
        deterministic=args.deterministic,
        abort_after=args.abort_after,
        availability_timeout_s=args.availability_timeout,
        server_pid=args.server_pid,
        hostname=cfg.hostname if cfg else "svr04",
        prompt_template=template,
    )

    runs, manifest = evaluate_models(specs, cases, opts, args.out)

    for run in runs:
        if run.skipped:
            print(f"{run.model_id}: SKIPPED ({run.skipped})")
        else:
            note = f" [{run.aborted}]" if run.aborted else ""
            print(f"{run.model_id}: {len(run.results)} cases{note}")
    print(f"wrote {len(manifest['written'])} files under {args.out}")

    if manifest["failed"]:
        for failure in manifest["failed"]:
            print(f"error: {failure['path']}: {failure['error']}", file=sys.stderr)
        return 1
    if all(run.skipped for run in runs):
        return 2
    if any(run.skipped or run.aborted for run in runs):
        return 2
    return 0


def cmd_keygen(args) -> int:
    path = Path(args.out)
    if path.exists() and not args.force:
        print(f"error: {path} exists (use --force to overwrite)", file=sys.stderr)
        return 1
    sshwire.generate_host_key(path)
    print(f"wrote {path} and {path}.pub")
    return 0


def cmd_init_config(args) -> int:
    path = Path(args.out)
    if path.exists() and not args.force:
        print(f"error: {path} exists (use --force to overwrite)", file=sys.stderr)
        return 1
    path.write_text(SAMPLE_CONFIG, encoding="utf-8")
    print(f"wrote {path}")
    return 0


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="shellpot",
        description="SSH honeypot with an LLM response tier and evaluation harness",
    )
    parser.add_argument("-v", "--verbose", action="store_true")
    subparsers = parser.add_subparsers(dest="command", required=True)
    _add_serve(subparsers)
    _add_eval(subparsers)
    _add_keygen(subparsers)
    _add_init_config(subparsers)
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
