"""Regenerate the end-to-end golden fixtures.

Run from the repo root after an intentional behavior change:

    python tests/golden/regenerate.py

The acceptance suite compares against the frozen transcript byte-for-byte;
regenerating is a deliberate act, never part of a test run.
"""

import asyncio
import json
from pathlib import Path

from shellpot import sshwire
from shellpot.config import load_config
from shellpot.gateway import HoneypotDaemon
from shellpot.sshclient import SshClient

GOLDEN_DIR = Path(__file__).resolve().parent

COMMANDS = [
    "whoami",
    "uname -a",
    "pwd",
    "mkdir /tmp/demo",
    "cd /tmp/demo",
    "pwd",
    "echo hello > note.txt",
    "cat note.txt",
    "ls",
    "df -h",
    "free -h",
    "id",
    "weirdtool --probe",
    "sudo apt update",
    "exit",
]

REPLAY = {
    "version": 1,
    "default_latency_ms": 2,
    "responses": {
        "weirdtool --probe": "weirdtool 1.4.2: probe complete, 0 findings\n",
        "sudo apt update": (
            "Hit:1 http://archive.ubuntu.com/ubuntu focal InRelease\n"
            "Hit:2 http://archive.ubuntu.com/ubuntu focal-updates InRelease\n"
            "Hit:3 http://archive.ubuntu.com/ubuntu focal-security InRelease\n"
            "Reading package lists... Done\n"
            "Building dependency tree\n"
            "Reading state information... Done\n"
            "All packages are up to date.\n"
        ),
    },
}


async def main() -> None:
    work = GOLDEN_DIR / "_work"
    work.mkdir(exist_ok=True)
    sshwire.generate_host_key(work / "ssh_host_key")
    (GOLDEN_DIR / "e2e_replay.json").write_text(json.dumps(REPLAY, indent=2) + "\n")
    (GOLDEN_DIR / "e2e_commands.txt").write_text("\n".join(COMMANDS) + "\n")
    (work / "config.ini").write_text(f"""
[ssh]
port = 8022
host_key = ssh_host_key
[auth]
users = root:toor
[llm]
provider = replay
replay_file = {GOLDEN_DIR / 'e2e_replay.json'}
[logging]
log_dir = logs
""")
    cfg = load_config(work / "config.ini")
    daemon = HoneypotDaemon(cfg, port=0)
    await daemon.start()
    client = await SshClient.connect("127.0.0.1", daemon.port)
    assert await client.auth_password("root", "toor")
    channel = await client.open_session()
    assert await channel.request_shell()
    prompt_root = b"root@svr04:~$ "
    await channel.read_until(prompt_root)
    for command in COMMANDS[:-1]:
        await channel.send_line(command)
        await channel.read_until(b"$ ")
    await channel.send_line("exit")
    await channel.read_to_close()
    (GOLDEN_DIR / "e2e_transcript.bin").write_bytes(bytes(channel.transcript))
    await client.close()
    await daemon.close()
    daemon.engine.store.close()
    import shutil
    shutil.rmtree(work)
    print(f"wrote {GOLDEN_DIR / 'e2e_transcript.bin'} "
          f"({len(channel.transcript)} bytes)")


if __name__ == "__main__":
    asyncio.run(main())
