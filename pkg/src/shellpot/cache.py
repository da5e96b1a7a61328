"""Exact-match dictionary cache, the fastest responder tier.

Keys are whitespace-normalized command lines; flags are part of the key.
Templates may reference {user}, {hostname}, and {cwd}, substituted at
render time. The cache is immutable after load and shared across sessions.
"""

from __future__ import annotations

from pathlib import Path

from .vfs import DATA_DIR, VfsState

ENTRY_MARKER = "%cmd "
VERSION_MARKER = "%version"


def normalize_command(raw: str) -> str:
    """Trim and collapse internal whitespace runs to single spaces."""
    return " ".join(raw.split())


class DictionaryCache:
    def __init__(self, entries: dict[str, str]):
        self.entries = dict(entries)

    def __len__(self) -> int:
        return len(self.entries)

    def __contains__(self, raw: str) -> bool:
        return normalize_command(raw) in self.entries

    def lookup(self, state: VfsState, raw: str) -> str | None:
        """Rendered response on an exact normalized hit, else None."""
        template = self.entries.get(normalize_command(raw))
        if template is None:
            return None
        return (
            template.replace("{user}", state.user)
            .replace("{hostname}", state.hostname)
            .replace("{cwd}", state.cwd)
        )

    @classmethod
    def from_file(cls, path) -> "DictionaryCache":
        """Parse the line-delimited fixture format.

        '%version N' header, then '%cmd <command>' markers each followed by
        the verbatim response lines. '#' comments are allowed only before
        the first entry (responses may legitimately contain '#').
        """
        entries: dict[str, str] = {}
        key: str | None = None
        body: list[str] = []

        def flush():
            if key is not None:
                entries[key] = "\n".join(body) + "\n" if body else ""

        for line in Path(path).read_text(encoding="utf-8").splitlines():
            if line.startswith(ENTRY_MARKER):
                flush()
                key = normalize_command(line[len(ENTRY_MARKER):])
                body = []
            elif key is None:
                if line.startswith(VERSION_MARKER) or line.startswith("#") or not line.strip():
                    continue
                raise ValueError(f"unexpected content before first {ENTRY_MARKER!r}: {line!r}")
            else:
                body.append(line)
        flush()
        return cls(entries)

    @classmethod
    def default(cls) -> "DictionaryCache":
        return cls.from_file(DATA_DIR / "cache.txt")
