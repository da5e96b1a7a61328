"""In-memory virtual filesystem and per-session shell state.

One VfsState belongs to exactly one session; the seeded image is cloned per
login so sessions can never observe each other's changes. Path resolution is
purely lexical: existence checks belong to the command handlers.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

DATA_DIR = Path(__file__).resolve().parent / "data"

# Fixed mtime for seeded nodes so long listings are reproducible.
SEED_MTIME = 1689417000.0  # 2023-07-15 10:30:00 UTC

DIR = "dir"
FILE = "file"


@dataclass
class VfsNode:
    """One file or directory; directories own a name->child map."""

    name: str
    kind: str
    children: dict[str, "VfsNode"] = field(default_factory=dict)
    content: bytes = b""
    owner: str = "root"
    mode: int = 0o755
    mtime: float = SEED_MTIME

    @classmethod
    def directory(cls, name: str, mode: int = 0o755, owner: str = "root",
                  mtime: float = SEED_MTIME) -> "VfsNode":
        return cls(name=name, kind=DIR, mode=mode, owner=owner, mtime=mtime)

    @classmethod
    def file(cls, name: str, content: bytes = b"", mode: int = 0o644,
             owner: str = "root", mtime: float = SEED_MTIME) -> "VfsNode":
        return cls(name=name, kind=FILE, content=content, mode=mode,
                   owner=owner, mtime=mtime)

    @property
    def is_dir(self) -> bool:
        return self.kind == DIR

    def clone(self) -> "VfsNode":
        node = VfsNode(name=self.name, kind=self.kind, content=self.content,
                       owner=self.owner, mode=self.mode, mtime=self.mtime)
        node.children = {name: child.clone() for name, child in self.children.items()}
        return node


def home_dir(user: str) -> str:
    return "/root" if user == "root" else f"/home/{user}"


@dataclass
class VfsState:
    """Filesystem tree plus the shell-visible session state."""

    root: VfsNode
    cwd: str
    user: str
    hostname: str
    env: dict[str, str]
    last_exit_code: int = 0
    history: list[str] = field(default_factory=list)
    recent: list[tuple[str, str]] = field(default_factory=list)
    clock: Callable[[], float] = time.time

    MAX_RECENT = 50

    def note_change(self, path: str, kind: str) -> None:
        self.recent = [(p, k) for p, k in self.recent if p != path]
        self.recent.append((path, kind))
        if len(self.recent) > self.MAX_RECENT:
            del self.recent[: len(self.recent) - self.MAX_RECENT]

    def note_removal(self, path: str) -> None:
        prefix = path.rstrip("/") + "/"
        self.recent = [
            (p, k) for p, k in self.recent if p != path and not p.startswith(prefix)
        ]


def resolve_path(state: VfsState, path: str) -> str:
    """Normalize to an absolute path; never escapes above '/'.

    Relative paths join the cwd, '.' and '..' collapse, a leading '~'
    expands to the session user's home.
    """
    if path == "~":
        path = home_dir(state.user)
    elif path.startswith("~/"):
        path = home_dir(state.user) + path[1:]
    if not path.startswith("/"):
        path = state.cwd.rstrip("/") + "/" + path
    stack: list[str] = []
    for part in path.split("/"):
        if part in ("", "."):
            continue
        if part == "..":
            if stack:
                stack.pop()
            continue
        stack.append(part)
    return "/" + "/".join(stack)


def get_node(state: VfsState, abspath: str) -> Optional[VfsNode]:
    """Node at an already-resolved absolute path, or None."""
    node = state.root
    for part in abspath.split("/"):
        if not part:
            continue
        if not node.is_dir:
            return None
        node = node.children.get(part)
        if node is None:
            return None
    return node


def split_parent(abspath: str) -> tuple[str, str]:
    """(parent path, leaf name) of a resolved absolute path."""
    abspath = abspath.rstrip("/")
    if not abspath:
        return "/", ""
    parent, _, leaf = abspath.rpartition("/")
    return (parent or "/", leaf)


def attach(state: VfsState, parent: VfsNode, node: VfsNode, abspath: str) -> None:
    parent.children[node.name] = node
    parent.mtime = state.clock()
    state.note_change(abspath, node.kind)


def detach(state: VfsState, parent: VfsNode, name: str, abspath: str) -> None:
    parent.children.pop(name, None)
    parent.mtime = state.clock()
    state.note_removal(abspath)


def default_env(user: str, hostname: str) -> dict[str, str]:
    home = home_dir(user)
    return {
        "SHELL": "/bin/bash",
        "PWD": home,
        "LOGNAME": user,
        "HOME": home,
        "LANG": "en_US.UTF-8",
        "USER": user,
        "PATH": "/usr/local/sbin:/usr/local/bin:/usr/sbin:/usr/bin:/sbin:/bin",
        "HOSTNAME": hostname,
        "TERM": "xterm-256color",
    }


def new_state(user: str, hostname: str, seed_root: VfsNode,
              clock: Callable[[], float] = time.time) -> VfsState:
    """Fresh session state over a private clone of the seed image."""
    root = seed_root.clone()
    home = home_dir(user)
    state = VfsState(
        root=root,
        cwd="/",
        user=user,
        hostname=hostname,
        env=default_env(user, hostname),
        clock=clock,
    )
    if get_node(state, home) is None:
        # Seed images ship /root and /home/user; create other homes on login.
        ensure_dirs(state, home)
    state.cwd = home
    return state


def ensure_dirs(state: VfsState, abspath: str) -> None:
    node = state.root
    built = ""
    for part in abspath.split("/"):
        if not part:
            continue
        built += "/" + part
        child = node.children.get(part)
        if child is None:
            child = VfsNode.directory(part, mtime=state.clock())
            node.children[part] = child
        node = child


def state_summary(state: VfsState, max_len: int) -> str:
    """Compact digest for prompt injection, capped at max_len characters.

    Oldest recent-path entries are dropped first; the base fields are
    hard-truncated only if they alone exceed the budget.
    """
    if max_len <= 0:
        raise ValueError("max_len must be > 0")
    recent = list(state.recent)
    while True:
        items = ", ".join(f"{p} ({k})" for p, k in recent)
        text = (
            f"user={state.user} host={state.hostname} cwd={state.cwd} "
            f"recent=[{items}] last_exit={state.last_exit_code}"
        )
        if len(text) <= max_len or not recent:
            break
        recent.pop(0)
    return text[:max_len]


def _render_content(data: bytes, hostname: str) -> bytes:
    # Text content may reference {hostname}; binary content passes through.
    try:
        text = data.decode("utf-8")
    except UnicodeDecodeError:
        return data
    return text.replace("{hostname}", hostname).encode("utf-8")


def load_seed_image(manifest_path=None, hostname: str = "svr04") -> VfsNode:
    """Build the seed tree from a manifest fixture.

    Manifest lines: path<TAB>kind<TAB>octal mode<TAB>owner[<TAB>content ref].
    Content refs name files in a content/ directory next to the manifest.
    """
    manifest = Path(manifest_path) if manifest_path else DATA_DIR / "seed" / "manifest.txt"
    content_dir = manifest.parent / "content"
    root = VfsNode.directory("")
    state = VfsState(root=root, cwd="/", user="root", hostname="seed",
                     env={}, clock=lambda: SEED_MTIME)
    for lineno, raw in enumerate(manifest.read_text(encoding="utf-8").splitlines(), 1):
        line = raw.rstrip("\n")
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        fields = line.split("\t")
        if len(fields) < 4:
            raise ValueError(f"{manifest}:{lineno}: expected at least 4 tab-separated fields")
        path, kind, mode_str, owner = fields[:4]
        content_ref = fields[4] if len(fields) > 4 else ""
        mode = int(mode_str, 8)
        abspath = resolve_path(state, path)
        parent_path, leaf = split_parent(abspath)
        ensure_dirs(state, parent_path)
        parent = get_node(state, parent_path)
        if kind == DIR:
            node = VfsNode.directory(leaf, mode=mode, owner=owner)
        elif kind == FILE:
            content = (content_dir / content_ref).read_bytes() if content_ref else b""
            node = VfsNode.file(leaf, content=_render_content(content, hostname),
                                mode=mode, owner=owner)
        else:
            raise ValueError(f"{manifest}:{lineno}: unknown kind {kind!r}")
        parent.children[leaf] = node
    return root
