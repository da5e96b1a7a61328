"""Deterministic builtin command handlers over the virtual filesystem.

Handlers never raise for parseable input: every failure is an emulated
shell error string with a nonzero exit code, phrased byte-for-byte like
bash/coreutils in the C locale. Timestamps render in UTC.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass

from . import vfs
from .cmdparse import ParsedCommand
from .vfs import DIR, FILE, VfsNode, VfsState

logger = logging.getLogger(__name__)

KERNEL_RELEASE = "5.15.0-78-generic"
KERNEL_VERSION = "#85-Ubuntu SMP Fri Jul 7 15:25:09 UTC 2023"
MACHINE = "x86_64"


@dataclass
class BuiltinResult:
    output: str
    exit_code: int
    terminate: bool = False


def _split_flags(args: list[str]) -> tuple[set[str], list[str]]:
    """Collect single-letter flags (combined or separate) and operands."""
    flags: set[str] = set()
    operands: list[str] = []
    for arg in args:
        if arg.startswith("-") and len(arg) > 1 and not arg.startswith("--"):
            flags.update(arg[1:])
        elif arg == "--":
            continue
        else:
            operands.append(arg)
    return flags, operands


def _mode_string(node: VfsNode) -> str:
    prefix = "d" if node.is_dir else "-"
    bits = ""
    for shift in (6, 3, 0):
        triple = (node.mode >> shift) & 0o7
        bits += "r" if triple & 4 else "-"
        bits += "w" if triple & 2 else "-"
        bits += "x" if triple & 1 else "-"
    return prefix + bits


def _mtime_string(mtime: float) -> str:
    return time.strftime("%b %e %H:%M", time.gmtime(mtime))


def _node_size(node: VfsNode) -> int:
    return 4096 if node.is_dir else len(node.content)


def _blocks(node: VfsNode) -> int:
    if node.is_dir:
        return 4
    size = len(node.content)
    return 0 if size == 0 else ((size + 4095) // 4096) * 4


def _long_listing(entries: list[tuple[str, VfsNode]], include_total: bool) -> str:
    lines = []
    if include_total:
        lines.append(f"total {sum(_blocks(node) for _, node in entries)}")
    if entries:
        nlink_w = max(len(str(_nlink(node))) for _, node in entries)
        size_w = max(len(str(_node_size(node))) for _, node in entries)
        for name, node in entries:
            lines.append(
                f"{_mode_string(node)} {_nlink(node):>{nlink_w}} {node.owner} "
                f"{node.owner} {_node_size(node):>{size_w}} "
                f"{_mtime_string(node.mtime)} {name}"
            )
    return "\n".join(lines) + "\n" if lines else ""


def _nlink(node: VfsNode) -> int:
    if not node.is_dir:
        return 1
    return 2 + sum(1 for child in node.children.values() if child.is_dir)


def _builtin_cd(state: VfsState, args: list[str]) -> BuiltinResult:
    target = args[0] if args else "~"
    path = vfs.resolve_path(state, target)
    node = vfs.get_node(state, path)
    if node is None:
        return BuiltinResult(f"bash: cd: {target}: No such file or directory\n", 1)
    if not node.is_dir:
        return BuiltinResult(f"bash: cd: {target}: Not a directory\n", 1)
    state.cwd = path
    state.env["PWD"] = path
    return BuiltinResult("", 0)


def _builtin_pwd(state: VfsState, args: list[str]) -> BuiltinResult:
    return BuiltinResult(state.cwd + "\n", 0)


def _ls_entries(node: VfsNode, show_all: bool, parent: VfsNode | None) -> list[tuple[str, VfsNode]]:
    names = sorted(node.children)
    entries = [(n, node.children[n]) for n in names if show_all or not n.startswith(".")]
    if show_all:
        entries = [(".", node), ("..", parent or node)] + entries
    return entries


def _builtin_ls(state: VfsState, args: list[str]) -> BuiltinResult:
    flags, operands = _split_flags(args)
    show_all = "a" in flags
    long_form = "l" in flags
    targets = operands or ["."]

    blocks: list[str] = []
    exit_code = 0
    file_args: list[tuple[str, VfsNode]] = []
    dir_args: list[tuple[str, VfsNode]] = []
    for target in targets:
        path = vfs.resolve_path(state, target)
        node = vfs.get_node(state, path)
        if node is None:
            blocks.append(f"ls: cannot access '{target}': No such file or directory\n")
            exit_code = 2
        elif node.is_dir:
            dir_args.append((target, node))
        else:
            file_args.append((target, node))

    if file_args:
        if long_form:
            blocks.append(_long_listing(file_args, include_total=False))
        else:
            blocks.append("  ".join(name for name, _ in file_args) + "\n")

    multiple = len(targets) > 1
    for target, node in dir_args:
        parent_path, _ = vfs.split_parent(vfs.resolve_path(state, target))
        parent = vfs.get_node(state, parent_path)
        entries = _ls_entries(node, show_all, parent)
        body = ""
        if long_form:
            body = _long_listing(entries, include_total=True)
        elif entries:
            body = "  ".join(name for name, _ in entries) + "\n"
        if multiple:
            body = f"{target}:\n{body}"
        blocks.append(body)

    separator = "\n" if multiple else ""
    return BuiltinResult(separator.join(blocks), exit_code)


def _builtin_cat(state: VfsState, args: list[str]) -> BuiltinResult:
    _, operands = _split_flags(args)
    if not operands:
        return BuiltinResult("", 0)
    pieces: list[str] = []
    exit_code = 0
    for target in operands:
        path = vfs.resolve_path(state, target)
        node = vfs.get_node(state, path)
        if node is None:
            pieces.append(f"cat: {target}: No such file or directory\n")
            exit_code = 1
        elif node.is_dir:
            pieces.append(f"cat: {target}: Is a directory\n")
            exit_code = 1
        else:
            pieces.append(node.content.decode("utf-8", errors="replace"))
    return BuiltinResult("".join(pieces), exit_code)


_ECHO_ESCAPES = {"n": "\n", "t": "\t", "r": "\r", "\\": "\\", "0": "\0", "a": "\a"}


def _builtin_echo(state: VfsState, args: list[str]) -> BuiltinResult:
    newline = True
    interpret = False
    while args and args[0] in ("-n", "-e", "-ne", "-en"):
        if "n" in args[0]:
            newline = False
        if "e" in args[0]:
            interpret = True
        args = args[1:]
    text = " ".join(args)
    if interpret:
        out = []
        i = 0
        while i < len(text):
            if text[i] == "\\" and i + 1 < len(text) and text[i + 1] in _ECHO_ESCAPES:
                out.append(_ECHO_ESCAPES[text[i + 1]])
                i += 2
            else:
                out.append(text[i])
                i += 1
        text = "".join(out)
    return BuiltinResult(text + ("\n" if newline else ""), 0)


def _builtin_mkdir(state: VfsState, args: list[str]) -> BuiltinResult:
    flags, operands = _split_flags(args)
    parents_ok = "p" in flags
    if not operands:
        return BuiltinResult("mkdir: missing operand\nTry 'mkdir --help' for more information.\n", 1)
    out: list[str] = []
    exit_code = 0
    for target in operands:
        path = vfs.resolve_path(state, target)
        existing = vfs.get_node(state, path)
        if existing is not None:
            if parents_ok and existing.is_dir:
                continue
            out.append(f"mkdir: cannot create directory '{target}': File exists\n")
            exit_code = 1
            continue
        parent_path, leaf = vfs.split_parent(path)
        parent = vfs.get_node(state, parent_path)
        if parent is None:
            if parents_ok:
                vfs.ensure_dirs(state, path)
                state.note_change(path, DIR)
                continue
            out.append(f"mkdir: cannot create directory '{target}': No such file or directory\n")
            exit_code = 1
            continue
        if not parent.is_dir:
            out.append(f"mkdir: cannot create directory '{target}': Not a directory\n")
            exit_code = 1
            continue
        vfs.attach(state, parent, VfsNode.directory(leaf, mtime=state.clock()), path)
    return BuiltinResult("".join(out), exit_code)


def _builtin_touch(state: VfsState, args: list[str]) -> BuiltinResult:
    _, operands = _split_flags(args)
    if not operands:
        return BuiltinResult("touch: missing file operand\nTry 'touch --help' for more information.\n", 1)
    out: list[str] = []
    exit_code = 0
    for target in operands:
        path = vfs.resolve_path(state, target)
        node = vfs.get_node(state, path)
        if node is not None:
            node.mtime = state.clock()
            state.note_change(path, node.kind)
            continue
        parent_path, leaf = vfs.split_parent(path)
        parent = vfs.get_node(state, parent_path)
        if parent is None or not parent.is_dir or not leaf:
            out.append(f"touch: cannot touch '{target}': No such file or directory\n")
            exit_code = 1
            continue
        vfs.attach(state, parent, VfsNode.file(leaf, mtime=state.clock()), path)
    return BuiltinResult("".join(out), exit_code)


def _builtin_rm(state: VfsState, args: list[str]) -> BuiltinResult:
    flags, operands = _split_flags(args)
    recursive = "r" in flags or "R" in flags
    force = "f" in flags
    if not operands:
        if force:
            return BuiltinResult("", 0)
        return BuiltinResult("rm: missing operand\nTry 'rm --help' for more information.\n", 1)
    out: list[str] = []
    exit_code = 0
    for target in operands:
        path = vfs.resolve_path(state, target)
        if path == "/" and recursive:
            out.append("rm: it is dangerous to operate recursively on '/'\n"
                       "rm: use --no-preserve-root to override this failsafe\n")
            exit_code = 1
            continue
        node = vfs.get_node(state, path)
        if node is None:
            if not force:
                out.append(f"rm: cannot remove '{target}': No such file or directory\n")
                exit_code = 1
            continue
        if node.is_dir and not recursive:
            out.append(f"rm: cannot remove '{target}': Is a directory\n")
            exit_code = 1
            continue
        parent_path, leaf = vfs.split_parent(path)
        parent = vfs.get_node(state, parent_path)
        if parent is None or not leaf:
            out.append(f"rm: cannot remove '{target}': Device or resource busy\n")
            exit_code = 1
            continue
        vfs.detach(state, parent, leaf, path)
        if path == state.cwd or state.cwd.startswith(path.rstrip("/") + "/"):
            # Real shells keep a deleted cwd; our lexical resolver needs an
            # existing one, so fall back to the nearest surviving ancestor.
            state.cwd = parent_path
            state.env["PWD"] = parent_path
    return BuiltinResult("".join(out), exit_code)


def _builtin_whoami(state: VfsState, args: list[str]) -> BuiltinResult:
    return BuiltinResult(state.user + "\n", 0)


def _builtin_hostname(state: VfsState, args: list[str]) -> BuiltinResult:
    return BuiltinResult(state.hostname + "\n", 0)


_UNAME_FIELDS = ("s", "n", "r", "v", "m", "o")


def _builtin_uname(state: VfsState, args: list[str]) -> BuiltinResult:
    values = {
        "s": "Linux",
        "n": state.hostname,
        "r": KERNEL_RELEASE,
        "v": KERNEL_VERSION,
        "m": MACHINE,
        "o": "GNU/Linux",
    }
    if not args:
        return BuiltinResult("Linux\n", 0)
    if args == ["-a"] or args == ["--all"]:
        return BuiltinResult(
            f"Linux {state.hostname} {KERNEL_RELEASE} {KERNEL_VERSION} "
            f"{MACHINE} {MACHINE} {MACHINE} GNU/Linux\n",
            0,
        )
    flags, operands = _split_flags(args)
    if operands:
        return BuiltinResult(
            f"uname: extra operand '{operands[0]}'\nTry 'uname --help' for more information.\n", 1
        )
    unknown = flags - set(_UNAME_FIELDS) - {"a"}
    if unknown:
        bad = sorted(unknown)[0]
        return BuiltinResult(
            f"uname: invalid option -- '{bad}'\nTry 'uname --help' for more information.\n", 1
        )
    if "a" in flags:
        selected = list(_UNAME_FIELDS)
    else:
        selected = [f for f in _UNAME_FIELDS if f in flags]
    return BuiltinResult(" ".join(values[f] for f in selected) + "\n", 0)


def _builtin_id(state: VfsState, args: list[str]) -> BuiltinResult:
    _, operands = _split_flags(args)
    user = operands[0] if operands else state.user
    if user == "root":
        return BuiltinResult("uid=0(root) gid=0(root) groups=0(root)\n", 0)
    return BuiltinResult(f"uid=1000({user}) gid=1000({user}) groups=1000({user})\n", 0)


def _builtin_exit(state: VfsState, args: list[str]) -> BuiltinResult:
    code = 0
    if args:
        try:
            code = int(args[0]) & 0xFF
        except ValueError:
            code = 2
    return BuiltinResult("", code, terminate=True)


def _builtin_history(state: VfsState, args: list[str]) -> BuiltinResult:
    lines = [f"{i:5d}  {line}" for i, line in enumerate(state.history, 1)]
    return BuiltinResult("\n".join(lines) + "\n" if lines else "", 0)


def _builtin_env(state: VfsState, args: list[str]) -> BuiltinResult:
    return BuiltinResult("".join(f"{k}={v}\n" for k, v in state.env.items()), 0)


_PATH_DIRS = ("/usr/local/sbin", "/usr/local/bin", "/usr/sbin", "/usr/bin", "/sbin", "/bin")


def _builtin_which(state: VfsState, args: list[str]) -> BuiltinResult:
    _, operands = _split_flags(args)
    if not operands:
        return BuiltinResult("", 1)
    out: list[str] = []
    exit_code = 0
    for name in operands:
        found = None
        for directory in _PATH_DIRS:
            node = vfs.get_node(state, f"{directory}/{name}")
            if node is not None and not node.is_dir:
                found = f"{directory}/{name}"
                break
        if found:
            out.append(found + "\n")
        else:
            exit_code = 1
    return BuiltinResult("".join(out), exit_code)


def _head_tail_count(args: list[str], default: int = 10) -> tuple[int, list[str], str | None]:
    count = default
    operands: list[str] = []
    i = 0
    while i < len(args):
        arg = args[i]
        if arg == "-n" and i + 1 < len(args):
            raw, i = args[i + 1], i + 2
        elif arg.startswith("-n") and len(arg) > 2:
            raw, i = arg[2:], i + 1
        elif arg.startswith("-") and arg[1:].isdigit():
            raw, i = arg[1:], i + 1
        elif arg.startswith("-") and arg != "-":
            return count, operands, arg
        else:
            operands.append(arg)
            i += 1
            continue
        try:
            count = int(raw)
        except ValueError:
            return count, operands, raw
    return count, operands, None


def _slice_lines(text: str, count: int, tail: bool) -> str:
    lines = text.splitlines(keepends=True)
    picked = lines[-count:] if tail else lines[:count]
    if count <= 0:
        picked = []
    return "".join(picked)


def _builtin_head(state: VfsState, args: list[str]) -> BuiltinResult:
    return _head_tail(state, args, tail=False)


def _builtin_tail(state: VfsState, args: list[str]) -> BuiltinResult:
    return _head_tail(state, args, tail=True)


def _head_tail(state: VfsState, args: list[str], tail: bool) -> BuiltinResult:
    tool = "tail" if tail else "head"
    count, operands, bad = _head_tail_count(args)
    if bad is not None:
        return BuiltinResult(
            f"{tool}: invalid option -- '{bad.lstrip('-')[:1]}'\n"
            f"Try '{tool} --help' for more information.\n",
            1,
        )
    if not operands:
        return BuiltinResult("", 0)
    out: list[str] = []
    exit_code = 0
    for index, target in enumerate(operands):
        path = vfs.resolve_path(state, target)
        node = vfs.get_node(state, path)
        if node is None:
            out.append(f"{tool}: cannot open '{target}' for reading: No such file or directory\n")
            exit_code = 1
            continue
        if node.is_dir:
            out.append(f"{tool}: error reading '{target}': Is a directory\n")
            exit_code = 1
            continue
        if len(operands) > 1:
            if index:
                out.append("\n")
            out.append(f"==> {target} <==\n")
        out.append(_slice_lines(node.content.decode("utf-8", errors="replace"), count, tail))
    return BuiltinResult("".join(out), exit_code)


def _builtin_wc(state: VfsState, args: list[str]) -> BuiltinResult:
    flags, operands = _split_flags(args)
    selected = [f for f in ("l", "w", "c") if f in flags] or ["l", "w", "c"]
    if not operands:
        return BuiltinResult("", 0)
    rows: list[tuple[list[int], str]] = []
    errors: list[str] = []
    exit_code = 0
    for target in operands:
        path = vfs.resolve_path(state, target)
        node = vfs.get_node(state, path)
        if node is None:
            errors.append(f"wc: {target}: No such file or directory\n")
            exit_code = 1
            continue
        if node.is_dir:
            errors.append(f"wc: {target}: Is a directory\n")
            rows.append(([0, 0, 0], target))
            continue
        text = node.content.decode("utf-8", errors="replace")
        counts = {
            "l": text.count("\n"),
            "w": len(text.split()),
            "c": len(node.content),
        }
        rows.append(([counts[f] for f in selected], target))
    if len(rows) > 1:
        totals = [sum(row[0][i] for row in rows) for i in range(len(selected))]
        rows.append((totals, "total"))
    width = max((len(str(n)) for row in rows for n in row[0]), default=1)
    body = "".join(
        " ".join(f"{n:>{width}}" for n in nums) + f" {name}\n" for nums, name in rows
    )
    return BuiltinResult("".join(errors) + body, exit_code)


BUILTINS = {
    "cd": _builtin_cd,
    "pwd": _builtin_pwd,
    "ls": _builtin_ls,
    "cat": _builtin_cat,
    "echo": _builtin_echo,
    "mkdir": _builtin_mkdir,
    "touch": _builtin_touch,
    "rm": _builtin_rm,
    "whoami": _builtin_whoami,
    "hostname": _builtin_hostname,
    "uname": _builtin_uname,
    "id": _builtin_id,
    "exit": _builtin_exit,
    "logout": _builtin_exit,
    "history": _builtin_history,
    "env": _builtin_env,
    "which": _builtin_which,
    "head": _builtin_head,
    "tail": _builtin_tail,
    "wc": _builtin_wc,
}


def _apply_redirect(state: VfsState, cmd: ParsedCommand, result: BuiltinResult) -> BuiltinResult:
    target, append = cmd.redirect
    path = vfs.resolve_path(state, target)
    node = vfs.get_node(state, path)
    if node is not None and node.is_dir:
        return BuiltinResult(f"bash: {target}: Is a directory\n", 1)
    parent_path, leaf = vfs.split_parent(path)
    parent = vfs.get_node(state, parent_path)
    if parent is None or not parent.is_dir or not leaf:
        return BuiltinResult(f"bash: {target}: No such file or directory\n", 1)
    data = result.output.encode("utf-8")
    if node is None:
        node = VfsNode.file(leaf, content=b"", mtime=state.clock())
        parent.children[leaf] = node
    node.content = node.content + data if append else data
    node.mtime = state.clock()
    state.note_change(path, FILE)
    return BuiltinResult("", result.exit_code)


def execute_builtin(state: VfsState, cmd: ParsedCommand) -> BuiltinResult | None:
    """Run cmd if its program is a builtin; None signals LLM fallthrough.

    State mutations (mkdir/touch/rm/cd/redirects) are committed before
    returning, and last_exit_code always reflects the result.
    """
    handler = BUILTINS.get(cmd.program)
    if handler is None:
        return None
    try:
        result = handler(state, list(cmd.args))
        if cmd.redirect is not None and not result.terminate:
            if result.exit_code == 0:
                result = _apply_redirect(state, cmd, result)
            else:
                redirected = _apply_redirect(state, cmd, BuiltinResult("", result.exit_code))
                if redirected.exit_code != result.exit_code:
                    result = redirected
    except Exception:  # emulation must never leak an internal failure
        logger.exception("builtin %r failed internally", cmd.program)
        result = BuiltinResult(f"bash: {cmd.program}: Input/output error\n", 1)
    state.last_exit_code = result.exit_code
    return result
