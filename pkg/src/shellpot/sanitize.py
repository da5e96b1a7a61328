"""Output-hygiene rules shared by the live session sanitizer and offline scoring.

A model reply breaks the shell illusion when it echoes the command back,
slips into an assistant persona, or leaves markdown artifacts behind. The
rule set lives here so the session engine and the metrics module can never
drift apart on what counts as a broken reply.
"""

from __future__ import annotations

import re

# Commands whose legitimate output contains their own arguments.
ECHO_EXEMPT = frozenset({"echo", "printf"})

# Assistant-persona tells, matched case-insensitively as substrings.
ROLE_BREAK_PHRASES = (
    "as an AI",
    "language model",
    "I cannot",
    "I'm sorry",
)

_ROLE_BREAK_RE = re.compile(
    "|".join(re.escape(p) for p in ROLE_BREAK_PHRASES), re.IGNORECASE
)

_FENCE = "```"


def command_program(command: str) -> str:
    """First whitespace-delimited token of a command line."""
    parts = command.strip().split()
    return parts[0] if parts else ""


def strip_fences(raw: str) -> str:
    """Remove one outer markdown fence pair plus surrounding blank lines."""
    lines = raw.split("\n")
    while lines and not lines[0].strip():
        lines.pop(0)
    while lines and not lines[-1].strip():
        lines.pop()
    if len(lines) >= 2 and lines[0].lstrip().startswith(_FENCE) and lines[-1].lstrip().startswith(_FENCE):
        lines = lines[1:-1]
        while lines and not lines[0].strip():
            lines.pop(0)
        while lines and not lines[-1].strip():
            lines.pop()
    return "\n".join(lines)


def fallback_error(command: str) -> str:
    """Realistic response shown in place of a flagged or failed reply."""
    program = command_program(command) or "sh"
    return f"bash: {program}: command not found"


def evaluate(command: str, raw: str) -> tuple[str, bool]:
    """Apply the rule set to one raw reply.

    Returns (clean, flagged). clean is the fence-stripped text when no rule
    fires, otherwise the fallback error for the command. Rules:
      a. the verbatim command line appears in the reply and the command is
         not echo-family;
      b. an assistant-persona phrase appears anywhere;
      c. fence markers survive the outer-fence strip.
    """
    clean = strip_fences(raw)
    command = command.strip()
    flagged = False
    if command and command in raw and command_program(command) not in ECHO_EXEMPT:
        flagged = True
    if _ROLE_BREAK_RE.search(raw):
        flagged = True
    if _FENCE in clean:
        flagged = True
    if flagged:
        clean = fallback_error(command)
    return clean, flagged
