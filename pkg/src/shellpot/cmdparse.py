"""Command-line tokenization for the deterministic tier.

Whitespace splitting with single/double quotes and one trailing > / >>
redirection. Anything resembling real shell grammar (pipes, chaining,
globs, substitution) is left whole for the LLM tier; has_shell_syntax is
the quote-aware gate the session engine uses before trying a builtin.
"""

from __future__ import annotations

from dataclasses import dataclass, field


class ParseError(Exception):
    pass


class EmptyLine(ParseError):
    pass


class UnterminatedQuote(ParseError):
    pass


class UnsupportedSyntax(ParseError):
    """Parseable only by a real shell; callers route the line to the LLM."""


@dataclass
class ParsedCommand:
    program: str
    args: list[str] = field(default_factory=list)
    redirect: tuple[str, bool] | None = None  # (target path, append)
    raw: str = ""


_REDIR = object()  # marker for an unquoted > token
_APPEND_REDIR = object()  # marker for an unquoted >> token

# Unquoted characters whose semantics we never emulate deterministically.
_SHELL_SYNTAX_CHARS = set("|;&`$*?[(){}<")


def _scan(line: str) -> list:
    """Split into tokens; quotes group and are removed, > / >> become markers."""
    tokens: list = []
    current: list[str] = []
    has_current = False
    i = 0
    n = len(line)
    while i < n:
        ch = line[i]
        if ch in "'\"":
            quote = ch
            end = line.find(quote, i + 1)
            if end < 0:
                raise UnterminatedQuote(f"no closing {quote} quote")
            current.append(line[i + 1 : end])
            has_current = True
            i = end + 1
            continue
        if ch in " \t":
            if has_current:
                tokens.append("".join(current))
                current, has_current = [], False
            i += 1
            continue
        if ch == ">":
            if has_current:
                tokens.append("".join(current))
                current, has_current = [], False
            if i + 1 < n and line[i + 1] == ">":
                tokens.append(_APPEND_REDIR)
                i += 2
            else:
                tokens.append(_REDIR)
                i += 1
            continue
        current.append(ch)
        has_current = True
        i += 1
    if has_current:
        tokens.append("".join(current))
    return tokens


def parse_command_line(line: str) -> ParsedCommand:
    """Tokenize one input line.

    Raises EmptyLine on blank input, UnterminatedQuote on a dangling quote,
    and UnsupportedSyntax when a redirect is malformed (not a single
    trailing target).
    """
    if "\n" in line or "\r" in line:
        raise ValueError("line must not contain newlines")
    if not line.strip():
        raise EmptyLine("blank input")
    tokens = _scan(line)
    redirect = None
    words: list[str] = []
    i = 0
    while i < len(tokens):
        token = tokens[i]
        if token is _REDIR or token is _APPEND_REDIR:
            append = token is _APPEND_REDIR
            if redirect is not None or i + 2 != len(tokens) or not isinstance(tokens[i + 1], str):
                raise UnsupportedSyntax("only a single trailing redirection is supported")
            redirect = (tokens[i + 1], append)
            i += 2
            continue
        words.append(token)
        i += 1
    if not words:
        raise UnsupportedSyntax("redirection without a command")
    return ParsedCommand(program=words[0], args=words[1:], redirect=redirect, raw=line)


def has_shell_syntax(line: str) -> bool:
    """True when the line carries unquoted shell grammar beyond our subset."""
    i = 0
    n = len(line)
    while i < n:
        ch = line[i]
        if ch in "'\"":
            end = line.find(ch, i + 1)
            if end < 0:
                return False  # unterminated quote is reported by the parser
            i = end + 1
            continue
        if ch in _SHELL_SYNTAX_CHARS:
            return True
        i += 1
    return False
