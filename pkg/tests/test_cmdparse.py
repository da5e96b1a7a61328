"""Command-line tokenization and the shell-syntax gate."""

import pytest

from shellpot.cmdparse import (
    EmptyLine,
    UnsupportedSyntax,
    UnterminatedQuote,
    has_shell_syntax,
    parse_command_line,
)


class TestBasicSplitting:
    def test_whitespace_split(self):
        cmd = parse_command_line("ls -la /tmp")
        assert cmd.program == "ls"
        assert cmd.args == ["-la", "/tmp"]
        assert cmd.redirect is None
        assert cmd.raw == "ls -la /tmp"

    def test_tabs_and_runs(self):
        cmd = parse_command_line("  cat\t\t/etc/passwd  ")
        assert cmd.program == "cat"
        assert cmd.args == ["/etc/passwd"]

    def test_program_is_first_token(self):
        assert parse_command_line("x").program == "x"


class TestQuotes:
    def test_double_quoted_arg(self):
        cmd = parse_command_line('echo "hello world" > /tmp/a')
        assert cmd.program == "echo"
        assert cmd.args == ["hello world"]
        assert cmd.redirect == ("/tmp/a", False)

    def test_single_quotes(self):
        cmd = parse_command_line("echo 'a  b'")
        assert cmd.args == ["a  b"]

    def test_adjacent_quote_segments(self):
        cmd = parse_command_line('echo ab"cd"ef')
        assert cmd.args == ["abcdef"]

    def test_unterminated_quote(self):
        with pytest.raises(UnterminatedQuote):
            parse_command_line("echo 'it")

    def test_quotes_hide_redirect(self):
        cmd = parse_command_line('echo "a > b"')
        assert cmd.args == ["a > b"]
        assert cmd.redirect is None


class TestRedirect:
    def test_append(self):
        cmd = parse_command_line("echo hi >> /tmp/log")
        assert cmd.redirect == ("/tmp/log", True)

    def test_no_space_before_operator(self):
        cmd = parse_command_line("echo hi>/tmp/x")
        assert cmd.args == ["hi"]
        assert cmd.redirect == ("/tmp/x", False)

    def test_redirect_must_be_trailing(self):
        with pytest.raises(UnsupportedSyntax):
            parse_command_line("echo a > b c")

    def test_redirect_without_target(self):
        with pytest.raises(UnsupportedSyntax):
            parse_command_line("echo hi >")

    def test_double_redirect_rejected(self):
        with pytest.raises(UnsupportedSyntax):
            parse_command_line("echo a > b > c")

    def test_bare_redirect(self):
        with pytest.raises(UnsupportedSyntax):
            parse_command_line("> f")


class TestEmpty:
    def test_blank(self):
        with pytest.raises(EmptyLine):
            parse_command_line("   ")

    def test_empty(self):
        with pytest.raises(EmptyLine):
            parse_command_line("")

    def test_newline_rejected(self):
        with pytest.raises(ValueError):
            parse_command_line("ls\npwd")


class TestShellSyntaxGate:
    @pytest.mark.parametrize("line", [
        "ls | grep x", "a; b", "a && b", "echo $HOME", "ls *.txt",
        "cat `whoami`", "find . -name '*.py' | wc -l", "(subshell)",
        "cmd < input", "ls foo?",
    ])
    def test_needs_llm(self, line):
        assert has_shell_syntax(line)

    @pytest.mark.parametrize("line", [
        "ls -la /tmp", 'echo "a | b"', "echo 'x; y'", "cat /etc/passwd",
        "echo hi > /tmp/a", "touch file-with-dash",
    ])
    def test_deterministic_ok(self, line):
        assert not has_shell_syntax(line)
