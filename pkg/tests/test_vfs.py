"""Virtual filesystem: path resolution, seed image, state digest."""

import pytest

from shellpot import vfs
from shellpot.vfs import VfsNode, VfsState, new_state, resolve_path, state_summary


def make_state(cwd="/home/user", user="user"):
    root = VfsNode.directory("")
    state = VfsState(root=root, cwd=cwd, user=user, hostname="svr04", env={})
    return state


class TestResolvePath:
    def test_relative_join(self):
        assert resolve_path(make_state(), "docs") == "/home/user/docs"

    def test_dotdot_collapse(self):
        assert resolve_path(make_state(), "../../etc/passwd") == "/etc/passwd"

    def test_root_fixed_point(self):
        assert resolve_path(make_state(cwd="/"), "../..") == "/"

    def test_tilde_regular_user(self):
        state = make_state(user="alice")
        assert resolve_path(state, "~") == "/home/alice"
        assert resolve_path(state, "~/x/y") == "/home/alice/x/y"

    def test_tilde_root(self):
        assert resolve_path(make_state(user="root"), "~") == "/root"

    def test_dot_segments(self):
        assert resolve_path(make_state(), "./a/./b") == "/home/user/a/b"

    def test_absolute_passthrough(self):
        assert resolve_path(make_state(), "/var/log/../run") == "/var/run"

    def test_idempotent_and_absolute(self):
        state = make_state()
        for path in ["a", "../x", "~/y", "/a/b/../c", ".", "..", "/", "a//b"]:
            once = resolve_path(state, path)
            assert once.startswith("/")
            assert resolve_path(state, once) == once


class TestSeedImage:
    def test_fhs_skeleton_present(self):
        root = vfs.load_seed_image(hostname="svr04")
        for name in ("bin", "etc", "home", "root", "tmp", "usr", "var"):
            assert name in root.children, name
        assert "log" in root.children["var"].children

    def test_seeded_files_have_content(self):
        root = vfs.load_seed_image(hostname="svr04")
        passwd = root.children["etc"].children["passwd"]
        assert passwd.kind == vfs.FILE
        assert b"root:x:0:0:root:/root:/bin/bash" in passwd.content

    def test_hostname_substitution(self):
        root = vfs.load_seed_image(hostname="webserver9")
        hostname_file = root.children["etc"].children["hostname"]
        assert hostname_file.content == b"webserver9\n"

    def test_sessions_get_independent_clones(self):
        root = vfs.load_seed_image(hostname="svr04")
        a = new_state("root", "svr04", root)
        b = new_state("root", "svr04", root)
        a.root.children["etc"].children.pop("passwd")
        assert "passwd" in b.root.children["etc"].children
        assert "passwd" in root.children["etc"].children

    def test_non_root_user_gets_home(self):
        root = vfs.load_seed_image(hostname="svr04")
        state = new_state("eve", "svr04", root)
        assert state.cwd == "/home/eve"
        assert vfs.get_node(state, "/home/eve") is not None


class TestStateSummary:
    def test_fresh_state_format(self):
        root = vfs.load_seed_image(hostname="svr04")
        state = new_state("root", "svr04", root)
        assert state_summary(state, 200) == (
            "user=root host=svr04 cwd=/root recent=[] last_exit=0"
        )

    def test_recent_entry_listed(self):
        state = make_state()
        state.note_change("/tmp/x", "dir")
        assert "/tmp/x (dir)" in state_summary(state, 200)

    def test_truncation_keeps_most_recent(self):
        state = make_state()
        for i in range(100):
            state.note_change(f"/tmp/file{i:03d}", "file")
        digest = state_summary(state, 200)
        assert len(digest) <= 200
        # VfsState caps its recent list; the newest entry must survive
        assert "/tmp/file099 (file)" in digest
        assert "/tmp/file000" not in digest

    def test_max_len_must_be_positive(self):
        with pytest.raises(ValueError):
            state_summary(make_state(), 0)

    def test_removal_drops_recent_entries(self):
        state = make_state()
        state.note_change("/tmp/x", "dir")
        state.note_change("/tmp/x/y", "file")
        state.note_removal("/tmp/x")
        assert state_summary(state, 200).count("recent=[]") == 1
