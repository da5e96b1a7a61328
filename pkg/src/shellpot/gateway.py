"""SSH gateway: accept connections, run password auth against the config,
and bind each shell or exec request to a session-engine session.

The daemon never executes any received byte on the host; channel input
only ever reaches the command router. Each connection is one asyncio
task; blocking work (logstore appends, LLM calls) runs in a thread pool
with a per-line hard deadline.
"""

from __future__ import annotations

import asyncio
import concurrent.futures
import logging
from dataclasses import dataclass, field

from . import sanitize, sshwire
from .config import HoneypotConfig, validate_credentials
from .session import Session, SessionEngine
from .sshwire import (
    MSG_CHANNEL_CLOSE,
    MSG_CHANNEL_DATA,
    MSG_CHANNEL_EOF,
    MSG_CHANNEL_EXTENDED_DATA,
    MSG_CHANNEL_FAILURE,
    MSG_CHANNEL_OPEN,
    MSG_CHANNEL_OPEN_CONFIRMATION,
    MSG_CHANNEL_OPEN_FAILURE,
    MSG_CHANNEL_REQUEST,
    MSG_CHANNEL_SUCCESS,
    MSG_CHANNEL_WINDOW_ADJUST,
    MSG_GLOBAL_REQUEST,
    MSG_REQUEST_FAILURE,
    MSG_SERVICE_ACCEPT,
    MSG_SERVICE_REQUEST,
    MSG_USERAUTH_FAILURE,
    MSG_USERAUTH_REQUEST,
    MSG_USERAUTH_SUCCESS,
    OPEN_ADMINISTRATIVELY_PROHIBITED,
    Reader,
    SshDisconnect,
    SshError,
    SshTransport,
    Writer,
)

logger = logging.getLogger(__name__)

MAX_AUTH_FAILURES = 3
LOCAL_WINDOW = 1 << 20
LOCAL_MAX_PACKET = 32768
MAX_QUEUED_LINES = 1000
HANDSHAKE_TIMEOUT_S = 30.0


class BindError(Exception):
    pass


class HostKeyError(Exception):
    pass


class _LineAssembler:
    """Byte-stream to line conversion with optional pty-style echo."""

    def __init__(self, echo: bool):
        self.echo = echo
        self.buffer = bytearray()
        self._last_was_cr = False
        self._esc_skip = 0

    def feed(self, data: bytes) -> tuple[bytes, list[str]]:
        """Returns (echo bytes to send back, completed lines)."""
        lines: list[str] = []
        echo = bytearray()
        for byte in data:
            if self._esc_skip:
                self._esc_skip -= 1
                continue
            if byte == 0x0A and self._last_was_cr:
                self._last_was_cr = False
                continue
            self._last_was_cr = byte == 0x0D
            if byte in (0x0A, 0x0D):
                lines.append(self.buffer.decode("utf-8", errors="replace"))
                self.buffer.clear()
                if self.echo:
                    echo += b"\r\n"
            elif byte in (0x08, 0x7F):
                if self.buffer:
                    self.buffer.pop()
                    if self.echo:
                        echo += b"\b \b"
            elif byte == 0x1B:
                self._esc_skip = 2  # swallow short ESC sequences (arrow keys)
            elif byte >= 0x20 or byte >= 0x80 or byte == 0x09:
                self.buffer.append(byte)
                if self.echo:
                    echo.append(byte)
        return bytes(echo), lines


@dataclass
class ServerChannel:
    local_id: int
    remote_id: int
    remote_window: int
    remote_max_packet: int
    local_window: int = LOCAL_WINDOW
    pty: bool = False
    assembler: _LineAssembler | None = None
    lines: asyncio.Queue = field(default_factory=asyncio.Queue)
    window_available: asyncio.Event = field(default_factory=asyncio.Event)
    close_sent: bool = False
    close_received: bool = False
    session: Session | None = None
    task: asyncio.Task | None = None


class ServerConnection:
    """Protocol policy for one accepted connection."""

    def __init__(self, daemon: "HoneypotDaemon", transport: SshTransport,
                 peer: tuple[str, int]):
        self.daemon = daemon
        self.engine = daemon.engine
        self.transport = transport
        self.peer = peer
        self.conn_uuid = self.engine.new_connection_uuid()
        self.username: str | None = None
        self.channels: dict[int, ServerChannel] = {}
        self._next_channel_id = 0
        self._used_conn_uuid = False

    async def run(self) -> None:
        await self._authenticate()
        await self._connection_loop()

    # -- authentication -------------------------------------------------

    async def _authenticate(self) -> None:
        payload = await self.transport.recv()
        reader = Reader(payload)
        if reader.byte() != MSG_SERVICE_REQUEST or reader.text() != "ssh-userauth":
            await self.transport.disconnect(
                sshwire.DISCONNECT_SERVICE_NOT_AVAILABLE, "expected ssh-userauth"
            )
            raise SshError("client did not request ssh-userauth")
        await self.transport.send(Writer(MSG_SERVICE_ACCEPT).text("ssh-userauth").payload())

        failures = 0
        while True:
            reader = Reader(await self.transport.recv())
            if reader.byte() != MSG_USERAUTH_REQUEST:
                raise sshwire.SshProtocolError("expected USERAUTH_REQUEST")
            username = reader.text()
            service = reader.text()
            method = reader.text()
            if service != "ssh-connection":
                await self.transport.disconnect(
                    sshwire.DISCONNECT_SERVICE_NOT_AVAILABLE, f"unknown service {service}"
                )
                raise SshError(f"unsupported service {service!r}")
            if method == "password":
                reader.boolean()
                password = reader.text()
                ok = validate_credentials(self.daemon.cfg, username, password)
                await self._run_blocking(
                    self.engine.log_auth, self.conn_uuid, self.peer, username, password, ok
                )
                if ok:
                    self.username = username
                    await self.transport.send(Writer(MSG_USERAUTH_SUCCESS).payload())
                    logger.info("auth success for %r from %s:%d", username, *self.peer)
                    return
                failures += 1
                if failures >= MAX_AUTH_FAILURES:
                    await self.transport.disconnect(
                        sshwire.DISCONNECT_NO_MORE_AUTH_METHODS,
                        "Too many authentication failures",
                    )
                    raise SshError("too many authentication failures")
            # Non-password methods are advertised as unsupported.
            await self.transport.send(
                Writer(MSG_USERAUTH_FAILURE).namelist(("password",)).boolean(False).payload()
            )

    # -- connection layer -------------------------------------------------

    async def _connection_loop(self) -> None:
        while True:
            try:
                payload = await self.transport.recv()
            except (asyncio.IncompleteReadError, ConnectionError):
                return
            msg = payload[0]
            reader = Reader(payload)
            reader.byte()
            if msg == MSG_CHANNEL_OPEN:
                await self._on_channel_open(reader)
            elif msg == MSG_CHANNEL_REQUEST:
                await self._on_channel_request(reader)
            elif msg == MSG_CHANNEL_DATA:
                await self._on_channel_data(reader)
            elif msg == MSG_CHANNEL_EXTENDED_DATA:
                pass
            elif msg == MSG_CHANNEL_WINDOW_ADJUST:
                channel = self.channels.get(reader.uint32())
                if channel:
                    channel.remote_window += reader.uint32()
                    channel.window_available.set()
            elif msg == MSG_CHANNEL_EOF:
                channel = self.channels.get(reader.uint32())
                if channel:
                    await channel.lines.put(None)
            elif msg == MSG_CHANNEL_CLOSE:
                await self._on_channel_close(reader)
            elif msg == MSG_GLOBAL_REQUEST:
                reader.text()
                if reader.boolean():
                    await self.transport.send(Writer(MSG_REQUEST_FAILURE).payload())
            elif msg == MSG_USERAUTH_REQUEST:
                pass  # post-auth requests are ignored per RFC 4252
            else:
                logger.debug("ignoring message type %d", msg)

    async def _on_channel_open(self, reader: Reader) -> None:
        chan_type = reader.text()
        remote_id = reader.uint32()
        remote_window = reader.uint32()
        remote_max_packet = reader.uint32()
        if chan_type != "session":
            logger.info("refused channel type %r from %s:%d", chan_type, *self.peer)
            await self.transport.send(
                Writer(MSG_CHANNEL_OPEN_FAILURE)
                .uint32(remote_id)
                .uint32(OPEN_ADMINISTRATIVELY_PROHIBITED)
                .text("only session channels are available")
                .text("")
                .payload()
            )
            return
        local_id = self._next_channel_id
        self._next_channel_id += 1
        channel = ServerChannel(local_id, remote_id, remote_window, remote_max_packet)
        self.channels[local_id] = channel
        await self.transport.send(
            Writer(MSG_CHANNEL_OPEN_CONFIRMATION)
            .uint32(remote_id)
            .uint32(local_id)
            .uint32(LOCAL_WINDOW)
            .uint32(LOCAL_MAX_PACKET)
            .payload()
        )

    async def _reply(self, channel: ServerChannel, want_reply: bool, ok: bool) -> None:
        if not want_reply:
            return
        msg = MSG_CHANNEL_SUCCESS if ok else MSG_CHANNEL_FAILURE
        await self.transport.send(Writer(msg).uint32(channel.remote_id).payload())

    async def _on_channel_request(self, reader: Reader) -> None:
        channel = self.channels.get(reader.uint32())
        if channel is None:
            return
        request = reader.text()
        want_reply = reader.boolean()
        if request == "pty-req":
            channel.pty = True
            await self._reply(channel, want_reply, True)
        elif request == "env":
            await self._reply(channel, want_reply, True)
        elif request == "shell":
            if channel.task is not None:
                await self._reply(channel, want_reply, False)
                return
            channel.assembler = _LineAssembler(echo=channel.pty)
            await self._reply(channel, want_reply, True)
            channel.task = asyncio.get_running_loop().create_task(self._run_shell(channel))
        elif request == "exec":
            command = reader.text()
            if channel.task is not None:
                await self._reply(channel, want_reply, False)
                return
            await self._reply(channel, want_reply, True)
            channel.task = asyncio.get_running_loop().create_task(
                self._run_exec(channel, command)
            )
        elif request in ("window-change", "signal"):
            pass
        elif request == "subsystem":
            name = reader.text()
            logger.info("refused subsystem %r from %s:%d", name, *self.peer)
            await self._reply(channel, want_reply, False)
        else:
            await self._reply(channel, want_reply, False)

    async def _on_channel_data(self, reader: Reader) -> None:
        channel = self.channels.get(reader.uint32())
        if channel is None:
            return
        data = reader.string()
        channel.local_window -= len(data)
        await self._maybe_grant_window(channel)
        if channel.assembler is None:
            return
        echo, lines = channel.assembler.feed(data)
        if echo:
            await self._channel_write_raw(channel, echo)
        for line in lines:
            await channel.lines.put(line)

    async def _maybe_grant_window(self, channel: ServerChannel) -> None:
        # Withhold window grants while a line flood is queued; the shell
        # task re-grants as it drains, so a spamming client hits TCP
        # backpressure instead of growing our buffers.
        if channel.local_window >= LOCAL_WINDOW // 2:
            return
        if channel.lines.qsize() >= MAX_QUEUED_LINES:
            return
        grant = LOCAL_WINDOW - channel.local_window
        channel.local_window = LOCAL_WINDOW
        await self.transport.send(
            Writer(MSG_CHANNEL_WINDOW_ADJUST)
            .uint32(channel.remote_id)
            .uint32(grant)
            .payload()
        )

    async def _on_channel_close(self, reader: Reader) -> None:
        channel = self.channels.get(reader.uint32())
        if channel is None:
            return
        channel.close_received = True
        await channel.lines.put(None)
        if not channel.close_sent:
            channel.close_sent = True
            await self.transport.send(
                Writer(MSG_CHANNEL_CLOSE).uint32(channel.remote_id).payload()
            )
        self.channels.pop(channel.local_id, None)
        if channel.session is not None and not channel.session.closed:
            await self._run_blocking(self.engine.close_session, channel.session, "channel_closed")

    # -- data plumbing ------------------------------------------------------

    async def _run_blocking(self, fn, *args):
        return await asyncio.get_running_loop().run_in_executor(
            self.daemon.executor, fn, *args
        )

    async def _channel_write_raw(self, channel: ServerChannel, data: bytes) -> None:
        offset = 0
        while offset < len(data):
            if channel.remote_window <= 0:
                channel.window_available.clear()
                try:
                    await asyncio.wait_for(channel.window_available.wait(), 30)
                except asyncio.TimeoutError:
                    logger.warning("peer window stalled; dropping %d bytes", len(data) - offset)
                    return
            chunk_len = min(
                len(data) - offset,
                channel.remote_window,
                max(channel.remote_max_packet - 64, 256),
                LOCAL_MAX_PACKET,
            )
            chunk = data[offset : offset + chunk_len]
            await self.transport.send(
                Writer(MSG_CHANNEL_DATA).uint32(channel.remote_id).string(chunk).payload()
            )
            channel.remote_window -= chunk_len
            offset += chunk_len

    async def _write_text(self, channel: ServerChannel, text: str) -> None:
        if text:
            await self._channel_write_raw(
                channel, text.replace("\n", "\r\n").encode("utf-8")
            )

    async def _finish_channel(self, channel: ServerChannel, exit_code: int) -> None:
        if channel.close_sent:
            return
        try:
            await self.transport.send(
                Writer(MSG_CHANNEL_REQUEST)
                .uint32(channel.remote_id)
                .text("exit-status")
                .boolean(False)
                .uint32(exit_code)
                .payload()
            )
            await self.transport.send(
                Writer(MSG_CHANNEL_EOF).uint32(channel.remote_id).payload()
            )
            channel.close_sent = True
            await self.transport.send(
                Writer(MSG_CHANNEL_CLOSE).uint32(channel.remote_id).payload()
            )
        except (ConnectionError, SshError):
            pass

    def _open_session_for(self, channel: ServerChannel) -> Session:
        # The first session on a connection reuses the connection uuid so
        # auth records and shell records share one session id.
        if not self._used_conn_uuid:
            self._used_conn_uuid = True
            uuid = self.conn_uuid
        else:
            uuid = self.engine.new_connection_uuid()
        session = self.engine.open_session(uuid, self.peer, self.username)
        return session

    # -- session drivers ------------------------------------------------

    async def _run_shell(self, channel: ServerChannel) -> None:
        engine = self.engine
        try:
            session = await self._run_blocking(self._open_session_for, channel)
            channel.session = session
            motd = self.daemon.cfg.motd
            if motd and not motd.endswith("\n"):
                motd += "\n"
            await self._write_text(channel, motd + engine.render_prompt(session))
            deadline = self.daemon.cfg.backend.timeout_s + 2.0
            while True:
                line = await channel.lines.get()
                await self._maybe_grant_window(channel)
                if line is None:
                    await self._run_blocking(engine.close_session, session, "channel_closed")
                    return
                if not line.strip():
                    await self._write_text(channel, engine.render_prompt(session))
                    continue
                try:
                    outcome = await asyncio.wait_for(
                        self._run_blocking(engine.handle_line, session, line),
                        timeout=deadline,
                    )
                except asyncio.TimeoutError:
                    # The routed call is abandoned; the attacker sees a
                    # realistic failure instead of a hang.
                    await self._write_text(
                        channel, sanitize.fallback_error(line) + "\n"
                    )
                    await self._write_text(channel, engine.render_prompt(session))
                    continue
                if outcome is None:
                    await self._write_text(channel, engine.render_prompt(session))
                    continue
                await self._write_text(channel, outcome.output)
                if outcome.terminate:
                    await self._run_blocking(engine.close_session, session, "exit_command")
                    await self._finish_channel(channel, outcome.exit_code)
                    return
                await self._write_text(channel, engine.render_prompt(session))
        except (ConnectionError, SshError, asyncio.IncompleteReadError):
            if channel.session is not None and not channel.session.closed:
                await self._run_blocking(engine.close_session, channel.session, "channel_closed")
        except Exception:
            logger.exception("shell task failed")
            if channel.session is not None and not channel.session.closed:
                await self._run_blocking(engine.close_session, channel.session, "error")

    async def _run_exec(self, channel: ServerChannel, command: str) -> None:
        engine = self.engine
        try:
            session = await self._run_blocking(self._open_session_for, channel)
            channel.session = session
            exit_code = 0
            if command.strip():
                deadline = self.daemon.cfg.backend.timeout_s + 2.0
                try:
                    outcome = await asyncio.wait_for(
                        self._run_blocking(engine.handle_line, session, command),
                        timeout=deadline,
                    )
                except asyncio.TimeoutError:
                    outcome = None
                    await self._write_text(channel, sanitize.fallback_error(command) + "\n")
                    exit_code = 127
                if outcome is not None:
                    await self._write_text(channel, outcome.output)
                    exit_code = outcome.exit_code
            await self._run_blocking(engine.close_session, session, "exit_command")
            await self._finish_channel(channel, exit_code)
        except (ConnectionError, SshError, asyncio.IncompleteReadError):
            if channel.session is not None and not channel.session.closed:
                await self._run_blocking(engine.close_session, channel.session, "channel_closed")
        except Exception:
            logger.exception("exec task failed")
            if channel.session is not None and not channel.session.closed:
                await self._run_blocking(engine.close_session, channel.session, "error")


class HoneypotDaemon:
    """Accept loop plus shared engine, executor, and per-IP accounting."""

    def __init__(self, cfg: HoneypotConfig, engine: SessionEngine | None = None,
                 host: str = "0.0.0.0", port: int | None = None):
        self.cfg = cfg
        self.engine = engine if engine is not None else SessionEngine(cfg)
        self.host = host
        self._port = port if port is not None else cfg.port
        self.executor = concurrent.futures.ThreadPoolExecutor(
            max_workers=64, thread_name_prefix="shellpot"
        )
        self._server: asyncio.AbstractServer | None = None
        self._per_ip: dict[str, int] = {}
        self._host_key = None
        self.connections_refused = 0

    @property
    def port(self) -> int:
        if self._server and self._server.sockets:
            return self._server.sockets[0].getsockname()[1]
        return self._port

    async def start(self) -> None:
        try:
            self._host_key = sshwire.load_host_key(self.cfg.host_key_path)
        except FileNotFoundError as exc:
            raise HostKeyError(f"host key not found: {self.cfg.host_key_path}") from exc
        except (ValueError, SshError) as exc:
            raise HostKeyError(f"cannot load host key: {exc}") from exc
        try:
            self._server = await asyncio.start_server(
                self._on_connection, self.host, self._port
            )
        except OSError as exc:
            raise BindError(f"cannot bind port {self._port}: {exc}") from exc
        logger.info("listening on %s:%d", self.host, self.port)

    async def close(self) -> None:
        if self._server is not None:
            self._server.close()
            await self._server.wait_closed()
        self.executor.shutdown(wait=False)

    async def serve_forever(self) -> None:
        if self._server is None:
            await self.start()
        async with self._server:
            await self._server.serve_forever()

    async def _on_connection(self, reader: asyncio.StreamReader,
                             writer: asyncio.StreamWriter) -> None:
        peername = writer.get_extra_info("peername") or ("?", 0)
        peer = (peername[0], peername[1])
        ip = peer[0]
        if self._per_ip.get(ip, 0) >= self.cfg.ip_connection_cap:
            self.connections_refused += 1
            logger.warning("per-IP cap reached for %s; closing", ip)
            writer.close()
            return
        self._per_ip[ip] = self._per_ip.get(ip, 0) + 1
        transport = SshTransport(reader, writer, server=True,
                                 version=self.cfg.banner, host_key=self._host_key)
        conn = ServerConnection(self, transport, peer)
        try:
            await asyncio.wait_for(transport.handshake(), HANDSHAKE_TIMEOUT_S)
            await conn.run()
        except (SshDisconnect, asyncio.IncompleteReadError, ConnectionError):
            pass
        except (SshError, asyncio.TimeoutError) as exc:
            logger.info("handshake/session failed from %s:%d: %s", peer[0], peer[1], exc)
            try:
                await asyncio.get_running_loop().run_in_executor(
                    self.executor, conn.engine.store.append,
                    _handshake_failure_record(conn.conn_uuid, peer, exc),
                )
            except Exception:
                logger.exception("could not record handshake failure")
        except Exception:
            logger.exception("connection handler failed for %s:%d", *peer)
        finally:
            for channel in list(conn.channels.values()):
                if channel.session is not None and not channel.session.closed:
                    try:
                        await asyncio.get_running_loop().run_in_executor(
                            self.executor, self.engine.close_session,
                            channel.session, "channel_closed",
                        )
                    except Exception:
                        logger.exception("could not close session")
                if channel.task is not None:
                    channel.task.cancel()
            await transport.close()
            self._per_ip[ip] -= 1
            if self._per_ip[ip] <= 0:
                self._per_ip.pop(ip, None)


def _handshake_failure_record(conn_uuid: str, peer: tuple[str, int], exc: Exception):
    from .logstore import EventRecord

    return EventRecord.now(conn_uuid, "session_close", peer, {
        "reason": "handshake_failed",
        "error": str(exc),
        "command_count": 0,
    })
