"""Scripted SSH client for driving the honeypot in tests and demos.

Speaks the same transport subset as the gateway. The interface is
deliberately small: connect, authenticate with a password, open a session
channel, request a shell or exec, then read with timeouts. Every byte the
server sends on the channel is kept in .transcript for golden comparisons.
"""

from __future__ import annotations

import asyncio

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
    Reader,
    SshDisconnect,
    SshError,
    SshProtocolError,
    SshTransport,
    Writer,
)

CLIENT_VERSION = "SSH-2.0-shellpot-client_0.1"
LOCAL_WINDOW = 1 << 21
LOCAL_MAX_PACKET = 32768


class ClientChannel:
    def __init__(self, client: "SshClient", local_id: int):
        self.client = client
        self.local_id = local_id
        self.remote_id: int | None = None
        self.remote_window = 0
        self.remote_max_packet = 32768
        self.local_window = LOCAL_WINDOW
        self.opened: asyncio.Future = asyncio.get_running_loop().create_future()
        self.replies: asyncio.Queue = asyncio.Queue()
        self.data = bytearray()
        self.transcript = bytearray()
        self.data_event = asyncio.Event()
        self.eof = False
        self.closed = False
        self.exit_status: int | None = None

    # -- requests ---------------------------------------------------------

    async def request_pty(self, term: str = "xterm") -> bool:
        await self.client.transport.send(
            Writer(MSG_CHANNEL_REQUEST)
            .uint32(self.remote_id)
            .text("pty-req")
            .boolean(True)
            .text(term)
            .uint32(80)
            .uint32(24)
            .uint32(0)
            .uint32(0)
            .string(b"")
            .payload()
        )
        return await self.replies.get()

    async def request_shell(self) -> bool:
        await self.client.transport.send(
            Writer(MSG_CHANNEL_REQUEST)
            .uint32(self.remote_id)
            .text("shell")
            .boolean(True)
            .payload()
        )
        return await self.replies.get()

    async def request_exec(self, command: str) -> bool:
        await self.client.transport.send(
            Writer(MSG_CHANNEL_REQUEST)
            .uint32(self.remote_id)
            .text("exec")
            .boolean(True)
            .text(command)
            .payload()
        )
        return await self.replies.get()

    async def request_subsystem(self, name: str) -> bool:
        await self.client.transport.send(
            Writer(MSG_CHANNEL_REQUEST)
            .uint32(self.remote_id)
            .text("subsystem")
            .boolean(True)
            .text(name)
            .payload()
        )
        return await self.replies.get()

    # -- data ---------------------------------------------------------------

    async def send(self, data: bytes | str) -> None:
        if isinstance(data, str):
            data = data.encode("utf-8")
        await self.client.transport.send(
            Writer(MSG_CHANNEL_DATA).uint32(self.remote_id).string(data).payload()
        )

    async def send_line(self, line: str) -> None:
        await self.send(line + "\n")

    async def read_until(self, marker: bytes, timeout: float = 10.0) -> bytes:
        """Consume and return buffered data through the first marker."""
        deadline = asyncio.get_running_loop().time() + timeout
        while True:
            index = self.data.find(marker)
            if index >= 0:
                end = index + len(marker)
                chunk = bytes(self.data[:end])
                del self.data[:end]
                return chunk
            if self.eof or self.closed:
                raise EOFError(f"channel closed while waiting for {marker!r}")
            remaining = deadline - asyncio.get_running_loop().time()
            if remaining <= 0:
                raise asyncio.TimeoutError(f"no {marker!r} within {timeout}s")
            self.data_event.clear()
            try:
                await asyncio.wait_for(self.data_event.wait(), remaining)
            except asyncio.TimeoutError:
                raise asyncio.TimeoutError(f"no {marker!r} within {timeout}s") from None

    async def read_to_close(self, timeout: float = 10.0) -> bytes:
        deadline = asyncio.get_running_loop().time() + timeout
        while not (self.closed or self.eof):
            remaining = deadline - asyncio.get_running_loop().time()
            if remaining <= 0:
                raise asyncio.TimeoutError("channel did not close in time")
            self.data_event.clear()
            try:
                await asyncio.wait_for(self.data_event.wait(), remaining)
            except asyncio.TimeoutError:
                break
        chunk = bytes(self.data)
        self.data.clear()
        return chunk

    def _feed(self, data: bytes) -> None:
        self.data += data
        self.transcript += data
        self.data_event.set()


class SshClient:
    def __init__(self, transport: SshTransport):
        self.transport = transport
        self.channels: dict[int, ClientChannel] = {}
        self._next_id = 0
        self._dispatch_task: asyncio.Task | None = None
        self._service_requested = False
        self.authenticated = False

    @classmethod
    async def connect(cls, host: str, port: int, timeout: float = 15.0) -> "SshClient":
        reader, writer = await asyncio.wait_for(
            asyncio.open_connection(host, port), timeout
        )
        transport = SshTransport(reader, writer, server=False, version=CLIENT_VERSION)
        await asyncio.wait_for(transport.handshake(), timeout)
        return cls(transport)

    async def auth_password(self, username: str, password: str) -> bool:
        """One password attempt; call repeatedly to retry."""
        if not self._service_requested:
            await self.transport.send(
                Writer(MSG_SERVICE_REQUEST).text("ssh-userauth").payload()
            )
            reader = Reader(await self.transport.recv())
            if reader.byte() != MSG_SERVICE_ACCEPT:
                raise SshProtocolError("expected SERVICE_ACCEPT")
            self._service_requested = True
        await self.transport.send(
            Writer(MSG_USERAUTH_REQUEST)
            .text(username)
            .text("ssh-connection")
            .text("password")
            .boolean(False)
            .text(password)
            .payload()
        )
        reader = Reader(await self.transport.recv())
        msg = reader.byte()
        if msg == MSG_USERAUTH_SUCCESS:
            self.authenticated = True
            self._dispatch_task = asyncio.get_running_loop().create_task(self._dispatch())
            return True
        if msg == MSG_USERAUTH_FAILURE:
            return False
        raise SshProtocolError(f"unexpected auth reply {msg}")

    async def open_session(self, timeout: float = 10.0) -> ClientChannel:
        if not self.authenticated:
            raise SshError("authenticate first")
        channel = ClientChannel(self, self._next_id)
        self.channels[self._next_id] = channel
        self._next_id += 1
        await self.transport.send(
            Writer(MSG_CHANNEL_OPEN)
            .text("session")
            .uint32(channel.local_id)
            .uint32(LOCAL_WINDOW)
            .uint32(LOCAL_MAX_PACKET)
            .payload()
        )
        await asyncio.wait_for(channel.opened, timeout)
        return channel

    async def close(self) -> None:
        if self._dispatch_task is not None:
            self._dispatch_task.cancel()
        await self.transport.close()

    # -- inbound dispatch -----------------------------------------------

    async def _dispatch(self) -> None:
        try:
            while True:
                payload = await self.transport.recv()
                msg = payload[0]
                reader = Reader(payload)
                reader.byte()
                if msg == MSG_CHANNEL_OPEN_CONFIRMATION:
                    channel = self.channels.get(reader.uint32())
                    if channel and not channel.opened.done():
                        channel.remote_id = reader.uint32()
                        channel.remote_window = reader.uint32()
                        channel.remote_max_packet = reader.uint32()
                        channel.opened.set_result(True)
                elif msg == MSG_CHANNEL_OPEN_FAILURE:
                    channel = self.channels.get(reader.uint32())
                    if channel and not channel.opened.done():
                        code = reader.uint32()
                        channel.opened.set_exception(
                            SshError(f"channel open failed ({code}): {reader.text()}")
                        )
                elif msg == MSG_CHANNEL_DATA:
                    channel = self.channels.get(reader.uint32())
                    if channel:
                        data = reader.string()
                        channel.local_window -= len(data)
                        if channel.local_window < LOCAL_WINDOW // 2:
                            grant = LOCAL_WINDOW - channel.local_window
                            channel.local_window = LOCAL_WINDOW
                            await self.transport.send(
                                Writer(MSG_CHANNEL_WINDOW_ADJUST)
                                .uint32(channel.remote_id)
                                .uint32(grant)
                                .payload()
                            )
                        channel._feed(data)
                elif msg == MSG_CHANNEL_EXTENDED_DATA:
                    channel = self.channels.get(reader.uint32())
                    if channel:
                        reader.uint32()
                        channel._feed(reader.string())
                elif msg == MSG_CHANNEL_WINDOW_ADJUST:
                    channel = self.channels.get(reader.uint32())
                    if channel:
                        channel.remote_window += reader.uint32()
                elif msg in (MSG_CHANNEL_SUCCESS, MSG_CHANNEL_FAILURE):
                    channel = self.channels.get(reader.uint32())
                    if channel:
                        await channel.replies.put(msg == MSG_CHANNEL_SUCCESS)
                elif msg == MSG_CHANNEL_REQUEST:
                    channel = self.channels.get(reader.uint32())
                    request = reader.text()
                    reader.boolean()
                    if channel and request == "exit-status":
                        channel.exit_status = reader.uint32()
                elif msg == MSG_CHANNEL_EOF:
                    channel = self.channels.get(reader.uint32())
                    if channel:
                        channel.eof = True
                        channel.data_event.set()
                elif msg == MSG_CHANNEL_CLOSE:
                    channel = self.channels.get(reader.uint32())
                    if channel and not channel.closed:
                        channel.closed = True
                        channel.data_event.set()
                        await self.transport.send(
                            Writer(MSG_CHANNEL_CLOSE).uint32(channel.remote_id).payload()
                        )
                elif msg == MSG_GLOBAL_REQUEST:
                    reader.text()
                    if reader.boolean():
                        await self.transport.send(Writer(MSG_REQUEST_FAILURE).payload())
        except (SshDisconnect, asyncio.IncompleteReadError, ConnectionError, asyncio.CancelledError):
            for channel in self.channels.values():
                channel.closed = True
                channel.data_event.set()
                if not channel.opened.done():
                    channel.opened.set_exception(SshError("connection closed"))
