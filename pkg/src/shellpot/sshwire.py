"""Minimal SSH-2 transport layer (RFC 4253) for the honeypot gateway.

Implements version exchange, the binary packet protocol, and
curve25519-sha256 key exchange with ssh-ed25519 host keys, aes128-ctr
encryption, and hmac-sha2-256 integrity: one solid algorithm per slot,
all in every modern client's default proposal. Both roles are supported;
the client side exists for scripted sessions and tests.

Channels and authentication live above this layer (gateway/sshclient);
this module only moves packets. Mid-session KEXINIT triggers a transparent
rekey inside recv().
"""

from __future__ import annotations

import asyncio
import hashlib
import hmac as hmaclib
import os
import struct

from cryptography.hazmat.primitives import serialization
from cryptography.hazmat.primitives.asymmetric.ed25519 import (
    Ed25519PrivateKey,
    Ed25519PublicKey,
)
from cryptography.hazmat.primitives.asymmetric.x25519 import (
    X25519PrivateKey,
    X25519PublicKey,
)
from cryptography.hazmat.primitives.ciphers import Cipher, algorithms, modes
from cryptography.exceptions import InvalidSignature

# Message numbers (RFC 4250)
MSG_DISCONNECT = 1
MSG_IGNORE = 2
MSG_UNIMPLEMENTED = 3
MSG_DEBUG = 4
MSG_SERVICE_REQUEST = 5
MSG_SERVICE_ACCEPT = 6
MSG_EXT_INFO = 7
MSG_KEXINIT = 20
MSG_NEWKEYS = 21
MSG_KEX_ECDH_INIT = 30
MSG_KEX_ECDH_REPLY = 31
MSG_USERAUTH_REQUEST = 50
MSG_USERAUTH_FAILURE = 51
MSG_USERAUTH_SUCCESS = 52
MSG_USERAUTH_BANNER = 53
MSG_GLOBAL_REQUEST = 80
MSG_REQUEST_SUCCESS = 81
MSG_REQUEST_FAILURE = 82
MSG_CHANNEL_OPEN = 90
MSG_CHANNEL_OPEN_CONFIRMATION = 91
MSG_CHANNEL_OPEN_FAILURE = 92
MSG_CHANNEL_WINDOW_ADJUST = 93
MSG_CHANNEL_DATA = 94
MSG_CHANNEL_EXTENDED_DATA = 95
MSG_CHANNEL_EOF = 96
MSG_CHANNEL_CLOSE = 97
MSG_CHANNEL_REQUEST = 98
MSG_CHANNEL_SUCCESS = 99
MSG_CHANNEL_FAILURE = 100

DISCONNECT_PROTOCOL_ERROR = 2
DISCONNECT_SERVICE_NOT_AVAILABLE = 7
DISCONNECT_NO_MORE_AUTH_METHODS = 14
DISCONNECT_BY_APPLICATION = 11

OPEN_ADMINISTRATIVELY_PROHIBITED = 1
OPEN_UNKNOWN_CHANNEL_TYPE = 3

KEX_ALGOS = ("curve25519-sha256", "curve25519-sha256@libssh.org")
HOSTKEY_ALGOS = ("ssh-ed25519",)
CIPHERS = ("aes128-ctr",)
MACS = ("hmac-sha2-256",)
COMPRESSIONS = ("none",)

MAX_PACKET = 1 << 20


class SshError(Exception):
    pass


class SshProtocolError(SshError):
    pass


class SshDisconnect(SshError):
    def __init__(self, code: int, description: str):
        super().__init__(f"disconnected ({code}): {description}")
        self.code = code
        self.description = description


# -- wire primitives ----------------------------------------------------


class Reader:
    """Sequential decoder for one packet payload."""

    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def _take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise SshProtocolError("truncated packet")
        chunk = self.data[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def byte(self) -> int:
        return self._take(1)[0]

    def boolean(self) -> bool:
        return self.byte() != 0

    def uint32(self) -> int:
        return struct.unpack(">I", self._take(4))[0]

    def string(self) -> bytes:
        return self._take(self.uint32())

    def text(self) -> str:
        return self.string().decode("utf-8", errors="replace")

    def namelist(self) -> list[str]:
        raw = self.string().decode("ascii", errors="replace")
        return raw.split(",") if raw else []

    def remainder(self) -> bytes:
        chunk = self.data[self.pos :]
        self.pos = len(self.data)
        return chunk


class Writer:
    """Payload builder with the SSH primitive types."""

    def __init__(self, msg_type: int | None = None):
        self.buf = bytearray()
        if msg_type is not None:
            self.byte(msg_type)

    def byte(self, value: int) -> "Writer":
        self.buf.append(value & 0xFF)
        return self

    def boolean(self, value: bool) -> "Writer":
        return self.byte(1 if value else 0)

    def uint32(self, value: int) -> "Writer":
        self.buf += struct.pack(">I", value & 0xFFFFFFFF)
        return self

    def string(self, value: bytes) -> "Writer":
        self.uint32(len(value))
        self.buf += value
        return self

    def text(self, value: str) -> "Writer":
        return self.string(value.encode("utf-8"))

    def namelist(self, names) -> "Writer":
        return self.string(",".join(names).encode("ascii"))

    def mpint(self, value: int) -> "Writer":
        if value == 0:
            return self.string(b"")
        raw = value.to_bytes((value.bit_length() + 7) // 8, "big")
        if raw[0] & 0x80:
            raw = b"\x00" + raw
        return self.string(raw)

    def raw(self, data: bytes) -> "Writer":
        self.buf += data
        return self

    def payload(self) -> bytes:
        return bytes(self.buf)


def mpint_from_bytes(raw: bytes) -> int:
    return int.from_bytes(raw, "big")


# -- host keys ------------------------------------------------------------


def ed25519_public_blob(key: Ed25519PublicKey) -> bytes:
    raw = key.public_bytes(
        serialization.Encoding.Raw, serialization.PublicFormat.Raw
    )
    return Writer().text("ssh-ed25519").string(raw).payload()


def ed25519_signature_blob(key: Ed25519PrivateKey, data: bytes) -> bytes:
    return Writer().text("ssh-ed25519").string(key.sign(data)).payload()


def verify_hostkey_signature(blob: bytes, sig_blob: bytes, data: bytes) -> None:
    reader = Reader(blob)
    algo = reader.text()
    if algo != "ssh-ed25519":
        raise SshProtocolError(f"unsupported host key algorithm {algo!r}")
    public = Ed25519PublicKey.from_public_bytes(reader.string())
    sig_reader = Reader(sig_blob)
    if sig_reader.text() != "ssh-ed25519":
        raise SshProtocolError("unexpected signature algorithm")
    try:
        public.verify(sig_reader.string(), data)
    except InvalidSignature as exc:
        raise SshProtocolError("host key signature verification failed") from exc


def load_host_key(path) -> Ed25519PrivateKey:
    data = open(path, "rb").read()
    key = serialization.load_ssh_private_key(data, password=None)
    if not isinstance(key, Ed25519PrivateKey):
        raise SshError("host key must be an ed25519 OpenSSH key")
    return key


def generate_host_key(path) -> None:
    """Write a fresh unencrypted ed25519 host key (plus .pub) to path."""
    key = Ed25519PrivateKey.generate()
    pem = key.private_bytes(
        serialization.Encoding.PEM,
        serialization.PrivateFormat.OpenSSH,
        serialization.NoEncryption(),
    )
    with open(path, "wb") as fh:
        fh.write(pem)
    os.chmod(path, 0o600)
    public = key.public_key().public_bytes(
        serialization.Encoding.OpenSSH, serialization.PublicFormat.OpenSSH
    )
    with open(str(path) + ".pub", "wb") as fh:
        fh.write(public + b"\n")


# -- transport ------------------------------------------------------------


class _Direction:
    """Cipher/MAC state for one direction of the connection."""

    def __init__(self):
        self.cipher = None
        self.mac_key = None
        self.seq = 0

    def activate(self, key: bytes, iv: bytes, mac_key: bytes, encrypt: bool) -> None:
        cipher = Cipher(algorithms.AES(key), modes.CTR(iv))
        self.cipher = cipher.encryptor() if encrypt else cipher.decryptor()
        self.mac_key = mac_key

    @property
    def encrypted(self) -> bool:
        return self.cipher is not None


class SshTransport:
    """Packet transport over an asyncio stream pair, either role."""

    def __init__(self, reader: asyncio.StreamReader, writer: asyncio.StreamWriter,
                 server: bool, version: str, host_key: Ed25519PrivateKey | None = None):
        if not version.startswith("SSH-"):
            raise ValueError("version banner must start with SSH-")
        self.reader = reader
        self.writer = writer
        self.server = server
        self.version = version
        self.host_key = host_key
        self.peer_version = ""
        self.session_id: bytes | None = None
        self.server_hostkey_blob: bytes | None = None
        self._inbound = _Direction()
        self._outbound = _Direction()
        self._send_lock = asyncio.Lock()
        self._my_kexinit: bytes | None = None
        self._closed = False

    # -- raw packet framing --------------------------------------------

    async def _send_packet(self, payload: bytes) -> None:
        block = 16 if self._outbound.encrypted else 8
        pad_len = block - ((5 + len(payload)) % block)
        if pad_len < 4:
            pad_len += block
        plain = (
            struct.pack(">IB", 1 + len(payload) + pad_len, pad_len)
            + payload
            + os.urandom(pad_len)
        )
        out = self._outbound
        if out.encrypted:
            mac = hmaclib.new(
                out.mac_key, struct.pack(">I", out.seq) + plain, hashlib.sha256
            ).digest()
            data = out.cipher.update(plain) + mac
        else:
            data = plain
        out.seq = (out.seq + 1) & 0xFFFFFFFF
        self.writer.write(data)
        await self.writer.drain()

    async def _recv_packet(self) -> bytes:
        inb = self._inbound
        if inb.encrypted:
            first = inb.cipher.update(await self.reader.readexactly(16))
            packet_length = struct.unpack(">I", first[:4])[0]
            if not 1 <= packet_length <= MAX_PACKET:
                raise SshProtocolError(f"bad packet length {packet_length}")
            remaining = packet_length + 4 - 16
            rest = inb.cipher.update(await self.reader.readexactly(remaining)) if remaining else b""
            plain = first + rest
            mac = await self.reader.readexactly(32)
            expect = hmaclib.new(
                inb.mac_key, struct.pack(">I", inb.seq) + plain, hashlib.sha256
            ).digest()
            if not hmaclib.compare_digest(mac, expect):
                raise SshProtocolError("MAC verification failed")
        else:
            header = await self.reader.readexactly(4)
            packet_length = struct.unpack(">I", header)[0]
            if not 1 <= packet_length <= MAX_PACKET:
                raise SshProtocolError(f"bad packet length {packet_length}")
            plain = header + await self.reader.readexactly(packet_length)
        inb.seq = (inb.seq + 1) & 0xFFFFFFFF
        pad_len = plain[4]
        payload_len = packet_length - pad_len - 1
        if payload_len < 0:
            raise SshProtocolError("bad padding length")
        return plain[5 : 5 + payload_len]

    async def send(self, payload: bytes) -> None:
        async with self._send_lock:
            await self._send_packet(payload)

    async def recv(self) -> bytes:
        """Next non-transport payload; IGNORE/DEBUG/rekey handled inline."""
        while True:
            payload = await self._recv_packet()
            msg = payload[0]
            if msg in (MSG_IGNORE, MSG_DEBUG, MSG_UNIMPLEMENTED, MSG_EXT_INFO):
                continue
            if msg == MSG_DISCONNECT:
                reader = Reader(payload)
                reader.byte()
                code = reader.uint32()
                raise SshDisconnect(code, reader.text())
            if msg == MSG_KEXINIT:
                await self._key_exchange(their_kexinit=payload)
                continue
            return payload

    async def disconnect(self, code: int, description: str) -> None:
        if self._closed:
            return
        try:
            await self.send(
                Writer(MSG_DISCONNECT).uint32(code).text(description).text("").payload()
            )
        except (ConnectionError, asyncio.IncompleteReadError):
            pass
        await self.close()

    async def close(self) -> None:
        if self._closed:
            return
        self._closed = True
        try:
            self.writer.close()
            await self.writer.wait_closed()
        except (ConnectionError, OSError):
            pass

    # -- handshake -------------------------------------------------------

    async def handshake(self) -> None:
        """Version exchange followed by the initial key exchange."""
        self.writer.write(self.version.encode("ascii") + b"\r\n")
        await self.writer.drain()
        # RFC 4253 permits pre-banner lines from a server; skip until SSH-.
        for _ in range(32):
            line = await self.reader.readline()
            if not line:
                raise SshProtocolError("peer closed before version exchange")
            text = line.strip(b"\r\n").decode("ascii", errors="replace")
            if text.startswith("SSH-"):
                self.peer_version = text
                break
            if self.server:
                raise SshProtocolError(f"bad client version line {text!r}")
        else:
            raise SshProtocolError("no version line received")
        if not (self.peer_version.startswith("SSH-2.0") or self.peer_version.startswith("SSH-1.99")):
            raise SshProtocolError(f"unsupported protocol version {self.peer_version!r}")
        await self._key_exchange()

    def _build_kexinit(self) -> bytes:
        w = Writer(MSG_KEXINIT)
        w.raw(os.urandom(16))
        w.namelist(KEX_ALGOS)
        w.namelist(HOSTKEY_ALGOS)
        for _ in range(2):
            w.namelist(CIPHERS)
        for _ in range(2):
            w.namelist(MACS)
        for _ in range(2):
            w.namelist(COMPRESSIONS)
        for _ in range(2):
            w.namelist(())
        w.boolean(False)
        w.uint32(0)
        return w.payload()

    @staticmethod
    def _choose(client_list: list[str], server_list) -> str:
        for name in client_list:
            if name in server_list:
                return name
        raise SshProtocolError(f"no common algorithm between {client_list} and {list(server_list)}")

    def _negotiate(self, their_payload: bytes) -> None:
        reader = Reader(their_payload)
        reader.byte()
        reader._take(16)
        kex = reader.namelist()
        hostkeys = reader.namelist()
        ciphers_c2s = reader.namelist()
        ciphers_s2c = reader.namelist()
        macs_c2s = reader.namelist()
        macs_s2c = reader.namelist()
        if self.server:
            self._choose(kex, KEX_ALGOS)
            self._choose(hostkeys, HOSTKEY_ALGOS)
            self._choose(ciphers_c2s, CIPHERS)
            self._choose(ciphers_s2c, CIPHERS)
            self._choose(macs_c2s, MACS)
            self._choose(macs_s2c, MACS)
        else:
            self._choose(list(KEX_ALGOS), kex)
            self._choose(list(HOSTKEY_ALGOS), hostkeys)
            self._choose(list(CIPHERS), ciphers_c2s)
            self._choose(list(CIPHERS), ciphers_s2c)
            self._choose(list(MACS), macs_c2s)
            self._choose(list(MACS), macs_s2c)

    async def _key_exchange(self, their_kexinit: bytes | None = None) -> None:
        # The lock is held across the whole exchange so concurrent writers
        # cannot interleave packets mid-rekey; KEX sends use the raw path.
        async with self._send_lock:
            my_kexinit = self._build_kexinit()
            await self._send_packet(my_kexinit)
            if their_kexinit is None:
                their_kexinit = await self._recv_packet()
                while their_kexinit[0] in (MSG_IGNORE, MSG_DEBUG):
                    their_kexinit = await self._recv_packet()
                if their_kexinit[0] != MSG_KEXINIT:
                    raise SshProtocolError("expected KEXINIT")
            self._negotiate(their_kexinit)

            if self.server:
                await self._kex_server(client_kexinit=their_kexinit, server_kexinit=my_kexinit)
            else:
                await self._kex_client(client_kexinit=my_kexinit, server_kexinit=their_kexinit)

    def _exchange_hash(self, v_c: str, v_s: str, i_c: bytes, i_s: bytes,
                       k_s: bytes, q_c: bytes, q_s: bytes, k: int) -> bytes:
        w = Writer()
        w.text(v_c).text(v_s)
        w.string(i_c).string(i_s).string(k_s)
        w.string(q_c).string(q_s)
        w.mpint(k)
        return hashlib.sha256(w.payload()).digest()

    async def _kex_server(self, client_kexinit: bytes, server_kexinit: bytes) -> None:
        if self.host_key is None:
            raise SshError("server transport requires a host key")
        while True:
            payload = await self._recv_packet()
            if payload[0] in (MSG_IGNORE, MSG_DEBUG):
                continue
            if payload[0] != MSG_KEX_ECDH_INIT:
                raise SshProtocolError("expected KEX_ECDH_INIT")
            break
        reader = Reader(payload)
        reader.byte()
        q_c = reader.string()
        ephemeral = X25519PrivateKey.generate()
        q_s = ephemeral.public_key().public_bytes(
            serialization.Encoding.Raw, serialization.PublicFormat.Raw
        )
        shared = ephemeral.exchange(X25519PublicKey.from_public_bytes(q_c))
        k = mpint_from_bytes(shared)
        k_s = ed25519_public_blob(self.host_key.public_key())
        digest = self._exchange_hash(
            self.peer_version, self.version, client_kexinit, server_kexinit,
            k_s, q_c, q_s, k,
        )
        signature = ed25519_signature_blob(self.host_key, digest)
        await self._send_packet(
            Writer(MSG_KEX_ECDH_REPLY).string(k_s).string(q_s).string(signature).payload()
        )
        await self._send_packet(Writer(MSG_NEWKEYS).payload())
        await self._await_newkeys()
        self._activate(k, digest)

    async def _kex_client(self, client_kexinit: bytes, server_kexinit: bytes) -> None:
        ephemeral = X25519PrivateKey.generate()
        q_c = ephemeral.public_key().public_bytes(
            serialization.Encoding.Raw, serialization.PublicFormat.Raw
        )
        await self._send_packet(Writer(MSG_KEX_ECDH_INIT).string(q_c).payload())
        while True:
            payload = await self._recv_packet()
            if payload[0] in (MSG_IGNORE, MSG_DEBUG):
                continue
            if payload[0] != MSG_KEX_ECDH_REPLY:
                raise SshProtocolError("expected KEX_ECDH_REPLY")
            break
        reader = Reader(payload)
        reader.byte()
        k_s = reader.string()
        q_s = reader.string()
        signature = reader.string()
        shared = ephemeral.exchange(X25519PublicKey.from_public_bytes(q_s))
        k = mpint_from_bytes(shared)
        digest = self._exchange_hash(
            self.version, self.peer_version, client_kexinit, server_kexinit,
            k_s, q_c, q_s, k,
        )
        verify_hostkey_signature(k_s, signature, digest)
        self.server_hostkey_blob = k_s
        await self._send_packet(Writer(MSG_NEWKEYS).payload())
        await self._await_newkeys()
        self._activate(k, digest)

    async def _await_newkeys(self) -> None:
        while True:
            payload = await self._recv_packet()
            if payload[0] in (MSG_IGNORE, MSG_DEBUG):
                continue
            if payload[0] != MSG_NEWKEYS:
                raise SshProtocolError("expected NEWKEYS")
            return

    def _derive(self, k: int, digest: bytes, letter: bytes, length: int) -> bytes:
        prefix = Writer().mpint(k).payload()
        out = hashlib.sha256(prefix + digest + letter + self.session_id).digest()
        while len(out) < length:
            out += hashlib.sha256(prefix + digest + out).digest()
        return out[:length]

    def _activate(self, k: int, digest: bytes) -> None:
        if self.session_id is None:
            self.session_id = digest
        iv_c2s = self._derive(k, digest, b"A", 16)
        iv_s2c = self._derive(k, digest, b"B", 16)
        key_c2s = self._derive(k, digest, b"C", 16)
        key_s2c = self._derive(k, digest, b"D", 16)
        mac_c2s = self._derive(k, digest, b"E", 32)
        mac_s2c = self._derive(k, digest, b"F", 32)
        if self.server:
            self._inbound.activate(key_c2s, iv_c2s, mac_c2s, encrypt=False)
            self._outbound.activate(key_s2c, iv_s2c, mac_s2c, encrypt=True)
        else:
            self._outbound.activate(key_c2s, iv_c2s, mac_c2s, encrypt=True)
            self._inbound.activate(key_s2c, iv_s2c, mac_s2c, encrypt=False)
