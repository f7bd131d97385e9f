"""System server: accounts, one-time-password rotation, the per-file key
table, file-number sequencing, and upload/download orchestration.

Identity hygiene: usernames and OTPs exist in persistent state only as MD5
digests. Every uploaded file gets a fresh single-use AES-128 key; the key
stays here, the ciphertext goes to a storage server (round-robin), and a key
record is written only after storage acknowledges the blob, so a crash can
strand a blob but never a key without one.
"""

import argparse
import json
import os
import secrets
import signal
import socket
import threading
import time
import urllib.parse
from dataclasses import dataclass

from . import crypto_core, mailbox as mailbox_mod, netutil, protocol
from .crypto_core import RsaKeyPair, md5_digest
from .errors import (
    AuthFailed,
    CloudVaultError,
    DuplicateLabel,
    DuplicateUser,
    FileTooLarge,
    IntegrityFailure,
    InvalidSession,
    MalformedPayload,
    NoSuchLabel,
    NotFound,
    PersistenceFailure,
    StorageUnavailable,
    error_for_code,
)
from .placement import PlacementEntry

ACCOUNTS_FILE = "accounts.tsv"
KEYS_FILE = "keys.tsv"
COUNTER_FILE = "counter.txt"
SERVER_KEY_FILE = "server_key.json"

DEFAULT_MAX_FILE_BYTES = 16 * 1024 * 1024
DEFAULT_SESSION_TTL = 30 * 60.0


def _quote(text: str) -> str:
    return urllib.parse.quote(text, safe="")


def _unquote(text: str) -> str:
    return urllib.parse.unquote(text)


@dataclass(frozen=True)
class AccountRecord:
    user_digest: bytes
    otp_digest: bytes
    mail_address: str
    client_public_key: tuple


@dataclass(frozen=True)
class KeyRecord:
    user_digest: bytes
    label: str
    file_number: int
    key: bytes
    storage_id: str


@dataclass(frozen=True)
class StorageTarget:
    server_id: str
    host: str
    port: int


@dataclass
class SystemConfig:
    host: str
    port: int
    admin_port: int
    data_dir: str
    storage: list
    seed: int = 100
    admin_host: str = "127.0.0.1"
    mailbox_dir: str = ""
    session_ttl: float = DEFAULT_SESSION_TTL
    rsa_bits: int = crypto_core.DEFAULT_RSA_BITS
    max_file_bytes: int = DEFAULT_MAX_FILE_BYTES
    keypair_path: str = ""  # default: <data_dir>/server_key.json
    # Deliberate mis-builds, used only to prove the leakage auditor catches
    # a broken deployment. Never enable outside that self-test.
    sabotage_keys_on_storage: bool = False
    sabotage_accept_plain: bool = False

    def __post_init__(self):
        self.storage = [
            StorageTarget(**target) if isinstance(target, dict) else target
            for target in self.storage
        ]

    @classmethod
    def from_file(cls, path: str) -> "SystemConfig":
        with open(path, encoding="utf-8") as fh:
            return cls(**json.load(fh))


# ---------------------------------------------------------------------------
# Storage access. The transport is swappable so tests can run a storage
# service in-process while production goes over TCP; both speak the same
# plain-channel messages.

class StorageClient:
    def __init__(self, server_id: str, transport):
        self.server_id = server_id
        self._transport = transport

    def store(self, user_digest: bytes, file_number: int, blob: bytes) -> PlacementEntry:
        reply = self._transport(
            protocol.StoreBlob(
                user_digest=user_digest, file_number=file_number, blob=blob
            )
        )
        if isinstance(reply, protocol.ErrorFrame):
            raise error_for_code(reply.code, reply.text)
        if not isinstance(reply, protocol.UploadAck):
            raise StorageUnavailable(f"unexpected ack {type(reply).__name__}")
        try:
            word, position, offset = reply.status.split()
            if word != "STORED":
                raise ValueError(reply.status)
            return PlacementEntry(position=int(position), offset=int(offset))
        except ValueError as exc:
            raise StorageUnavailable(f"unparseable ack {reply.status!r}") from exc

    def fetch(self, user_digest: bytes, file_number: int) -> bytes:
        reply = self._transport(
            protocol.FetchBlob(user_digest=user_digest, file_number=file_number)
        )
        if isinstance(reply, protocol.ErrorFrame):
            raise error_for_code(reply.code, reply.text)
        if not isinstance(reply, protocol.BlobPayload):
            raise StorageUnavailable(f"unexpected reply {type(reply).__name__}")
        return reply.blob


class _TcpTransport:
    """Persistent plain-channel connection to one storage server.

    Calls are serialized; a stale keep-alive socket gets one transparent
    replacement, a fresh-socket failure surfaces as StorageUnavailable.
    """

    def __init__(self, host: str, port: int, timeout: float = 30.0):
        self.host = host
        self.port = port
        self.timeout = timeout
        self._sock = None
        self._lock = threading.Lock()

    def _drop(self):
        if self._sock is not None:
            try:
                self._sock.close()
            except OSError:
                pass
            self._sock = None

    def __call__(self, msg):
        request = protocol.send_plain(msg)
        with self._lock:
            while True:
                reused = self._sock is not None
                if not reused:
                    try:
                        self._sock = socket.create_connection(
                            (self.host, self.port), timeout=self.timeout
                        )
                    except OSError as exc:
                        raise StorageUnavailable(
                            f"{self.host}:{self.port}: {exc}"
                        ) from exc
                try:
                    protocol.write_frame(self._sock, request)
                    frame = protocol.read_frame(self._sock)
                except (OSError, CloudVaultError) as exc:
                    self._drop()
                    if reused:
                        continue
                    raise StorageUnavailable(
                        f"{self.host}:{self.port}: {exc}"
                    ) from exc
                if frame is None:
                    self._drop()
                    if reused:
                        continue
                    raise StorageUnavailable(
                        f"{self.host}:{self.port} closed the connection"
                    )
                return protocol.recv_plain(frame)


def tcp_transport(host: str, port: int, timeout: float = 30.0):
    return _TcpTransport(host, port, timeout)


def local_transport(storage_service):
    """Route messages straight into an in-process StorageService."""
    return storage_service.handle_message


@dataclass
class _Session:
    user_digest: bytes
    last_used: float


@dataclass
class _DispatchResult:
    reply: object
    client_public_key: tuple = None


class SystemService:
    """Account/key/session state machine, independent of any socket."""

    def __init__(self, config: SystemConfig, mail_channel=None, storage_clients=None):
        self.config = config
        os.makedirs(config.data_dir, exist_ok=True)
        if mail_channel is None:
            if config.mailbox_dir:
                mail_channel = mailbox_mod.FileMailbox(config.mailbox_dir)
            else:
                mail_channel = mailbox_mod.InMemoryMailbox()
        self.mail = mail_channel
        if storage_clients is None:
            storage_clients = [
                StorageClient(t.server_id, tcp_transport(t.host, t.port))
                for t in config.storage
            ]
        self.storage_clients = list(storage_clients)
        if not self.storage_clients:
            raise ValueError("at least one storage server is required")
        self._lock = threading.RLock()
        self.keypair = self._load_or_create_keypair()
        self.accounts: dict[bytes, AccountRecord] = {}
        self.key_records: dict[tuple, KeyRecord] = {}
        self._counter = 0
        self._sessions: dict[str, _Session] = {}
        self._pending_labels: set = set()
        self._load_state()
        # Fault-injection seam for crash-consistency tests: called between the
        # storage acknowledgment and the key-record write.
        self.after_blob_store = None

    # -- persistence ----------------------------------------------------------

    def _path(self, name: str) -> str:
        return os.path.join(self.config.data_dir, name)

    def _load_or_create_keypair(self) -> RsaKeyPair:
        path = self.config.keypair_path or self._path(SERVER_KEY_FILE)
        if os.path.exists(path):
            with open(path, encoding="utf-8") as fh:
                obj = json.load(fh)
            return RsaKeyPair(n=int(obj["n"]), e=int(obj["e"]), d=int(obj["d"]))
        pair = crypto_core.rsa_generate(self.config.rsa_bits)
        data = json.dumps({"n": str(pair.n), "e": str(pair.e), "d": str(pair.d)})
        netutil.write_atomic(path, data.encode("ascii"))
        os.chmod(path, 0o600)
        return pair

    def _load_state(self):
        for line in netutil.read_lines(self._path(ACCOUNTS_FILE)):
            digest_hex, otp_hex, mail_quoted, n_str, e_str = line.split("\t")
            record = AccountRecord(
                user_digest=bytes.fromhex(digest_hex),
                otp_digest=bytes.fromhex(otp_hex),
                mail_address=_unquote(mail_quoted),
                client_public_key=(int(n_str), int(e_str)),
            )
            self.accounts[record.user_digest] = record  # later rows win
        for line in netutil.read_lines(self._path(KEYS_FILE)):
            digest_hex, label_quoted, number, key_hex, storage_id = line.split("\t")
            record = KeyRecord(
                user_digest=bytes.fromhex(digest_hex),
                label=_unquote(label_quoted),
                file_number=int(number),
                key=bytes.fromhex(key_hex),
                storage_id=storage_id,
            )
            self.key_records[(record.user_digest, record.label)] = record
        counter_lines = netutil.read_lines(self._path(COUNTER_FILE))
        if counter_lines:
            self._counter = int(counter_lines[0])

    def _append_account(self, record: AccountRecord):
        n, e = record.client_public_key
        try:
            netutil.append_line(
                self._path(ACCOUNTS_FILE),
                "\t".join(
                    (
                        record.user_digest.hex(),
                        record.otp_digest.hex(),
                        _quote(record.mail_address),
                        str(n),
                        str(e),
                    )
                ),
            )
        except OSError as exc:
            raise PersistenceFailure(str(exc)) from exc

    def _append_key_record(self, record: KeyRecord):
        try:
            netutil.append_line(
                self._path(KEYS_FILE),
                "\t".join(
                    (
                        record.user_digest.hex(),
                        _quote(record.label),
                        str(record.file_number),
                        record.key.hex(),
                        record.storage_id,
                    )
                ),
            )
        except OSError as exc:
            raise PersistenceFailure(str(exc)) from exc

    # -- account lifecycle ------------------------------------------------------

    def register(self, username: str, mail_address: str, client_public_key: tuple):
        """Create an account keyed by md5(username); mail the first OTP.

        Nothing is persisted until the OTP is in the mailbox, so a delivery
        failure leaves no trace of the attempt.
        """
        if not username:
            raise MalformedPayload("username must be non-empty")
        digest = md5_digest(username.encode("utf-8"))
        with self._lock:
            if digest in self.accounts:
                raise DuplicateUser("that username is taken")
            otp = crypto_core.generate_otp()
            self.mail.deliver(mail_address, otp)
            record = AccountRecord(
                user_digest=digest,
                otp_digest=md5_digest(otp.encode("ascii")),
                mail_address=mail_address,
                client_public_key=tuple(client_public_key),
            )
            self._append_account(record)
            self.accounts[digest] = record

    def login(self, username: str, otp: str) -> str:
        """Validate the current OTP, rotate it, and open a session.

        Unknown users and wrong passwords fail identically; a matched OTP is
        consumed before the response leaves, and its replacement is already
        in the mailbox.
        """
        digest = md5_digest(username.encode("utf-8"))
        with self._lock:
            record = self.accounts.get(digest)
            if record is None or md5_digest(otp.encode("utf-8")) != record.otp_digest:
                raise AuthFailed("unknown user or invalid one-time password")
            next_otp = crypto_core.generate_otp()
            self.mail.deliver(record.mail_address, next_otp)
            rotated = AccountRecord(
                user_digest=record.user_digest,
                otp_digest=md5_digest(next_otp.encode("ascii")),
                mail_address=record.mail_address,
                client_public_key=record.client_public_key,
            )
            self._append_account(rotated)  # last row wins on reload
            self.accounts[digest] = rotated
            token = secrets.token_bytes(16).hex()
            self._sessions[token] = _Session(user_digest=digest, last_used=time.monotonic())
            return token

    def _session_digest(self, token: str) -> bytes:
        with self._lock:
            session = self._sessions.get(token)
            now = time.monotonic()
            if session is None:
                raise InvalidSession("no such session")
            if now - session.last_used > self.config.session_ttl:
                del self._sessions[token]
                raise InvalidSession("session expired")
            session.last_used = now
            return session.user_digest

    def account_for_token(self, token: str) -> AccountRecord:
        return self.accounts[self._session_digest(token)]

    # -- files ------------------------------------------------------------------

    def next_file_number(self) -> int:
        """Monotone global sequence, durable before first use."""
        with self._lock:
            number = self._counter + 1
            try:
                netutil.write_atomic(self._path(COUNTER_FILE), f"{number}\n".encode())
            except OSError as exc:
                raise PersistenceFailure(str(exc)) from exc
            self._counter = number
            return number

    def upload(self, token: str, label: str, file_bytes: bytes):
        digest = self._session_digest(token)
        if not label:
            raise MalformedPayload("label must be non-empty")
        if len(file_bytes) > self.config.max_file_bytes:
            raise FileTooLarge(
                f"{len(file_bytes)} bytes exceeds cap {self.config.max_file_bytes}"
            )
        claim = (digest, label)
        with self._lock:
            if claim in self.key_records or claim in self._pending_labels:
                raise DuplicateLabel(f"label {label!r} already uploaded")
            self._pending_labels.add(claim)
            upload_index = len(self.key_records)
        try:
            key = crypto_core.generate_symmetric_key()
            blob = crypto_core.encrypt_file(file_bytes, key).to_bytes()
            if self.config.sabotage_keys_on_storage:
                blob += key  # deliberately broken build; see SystemConfig
            number = self.next_file_number()
            client = self.storage_clients[upload_index % len(self.storage_clients)]
            try:
                client.store(digest, number, blob)
            except CloudVaultError as exc:
                raise StorageUnavailable(
                    f"storage {client.server_id}: {exc}"
                ) from exc
            if self.after_blob_store is not None:
                self.after_blob_store()
            record = KeyRecord(
                user_digest=digest,
                label=label,
                file_number=number,
                key=key,
                storage_id=client.server_id,
            )
            with self._lock:
                self._append_key_record(record)
                self.key_records[claim] = record
        finally:
            with self._lock:
                self._pending_labels.discard(claim)

    def download(self, token: str, label: str) -> bytes:
        digest = self._session_digest(token)
        with self._lock:
            record = self.key_records.get((digest, label))
            if record is None:
                raise NoSuchLabel(f"no file labelled {label!r}")
            client = next(
                (c for c in self.storage_clients if c.server_id == record.storage_id),
                None,
            )
        if client is None:
            raise StorageUnavailable(f"storage {record.storage_id} not configured")
        try:
            blob = client.fetch(digest, record.file_number)
        except NotFound as exc:
            raise StorageUnavailable(
                f"storage {record.storage_id} lost file {record.file_number}"
            ) from exc
        try:
            ct = crypto_core.Ciphertext.from_bytes(blob)
            return crypto_core.decrypt_file(ct, record.key)
        except CloudVaultError as exc:
            raise IntegrityFailure(f"blob {record.file_number} corrupted") from exc

    def list_labels(self, token: str) -> list[str]:
        digest = self._session_digest(token)
        with self._lock:
            return sorted(
                label for (d, label) in self.key_records if d == digest
            )

    def dump_tables(self) -> dict[str, bytes]:
        """Byte-faithful copy of the persisted tables (audit channel)."""
        snapshot = {}
        with self._lock:
            for name in (ACCOUNTS_FILE, KEYS_FILE, COUNTER_FILE):
                try:
                    with open(self._path(name), "rb") as fh:
                        snapshot[name] = fh.read()
                except FileNotFoundError:
                    pass
        return snapshot

    # -- protocol dispatch --------------------------------------------------------

    def dispatch(self, msg) -> _DispatchResult:
        """Map one request message to one response message.

        The result names the client public key replies should be sealed to,
        when one is known; errors for unidentifiable peers go back plain.
        """
        client_key = None
        try:
            if isinstance(msg, protocol.Register):
                client_key = tuple(msg.client_public_key)
                self.register(msg.username, msg.mail_address, client_key)
                reply = protocol.LoginResponse(session_token="", status="REGISTERED")
            elif isinstance(msg, protocol.LoginRequest):
                digest = md5_digest(msg.username.encode("utf-8"))
                account = self.accounts.get(digest)
                if account is not None:
                    client_key = account.client_public_key
                token = self.login(msg.username, msg.otp)
                reply = protocol.LoginResponse(session_token=token, status="OK")
            elif isinstance(msg, protocol.UploadRequest):
                client_key = self.account_for_token(msg.session_token).client_public_key
                self.upload(msg.session_token, msg.label, msg.file_bytes)
                reply = protocol.UploadAck(label=msg.label, status="OK")
            elif isinstance(msg, protocol.DownloadRequest):
                client_key = self.account_for_token(msg.session_token).client_public_key
                data = self.download(msg.session_token, msg.label)
                reply = protocol.FilePayload(label=msg.label, file_bytes=data)
            elif isinstance(msg, protocol.ListRequest):
                client_key = self.account_for_token(msg.session_token).client_public_key
                labels = self.list_labels(msg.session_token)
                reply = protocol.ListResponse(labels=tuple(labels))
            else:
                raise MalformedPayload(
                    f"{type(msg).__name__} is not a client request"
                )
        except CloudVaultError as exc:
            return _DispatchResult(
                reply=protocol.ErrorFrame(code=exc.code, text=str(exc)),
                client_public_key=client_key,
            )
        return _DispatchResult(reply=reply, client_public_key=client_key)

    def handle_frame(self, frame: protocol.Frame) -> protocol.Frame:
        sealed = frame.tag == protocol.SEALED_TAG
        if sealed:
            try:
                msg = protocol.recv_sealed(frame, self.keypair.private)
            except CloudVaultError as exc:
                return protocol.send_plain(
                    protocol.ErrorFrame(code=exc.code, text=str(exc))
                )
        elif self.config.sabotage_accept_plain:
            try:
                msg = protocol.recv_plain(frame)
            except CloudVaultError as exc:
                return protocol.send_plain(
                    protocol.ErrorFrame(code=exc.code, text=str(exc))
                )
        else:
            return protocol.send_plain(
                protocol.ErrorFrame(
                    code="MALFORMED_PAYLOAD", text="client traffic must be sealed"
                )
            )
        result = self.dispatch(msg)
        if sealed and result.client_public_key is not None:
            return protocol.send_sealed(result.reply, result.client_public_key)
        return protocol.send_plain(result.reply)


def serve(config: SystemConfig):
    service = SystemService(config)
    frame_server = netutil.start_frame_server(
        config.host, config.port, service.handle_frame
    )
    admin_server = netutil.start_admin_server(
        config.admin_host, config.admin_port, service.dump_tables
    )
    return service, frame_server, admin_server


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(description="cloudvault system server")
    parser.add_argument("--config", required=True, help="JSON config path")
    args = parser.parse_args(argv)

    config = SystemConfig.from_file(args.config)
    _, frame_server, admin_server = serve(config)

    stop = threading.Event()
    signal.signal(signal.SIGTERM, lambda *_: stop.set())
    signal.signal(signal.SIGINT, lambda *_: stop.set())
    print(f"system server on {config.host}:{config.port}", flush=True)
    stop.wait()
    frame_server.shutdown()
    admin_server.shutdown()
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
