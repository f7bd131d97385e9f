"""Command-line client: keygen, register, login, logout, upload, download, list.

Every request/response exchange is a single sealed round trip; the private
key, one-time passwords, and session tokens never appear in command output.
The session token lives in a mode-0600 cache file until logout or expiry.
"""

import argparse
import getpass
import json
import os
import socket
import sys

from . import crypto_core, mailbox as mailbox_mod, protocol
from .crypto_core import RsaKeyPair
from .errors import (
    CloudVaultError,
    ConnectionFailure,
    InvalidSession,
    IoFailure,
    MalformedPayload,
    error_for_code,
)

CONFIG_ENV_VAR = "CLOUDVAULT_CONFIG"


class ClientConfig:
    """Client-side settings: where the system server is, which public key it
    presents (trust-on-config), and where this user's keypair lives."""

    def __init__(
        self,
        system_host: str,
        system_port: int,
        system_public_key,
        keypair_path: str,
        mailbox_path: str = "",
        token_path: str = "",
        sabotage_plaintext_channel: bool = False,
    ):
        self.system_host = system_host
        self.system_port = system_port
        self.system_public_key = (
            int(system_public_key["n"]),
            int(system_public_key["e"]),
        )
        self.keypair_path = keypair_path
        self.mailbox_path = mailbox_path
        self.token_path = token_path or keypair_path + ".session"
        self.sabotage_plaintext_channel = sabotage_plaintext_channel

    @classmethod
    def from_file(cls, path: str) -> "ClientConfig":
        with open(path, encoding="utf-8") as fh:
            return cls(**json.load(fh))


def write_keypair(path: str, pair: RsaKeyPair) -> None:
    data = json.dumps({"n": str(pair.n), "e": str(pair.e), "d": str(pair.d)})
    try:
        fd = os.open(path, os.O_WRONLY | os.O_CREAT | os.O_TRUNC, 0o600)
        with os.fdopen(fd, "w", encoding="ascii") as fh:
            fh.write(data)
    except OSError as exc:
        raise IoFailure(str(exc)) from exc


def read_keypair(path: str) -> RsaKeyPair:
    try:
        with open(path, encoding="utf-8") as fh:
            obj = json.load(fh)
    except OSError as exc:
        raise IoFailure(str(exc)) from exc
    return RsaKeyPair(n=int(obj["n"]), e=int(obj["e"]), d=int(obj["d"]))


class ClientSession:
    """Library form of the client; the CLI verbs are thin wrappers.

    The connection stays open across exchanges (one request/response per
    turn); a stale socket is replaced transparently as long as the request
    was never written, so a completed operation is never resent.
    """

    def __init__(self, config: ClientConfig):
        self.config = config
        self._keypair = None
        self._sock = None

    @property
    def keypair(self) -> RsaKeyPair:
        if self._keypair is None:
            self._keypair = read_keypair(self.config.keypair_path)
        return self._keypair

    def close(self) -> None:
        if self._sock is not None:
            try:
                self._sock.close()
            except OSError:
                pass
            self._sock = None

    def __enter__(self):
        return self

    def __exit__(self, *exc_info):
        self.close()

    # -- transport ---------------------------------------------------------

    def _connect(self) -> socket.socket:
        try:
            return socket.create_connection(
                (self.config.system_host, self.config.system_port), timeout=60.0
            )
        except OSError as exc:
            raise ConnectionFailure(
                f"{self.config.system_host}:{self.config.system_port}: {exc}"
            ) from exc

    def _round_trip(self, request: protocol.Frame) -> protocol.Frame:
        while True:
            reused = self._sock is not None
            if not reused:
                self._sock = self._connect()
            try:
                protocol.write_frame(self._sock, request)
                frame = protocol.read_frame(self._sock)
            except (OSError, CloudVaultError) as exc:
                self.close()
                if reused:
                    continue  # stale keep-alive socket; server never saw it
                raise ConnectionFailure(f"exchange failed: {exc}") from exc
            if frame is None:
                self.close()
                if reused:
                    continue
                raise ConnectionFailure("server closed the connection without replying")
            return frame

    def _exchange(self, msg):
        """One sealed request, one sealed (or plain error) response."""
        if self.config.sabotage_plaintext_channel:
            request = protocol.send_plain(msg)  # mis-build for auditor self-tests
        else:
            request = protocol.send_sealed(msg, self.config.system_public_key)
        frame = self._round_trip(request)
        if frame.tag == protocol.SEALED_TAG:
            reply = protocol.recv_sealed(frame, self.keypair.private)
        else:
            reply = protocol.recv_plain(frame)
        if isinstance(reply, protocol.ErrorFrame):
            raise error_for_code(reply.code, reply.text)
        return reply

    def _expect(self, reply, cls):
        if not isinstance(reply, cls):
            raise MalformedPayload(
                f"expected {cls.__name__}, got {type(reply).__name__}"
            )
        return reply

    # -- session token cache -------------------------------------------------

    def _store_token(self, token: str) -> None:
        fd = os.open(
            self.config.token_path, os.O_WRONLY | os.O_CREAT | os.O_TRUNC, 0o600
        )
        with os.fdopen(fd, "w", encoding="ascii") as fh:
            fh.write(token)

    def _load_token(self) -> str:
        try:
            with open(self.config.token_path, encoding="ascii") as fh:
                token = fh.read().strip()
        except FileNotFoundError:
            raise InvalidSession("not logged in") from None
        if not token:
            raise InvalidSession("not logged in")
        return token

    def clear_token(self) -> None:
        try:
            os.unlink(self.config.token_path)
        except FileNotFoundError:
            pass

    # -- verbs ----------------------------------------------------------------

    def register(self, username: str, mail_address: str) -> None:
        reply = self._exchange(
            protocol.Register(
                username=username,
                mail_address=mail_address,
                client_public_key=self.keypair.public,
            )
        )
        self._expect(reply, protocol.LoginResponse)

    def login(self, username: str, otp: str = None) -> None:
        if otp is None:
            if not self.config.mailbox_path:
                raise MalformedPayload("no OTP given and no mailbox configured")
            otp = mailbox_mod.read_latest_otp(self.config.mailbox_path)
        reply = self._expect(
            self._exchange(protocol.LoginRequest(username=username, otp=otp)),
            protocol.LoginResponse,
        )
        self._store_token(reply.session_token)

    def upload(self, label: str, data: bytes) -> None:
        token = self._load_token()
        reply = self._exchange(
            protocol.UploadRequest(session_token=token, label=label, file_bytes=data)
        )
        self._expect(reply, protocol.UploadAck)

    def download(self, label: str) -> bytes:
        token = self._load_token()
        reply = self._expect(
            self._exchange(
                protocol.DownloadRequest(session_token=token, label=label)
            ),
            protocol.FilePayload,
        )
        if reply.label != label:
            raise MalformedPayload(f"server answered for label {reply.label!r}")
        return reply.file_bytes

    def list_labels(self) -> list[str]:
        token = self._load_token()
        reply = self._expect(
            self._exchange(protocol.ListRequest(session_token=token)),
            protocol.ListResponse,
        )
        return list(reply.labels)


# ---------------------------------------------------------------------------
# CLI


def _load_config(args) -> ClientConfig:
    path = args.config or os.environ.get(CONFIG_ENV_VAR)
    if not path:
        raise IoFailure(f"no --config given and {CONFIG_ENV_VAR} unset")
    return ClientConfig.from_file(path)


def _cmd_keygen(args) -> int:
    config = _load_config(args)
    path = args.out or config.keypair_path
    if os.path.exists(path) and not args.force:
        raise IoFailure(f"{path} exists; pass --force to overwrite")
    pair = crypto_core.rsa_generate(args.bits)
    for _ in range(10):  # round-trip self-test before anything touches disk
        block = int.from_bytes(os.urandom(pair.bits // 8 - 1), "big") % pair.n
        if crypto_core.rsa_decrypt_block(
            crypto_core.rsa_encrypt_block(block, pair.public), pair.private
        ) != block:
            raise IoFailure("generated keypair failed its self-test")
    write_keypair(path, pair)
    print(f"wrote {args.bits}-bit keypair to {path}")
    print(json.dumps({"n": str(pair.n), "e": str(pair.e)}))
    return 0


def _cmd_register(args) -> int:
    session = ClientSession(_load_config(args))
    session.register(args.username, args.mail_address)
    print(f"registered {args.username}; check the mail account for the first password")
    return 0


def _cmd_login(args) -> int:
    config = _load_config(args)
    session = ClientSession(config)
    otp = args.otp
    if otp is None and not config.mailbox_path:
        otp = getpass.getpass("one-time password: ")
    session.login(args.username, otp)
    print("logged in; a fresh one-time password is in your mail account")
    return 0


def _cmd_logout(args) -> int:
    ClientSession(_load_config(args)).clear_token()
    print("logged out")
    return 0


def _cmd_upload(args) -> int:
    session = ClientSession(_load_config(args))
    try:
        with open(args.local_path, "rb") as fh:
            data = fh.read()
    except OSError as exc:
        raise IoFailure(str(exc)) from exc
    session.upload(args.label, data)
    print(f"uploaded {args.label} ({len(data)} bytes)")
    return 0


def _cmd_download(args) -> int:
    session = ClientSession(_load_config(args))
    data = session.download(args.label)
    try:
        with open(args.local_path, "wb") as fh:
            fh.write(data)
    except OSError as exc:
        raise IoFailure(str(exc)) from exc
    print(f"downloaded {args.label} ({len(data)} bytes)")
    return 0


def _cmd_list(args) -> int:
    session = ClientSession(_load_config(args))
    for label in session.list_labels():
        print(label)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="cloudvault", description="secure file storage client"
    )
    parser.add_argument("--config", help=f"config path (or ${CONFIG_ENV_VAR})")
    parser.add_argument("--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("keygen", help="generate an RSA keypair")
    p.add_argument("--bits", type=int, default=crypto_core.DEFAULT_RSA_BITS)
    p.add_argument("--force", action="store_true")
    p.add_argument("--out", help="keypair path (default: config keypair_path)")
    p.set_defaults(func=_cmd_keygen)

    p = sub.add_parser("register", help="create an account")
    p.add_argument("username")
    p.add_argument("mail_address")
    p.set_defaults(func=_cmd_register)

    p = sub.add_parser("login", help="open a session with a one-time password")
    p.add_argument("username")
    p.add_argument("--otp", help="password (default: prompt, or test mailbox)")
    p.set_defaults(func=_cmd_login)

    p = sub.add_parser("logout", help="drop the cached session token")
    p.set_defaults(func=_cmd_logout)

    p = sub.add_parser("upload", help="encrypt-and-store a local file")
    p.add_argument("label")
    p.add_argument("local_path")
    p.set_defaults(func=_cmd_upload)

    p = sub.add_parser("download", help="retrieve a stored file")
    p.add_argument("label")
    p.add_argument("local_path")
    p.set_defaults(func=_cmd_download)

    p = sub.add_parser("list", help="list stored labels")
    p.set_defaults(func=_cmd_list)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except CloudVaultError as exc:
        print(f"{exc.code}: {exc}", file=sys.stderr)
        if args.verbose:
            import traceback

            traceback.print_exc()
        return 1


if __name__ == "__main__":
    raise SystemExit(main())
