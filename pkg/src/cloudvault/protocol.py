"""Wire protocol for both channels.

Frame layout (normative): 1 tag byte, 4-byte big-endian payload length,
payload. The payload is a canonical JSON object — keys sorted, compact
separators, binary fields as lowercase hex — so equal messages produce
byte-identical frames on the plain channel.

Client/system traffic is sealed: the frame payload is an envelope over the
encoded inner frame. System/storage traffic is framed in the clear; every
file byte on that channel is already ciphertext, and no message kind that
could carry a symmetric key exists, so keys structurally cannot cross it.
"""

import json
import socket
import struct
from dataclasses import dataclass, fields

from . import crypto_core
from .errors import (
    MalformedPayload,
    TruncatedFrame,
    UnknownTag,
)

MAX_FRAME_LEN = 16 * 1024 * 1024
HEADER_LEN = 5
SEALED_TAG = 0x10


@dataclass(frozen=True)
class Frame:
    tag: int
    payload: bytes

    def to_bytes(self) -> bytes:
        if len(self.payload) > MAX_FRAME_LEN:
            raise MalformedPayload(f"payload of {len(self.payload)} bytes exceeds cap")
        return struct.pack(">BI", self.tag, len(self.payload)) + self.payload

    @classmethod
    def from_bytes(cls, data: bytes) -> "Frame":
        if len(data) < HEADER_LEN:
            raise TruncatedFrame(f"{len(data)} bytes, header needs {HEADER_LEN}")
        tag, length = struct.unpack(">BI", data[:HEADER_LEN])
        if length > MAX_FRAME_LEN:
            raise MalformedPayload(f"declared length {length} exceeds cap")
        if len(data) < HEADER_LEN + length:
            raise TruncatedFrame(f"payload truncated at {len(data) - HEADER_LEN} bytes")
        if len(data) > HEADER_LEN + length:
            raise MalformedPayload("trailing bytes after frame")
        return cls(tag=tag, payload=data[HEADER_LEN:])


# ---------------------------------------------------------------------------
# Message kinds

@dataclass(frozen=True)
class Register:
    username: str
    mail_address: str
    client_public_key: tuple  # (n, e)


@dataclass(frozen=True)
class LoginRequest:
    username: str
    otp: str


@dataclass(frozen=True)
class LoginResponse:
    session_token: str
    status: str


@dataclass(frozen=True)
class UploadRequest:
    session_token: str
    label: str
    file_bytes: bytes


@dataclass(frozen=True)
class UploadAck:
    label: str
    status: str


@dataclass(frozen=True)
class DownloadRequest:
    session_token: str
    label: str


@dataclass(frozen=True)
class FilePayload:
    label: str
    file_bytes: bytes


@dataclass(frozen=True)
class ListRequest:
    session_token: str


@dataclass(frozen=True)
class ListResponse:
    labels: tuple


@dataclass(frozen=True)
class StoreBlob:
    user_digest: bytes
    file_number: int
    blob: bytes


@dataclass(frozen=True)
class FetchBlob:
    user_digest: bytes
    file_number: int


@dataclass(frozen=True)
class BlobPayload:
    blob: bytes


@dataclass(frozen=True)
class ErrorFrame:
    code: str
    text: str


# Field codecs: python value <-> JSON value
_STR = "str"
_INT = "int"
_BYTES = "bytes"  # lowercase hex on the wire
_DIGEST = "digest"  # hex, exactly 16 bytes
_PUBKEY = "pubkey"  # {"e": dec-string, "n": dec-string}
_STRLIST = "strlist"

_SCHEMAS: dict[type, dict[str, str]] = {
    Register: {
        "username": _STR,
        "mail_address": _STR,
        "client_public_key": _PUBKEY,
    },
    LoginRequest: {"username": _STR, "otp": _STR},
    LoginResponse: {"session_token": _STR, "status": _STR},
    UploadRequest: {"session_token": _STR, "label": _STR, "file_bytes": _BYTES},
    UploadAck: {"label": _STR, "status": _STR},
    DownloadRequest: {"session_token": _STR, "label": _STR},
    FilePayload: {"label": _STR, "file_bytes": _BYTES},
    ListRequest: {"session_token": _STR},
    ListResponse: {"labels": _STRLIST},
    StoreBlob: {"user_digest": _DIGEST, "file_number": _INT, "blob": _BYTES},
    FetchBlob: {"user_digest": _DIGEST, "file_number": _INT},
    BlobPayload: {"blob": _BYTES},
    ErrorFrame: {"code": _STR, "text": _STR},
}

_TAG_BY_TYPE: dict[type, int] = {
    Register: 0x01,
    LoginRequest: 0x02,
    LoginResponse: 0x03,
    UploadRequest: 0x04,
    UploadAck: 0x05,
    DownloadRequest: 0x06,
    FilePayload: 0x07,
    ListRequest: 0x08,
    ListResponse: 0x09,
    StoreBlob: 0x0A,
    FetchBlob: 0x0B,
    BlobPayload: 0x0C,
    ErrorFrame: 0x0E,
}

_TYPE_BY_TAG = {tag: cls for cls, tag in _TAG_BY_TYPE.items()}

Message = (
    Register
    | LoginRequest
    | LoginResponse
    | UploadRequest
    | UploadAck
    | DownloadRequest
    | FilePayload
    | ListRequest
    | ListResponse
    | StoreBlob
    | FetchBlob
    | BlobPayload
    | ErrorFrame
)


def _encode_value(codec: str, value):
    if codec == _STR:
        if not isinstance(value, str):
            raise MalformedPayload(f"expected str, got {type(value).__name__}")
        return value
    if codec == _INT:
        if not isinstance(value, int) or isinstance(value, bool) or value < 0:
            raise MalformedPayload(f"expected non-negative int, got {value!r}")
        return value
    if codec in (_BYTES, _DIGEST):
        if not isinstance(value, (bytes, bytearray)):
            raise MalformedPayload(f"expected bytes, got {type(value).__name__}")
        if codec == _DIGEST and len(value) != crypto_core.DIGEST_BYTES:
            raise MalformedPayload(f"digest must be 16 bytes, got {len(value)}")
        return bytes(value).hex()
    if codec == _PUBKEY:
        n, e = value
        if not isinstance(n, int) or not isinstance(e, int) or n < 1 or e < 1:
            raise MalformedPayload("public key components must be positive ints")
        return {"e": str(e), "n": str(n)}
    if codec == _STRLIST:
        if not all(isinstance(item, str) for item in value):
            raise MalformedPayload("label list must contain only strings")
        return list(value)
    raise AssertionError(codec)


def _decode_value(codec: str, value):
    if codec == _STR:
        if not isinstance(value, str):
            raise MalformedPayload(f"expected str, got {type(value).__name__}")
        return value
    if codec == _INT:
        if not isinstance(value, int) or isinstance(value, bool) or value < 0:
            raise MalformedPayload(f"expected non-negative int, got {value!r}")
        return value
    if codec in (_BYTES, _DIGEST):
        if not isinstance(value, str):
            raise MalformedPayload("binary fields travel as hex strings")
        try:
            raw = bytes.fromhex(value)
        except ValueError as exc:
            raise MalformedPayload(f"invalid hex: {exc}") from exc
        if codec == _DIGEST and len(raw) != crypto_core.DIGEST_BYTES:
            raise MalformedPayload(f"digest must be 16 bytes, got {len(raw)}")
        return raw
    if codec == _PUBKEY:
        if not isinstance(value, dict) or set(value) != {"e", "n"}:
            raise MalformedPayload("public key must be an {e, n} object")
        try:
            return (int(value["n"]), int(value["e"]))
        except (TypeError, ValueError) as exc:
            raise MalformedPayload("public key components must be decimal") from exc
    if codec == _STRLIST:
        if not isinstance(value, list) or not all(
            isinstance(item, str) for item in value
        ):
            raise MalformedPayload("label list must contain only strings")
        return tuple(value)
    raise AssertionError(codec)


def tag_of(msg) -> int:
    try:
        return _TAG_BY_TYPE[type(msg)]
    except KeyError:
        raise UnknownTag(f"not a protocol message: {type(msg).__name__}") from None


def _payload_of(msg) -> bytes:
    schema = _SCHEMAS[type(msg)]
    obj = {
        name: _encode_value(codec, getattr(msg, name))
        for name, codec in schema.items()
    }
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("ascii")


def encode_frame(msg) -> bytes:
    """Canonical bytes for a message: equal messages, identical frames."""
    return Frame(tag=tag_of(msg), payload=_payload_of(msg)).to_bytes()


def _message_from_frame(frame: Frame):
    cls = _TYPE_BY_TAG.get(frame.tag)
    if cls is None:
        raise UnknownTag(f"tag 0x{frame.tag:02x} is not a known message kind")
    try:
        obj = json.loads(frame.payload.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise MalformedPayload(f"payload is not valid JSON: {exc}") from exc
    schema = _SCHEMAS[cls]
    if not isinstance(obj, dict) or set(obj) != set(schema):
        raise MalformedPayload(
            f"{cls.__name__} payload must have exactly fields {sorted(schema)}"
        )
    values = {name: _decode_value(codec, obj[name]) for name, codec in schema.items()}
    return cls(**values)


def decode_frame(data: bytes):
    """Inverse of encode_frame on complete frame bytes."""
    return _message_from_frame(Frame.from_bytes(data))


# ---------------------------------------------------------------------------
# Plain channel (system <-> storage): payload is already ciphertext

def send_plain(msg) -> Frame:
    return Frame(tag=tag_of(msg), payload=_payload_of(msg))


def recv_plain(frame: Frame):
    if frame.tag == SEALED_TAG:
        raise MalformedPayload("sealed frame on the plain channel")
    return _message_from_frame(frame)


# ---------------------------------------------------------------------------
# Sealed channel (client <-> system)

def _envelope_payload(env: crypto_core.Envelope) -> bytes:
    obj = {
        "payload": env.payload.to_bytes().hex(),
        "wrapped_key": env.wrapped_key.hex(),
    }
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("ascii")


def _envelope_from_payload(payload: bytes) -> crypto_core.Envelope:
    try:
        obj = json.loads(payload.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise MalformedPayload(f"envelope is not valid JSON: {exc}") from exc
    if not isinstance(obj, dict) or set(obj) != {"payload", "wrapped_key"}:
        raise MalformedPayload("envelope must have exactly payload and wrapped_key")
    try:
        wrapped = bytes.fromhex(obj["wrapped_key"])
        ct = crypto_core.Ciphertext.from_bytes(bytes.fromhex(obj["payload"]))
    except (TypeError, ValueError) as exc:
        raise MalformedPayload(f"invalid envelope encoding: {exc}") from exc
    return crypto_core.Envelope(wrapped_key=wrapped, payload=ct)


def send_sealed(msg, pub: tuple[int, int]) -> Frame:
    """Envelope the encoded message to ``pub``; fresh session key per call."""
    env = crypto_core.seal_envelope(encode_frame(msg), pub)
    return Frame(tag=SEALED_TAG, payload=_envelope_payload(env))


def recv_sealed(frame: Frame, priv: tuple[int, int]):
    if frame.tag != SEALED_TAG:
        raise MalformedPayload(f"expected a sealed frame, got tag 0x{frame.tag:02x}")
    env = _envelope_from_payload(frame.payload)
    return decode_frame(crypto_core.open_envelope(env, priv))


# ---------------------------------------------------------------------------
# Socket transport: one frame at a time

def read_frame(sock: socket.socket):
    """Next frame off the socket, or None on a clean EOF between frames."""
    header = _read_exact(sock, HEADER_LEN, allow_eof=True)
    if header is None:
        return None
    tag, length = struct.unpack(">BI", header)
    if length > MAX_FRAME_LEN:
        raise MalformedPayload(f"declared length {length} exceeds cap")
    payload = _read_exact(sock, length) if length else b""
    return Frame(tag=tag, payload=payload)


def write_frame(sock: socket.socket, frame: Frame) -> None:
    sock.sendall(frame.to_bytes())


def _read_exact(sock: socket.socket, count: int, allow_eof: bool = False):
    chunks = []
    remaining = count
    while remaining:
        chunk = sock.recv(min(remaining, 65536))
        if not chunk:
            if allow_eof and remaining == count:
                return None
            raise TruncatedFrame(f"peer closed with {remaining} bytes outstanding")
        chunks.append(chunk)
        remaining -= len(chunk)
    return b"".join(chunks)


def schema_field_inventory() -> dict[str, tuple[str, ...]]:
    """Message kind -> field names; lets tests freeze the full wire surface."""
    return {
        cls.__name__: tuple(f.name for f in fields(cls)) for cls in _SCHEMAS
    }
