"""Cryptographic primitives: AES-128 file encryption, RSA envelopes, MD5
digests, and random key / one-time-password generation.

File bodies are encrypted with AES-128 in CBC mode under a fresh random key
and IV, padded with PKCS#7. Client/system traffic is sealed in a hybrid
envelope: a fresh 128-bit session key is RSA-wrapped (randomized PKCS#1 v1.5
style padding) and the message body rides under that session key with the
same AES-CBC scheme. Identity strings (usernames, one-time passwords) are
persisted only as MD5 digests of their exact UTF-8 bytes.

The AES block cipher and MD5 come from vetted implementations
(``cryptography``, ``hashlib``); both are pinned by known-answer tests. RSA
is integer-native here because callers need raw block operations, explicit
(n, e, d) components, and toy keypairs for tests.
"""

import hashlib
import secrets
import string
from dataclasses import dataclass

from cryptography.hazmat.primitives.ciphers import Cipher, algorithms, modes

from .errors import (
    BadPadding,
    DecryptionFailure,
    MalformedCiphertext,
    MessageOutOfRange,
    PrimeGenerationFailure,
    RandomSourceUnavailable,
)

BLOCK_SIZE = 16
KEY_BYTES = 16  # 128-bit file and session keys
DIGEST_BYTES = 16
OTP_LENGTH = 16
OTP_ALPHABET = string.ascii_uppercase + string.ascii_lowercase + string.digits

DEFAULT_RSA_BITS = 2048
MIN_RSA_BITS = 16  # toy keypairs for tests; envelopes need far more

# PKCS#1 v1.5: 00 02 <at least 8 nonzero pad bytes> 00 <key>
_MIN_PAD_OVERHEAD = 11


def _random_bytes(count: int) -> bytes:
    try:
        return secrets.token_bytes(count)
    except OSError as exc:  # pragma: no cover - no entropy source
        raise RandomSourceUnavailable(str(exc)) from exc


def generate_symmetric_key() -> bytes:
    """Fresh 16-byte AES key. Single-use discipline is the caller's job."""
    return _random_bytes(KEY_BYTES)


def generate_iv() -> bytes:
    return _random_bytes(BLOCK_SIZE)


def generate_otp() -> str:
    """16 random characters over [A-Za-z0-9]."""
    try:
        return "".join(secrets.choice(OTP_ALPHABET) for _ in range(OTP_LENGTH))
    except OSError as exc:  # pragma: no cover - no entropy source
        raise RandomSourceUnavailable(str(exc)) from exc


def md5_digest(data: bytes) -> bytes:
    """16-byte MD5 of the exact input bytes (no trimming, no salting).

    MD5 is retained deliberately for table hiding despite its known
    weaknesses; see the README security notes.
    """
    return hashlib.md5(data).digest()


@dataclass(frozen=True)
class Ciphertext:
    """AES-CBC output: the random IV plus the padded encrypted body."""

    iv: bytes
    body: bytes

    def __post_init__(self):
        if len(self.iv) != BLOCK_SIZE:
            raise MalformedCiphertext("IV must be exactly 16 bytes")
        if len(self.body) == 0 or len(self.body) % BLOCK_SIZE != 0:
            raise MalformedCiphertext("body must be a positive multiple of 16 bytes")

    def to_bytes(self) -> bytes:
        return self.iv + self.body

    @classmethod
    def from_bytes(cls, raw: bytes) -> "Ciphertext":
        if len(raw) < 2 * BLOCK_SIZE or (len(raw) - BLOCK_SIZE) % BLOCK_SIZE != 0:
            raise MalformedCiphertext(
                f"serialized ciphertext has invalid length {len(raw)}"
            )
        return cls(iv=raw[:BLOCK_SIZE], body=raw[BLOCK_SIZE:])


def _pkcs7_pad(data: bytes) -> bytes:
    pad = BLOCK_SIZE - (len(data) % BLOCK_SIZE)
    return data + bytes([pad]) * pad


def _pkcs7_unpad(data: bytes) -> bytes:
    if not data:
        raise BadPadding("empty plaintext buffer")
    pad = data[-1]
    if pad < 1 or pad > BLOCK_SIZE or len(data) < pad:
        raise BadPadding("invalid padding length")
    if data[-pad:] != bytes([pad]) * pad:
        raise BadPadding("inconsistent padding bytes")
    return data[:-pad]


def _check_key(key: bytes):
    if len(key) != KEY_BYTES:
        raise ValueError(f"key must be {KEY_BYTES} bytes, got {len(key)}")


def aes_encrypt_block(block: bytes, key: bytes) -> bytes:
    """Raw single-block AES-128 transform (no mode, no padding).

    Exists so the block core can be pinned against the standard
    known-answer vector independently of the CBC file path.
    """
    _check_key(key)
    if len(block) != BLOCK_SIZE:
        raise ValueError("block must be exactly 16 bytes")
    enc = Cipher(algorithms.AES(key), modes.ECB()).encryptor()
    return enc.update(block) + enc.finalize()


def encrypt_file(plaintext: bytes, key: bytes) -> Ciphertext:
    """AES-128-CBC with PKCS#7 padding and a fresh random IV."""
    _check_key(key)
    iv = generate_iv()
    enc = Cipher(algorithms.AES(key), modes.CBC(iv)).encryptor()
    body = enc.update(_pkcs7_pad(plaintext)) + enc.finalize()
    return Ciphertext(iv=iv, body=body)


def decrypt_file(ct: Ciphertext, key: bytes) -> bytes:
    """Invert encrypt_file. Raises BadPadding on a wrong key or mangled body."""
    _check_key(key)
    dec = Cipher(algorithms.AES(key), modes.CBC(ct.iv)).decryptor()
    padded = dec.update(ct.body) + dec.finalize()
    return _pkcs7_unpad(padded)


def _cbc_decrypt_raw(iv: bytes, body: bytes, key: bytes) -> bytes:
    """CBC decrypt without padding checks; used by the leakage auditor to
    model an adversary who ignores padding errors."""
    dec = Cipher(algorithms.AES(key), modes.CBC(iv)).decryptor()
    return dec.update(body) + dec.finalize()


# ---------------------------------------------------------------------------
# RSA


def _is_probable_prime(n: int, rounds: int = 40) -> bool:
    if n < 2:
        return False
    for p in (2, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37):
        if n % p == 0:
            return n == p
    d = n - 1
    r = 0
    while d % 2 == 0:
        d //= 2
        r += 1
    for _ in range(rounds):
        a = secrets.randbelow(n - 3) + 2
        x = pow(a, d, n)
        if x == 1 or x == n - 1:
            continue
        for _ in range(r - 1):
            x = pow(x, 2, n)
            if x == n - 1:
                break
        else:
            return False
    return True


def _random_prime(bits: int) -> int:
    # Top two bits set so the product of two such primes has an exact width.
    if bits < 2:
        raise PrimeGenerationFailure(f"cannot generate a {bits}-bit prime")
    for _ in range(40 * bits):
        candidate = secrets.randbits(bits) | (1 << (bits - 1)) | 1
        if bits >= 3:
            candidate |= 1 << (bits - 2)
        if candidate.bit_length() != bits:
            continue
        if _is_probable_prime(candidate):
            return candidate
    raise PrimeGenerationFailure(f"no {bits}-bit prime found")


@dataclass(frozen=True)
class RsaKeyPair:
    """Integer RSA key: modulus n, public exponent e, private exponent d."""

    n: int
    e: int
    d: int

    @property
    def public(self) -> tuple[int, int]:
        return (self.n, self.e)

    @property
    def private(self) -> tuple[int, int]:
        return (self.n, self.d)

    @property
    def bits(self) -> int:
        return self.n.bit_length()

    @classmethod
    def from_primes(cls, p: int, q: int, e: int = 65537) -> "RsaKeyPair":
        if p == q:
            raise PrimeGenerationFailure("p and q must differ")
        phi = (p - 1) * (q - 1)
        try:
            d = pow(e, -1, phi)
        except ValueError as exc:
            raise PrimeGenerationFailure(f"e={e} not invertible mod phi") from exc
        return cls(n=p * q, e=e, d=d)


def rsa_generate(bits: int = DEFAULT_RSA_BITS, e: int = 65537) -> RsaKeyPair:
    """Generate a keypair whose modulus has exactly ``bits`` bits."""
    if bits < MIN_RSA_BITS:
        raise ValueError(f"modulus below {MIN_RSA_BITS} bits is not supported")
    p_bits = bits - bits // 2
    q_bits = bits // 2
    for _ in range(200):
        p = _random_prime(p_bits)
        q = _random_prime(q_bits)
        if p == q:
            continue
        phi = (p - 1) * (q - 1)
        if phi % e == 0 or (p * q).bit_length() != bits:
            continue
        try:
            return RsaKeyPair.from_primes(p, q, e)
        except PrimeGenerationFailure:
            continue
    raise PrimeGenerationFailure(f"could not build a {bits}-bit keypair")


def rsa_encrypt_block(m: int, pub: tuple[int, int]) -> int:
    n, e = pub
    if not 0 <= m < n:
        raise MessageOutOfRange(f"block {m} outside [0, n)")
    return pow(m, e, n)


def rsa_decrypt_block(c: int, priv: tuple[int, int]) -> int:
    n, d = priv
    if not 0 <= c < n:
        raise MessageOutOfRange(f"block {c} outside [0, n)")
    return pow(c, d, n)


def _modulus_bytes(n: int) -> int:
    return (n.bit_length() + 7) // 8


def _pkcs1_pad(data: bytes, k: int) -> bytes:
    """00 02 <random nonzero pad> 00 <data>, total k bytes."""
    pad_len = k - len(data) - 3
    pad = bytearray()
    while len(pad) < pad_len:
        chunk = _random_bytes(pad_len)
        pad.extend(b for b in chunk if b != 0)
    return b"\x00\x02" + bytes(pad[:pad_len]) + b"\x00" + data


def _pkcs1_unpad(block: bytes) -> bytes:
    if len(block) < _MIN_PAD_OVERHEAD or block[0] != 0 or block[1] != 2:
        raise DecryptionFailure("malformed envelope padding")
    sep = block.find(b"\x00", 2)
    if sep < 10:  # at least 8 pad bytes
        raise DecryptionFailure("malformed envelope padding")
    return block[sep + 1 :]


@dataclass(frozen=True)
class Envelope:
    """Sealed client/system message: RSA-wrapped session key + AES payload."""

    wrapped_key: bytes
    payload: Ciphertext


def seal_envelope(msg: bytes, pub: tuple[int, int]) -> Envelope:
    """Seal ``msg`` to the holder of ``pub``'s private half.

    The session key is fresh per call and its RSA block carries random
    padding, so sealing the same message twice never repeats bytes.
    """
    n, _ = pub
    k = _modulus_bytes(n)
    if k < KEY_BYTES + _MIN_PAD_OVERHEAD:
        raise MessageOutOfRange(
            f"modulus of {k} bytes too small to wrap a {KEY_BYTES}-byte key"
        )
    session_key = generate_symmetric_key()
    payload = encrypt_file(msg, session_key)
    m = int.from_bytes(_pkcs1_pad(session_key, k), "big")
    wrapped = rsa_encrypt_block(m, pub).to_bytes(k, "big")
    return Envelope(wrapped_key=wrapped, payload=payload)


def open_envelope(env: Envelope, priv: tuple[int, int]) -> bytes:
    """Recover the sealed message; DecryptionFailure on a mismatched key."""
    n, _ = priv
    k = _modulus_bytes(n)
    if len(env.wrapped_key) != k:
        raise DecryptionFailure(
            f"wrapped key is {len(env.wrapped_key)} bytes, expected {k}"
        )
    try:
        c = int.from_bytes(env.wrapped_key, "big")
        block = rsa_decrypt_block(c, priv).to_bytes(k, "big")
    except (MessageOutOfRange, OverflowError) as exc:
        raise DecryptionFailure(str(exc)) from exc
    session_key = _pkcs1_unpad(block)
    if len(session_key) != KEY_BYTES:
        raise DecryptionFailure("recovered session key has wrong length")
    try:
        return decrypt_file(env.payload, session_key)
    except BadPadding as exc:
        raise DecryptionFailure("payload decryption failed") from exc
