import hashlib
import os
import time

import pytest

from cloudvault import crypto_core, protocol
from cloudvault.crypto_core import md5_digest
from cloudvault.errors import (
    AuthFailed,
    DuplicateLabel,
    DuplicateUser,
    FileTooLarge,
    IntegrityFailure,
    InvalidSession,
    MailDeliveryFailure,
    MalformedPayload,
    NoSuchLabel,
    StorageUnavailable,
)
from cloudvault.system_server import StorageClient


class FailingMailbox:
    def deliver(self, address, body):
        raise MailDeliveryFailure("smtp down")


class SimulatedCrash(RuntimeError):
    pass


# ---------------------------------------------------------------------
# registration

def test_register_mails_one_otp_and_stores_digests(local_stack, client_keypair):
    stack = local_stack()
    stack.service.register("alice", "a@example.test", client_keypair.public)
    mails = stack.mail.messages("a@example.test")
    assert len(mails) == 1
    assert len(mails[0]) == 16
    account = stack.service.accounts[md5_digest(b"alice")]
    assert account.otp_digest == md5_digest(mails[0].encode())
    table = open(os.path.join(stack.config.data_dir, "accounts.tsv"), "rb").read()
    assert b"alice" not in table
    assert mails[0].encode() not in table
    assert md5_digest(b"alice").hex().encode() in table


def test_register_twice_fails(local_stack, client_keypair):
    stack = local_stack()
    stack.service.register("alice", "a@example.test", client_keypair.public)
    with pytest.raises(DuplicateUser):
        stack.service.register("alice", "other@example.test", client_keypair.public)


def test_usernames_are_case_sensitive(local_stack, client_keypair):
    stack = local_stack()
    stack.service.register("Alice", "a1@example.test", client_keypair.public)
    stack.service.register("alice", "a2@example.test", client_keypair.public)
    # Independent digest check: the two accounts sit under different md5 rows.
    assert hashlib.md5(b"Alice").digest() != hashlib.md5(b"alice").digest()
    assert len(stack.service.accounts) == 2


def test_failed_mail_rolls_back_registration(local_stack, client_keypair):
    stack = local_stack()
    stack.service.mail = FailingMailbox()
    with pytest.raises(MailDeliveryFailure):
        stack.service.register("alice", "a@example.test", client_keypair.public)
    assert stack.service.accounts == {}
    assert not os.path.exists(os.path.join(stack.config.data_dir, "accounts.tsv"))


# ---------------------------------------------------------------------
# login and OTP rotation

def test_login_rotates_the_password(local_stack, client_keypair):
    stack = local_stack()
    stack.service.register("alice", "a@example.test", client_keypair.public)
    first_otp = stack.mail.latest("a@example.test")
    token = stack.service.login("alice", first_otp)
    assert len(token) == 32
    mails = stack.mail.messages("a@example.test")
    assert len(mails) == 2 and mails[1] != first_otp


def test_replayed_otp_fails(local_stack, client_keypair):
    stack = local_stack()
    stack.service.register("alice", "a@example.test", client_keypair.public)
    otp = stack.mail.latest("a@example.test")
    stack.service.login("alice", otp)
    with pytest.raises(AuthFailed):
        stack.service.login("alice", otp)


def test_unknown_user_and_wrong_otp_fail_identically(local_stack, client_keypair):
    stack = local_stack()
    stack.service.register("alice", "a@example.test", client_keypair.public)
    with pytest.raises(AuthFailed) as wrong_otp:
        stack.service.login("alice", "A" * 16)
    with pytest.raises(AuthFailed) as unknown:
        stack.service.login("nobody", "A" * 16)
    assert str(wrong_otp.value) == str(unknown.value)


def test_otp_digest_history_never_validates_twice(local_stack, client_keypair):
    stack = local_stack()
    stack.service.register("alice", "a@example.test", client_keypair.public)
    digests = []
    for _ in range(4):
        otp = stack.mail.latest("a@example.test")
        stack.service.login("alice", otp)
        digests.append(stack.service.accounts[md5_digest(b"alice")].otp_digest)
        with pytest.raises(AuthFailed):
            stack.service.login("alice", otp)
    assert len(set(digests)) == 4


# ---------------------------------------------------------------------
# sessions

def test_sessions_expire(local_stack, client_keypair):
    stack = local_stack(session_ttl=0.05)
    token = stack.register_and_login("alice", "a@example.test", client_keypair)
    stack.service.upload(token, "one", b"data")
    time.sleep(0.1)
    with pytest.raises(InvalidSession):
        stack.service.upload(token, "two", b"data")


def test_bogus_token_rejected(local_stack):
    stack = local_stack()
    with pytest.raises(InvalidSession):
        stack.service.upload("ff" * 16, "doc", b"data")


def test_restart_invalidates_sessions(local_stack, client_keypair):
    stack = local_stack()
    token = stack.register_and_login("alice", "a@example.test", client_keypair)
    service = stack.reload()
    with pytest.raises(InvalidSession):
        service.list_labels(token)


# ---------------------------------------------------------------------
# upload / download

def test_upload_download_round_trip(local_stack, client_keypair):
    stack = local_stack()
    token = stack.register_and_login("alice", "a@example.test", client_keypair)
    payload = os.urandom(5000)
    stack.service.upload(token, "doc", payload)
    assert stack.service.download(token, "doc") == payload


def test_every_upload_uses_a_fresh_key(local_stack, client_keypair):
    stack = local_stack()
    token = stack.register_and_login("alice", "a@example.test", client_keypair)
    for i in range(8):
        stack.service.upload(token, f"doc-{i}", b"same content")
    keys = [record.key for record in stack.service.key_records.values()]
    assert len(set(keys)) == 8


def test_duplicate_label_rejected_cleanly(local_stack, client_keypair):
    stack = local_stack()
    token = stack.register_and_login("alice", "a@example.test", client_keypair)
    stack.service.upload(token, "doc", b"one")
    with pytest.raises(DuplicateLabel):
        stack.service.upload(token, "doc", b"two")
    assert stack.service.download(token, "doc") == b"one"


def test_same_label_different_users_is_fine(local_stack, client_keypair):
    stack = local_stack()
    token_a = stack.register_and_login("alice", "a@example.test", client_keypair)
    token_b = stack.register_and_login("bob", "b@example.test", client_keypair)
    stack.service.upload(token_a, "doc", b"alice bytes")
    stack.service.upload(token_b, "doc", b"bob bytes")
    assert stack.service.download(token_a, "doc") == b"alice bytes"
    assert stack.service.download(token_b, "doc") == b"bob bytes"


def test_empty_label_rejected(local_stack, client_keypair):
    stack = local_stack()
    token = stack.register_and_login("alice", "a@example.test", client_keypair)
    with pytest.raises(MalformedPayload):
        stack.service.upload(token, "", b"data")


def test_file_size_cap(local_stack, client_keypair):
    stack = local_stack(max_file_bytes=100)
    token = stack.register_and_login("alice", "a@example.test", client_keypair)
    with pytest.raises(FileTooLarge):
        stack.service.upload(token, "big", b"x" * 101)


def test_download_unknown_label(local_stack, client_keypair):
    stack = local_stack()
    token = stack.register_and_login("alice", "a@example.test", client_keypair)
    with pytest.raises(NoSuchLabel):
        stack.service.download(token, "ghost")


def test_labels_survive_awkward_characters(local_stack, client_keypair):
    stack = local_stack()
    token = stack.register_and_login("alice", "a@example.test", client_keypair)
    label = "we\tird\nname éü%"
    stack.service.upload(token, label, b"data")
    service = stack.reload()
    token2 = service.login("alice", stack.mail.latest("a@example.test"))
    assert service.list_labels(token2) == [label]
    assert service.download(token2, label) == b"data"


def test_corrupted_blob_fails_integrity(local_stack, client_keypair):
    stack = local_stack()
    token = stack.register_and_login("alice", "a@example.test", client_keypair)
    stack.service.upload(token, "doc", b"precious bytes")
    record = next(iter(stack.service.key_records.values()))
    storage = stack.storages[0]
    blob_path = os.path.join(
        storage.config.data_dir, storage.records[record.file_number].path
    )
    blob = bytearray(open(blob_path, "rb").read())
    blob[-1] ^= 0x01
    open(blob_path, "wb").write(bytes(blob))
    with pytest.raises(IntegrityFailure):
        stack.service.download(token, "doc")


def test_storage_outage_persists_no_key_record(local_stack, client_keypair):
    stack = local_stack()
    token = stack.register_and_login("alice", "a@example.test", client_keypair)

    def dead_transport(msg):
        raise StorageUnavailable("cable cut")

    stack.service.storage_clients = [StorageClient("s1", dead_transport)]
    with pytest.raises(StorageUnavailable):
        stack.service.upload(token, "doc", b"data")
    assert stack.service.key_records == {}
    assert not os.path.exists(os.path.join(stack.config.data_dir, "keys.tsv"))


def test_uploaded_bytes_never_reach_system_persistence(local_stack, client_keypair):
    stack = local_stack()
    token = stack.register_and_login("alice", "a@example.test", client_keypair)
    marker = b"NEEDLE-IN-THE-TABLES"
    stack.service.upload(token, "doc", marker * 20)
    for name, data in stack.service.dump_tables().items():
        assert marker not in data, name
        assert marker.hex().encode() not in data, name


def test_ciphertext_bodies_never_reach_system_persistence(local_stack, client_keypair):
    # The system server keeps keys and metadata; blob bytes live on storage only.
    stack = local_stack()
    token = stack.register_and_login("alice", "a@example.test", client_keypair)
    stack.service.upload(token, "doc", os.urandom(600))
    record = next(iter(stack.service.key_records.values()))
    blob = stack.storages[0].fetch_blob(record.user_digest, record.file_number)
    sample = blob[16:48]  # a slice of the ciphertext body
    for name, data in stack.service.dump_tables().items():
        assert sample not in data, name
        assert sample.hex().encode() not in data, name


# ---------------------------------------------------------------------
# file numbering

def test_file_numbers_start_at_one(local_stack):
    stack = local_stack()
    assert stack.service.next_file_number() == 1


def test_file_numbers_follow_uploads(local_stack, client_keypair):
    stack = local_stack()
    token = stack.register_and_login("alice", "a@example.test", client_keypair)
    for i in range(3):
        stack.service.upload(token, f"doc-{i}", b"data")
    assert stack.service.next_file_number() == 4


def test_counter_survives_restart(local_stack, client_keypair):
    stack = local_stack()
    token = stack.register_and_login("alice", "a@example.test", client_keypair)
    for i in range(3):
        stack.service.upload(token, f"doc-{i}", b"data")
    service = stack.reload()
    assert service.next_file_number() == 4


def test_burned_numbers_are_never_reissued(local_stack, client_keypair):
    stack = local_stack()
    token = stack.register_and_login("alice", "a@example.test", client_keypair)
    stack.service.upload(token, "doc", b"data")

    def dead_transport(msg):
        raise StorageUnavailable("down")

    good_clients = stack.service.storage_clients
    stack.service.storage_clients = [StorageClient("s1", dead_transport)]
    with pytest.raises(StorageUnavailable):
        stack.service.upload(token, "lost", b"data")
    stack.service.storage_clients = good_clients
    stack.service.upload(token, "after", b"data")
    numbers = sorted(r.file_number for r in stack.service.key_records.values())
    assert numbers == [1, 3]  # 2 burned by the failed attempt


# ---------------------------------------------------------------------
# round-robin placement across storage servers

def test_round_robin_across_three_storages(local_stack, client_keypair):
    stack = local_stack(storage_count=3)
    token = stack.register_and_login("alice", "a@example.test", client_keypair)
    for i in range(6):
        stack.service.upload(token, f"doc-{i}", b"data")
    counts = {s.config.server_id: len(s.records) for s in stack.storages}
    assert counts == {"s1": 2, "s2": 2, "s3": 2}


# ---------------------------------------------------------------------
# concurrency

def test_concurrent_sessions_for_distinct_users(local_stack, client_keypair):
    import threading

    stack = local_stack(storage_count=2)
    tokens = {
        name: stack.register_and_login(name, f"{name}@example.test", client_keypair)
        for name in ("ann", "ben", "cas", "dee")
    }
    failures = []

    def work(name, token):
        try:
            for i in range(5):
                payload = f"{name}-{i}".encode() * 50
                stack.service.upload(token, f"doc-{i}", payload)
                assert stack.service.download(token, f"doc-{i}") == payload
        except Exception as exc:  # surface into the main thread
            failures.append((name, exc))

    threads = [
        threading.Thread(target=work, args=item) for item in tokens.items()
    ]
    for thread in threads:
        thread.start()
    for thread in threads:
        thread.join()
    assert failures == []
    assert len(stack.service.key_records) == 20
    keys = [record.key for record in stack.service.key_records.values()]
    assert len(set(keys)) == 20


def test_concurrent_same_label_has_one_winner(local_stack, client_keypair):
    import threading

    stack = local_stack()
    token = stack.register_and_login("race", "race@example.test", client_keypair)
    barrier = threading.Barrier(2)
    outcomes = []

    def attempt(payload):
        barrier.wait()
        try:
            stack.service.upload(token, "contested", payload)
            outcomes.append(("ok", payload))
        except DuplicateLabel:
            outcomes.append(("duplicate", payload))

    threads = [
        threading.Thread(target=attempt, args=(payload,))
        for payload in (b"first-writer", b"second-writer")
    ]
    for thread in threads:
        thread.start()
    for thread in threads:
        thread.join()
    assert sorted(result for result, _ in outcomes) == ["duplicate", "ok"]
    winner = next(payload for result, payload in outcomes if result == "ok")
    assert stack.service.download(token, "contested") == winner


# ---------------------------------------------------------------------
# crash consistency (fault injection between the two writes)

def test_crash_between_store_and_key_write(local_stack, client_keypair):
    stack = local_stack()
    token = stack.register_and_login("alice", "a@example.test", client_keypair)

    def crash():
        raise SimulatedCrash()

    stack.service.after_blob_store = crash
    with pytest.raises(SimulatedCrash):
        stack.service.upload(token, "doc", b"data")
    stack.service.after_blob_store = None

    # No key record in memory or on disk; the blob may exist as an orphan.
    assert stack.service.key_records == {}
    assert not os.path.exists(os.path.join(stack.config.data_dir, "keys.tsv"))
    service = stack.reload()
    assert service.key_records == {}
    # Every surviving key record must reference an acknowledged blob.
    for record in service.key_records.values():
        stack.storages[0].fetch_blob(record.user_digest, record.file_number)
    # The label is free for a clean retry.
    token = service.login("alice", stack.mail.latest("a@example.test"))
    service.upload(token, "doc", b"data")
    assert service.download(token, "doc") == b"data"


# ---------------------------------------------------------------------
# audit snapshot

def test_dump_contains_keys_but_no_identities(local_stack, client_keypair):
    stack = local_stack()
    token = stack.register_and_login("alice", "a@example.test", client_keypair)
    stack.service.upload(token, "doc", b"file body")
    dump = stack.service.dump_tables()
    record = next(iter(stack.service.key_records.values()))
    assert record.key.hex().encode() in dump["keys.tsv"]
    assert md5_digest(b"alice").hex().encode() in dump["keys.tsv"]
    for data in dump.values():
        assert b"alice" not in data


# ---------------------------------------------------------------------
# protocol dispatch

def _sealed_exchange(stack, msg, keypair):
    frame = protocol.send_sealed(msg, stack.service.keypair.public)
    reply = stack.service.handle_frame(frame)
    if reply.tag == protocol.SEALED_TAG:
        return protocol.recv_sealed(reply, keypair.private)
    return protocol.recv_plain(reply)


def test_register_over_the_wire(local_stack, client_keypair):
    stack = local_stack()
    reply = _sealed_exchange(
        stack,
        protocol.Register(
            username="wire-user",
            mail_address="w@example.test",
            client_public_key=client_keypair.public,
        ),
        client_keypair,
    )
    assert reply == protocol.LoginResponse(session_token="", status="REGISTERED")
    assert stack.mail.messages("w@example.test")


def test_full_wire_flow(local_stack, client_keypair):
    stack = local_stack()
    _sealed_exchange(
        stack,
        protocol.Register(
            username="wire-user",
            mail_address="w@example.test",
            client_public_key=client_keypair.public,
        ),
        client_keypair,
    )
    otp = stack.mail.latest("w@example.test")
    login = _sealed_exchange(
        stack, protocol.LoginRequest(username="wire-user", otp=otp), client_keypair
    )
    assert login.status == "OK" and login.session_token
    token = login.session_token
    ack = _sealed_exchange(
        stack,
        protocol.UploadRequest(session_token=token, label="w.bin", file_bytes=b"abc"),
        client_keypair,
    )
    assert ack == protocol.UploadAck(label="w.bin", status="OK")
    payload = _sealed_exchange(
        stack,
        protocol.DownloadRequest(session_token=token, label="w.bin"),
        client_keypair,
    )
    assert payload == protocol.FilePayload(label="w.bin", file_bytes=b"abc")
    listing = _sealed_exchange(
        stack, protocol.ListRequest(session_token=token), client_keypair
    )
    assert listing == protocol.ListResponse(labels=("w.bin",))


def test_wire_errors_are_error_frames(local_stack, client_keypair):
    stack = local_stack()
    reply = _sealed_exchange(
        stack,
        protocol.LoginRequest(username="ghost", otp="A" * 16),
        client_keypair,
    )
    assert isinstance(reply, protocol.ErrorFrame)
    assert reply.code == "AUTH_FAILED"


def test_plain_frames_rejected_without_sabotage(local_stack):
    stack = local_stack()
    frame = protocol.send_plain(protocol.ListRequest(session_token="ab"))
    reply = protocol.recv_plain(stack.service.handle_frame(frame))
    assert isinstance(reply, protocol.ErrorFrame)
    assert reply.code == "MALFORMED_PAYLOAD"


def test_response_messages_rejected_as_requests(local_stack, client_keypair):
    stack = local_stack()
    reply = _sealed_exchange(
        stack, protocol.UploadAck(label="x", status="OK"), client_keypair
    )
    assert isinstance(reply, protocol.ErrorFrame)
    assert reply.code == "MALFORMED_PAYLOAD"
