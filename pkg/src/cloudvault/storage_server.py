"""Storage server: ciphertext blobs, placement slots, paths — and nothing else.

Rows are keyed by (md5 user digest, file number); the digest must match on
fetch, so a guessed file number alone never returns a blob. No message kind
arriving on this channel can carry a symmetric key, and none of the persisted
state ever holds one.
"""

import argparse
import json
import os
import signal
import threading
from dataclasses import dataclass

from . import netutil, protocol
from .errors import (
    CloudVaultError,
    DiskFailure,
    DuplicateFileNumber,
    MalformedPayload,
    NotFound,
)
from .placement import PlacementEntry, PlacementTable

PLACEMENT_FILE = "placement.tbl"
RECORDS_FILE = "records.tsv"
BLOBS_DIR = "blobs"


@dataclass(frozen=True)
class BlobRecord:
    user_digest: bytes
    file_number: int
    entry: PlacementEntry
    path: str  # relative to the data dir; derived from the position


@dataclass
class StorageConfig:
    server_id: str
    host: str
    port: int
    admin_port: int
    data_dir: str
    seed: int
    admin_host: str = "127.0.0.1"

    @classmethod
    def from_file(cls, path: str) -> "StorageConfig":
        with open(path, encoding="utf-8") as fh:
            return cls(**json.load(fh))


class StorageService:
    """The storage node's state machine, independent of any socket."""

    def __init__(self, config: StorageConfig):
        self.config = config
        self._lock = threading.RLock()
        os.makedirs(os.path.join(config.data_dir, BLOBS_DIR), exist_ok=True)
        self.table = self._load_table()
        self.records = self._load_records()

    def _path(self, name: str) -> str:
        return os.path.join(self.config.data_dir, name)

    def _load_table(self) -> PlacementTable:
        try:
            with open(self._path(PLACEMENT_FILE), encoding="utf-8") as fh:
                return PlacementTable.deserialize(fh.read())
        except FileNotFoundError:
            return PlacementTable(self.config.seed)

    def _load_records(self) -> dict[int, BlobRecord]:
        records = {}
        for line in netutil.read_lines(self._path(RECORDS_FILE)):
            digest_hex, number, position, offset, path = line.split("\t")
            records[int(number)] = BlobRecord(
                user_digest=bytes.fromhex(digest_hex),
                file_number=int(number),
                entry=PlacementEntry(position=int(position), offset=int(offset)),
                path=path,
            )
        return records

    def store_blob(
        self, user_digest: bytes, file_number: int, blob: bytes
    ) -> PlacementEntry:
        """Assign a slot, write the blob, persist the record.

        Write order is blob file, placement table, record row; a crash leaves
        at worst an unreachable blob, never a record without its bytes.
        """
        with self._lock:
            if file_number in self.records:
                raise DuplicateFileNumber(f"file number {file_number} already stored")
            entry = self.table.insert(file_number)
            rel_path = f"{BLOBS_DIR}/{entry.position}.bin"
            record = BlobRecord(
                user_digest=user_digest,
                file_number=file_number,
                entry=entry,
                path=rel_path,
            )
            try:
                netutil.write_atomic(self._path(rel_path), blob)
                netutil.write_atomic(
                    self._path(PLACEMENT_FILE), self.table.serialize().encode()
                )
                netutil.append_line(
                    self._path(RECORDS_FILE),
                    "\t".join(
                        (
                            user_digest.hex(),
                            str(file_number),
                            str(entry.position),
                            str(entry.offset),
                            rel_path,
                        )
                    ),
                )
            except OSError as exc:
                self.table.remove(file_number)
                raise DiskFailure(str(exc)) from exc
            self.records[file_number] = record
            return entry

    def fetch_blob(self, user_digest: bytes, file_number: int) -> bytes:
        """Blob bytes iff both the number and the digest match; the caller
        cannot tell a wrong digest from a missing file."""
        with self._lock:
            record = self.records.get(file_number)
            if record is None or record.user_digest != user_digest:
                raise NotFound("no blob for that user digest and file number")
            path = self._path(record.path)
        try:
            with open(path, "rb") as fh:
                return fh.read()
        except OSError as exc:
            raise DiskFailure(str(exc)) from exc

    def dump_tables(self) -> dict[str, bytes]:
        """Byte-faithful copy of everything persisted (audit channel)."""
        snapshot = {}
        with self._lock:
            for name in (PLACEMENT_FILE, RECORDS_FILE):
                try:
                    with open(self._path(name), "rb") as fh:
                        snapshot[name] = fh.read()
                except FileNotFoundError:
                    pass
            blobs_dir = self._path(BLOBS_DIR)
            for name in sorted(os.listdir(blobs_dir)):
                with open(os.path.join(blobs_dir, name), "rb") as fh:
                    snapshot[f"{BLOBS_DIR}/{name}"] = fh.read()
        return snapshot

    # -- protocol dispatch ----------------------------------------------------

    def handle_message(self, msg):
        try:
            if isinstance(msg, protocol.StoreBlob):
                entry = self.store_blob(msg.user_digest, msg.file_number, msg.blob)
                return protocol.UploadAck(
                    label=str(msg.file_number),
                    status=f"STORED {entry.position} {entry.offset}",
                )
            if isinstance(msg, protocol.FetchBlob):
                blob = self.fetch_blob(msg.user_digest, msg.file_number)
                return protocol.BlobPayload(blob=blob)
            raise MalformedPayload(
                f"{type(msg).__name__} is not valid on the storage channel"
            )
        except CloudVaultError as exc:
            return protocol.ErrorFrame(code=exc.code, text=str(exc))

    def handle_frame(self, frame: protocol.Frame) -> protocol.Frame:
        try:
            msg = protocol.recv_plain(frame)
        except CloudVaultError as exc:
            return protocol.send_plain(protocol.ErrorFrame(code=exc.code, text=str(exc)))
        return protocol.send_plain(self.handle_message(msg))


def serve(config: StorageConfig):
    service = StorageService(config)
    frame_server = netutil.start_frame_server(
        config.host, config.port, service.handle_frame
    )
    admin_server = netutil.start_admin_server(
        config.admin_host, config.admin_port, service.dump_tables
    )
    return service, frame_server, admin_server


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(description="cloudvault storage server")
    parser.add_argument("--config", required=True, help="JSON config path")
    args = parser.parse_args(argv)

    config = StorageConfig.from_file(args.config)
    _, frame_server, admin_server = serve(config)

    stop = threading.Event()
    signal.signal(signal.SIGTERM, lambda *_: stop.set())
    signal.signal(signal.SIGINT, lambda *_: stop.set())
    print(f"storage server {config.server_id} on {config.host}:{config.port}", flush=True)
    stop.wait()
    frame_server.shutdown()
    admin_server.shutdown()
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
