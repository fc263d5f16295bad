"""Append-only, content-addressed run persistence.

Layout of a run directory::

    run.json                 # run id, creation time, config hash
    records/<type>.jsonl     # one JSON record per line, per record type
    chain.idx                # hash chain over all records, in append order
    blobs/<2-hex>/<hash>.png # content-addressed image blobs
    lock                     # single-writer lock file

Records never contain timestamps so reruns with identical seeds are
byte-comparable. Each chain line carries the hash of its predecessor;
reopening validates the chain and truncates any corrupt tail.
"""

from __future__ import annotations

import fcntl
import json
import os
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Iterator, Optional

from .util import canonical_json, sha256_hex

GENESIS = "0" * 64

RECORD_TYPES = ("baseline", "hypothesis", "cluster", "refinement", "harvest", "metric", "batch")


class StoreError(RuntimeError):
    pass


class ConfigMismatch(StoreError):
    def __init__(self, stored: str, given: str):
        super().__init__(f"run config hash mismatch: stored {stored}, given {given}")
        self.stored = stored
        self.given = given


class LockHeld(StoreError):
    pass


class BlobCorrupt(StoreError):
    pass


# ---------------------------------------------------------------------------
# Blob store


class BlobStore:
    """Content-addressed PNG blob store; identical bytes are stored once."""

    def __init__(self, root: Path):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)

    def path_for(self, digest: str) -> Path:
        return self.root / digest[:2] / f"{digest}.png"

    def put(self, data: bytes) -> str:
        digest = sha256_hex(data)
        path = self.path_for(digest)
        if not path.exists():
            path.parent.mkdir(parents=True, exist_ok=True)
            tmp = path.with_suffix(".tmp")
            tmp.write_bytes(data)
            os.replace(tmp, path)
        return digest

    def get(self, digest: str) -> bytes:
        path = self.path_for(digest)
        if not path.exists():
            raise StoreError(f"missing blob {digest}")
        data = path.read_bytes()
        if sha256_hex(data) != digest:
            raise BlobCorrupt(f"blob {digest} fails hash verification")
        return data

    def __contains__(self, digest: str) -> bool:
        return self.path_for(digest).exists()


# ---------------------------------------------------------------------------
# Run manifest


def record_hash(prev: str, rtype: str, record: dict) -> str:
    return sha256_hex(prev.encode("ascii") + b"\n" + rtype.encode("ascii") + b"\n" + canonical_json(record))


@dataclass
class ChainEntry:
    seq: int
    rtype: str
    digest: str


@dataclass
class RunManifest:
    """Open handle on a run directory. Single writer, append-only."""

    root: Path
    run_id: str
    config_hash: str
    entries: list[ChainEntry] = field(default_factory=list)
    records: dict[str, list[dict]] = field(default_factory=dict)
    repair_report: Optional[str] = None
    _lock_fd: Optional[int] = None

    # -- opening ---------------------------------------------------------

    @classmethod
    def open(cls, root: str | Path, config: dict, readonly: bool = False) -> "RunManifest":
        root = Path(root)
        root.mkdir(parents=True, exist_ok=True)
        cfg_hash = sha256_hex(canonical_json(config))
        run_json = root / "run.json"
        if run_json.exists():
            meta = json.loads(run_json.read_text("utf-8"))
            if meta["config_hash"] != cfg_hash:
                raise ConfigMismatch(meta["config_hash"], cfg_hash)
            run_id = meta["run_id"]
        else:
            run_id = sha256_hex(canonical_json(config))[:12]
            meta = {
                "run_id": run_id,
                "created": datetime.now(timezone.utc).isoformat(),
                "config_hash": cfg_hash,
                "config": config,
            }
            run_json.write_text(json.dumps(meta, indent=2, sort_keys=True), "utf-8")
        (root / "records").mkdir(exist_ok=True)
        run = cls(root=root, run_id=run_id, config_hash=cfg_hash)
        if not readonly:
            run._acquire_lock()
        run._load()
        return run

    def _acquire_lock(self) -> None:
        fd = os.open(self.root / "lock", os.O_CREAT | os.O_RDWR)
        try:
            fcntl.flock(fd, fcntl.LOCK_EX | fcntl.LOCK_NB)
        except OSError:
            os.close(fd)
            raise LockHeld(f"run {self.run_id} is locked by another writer")
        os.write(fd, str(os.getpid()).encode())
        self._lock_fd = fd

    def close(self) -> None:
        if self._lock_fd is not None:
            fcntl.flock(self._lock_fd, fcntl.LOCK_UN)
            os.close(self._lock_fd)
            self._lock_fd = None

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    # -- chain validation / repair --------------------------------------

    def _load(self) -> None:
        chain_path = self.root / "chain.idx"
        raw_records: dict[str, list[str]] = {}
        for f in sorted((self.root / "records").glob("*.jsonl")):
            raw_records[f.stem] = f.read_text("utf-8").splitlines()
        consumed: dict[str, int] = {t: 0 for t in raw_records}
        entries: list[ChainEntry] = []
        records: dict[str, list[dict]] = {t: [] for t in raw_records}
        prev = GENESIS
        cut = None
        if chain_path.exists():
            for lineno, line in enumerate(chain_path.read_text("utf-8").splitlines(), 1):
                parts = line.split(" ")
                if len(parts) != 3:
                    cut = f"chain.idx:{lineno}: malformed line"
                    break
                seq_s, rtype, digest = parts
                try:
                    seq = int(seq_s)
                except ValueError:
                    cut = f"chain.idx:{lineno}: bad sequence number"
                    break
                idx = consumed.get(rtype, 0)
                lines = raw_records.get(rtype, [])
                if idx >= len(lines):
                    cut = f"chain.idx:{lineno}: record file {rtype}.jsonl is short"
                    break
                try:
                    record = json.loads(lines[idx])
                except json.JSONDecodeError:
                    cut = f"chain.idx:{lineno}: corrupt record in {rtype}.jsonl"
                    break
                if seq != len(entries) or record_hash(prev, rtype, record) != digest:
                    cut = f"chain.idx:{lineno}: hash chain broken"
                    break
                consumed[rtype] = idx + 1
                entries.append(ChainEntry(seq, rtype, digest))
                records.setdefault(rtype, []).append(record)
                prev = digest
        if cut is None:
            # a crash between the record write and the chain write leaves
            # an orphan record line; it was never committed, so drop it
            orphaned = sorted(
                t for t, lines in raw_records.items() if len(lines) > consumed.get(t, 0)
            )
            if orphaned:
                cut = f"orphan record lines past the chain head in: {', '.join(orphaned)}"
        self.entries = entries
        self.records = records
        if cut is not None and self._lock_fd is not None:
            self._truncate_to(consumed)
            self.repair_report = cut

    def _truncate_to(self, consumed: dict[str, int]) -> None:
        """Rewrite files down to the last valid chain prefix."""
        chain_path = self.root / "chain.idx"
        with open(chain_path, "w", encoding="utf-8") as f:
            for e in self.entries:
                f.write(f"{e.seq} {e.rtype} {e.digest}\n")
            f.flush()
            os.fsync(f.fileno())
        for rtype, n in consumed.items():
            path = self.root / "records" / f"{rtype}.jsonl"
            if not path.exists():
                continue
            lines = path.read_text("utf-8").splitlines()
            with open(path, "w", encoding="utf-8") as f:
                for line in lines[:n]:
                    f.write(line + "\n")
                f.flush()
                os.fsync(f.fileno())

    # -- append ----------------------------------------------------------

    def append(self, rtype: str, record: dict) -> int:
        """Durably append one record; returns its sequence number."""
        if self._lock_fd is None:
            raise StoreError("run opened read-only")
        prev = self.entries[-1].digest if self.entries else GENESIS
        digest = record_hash(prev, rtype, record)
        seq = len(self.entries)
        rec_path = self.root / "records" / f"{rtype}.jsonl"
        with open(rec_path, "a", encoding="utf-8") as f:
            f.write(json.dumps(record, sort_keys=True, separators=(",", ":"), ensure_ascii=False) + "\n")
            f.flush()
            os.fsync(f.fileno())
        with open(self.root / "chain.idx", "a", encoding="utf-8") as f:
            f.write(f"{seq} {rtype} {digest}\n")
            f.flush()
            os.fsync(f.fileno())
        self.entries.append(ChainEntry(seq, rtype, digest))
        self.records.setdefault(rtype, []).append(record)
        return seq

    # -- access ----------------------------------------------------------

    def of_type(self, rtype: str) -> list[dict]:
        return list(self.records.get(rtype, []))

    def find(self, rtype: str, **match) -> Optional[dict]:
        for rec in self.records.get(rtype, []):
            if all(rec.get(k) == v for k, v in match.items()):
                return rec
        return None

    def iter_all(self) -> Iterator[tuple[str, dict]]:
        counters: dict[str, int] = {}
        for e in self.entries:
            i = counters.get(e.rtype, 0)
            counters[e.rtype] = i + 1
            yield e.rtype, self.records[e.rtype][i]

    @property
    def head(self) -> str:
        return self.entries[-1].digest if self.entries else GENESIS

    @property
    def blobs(self) -> BlobStore:
        return BlobStore(self.root / "blobs")
