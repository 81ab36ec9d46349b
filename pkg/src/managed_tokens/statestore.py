"""Persistent on-disk state surviving between scheduled runs.

Two tables: account -> UID mappings, and per-(service, node) consecutive
distribution-failure counters. Backed by a single sqlite database under
``{state_dir}/db/`` with an exclusive-writer flock, owner-only permissions,
and atomic single-record updates (sqlite's journal gives crash safety:
a reader after a crash sees either the old or the new record, never a torn
one).

``consecutive_failures`` counts *final* per-run outcomes: one scheduled run
contributes at most one success/failure per (service, node), after intra-run
retries are exhausted. ``notification_due`` gates stakeholder mail on that
counter and re-fires every further ``threshold`` failures so persistent
breakage keeps surfacing without per-run alarm noise.
"""

from __future__ import annotations

import fcntl
import os
import sqlite3
import threading
from dataclasses import dataclass
from typing import Optional

DB_FILENAME = "managed-tokens.sqlite"
LOCK_FILENAME = "writer.lock"
DEFAULT_NOTIFICATION_THRESHOLD = 3


class StoreError(Exception):
    """Base class for state-store failures."""


class LockHeld(StoreError):
    """Another process (or handle) already owns the store for writing."""


class CorruptStore(StoreError):
    """The database file cannot be read; message includes a recovery hint."""


@dataclass(frozen=True)
class UidRecord:
    account: str
    uid: int
    fetched_at: float


@dataclass(frozen=True)
class FailureCounter:
    service: str
    node: str
    consecutive_failures: int
    last_attempt_at: float
    last_notified_count: int


def notification_due(counter: FailureCounter, threshold: int = DEFAULT_NOTIFICATION_THRESHOLD) -> bool:
    """True when the counter has crossed the next notification point.

    Fires at ``threshold`` consecutive failures and again every further
    ``threshold`` failures beyond the last acknowledged notification. The
    caller must acknowledge with :meth:`Store.mark_notified` after sending.
    """
    if threshold < 1:
        raise ValueError("threshold must be >= 1")
    return (
        counter.consecutive_failures >= threshold
        and counter.consecutive_failures - counter.last_notified_count >= threshold
    )


class Store:
    """Open handle on the state database.

    One exclusive writer per state_dir, enforced with a non-blocking flock.
    Within the process the handle may be shared across worker threads; all
    access is serialized on an internal mutex, so a thread always sees its
    own completed writes.
    """

    def __init__(self, state_dir: str):
        db_dir = os.path.join(state_dir, "db")
        os.makedirs(db_dir, mode=0o700, exist_ok=True)
        os.chmod(db_dir, 0o700)

        self._lock_path = os.path.join(db_dir, LOCK_FILENAME)
        self._lock_fd = os.open(self._lock_path, os.O_RDWR | os.O_CREAT, 0o600)
        try:
            fcntl.flock(self._lock_fd, fcntl.LOCK_EX | fcntl.LOCK_NB)
        except OSError:
            os.close(self._lock_fd)
            raise LockHeld(f"state store at {db_dir} is locked by another process") from None

        self._db_path = os.path.join(db_dir, DB_FILENAME)
        # Pre-create with owner-only mode so sqlite's journal/WAL side files
        # inherit it instead of the umask default.
        fd = os.open(self._db_path, os.O_RDWR | os.O_CREAT, 0o600)
        os.close(fd)
        self._mutex = threading.Lock()
        try:
            self._conn = sqlite3.connect(self._db_path, check_same_thread=False)
            self._conn.execute("PRAGMA journal_mode=WAL")
            self._conn.execute(
                "CREATE TABLE IF NOT EXISTS uids ("
                " account TEXT PRIMARY KEY,"
                " uid INTEGER NOT NULL CHECK (uid >= 0),"
                " fetched_at REAL NOT NULL)"
            )
            self._conn.execute(
                "CREATE TABLE IF NOT EXISTS failure_counters ("
                " service TEXT NOT NULL,"
                " node TEXT NOT NULL,"
                " consecutive_failures INTEGER NOT NULL,"
                " last_attempt_at REAL NOT NULL,"
                " last_notified_count INTEGER NOT NULL,"
                " PRIMARY KEY (service, node))"
            )
            self._conn.commit()
        except sqlite3.DatabaseError as exc:
            self._release_lock()
            raise CorruptStore(
                f"state database {self._db_path} is unreadable ({exc}); move it aside "
                "and rerun the UID refresh to rebuild"
            ) from exc
        os.chmod(self._db_path, 0o600)

    # -- lifecycle ---------------------------------------------------------

    def close(self) -> None:
        with self._mutex:
            if self._conn is not None:
                self._conn.close()
                self._conn = None  # type: ignore[assignment]
        self._release_lock()

    def _release_lock(self) -> None:
        if getattr(self, "_lock_fd", None) is not None:
            try:
                fcntl.flock(self._lock_fd, fcntl.LOCK_UN)
            finally:
                os.close(self._lock_fd)
            self._lock_fd = None  # type: ignore[assignment]

    def __enter__(self) -> "Store":
        return self

    def __exit__(self, *exc_info: object) -> None:
        self.close()

    # -- UID records ---------------------------------------------------------

    def upsert_uid(self, account: str, uid: int, now: float) -> None:
        if uid < 0:
            raise ValueError("uid must be >= 0")
        with self._mutex:
            self._conn.execute(
                "INSERT INTO uids (account, uid, fetched_at) VALUES (?, ?, ?)"
                " ON CONFLICT(account) DO UPDATE SET uid=excluded.uid,"
                " fetched_at=excluded.fetched_at",
                (account, uid, now),
            )
            self._conn.commit()

    def lookup_uid(self, account: str) -> Optional[int]:
        with self._mutex:
            row = self._conn.execute(
                "SELECT uid FROM uids WHERE account = ?", (account,)
            ).fetchone()
        return None if row is None else int(row[0])

    def uid_records(self) -> list[UidRecord]:
        with self._mutex:
            rows = self._conn.execute(
                "SELECT account, uid, fetched_at FROM uids ORDER BY account"
            ).fetchall()
        return [UidRecord(account=r[0], uid=int(r[1]), fetched_at=float(r[2])) for r in rows]

    def delete_uid(self, account: str) -> None:
        with self._mutex:
            self._conn.execute("DELETE FROM uids WHERE account = ?", (account,))
            self._conn.commit()

    # -- failure counters ----------------------------------------------------

    def record_push_outcome(self, service: str, node: str, success: bool,
                            now: float) -> FailureCounter:
        """Fold one final per-run distribution outcome into the counter.

        Success resets both the streak and the notification watermark;
        failure extends the streak by one. Returns the post-update state.
        """
        with self._mutex:
            row = self._conn.execute(
                "SELECT consecutive_failures, last_notified_count FROM failure_counters"
                " WHERE service = ? AND node = ?",
                (service, node),
            ).fetchone()
            if success:
                failures, notified = 0, 0
            else:
                failures = (int(row[0]) if row else 0) + 1
                notified = int(row[1]) if row else 0
            self._conn.execute(
                "INSERT INTO failure_counters"
                " (service, node, consecutive_failures, last_attempt_at, last_notified_count)"
                " VALUES (?, ?, ?, ?, ?)"
                " ON CONFLICT(service, node) DO UPDATE SET"
                " consecutive_failures=excluded.consecutive_failures,"
                " last_attempt_at=excluded.last_attempt_at,"
                " last_notified_count=excluded.last_notified_count",
                (service, node, failures, now, notified),
            )
            self._conn.commit()
        return FailureCounter(service, node, failures, now, notified)

    def get_counter(self, service: str, node: str) -> Optional[FailureCounter]:
        with self._mutex:
            row = self._conn.execute(
                "SELECT consecutive_failures, last_attempt_at, last_notified_count"
                " FROM failure_counters WHERE service = ? AND node = ?",
                (service, node),
            ).fetchone()
        if row is None:
            return None
        return FailureCounter(service, node, int(row[0]), float(row[1]), int(row[2]))

    def mark_notified(self, service: str, node: str) -> None:
        """Acknowledge a sent notification: watermark := current streak."""
        with self._mutex:
            self._conn.execute(
                "UPDATE failure_counters SET last_notified_count = consecutive_failures"
                " WHERE service = ? AND node = ?",
                (service, node),
            )
            self._conn.commit()

    def counters(self) -> list[FailureCounter]:
        with self._mutex:
            rows = self._conn.execute(
                "SELECT service, node, consecutive_failures, last_attempt_at,"
                " last_notified_count FROM failure_counters ORDER BY service, node"
            ).fetchall()
        return [
            FailureCounter(r[0], r[1], int(r[2]), float(r[3]), int(r[4])) for r in rows
        ]


def open_store(state_dir: str) -> Store:
    """Open (creating if needed) the state store under ``state_dir``."""
    return Store(state_dir)
