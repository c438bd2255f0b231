"""
SQLite run ledger for moldpilot.
Self-bootstrapping: creates the ledger file and tables inside the output directory on first use.
Each scenario run is one row; each artifact it wrote is recorded with its sha256.
"""
from __future__ import annotations

import logging
import sqlite3
from datetime import datetime, timezone
from pathlib import Path
from typing import Any

from artifacts import sha256_file

logger = logging.getLogger("ledger")

LEDGER_NAME = "ledger.db"

# Parallel scenario processes may share one output directory
_CONNECT_TIMEOUT = 30.0

_SCHEMA = """
-- status: ok | failed
CREATE TABLE IF NOT EXISTS runs (
    id INTEGER PRIMARY KEY AUTOINCREMENT,
    kind TEXT NOT NULL,
    seed TEXT NOT NULL,
    config_sha256 TEXT NOT NULL,
    toolkit_version TEXT NOT NULL,
    plant_model_version TEXT NOT NULL,
    status TEXT NOT NULL CHECK (status IN ('ok', 'failed')),
    report_path TEXT,
    message TEXT,
    recorded_at TEXT NOT NULL
);

CREATE INDEX IF NOT EXISTS idx_runs_kind ON runs(kind);

CREATE TABLE IF NOT EXISTS artifacts (
    run_id INTEGER NOT NULL,
    path TEXT NOT NULL,
    sha256 TEXT NOT NULL,
    PRIMARY KEY (run_id, path),
    FOREIGN KEY (run_id) REFERENCES runs(id) ON DELETE CASCADE
);
"""


def ledger_path(output_dir: str | Path) -> Path:
    return Path(output_dir) / LEDGER_NAME


def init_ledger(path: Path) -> Path:
    """Create the ledger file and tables if missing. Returns the path."""
    path.parent.mkdir(parents=True, exist_ok=True)
    conn = sqlite3.connect(str(path), timeout=_CONNECT_TIMEOUT)
    conn.executescript(_SCHEMA)
    conn.commit()
    conn.close()
    return path


def get_connection(path: Path) -> sqlite3.Connection:
    init_ledger(path)
    conn = sqlite3.connect(str(path), timeout=_CONNECT_TIMEOUT)
    conn.execute("PRAGMA journal_mode=WAL")
    conn.execute("PRAGMA foreign_keys = ON")
    conn.row_factory = sqlite3.Row
    return conn


def record_run(
    path: Path,
    *,
    kind: str,
    seed: int,
    config_sha256: str,
    toolkit_version: str,
    plant_model_version: str,
    status: str,
    report_path: str | None = None,
    message: str | None = None,
    artifact_paths: list[Path] | None = None,
) -> int:
    """Insert one run and its artifact checksums. Paths are stored relative to the ledger directory."""
    base = path.parent
    conn = get_connection(path)
    try:
        cur = conn.execute(
            """INSERT INTO runs (kind, seed, config_sha256, toolkit_version, plant_model_version,
                                 status, report_path, message, recorded_at)
               VALUES (?, ?, ?, ?, ?, ?, ?, ?, ?)""",
            (
                kind,
                str(seed),
                config_sha256,
                toolkit_version,
                plant_model_version,
                status,
                report_path,
                message,
                datetime.now(timezone.utc).isoformat(),
            ),
        )
        run_id = int(cur.lastrowid)
        for p in artifact_paths or []:
            conn.execute(
                "INSERT OR REPLACE INTO artifacts (run_id, path, sha256) VALUES (?, ?, ?)",
                (run_id, str(Path(p).resolve().relative_to(base.resolve())), sha256_file(p)),
            )
        conn.commit()
    finally:
        conn.close()
    logger.info("Recorded run %d (%s, %s) with %d artifacts", run_id, kind, status, len(artifact_paths or []))
    return run_id


def list_runs(path: Path) -> list[dict[str, Any]]:
    if not path.exists():
        return []
    conn = get_connection(path)
    try:
        return [dict(r) for r in conn.execute("SELECT * FROM runs ORDER BY id")]
    finally:
        conn.close()


def run_artifacts(path: Path, run_id: int) -> list[dict[str, Any]]:
    conn = get_connection(path)
    try:
        rows = conn.execute("SELECT path, sha256 FROM artifacts WHERE run_id = ? ORDER BY path", (run_id,))
        return [dict(r) for r in rows]
    finally:
        conn.close()


def verify_artifacts(path: Path, run_id: int) -> list[tuple[str, bool]]:
    """(relative path, checksum matches) for every artifact of a run; missing files do not match."""
    results = []
    for row in run_artifacts(path, run_id):
        target = path.parent / row["path"]
        results.append((row["path"], target.exists() and sha256_file(target) == row["sha256"]))
    return results
