"""
green_cache.py - Stores computed Green fields so repeated runs skip the solves

Fields are kept in a small sqlite database:
- one row per (operator, source cell), keyed by a sha256 digest
- values stored as raw complex128 bytes

The operator key already hashes the domain, the coefficients, the grid and the
boundary conditions, so a hit is always the exact field a cold solve would return.
"""
import hashlib
import os
import sqlite3
import threading

import numpy as np

CACHE_ENV = "LAB_CACHE_DIR"
CACHE_FILE = "green_fields.sqlite"


def field_key(operator_key, cell):
    """Digest of an operator key and a source cell index."""
    text = f"{operator_key}:{','.join(str(int(i)) for i in cell)}"
    return hashlib.sha256(text.encode()).hexdigest()


def default_cache_dir(configured=None):
    """LAB_CACHE_DIR wins over the configured directory."""
    return os.environ.get(CACHE_ENV) or configured


class GreenCache:
    def __init__(self, directory=None):
        # No directory means an in-memory cache that goes away with the process
        if directory:
            os.makedirs(directory, exist_ok=True)
            self.path = os.path.join(directory, CACHE_FILE)
        else:
            self.path = ":memory:"
        self.conn = sqlite3.connect(self.path, check_same_thread=False)
        self.conn.row_factory = sqlite3.Row
        self._lock = threading.Lock()
        self.hits = 0
        self.misses = 0
        self._create_tables()

    def _create_tables(self):
        cursor = self.conn.cursor()
        cursor.execute("""
            CREATE TABLE IF NOT EXISTS green_fields (
                key TEXT PRIMARY KEY,
                operator_key TEXT,
                n INTEGER,
                is_complex INTEGER,
                payload BLOB
            )
        """)
        self.conn.commit()

    def get(self, operator_key, cell):
        """Cached values for this source cell, or None."""
        with self._lock:
            row = self.conn.execute(
                "SELECT n, is_complex, payload FROM green_fields WHERE key = ?",
                (field_key(operator_key, cell),)
            ).fetchone()
            if row is None:
                self.misses += 1
                return None
            self.hits += 1
        values = np.frombuffer(row['payload'], dtype='<c16').copy()[:row['n']]
        return values if row['is_complex'] else values.real.copy()

    def put(self, operator_key, cell, values):
        payload = np.asarray(values, dtype='<c16').tobytes()
        with self._lock:
            self.conn.execute(
                "INSERT OR REPLACE INTO green_fields (key, operator_key, n, is_complex, payload) VALUES (?, ?, ?, ?, ?)",
                (field_key(operator_key, cell), operator_key, len(values), int(np.iscomplexobj(values)), payload)
            )
            self.conn.commit()

    def count(self, operator_key=None):
        with self._lock:
            if operator_key is None:
                row = self.conn.execute("SELECT COUNT(*) AS c FROM green_fields").fetchone()
            else:
                row = self.conn.execute(
                    "SELECT COUNT(*) AS c FROM green_fields WHERE operator_key = ?", (operator_key,)
                ).fetchone()
        return row['c']

    def close(self):
        self.conn.close()
