#!/usr/bin/env python3
"""
Database module for the sweep ledger
Uses SQLite so an interrupted sweep can resume where it stopped
"""

import sqlite3
import json
import logging
from datetime import datetime
from typing import Dict, Any, List, Optional

STATUS_RUNNING = "running"
STATUS_DONE = "done"
STATUS_FAILED = "failed"


class RunDatabase:
    """One row per sweep cell: its config hash, status, output location and any error"""

    def __init__(self, db_path: str = "runs.db"):
        self.db_path = db_path
        self.init_database()

    def init_database(self):
        """Initialize the database with required tables"""
        try:
            with sqlite3.connect(self.db_path) as conn:
                cursor = conn.cursor()

                cursor.execute('''
                    CREATE TABLE IF NOT EXISTS runs (
                        cell TEXT PRIMARY KEY,
                        config_hash TEXT NOT NULL,
                        status TEXT NOT NULL,
                        output_path TEXT,
                        error TEXT,
                        details TEXT,
                        started_at TIMESTAMP DEFAULT CURRENT_TIMESTAMP,
                        finished_at TIMESTAMP
                    )
                ''')

                conn.commit()
                logging.debug(f"Run database ready at {self.db_path}")

        except sqlite3.Error as e:
            logging.error(f"Database initialization error: {e}")
            raise

    def get_run(self, cell: str) -> Optional[Dict[str, Any]]:
        try:
            with sqlite3.connect(self.db_path) as conn:
                conn.row_factory = sqlite3.Row
                cursor = conn.cursor()
                cursor.execute('SELECT * FROM runs WHERE cell = ?', (cell,))

                row = cursor.fetchone()
                if row:
                    run = dict(row)
                    if run.get('details'):
                        try:
                            run['details'] = json.loads(run['details'])
                        except json.JSONDecodeError:
                            pass
                    return run
                return None

        except sqlite3.Error as e:
            logging.error(f"Error getting run {cell}: {e}")
            return None

    def is_done(self, cell: str, config_hash: str) -> bool:
        """True when the cell finished under the same configuration"""
        run = self.get_run(cell)
        return bool(run) and run['status'] == STATUS_DONE and run['config_hash'] == config_hash

    def start_run(self, cell: str, config_hash: str, output_path: str) -> bool:
        try:
            with sqlite3.connect(self.db_path) as conn:
                cursor = conn.cursor()
                cursor.execute('''
                    INSERT OR REPLACE INTO runs
                    (cell, config_hash, status, output_path, error, details, started_at, finished_at)
                    VALUES (?, ?, ?, ?, NULL, NULL, ?, NULL)
                ''', (cell, config_hash, STATUS_RUNNING, output_path, datetime.now().isoformat()))
                conn.commit()
                return True

        except sqlite3.Error as e:
            logging.error(f"Error starting run {cell}: {e}")
            return False

    def _finish(self, cell: str, status: str, error: Optional[str], details: Optional[Dict[str, Any]]) -> bool:
        try:
            with sqlite3.connect(self.db_path) as conn:
                cursor = conn.cursor()
                cursor.execute('''
                    UPDATE runs SET status = ?, error = ?, details = ?, finished_at = ?
                    WHERE cell = ?
                ''', (status, error, json.dumps(details) if details else None,
                      datetime.now().isoformat(), cell))
                conn.commit()
                return cursor.rowcount == 1

        except sqlite3.Error as e:
            logging.error(f"Error updating run {cell}: {e}")
            return False

    def finish_run(self, cell: str, details: Optional[Dict[str, Any]] = None) -> bool:
        return self._finish(cell, STATUS_DONE, None, details)

    def fail_run(self, cell: str, error: str) -> bool:
        logging.error(f"Sweep cell {cell} failed: {error}")
        return self._finish(cell, STATUS_FAILED, error, None)

    def list_runs(self, status: Optional[str] = None) -> List[Dict[str, Any]]:
        try:
            with sqlite3.connect(self.db_path) as conn:
                conn.row_factory = sqlite3.Row
                cursor = conn.cursor()
                if status is None:
                    cursor.execute('SELECT * FROM runs ORDER BY cell')
                else:
                    cursor.execute('SELECT * FROM runs WHERE status = ? ORDER BY cell', (status,))
                return [dict(row) for row in cursor.fetchall()]

        except sqlite3.Error as e:
            logging.error(f"Error listing runs: {e}")
            return []

    def summary(self) -> Dict[str, int]:
        counts = {STATUS_RUNNING: 0, STATUS_DONE: 0, STATUS_FAILED: 0}
        for run in self.list_runs():
            counts[run['status']] = counts.get(run['status'], 0) + 1
        return counts

    def delete_run(self, cell: str) -> bool:
        try:
            with sqlite3.connect(self.db_path) as conn:
                cursor = conn.cursor()
                cursor.execute('DELETE FROM runs WHERE cell = ?', (cell,))
                conn.commit()
                return True

        except sqlite3.Error as e:
            logging.error(f"Error deleting run {cell}: {e}")
            return False
