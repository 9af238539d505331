#!/usr/bin/env python3
"""
Atomic file output shared by datasets, checkpoints and reports
"""

import logging
import os
import tempfile

import pandas as pd


def write_text_atomic(path: str, text: str) -> None:
    """Write to a temp file in the target directory, then rename over the target"""
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp_path = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix=os.path.basename(path))
    try:
        with os.fdopen(fd, "w") as handle:
            handle.write(text)
        os.replace(tmp_path, path)
    except BaseException:
        if os.path.exists(tmp_path):
            os.unlink(tmp_path)
        raise


def write_csv_atomic(frame: pd.DataFrame, path: str, **kwargs) -> None:
    # float_format=None keeps the shortest round-tripping repr of every value
    write_text_atomic(path, frame.to_csv(index=False, lineterminator="\n", **kwargs))
    logging.debug(f"Wrote {len(frame)} rows to {path}")


def read_csv_exact(path: str, **kwargs) -> pd.DataFrame:
    """Read a CSV written by write_csv_atomic without losing float precision"""
    return pd.read_csv(path, float_precision="round_trip", **kwargs)
