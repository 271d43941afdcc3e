import csv
import hashlib
import logging
from pathlib import Path
from typing import List, Sequence, Tuple

import numpy as np

from core.errors import InputNotFoundError, ObservationError
from logger import logging_utils

BACKGROUND_COLUMN = "p_bg"


def require_file(file_path: Path) -> Path:
    """Raise InputNotFoundError unless file_path is an existing file."""
    if not file_path.is_file():
        raise InputNotFoundError(f"input file not found: {file_path}")
    return file_path


def save_content_to_file(content: str, file_path: Path) -> Path:
    """Save content to a file, return Path."""
    try:
        file_path.parent.mkdir(parents=True, exist_ok=True)
        file_path.write_text(content, encoding='utf-8', newline='\n')
        logging.debug(f"File saved: {file_path}")
        return file_path
    except Exception as e:
        logging_utils.log_exception(e, f"Error saving file: {file_path}")
        raise


def sha256_of_file(file_path: Path) -> str:
    digest = hashlib.sha256()
    with open(file_path, 'rb') as f:
        for block in iter(lambda: f.read(65536), b''):
            digest.update(block)
    return digest.hexdigest()


def sha256_of_text(text: str) -> str:
    return hashlib.sha256(text.encode('utf-8')).hexdigest()


def format_float(value: float) -> str:
    """Shortest repr that round-trips; keeps written files byte-stable."""
    return repr(float(value))


def frame_header(n_steps: int, background: bool) -> List[str]:
    header = ["t"] + [f"p_{i}" for i in range(1, n_steps + 1)]
    if background:
        header.append(BACKGROUND_COLUMN)
    return header


def write_frame_table(file_path: Path, times: Sequence[float], probs: np.ndarray, background: bool = False) -> Path:
    """Write a frame stream as comma-separated rows `t, p_1..p_N[, p_bg]`."""
    probs = np.asarray(probs, dtype=float)
    n_columns = probs.shape[1] if probs.ndim == 2 else 0
    n_steps = n_columns - 1 if background else n_columns
    file_path.parent.mkdir(parents=True, exist_ok=True)
    with open(file_path, 'w', encoding='utf-8', newline='') as f:
        writer = csv.writer(f, lineterminator='\n')
        writer.writerow(frame_header(n_steps, background))
        for t, row in zip(times, probs):
            writer.writerow([format_float(t)] + [format_float(p) for p in row])
    logging.debug(f"Frame stream saved: {file_path} ({len(times)} frames)")
    return file_path


def read_frame_table(file_path: Path) -> Tuple[np.ndarray, np.ndarray, bool]:
    """Read a frame stream file; returns (times, probs, has_background)."""
    require_file(file_path)
    with open(file_path, 'r', encoding='utf-8', newline='') as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if not header or header[0].strip() != "t":
            raise ObservationError(f"frame file {file_path} lacks a 't, p_1..p_N' header")
        header = [column.strip() for column in header]
        has_background = header[-1] == BACKGROUND_COLUMN
        rows = []
        for line_number, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise ObservationError(f"{file_path}:{line_number}: expected {len(header)} columns, got {len(row)}")
            try:
                rows.append([float(value) for value in row])
            except ValueError as e:
                raise ObservationError(f"{file_path}:{line_number}: {e}") from None
    if not rows:
        return np.zeros(0), np.zeros((0, len(header) - 1)), has_background
    table = np.asarray(rows, dtype=float)
    return table[:, 0], table[:, 1:], has_background
