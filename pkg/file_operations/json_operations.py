import json
import logging
import os
from pathlib import Path
from typing import Any

import portalocker  # Cross-platform file locking

from core.errors import InputNotFoundError, StepwatchError
from file_operations.file_io import require_file


def canonical_json(data: Any) -> str:
    """Serialize with sorted keys and fixed indentation so equal data gives equal bytes."""
    return json.dumps(data, sort_keys=True, indent=2, ensure_ascii=False) + "\n"


def read_json(file_path: Path) -> Any:
    """Read a JSON document under a shared lock."""
    require_file(file_path)
    try:
        with portalocker.Lock(file_path, 'r', encoding='utf-8', timeout=10,
                              flags=portalocker.LockFlags.SHARED) as f:
            return json.load(f)
    except portalocker.LockException:
        logging.error(f"Could not acquire lock for reading {file_path}")
        raise StepwatchError(f"could not lock {file_path} for reading") from None
    except json.JSONDecodeError as e:
        raise StepwatchError(f"malformed JSON in {file_path}: {e}") from None
    except FileNotFoundError:
        raise InputNotFoundError(f"input file not found: {file_path}") from None


def write_json(file_path: Path, data: Any) -> Path:
    """Write canonical JSON through a locked temporary file and an atomic replace."""
    file_path.parent.mkdir(parents=True, exist_ok=True)
    temp_path = file_path.with_suffix(file_path.suffix + '.tmp')
    try:
        with portalocker.Lock(temp_path, 'w', encoding='utf-8', timeout=10, newline='\n') as f:
            f.write(canonical_json(data))
            f.flush()
            os.fsync(f.fileno())

        # Atomic rename - use os.replace for cross-platform atomic replace
        os.replace(str(temp_path), str(file_path))
        logging.debug(f"JSON saved: {file_path}")
        return file_path
    except portalocker.LockException:
        logging.error(f"Could not acquire lock for writing {file_path}")
        raise StepwatchError(f"could not lock {file_path} for writing") from None
    except Exception:
        if temp_path.exists():
            temp_path.unlink()
        raise


def write_json_lines(file_path: Path, records: list) -> Path:
    """Write one compact sorted-key JSON record per line."""
    lines = [json.dumps(record, sort_keys=True, ensure_ascii=False) for record in records]
    file_path.parent.mkdir(parents=True, exist_ok=True)
    file_path.write_text("".join(line + "\n" for line in lines), encoding='utf-8', newline='\n')
    return file_path
