"""
Storage utilities for the DeeR toolkit.
Handles async JSON / JSON Lines file operations, checkpoints and
resolved-config snapshots with per-file locking and atomic writes.
"""

import asyncio
import hashlib
import json
import logging
import os
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional, Union

import numpy as np

from config import get_config

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT_VERSION = 1
RESOLVED_CONFIG_FILE = "resolved_config.json"

PathLike = Union[str, Path]


class StorageError(Exception):
    """A write helper reported failure."""


def ensure_written(ok: bool, path: PathLike) -> None:
    """Raise StorageError when a save helper returned False."""
    if not ok:
        raise StorageError(f"Failed to write {path}")


# Global lock for file operations to prevent race conditions
_file_locks: Dict[str, asyncio.Lock] = {}
_locks_lock: Optional[asyncio.Lock] = None


async def _get_file_lock(path: PathLike) -> asyncio.Lock:
    """Get or create a lock for a specific file."""
    global _locks_lock
    if _locks_lock is None:
        _locks_lock = asyncio.Lock()
    key = str(Path(path).resolve())
    async with _locks_lock:
        if key not in _file_locks:
            _file_locks[key] = asyncio.Lock()
        return _file_locks[key]


def resolve(name: PathLike) -> Path:
    """Absolute paths pass through; bare names live under the configured data dir."""
    path = Path(name)
    if path.is_absolute() or path.parent != Path("."):
        return path
    return Path(get_config().data_dir) / path


def _atomic_write_text(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp_path = path.with_suffix(path.suffix + ".tmp")
    tmp_path.write_text(text, encoding="utf-8")
    os.replace(tmp_path, path)


async def load_json(name: PathLike, default: Any = None) -> Any:
    """
    Load data from a JSON file.

    Args:
        name: File path (bare names resolve under the data dir)
        default: Value returned when the file is missing or unreadable

    Returns:
        Loaded data or default value
    """
    file_path = resolve(name)
    file_lock = await _get_file_lock(file_path)
    async with file_lock:
        try:
            if not file_path.exists():
                return default

            content = await asyncio.to_thread(file_path.read_text, "utf-8")
            try:
                return json.loads(content)
            except json.JSONDecodeError as e:
                # Backup corrupt file
                backup_path = file_path.with_suffix(file_path.suffix + ".bak")
                try:
                    await asyncio.to_thread(backup_path.write_text, content, "utf-8")
                    backup_note = f" Backed up to {backup_path}."
                except Exception:
                    backup_note = " Backup failed."
                logger.error(f"Error decoding JSON in {file_path}: {e}.{backup_note}")
                return default

        except OSError as e:
            logger.error(f"Error loading {file_path}: {e}")
            return default


async def save_json(name: PathLike, data: Any, indent: Optional[int] = 2) -> bool:
    """
    Save data to a JSON file atomically.

    Returns:
        True if successful, False otherwise
    """
    file_path = resolve(name)
    file_lock = await _get_file_lock(file_path)
    async with file_lock:
        try:
            json_str = json.dumps(data, indent=indent, ensure_ascii=False, allow_nan=False)
            await asyncio.to_thread(_atomic_write_text, file_path, json_str)
            return True
        except (TypeError, ValueError, OSError) as e:
            logger.error(f"Error saving {file_path}: {e}")
            return False


async def write_jsonl(name: PathLike, rows: Iterable[Dict]) -> bool:
    """Write one compact JSON object per line."""
    file_path = resolve(name)
    file_lock = await _get_file_lock(file_path)
    async with file_lock:
        try:
            text = "".join(json.dumps(row, separators=(",", ":"), allow_nan=False) + "\n" for row in rows)
            await asyncio.to_thread(_atomic_write_text, file_path, text)
            return True
        except (TypeError, ValueError, OSError) as e:
            logger.error(f"Error saving {file_path}: {e}")
            return False


async def read_jsonl(name: PathLike) -> List[Dict]:
    """Read a JSON Lines file; missing file gives an empty list, bad lines are skipped and logged."""
    file_path = resolve(name)
    file_lock = await _get_file_lock(file_path)
    async with file_lock:
        if not file_path.exists():
            return []
        try:
            content = await asyncio.to_thread(file_path.read_text, "utf-8")
        except OSError as e:
            logger.error(f"Error loading {file_path}: {e}")
            return []
    rows = []
    for number, line in enumerate(content.splitlines(), start=1):
        if not line.strip():
            continue
        try:
            rows.append(json.loads(line))
        except json.JSONDecodeError as e:
            logger.error(f"Skipping malformed line {number} of {file_path}: {e}")
    return rows


def file_sha256(name: PathLike) -> str:
    digest = hashlib.sha256()
    with open(resolve(name), "rb") as handle:
        for chunk in iter(lambda: handle.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


# Checkpoint storage functions

def _encode_arrays(arrays: Dict[str, np.ndarray]) -> Dict[str, Dict]:
    return {
        name: {"shape": list(arr.shape), "data": [float(v) for v in np.asarray(arr, dtype=np.float64).reshape(-1)]}
        for name, arr in arrays.items()
    }


def _decode_arrays(encoded: Dict[str, Dict]) -> Dict[str, np.ndarray]:
    return {name: np.array(item["data"], dtype=np.float64).reshape(item["shape"]) for name, item in encoded.items()}


async def save_checkpoint(name: PathLike, net_config: Dict, params: Dict[str, np.ndarray], rng_seed: int,
                          extra: Optional[Dict] = None, optimizer: Optional[Dict[str, np.ndarray]] = None) -> bool:
    """Versioned JSON checkpoint: header plus named flat 64-bit arrays."""
    payload = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "net_config": net_config,
        "rng_seed": rng_seed,
        "extra": extra or {},
        "params": _encode_arrays(params),
    }
    if optimizer is not None:
        payload["optimizer"] = _encode_arrays(optimizer)
    return await save_json(name, payload, indent=None)


async def load_checkpoint(name: PathLike) -> Optional[Dict]:
    """Load a checkpoint; arrays come back as float64 numpy arrays."""
    payload = await load_json(name)
    if payload is None:
        return None
    version = payload.get("format_version")
    if version != CHECKPOINT_FORMAT_VERSION:
        logger.error(f"Unsupported checkpoint format {version} in {name}")
        return None
    payload["params"] = _decode_arrays(payload["params"])
    if "optimizer" in payload:
        payload["optimizer"] = _decode_arrays(payload["optimizer"])
    return payload


async def save_resolved_config(out_dir: PathLike, resolved: Dict) -> bool:
    """Snapshot of the resolved run configuration next to a command's outputs."""
    return await save_json(Path(out_dir) / RESOLVED_CONFIG_FILE, resolved)
